"""
Modelo de datos del corpus de heridas.

Define las clases de severidad, las cajas y los registros de imagen; lee y
escribe manifiestos, particiona por grupos sin solapamiento y genera
conjuntos sintéticos separables por color para pruebas de escritorio.
"""

import enum
import io
import json
import logging
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml
from jsonschema import ValidationError, validate
from PIL import Image

from heridas.errors import (DuplicateId, EmptyDataset, EmptyResult, InvalidBox, InvalidSpec,
                            InvalidConfig, MalformedManifest, TooFewGroups, UnknownLabel)
from heridas.validation import load_schema

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["image_id", "path", "label", "boxes", "group_id", "width", "height"]


class SeverityClass(enum.IntEnum):
    """Clases Rojo-Amarillo-Verde; el orden entero es el orden de severidad"""
    GREEN = 0
    YELLOW = 1
    RED = 2

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def from_label(cls, text):
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise UnknownLabel(f"Etiqueta desconocida: {text!r} (se espera green, yellow o red)") from None


@dataclass(frozen=True)
class BoundingBox:
    """Caja en coordenadas de la imagen original, extremos max exclusivos"""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def is_valid_for(self, width=None, height=None):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            return False
        if width is not None and self.x_max > width:
            return False
        if height is not None and self.y_max > height:
            return False
        return True

    def check(self, width=None, height=None):
        if not self.is_valid_for(width, height):
            dims = f" en una imagen {width}x{height}" if width is not None else ""
            raise InvalidBox(f"Caja inválida {self.as_list()}{dims}")
        return self

    def contains(self, other):
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def full(cls, width, height):
        return cls(0, 0, int(width), int(height))


@dataclass(frozen=True)
class ImageRecord:
    """
    Una foto del manifiesto.

    Si ``boxes`` está vacío la fila es un ROI ya recortado y el raster completo
    hace de caja.
    """
    image_id: str
    path: str
    label: SeverityClass
    boxes: tuple = ()
    group_id: str = None
    width: int = None
    height: int = None

    def __post_init__(self):
        if self.group_id is None:
            object.__setattr__(self, "group_id", self.image_id)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def is_roi_level(self):
        return not self.boxes

    def roi_boxes(self, width, height):
        """Cajas efectivas para un raster de ``width`` x ``height``"""
        if self.is_roi_level:
            return (BoundingBox.full(width, height),)
        for box in self.boxes:
            box.check(width, height)
        return self.boxes

    def to_row(self):
        return {
            "image_id": self.image_id,
            "path": self.path,
            "label": self.label.label,
            "boxes": json.dumps([b.as_list() for b in self.boxes], separators=(",", ":")),
            "group_id": self.group_id,
            "width": "" if self.width is None else str(self.width),
            "height": "" if self.height is None else str(self.height),
        }

    @classmethod
    def check_schema(cls, row):
        """Valida una fila contra el esquema JSON del manifiesto"""
        validate(instance=row, schema=load_schema("manifest_row_schema.json"))


@dataclass(frozen=True)
class DatasetSplit:
    """Partición train+val / test; ``assignment`` mapea group_id a partición"""
    train_val: tuple
    test: tuple
    ratio: float
    seed: int
    assignment: dict = field(default_factory=dict)

    def groups(self, partition):
        return {g for g, p in self.assignment.items() if p == partition}

    def achieved_ratio(self):
        return len(self.train_val) / (len(self.train_val) + len(self.test))

    def provenance(self):
        return {
            "ratio": self.ratio,
            "seed": self.seed,
            "achieved_ratio": self.achieved_ratio(),
            "assignment": dict(sorted(self.assignment.items())),
        }


def _parse_boxes(value, line):
    if value is None or value == "":
        return []
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as e:
            raise MalformedManifest(f"fila {line}: columna boxes ilegible ({e.msg})") from None
    if isinstance(value, list) and len(value) == 4 and all(not isinstance(v, list) for v in value):
        value = [value]
    return value


def _parse_int(value, column, line):
    if value is None or value == "":
        return None
    try:
        return int(value)
    except (TypeError, ValueError):
        raise MalformedManifest(f"fila {line}: {column} no es un entero ({value!r})") from None


def _image_dims(base_dir, path):
    full = path if os.path.isabs(path) else os.path.join(base_dir, path)
    if not os.path.exists(full):
        return None, None
    with Image.open(full) as im:
        return im.size


def _record_from_row(raw, line, base_dir=None):
    row = {k: v for k, v in raw.items() if v is not None and v != ""}
    row["boxes"] = _parse_boxes(raw.get("boxes"), line)
    for column in ("width", "height"):
        if column in row:
            row[column] = _parse_int(row[column], column, line)
    for column in ("image_id", "path", "label", "group_id"):
        if column in row:
            row[column] = str(row[column]).strip()

    try:
        ImageRecord.check_schema(row)
    except ValidationError as e:
        raise MalformedManifest(f"fila {line}: {e.message}") from None

    label = SeverityClass.from_label(row["label"])
    width, height = row.get("width"), row.get("height")
    if (width is None or height is None) and base_dir is not None:
        width, height = _image_dims(base_dir, row["path"])

    boxes = []
    for values in row["boxes"]:
        box = BoundingBox(*[int(v) for v in values])
        if not box.is_valid_for(width, height):
            raise InvalidBox(f"fila {line}: caja inválida {values} para la imagen {row['image_id']}")
        boxes.append(box)

    return ImageRecord(
        image_id=row["image_id"],
        path=row["path"],
        label=label,
        boxes=tuple(boxes),
        group_id=row.get("group_id"),
        width=row.get("width"),
        height=row.get("height"),
    )


def _rows_from_csv(source):
    try:
        df = pd.read_csv(io.StringIO(source), dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedManifest(f"Manifiesto CSV ilegible: {e}") from None
    missing = [c for c in ("image_id", "path", "label") if c not in df.columns]
    if missing:
        raise MalformedManifest(f"Faltan columnas en el manifiesto: {', '.join(missing)}")
    unknown = [c for c in df.columns if c not in MANIFEST_COLUMNS]
    if unknown:
        raise MalformedManifest(f"Columnas desconocidas en el manifiesto: {', '.join(unknown)}")
    # la fila 1 es la cabecera
    return [(i + 2, row) for i, row in enumerate(df.to_dict(orient="records"))]


def _rows_from_structured(source):
    try:
        data = yaml.safe_load(source)
    except yaml.YAMLError as e:
        raise MalformedManifest(f"Manifiesto estructurado ilegible: {e}") from None
    if isinstance(data, dict):
        data = data.get("records")
    if not isinstance(data, list) or not all(isinstance(r, dict) for r in data):
        raise MalformedManifest("El manifiesto estructurado debe ser una lista de registros")
    return [(i + 1, row) for i, row in enumerate(data)]


def parse_manifest(source, fmt="csv", base_dir=None):
    """
    Convierte el texto de un manifiesto en una lista de ImageRecord validados.

    Args:
        source: texto del manifiesto
        fmt: 'csv' o 'json'/'yaml' (lista de objetos o {"records": [...]})
        base_dir: directorio para resolver rutas y leer dimensiones si faltan

    Raises:
        MalformedManifest, InvalidBox, UnknownLabel, DuplicateId
    """
    rows = _rows_from_csv(source) if fmt == "csv" else _rows_from_structured(source)
    records = []
    seen = set()
    for line, raw in rows:
        record = _record_from_row(raw, line, base_dir)
        if record.image_id in seen:
            raise DuplicateId(f"fila {line}: image_id repetido {record.image_id!r}")
        seen.add(record.image_id)
        records.append(record)
    logger.debug("Manifiesto leído: %d registros", len(records))
    return records


def serialize_manifest(records):
    """Serializa registros como CSV; parse_manifest(serialize_manifest(r)) == r"""
    df = pd.DataFrame([r.to_row() for r in records], columns=MANIFEST_COLUMNS)
    return df.to_csv(index=False, lineterminator="\n")


def load_manifest(path):
    """Lee un manifiesto .csv, .json o .yaml; las rutas se resuelven junto al fichero"""
    fmt = "csv" if str(path).lower().endswith(".csv") else "json"
    with open(path, "r", encoding="utf-8") as f:
        source = f.read()
    return parse_manifest(source, fmt=fmt, base_dir=os.path.dirname(os.path.abspath(path)))


def class_counts(records):
    """Número de elementos por clase, siempre con las tres claves"""
    if not records:
        raise EmptyDataset("No hay registros que contar")
    counter = Counter(r.label for r in records)
    return OrderedDict((cls, counter.get(cls, 0)) for cls in SeverityClass)


def filter_classes(records, keep):
    """Conserva, en orden, los elementos cuya etiqueta está en ``keep``"""
    keep = {SeverityClass(k) for k in keep}
    if len(keep) < 2:
        raise InvalidConfig("filter_classes necesita al menos dos clases")
    result = [r for r in records if r.label in keep]
    if not result:
        names = ", ".join(sorted(k.label for k in keep))
        raise EmptyResult(f"Ningún elemento pertenece a las clases {names}")
    return result


def split_by_group(items, ratio, seed):
    """
    Particiona ``items`` (cualquier objeto con ``group_id``) en train+val y test.

    Los grupos se barajan con ``seed`` y se acumulan en train+val hasta el
    objetivo ``ratio * n``; el grupo que cruza el objetivo va a la partición
    que deja el recuento más cerca, el resto a test. Cada partición recibe al
    menos un grupo.
    """
    if not 0 < ratio < 1:
        raise InvalidConfig(f"ratio debe estar en (0, 1), no {ratio}")

    groups = OrderedDict()
    for item in items:
        groups.setdefault(item.group_id, []).append(item)
    if len(groups) < 2:
        raise TooFewGroups(f"Se necesitan al menos 2 grupos distintos, hay {len(groups)}")

    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    shuffled = [keys[i] for i in order]

    n = sum(len(v) for v in groups.values())
    target = ratio * n
    assignment = {}
    count = 0
    crossed = False
    for key in shuffled:
        size = len(groups[key])
        if crossed or count >= target:
            crossed = True
            assignment[key] = "test"
            continue
        if count + size <= target or abs(count + size - target) <= abs(count - target):
            assignment[key] = "train_val"
            count += size
        else:
            assignment[key] = "test"
            crossed = True

    # partición vacía: se mueve el grupo cuyo tamaño deja el recuento más cerca del objetivo
    if all(p == "train_val" for p in assignment.values()):
        moved = min(shuffled, key=lambda k: abs(len(groups[k]) - (n - target)))
        assignment[moved] = "test"
    elif all(p == "test" for p in assignment.values()):
        moved = min(shuffled, key=lambda k: abs(len(groups[k]) - target))
        assignment[moved] = "train_val"

    train_val = tuple(i for i in items if assignment[i.group_id] == "train_val")
    test = tuple(i for i in items if assignment[i.group_id] == "test")
    logger.debug("Partición por grupos: %d train+val, %d test (seed=%d)", len(train_val), len(test), seed)
    return DatasetSplit(train_val=train_val, test=test, ratio=ratio, seed=seed, assignment=assignment)


def carve_validation(items, fraction=0.2, seed=0):
    """Separa por grupos una fracción de validación dentro de train+val"""
    split = split_by_group(items, 1.0 - fraction, seed)
    return list(split.train_val), list(split.test)


CLASS_COLORS = {
    SeverityClass.GREEN: (60, 160, 70),
    SeverityClass.YELLOW: (215, 195, 60),
    SeverityClass.RED: (190, 45, 45),
}
BACKGROUND_COLOR = (175, 150, 135)


@dataclass(frozen=True)
class FixtureSpec:
    """Parámetros del generador sintético"""
    per_class: int = 10
    width: int = 128
    height: int = 128
    boxes_per_image: tuple = (1, 1)
    noise: float = 12.0

    def counts(self):
        if isinstance(self.per_class, dict):
            return {SeverityClass.from_label(k) if isinstance(k, str) else SeverityClass(k): int(v)
                    for k, v in self.per_class.items()}
        return {cls: int(self.per_class) for cls in SeverityClass}

    def check(self):
        counts = self.counts()
        lo, hi = self.boxes_per_image
        if any(v < 0 for v in counts.values()) or sum(counts.values()) == 0:
            raise InvalidSpec("Los recuentos por clase deben ser >= 0 y no todos nulos")
        if self.width < 16 or self.height < 16:
            raise InvalidSpec("El raster sintético debe medir al menos 16x16")
        if not 1 <= lo <= hi:
            raise InvalidSpec(f"Rango de cajas por imagen inválido: {self.boxes_per_image}")
        if self.noise < 0:
            raise InvalidSpec("El ruido no puede ser negativo")


@dataclass(frozen=True)
class Fixture:
    records: tuple
    rasters: dict


def _round_robin_labels(counts):
    remaining = dict(counts)
    labels = []
    while any(remaining.values()):
        for cls in SeverityClass:
            if remaining.get(cls, 0) > 0:
                labels.append(cls)
                remaining[cls] -= 1
    return labels


def generate_fixture(spec, seed):
    """
    Genera registros y rasters separables por color.

    El interior de cada caja se rellena con el color de su clase más ruido
    gaussiano; el fondo es común a todas las clases. Determinista por ``seed``.
    """
    spec.check()
    rng = np.random.default_rng(seed)
    lo, hi = spec.boxes_per_image
    w, h = spec.width, spec.height

    records = []
    rasters = {}
    for i, label in enumerate(_round_robin_labels(spec.counts())):
        image_id = f"fx{i:05d}"
        raster = rng.normal(BACKGROUND_COLOR, spec.noise, size=(h, w, 3))
        boxes = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            bw = int(rng.integers(w // 5, w // 3 + 1))
            bh = int(rng.integers(h // 5, h // 3 + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = BoundingBox(x0, y0, x0 + bw, y0 + bh)
            raster[y0:y0 + bh, x0:x0 + bw] = rng.normal(CLASS_COLORS[label], spec.noise, size=(bh, bw, 3))
            boxes.append(box)
        rasters[image_id] = np.clip(np.rint(raster), 0, 255).astype(np.uint8)
        records.append(ImageRecord(
            image_id=image_id,
            path=f"images/{image_id}.png",
            label=label,
            boxes=tuple(boxes),
            width=w,
            height=h,
        ))
    return Fixture(records=tuple(records), rasters=rasters)


def write_fixture(fixture, out_dir):
    """Escribe los PNG y ``manifest.csv``; devuelve la ruta del manifiesto"""
    for record in fixture.records:
        path = os.path.join(out_dir, record.path)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(fixture.rasters[record.image_id]).save(path)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", encoding="utf-8", newline="") as f:
        f.write(serialize_manifest(fixture.records))
    logger.info("Fixture escrito en %s (%d imágenes)", out_dir, len(fixture.records))
    return manifest_path


def load_raster(record, base_dir):
    """Lee el raster RGB de un registro como array HxWx3 uint8"""
    path = record.path if os.path.isabs(record.path) else os.path.join(base_dir, record.path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
