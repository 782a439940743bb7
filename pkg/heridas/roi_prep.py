"""
Preparación de muestras listas para el modelo.

Recorta los ROIs con los cuatro niveles de zoom-out (Z0-Z3), aplica el
esquema de aumento x6 (identidad, dos volteos, tres rotaciones) y redimensiona
para cada backbone. También escribe y lee el directorio de datos preparados:

    <root>/<canal>/<split>/<clase>/<source_id>_<caja>_<transformación>.png

más un ``index.csv`` con la procedencia de cada muestra.
"""

import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import cv2
import numpy as np
import pandas as pd
from PIL import Image

from heridas.dataset_core import BoundingBox, SeverityClass, carve_validation, split_by_group
from heridas.errors import AlreadyAugmented, BoxOutOfRange, MissingPreparedData

logger = logging.getLogger(__name__)

MULTIZOOM = "multizoom"
AUGMENTATION_FACTOR = 6
INDEX_FILE = "index.csv"
SPLIT_FILE = "split.json"
SUMMARY_FILE = "summary.csv"
INDEX_COLUMNS = ["channel", "split", "source_id", "box_index", "transform", "label", "group_id",
                 "height", "width", "path"]


class ZoomChannel(enum.Enum):
    """Canal de zoom-out; el valor es el relleno en píxeles de la imagen original"""
    Z0 = 0
    Z1 = 50
    Z2 = 100
    Z3 = 150

    @property
    def padding(self):
        return self.value


class TransformTag(enum.Enum):
    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT25 = "rot25"
    ROT45 = "rot45"
    ROT90 = "rot90"


class FillPolicy(enum.Enum):
    REFLECT = "reflect"
    CONSTANT = "constant"


_ROTATION_DEGREES = {TransformTag.ROT25: 25.0, TransformTag.ROT45: 45.0}
_TRANSFORM_ORDER = {tag: i for i, tag in enumerate(TransformTag)}


@dataclass(frozen=True, eq=False)
class RoiSample:
    source_id: str
    box_index: int
    channel: ZoomChannel
    transform: TransformTag
    raster: np.ndarray
    label: SeverityClass
    group_id: str = None

    def __post_init__(self):
        if self.group_id is None:
            object.__setattr__(self, "group_id", self.source_id)

    @property
    def key(self):
        """Clave de alineación entre canales"""
        return (self.source_id, self.box_index, self.transform.value)

    @property
    def file_name(self):
        return f"{self.source_id}_{self.box_index}_{self.transform.value}.png"


@dataclass(frozen=True)
class RoiRef:
    """Referencia a un ROI (registro, caja) usada para particionar"""
    source_id: str
    box_index: int
    group_id: str
    label: SeverityClass


def channels_for(setting):
    """Canales a preparar para un valor de ``channel`` de la configuración"""
    if setting == MULTIZOOM:
        return list(ZoomChannel)
    if isinstance(setting, ZoomChannel):
        return [setting]
    return [ZoomChannel[setting]]


def pad_box(box, padding, image_dims):
    """Extiende cada lado ``padding`` píxeles y recorta a la imagen (W, H)"""
    width, height = image_dims
    return BoundingBox(
        max(0, box.x_min - padding),
        max(0, box.y_min - padding),
        min(width, box.x_max + padding),
        min(height, box.y_max + padding),
    )


def crop(raster, box):
    """Copia de la región de la caja; BoxOutOfRange si no cabe en el raster"""
    height, width = raster.shape[:2]
    if not box.is_valid_for(width, height):
        raise BoxOutOfRange(f"La caja {box.as_list()} no cabe en un raster {width}x{height}")
    return raster[box.y_min:box.y_max, box.x_min:box.x_max].copy()


def apply_transform(raster, tag, fill=FillPolicy.REFLECT):
    """
    Aplica una transformación de aumento.

    Las rotaciones de 25 y 45 grados giran sobre el centro sin cambiar el
    lienzo, con interpolación bilineal; las esquinas vacías se rellenan según
    ``fill``. ROT90 intercambia alto y ancho.
    """
    if tag is TransformTag.IDENTITY:
        return raster.copy()
    if tag is TransformTag.HFLIP:
        return np.ascontiguousarray(raster[:, ::-1])
    if tag is TransformTag.VFLIP:
        return np.ascontiguousarray(raster[::-1])
    if tag is TransformTag.ROT90:
        return np.ascontiguousarray(np.rot90(raster))

    height, width = raster.shape[:2]
    matrix = cv2.getRotationMatrix2D(((width - 1) / 2.0, (height - 1) / 2.0), _ROTATION_DEGREES[tag], 1.0)
    border = cv2.BORDER_REFLECT_101 if FillPolicy(fill) is FillPolicy.REFLECT else cv2.BORDER_CONSTANT
    return cv2.warpAffine(raster, matrix, (width, height), flags=cv2.INTER_LINEAR,
                          borderMode=border, borderValue=(0, 0, 0))


def resize_for_backbone(raster, target_dims):
    """Redimensiona (bilineal, sin conservar aspecto) a ``target_dims`` = (alto, ancho)"""
    height, width = target_dims
    if raster.shape[:2] == (height, width):
        return raster.copy()
    return cv2.resize(raster, (width, height), interpolation=cv2.INTER_LINEAR)


def augment_set(samples, fill=FillPolicy.REFLECT):
    """Multiplica el conjunto por seis: una muestra por TransformTag"""
    if any(s.transform is not TransformTag.IDENTITY for s in samples):
        raise AlreadyAugmented("augment_set solo acepta muestras sin transformar")
    return [replace(s, transform=tag, raster=apply_transform(s.raster, tag, fill))
            for s in samples for tag in TransformTag]


def _raster_for(rasters, record):
    return rasters(record) if callable(rasters) else rasters[record.image_id]


def _record_samples(record, channel, rasters):
    raster = _raster_for(rasters, record)
    height, width = raster.shape[:2]
    samples = []
    for index, box in enumerate(record.roi_boxes(width, height)):
        padded = pad_box(box, channel.padding, (width, height))
        samples.append(RoiSample(
            source_id=record.image_id,
            box_index=index,
            channel=channel,
            transform=TransformTag.IDENTITY,
            raster=crop(raster, padded),
            label=record.label,
            group_id=record.group_id,
        ))
    return samples


def prepare_channel(records, channel, rasters, workers=1):
    """
    Una muestra por par (registro, caja) recortada con el relleno del canal.

    ``rasters`` es un dict image_id -> array o una función registro -> array.
    El orden de salida sigue al de ``records`` sea cual sea ``workers``.
    """
    channel = ZoomChannel[channel] if isinstance(channel, str) else channel
    if channel is not ZoomChannel.Z0 and any(r.is_roi_level for r in records):
        logger.warning("Hay filas ROI sin caja de origen: en %s equivalen a Z0", channel.name)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(lambda r: _record_samples(r, channel, rasters), records))
    else:
        nested = [_record_samples(r, channel, rasters) for r in records]
    return [s for group in nested for s in group]


def roi_refs(records):
    """Referencias (registro, caja) en orden de manifiesto"""
    return [RoiRef(r.image_id, i, r.group_id, r.label)
            for r in records for i in range(max(1, len(r.boxes)))]


@dataclass
class PreparedData:
    """Muestras por split y canal más la procedencia de la partición"""
    samples: dict
    split: object
    val_keys: frozenset

    def counts(self, split, channel):
        return len(self.samples.get(split, {}).get(channel, []))


def prepare_partitions(records, channel_setting, rasters, ratio=0.8, val_fraction=0.2,
                       split_seed=0, val_seed=0, fill=FillPolicy.REFLECT, workers=1):
    """
    Particiona por grupos, recorta cada canal y aumenta solo el entrenamiento.

    Validación y entrenamiento usan el canal pedido; test solo se produce en Z0
    salvo en multi-zoom, donde todos los splits llevan los cuatro canales.
    """
    refs = roi_refs(records)
    split = split_by_group(refs, ratio, split_seed)
    train_refs, val_refs = carve_validation(list(split.train_val), val_fraction, val_seed)
    partition = {}
    for name, part in (("train", train_refs), ("val", val_refs), ("test", split.test)):
        for ref in part:
            partition[(ref.source_id, ref.box_index)] = name

    channels = channels_for(channel_setting)
    split_channels = {
        "train": channels,
        "val": channels,
        "test": channels if channel_setting == MULTIZOOM else [ZoomChannel.Z0],
    }
    needed = sorted({c for cs in split_channels.values() for c in cs}, key=lambda c: c.value)

    samples = {name: {} for name in split_channels}
    for channel in needed:
        cropped = prepare_channel(records, channel, rasters, workers=workers)
        for name, chans in split_channels.items():
            if channel not in chans:
                continue
            part = [s for s in cropped if partition[(s.source_id, s.box_index)] == name]
            samples[name][channel] = augment_set(part, fill) if name == "train" else part

    logger.info("ROIs: %d train, %d val, %d test", len(train_refs), len(val_refs), len(split.test))
    return PreparedData(samples=samples, split=split,
                        val_keys=frozenset((r.source_id, r.box_index) for r in val_refs))


def align_channels(samples_by_channel):
    """
    Agrupa muestras de varios canales por clave (source_id, caja, transformación).

    Devuelve [(tupla de rasters en orden Z0..Z3, etiqueta, clave)] ordenado por
    clave; solo entran las claves presentes en todos los canales.
    """
    channels = sorted(samples_by_channel, key=lambda c: c.value)
    by_key = [{s.key: s for s in samples_by_channel[c]} for c in channels]
    keys = set(by_key[0])
    for mapping in by_key[1:]:
        keys &= set(mapping)
    ordered = sorted(keys, key=lambda k: (k[0], k[1], _TRANSFORM_ORDER[TransformTag(k[2])]))
    return [(tuple(m[k].raster for m in by_key), by_key[0][k].label, k) for k in ordered]


def dataset_summary(train_counts, val_counts, test_counts):
    """
    Tabla por clase con ROIs por split y recuentos tras el aumento.

    Solo el entrenamiento se aumenta, así que ``augmented_train`` = 6 x ``train``.
    """
    rows = []
    for cls in SeverityClass:
        train, val, test = train_counts.get(cls, 0), val_counts.get(cls, 0), test_counts.get(cls, 0)
        rows.append({
            "class": cls.label,
            "train": train,
            "val": val,
            "test": test,
            "total": train + val + test,
            "augmented_train": train * AUGMENTATION_FACTOR,
            "augmented_total": train * AUGMENTATION_FACTOR + val + test,
        })
    df = pd.DataFrame(rows).set_index("class")
    df.loc["total"] = df.sum()
    return df


def audit_augmentation(rois, augmented):
    """
    Comprueba la ley x6 celda a celda.

    Args:
        rois: clase -> ROIs antes de aumentar
        augmented: clase -> ROIs declarados tras aumentar

    Returns:
        list: un dict por celda que no cumple, con ``swapped_with`` si el valor
        esperado aparece en otra fila (transcripción intercambiada)
    """
    expected = {k: v * AUGMENTATION_FACTOR for k, v in rois.items()}
    findings = []
    for key, value in augmented.items():
        if expected.get(key) == value:
            continue
        swapped = [k for k, v in expected.items() if k != key and v == value]
        findings.append({
            "row": key,
            "expected": expected.get(key),
            "found": value,
            "swapped_with": swapped[0] if swapped else None,
        })
    return findings


def _sample_path(sample, split):
    return os.path.join(sample.channel.name, split, sample.label.label, sample.file_name)


def write_prepared(prepared, root, workers=1):
    """Escribe PNGs, ``index.csv``, ``split.json`` y ``summary.csv``"""
    rows = []
    jobs = []
    for split, by_channel in prepared.samples.items():
        for channel, samples in by_channel.items():
            for s in samples:
                rel = _sample_path(s, split)
                jobs.append((os.path.join(root, rel), s.raster))
                rows.append({
                    "channel": channel.name,
                    "split": split,
                    "source_id": s.source_id,
                    "box_index": s.box_index,
                    "transform": s.transform.value,
                    "label": s.label.label,
                    "group_id": s.group_id,
                    "height": s.raster.shape[0],
                    "width": s.raster.shape[1],
                    "path": rel.replace(os.sep, "/"),
                })

    def _save(job):
        path, raster = job
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(raster).save(path)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_save, jobs))
    else:
        for job in jobs:
            _save(job)

    index = pd.DataFrame(rows, columns=INDEX_COLUMNS)
    index["_t"] = index["transform"].map(lambda t: _TRANSFORM_ORDER[TransformTag(t)])
    index = index.sort_values(["channel", "split", "source_id", "box_index", "_t"]).drop(columns="_t")
    index.to_csv(os.path.join(root, INDEX_FILE), index=False, lineterminator="\n")

    provenance = prepared.split.provenance()
    provenance["val"] = sorted(f"{sid}:{box}" for sid, box in prepared.val_keys)
    with open(os.path.join(root, SPLIT_FILE), "w", encoding="utf-8") as f:
        json.dump(provenance, f, indent=2, sort_keys=True)

    counts = {}
    for split in ("train", "val", "test"):
        chans = prepared.samples[split]
        channel = min(chans, key=lambda c: c.value)
        unique = {(s.source_id, s.box_index): s.label for s in chans[channel]}
        counts[split] = {cls: sum(1 for v in unique.values() if v is cls) for cls in SeverityClass}
    dataset_summary(counts["train"], counts["val"], counts["test"]).to_csv(
        os.path.join(root, SUMMARY_FILE), lineterminator="\n")
    logger.info("Datos preparados en %s (%d muestras)", root, len(index))
    return index


def load_index(root):
    """index.csv de un directorio preparado"""
    path = os.path.join(root, INDEX_FILE)
    if not os.path.exists(path):
        raise MissingPreparedData(f"No hay datos preparados en {root} (falta {INDEX_FILE})")
    return pd.read_csv(path, dtype={"source_id": str, "group_id": str})


def load_samples(root, split, channel):
    """Lee las muestras de un split y canal en el orden del índice"""
    index = load_index(root)
    channel = ZoomChannel[channel] if isinstance(channel, str) else channel
    rows = index[(index["split"] == split) & (index["channel"] == channel.name)]
    if rows.empty:
        raise MissingPreparedData(f"No hay muestras {split}/{channel.name} en {root}")
    samples = []
    for row in rows.itertuples(index=False):
        with Image.open(os.path.join(root, row.path)) as im:
            raster = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        samples.append(RoiSample(
            source_id=row.source_id,
            box_index=int(row.box_index),
            channel=channel,
            transform=TransformTag(row.transform),
            raster=raster,
            label=SeverityClass.from_label(row.label),
            group_id=row.group_id,
        ))
    return samples
