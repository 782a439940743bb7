"""
Tabla Rojo-Amarillo-Verde de características fotográficas de la herida.

Cada característica (color, piel perilesional, tamaño, profundidad) da un
veredicto propio; el veredicto global es la severidad máxima de los cuatro.
"""

import enum
from dataclasses import dataclass

import yaml
from jsonschema import ValidationError, validate

from heridas.dataset_core import SeverityClass
from heridas.errors import NegativeMeasurement, ObservationError
from heridas.validation import load_schema

MINIMAL_NONE = "minimal_none"

SIZE_GREEN_MAX_CM = 2.0
SIZE_YELLOW_MAX_CM = 5.0
DEPTH_YELLOW_MAX_CM = 1.0


class Color(str, enum.Enum):
    RED_100 = "red_100"
    YELLOW_GREY_UNDER_50 = "yellow_grey_under_50"
    YELLOW_GREY_50_TO_100 = "yellow_grey_50_to_100"
    BLACK_BROWN = "black_brown"


class Periwound(str, enum.Enum):
    NORMAL = "normal"
    CALLUS = "callus"
    # 1 cm exacto se registra como red_under_1cm
    RED_UNDER_1CM = "red_under_1cm"
    RED_OVER_1CM = "red_over_1cm"
    MACERATION = "maceration"
    MACERATION_AND_BREAKDOWN = "maceration_and_breakdown"


class Characteristic(str, enum.Enum):
    COLOR = "color"
    PERIWOUND = "periwound"
    SIZE = "size"
    DEPTH = "depth"


_COLOR_VERDICTS = {
    Color.RED_100: SeverityClass.GREEN,
    Color.YELLOW_GREY_UNDER_50: SeverityClass.YELLOW,
    Color.YELLOW_GREY_50_TO_100: SeverityClass.RED,
    Color.BLACK_BROWN: SeverityClass.RED,
}

_PERIWOUND_VERDICTS = {
    Periwound.NORMAL: SeverityClass.GREEN,
    Periwound.CALLUS: SeverityClass.YELLOW,
    Periwound.RED_UNDER_1CM: SeverityClass.YELLOW,
    Periwound.RED_OVER_1CM: SeverityClass.RED,
    Periwound.MACERATION: SeverityClass.YELLOW,
    Periwound.MACERATION_AND_BREAKDOWN: SeverityClass.RED,
}


@dataclass(frozen=True)
class RubricInput:
    color: Color
    periwound: Periwound
    size_cm: float
    depth_cm: object

    def __post_init__(self):
        object.__setattr__(self, "color", Color(self.color))
        object.__setattr__(self, "periwound", Periwound(self.periwound))
        if self.size_cm < 0:
            raise NegativeMeasurement(f"size_cm negativo: {self.size_cm}")
        if self.depth_cm != MINIMAL_NONE and self.depth_cm < 0:
            raise NegativeMeasurement(f"depth_cm negativo: {self.depth_cm}")

    @classmethod
    def check_schema(cls, data):
        validate(instance=data, schema=load_schema("observation_schema.json"))

    @classmethod
    def from_dict(cls, data):
        return cls(data["color"], data["periwound"], data["size_cm"], data["depth_cm"])


@dataclass(frozen=True)
class CharacteristicVerdict:
    characteristic: Characteristic
    verdict: SeverityClass


def verdict_color(color):
    """Veredicto del color del lecho de la herida"""
    return _COLOR_VERDICTS[Color(color)]


def verdict_periwound(periwound):
    """Veredicto de la piel perilesional"""
    return _PERIWOUND_VERDICTS[Periwound(periwound)]


def verdict_size(size_cm):
    """<=2 verde, (2, 5] amarillo, >5 rojo"""
    if size_cm < 0:
        raise NegativeMeasurement(f"size_cm negativo: {size_cm}")
    if size_cm <= SIZE_GREEN_MAX_CM:
        return SeverityClass.GREEN
    if size_cm <= SIZE_YELLOW_MAX_CM:
        return SeverityClass.YELLOW
    return SeverityClass.RED


def verdict_depth(depth):
    """minimal_none verde, <=1 amarillo, >1 rojo"""
    if depth == MINIMAL_NONE:
        return SeverityClass.GREEN
    if depth < 0:
        raise NegativeMeasurement(f"depth_cm negativo: {depth}")
    if depth <= DEPTH_YELLOW_MAX_CM:
        return SeverityClass.YELLOW
    return SeverityClass.RED


def stratify(observation):
    """
    Veredicto global y desglose por característica.

    Returns:
        (SeverityClass, [CharacteristicVerdict x 4]) en el orden color,
        piel perilesional, tamaño, profundidad
    """
    verdicts = [
        CharacteristicVerdict(Characteristic.COLOR, verdict_color(observation.color)),
        CharacteristicVerdict(Characteristic.PERIWOUND, verdict_periwound(observation.periwound)),
        CharacteristicVerdict(Characteristic.SIZE, verdict_size(observation.size_cm)),
        CharacteristicVerdict(Characteristic.DEPTH, verdict_depth(observation.depth_cm)),
    ]
    return max(v.verdict for v in verdicts), verdicts


def _key_lines(node):
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {key.value: key.start_mark.line + 1 for key, _ in node.value}


def parse_observation(text):
    """
    Lee un registro de observación YAML (o JSON).

    Raises:
        ObservationError: YAML inválido o registro fuera del esquema, con la
            línea del campo afectado cuando se conoce
    """
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ObservationError(str(getattr(e, "problem", None) or e),
                               line=mark.line + 1 if mark is not None else None) from None
    if not isinstance(data, dict):
        raise ObservationError("se esperaba un registro clave: valor", line=1)

    lines = _key_lines(node)
    try:
        RubricInput.check_schema(data)
    except ValidationError as e:
        field = e.path[0] if e.path else None
        if field is None and e.validator == "additionalProperties":
            field = next((k for k in data if k not in e.schema["properties"]), None)
        raise ObservationError(e.message, line=lines.get(field, 1)) from None
    try:
        return RubricInput.from_dict(data)
    except NegativeMeasurement as e:
        field = "size_cm" if "size_cm" in str(e) else "depth_cm"
        raise ObservationError(str(e), line=lines.get(field)) from None


def render(aggregate, verdicts):
    """Veredicto global en mayúsculas seguido de una línea por característica"""
    width = max(len(v.characteristic.value) for v in verdicts)
    rows = [aggregate.label.upper()]
    rows += [f"  {v.characteristic.value:<{width}}  {v.verdict.label.upper()}" for v in verdicts]
    return "\n".join(rows)
