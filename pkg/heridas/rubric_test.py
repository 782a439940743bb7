"""
Tests para rubric: cada celda marcada de la tabla Rojo-Amarillo-Verde,
fronteras, monotonía y lectura de observaciones.
"""

import pytest
from hypothesis import given, settings, strategies as st

from heridas.dataset_core import SeverityClass
from heridas.errors import NegativeMeasurement, ObservationError
from heridas.rubric import (MINIMAL_NONE, Color, Periwound, RubricInput, parse_observation, render, stratify,
                            verdict_color, verdict_depth, verdict_periwound, verdict_size)

G, Y, R = SeverityClass.GREEN, SeverityClass.YELLOW, SeverityClass.RED

# Las trece celdas marcadas de la tabla
MARKED_CELLS = [
    (verdict_color, Color.RED_100, G),
    (verdict_color, Color.YELLOW_GREY_UNDER_50, Y),
    (verdict_color, Color.YELLOW_GREY_50_TO_100, R),
    (verdict_color, Color.BLACK_BROWN, R),
    (verdict_periwound, Periwound.NORMAL, G),
    (verdict_periwound, Periwound.CALLUS, Y),
    (verdict_periwound, Periwound.RED_UNDER_1CM, Y),
    (verdict_periwound, Periwound.RED_OVER_1CM, R),
    (verdict_periwound, Periwound.MACERATION, Y),
    (verdict_periwound, Periwound.MACERATION_AND_BREAKDOWN, R),
    (verdict_size, 1.5, G),
    (verdict_size, 3.5, Y),
    (verdict_size, 7.0, R),
]


@pytest.mark.parametrize("verdict,value,expected", MARKED_CELLS)
def test_marked_cells(verdict, value, expected):
    """Prueba cada celda marcada de la tabla"""
    assert verdict(value) is expected


@pytest.mark.parametrize("depth,expected", [(MINIMAL_NONE, G), (0.5, Y), (1.5, R)])
def test_depth_rows(depth, expected):
    """Prueba las tres filas de profundidad"""
    assert verdict_depth(depth) is expected


@pytest.mark.parametrize("verdict,value,expected", [
    (verdict_size, 0.0, G),
    (verdict_size, 2.0, G),
    (verdict_size, 2.0001, Y),
    (verdict_size, 5.0, Y),
    (verdict_size, 5.1, R),
    (verdict_depth, 0.0, Y),
    (verdict_depth, 1.0, Y),
    (verdict_depth, 1.0001, R),
])
def test_boundaries(verdict, value, expected):
    """Prueba las fronteras cerradas en 2 cm, 5 cm y 1 cm"""
    assert verdict(value) is expected


def test_negative_measurements():
    """Prueba que las medidas negativas se rechazan"""
    with pytest.raises(NegativeMeasurement):
        verdict_size(-0.1)
    with pytest.raises(NegativeMeasurement):
        verdict_depth(-1)
    with pytest.raises(NegativeMeasurement):
        RubricInput(Color.RED_100, Periwound.NORMAL, -1, MINIMAL_NONE)


@pytest.mark.parametrize("observation,aggregate,verdicts", [
    (("red_100", "normal", 1.5, MINIMAL_NONE), G, [G, G, G, G]),
    (("red_100", "normal", 1.5, 1.5), R, [G, G, G, R]),
    (("yellow_grey_under_50", "callus", 3.0, 0.5), Y, [Y, Y, Y, Y]),
])
def test_stratify(observation, aggregate, verdicts):
    """Prueba la agregación por severidad máxima"""
    result, breakdown = stratify(RubricInput(*observation))
    assert result is aggregate
    assert [v.verdict for v in breakdown] == verdicts


@settings(max_examples=1000, deadline=None)
@given(color=st.sampled_from(Color), periwound=st.sampled_from(Periwound),
       size=st.floats(min_value=0, max_value=20), extra_size=st.floats(min_value=0, max_value=20),
       depth=st.floats(min_value=0, max_value=5), extra_depth=st.floats(min_value=0, max_value=5))
def test_monotonic_and_dominant(color, periwound, size, extra_size, depth, extra_depth):
    """Propiedad: crecer en tamaño o profundidad nunca baja la severidad global"""
    base, verdicts = stratify(RubricInput(color, periwound, size, depth))
    assert all(base >= v.verdict for v in verdicts)
    bigger, _ = stratify(RubricInput(color, periwound, size + extra_size, depth))
    deeper, _ = stratify(RubricInput(color, periwound, size, depth + extra_depth))
    assert bigger >= base and deeper >= base
    minimal, _ = stratify(RubricInput(color, periwound, size, MINIMAL_NONE))
    assert base >= minimal


def test_parse_and_render():
    """Prueba la lectura de una observación unánime en verde"""
    text = "color: red_100\nperiwound: normal\nsize_cm: 1.5\ndepth_cm: minimal_none\n"
    aggregate, verdicts = stratify(parse_observation(text))
    lines = render(aggregate, verdicts).splitlines()
    assert lines[0] == "GREEN"
    assert len(lines) == 5
    assert lines[4].split() == ["depth", "GREEN"]


def test_parse_errors_carry_line():
    """Prueba que los errores de lectura llevan número de línea"""
    with pytest.raises(ObservationError) as excinfo:
        parse_observation("color: red_100\nperiwound: purple\nsize_cm: 1\ndepth_cm: 1\n")
    assert excinfo.value.line == 2
    with pytest.raises(ObservationError) as excinfo:
        parse_observation("color: red_100\nperiwound: normal\nsize_cm: -3\ndepth_cm: 1\n")
    assert excinfo.value.line == 3
    with pytest.raises(ObservationError) as excinfo:
        parse_observation("color: [red_100\n")
    assert excinfo.value.line is not None
    with pytest.raises(ObservationError):
        parse_observation("color: red_100\n")
