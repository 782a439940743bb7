"""
Tests para roi_prep: geometría de zoom-out, aumento x6, partición de ROIs y
directorio de datos preparados.
"""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heridas.dataset_core import BoundingBox, FixtureSpec, ImageRecord, SeverityClass, generate_fixture
from heridas.errors import AlreadyAugmented, BoxOutOfRange, MissingPreparedData
from heridas.roi_prep import (AUGMENTATION_FACTOR, INDEX_FILE, MULTIZOOM, SPLIT_FILE, SUMMARY_FILE, FillPolicy,
                              RoiSample, TransformTag, ZoomChannel, align_channels, apply_transform,
                              audit_augmentation, augment_set, channels_for, crop, dataset_summary, load_index,
                              load_samples, pad_box, prepare_channel, prepare_partitions, resize_for_backbone,
                              write_prepared)

# Recuentos de referencia: ROIs de train+val y tras el aumento
REFERENCE_ROIS = {"green": 154, "red": 237, "yellow": 186, "total": 577}
REFERENCE_AUGMENTED = {"green": 924, "red": 1116, "yellow": 1422, "total": 3462}


def _sample(source_id="s0", raster=None, transform=TransformTag.IDENTITY):
    if raster is None:
        raster = np.zeros((4, 6, 3), dtype=np.uint8)
    return RoiSample(source_id, 0, ZoomChannel.Z0, transform, raster, SeverityClass.GREEN)


@pytest.fixture
def raster():
    """Raster 7x5 con valores distintos en cada píxel"""
    return np.arange(7 * 5 * 3, dtype=np.uint8).reshape(7, 5, 3)


@pytest.fixture(scope="module")
def fixture_data():
    """Fixture sintético con 12 imágenes por clase"""
    return generate_fixture(FixtureSpec(per_class=12, width=96, height=96), seed=2)


def test_zoom_channels():
    """Prueba el relleno de cada canal"""
    assert [c.padding for c in ZoomChannel] == [0, 50, 100, 150]
    assert channels_for("Z2") == [ZoomChannel.Z2]
    assert channels_for(MULTIZOOM) == list(ZoomChannel)


def test_pad_box_examples():
    """Prueba el relleno con recorte al borde"""
    assert pad_box(BoundingBox(100, 100, 200, 200), 50, (640, 480)) == BoundingBox(50, 50, 250, 250)
    assert pad_box(BoundingBox(10, 10, 60, 60), 50, (640, 480)) == BoundingBox(0, 0, 110, 110)
    assert pad_box(BoundingBox(0, 0, 640, 480), 150, (640, 480)) == BoundingBox(0, 0, 640, 480)


@st.composite
def boxes_in_images(draw):
    width = draw(st.integers(min_value=1, max_value=800))
    height = draw(st.integers(min_value=1, max_value=800))
    x0 = draw(st.integers(min_value=0, max_value=width - 1))
    y0 = draw(st.integers(min_value=0, max_value=height - 1))
    x1 = draw(st.integers(min_value=x0 + 1, max_value=width))
    y1 = draw(st.integers(min_value=y0 + 1, max_value=height))
    return BoundingBox(x0, y0, x1, y1), (width, height)


@settings(max_examples=1000, deadline=None)
@given(case=boxes_in_images(), p=st.integers(min_value=0, max_value=300), q=st.integers(min_value=0, max_value=300))
def test_pad_box_properties(case, p, q):
    """Propiedad: dentro de la imagen, contiene la caja y crece con el relleno"""
    box, (width, height) = case
    small, large = sorted((p, q))
    padded = pad_box(box, small, (width, height))
    assert padded.is_valid_for(width, height)
    assert padded.contains(box)
    assert pad_box(box, large, (width, height)).contains(padded)
    assert pad_box(box, 0, (width, height)) == box


def test_interior_box_zoom_out():
    """Prueba que una caja interior crece exactamente 100 píxeles por eje en Z1"""
    record = ImageRecord("w1", "w1.png", SeverityClass.YELLOW, boxes=(BoundingBox(150, 150, 250, 230),))
    raster = np.zeros((400, 400, 3), dtype=np.uint8)
    z1 = prepare_channel([record], ZoomChannel.Z1, {"w1": raster})
    assert z1[0].raster.shape == (80 + 100, 100 + 100, 3)


@settings(max_examples=200, deadline=None)
@given(case=boxes_in_images(), padding=st.integers(min_value=0, max_value=300))
def test_padded_crop_contains_crop(case, padding):
    """Propiedad: el recorte con relleno contiene el recorte original en (pad_izq, pad_sup)"""
    box, (width, height) = case
    image = np.random.default_rng(width * 1000 + height).integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    padded = pad_box(box, padding, (width, height))
    left, top = box.x_min - padded.x_min, box.y_min - padded.y_min
    outer = crop(image, padded)
    assert np.array_equal(outer[top:top + box.height, left:left + box.width], crop(image, box))


def test_crop(raster):
    """Prueba el recorte y su error fuera de rango"""
    piece = crop(raster, BoundingBox(1, 2, 4, 5))
    assert piece.shape == (3, 3, 3)
    assert np.array_equal(piece, raster[2:5, 1:4])
    original = int(raster[2, 1, 0])
    piece[0, 0, 0] = 255
    assert raster[2, 1, 0] == original
    with pytest.raises(BoxOutOfRange):
        crop(raster, BoundingBox(0, 0, 6, 7))


def test_transform_involutions(raster):
    """Prueba que los volteos son involutivos y que cuatro rot90 son la identidad"""
    for tag in (TransformTag.HFLIP, TransformTag.VFLIP):
        assert np.array_equal(apply_transform(apply_transform(raster, tag), tag), raster)
    out = raster
    for _ in range(4):
        out = apply_transform(out, TransformTag.ROT90)
    assert np.array_equal(out, raster)
    assert apply_transform(raster, TransformTag.ROT90).shape == (5, 7, 3)


def test_small_rotations_keep_canvas(raster):
    """Prueba que las rotaciones de 25 y 45 grados conservan el tamaño"""
    for tag in (TransformTag.ROT25, TransformTag.ROT45):
        for fill in FillPolicy:
            rotated = apply_transform(raster, tag, fill)
            assert rotated.shape == raster.shape
            assert rotated.dtype == np.uint8


def test_constant_fill_leaves_black_corners():
    """Prueba que el relleno constante deja esquinas negras y el reflejo deja el raster uniforme intacto"""
    image = np.full((40, 40, 3), 200, dtype=np.uint8)
    constant = apply_transform(image, TransformTag.ROT45, FillPolicy.CONSTANT)
    reflect = apply_transform(image, TransformTag.ROT45, FillPolicy.REFLECT)
    assert constant[0, 0].tolist() == [0, 0, 0]
    assert np.array_equal(reflect, image)


def test_resize_for_backbone(raster):
    """Prueba el redimensionado a (alto, ancho)"""
    assert resize_for_backbone(raster, (32, 16)).shape == (32, 16, 3)
    same = resize_for_backbone(raster, (7, 5))
    assert np.array_equal(same, raster) and same is not raster


@pytest.mark.parametrize("size,expected", [(154, 924), (577, 3462), (0, 0)])
def test_augment_set_reference_sizes(size, expected):
    """Prueba los tamaños aumentados de referencia"""
    samples = [_sample(f"s{i}") for i in range(size)]
    assert len(augment_set(samples)) == expected


@settings(max_examples=100, deadline=None)
@given(size=st.integers(min_value=0, max_value=40))
def test_augment_set_factor_property(size):
    """Propiedad: el aumento multiplica por seis con una muestra por transformación"""
    samples = [_sample(f"s{i}") for i in range(size)]
    augmented = augment_set(samples)
    assert len(augmented) == AUGMENTATION_FACTOR * size
    for s in samples:
        tags = [a.transform for a in augmented if a.source_id == s.source_id]
        assert tags == list(TransformTag)


def test_augment_set_rejects_augmented():
    """Prueba que no se aumenta dos veces"""
    with pytest.raises(AlreadyAugmented):
        augment_set([_sample(transform=TransformTag.HFLIP)])


def test_audit_finds_red_yellow_swap():
    """Prueba que la auditoría detecta el intercambio rojo/amarillo de referencia"""
    assert 237 * AUGMENTATION_FACTOR == 1422 != REFERENCE_AUGMENTED["red"]
    findings = audit_augmentation(REFERENCE_ROIS, REFERENCE_AUGMENTED)
    assert findings == [
        {"row": "red", "expected": 1422, "found": 1116, "swapped_with": "yellow"},
        {"row": "yellow", "expected": 1116, "found": 1422, "swapped_with": "red"},
    ]


def test_dataset_summary():
    """Prueba la tabla resumen con los recuentos de referencia de train+val y test"""
    train = {SeverityClass.GREEN: 154, SeverityClass.YELLOW: 186, SeverityClass.RED: 237}
    test = {SeverityClass.GREEN: 39, SeverityClass.YELLOW: 47, SeverityClass.RED: 60}
    df = dataset_summary(train, {}, test)
    assert df.loc["total", "train"] == 577
    assert df.loc["total", "test"] == 146
    assert df.loc["total", "total"] == 723
    assert df.loc["green", "augmented_total"] == 963
    assert df.loc["total", "augmented_total"] == 3608


def test_prepare_channel_order_and_padding(fixture_data):
    """Prueba el recorte por canal y que el orden no depende de los hilos"""
    records = list(fixture_data.records)
    z0 = prepare_channel(records, ZoomChannel.Z0, fixture_data.rasters)
    z1 = prepare_channel(records, "Z1", fixture_data.rasters, workers=4)
    assert [s.key for s in z0] == [s.key for s in z1]
    box = records[0].boxes[0]
    assert z0[0].raster.shape == (box.height, box.width, 3)
    padded = pad_box(box, 50, (96, 96))
    assert z1[0].raster.shape == (padded.height, padded.width, 3)


def test_prepare_channel_roi_level_rows():
    """Prueba que una fila sin caja usa el raster completo"""
    record = ImageRecord("r1", "r1.png", SeverityClass.RED)
    raster = np.zeros((10, 12, 3), dtype=np.uint8)
    samples = prepare_channel([record], ZoomChannel.Z2, {"r1": raster})
    assert len(samples) == 1 and samples[0].raster.shape == (10, 12, 3)


def test_prepare_partitions(fixture_data):
    """Prueba que solo se aumenta el entrenamiento y que test va en Z0"""
    prepared = prepare_partitions(list(fixture_data.records), "Z1", fixture_data.rasters,
                                  split_seed=1, val_seed=2)
    assert set(prepared.samples["train"]) == {ZoomChannel.Z1}
    assert set(prepared.samples["test"]) == {ZoomChannel.Z0}
    train = prepared.samples["train"][ZoomChannel.Z1]
    val = prepared.samples["val"][ZoomChannel.Z1]
    test = prepared.samples["test"][ZoomChannel.Z0]
    assert len(train) % AUGMENTATION_FACTOR == 0
    assert all(s.transform is TransformTag.IDENTITY for s in val + test)
    groups = [{s.group_id for s in part} for part in (train, val, test)]
    assert groups[0].isdisjoint(groups[1]) and groups[0].isdisjoint(groups[2]) and groups[1].isdisjoint(groups[2])
    assert len(train) // 6 + len(val) + len(test) == 36


def test_multizoom_alignment(fixture_data):
    """Prueba que los cuatro canales comparten claves"""
    prepared = prepare_partitions(list(fixture_data.records), MULTIZOOM, fixture_data.rasters)
    for split in ("train", "val", "test"):
        by_channel = prepared.samples[split]
        assert set(by_channel) == set(ZoomChannel)
        keys = [sorted(s.key for s in by_channel[c]) for c in ZoomChannel]
        assert all(k == keys[0] for k in keys)
        aligned = align_channels(by_channel)
        assert len(aligned) == len(keys[0])
        assert all(len(rasters) == 4 for rasters, _, _ in aligned)


def test_write_and_load_prepared(tmp_path, fixture_data):
    """Prueba el directorio preparado y su índice determinista"""
    records = list(fixture_data.records)
    first = str(tmp_path / "a")
    second = str(tmp_path / "b")
    for root in (first, second):
        prepared = prepare_partitions(records, "Z0", fixture_data.rasters, split_seed=4, val_seed=5)
        write_prepared(prepared, root, workers=2)

    for name in (INDEX_FILE, SPLIT_FILE, SUMMARY_FILE):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read()

    index = load_index(first)
    assert set(index["split"]) == {"train", "val", "test"}
    samples = load_samples(first, "test", "Z0")
    assert len(samples) == (index["split"] == "test").sum()
    assert samples[0].raster.dtype == np.uint8
    with pytest.raises(MissingPreparedData):
        load_index(str(tmp_path / "missing"))
