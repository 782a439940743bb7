"""
Tests para train_eval: métricas contra la matriz de confusión de referencia,
selección de checkpoints, entrenamiento reproducible y comprobación de
gradientes.
"""

import math

import numpy as np
import pytest

from heridas.dataset_core import FixtureSpec, SeverityClass, generate_fixture
from heridas.errors import EmptyHistory, EmptyMatrix, EmptyTestSet, EmptyValidation, InvalidConfig, \
    LossClassMismatch, UnknownLabel
from heridas.model_zoo import build_single
from heridas.roi_prep import ZoomChannel, prepare_channel
from heridas.train_eval import (TASKS, CheckpointPolicy, ConfusionMatrix, EvalReport, LossKind, TrainingConfig,
                                TrainingHistory, accuracy, binary_accuracy, checkpoint_select, evaluate,
                                evaluate_predictions, get_task, gradient_check, per_class_metrics, train)

# Filas = predicción, columnas = etiqueta real (verde, amarillo, rojo)
REFERENCE_CONFUSION = [[25, 6, 1], [12, 47, 18], [2, 7, 28]]


@pytest.fixture
def reference():
    """Matriz de confusión de referencia del mejor modelo multiclase"""
    return ConfusionMatrix(REFERENCE_CONFUSION)


@pytest.fixture(scope="module")
def color_pairs():
    """Pares (ROI, clase) de un fixture separable por color"""
    fixture = generate_fixture(FixtureSpec(per_class=10, width=64, height=64), seed=1)
    samples = prepare_channel(list(fixture.records), ZoomChannel.Z0, fixture.rasters)
    return [(s.raster, int(s.label)) for s in samples]


def test_reference_metrics(reference):
    """Prueba exactitud, precisión y recall de la matriz de referencia"""
    assert reference.total == 146
    assert accuracy(reference) * 100 == pytest.approx(68.49, abs=0.05)
    precision, recall = per_class_metrics(reference)
    assert np.allclose(precision * 100, [78.1, 61.0, 75.7], atol=0.05)
    assert np.allclose(recall * 100, [64.1, 78.3, 59.6], atol=0.05)


def test_reference_render(reference):
    """Prueba el formato de la matriz con la predicción en filas"""
    report = EvalReport.from_confusion(reference, TASKS["multiclass3"])
    text = report.render()
    lines = text.splitlines()
    assert "Green" in lines[0] and "Precision" in lines[0]
    assert "78.1%" in text and "61.0%" in text and "75.7%" in text
    assert lines[-1].startswith("Recall")
    assert lines[-1].split()[-1] == "68.5%"
    assert "64.1%" in lines[-1] and "59.6%" in lines[-1]


def test_accuracy_edge_cases():
    """Prueba la matriz diagonal, la vacía y la forma binaria"""
    assert accuracy(np.diag([3, 4, 5])) == 1.0
    with pytest.raises(EmptyMatrix):
        accuracy(np.zeros((3, 3)))
    assert binary_accuracy(tp=40, tn=30, fp=20, fn=10) == 0.7
    assert accuracy(ConfusionMatrix([[30, 10], [20, 40]], (SeverityClass.YELLOW, SeverityClass.RED))) == 0.7


def test_undefined_precision_is_nan():
    """Prueba que una clase nunca predicha da precisión indefinida"""
    precision, recall = per_class_metrics([[5, 2, 0], [0, 0, 0], [1, 0, 3]])
    assert math.isnan(precision[1])
    assert recall[1] == 0.0
    report = EvalReport.from_confusion(ConfusionMatrix([[5, 2, 0], [0, 0, 0], [1, 0, 3]]), TASKS["multiclass3"])
    assert report.to_dict()["precision"][1] is None
    assert "n/a" in report.render()


def test_tasks():
    """Prueba el orden de clases de cada tarea"""
    task = get_task("yellow_vs_red")
    assert task.index_of(SeverityClass.RED) == 1
    assert task.title == "Yellow Vs. Red"
    assert [get_task(n).title for n in ("green_vs_yellow", "green_vs_red")] == ["Green Vs. Yellow", "Green Vs. Red"]
    with pytest.raises(InvalidConfig):
        get_task("red_vs_blue")


def test_training_config():
    """Prueba la validación del protocolo de entrenamiento"""
    config = TrainingConfig()
    assert (config.learning_rate, config.epochs, config.batch_size) == (0.001, 250, 32)
    assert config.loss_for(2) is LossKind.BINARY
    with pytest.raises(LossClassMismatch):
        TrainingConfig(loss="multiclass_crossentropy").loss_for(2)
    with pytest.raises(InvalidConfig):
        TrainingConfig(learning_rate=0)
    with pytest.raises(InvalidConfig):
        TrainingConfig(optimizer="sgd")


def test_checkpoint_select():
    """Prueba ambas políticas y el desempate a la época más temprana"""
    history = TrainingHistory(train_accuracy=[0.9, 0.6, 0.7], val_accuracy=[0.5, 0.8, 0.8])
    assert checkpoint_select(history, CheckpointPolicy.BEST_VAL_ACCURACY) == 2
    assert checkpoint_select(history, CheckpointPolicy.BEST_COMBINED_ACCURACY) == 3
    # 0.9+0.5 y 0.6+0.8 empatan salvo por el redondeo en coma flotante
    tied = TrainingHistory(train_accuracy=[0.9, 0.6], val_accuracy=[0.5, 0.8])
    assert checkpoint_select(tied, CheckpointPolicy.BEST_COMBINED_ACCURACY) == 1
    with pytest.raises(EmptyHistory):
        checkpoint_select(TrainingHistory(), CheckpointPolicy.BEST_VAL_ACCURACY)


def test_evaluate_predictions():
    """Prueba predicciones inyectadas"""
    report = evaluate_predictions([0, 1, 2, 2], [0, 1, 2, 1], TASKS["multiclass3"])
    assert report.confusion.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    assert report.accuracy == 0.75
    restored = EvalReport.from_dict(report.to_dict())
    assert restored.confusion == report.confusion
    assert restored.accuracy == report.accuracy
    with pytest.raises(EmptyTestSet):
        evaluate_predictions([], [], TASKS["multiclass3"])


def test_train_rejects_empty_validation(color_pairs):
    """Prueba que no se entrena sin validación"""
    handle = build_single("ToySmall", pretrained=False)
    with pytest.raises(EmptyValidation):
        train(handle, color_pairs, [], TrainingConfig(epochs=1))


def test_train_separable_fixture(color_pairs):
    """Prueba que un fixture separable por color se aprende"""
    handle = build_single("ToySmall", pretrained=False)
    result = train(handle, color_pairs[:24], color_pairs[24:], TrainingConfig(epochs=40, learning_rate=0.005))
    assert len(result.history) == 40
    assert set(result.handles) == set(CheckpointPolicy)
    best = result.handles[CheckpointPolicy.BEST_VAL_ACCURACY]
    epoch = result.history.checkpoints[CheckpointPolicy.BEST_VAL_ACCURACY]
    report = evaluate(best, color_pairs[24:], TASKS["multiclass3"])
    assert report.accuracy == pytest.approx(result.history.val_accuracy[epoch - 1])
    assert report.accuracy >= 0.8


def test_training_is_reproducible(color_pairs, tmp_path):
    """Prueba que la misma semilla da el mismo historial"""
    logs = []
    for run in range(2):
        handle = build_single("ToySmall", pretrained=False, seed=3)
        result = train(handle, color_pairs[:20], color_pairs[20:], TrainingConfig(epochs=5, seed=8))
        path = tmp_path / f"history{run}.csv"
        result.history.to_csv(str(path))
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    restored = TrainingHistory.read_csv(str(tmp_path / "history0.csv"))
    assert len(restored) == 5


def test_binary_training(color_pairs):
    """Prueba el entrenamiento binario con su pérdida"""
    pairs = [(r, 0 if y == 0 else 1) for r, y in color_pairs if y in (0, 2)]
    handle = build_single("ToySmall", num_classes=2, pretrained=False)
    result = train(handle, pairs[:14], pairs[14:], TrainingConfig(epochs=3))
    report = evaluate(result.handles[CheckpointPolicy.BEST_VAL_ACCURACY], pairs[14:], TASKS["green_vs_red"])
    assert report.confusion.counts.shape == (2, 2)


def test_gradient_check(color_pairs):
    """Prueba los gradientes analíticos de la cabeza contra diferencias finitas"""
    handle = build_single("ToySmall", pretrained=False)
    inputs = [r for r, _ in color_pairs[:10]]
    labels = [y for _, y in color_pairs[:10]]
    assert gradient_check(handle, inputs, labels) < 1e-3
    binary = build_single("ToySmall", num_classes=2, pretrained=False)
    assert gradient_check(binary, inputs, [y % 2 for y in labels]) < 1e-3


def test_history_reload_keeps_checkpoints(tmp_path):
    """Prueba que releer el historial no altera el desempate de checkpoints"""
    history = TrainingHistory(train_accuracy=[0.9, 0.6], val_accuracy=[0.5, 0.800000001],
                              train_loss=[0.3, 0.4], val_loss=[0.6, 0.5])
    assert checkpoint_select(history, CheckpointPolicy.BEST_COMBINED_ACCURACY) == 2
    path = str(tmp_path / "history.csv")
    history.to_csv(path)
    restored = TrainingHistory.read_csv(path)
    assert restored.val_accuracy == history.val_accuracy
    assert restored.checkpoints[CheckpointPolicy.BEST_COMBINED_ACCURACY] == 2


def test_index_of_foreign_class():
    """Prueba que una clase ajena a la tarea es un error de datos"""
    with pytest.raises(UnknownLabel):
        TASKS["green_vs_red"].index_of(SeverityClass.YELLOW)
