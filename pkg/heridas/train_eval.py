"""
Entrenamiento y evaluación.

Protocolo: Adam (lr 0.001), entropía cruzada multiclase o binaria según la
tarea, dos políticas de checkpoint (mejor precisión de validación y mejor
media entre entrenamiento y validación). La evaluación produce la matriz de
confusión con filas = predicción y columnas = etiqueta real, la exactitud y la
precisión/recall por clase.
"""

import copy
import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from heridas.dataset_core import SeverityClass
from heridas.errors import (EmptyDataset, EmptyHistory, EmptyMatrix, EmptyTestSet, EmptyValidation,
                            InvalidConfig, InvalidSpec, LossClassMismatch, ShapeMismatch, UnknownLabel)
from heridas.model_zoo import ModelHandle

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")
_TIE_TOLERANCE = 1e-12


class LossKind(str, enum.Enum):
    MULTICLASS = "multiclass_crossentropy"
    BINARY = "binary_crossentropy"


class CheckpointPolicy(str, enum.Enum):
    BEST_VAL_ACCURACY = "best_val_accuracy"
    BEST_COMBINED_ACCURACY = "best_combined_accuracy"


HEADLINE_POLICY = CheckpointPolicy.BEST_VAL_ACCURACY


@dataclass(frozen=True)
class Task:
    """Clasificación sobre un subconjunto ordenado de clases"""
    name: str
    classes: tuple

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def is_binary(self):
        return self.num_classes == 2

    @property
    def title(self):
        if self.is_binary:
            return " Vs. ".join(c.label.capitalize() for c in self.classes)
        return "Accuracy"

    def index_of(self, cls):
        cls = SeverityClass(cls)
        if cls not in self.classes:
            raise UnknownLabel(f"La clase {cls.label} no pertenece a la tarea {self.name}")
        return self.classes.index(cls)


TASKS = {
    "multiclass3": Task("multiclass3", (SeverityClass.GREEN, SeverityClass.YELLOW, SeverityClass.RED)),
    "green_vs_yellow": Task("green_vs_yellow", (SeverityClass.GREEN, SeverityClass.YELLOW)),
    "green_vs_red": Task("green_vs_red", (SeverityClass.GREEN, SeverityClass.RED)),
    "yellow_vs_red": Task("yellow_vs_red", (SeverityClass.YELLOW, SeverityClass.RED)),
}


def get_task(name):
    """Tarea por nombre; InvalidConfig si no existe"""
    try:
        return TASKS[name]
    except KeyError:
        raise InvalidConfig(f"Tarea desconocida: {name!r}") from None


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.001
    epochs: int = 250
    optimizer: str = "adam"
    loss: LossKind = None
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        if self.loss is not None:
            object.__setattr__(self, "loss", LossKind(self.loss))
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate debe ser > 0, no {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs y batch_size deben ser >= 1")
        if self.optimizer != "adam":
            raise InvalidConfig(f"Optimizador no soportado: {self.optimizer}")

    def loss_for(self, num_classes):
        """Pérdida efectiva; binaria si y solo si hay dos clases"""
        expected = LossKind.BINARY if num_classes == 2 else LossKind.MULTICLASS
        if self.loss is not None and self.loss is not expected:
            raise LossClassMismatch(f"La pérdida {self.loss.value} no vale para {num_classes} clases")
        return expected

    def to_dict(self):
        data = asdict(self)
        data["loss"] = self.loss.value if self.loss is not None else None
        return data


@dataclass
class TrainingHistory:
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.val_accuracy)

    def append(self, train_loss, train_acc, val_loss, val_acc):
        self.train_loss.append(train_loss)
        self.train_accuracy.append(train_acc)
        self.val_loss.append(val_loss)
        self.val_accuracy.append(val_acc)

    def to_frame(self):
        return pd.DataFrame({
            "epoch": range(1, len(self) + 1),
            "train_loss": self.train_loss,
            "train_acc": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_acc": self.val_accuracy,
        })

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, float_precision="round_trip")
        history = cls(df["train_acc"].tolist(), df["val_acc"].tolist(),
                      df["train_loss"].tolist(), df["val_loss"].tolist())
        history.checkpoints = {p: checkpoint_select(history, p) for p in CheckpointPolicy}
        return history


@dataclass
class TrainingResult:
    handles: dict
    history: TrainingHistory


def _policy_scores(history, policy):
    policy = CheckpointPolicy(policy)
    if policy is CheckpointPolicy.BEST_VAL_ACCURACY:
        return list(history.val_accuracy)
    return [(t + v) / 2.0 for t, v in zip(history.train_accuracy, history.val_accuracy)]


def checkpoint_select(history, policy):
    """Época (1-based) elegida por la política; empates a la época más temprana"""
    scores = _policy_scores(history, policy)
    if not scores:
        raise EmptyHistory("El historial está vacío")
    best = max(scores)
    return next(i for i, s in enumerate(scores) if best - s <= _TIE_TOLERANCE) + 1


def _loss_fn(kind):
    if kind is LossKind.BINARY:
        # softmax de dos salidas: p(clase 1) = sigmoide(l1 - l0)
        return lambda logits, y: F.binary_cross_entropy_with_logits(logits[:, 1] - logits[:, 0], y.to(logits.dtype))
    return F.cross_entropy


def _unzip(dataset, num_classes):
    inputs = [item for item, _ in dataset]
    labels = torch.tensor([int(y) for _, y in dataset], dtype=torch.long)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatch(f"Etiquetas fuera de rango para {num_classes} clases")
    return inputs, labels


class _Batches:
    """Entradas ya codificadas: características (backbone congelado) o tensores por rama"""

    def __init__(self, handle, inputs):
        self.handle = handle
        if handle.spec.freeze_base:
            self.data = handle.extract_features(inputs)
        else:
            self.data = handle.encode(inputs)

    def logits(self, index):
        model = self.handle.model
        if self.handle.spec.freeze_base:
            return model.head(self.data[index])
        return model(tuple(t[index] for t in self.data))


def train(handle, train_set, val_set, config):
    """
    Entrena la cabeza del modelo (y las ramas si no están congeladas).

    Args:
        handle: ModelHandle a entrenar; queda en el estado de la última época
        train_set, val_set: secuencias de (entrada, índice de clase)
        config: TrainingConfig

    Returns:
        TrainingResult con un handle por política de checkpoint y el historial
    """
    if not val_set:
        raise EmptyValidation("El conjunto de validación está vacío")
    if not train_set:
        raise EmptyDataset("El conjunto de entrenamiento está vacío")
    loss_fn = _loss_fn(config.loss_for(handle.num_classes))

    x_train, y_train = _unzip(train_set, handle.num_classes)
    x_val, y_val = _unzip(val_set, handle.num_classes)
    train_batches = _Batches(handle, x_train)
    val_batches = _Batches(handle, x_val)

    model = handle.model
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.eps)
    generator = torch.Generator().manual_seed(config.seed)
    snapshot_scope = model.head if handle.spec.freeze_base else model
    snapshots = {}
    history = TrainingHistory()
    n = len(y_train)

    logger.info("Entrenando %d muestras (%d validación), %d épocas", n, len(y_val), config.epochs)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=generator)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            logits = train_batches.logits(index)
            loss = loss_fn(logits, y_train[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(index)
            correct += int((logits.argmax(dim=1) == y_train[index]).sum())

        model.eval()
        with torch.no_grad():
            all_val = torch.arange(len(y_val))
            val_logits = val_batches.logits(all_val)
            val_loss = loss_fn(val_logits, y_val).item()
            val_acc = float((val_logits.argmax(dim=1) == y_val).double().mean())
        history.append(total_loss / n, correct / n, val_loss, val_acc)
        logger.debug("época %d: loss=%.4f acc=%.4f val_loss=%.4f val_acc=%.4f",
                     epoch, total_loss / n, correct / n, val_loss, val_acc)

        for policy in CheckpointPolicy:
            if checkpoint_select(history, policy) == epoch:
                snapshots[policy] = copy.deepcopy(snapshot_scope.state_dict())

    history.checkpoints = {p: checkpoint_select(history, p) for p in CheckpointPolicy}
    handles = {}
    for policy, state in snapshots.items():
        clone = ModelHandle(handle.spec, copy.deepcopy(model))
        target = clone.model.head if handle.spec.freeze_base else clone.model
        target.load_state_dict(state)
        clone.model.eval()
        handles[policy] = clone
    logger.info("Checkpoints: %s", {p.value: e for p, e in history.checkpoints.items()})
    return TrainingResult(handles=handles, history=history)


def gradient_check(handle, inputs, labels, eps=1e-6, probes=30, seed=0):
    """
    Compara gradientes analíticos de la cabeza con diferencias centrales.

    Trabaja en float64 sobre una copia del modelo. Devuelve el máximo error
    relativo |a - n| / max(|a|, |n|, 1e-6) entre ``probes`` coordenadas.
    """
    model = copy.deepcopy(handle.model).double()
    probe = ModelHandle(handle.spec, model)
    feats = probe.extract_features(list(inputs))
    y = torch.tensor([int(v) for v in labels], dtype=torch.long)
    loss_fn = _loss_fn(LossKind.BINARY if handle.num_classes == 2 else LossKind.MULTICLASS)

    model.head.zero_grad()
    loss_fn(model.head(feats), y).backward()
    params = [p for p in model.head.parameters()]
    sizes = np.array([p.numel() for p in params], dtype=float)
    rng = np.random.default_rng(seed)

    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            p = params[rng.choice(len(params), p=sizes / sizes.sum())]
            flat = p.data.view(-1)
            i = int(rng.integers(flat.numel()))
            original = flat[i].item()
            flat[i] = original + eps
            plus = loss_fn(model.head(feats), y).item()
            flat[i] = original - eps
            minus = loss_fn(model.head(feats), y).item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = p.grad.view(-1)[i].item()
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6))
    return worst


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Recuentos KxK: filas = clase predicha, columnas = clase real"""
    counts: np.ndarray
    classes: tuple = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise InvalidSpec(f"La matriz de confusión debe ser cuadrada, no {counts.shape}")
        if (counts < 0).any():
            raise InvalidSpec("La matriz de confusión no admite recuentos negativos")
        classes = self.classes
        if classes is None and counts.shape[0] == len(SeverityClass):
            classes = tuple(SeverityClass)
        if classes is not None:
            classes = tuple(SeverityClass(c) for c in classes)
            if len(classes) != counts.shape[0]:
                raise InvalidSpec("El número de clases no coincide con la matriz")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "classes", classes)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def names(self):
        if self.classes is None:
            return [str(i) for i in range(self.counts.shape[0])]
        return [c.label.capitalize() for c in self.classes]

    @classmethod
    def from_predictions(cls, predicted, gold, classes):
        k = len(classes)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(predicted, dtype=int), np.asarray(gold, dtype=int)), 1)
        return cls(counts, tuple(classes))

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.classes == other.classes
                and np.array_equal(self.counts, other.counts))


def _as_confusion(confusion):
    return confusion if isinstance(confusion, ConfusionMatrix) else ConfusionMatrix(confusion)


def accuracy(confusion):
    """Traza / total"""
    cm = _as_confusion(confusion)
    if cm.total == 0:
        raise EmptyMatrix("La matriz de confusión está vacía")
    return float(np.trace(cm.counts)) / cm.total


def binary_accuracy(tp, tn, fp, fn):
    """(TP + TN) / (TP + FP + FN + TN)"""
    total = tp + tn + fp + fn
    if total == 0:
        raise EmptyMatrix("No hay muestras")
    return (tp + tn) / total


def per_class_metrics(confusion):
    """
    Precisión por fila (predicción) y recall por columna (real).

    Una fila o columna sin muestras da UNDEFINED (nan) en lugar de fallar.
    """
    cm = _as_confusion(confusion)
    if cm.total == 0:
        raise EmptyMatrix("La matriz de confusión está vacía")
    diag = np.diag(cm.counts).astype(float)
    rows = cm.counts.sum(axis=1).astype(float)
    cols = cm.counts.sum(axis=0).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(rows > 0, diag / rows, UNDEFINED)
        recall = np.where(cols > 0, diag / cols, UNDEFINED)
    return precision, recall


def format_percent(value, decimals=2):
    """Porcentaje con decimales fijos; n/a para valores indefinidos"""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{round(value * 100, decimals):.{decimals}f}%"


@dataclass(eq=False)
class EvalReport:
    task: Task
    confusion: ConfusionMatrix
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    channel: str = "Z0"
    model: dict = None
    checkpoint: str = None

    @classmethod
    def from_confusion(cls, confusion, task, channel="Z0", model=None, checkpoint=None):
        precision, recall = per_class_metrics(confusion)
        return cls(task=task, confusion=confusion, accuracy=accuracy(confusion),
                   precision=precision, recall=recall, channel=channel, model=model,
                   checkpoint=checkpoint.value if isinstance(checkpoint, CheckpointPolicy) else checkpoint)

    def render(self, decimals=1):
        """Matriz con el formato de la figura: filas predicción, columnas real"""
        names = self.confusion.names
        body = {name: [str(v) for v in self.confusion.counts[:, j]] + [format_percent(self.recall[j], decimals)]
                for j, name in enumerate(names)}
        body["Precision"] = [format_percent(p, decimals) for p in self.precision] + \
            [format_percent(self.accuracy, decimals)]
        df = pd.DataFrame(body, index=names + ["Recall"])
        df.index.name = "Prediction \\ Gold"
        return df.to_string()

    def metrics_frame(self):
        return pd.DataFrame({
            "class": self.confusion.names,
            "precision": self.precision,
            "recall": self.recall,
        })

    def to_dict(self):
        def clean(values):
            return [None if math.isnan(v) else float(v) for v in values]
        return {
            "task": self.task.name,
            "classes": [c.label for c in self.task.classes],
            "channel": self.channel,
            "model": self.model,
            "checkpoint": self.checkpoint,
            "confusion": self.confusion.counts.tolist(),
            "accuracy": self.accuracy,
            "precision": clean(self.precision),
            "recall": clean(self.recall),
        }

    @classmethod
    def from_dict(cls, data):
        task = get_task(data["task"])
        confusion = ConfusionMatrix(np.array(data["confusion"]), task.classes)
        return cls.from_confusion(confusion, task, data.get("channel", "Z0"), data.get("model"),
                                  data.get("checkpoint"))


def evaluate_predictions(predicted, gold, task, channel="Z0", model=None, checkpoint=None):
    """EvalReport a partir de índices de clase predichos y reales"""
    if len(gold) == 0:
        raise EmptyTestSet("El conjunto de test está vacío")
    confusion = ConfusionMatrix.from_predictions(predicted, gold, task.classes)
    return EvalReport.from_confusion(confusion, task, channel, model, checkpoint)


def evaluate(handle, test_set, task, channel="Z0", checkpoint=None, batch_size=64):
    """Evalúa un handle sobre pares (entrada, índice de clase)"""
    if not test_set:
        raise EmptyTestSet("El conjunto de test está vacío")
    inputs, gold = _unzip(test_set, handle.num_classes)
    probs = handle.predict_batch(inputs, batch_size=batch_size)
    predicted = probs.argmax(axis=1)
    return evaluate_predictions(predicted, gold.numpy(), task, channel, handle.spec.to_dict(), checkpoint)
