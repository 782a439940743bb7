"""
Configuración de experimentos.

Un experimento es un documento YAML validado contra ``experiment_schema.json``.
Toda la aleatoriedad sale de una única semilla que ``derive_seed`` reparte por
propósito (split, val, init, shuffle, fixture).
"""

import hashlib
import os
from dataclasses import dataclass, field

import yaml
from jsonschema import ValidationError, validate

from heridas.errors import InvalidConfig
from heridas.model_zoo import Family, ModelSpec
from heridas.roi_prep import MULTIZOOM, FillPolicy
from heridas.train_eval import TrainingConfig, get_task
from heridas.validation import load_schema

SEED_PURPOSES = ("split", "val", "init", "shuffle", "fixture")
CONFIG_FILE = "config.yaml"


def derive_seed(master, purpose):
    """Semilla de 32 bits para ``purpose`` a partir de la semilla maestra"""
    digest = hashlib.sha256(f"{master}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str
    model: ModelSpec
    training: TrainingConfig
    name: str = "experimento"
    output: str = None
    seed: int = 0
    task: str = "multiclass3"
    channel: str = "Z0"
    ratio: float = 0.8
    val_fraction: float = 0.2
    fill: FillPolicy = FillPolicy.REFLECT
    workers: int = 1
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        task = get_task(self.task)
        object.__setattr__(self, "fill", FillPolicy(self.fill))
        if self.model.num_classes != task.num_classes:
            raise InvalidConfig(f"La tarea {task.name} tiene {task.num_classes} clases, el modelo "
                                f"{self.model.num_classes}")
        self.training.loss_for(task.num_classes)
        if (self.channel == MULTIZOOM) != (self.model.family is Family.MULTIZOOM4):
            raise InvalidConfig("El canal multizoom va siempre con la familia multizoom4")

    @property
    def task_def(self):
        return get_task(self.task)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    @property
    def manifest_path(self):
        return self.resolve(self.manifest)

    @property
    def output_dir(self):
        return self.resolve(self.output or os.path.join("runs", self.name))

    def seed_for(self, purpose):
        """Semilla derivada para split, val, init, shuffle o fixture"""
        if purpose not in SEED_PURPOSES:
            raise InvalidConfig(f"Propósito de semilla desconocido: {purpose}")
        return derive_seed(self.seed, purpose)

    @classmethod
    def check_schema(cls, data):
        validate(instance=data, schema=load_schema("experiment_schema.json"))

    @classmethod
    def from_dict(cls, data, base_dir="."):
        try:
            cls.check_schema(data)
        except ValidationError as e:
            where = "/".join(str(p) for p in e.path)
            raise InvalidConfig(f"{where + ': ' if where else ''}{e.message}") from None

        seed = data.get("seed", 0)
        task = get_task(data.get("task", "multiclass3"))
        model = dict(data["model"])
        spec = ModelSpec(
            family=model["family"],
            backbones=tuple(model["backbones"]),
            num_classes=task.num_classes,
            head=tuple(model["head"]) if "head" in model else None,
            freeze_base=model.get("freeze_base", True),
            pretrained=model.get("pretrained", True),
            seed=derive_seed(seed, "init"),
        )
        training = TrainingConfig(**data.get("training", {}), seed=derive_seed(seed, "shuffle"))
        split = data.get("split", {})
        prepare = data.get("prepare", {})
        return cls(
            manifest=data["manifest"],
            model=spec,
            training=training,
            name=data.get("name", "experimento"),
            output=data.get("output"),
            seed=seed,
            task=task.name,
            channel=data.get("channel", "Z0"),
            ratio=split.get("ratio", 0.8),
            val_fraction=split.get("val_fraction", 0.2),
            fill=prepare.get("fill", "reflect"),
            workers=prepare.get("workers", 1),
            base_dir=base_dir,
        )

    def to_dict(self):
        data = {
            "name": self.name,
            "manifest": self.manifest,
            "seed": self.seed,
            "task": self.task,
            "channel": self.channel,
            "split": {"ratio": self.ratio, "val_fraction": self.val_fraction},
            "prepare": {"fill": self.fill.value, "workers": self.workers},
            "model": {
                "family": self.model.family.value,
                "backbones": list(self.model.backbones),
                "head": list(self.model.head),
                "freeze_base": self.model.freeze_base,
                "pretrained": self.model.pretrained,
            },
            "training": {
                "learning_rate": self.training.learning_rate,
                "epochs": self.training.epochs,
                "optimizer": self.training.optimizer,
                "batch_size": self.training.batch_size,
            },
        }
        if self.output is not None:
            data["output"] = self.output
        if self.training.loss is not None:
            data["training"]["loss"] = self.training.loss.value
        return data

    def with_seed(self, seed):
        data = self.to_dict()
        data["seed"] = seed
        return ExperimentConfig.from_dict(data, self.base_dir)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)


def parse_config(text, base_dir="."):
    """Lee una configuración YAML; las rutas relativas cuelgan de base_dir"""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise InvalidConfig(f"YAML inválido: {e}") from None
    if not isinstance(data, dict):
        raise InvalidConfig("La configuración debe ser un diccionario")
    return ExperimentConfig.from_dict(data, base_dir)


def load_config(path):
    """Lee la configuración de un fichero"""
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def save_config(config, path):
    """Guarda la configuración como YAML"""
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.to_yaml())
