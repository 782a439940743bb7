"""
Zoo de modelos: backbone único por transferencia, modelo apilado de dos
backbones y red multi-zoom de cuatro ramas.

Todos comparten la misma receta: backbones congelados que producen un vector
de características (último mapa antes del clasificador con average pooling
global), concatenación y una cabeza densa entrenable terminada en softmax.
"""

import enum
import hashlib
import json
import logging
import os
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import timm
import torch
from torch import nn

from heridas.errors import (ArityMismatch, ArtifactSpecMismatch, DuplicateBackbone, InvalidSpec,
                            ShapeMismatch, UnknownBackbone, WeightsUnavailable)
from heridas.roi_prep import resize_for_backbone

logger = logging.getLogger(__name__)

WEIGHTS_ENV = "HERIDAS_WEIGHTS_DIR"
SPEC_FILE = "spec.json"
PARAMS_FILE = "params.pt"


class BackboneName(str, enum.Enum):
    VGG16 = "VGG16"
    VGG19 = "VGG19"
    INCEPTION_V3 = "InceptionV3"
    NASNET_LARGE = "NasNetLarge"
    RESNET50 = "ResNet50"
    DENSENET201 = "DenseNet201"
    XCEPTION = "Xception"
    MOBILENET_V2 = "MobileNetV2"
    INCEPTION_RESNET_V2 = "InceptionResNetV2"
    TOY_SMALL = "ToySmall"


class Family(str, enum.Enum):
    SINGLE = "single"
    STACKED2 = "stacked2"
    MULTIZOOM4 = "multizoom4"


BRANCH_COUNT = {Family.SINGLE: 1, Family.STACKED2: 2, Family.MULTIZOOM4: 4}
HEAD_DEPTH = {Family.STACKED2: 4, Family.MULTIZOOM4: 5}
DEFAULT_HEADS = {
    Family.SINGLE: (256,),
    Family.STACKED2: (1024, 512, 256, 128),
    Family.MULTIZOOM4: (2048, 1024, 512, 256, 128),
}


@dataclass(frozen=True)
class BackboneInfo:
    name: str
    feature_width: int
    input_dims: tuple
    timm_name: str = None

    @property
    def is_toy(self):
        return self.timm_name is None


_REGISTRY = OrderedDict()


def register_backbone(info):
    _REGISTRY[info.name] = info
    return info


def register_toy_backbone(name, feature_width=64, input_dims=(64, 64)):
    """Registra un backbone de juguete determinista (pesos fijados por el nombre)"""
    return register_backbone(BackboneInfo(name, int(feature_width), tuple(input_dims)))


for _name, _width, _dims, _timm in [
    (BackboneName.VGG16, 512, (224, 224), "vgg16"),
    (BackboneName.VGG19, 512, (224, 224), "vgg19"),
    (BackboneName.INCEPTION_V3, 2048, (299, 299), "inception_v3"),
    (BackboneName.NASNET_LARGE, 4032, (331, 331), "nasnetalarge"),
    (BackboneName.RESNET50, 2048, (224, 224), "resnet50"),
    (BackboneName.DENSENET201, 1920, (224, 224), "densenet201"),
    (BackboneName.XCEPTION, 2048, (299, 299), "legacy_xception"),
    (BackboneName.MOBILENET_V2, 1280, (224, 224), "mobilenetv2_100"),
    (BackboneName.INCEPTION_RESNET_V2, 1536, (299, 299), "inception_resnet_v2"),
]:
    register_backbone(BackboneInfo(_name.value, _width, _dims, _timm))

register_toy_backbone(BackboneName.TOY_SMALL.value, feature_width=64)
# Variantes para multi-zoom de escritorio (cuatro nombres distintos)
for _i in range(1, 5):
    register_toy_backbone(f"ToySmall-{_i}", feature_width=32)


def list_backbones():
    """Backbones registrados: los nueve del estudio más los de juguete"""
    return list(_REGISTRY.values())


def backbone_info(name):
    """Entrada del registro para un nombre o BackboneName"""
    name = name.value if isinstance(name, BackboneName) else str(name)
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownBackbone(f"Backbone desconocido: {name!r}") from None


# Combinaciones de referencia (apiladas y multi-zoom)
STACKED_PRESETS = OrderedDict([
    ("M1", ("VGG19", "NasNetLarge")),
    ("M2", ("NasNetLarge", "Xception")),
    ("M3", ("VGG19", "InceptionV3")),
    ("M4", ("VGG16", "NasNetLarge")),
    ("M5", ("InceptionV3", "Xception")),
    ("M6", ("VGG16", "InceptionV3")),
])
MULTIZOOM_PRESETS = OrderedDict([
    ("M1", ("VGG19", "InceptionV3", "NasNetLarge", "ResNet50")),
    ("M2", ("ResNet50", "InceptionV3", "NasNetLarge", "VGG19")),
    ("M3", ("ResNet50", "VGG16", "NasNetLarge", "InceptionV3")),
    ("M4", ("ResNet50", "InceptionV3", "NasNetLarge", "Xception")),
    ("M5", ("VGG19", "InceptionV3", "NasNetLarge", "MobileNetV2")),
    ("M6", ("VGG19", "InceptionResNetV2", "NasNetLarge", "MobileNetV2")),
    ("M7", ("DenseNet201", "InceptionResNetV2", "NasNetLarge", "MobileNetV2")),
    ("M8", ("Xception", "InceptionResNetV2", "DenseNet201", "MobileNetV2")),
    ("M9", ("VGG19", "InceptionResNetV2", "ResNet50", "MobileNetV2")),
])


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    backbones: tuple
    num_classes: int = 3
    head: tuple = None
    freeze_base: bool = True
    input_dims: tuple = None
    pretrained: bool = True
    seed: int = 0

    def __post_init__(self):
        try:
            family = Family(self.family)
        except ValueError:
            raise InvalidSpec(f"Familia de modelo desconocida: {self.family!r}") from None
        backbones = tuple(backbone_info(b).name for b in self.backbones)
        head = tuple(int(w) for w in (self.head if self.head is not None else DEFAULT_HEADS[family]))
        dims = self.input_dims
        if dims is None:
            dims = tuple(backbone_info(b).input_dims for b in backbones)
        dims = tuple(tuple(int(v) for v in d) for d in dims)
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "backbones", backbones)
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "input_dims", dims)

        if len(backbones) != BRANCH_COUNT[family]:
            raise InvalidSpec(f"{family.value} necesita {BRANCH_COUNT[family]} backbones, hay {len(backbones)}")
        if len(set(backbones)) != len(backbones):
            raise DuplicateBackbone(f"Backbones repetidos en {family.value}: {', '.join(backbones)}")
        if self.num_classes not in (2, 3):
            raise InvalidSpec(f"num_classes debe ser 2 o 3, no {self.num_classes}")
        if family in HEAD_DEPTH and len(head) != HEAD_DEPTH[family]:
            raise InvalidSpec(f"{family.value} lleva {HEAD_DEPTH[family]} capas densas, no {len(head)}")
        if not head or any(w < 1 for w in head):
            raise InvalidSpec(f"Cabeza inválida: {head}")
        if len(dims) != len(backbones) or any(len(d) != 2 or min(d) < 1 for d in dims):
            raise InvalidSpec(f"input_dims inválido: {dims}")

    def to_dict(self):
        data = asdict(self)
        data["family"] = self.family.value
        data["backbones"] = list(self.backbones)
        data["head"] = list(self.head)
        data["input_dims"] = [list(d) for d in self.input_dims]
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def model_type(spec):
    return {
        Family.SINGLE: "Transfer Learning",
        Family.STACKED2: "Stacked Models",
        Family.MULTIZOOM4: "Multi-Zoom Models",
    }[spec.family]


def model_label(spec):
    """Nombre legible: 'VGG19', 'M1: VGG19+NasNetLarge', 'M5: Z0: VGG19; Z1: ...'"""
    if spec.family is Family.SINGLE:
        return spec.backbones[0]
    if spec.family is Family.STACKED2:
        label = "+".join(spec.backbones)
        presets = STACKED_PRESETS
    else:
        label = "; ".join(f"Z{i}: {b}" for i, b in enumerate(spec.backbones))
        presets = MULTIZOOM_PRESETS
    for key, names in presets.items():
        if names == spec.backbones:
            return f"{key}: {label}"
    return label


class Backbone(nn.Module):
    """Extractor congelable: raster normalizado -> vector de ``feature_width``"""

    def __init__(self, info, mean, std):
        super().__init__()
        self.name = info.name
        self.feature_width = info.feature_width
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def feature_map(self, x):
        raise NotImplementedError

    def forward(self, x):
        fmap = self.feature_map((x - self.mean) / self.std)
        return fmap.mean(dim=(2, 3)) if fmap.ndim == 4 else fmap


class ToyBackbone(Backbone):
    def __init__(self, info):
        super().__init__(info, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, info.feature_width, kernel_size=3, padding=1),
            nn.ReLU(),
        )

    def feature_map(self, x):
        return self.features(x)


class TimmBackbone(Backbone):
    def __init__(self, info, net):
        cfg = getattr(net, "pretrained_cfg", None) or {}
        super().__init__(info, cfg.get("mean", (0.485, 0.456, 0.406)), cfg.get("std", (0.229, 0.224, 0.225)))
        self.net = net

    def feature_map(self, x):
        return self.net.forward_features(x)


def _weights_cache():
    """Directorio de HERIDAS_WEIGHTS_DIR; si está definido manda sobre TORCH_HOME y HF_HOME"""
    cache = os.environ.get(WEIGHTS_ENV)
    if cache:
        os.environ["TORCH_HOME"] = cache
        os.environ["HF_HOME"] = cache
    return cache


def _name_seed(name):
    return zlib.crc32(name.encode("utf-8")) & 0x7FFFFFFF


def create_backbone(name, pretrained=True, strict_weights=False):
    """
    Instancia un backbone registrado.

    Sin pesos preentrenados disponibles (sin red ni caché) cae a pesos
    aleatorios fijados por el nombre, salvo con ``strict_weights``.
    """
    info = backbone_info(name)
    with torch.random.fork_rng():
        torch.manual_seed(_name_seed(info.name))
        if info.is_toy:
            return ToyBackbone(info)
        net = None
        if pretrained:
            # huggingface_hub fija su caché al importarse: se pasa cache_dir explícito
            cache = _weights_cache()
            options = {"cache_dir": cache} if cache else {}
            try:
                net = timm.create_model(info.timm_name, pretrained=True, num_classes=0, **options)
            except Exception as e:
                if strict_weights:
                    raise WeightsUnavailable(f"No hay pesos preentrenados para {info.name}: {e}") from e
                logger.warning("Pesos de %s no disponibles (%s); se usan pesos aleatorios fijos", info.name, e)
        if net is None:
            try:
                net = timm.create_model(info.timm_name, pretrained=False, num_classes=0)
            except Exception as e:
                raise WeightsUnavailable(f"No se puede construir {info.name}: {e}") from e
        return TimmBackbone(info, net)


class WoundClassifier(nn.Module):
    """Ramas -> concatenación -> capas densas ReLU -> capa de salida (logits)"""

    def __init__(self, branches, head_widths, num_classes, freeze_base=True):
        super().__init__()
        self.branches = nn.ModuleList(branches)
        self.freeze_base = freeze_base
        self.concat_width = sum(b.feature_width for b in branches)
        layers = []
        width = self.concat_width
        for w in head_widths:
            layers += [nn.Linear(width, w), nn.ReLU()]
            width = w
        layers.append(nn.Linear(width, num_classes))
        self.head = nn.Sequential(*layers)
        if freeze_base:
            for p in self.branches.parameters():
                p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        if self.freeze_base:
            self.branches.eval()
        return self

    def features(self, inputs):
        return torch.cat([branch(x) for branch, x in zip(self.branches, inputs)], dim=1)

    def forward(self, inputs):
        return self.head(self.features(inputs))

    def dense_layers(self):
        """Capas densas ocultas (sin contar la de salida)"""
        return [m for m in self.head if isinstance(m, nn.Linear)][:-1]


def _tensor_checksum(t):
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


class ModelHandle:
    """Modelo construido más su especificación"""

    def __init__(self, spec, model):
        self.spec = spec
        self.model = model

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def feature_width(self):
        return self.model.concat_width

    @property
    def dtype(self):
        return next(self.model.head.parameters()).dtype

    def trainable_parameter_ids(self):
        return [n for n, p in self.model.named_parameters() if p.requires_grad]

    def backbone_parameter_ids(self):
        return [n for n, _ in self.model.named_parameters() if n.startswith("branches.")]

    def head_parameter_ids(self):
        return [n for n, _ in self.model.named_parameters() if n.startswith("head.")]

    def checksums(self, prefix="branches."):
        """SHA-256 por tensor (parámetros y buffers) cuyo nombre empieza por ``prefix``"""
        return {n: _tensor_checksum(t) for n, t in self.model.state_dict().items() if n.startswith(prefix)}

    def _check_raster(self, raster):
        if not isinstance(raster, np.ndarray) or raster.ndim != 3 or raster.shape[2] != 3 or min(raster.shape[:2]) < 1:
            shape = getattr(raster, "shape", type(raster).__name__)
            raise ShapeMismatch(f"Se esperaba un raster HxWx3, llegó {shape}")

    def _branch_rasters(self, item):
        branches = len(self.spec.backbones)
        if self.spec.family is Family.MULTIZOOM4:
            if not isinstance(item, (tuple, list)) or len(item) != branches:
                got = len(item) if isinstance(item, (tuple, list)) else 1
                raise ArityMismatch(f"multizoom4 necesita {branches} rasters (Z0..Z3), llegaron {got}")
            rasters = list(item)
        else:
            if isinstance(item, (tuple, list)):
                raise ArityMismatch(f"{self.spec.family.value} recibe un único raster")
            rasters = [item] * branches
        for raster in rasters:
            self._check_raster(raster)
        return rasters

    def encode(self, items):
        """Lista de entradas -> tupla de tensores NCHW en [0, 1], uno por rama"""
        per_item = [self._branch_rasters(item) for item in items]
        tensors = []
        for b, dims in enumerate(self.spec.input_dims):
            stack = np.stack([resize_for_backbone(rasters[b], dims) for rasters in per_item])
            tensor = torch.from_numpy(stack).permute(0, 3, 1, 2).to(self.dtype) / 255.0
            tensors.append(tensor)
        return tuple(tensors)

    @torch.no_grad()
    def extract_features(self, items, batch_size=64):
        """Vectores concatenados de las ramas (modo inferencia)"""
        self.model.eval()
        chunks = [self.model.features(self.encode(items[i:i + batch_size]))
                  for i in range(0, len(items), batch_size)]
        return torch.cat(chunks) if chunks else torch.empty(0, self.feature_width, dtype=self.dtype)

    @torch.no_grad()
    def predict_batch(self, items, batch_size=64):
        self.model.eval()
        probs = []
        for i in range(0, len(items), batch_size):
            logits = self.model(self.encode(items[i:i + batch_size]))
            probs.append(torch.softmax(logits.double(), dim=1))
        return torch.cat(probs).numpy() if probs else np.zeros((0, self.num_classes))

    def predict(self, item):
        """Vector de probabilidades de longitud num_classes"""
        return self.predict_batch([item])[0]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, SPEC_FILE), "w", encoding="utf-8") as f:
            json.dump(self.spec.to_dict(), f, indent=2, sort_keys=True)
        torch.save(self.model.state_dict(), os.path.join(directory, PARAMS_FILE))

    @classmethod
    def load(cls, directory):
        """Carga spec + parámetros y comprueba que encajan"""
        try:
            with open(os.path.join(directory, SPEC_FILE), "r", encoding="utf-8") as f:
                spec = ModelSpec.from_dict(json.load(f))
            state = torch.load(os.path.join(directory, PARAMS_FILE), map_location="cpu")
        except FileNotFoundError as e:
            raise ArtifactSpecMismatch(f"Artefacto incompleto en {directory}: {e}") from None
        handle = build_model(spec, weights_from_artifact=True)
        expected = {k: tuple(v.shape) for k, v in handle.model.state_dict().items()}
        found = {k: tuple(v.shape) for k, v in state.items()}
        if expected != found:
            missing = sorted(set(expected) - set(found))[:3]
            extra = sorted(set(found) - set(expected))[:3]
            raise ArtifactSpecMismatch(
                f"Los parámetros de {directory} no encajan con su spec (faltan {missing}, sobran {extra})")
        head_weight = next(v for k, v in state.items() if k.startswith("head."))
        handle.model.to(head_weight.dtype)
        handle.model.load_state_dict(state)
        return handle


def build_model(spec, strict_weights=False, weights_from_artifact=False):
    """Construye el modelo de una ModelSpec; la cabeza se inicializa con spec.seed"""
    branches = [create_backbone(name, pretrained=spec.pretrained and not weights_from_artifact,
                                strict_weights=strict_weights)
                for name in spec.backbones]
    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        model = WoundClassifier(branches, spec.head, spec.num_classes, spec.freeze_base)
    model.eval()
    logger.debug("Modelo %s construido (%d características concatenadas)", model_label(spec), model.concat_width)
    return ModelHandle(spec, model)


def build_single(backbone, num_classes=3, head=None, **options):
    """Transfer learning con un backbone"""
    spec = ModelSpec(Family.SINGLE, (backbone,), num_classes, head, **options)
    return build_model(spec)


def build_stacked2(a, b, num_classes=3, head=None, **options):
    """Dos backbones distintos sobre la misma entrada"""
    spec = ModelSpec(Family.STACKED2, (a, b), num_classes, head, **options)
    return build_model(spec)


def build_multizoom4(b0, b1, b2, b3, num_classes=3, head=None, **options):
    """Una rama por canal: b0 recibe Z0, ..., b3 recibe Z3"""
    spec = ModelSpec(Family.MULTIZOOM4, (b0, b1, b2, b3), num_classes, head, **options)
    return build_model(spec)
