"""Frozen transfer-learning backbones plus the fixed 8-layer classification head.

The head's first Dense(512) acts on the channel axis of the backbone feature
map *before* Flatten. For a feature map of shape ``(h, w, c)`` the trainable
parameter count is therefore::

    c*512 + 512  +  (h*w*512)*256 + 256  +  256*128 + 128  +  128*K + K

which gives 2,263,178 for ResNet50V2 and Xception (3x3x2048 at 75x75 input),
1,214,602 for InceptionV3 (1x1x2048) and 821,386 for VGG16 (2x2x512).
No pooling sits between backbone and head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _backend  # noqa: F401  (sets backend env vars before keras import)
import keras

from .errors import ArtifactIOError, ConfigError, WeightsFetchError

INPUT_SHAPE = (75, 75, 3)

_APPLICATIONS = {
    # Keras' ResNet50V2 is the 50-layer ResNet whose headless parameter count
    # (23,564,800) matches the reference configuration.
    "resnet50": ("ResNet50V2", "resnet_v2"),
    "inceptionv3": ("InceptionV3", "inception_v3"),
    "xception": ("Xception", "xception"),
    "vgg16": ("VGG16", "vgg16"),
}
IMAGENET_ARCHITECTURES = tuple(_APPLICATIONS)
# "tiny" is a desk-scale stand-in: one strided conv with random frozen weights.
ARCHITECTURES = IMAGENET_ARCHITECTURES + ("tiny",)


@dataclass
class BackboneSpec:
    architecture: str = "resnet50"
    weights: str | None = "imagenet"
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    seed: int = 0
    canonical_preprocessing: bool = False
    include_top: bool = field(default=False, init=False)
    trainable: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {', '.join(ARCHITECTURES)}")
        if self.weights not in ("imagenet", None):
            raise ConfigError(f"weights must be 'imagenet' or None, got {self.weights!r}")
        if self.architecture == "tiny" and self.weights is not None:
            raise ConfigError("the tiny backbone has no pretrained weights; use weights=None")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = {k: v for k, v in d.items() if k not in ("include_top", "trainable")}
        return cls(**d)


@dataclass
class HeadSpec:
    num_classes: int = 10
    units: tuple[int, ...] = (512, 256, 128)
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.units = tuple(int(u) for u in self.units)
        if len(self.units) != 3:
            raise ConfigError("the head has exactly three hidden Dense layers")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(**d)


@dataclass
class ModelHandle:
    model: keras.Model
    backbone: keras.Model
    head: keras.Sequential
    backbone_spec: BackboneSpec
    head_spec: HeadSpec
    class_names: list[str] | None = None

    @property
    def trainable_param_count(self) -> int:
        return count_parameters(self)[0]

    @property
    def nontrainable_param_count(self) -> int:
        return count_parameters(self)[1]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.backbone.output.shape[1:])

    def features(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Backbone feature maps for a normalized image batch."""
        return _batched(lambda b: self._preprocess_and_extract(b), x, batch_size)

    def _preprocess_and_extract(self, b):
        if self.backbone_spec.canonical_preprocessing:
            b = _canonical_preprocess(self.backbone_spec.architecture)(b)
        return self.backbone(b, training=False)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class probabilities with dropout disabled."""
        return _batched(lambda b: self.model(b, training=False), x, batch_size)


def _batched(fn, x, batch_size):
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        raise ConfigError("empty input batch")
    return np.concatenate([np.asarray(fn(x[i:i + batch_size])) for i in range(0, len(x), batch_size)])


def _canonical_preprocess(architecture: str):
    module = getattr(keras.applications, _APPLICATIONS[architecture][1])
    return lambda x: module.preprocess_input(x * 255.0)


def _tiny_backbone(spec: BackboneSpec) -> keras.Model:
    init = keras.initializers.HeUniform(seed=spec.seed)
    inputs = keras.Input(spec.input_shape)
    x = keras.layers.Conv2D(16, 15, strides=15, activation="relu", kernel_initializer=init,
                            bias_initializer="zeros", name="patch_conv")(inputs)
    return keras.Model(inputs, x, name="tiny")


def build_backbone(spec: BackboneSpec) -> keras.Model:
    """Headless feature extractor with every layer frozen."""
    if spec.architecture == "tiny":
        backbone = _tiny_backbone(spec)
    else:
        ctor = getattr(keras.applications, _APPLICATIONS[spec.architecture][0])
        if spec.weights is None:
            keras.utils.set_random_seed(spec.seed)
            backbone = ctor(include_top=False, weights=None, input_shape=spec.input_shape)
        else:
            try:
                backbone = ctor(include_top=False, weights=spec.weights, input_shape=spec.input_shape)
            except Exception as e:  # keras raises bare Exception on fetch failure
                raise WeightsFetchError(
                    f"could not obtain {spec.weights} weights for {spec.architecture}: {e}") from e
    backbone.trainable = False
    return backbone


def build_head(spec: HeadSpec, feature_shape) -> keras.Sequential:
    def dense(units, i, activation):
        return keras.layers.Dense(units, activation=activation,
                                  kernel_initializer=keras.initializers.GlorotUniform(seed=spec.seed + i),
                                  bias_initializer="zeros")

    def dropout(i):
        return keras.layers.Dropout(spec.dropout_rate, seed=spec.seed + 100 + i)

    u1, u2, u3 = spec.units
    return keras.Sequential([
        keras.Input(tuple(feature_shape)),
        dense(u1, 0, "relu"),
        dropout(0),
        keras.layers.Flatten(),
        dense(u2, 1, "relu"),
        dropout(1),
        dense(u3, 2, "relu"),
        dropout(2),
        dense(spec.num_classes, 3, "softmax"),
    ], name="head")


def assemble_model(backbone: keras.Model, head_spec: HeadSpec, backbone_spec: BackboneSpec,
                   class_names: list[str] | None = None) -> ModelHandle:
    if class_names is not None and len(class_names) != head_spec.num_classes:
        raise ConfigError(f"head has {head_spec.num_classes} outputs but the dataset has {len(class_names)} classes")
    feature_shape = tuple(backbone.output.shape[1:])
    if len(feature_shape) != 3:
        raise ConfigError(f"backbone must emit a (h, w, c) feature map, got {feature_shape}")
    head = build_head(head_spec, feature_shape)
    inputs = keras.Input(backbone_spec.input_shape)
    x = inputs
    if backbone_spec.canonical_preprocessing:
        x = keras.layers.Lambda(_canonical_preprocess(backbone_spec.architecture), name="preprocess")(x)
    outputs = head(backbone(x, training=False))
    model = keras.Model(inputs, outputs, name=f"{backbone_spec.architecture}_dnn")
    return ModelHandle(model, backbone, head, backbone_spec, head_spec, class_names)


def build_model(backbone_spec: BackboneSpec, head_spec: HeadSpec, class_names=None) -> ModelHandle:
    return assemble_model(build_backbone(backbone_spec), head_spec, backbone_spec, class_names)


def count_parameters(handle: ModelHandle) -> tuple[int, int]:
    trainable = sum(int(np.prod(w.shape)) for w in handle.model.trainable_weights)
    nontrainable = sum(int(np.prod(w.shape)) for w in handle.model.non_trainable_weights)
    return trainable, nontrainable


def head_parameter_formula(feature_shape, spec: HeadSpec) -> int:
    """Closed-form trainable parameter count of the head over a ``(h, w, c)`` feature map."""
    h, w, c = feature_shape
    u1, u2, u3 = spec.units
    k = spec.num_classes
    return (c * u1 + u1) + (h * w * u1 * u2 + u2) + (u2 * u3 + u3) + (u3 * k + k)


def save_checkpoint(handle: ModelHandle, directory: str | Path) -> Path:
    """Write head weights, specs and class order. Backbone weights are stored
    too unless they are the pretrained ones, which are re-fetched on load."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "head_weights.npz", *handle.head.get_weights())
        if handle.backbone_spec.weights is None:
            np.savez(directory / "backbone_weights.npz", *handle.backbone.get_weights())
        doc = {
            "backbone": handle.backbone_spec.to_dict(),
            "head": handle.head_spec.to_dict(),
            "class_names": handle.class_names,
        }
        (directory / "model_spec.json").write_text(json.dumps(doc, indent=2))
    except OSError as e:
        raise ArtifactIOError(f"cannot write checkpoint to {directory}: {e}") from e
    return directory


def _load_npz(path: Path) -> list[np.ndarray]:
    with np.load(path) as z:
        return [z[f"arr_{i}"] for i in range(len(z.files))]


def load_checkpoint(directory: str | Path) -> ModelHandle:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "model_spec.json").read_text())
        head_weights = _load_npz(directory / "head_weights.npz")
    except OSError as e:
        raise ArtifactIOError(f"cannot read checkpoint {directory}: {e}") from e
    backbone_spec = BackboneSpec.from_dict(doc["backbone"])
    handle = build_model(backbone_spec, HeadSpec.from_dict(doc["head"]), doc["class_names"])
    if backbone_spec.weights is None:
        try:
            handle.backbone.set_weights(_load_npz(directory / "backbone_weights.npz"))
        except OSError as e:
            raise ArtifactIOError(f"checkpoint {directory} lacks backbone weights: {e}") from e
    handle.head.set_weights(head_weights)
    return handle
