"""Expected-gradients pixel attribution, additivity checks and overlay rendering.

For an input ``x``, a background set ``B`` and class ``c`` the attribution is
the Monte-Carlo estimate of::

    E_{b ~ B, a ~ U[0,1]} [ (x - b) * grad f_c(b + a (x - b)) ]

whose entries sum to ``f_c(x) - mean_b f_c(b)`` in expectation. Samples are
spread evenly over the background references and the path coefficients are
stratified within each reference, which keeps the Monte-Carlo error small and
makes the estimate exact for affine models at any budget of at least ``|B|``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _backend  # noqa: F401
import tensorflow as tf
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.cm import ScalarMappable
from matplotlib.colors import LinearSegmentedColormap, Normalize
from matplotlib.figure import Figure

from .errors import ArtifactIOError, CapabilityError, ConfigError
from .models import ModelHandle

BLUE_WHITE_PINK = LinearSegmentedColormap.from_list("blue_white_pink", ["#1e88e5", "#ffffff", "#ff0d57"])


@dataclass
class BackgroundSet:
    images: np.ndarray
    seed: int
    indices: np.ndarray  # positions within the training split

    def __len__(self):
        return len(self.images)


def select_background(train_images: np.ndarray, m: int, seed: int) -> BackgroundSet:
    """Uniform sample of ``m`` training images, without replacement."""
    n = len(train_images)
    if n == 0:
        raise ConfigError("cannot draw a background from an empty training split")
    if not 1 <= m <= n:
        raise ConfigError(f"background size {m} not in [1, {n}]")
    idx = np.random.default_rng(seed).choice(n, size=m, replace=False)
    return BackgroundSet(np.asarray(train_images)[idx], int(seed), idx)


@dataclass
class AttributionMap:
    values: np.ndarray
    base_value: float
    explained_output: float
    class_index: int
    seed: int | None = None
    n_samples: int | None = None

    @property
    def residual(self) -> float:
        return abs(float(np.sum(self.values, dtype=np.float64)) + self.base_value - self.explained_output)

    def sidecar(self) -> dict:
        return {
            "class_index": self.class_index,
            "base_value": self.base_value,
            "explained_output": self.explained_output,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "residual": self.residual,
        }


@dataclass
class AdditivityReport:
    residual: float
    gap: float
    threshold: float
    passed: bool


def verify_additivity(attr: AttributionMap, tol_rel: float = 0.01, floor: float = 1e-8) -> AdditivityReport:
    """Check ``|sum(values) + base - output| <= tol_rel * max(|output - base|, floor)``."""
    gap = abs(attr.explained_output - attr.base_value)
    threshold = tol_rel * max(gap, floor)
    residual = attr.residual
    return AdditivityReport(residual, gap, threshold, residual <= threshold)


def _as_callable(model):
    if isinstance(model, ModelHandle):
        model = model.model
    if not callable(model):
        raise CapabilityError(f"{type(model).__name__} is not a callable model")
    dtype = getattr(model, "compute_dtype", None) or "float32"
    inputs = getattr(model, "inputs", None)
    if inputs:  # a functional model's declared input dtype beats its default policy
        dtype = inputs[0].dtype
    if hasattr(model, "trainable_weights"):  # keras model: force inference mode
        return (lambda t: model(t, training=False)), tf.as_dtype(dtype)
    return model, tf.as_dtype(dtype)


def _outputs(fn, x: np.ndarray, dtype, class_index: int, batch_size: int) -> np.ndarray:
    out = [np.asarray(fn(tf.constant(x[i:i + batch_size], dtype=dtype)))[:, class_index]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def _gradients(fn, points: np.ndarray, dtype, class_index: int) -> np.ndarray:
    t = tf.constant(points, dtype=dtype)
    with tf.GradientTape() as tape:
        tape.watch(t)
        y = tf.reduce_sum(fn(t)[:, class_index])
    g = tape.gradient(y, t)
    if g is None:
        raise CapabilityError("model output is not differentiable with respect to its input")
    return g.numpy().astype(np.float64)


def attribute(model, x: np.ndarray, background: BackgroundSet | np.ndarray, class_index: int,
              n_samples: int = 200, seed: int | Sequence[int] = 0, batch_size: int = 64) -> AttributionMap:
    """Expected-gradients attribution of ``f_class_index`` at ``x``.

    ``model`` is a :class:`ModelHandle`, a Keras model, or any callable mapping
    a batch tensor to ``(n, K)`` outputs that TensorFlow can differentiate.
    Inference mode is always used, so dropout is off.
    """
    fn, dtype = _as_callable(model)
    refs = background.images if isinstance(background, BackgroundSet) else np.asarray(background)
    x = np.asarray(x, dtype=np.float64)
    if refs.ndim != x.ndim + 1 or refs.shape[1:] != x.shape:
        raise ConfigError(f"background shape {refs.shape} does not match input shape {x.shape}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, got {n_samples}")
    refs = refs.astype(np.float64)
    m = len(refs)

    probe = np.asarray(fn(tf.constant(x[None], dtype=dtype)))
    if not 0 <= class_index < probe.shape[-1]:
        raise ConfigError(f"class index {class_index} outside [0, {probe.shape[-1]})")
    explained = float(probe[0, class_index])
    base = float(np.mean(_outputs(fn, refs, dtype, class_index, batch_size)))

    rng = np.random.default_rng(seed)
    if n_samples >= m:
        used = np.arange(m)
        per_ref = np.full(m, n_samples // m)
        per_ref[rng.permutation(m)[: n_samples % m]] += 1
    else:
        used = np.sort(rng.choice(m, size=n_samples, replace=False))
        per_ref = np.ones(n_samples, dtype=int)
    ref_ids = np.repeat(used, per_ref)
    alphas = np.concatenate([(np.arange(c) + rng.random(c)) / c for c in per_ref])
    # each used reference carries equal total weight
    weights = 1.0 / (len(used) * np.repeat(per_ref, per_ref))

    total = np.zeros_like(x)
    for start in range(0, len(ref_ids), batch_size):
        b = refs[ref_ids[start:start + batch_size]]
        a = alphas[start:start + batch_size].reshape((-1,) + (1,) * x.ndim)
        delta = x[None] - b
        grads = _gradients(fn, b + a * delta, dtype, class_index)
        w = weights[start:start + batch_size].reshape((-1,) + (1,) * x.ndim)
        total += np.sum(w * delta * grads, axis=0)

    seed_rec = int(seed) if np.isscalar(seed) else None
    return AttributionMap(total, base, explained, int(class_index), seed_rec, int(n_samples))


def attribute_classes(model, x: np.ndarray, background, classes: Sequence[int], n_samples: int = 200,
                      seed: int = 0, input_id: int = 0) -> list[AttributionMap]:
    """One attribution per class, each with its own RNG stream keyed by (seed, input_id, class)."""
    maps = []
    for c in classes:
        attr = attribute(model, x, background, c, n_samples, seed=[seed, input_id, c])
        attr.seed = seed
        maps.append(attr)
    return maps


def save_attribution(attr: AttributionMap, stem: str | Path, tol_rel: float | None = None,
                     floor: float = 1e-8) -> tuple[Path, Path]:
    """Write ``<stem>.npz`` (values) and ``<stem>.json`` (scalars and residual)."""
    stem = Path(stem)
    npz, sidecar = stem.with_suffix(".npz"), stem.with_suffix(".json")
    doc = attr.sidecar()
    if tol_rel is not None:
        rep = verify_additivity(attr, tol_rel, floor)
        doc.update(tol_rel=tol_rel, floor=floor, threshold=rep.threshold, passed=rep.passed)
    try:
        np.savez_compressed(npz, values=attr.values)
        sidecar.write_text(json.dumps(doc, indent=2))
    except OSError as e:
        raise ArtifactIOError(f"cannot write attribution {stem}: {e}") from e
    return npz, sidecar


def load_attribution(stem: str | Path) -> AttributionMap:
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    with np.load(stem.with_suffix(".npz")) as z:
        values = z["values"]
    return AttributionMap(values, doc["base_value"], doc["explained_output"], doc["class_index"],
                          doc.get("seed"), doc.get("n_samples"))


def pixel_scores(values: np.ndarray) -> np.ndarray:
    """Signed per-pixel score: attribution summed over color channels."""
    return np.asarray(values, dtype=np.float64).sum(axis=-1)


def color_scale(scores: np.ndarray) -> float:
    """Symmetric color limit: the 99.5th percentile of ``|score|``, or the max if that is 0."""
    mag = np.abs(np.asarray(scores, dtype=np.float64))
    if mag.size == 0:
        return 0.0
    v = float(np.percentile(mag, 99.5))
    return v if v > 0 else float(mag.max())


def overlay_image(x: np.ndarray, values: np.ndarray, vmax: float | None = None, alpha_max: float = 0.85) -> np.ndarray:
    """Blend a blue-white-pink map of ``values`` over the grayscale image ``x``.

    Opacity grows with ``|score| / vmax`` (clipped at 1); pixels with zero score
    show the plain grayscale input.
    """
    gray = np.repeat(np.asarray(x, dtype=np.float64).mean(axis=-1, keepdims=True), 3, axis=-1)
    scores = pixel_scores(values)
    if vmax is None:
        vmax = color_scale(scores)
    if vmax <= 0:
        return gray
    t = np.clip(scores / vmax, -1.0, 1.0)
    color = BLUE_WHITE_PINK(0.5 + 0.5 * t)[..., :3]
    alpha = (alpha_max * np.abs(t))[..., None]
    return (1 - alpha) * gray + alpha * color


def render_overlay(x: np.ndarray, attrs: AttributionMap | Sequence[AttributionMap], path: str | Path,
                   class_names: Sequence[str] | None = None) -> Path:
    """Save the input next to one overlay panel per attribution, on a shared symmetric scale."""
    attrs = [attrs] if isinstance(attrs, AttributionMap) else list(attrs)
    for a in attrs:
        if a.values.shape != np.shape(x):
            raise ConfigError(f"attribution shape {a.values.shape} does not match image {np.shape(x)}")
    vmax = max(color_scale(pixel_scores(a.values)) for a in attrs)
    fig = Figure(figsize=(1.9 * (len(attrs) + 1) + 0.6, 2.3))
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, len(attrs) + 1, squeeze=False)[0]
    axes[0].imshow(np.clip(x, 0, 1))
    axes[0].set_title("input", fontsize=8)
    for ax, a in zip(axes[1:], attrs):
        ax.imshow(np.clip(overlay_image(x, a.values, vmax), 0, 1))
        label = class_names[a.class_index] if class_names else str(a.class_index)
        ax.set_title(f"class {label}", fontsize=8)
    for ax in axes:
        ax.axis("off")
    mappable = ScalarMappable(Normalize(-vmax or -1, vmax or 1), BLUE_WHITE_PINK)
    fig.colorbar(mappable, ax=list(axes), fraction=0.02, pad=0.01)
    try:
        fig.savefig(path, dpi=100)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e
    return Path(path)
