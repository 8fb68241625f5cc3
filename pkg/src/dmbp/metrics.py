"""Faithfulness metrics over raw images and a classifier-reset sanity check.

Insertion starts from a Gaussian-blurred copy of the raw (pre-normalization)
image and copies pixels back in attribution order, tracking the softmax
probability of a label set; the area under that curve summarizes how quickly
the highest-attributed pixels restore the prediction.  The complementary
variant inserts in ascending order and tracks the other ground-truth labels,
so attributions that crowd onto one object score low when the remaining
labels recover late.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .baselines import BaselineConfig, integrated_gradients, smoothgrad
from .errors import DimensionError
from .imaging import AttributionMap, normalize_image
from .linearize import vanilla_attribution
from .model import NetworkDef, forward
from .optimizer import DmbpConfig, attribution_map, optimize
from .ops import as_tensor

METHODS = ("dmbp", "grad", "ig", "sg")


@dataclass
class MetricConfig:
    steps: int = 100
    blur_sigma: float = 5.0
    blur_radius: Optional[int] = None  # default: round(2 * blur_sigma)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if self.blur_radius is not None and self.blur_radius < 1:
            raise ValueError(f"blur_radius must be >= 1, got {self.blur_radius}")


@dataclass
class InsertionCurve:
    """Probability against fraction of pixels inserted, plus trapezoid AUC."""

    fractions: np.ndarray
    probabilities: np.ndarray
    auc: float


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Sampled Gaussian on [-radius, radius], normalized to sum 1."""
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def blur_baseline(image: np.ndarray, config: Optional[MetricConfig] = None) -> np.ndarray:
    """Separable edge-clamped Gaussian blur of a (C, H, W) raw image."""
    config = config or MetricConfig()
    if image.ndim != 3:
        raise DimensionError(f"blur expects (C, H, W), got {image.shape}")
    radius = config.blur_radius if config.blur_radius is not None else max(1, int(round(2 * config.blur_sigma)))
    kernel = gaussian_kernel(config.blur_sigma, radius).astype(np.float64)
    out = image.astype(np.float64)
    _, h, w = image.shape
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = sum(kernel[i] * padded[:, i : i + h, :] for i in range(2 * radius + 1))
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = sum(kernel[i] * padded[:, :, i : i + w] for i in range(2 * radius + 1))
    return out.astype(image.dtype)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def order_pixels(values: np.ndarray, descending: bool, seed: int) -> np.ndarray:
    """Flat pixel indices sorted by value; ties broken by a seeded shuffle."""
    flat = values.ravel()
    perm = np.random.default_rng(seed).permutation(flat.size)
    return np.lexsort((perm, -flat if descending else flat))


def _insertion_curve(
    net: NetworkDef,
    image: np.ndarray,
    order: np.ndarray,
    labels: Sequence[int],
    config: MetricConfig,
    baseline: Optional[np.ndarray] = None,
) -> InsertionCurve:
    c, h, w = image.shape
    pixels = h * w
    if baseline is None:
        baseline = blur_baseline(image, config)
    elif baseline.shape != image.shape:
        raise DimensionError(f"baseline shape {baseline.shape} does not match image {image.shape}")
    flat_img = image.reshape(c, pixels)
    flat_base = baseline.reshape(c, pixels)
    labels = np.asarray(labels, dtype=np.int64)
    fractions = np.arange(config.steps + 1, dtype=np.float64) / config.steps
    probabilities = np.empty(config.steps + 1, dtype=np.float64)
    for k in range(config.steps + 1):
        count = int(round(k * pixels / config.steps))
        composite = flat_base.copy()
        chosen = order[:count]
        composite[:, chosen] = flat_img[:, chosen]
        x = composite.reshape(c, h, w)
        if net.preprocess is not None:
            x = normalize_image(x, net.preprocess)
        trace = forward(net, as_tensor(x, net.dtype))
        probabilities[k] = float(_softmax(trace.logits)[labels].mean())
    auc = float(np.trapezoid(probabilities, fractions))
    return InsertionCurve(fractions=fractions, probabilities=probabilities, auc=auc)


def _check_metric_inputs(net, image, amap, target):
    if image.ndim != 3:
        raise DimensionError(f"insertion expects a (C, H, W) raw image, got {image.shape}")
    if amap.values.shape != image.shape[1:]:
        raise DimensionError(
            f"map shape {amap.values.shape} does not match image pixels {image.shape[1:]}"
        )
    if not 0 <= target < net.class_count:
        raise ValueError(f"class index {target} out of range [0, {net.class_count})")


def insertion_metric(
    net: NetworkDef,
    image: np.ndarray,
    amap: AttributionMap,
    target: int,
    config: Optional[MetricConfig] = None,
    baseline: Optional[np.ndarray] = None,
) -> InsertionCurve:
    """Insertion in descending attribution order, tracking the target's softmax.

    The curve includes fraction 0 (pure baseline) and 1 (original image); at
    step k the top round(k * P / steps) pixels are copied, all channels of
    each pixel together.  The baseline defaults to a Gaussian blur of the
    image but may be supplied explicitly.
    """
    config = config or MetricConfig()
    _check_metric_inputs(net, image, amap, target)
    order = order_pixels(amap.values, descending=True, seed=config.seed)
    return _insertion_curve(net, image, order, [target], config, baseline)


def complementary_insertion_metric(
    net: NetworkDef,
    image: np.ndarray,
    amap: AttributionMap,
    target: int,
    other_labels: Sequence[int],
    config: Optional[MetricConfig] = None,
    baseline: Optional[np.ndarray] = None,
) -> InsertionCurve:
    """Insertion in ascending order, tracking the mean softmax of other labels."""
    config = config or MetricConfig()
    _check_metric_inputs(net, image, amap, target)
    others = list(other_labels)
    if not others:
        raise ValueError("complementary insertion requires at least one other label")
    if target in others:
        raise ValueError(f"target {target} cannot appear in other_labels")
    for lbl in others:
        if not 0 <= lbl < net.class_count:
            raise ValueError(f"class index {lbl} out of range [0, {net.class_count})")
    order = order_pixels(amap.values, descending=False, seed=config.seed)
    return _insertion_curve(net, image, order, others, config, baseline)


# ---------------------------------------------------------------------------
# sanity check

def method_attribution(
    net: NetworkDef,
    x,
    target: int,
    method: str,
    dmbp_config: Optional[DmbpConfig] = None,
    baseline_config: Optional[BaselineConfig] = None,
) -> AttributionMap:
    """Compute one attribution map by method name ("dmbp", "grad", "ig", "sg")."""
    if method == "grad":
        return vanilla_attribution(net, x, target)
    if method == "ig":
        return integrated_gradients(net, x, target, baseline_config)
    if method == "sg":
        return smoothgrad(net, x, target, baseline_config)
    if method == "dmbp":
        x = as_tensor(x, net.dtype)
        _, decomposed, _ = optimize(net, x, target, dmbp_config)
        return attribution_map(x, decomposed, {"target": int(target)})
    raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")


def reinit_classifier(net: NetworkDef, seed: int) -> NetworkDef:
    """Redraw the final dense layer from N(0, empirical std of the originals)."""
    from dataclasses import replace as dc_replace

    rng = np.random.default_rng(seed)
    pid = net.layers[-1].param_id
    weights = dict(net.weights)
    biases = dict(net.biases)
    w = net.weights[pid]
    new_w = rng.normal(0.0, float(w.std()), size=w.shape).astype(net.dtype)
    new_w.setflags(write=False)
    weights[pid] = new_w
    if pid in biases:
        b = biases[pid]
        new_b = rng.normal(0.0, float(b.std()), size=b.shape).astype(net.dtype)
        new_b.setflags(write=False)
        biases[pid] = new_b
    return dc_replace(net, weights=weights, biases=biases)


def spearman_rank_correlation(a, b) -> float:
    """Spearman rank correlation of two flattened maps."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"correlation inputs differ in length: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("correlation needs at least two values")
    return float(spearmanr(a, b).statistic)


def reinit_sanity_check(
    net: NetworkDef,
    x,
    target: int,
    method: str,
    seed: int,
    dmbp_config: Optional[DmbpConfig] = None,
    baseline_config: Optional[BaselineConfig] = None,
    return_maps: bool = False,
):
    """Spearman correlation of a method's map before and after classifier reset.

    A method sensitive to the final layer should decorrelate (|rho| near 0);
    maps dominated by input structure stay correlated.
    """
    original = method_attribution(net, x, target, method, dmbp_config, baseline_config)
    reset = method_attribution(reinit_classifier(net, seed), x, target, method, dmbp_config, baseline_config)
    rho = spearman_rank_correlation(original.values, reset.values)
    if return_maps:
        return rho, original, reset
    return rho


# ---------------------------------------------------------------------------
# CSV output

def write_curve_csv(path, curve: InsertionCurve):
    lines = ["fraction,probability"]
    for f, p in zip(curve.fractions, curve.probabilities):
        lines.append(f"{float(f)!r},{float(p)!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary_csv(path, rows: List[tuple]):
    """Rows of (image id, method, metric, auc)."""
    lines = ["image,method,metric,auc"]
    for image_id, method, metric, auc in rows:
        lines.append(f"{image_id},{method},{metric},{float(auc)!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
