"""Mask optimization: split a logit into aligned, opposing, and nuisance parts.

Every ReLU site carries one logit per output element; sigma = sigmoid(logit)
selects each element's gradient route.  Three quantities partition the
logit y exactly:

    y_pos = reconstruction with masks sigma        (aligned evidence)
    y_neg = reconstruction with masks 1 - sigma    (opposing evidence)
    y_nui = y - y_pos - y_neg                      (cross-route residual)

and the loss  y_neg - y_pos + |y_nui|  is minimized with RMSProp.  The
|.| term uses subgradient 0 at exactly 0.

Gradients with respect to the mask logits are analytic: both
reconstructions are multilinear in the per-site masks, so for site s

    d y_pos / d sigma_s = r_s * q_s

where r_s is the gradient arriving at the site during the masked backward
pass (before the site's own masks) and q_s the replayed forward value at
the site after the Heaviside but before sigma.  One backward and one
replay per route per iteration therefore yield every partial exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import NumericError
from .imaging import AttributionMap
from .linearize import BackwardResult, masked_backward, masked_replay, reconstruct_output
from .model import ActivationTrace, NetworkDef, forward
from .ops import Tensor, as_tensor

# Logit value used to realize an identity mask: sigmoid(40) rounds to 1.0
# in float32 and differs from 1 by ~4e-18 in float64.
IDENTITY_LOGIT = 40.0


@dataclass
class DmbpConfig:
    """Optimization hyperparameters; defaults follow the method's reference setup."""

    iterations: int = 200
    learning_rate: float = 0.01
    decay: float = 0.99
    epsilon: float = 1e-8
    log_every: int = 0  # 0 disables convergence logging

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.decay < 1:
            raise ValueError(f"decay must be in [0, 1), got {self.decay}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class MaskLogits:
    """Unconstrained per-site mask parameters; sigma = sigmoid(logit)."""

    values: Dict[str, Tensor]

    def sigmoids(self) -> Dict[str, Tensor]:
        return {path: expit(v) for path, v in self.values.items()}

    def copy(self) -> "MaskLogits":
        return MaskLogits({path: v.copy() for path, v in self.values.items()})


@dataclass
class RMSPropState:
    """Per-logit squared-gradient accumulators."""

    acc: Dict[str, Tensor]

    @classmethod
    def zeros_like(cls, logits: MaskLogits) -> "RMSPropState":
        return cls({path: np.zeros_like(v) for path, v in logits.values.items()})


@dataclass
class DecomposedOutput:
    """One evaluation of the three-way split and its two backward results."""

    y_pos: float
    y_neg: float
    y_nui: float
    pos: BackwardResult
    neg: BackwardResult


def identity_mask_logits(net: NetworkDef) -> MaskLogits:
    """Logits realizing sigma = 1 everywhere, reducing y_pos to the plain logit."""
    return MaskLogits(
        {path: np.full(net.site_shapes[path], IDENTITY_LOGIT, dtype=net.dtype) for path in net.relu_sites}
    )


def init_masks(net: NetworkDef, trace: ActivationTrace, target_class: int) -> MaskLogits:
    """Sign-agreement initialization, swept from the classifier downward.

    Two reverse passes run in lockstep: one applies the masks initialized so
    far, the other their complements.  At each site an element's logit is
    set to +2 where both incoming gradients are positive, -2 where both are
    negative, and 0 otherwise (sigma 0.5); the fresh masks are applied
    before the sweep continues, and the first site sees the unmasked
    classifier gradient on both streams.
    """
    from .linearize import _reverse_streams  # shared walker

    if not 0 <= target_class < net.class_count:
        raise ValueError(f"class index {target_class} out of range [0, {net.class_count})")
    store: Dict[str, Tensor] = {}

    def site_fn(path: str, grads: List[Tensor]) -> List[Tensor]:
        g_pos, g_neg = grads
        logit = np.zeros(g_pos.shape, dtype=net.dtype)
        logit[(g_pos > 0) & (g_neg > 0)] = 2
        logit[(g_pos < 0) & (g_neg < 0)] = -2
        store[path] = logit
        sigma = expit(logit)
        return [sigma, 1 - sigma]

    seed = np.zeros(net.class_count, dtype=net.dtype)
    seed[target_class] = 1
    _reverse_streams(net, trace, [seed, seed.copy()], site_fn)
    return MaskLogits({path: store[path] for path in net.relu_sites})


def _decompose_core(net, trace, target_class, logits: MaskLogits, with_grads: bool):
    sig = logits.sigmoids()
    inv = {path: 1 - s for path, s in sig.items()}
    pos = masked_backward(net, trace, target_class, sig, record_sites=with_grads)
    neg = masked_backward(net, trace, target_class, inv, record_sites=with_grads)
    y_pos = reconstruct_output(trace.x, net.biases, pos)
    y_neg = reconstruct_output(trace.x, net.biases, neg)
    y_nui = float(trace.logits[target_class]) - y_pos - y_neg
    out = DecomposedOutput(y_pos=y_pos, y_neg=y_neg, y_nui=y_nui, pos=pos, neg=neg)
    if not with_grads:
        return out, sig, None, None
    _, q_pos = masked_replay(net, trace, sig, record_sites=True, validate=False)
    _, q_neg = masked_replay(net, trace, inv, record_sites=True, validate=False)
    return out, sig, (pos.site_grads, q_pos), (neg.site_grads, q_neg)


def decompose(net: NetworkDef, trace: ActivationTrace, target_class: int, logits: MaskLogits) -> DecomposedOutput:
    """Evaluate y_pos / y_neg / y_nui at the given mask logits.

    y_nui is the residual by construction, so the three parts always sum to
    the forward logit.
    """
    out, _, _, _ = _decompose_core(net, trace, target_class, logits, with_grads=False)
    return out


def dmbp_loss(decomposed: DecomposedOutput) -> float:
    """y_neg - y_pos + |y_nui|."""
    return decomposed.y_neg - decomposed.y_pos + abs(decomposed.y_nui)


def loss_logit_grads(
    decomposed: DecomposedOutput,
    sig: Dict[str, Tensor],
    pos_parts: Tuple[Dict[str, Tensor], Dict[str, Tensor]],
    neg_parts: Tuple[Dict[str, Tensor], Dict[str, Tensor]],
) -> Dict[str, Tensor]:
    """Exact per-logit loss gradients from the recorded site products.

    With s = sign(y_nui) (0 at 0):
        dL/dsigma_s = -(1 + s) r+_s q+_s - (1 - s) r-_s q-_s
        dL/dlogit_s = dL/dsigma_s * sigma_s (1 - sigma_s)
    """
    r_pos, q_pos = pos_parts
    r_neg, q_neg = neg_parts
    s = float(np.sign(decomposed.y_nui))
    grads = {}
    for path, sigma in sig.items():
        d_sigma = -(1.0 + s) * (r_pos[path] * q_pos[path]) - (1.0 - s) * (r_neg[path] * q_neg[path])
        grads[path] = d_sigma * sigma * (1.0 - sigma)
    return grads


def loss_and_grads(
    net: NetworkDef, trace: ActivationTrace, target_class: int, logits: MaskLogits
) -> Tuple[float, DecomposedOutput, Dict[str, Tensor]]:
    """One loss evaluation plus its exact gradients wrt every mask logit."""
    d, sig, pos_parts, neg_parts = _decompose_core(net, trace, target_class, logits, with_grads=True)
    return dmbp_loss(d), d, loss_logit_grads(d, sig, pos_parts, neg_parts)


def rmsprop_step(logits: MaskLogits, grads: Dict[str, Tensor], state: RMSPropState, config: DmbpConfig):
    """acc <- decay*acc + (1-decay)*g^2;  logit <- logit - lr*g/(sqrt(acc)+eps)."""
    for path, g in grads.items():
        acc = state.acc[path]
        acc *= config.decay
        acc += (1.0 - config.decay) * g * g
        logits.values[path] = logits.values[path] - config.learning_rate * g / (np.sqrt(acc) + config.epsilon)
    return logits, state


def optimize(
    net: NetworkDef,
    x,
    target_class: int,
    config: Optional[DmbpConfig] = None,
    mask_logits: Optional[MaskLogits] = None,
):
    """Run the full mask optimization for one (input, target) pair.

    Returns (final MaskLogits, the last evaluated DecomposedOutput, and the
    loss trace as (iteration, y_pos, y_neg, y_nui, loss) rows).  The
    decomposition corresponds to the masks the final gradients were
    computed at; the returned logits include the last update.
    """
    config = config or DmbpConfig()
    x = as_tensor(x, net.dtype)
    trace = forward(net, x)
    logits = mask_logits.copy() if mask_logits is not None else init_masks(net, trace, target_class)
    state = RMSPropState.zeros_like(logits)
    rows: List[Tuple[int, float, float, float, float]] = []
    last = None
    for it in range(config.iterations):
        d, sig, pos_parts, neg_parts = _decompose_core(net, trace, target_class, logits, with_grads=True)
        loss = dmbp_loss(d)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        rows.append((it, d.y_pos, d.y_neg, d.y_nui, loss))
        grads = loss_logit_grads(d, sig, pos_parts, neg_parts)
        rmsprop_step(logits, grads, state, config)
        last = d
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            import logging

            logging.getLogger(__name__).info(
                "iter %d: y_pos=%.6g y_neg=%.6g y_nui=%.6g loss=%.6g", it, d.y_pos, d.y_neg, d.y_nui, loss
            )
    return logits, last, rows


def attribution_map(x, decomposed: DecomposedOutput, metadata: Optional[dict] = None) -> AttributionMap:
    """Pixel map (pos_grad + neg_grad) * x, channel-summed.

    The separate positive/negative route maps are retained for rendering.
    """
    x = np.asarray(x)
    full_pos = decomposed.pos.input_grad * x
    full_neg = decomposed.neg.input_grad * x
    if x.ndim == 3:
        pos, neg = full_pos.sum(axis=0), full_neg.sum(axis=0)
    else:
        pos, neg = full_pos.reshape(1, -1), full_neg.reshape(1, -1)
    meta = {"method": "dmbp"}
    if metadata:
        meta.update(metadata)
    return AttributionMap(values=pos + neg, metadata=meta, positive=pos, negative=neg)


def write_loss_trace(path, rows):
    """CSV loss trace: iteration, y_pos, y_neg, y_nui, loss."""
    lines = ["iteration,y_pos,y_neg,y_nui,loss"]
    for it, y_pos, y_neg, y_nui, loss in rows:
        lines.append(f"{int(it)},{float(y_pos)!r},{float(y_neg)!r},{float(y_nui)!r},{float(loss)!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
