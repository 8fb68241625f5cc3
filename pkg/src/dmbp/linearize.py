"""Exact linearization of a traced ReLU network.

Within the linear region an input selects, the logit for class t satisfies

    y_t = grad_x . x + sum_l grad_{b_l} . b_l

where the gradients come from a reverse pass seeded with a unit at that
logit.  The pass multiplies the gradient at every ReLU site by the recorded
Heaviside mask (H(0) = 0) and, when per-site masks are supplied, by those
masks as well; max-pool routes through the recorded argmax and the skip path
of residual blocks carries gradients unmasked.  Bias gradients are captured
when the walk reaches each biased layer, i.e. after every mask above that
layer has been applied, so the identity above holds with masks inserted.

The same frozen region can be replayed forward: h_l = mask * (W h + b) with
pooling routed by the recorded argmax reproduces the logits, and with
per-site masks applied it evaluates the masked reconstruction directly.
Both directions are linear in the input and biases jointly, and multilinear
in the per-site masks; the optimizer relies on the per-site values recorded
here to differentiate through the masks analytically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .imaging import AttributionMap
from .model import ActivationTrace, NetworkDef, forward
from .ops import (
    Tensor,
    avgpool_backward,
    avgpool_forward,
    conv2d_backward,
    conv2d_forward,
)


@dataclass
class BackwardResult:
    """Gradients of one logit over the frozen linear region.

    bias_grads is keyed by the param id of each biased layer; site_grads
    (populated on request) holds the gradient arriving at each ReLU site
    before that site's own masks were applied.
    """

    input_grad: Tensor
    bias_grads: Dict[int, Tensor]
    site_grads: Optional[Dict[str, Tensor]] = None


def _validate_masks(net: NetworkDef, masks: Dict[str, Tensor]) -> Dict[str, Tensor]:
    if set(masks) != set(net.relu_sites):
        missing = set(net.relu_sites) - set(masks)
        extra = set(masks) - set(net.relu_sites)
        raise ValueError(f"masks do not cover the ReLU sites (missing {sorted(missing)}, extra {sorted(extra)})")
    out = {}
    for path, m in masks.items():
        m = np.asarray(m, dtype=net.dtype)
        if m.shape != net.site_shapes[path]:
            raise ValueError(f"mask at site {path} has shape {m.shape}, expected {net.site_shapes[path]}")
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"mask at site {path} has values outside [0, 1]")
        out[path] = m
    return out


def _check_trace(net: NetworkDef, trace: ActivationTrace):
    if trace.net is not net:
        raise ValueError("trace was recorded for a different network")


# ---------------------------------------------------------------------------
# reverse walk

def _reverse_streams(
    net: NetworkDef,
    trace: ActivationTrace,
    seeds: List[Tensor],
    site_fn: Optional[Callable[[str, List[Tensor]], Optional[List[Tensor]]]],
    record_sites: bool = False,
):
    """Propagate one or more gradient streams from the logits to the input.

    site_fn is called at every ReLU site with the incoming (pre-mask)
    gradients and returns one multiplier per stream (or None for no mask);
    processing order is output-to-input, so a site_fn may derive masks from
    gradients that already passed the sites above it.
    """
    bias_grads: List[Dict[int, Tensor]] = [{} for _ in seeds]
    site_grads: List[Dict[str, Tensor]] = [{} for _ in seeds] if record_sites else None

    def relu_site(path: str, grads: List[Tensor]) -> List[Tensor]:
        if record_sites:
            for si, g in enumerate(grads):
                site_grads[si][path] = g
        mults = site_fn(path, grads) if site_fn is not None else None
        heaviside = trace.masks[path]
        out = []
        for si, g in enumerate(grads):
            g = g * heaviside
            if mults is not None and mults[si] is not None:
                g = g * mults[si]
            out.append(g)
        return out

    def walk(specs, prefix: str, grads: List[Tensor]) -> List[Tensor]:
        for i in reversed(range(len(specs))):
            grads = step(specs[i], f"{prefix}{i}", grads)
        return grads

    def step(spec, path: str, grads: List[Tensor]) -> List[Tensor]:
        kind = spec.kind
        in_shape = net.shapes[path][0]
        if kind == "conv2d":
            w = net.weights[spec.param_id]
            out = []
            for si, g in enumerate(grads):
                gi, gb = conv2d_backward(g, w, in_shape, spec.stride, spec.pad)
                if spec.bias:
                    bias_grads[si][spec.param_id] = gb
                out.append(gi)
            return out
        if kind == "dense":
            w = net.weights[spec.param_id]
            out = []
            for si, g in enumerate(grads):
                if spec.bias:
                    bias_grads[si][spec.param_id] = g
                out.append(w.T @ g)
            return out
        if kind == "relu":
            return relu_site(path, grads)
        if kind == "maxpool":
            idx = trace.pool_idx[path]
            out = []
            for g in grads:
                gi = np.zeros(int(np.prod(in_shape)), dtype=g.dtype)
                np.add.at(gi, idx.ravel(), g.ravel())
                out.append(gi.reshape(in_shape))
            return out
        if kind == "avgpool":
            return [avgpool_backward(g, spec.kernel[0], in_shape, spec.stride[0]) for g in grads]
        if kind == "global_avgpool":
            c, h, w = in_shape
            return [np.broadcast_to((g / (h * w))[:, None, None], in_shape).copy() for g in grads]
        if kind == "flatten":
            return [g.reshape(in_shape) for g in grads]
        if kind == "residual_block":
            if spec.post_relu:
                grads = relu_site(f"{path}.post", grads)
            g_main = walk(spec.main, f"{path}.main.", list(grads))
            if spec.projection:
                g_skip = walk(spec.projection, f"{path}.proj.", list(grads))
            else:
                g_skip = grads
            return [gm + gs for gm, gs in zip(g_main, g_skip)]
        raise DimensionError(f"unhandled layer kind {kind!r}")  # pragma: no cover

    final = walk(net.layers, "", seeds)
    return final, bias_grads, site_grads


def masked_backward(
    net: NetworkDef,
    trace: ActivationTrace,
    target_class: int,
    masks: Optional[Dict[str, Tensor]] = None,
    record_sites: bool = False,
) -> BackwardResult:
    """Input and bias gradients of one logit over the frozen linear region.

    With masks absent this is the plain gradient of the selected logit; with
    per-site masks in [0, 1] supplied, every ReLU site additionally scales
    the gradient by its mask.
    """
    _check_trace(net, trace)
    if not 0 <= target_class < net.class_count:
        raise ValueError(f"class index {target_class} out of range [0, {net.class_count})")
    if masks is not None:
        masks = _validate_masks(net, masks)
        site_fn = lambda path, grads: [masks[path]]  # noqa: E731
    else:
        site_fn = None
    seed = np.zeros(net.class_count, dtype=net.dtype)
    seed[target_class] = 1
    final, bias_grads, site_grads = _reverse_streams(net, trace, [seed], site_fn, record_sites)
    return BackwardResult(
        input_grad=final[0],
        bias_grads=bias_grads[0],
        site_grads=site_grads[0] if record_sites else None,
    )


def reconstruct_output(x: Tensor, biases: Dict[int, Tensor], result: BackwardResult) -> float:
    """Evaluate grad_x . x + sum_l grad_{b_l} . b_l for a backward result."""
    if result.input_grad.shape != x.shape:
        raise DimensionError(f"input grad shape {result.input_grad.shape} does not match x {x.shape}")
    total = float(np.sum(result.input_grad * x))
    for pid, grad in result.bias_grads.items():
        if pid not in biases:
            raise ValueError(f"bias gradients reference unknown parameter id {pid}")
        total += float(np.sum(grad * biases[pid]))
    return total


# ---------------------------------------------------------------------------
# forward replay over the frozen region

def masked_replay(
    net: NetworkDef,
    trace: ActivationTrace,
    masks: Optional[Dict[str, Tensor]] = None,
    record_sites: bool = False,
    validate: bool = True,
) -> Tuple[Tensor, Optional[Dict[str, Tensor]]]:
    """Replay the trace as a fixed linear map: h = mask * (W h + b).

    ReLU sites apply the recorded Heaviside mask (and the supplied per-site
    mask, if any) as plain multipliers, and max-pool gathers through the
    recorded argmax.  Returns the replayed logits and, on request, the
    per-site values after the Heaviside but before the supplied mask.
    """
    _check_trace(net, trace)
    if masks is not None and validate:
        masks = _validate_masks(net, masks)
    site_values: Optional[Dict[str, Tensor]] = {} if record_sites else None

    def relu_site(path: str, value: Tensor) -> Tensor:
        q = value * trace.masks[path]
        if record_sites:
            site_values[path] = q
        if masks is not None:
            q = q * masks[path]
        return q

    def walk(specs, prefix: str, value: Tensor) -> Tensor:
        for i, spec in enumerate(specs):
            value = step(spec, f"{prefix}{i}", value)
        return value

    def step(spec, path: str, value: Tensor) -> Tensor:
        kind = spec.kind
        if kind == "conv2d":
            return conv2d_forward(value, net.weights[spec.param_id], net.biases.get(spec.param_id), spec.stride, spec.pad)
        if kind == "dense":
            out = net.weights[spec.param_id] @ value
            return out + net.biases[spec.param_id] if spec.bias else out
        if kind == "relu":
            return relu_site(path, value)
        if kind == "maxpool":
            return value.ravel()[trace.pool_idx[path]]
        if kind == "avgpool":
            return avgpool_forward(value, spec.kernel[0], spec.stride[0])
        if kind == "global_avgpool":
            return value.mean(axis=(1, 2))
        if kind == "flatten":
            return value.reshape(-1)
        if kind == "residual_block":
            main = walk(spec.main, f"{path}.main.", value)
            skip = walk(spec.projection, f"{path}.proj.", value) if spec.projection else value
            out = main + skip
            if spec.post_relu:
                out = relu_site(f"{path}.post", out)
            return out
        raise DimensionError(f"unhandled layer kind {kind!r}")  # pragma: no cover

    logits = walk(net.layers, "", trace.x)
    return logits, site_values


# ---------------------------------------------------------------------------
# vanilla attribution

def vanilla_attribution(net: NetworkDef, x, target_class: int) -> AttributionMap:
    """Gradient-times-input map: a = grad_x(y_t) * x, channel-summed."""
    trace = forward(net, x)
    result = masked_backward(net, trace, target_class)
    full = result.input_grad * trace.x
    values = full.sum(axis=0) if full.ndim == 3 else full.reshape(1, -1)
    return AttributionMap(values=values, metadata={"method": "grad", "target": int(target_class)})
