"""Reference attribution methods: integrated gradients and SmoothGrad.

Both are built from the same exact per-region gradients as the vanilla map,
so they share its conventions: the target is a pre-softmax logit and maps
are channel-summed to one scalar per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .imaging import AttributionMap
from .linearize import masked_backward, vanilla_attribution
from .model import NetworkDef, forward
from .ops import as_tensor


@dataclass
class BaselineConfig:
    """Knobs for both methods; sg_noise_std is a fraction of the input range."""

    ig_steps: int = 50
    ig_reference: Optional[np.ndarray] = None  # zero reference when None
    sg_samples: int = 25
    sg_noise_std: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.ig_steps < 1:
            raise ValueError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if self.sg_samples < 1:
            raise ValueError(f"sg_samples must be >= 1, got {self.sg_samples}")
        if self.sg_noise_std < 0:
            raise ValueError(f"sg_noise_std must be >= 0, got {self.sg_noise_std}")


def integrated_gradients(net: NetworkDef, x, target_class: int, config: Optional[BaselineConfig] = None) -> AttributionMap:
    """Midpoint-rule path integral of gradients from a reference to x.

    a = (x - ref) * mean_k grad F(ref + (k + 0.5)/steps * (x - ref)),
    channel-summed.  The default reference is the zero input.
    """
    config = config or BaselineConfig()
    x = as_tensor(x, net.dtype)
    if config.ig_reference is None:
        ref = np.zeros_like(x)
    else:
        ref = as_tensor(config.ig_reference, net.dtype)
        if ref.shape != x.shape:
            raise DimensionError(f"reference shape {ref.shape} does not match input {x.shape}")
    total = np.zeros_like(x)
    delta = x - ref
    for k in range(config.ig_steps):
        alpha = (k + 0.5) / config.ig_steps
        trace = forward(net, ref + alpha * delta)
        total += masked_backward(net, trace, target_class).input_grad
    full = delta * (total / config.ig_steps)
    values = full.sum(axis=0) if full.ndim == 3 else full.reshape(1, -1)
    return AttributionMap(
        values=values,
        metadata={"method": "ig", "target": int(target_class), "steps": config.ig_steps},
    )


def smoothgrad(net: NetworkDef, x, target_class: int, config: Optional[BaselineConfig] = None) -> AttributionMap:
    """Mean of vanilla maps over seeded Gaussian perturbations of the input.

    The noise standard deviation is sg_noise_std times the input value
    range, so a zero noise level returns exactly the vanilla map.
    """
    config = config or BaselineConfig()
    x = as_tensor(x, net.dtype)
    rng = np.random.default_rng(config.seed)
    std = config.sg_noise_std * float(x.max() - x.min())
    total = None
    for _ in range(config.sg_samples):
        noisy = x + rng.normal(0.0, std, size=x.shape).astype(net.dtype)
        m = vanilla_attribution(net, noisy, target_class)
        total = m.values if total is None else total + m.values
    return AttributionMap(
        values=total / config.sg_samples,
        metadata={
            "method": "sg",
            "target": int(target_class),
            "samples": config.sg_samples,
            "seed": config.seed,
        },
    )
