"""Pixel-level attribution for ReLU convnets via exact linearization.

A traced forward pass freezes the network's linear region for one input;
masked reverse passes over that region decompose any logit into aligned,
opposing, and nuisance evidence, and optimizing the per-site masks yields
the final attribution map.  Gradient, integrated-gradients, and SmoothGrad
baselines plus insertion metrics and a classifier-reset sanity check share
the same engine.
"""

from .baselines import BaselineConfig, integrated_gradients, smoothgrad
from .errors import DecodeError, DimensionError, FormatError, LoadError, NumericError
from .imaging import (
    AttributionMap,
    bilinear_resize,
    decode_image,
    load_image,
    load_image_raw,
    normalize_image,
    read_raw,
    render_heatmap,
    write_raw,
)
from .linearize import (
    BackwardResult,
    masked_backward,
    masked_replay,
    reconstruct_output,
    vanilla_attribution,
)
from .metrics import (
    InsertionCurve,
    MetricConfig,
    blur_baseline,
    complementary_insertion_metric,
    insertion_metric,
    method_attribution,
    reinit_classifier,
    reinit_sanity_check,
    spearman_rank_correlation,
)
from .model import (
    ActivationTrace,
    LayerSpec,
    NetworkDef,
    PreprocessSpec,
    build_network,
    forward,
    fuse_batchnorm,
    load_network,
    read_weight_file,
    select_target,
)
from .optimizer import (
    DecomposedOutput,
    DmbpConfig,
    MaskLogits,
    RMSPropState,
    attribution_map,
    decompose,
    dmbp_loss,
    identity_mask_logits,
    init_masks,
    loss_and_grads,
    optimize,
    rmsprop_step,
    write_loss_trace,
)
from .ops import Tensor, as_tensor

__version__ = "0.1.0"
