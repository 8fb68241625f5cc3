"""Network definition, weight loading, batch-norm fusion, and traced forward.

Supported graphs are sequential layer lists plus residual blocks (a main
branch, an optional conv/batchnorm projection on the skip, and an optional
post-addition ReLU).  Arbitrary DAGs are rejected at load time.

Weight file format (little-endian):

    magic "DMBPW001" (8 bytes)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                product(extents) float32 values, row-major

Tensor names are "layer{i}.weight" / "layer{i}.bias" for conv2d and dense
layers and "layer{i}.gamma|beta|mean|var|eps" for batch-norm, where i is the
layer's position in a pre-order walk of the architecture (residual blocks
contribute their main branch first, then the projection).

The architecture file is JSON: {"input_shape", "layers", "preprocess"}.
Layer entries carry a "kind" plus structural parameters (stride/pad/kernel);
tensor extents come from the weight file.  Batch-norm may only appear
immediately after a conv2d or dense layer and is fused into it at load, so a
loaded network never contains batch-norm layers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DimensionError, LoadError, NumericError
from .ops import (
    DEFAULT_DTYPE,
    Tensor,
    as_tensor,
    avgpool_forward,
    conv2d_forward,
    maxpool_forward,
    relu_forward,
)

MAGIC = b"DMBPW001"

_KINDS = {
    "conv2d",
    "dense",
    "relu",
    "maxpool",
    "avgpool",
    "global_avgpool",
    "flatten",
    "batchnorm",
    "residual_block",
}


@dataclass(frozen=True)
class PreprocessSpec:
    """Target size and per-channel normalization applied to decoded images."""

    height: int
    width: int
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    resize: str = "bilinear"

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"preprocess size must be positive, got {self.height}x{self.width}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("preprocess mean/std must have 3 channels")
        if any(s <= 0 for s in self.std):
            raise ValueError("preprocess std must be positive")
        if self.resize != "bilinear":
            raise ValueError(f"unsupported resize mode {self.resize!r}")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the graph; kind-specific fields are None when unused."""

    kind: str
    param_id: Optional[int] = None
    bias: bool = False
    kernel: Optional[Tuple[int, int]] = None
    stride: Optional[Tuple[int, int]] = None
    pad: Optional[Tuple[int, int]] = None
    main: Optional[Tuple["LayerSpec", ...]] = None
    projection: Optional[Tuple["LayerSpec", ...]] = None
    post_relu: bool = False


@dataclass(frozen=True)
class NetworkDef:
    """Immutable network: fused layers, parameter tensors, derived metadata.

    ``shapes`` maps every layer path to its (input, output) shape, and
    ``relu_sites`` lists the ReLU site paths in forward order.  Paths are
    "3" for top-level layers, "3.main.1" / "3.proj.0" inside residual
    blocks, and "3.post" for a post-addition ReLU.
    """

    layers: Tuple[LayerSpec, ...]
    weights: Dict[int, Tensor]
    biases: Dict[int, Tensor]
    input_shape: Tuple[int, ...]
    class_count: int
    preprocess: Optional[PreprocessSpec]
    dtype: np.dtype
    shapes: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]]
    relu_sites: Tuple[str, ...]
    site_shapes: Dict[str, Tuple[int, ...]]
    fused_batchnorm_count: int = 0

    def astype(self, dtype) -> "NetworkDef":
        """Same network in another precision (float64 verification mode)."""
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        weights = {k: _frozen(v.astype(dtype)) for k, v in self.weights.items()}
        biases = {k: _frozen(v.astype(dtype)) for k, v in self.biases.items()}
        return replace(self, weights=weights, biases=biases, dtype=dtype)


@dataclass
class ActivationTrace:
    """Forward record binding a network to one input.

    masks hold the Heaviside indicators H(z) with H(0) = 0 per ReLU site,
    pool_idx the argmax routing per maxpool, preacts the pre-ReLU values,
    and activations every layer output keyed by path.
    """

    net: NetworkDef
    x: Tensor
    logits: Tensor
    masks: Dict[str, Tensor] = field(default_factory=dict)
    pool_idx: Dict[str, Tensor] = field(default_factory=dict)
    preacts: Dict[str, Tensor] = field(default_factory=dict)
    activations: Dict[str, Tensor] = field(default_factory=dict)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def fuse_batchnorm(w: Tensor, b: Optional[Tensor], gamma, beta, mean, var, eps: float):
    """Fold batch-norm statistics into the preceding layer's weight and bias.

    w' scales each output channel by gamma / sqrt(var + eps); b' is
    gamma * (b - mean) / sqrt(var + eps) + beta.  Works for conv2d (4-D w)
    and dense (2-D w) weights.
    """
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    mean = np.asarray(mean)
    var = np.asarray(var)
    out = w.shape[0]
    for name, t in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if t.shape != (out,):
            raise DimensionError(f"batchnorm {name} shape {t.shape} does not match {out} channels")
    denom = var + eps
    if np.any(denom <= 0):
        raise NumericError("batchnorm var + eps must be positive")
    scale = gamma / np.sqrt(denom)
    if b is None:
        b = np.zeros(out, dtype=w.dtype)
    w_fused = w * scale.reshape((out,) + (1,) * (w.ndim - 1))
    b_fused = scale * (b - mean) + beta
    return w_fused.astype(w.dtype), b_fused.astype(w.dtype)


# ---------------------------------------------------------------------------
# weight file

def read_weight_file(path) -> Dict[str, np.ndarray]:
    """Parse a DMBPW001 weight file into name -> float32 array."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read weight file: {exc}") from exc
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise LoadError(f"{path}: truncated weight file at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(8) != MAGIC:
        raise LoadError(f"{path}: bad magic, expected {MAGIC.decode()}")
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"{path}: tensor name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        extents = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        if any(e == 0 for e in extents):
            raise LoadError(f"{path}: tensor {name!r} has a zero extent")
        n = int(np.prod(extents, dtype=np.int64)) if extents else 1
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(extents).copy()
        if name in tensors:
            raise LoadError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = values
    if off != len(data):
        raise LoadError(f"{path}: {len(data) - off} trailing bytes after last tensor")
    return tensors


# ---------------------------------------------------------------------------
# architecture parsing

def _pair_or_none(entry: dict, key: str, default=None) -> Optional[Tuple[int, int]]:
    value = entry.get(key, default)
    if value is None:
        return None
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (int(value[0]), int(value[1]))
    raise LoadError(f"layer field {key!r} must be an int or a pair, got {value!r}")


def _parse_layers(entries, counter: List[int], nested: bool) -> Tuple[LayerSpec, ...]:
    if not isinstance(entries, list):
        raise LoadError("architecture layers must be a list")
    specs = []
    for entry in entries:
        kind = entry.get("kind")
        if kind not in _KINDS:
            raise LoadError(f"unknown layer kind {kind!r}")
        if kind in ("conv2d", "dense", "batchnorm"):
            pid = counter[0]
            counter[0] += 1
        else:
            pid = None
        if kind == "conv2d":
            specs.append(
                LayerSpec(
                    kind=kind,
                    param_id=pid,
                    bias=bool(entry.get("bias", True)),
                    stride=_pair_or_none(entry, "stride", 1),
                    pad=_pair_or_none(entry, "pad", 0),
                )
            )
        elif kind == "dense":
            specs.append(LayerSpec(kind=kind, param_id=pid, bias=bool(entry.get("bias", True))))
        elif kind == "batchnorm":
            specs.append(LayerSpec(kind=kind, param_id=pid))
        elif kind in ("maxpool", "avgpool"):
            kernel = _pair_or_none(entry, "kernel")
            if kernel is None:
                raise LoadError(f"{kind} layer requires a kernel")
            stride = _pair_or_none(entry, "stride", kernel[0])
            specs.append(LayerSpec(kind=kind, kernel=kernel, stride=stride))
        elif kind == "residual_block":
            if nested:
                raise LoadError("residual blocks cannot be nested")
            main = _parse_layers(entry.get("main", []), counter, nested=True)
            if not main:
                raise LoadError("residual block requires a non-empty main branch")
            proj_entries = entry.get("projection")
            projection = _parse_layers(proj_entries, counter, nested=True) if proj_entries else None
            if projection is not None:
                kinds = [s.kind for s in projection]
                if kinds not in (["conv2d"], ["conv2d", "batchnorm"]):
                    raise LoadError("residual projection must be conv2d optionally followed by batchnorm")
            specs.append(
                LayerSpec(
                    kind=kind,
                    main=main,
                    projection=projection,
                    post_relu=bool(entry.get("post_relu", False)),
                )
            )
        else:
            specs.append(LayerSpec(kind=kind))
    return tuple(specs)


def _fuse_sequence(specs, weights, biases, consumed, path_prefix: str, count: List[int]):
    """Fuse batch-norm entries into their predecessor and drop them."""
    fused: List[LayerSpec] = []
    for i, spec in enumerate(specs):
        if spec.kind == "batchnorm":
            if not fused or fused[-1].kind not in ("conv2d", "dense"):
                raise LoadError(
                    f"layer {path_prefix}{i}: batchnorm must immediately follow conv2d or dense"
                )
            prev = fused[-1]
            bn = spec.param_id
            missing = [k for k in ("gamma", "beta", "mean", "var", "eps") if (bn, k) not in consumed]
            if missing:
                raise LoadError(f"layer {path_prefix}{i}: batchnorm tensors missing: {missing}")
            eps_arr = consumed.pop((bn, "eps"))
            if eps_arr.size != 1:
                raise LoadError(f"layer {path_prefix}{i}: batchnorm eps must be a scalar")
            w, b = fuse_batchnorm(
                weights[prev.param_id],
                biases.get(prev.param_id),
                consumed.pop((bn, "gamma")),
                consumed.pop((bn, "beta")),
                consumed.pop((bn, "mean")),
                consumed.pop((bn, "var")),
                float(eps_arr.reshape(())),
            )
            weights[prev.param_id] = w
            biases[prev.param_id] = b
            fused[-1] = replace(prev, bias=True)
            count[0] += 1
        elif spec.kind == "residual_block":
            main = _fuse_sequence(spec.main, weights, biases, consumed, f"{path_prefix}{i}.main.", count)
            projection = (
                _fuse_sequence(spec.projection, weights, biases, consumed, f"{path_prefix}{i}.proj.", count)
                if spec.projection
                else None
            )
            fused.append(replace(spec, main=main, projection=projection))
        else:
            fused.append(spec)
    return tuple(fused)


class _ShapeWalker:
    def __init__(self, weights, biases):
        self.weights = weights
        self.biases = biases
        self.shapes: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {}
        self.relu_sites: List[str] = []
        self.site_shapes: Dict[str, Tuple[int, ...]] = {}

    def sequence(self, specs, prefix: str, shape):
        for i, spec in enumerate(specs):
            shape = self.one(spec, f"{prefix}{i}", shape)
        return shape

    def one(self, spec: LayerSpec, path: str, shape):
        out = self._infer(spec, path, shape)
        self.shapes[path] = (tuple(shape), tuple(out))
        return out

    def _site(self, path: str, shape):
        self.relu_sites.append(path)
        self.site_shapes[path] = tuple(shape)

    def _infer(self, spec: LayerSpec, path: str, shape):
        kind = spec.kind
        if kind == "conv2d":
            w = self.weights[spec.param_id]
            if w.ndim != 4:
                raise LoadError(f"layer {path}: conv2d weight must have rank 4, got {w.ndim}")
            if len(shape) != 3 or shape[0] != w.shape[1]:
                raise LoadError(f"layer {path}: conv2d expects {w.shape[1]} input channels, got {shape}")
            if spec.bias and self.biases.get(spec.param_id) is None:
                raise LoadError(f"layer {path}: bias tensor missing")
            c, h, wd = shape
            (sh, sw), (ph, pw) = spec.stride, spec.pad
            kh, kw = w.shape[2], w.shape[3]
            for size, k, p, s, axis in ((h, kh, ph, sh, "height"), (wd, kw, pw, sw, "width")):
                span = size + 2 * p - k
                if span < 0 or span % s != 0:
                    raise LoadError(f"layer {path}: conv2d {axis} extent not integral")
            return (w.shape[0], (h + 2 * ph - kh) // sh + 1, (wd + 2 * pw - kw) // sw + 1)
        if kind == "dense":
            w = self.weights[spec.param_id]
            if w.ndim != 2:
                raise LoadError(f"layer {path}: dense weight must have rank 2, got {w.ndim}")
            if len(shape) != 1 or shape[0] != w.shape[1]:
                raise LoadError(f"layer {path}: dense expects {w.shape[1]} features, got {shape}")
            if spec.bias and self.biases.get(spec.param_id) is None:
                raise LoadError(f"layer {path}: bias tensor missing")
            return (w.shape[0],)
        if kind == "relu":
            self._site(path, shape)
            return shape
        if kind in ("maxpool", "avgpool"):
            if len(shape) != 3:
                raise LoadError(f"layer {path}: {kind} expects a (C,H,W) input, got {shape}")
            c, h, wd = shape
            k, s = spec.kernel[0], spec.stride[0]
            if spec.kernel[0] != spec.kernel[1] or spec.stride[0] != spec.stride[1]:
                raise LoadError(f"layer {path}: {kind} kernel/stride must be square")
            for size, axis in ((h, "height"), (wd, "width")):
                if size < k or (size - k) % s != 0:
                    raise LoadError(f"layer {path}: {kind} window does not fit {axis} {size}")
            return (c, (h - k) // s + 1, (wd - k) // s + 1)
        if kind == "global_avgpool":
            if len(shape) != 3:
                raise LoadError(f"layer {path}: global_avgpool expects a (C,H,W) input, got {shape}")
            return (shape[0],)
        if kind == "flatten":
            return (int(np.prod(shape)),)
        if kind == "residual_block":
            main_out = self.sequence(spec.main, f"{path}.main.", shape)
            skip_out = self.sequence(spec.projection, f"{path}.proj.", shape) if spec.projection else shape
            if tuple(main_out) != tuple(skip_out):
                raise LoadError(
                    f"layer {path}: residual main output {main_out} does not match skip {skip_out}"
                )
            if spec.post_relu:
                self._site(f"{path}.post", main_out)
            return main_out
        raise LoadError(f"layer {path}: unhandled kind {kind!r}")


def build_network(
    arch: dict,
    tensors: Dict[str, np.ndarray],
    dtype=DEFAULT_DTYPE,
    preprocess: Optional[PreprocessSpec] = None,
) -> NetworkDef:
    """Assemble a NetworkDef from a parsed architecture and named tensors.

    Validates tensor names against the architecture, fuses batch-norm, and
    shape-checks the whole graph before any forward call.
    """
    dtype = np.dtype(dtype)
    raw_shape = arch.get("input_shape")
    if not raw_shape or not all(isinstance(v, int) and v > 0 for v in raw_shape):
        raise LoadError("architecture input_shape must be a list of positive ints")
    if len(raw_shape) not in (1, 3):
        raise LoadError(f"input_shape must have rank 1 or 3, got {raw_shape}")
    input_shape = tuple(raw_shape)

    counter = [0]
    layers = _parse_layers(arch.get("layers", []), counter, nested=False)
    if not layers:
        raise LoadError("architecture has no layers")

    # Bind tensors to param ids and reject unknown or missing names.
    weights: Dict[int, np.ndarray] = {}
    biases: Dict[int, np.ndarray] = {}
    consumed: Dict[Tuple[int, str], np.ndarray] = {}
    expected = set()

    def bind(specs):
        for spec in specs:
            if spec.kind in ("conv2d", "dense"):
                name = f"layer{spec.param_id}.weight"
                expected.add(name)
                if name not in tensors:
                    raise LoadError(f"missing tensor {name!r}")
                weights[spec.param_id] = tensors[name].astype(dtype)
                if spec.bias:
                    bname = f"layer{spec.param_id}.bias"
                    expected.add(bname)
                    if bname not in tensors:
                        raise LoadError(f"missing tensor {bname!r}")
                    biases[spec.param_id] = tensors[bname].astype(dtype)
            elif spec.kind == "batchnorm":
                for key in ("gamma", "beta", "mean", "var", "eps"):
                    name = f"layer{spec.param_id}.{key}"
                    expected.add(name)
                    if name not in tensors:
                        raise LoadError(f"missing tensor {name!r}")
                    consumed[(spec.param_id, key)] = tensors[name].astype(np.float64)
            elif spec.kind == "residual_block":
                bind(spec.main)
                if spec.projection:
                    bind(spec.projection)

    bind(layers)
    unknown = sorted(set(tensors) - expected)
    if unknown:
        raise LoadError(f"weight file has tensors not referenced by the architecture: {unknown}")

    fused_count = [0]
    layers = _fuse_sequence(layers, weights, biases, consumed, "", fused_count)
    if layers[-1].kind != "dense":
        raise LoadError("final layer must be a dense classifier")

    walker = _ShapeWalker(weights, biases)
    out_shape = walker.sequence(layers, "", input_shape)
    if len(out_shape) != 1:
        raise LoadError(f"classifier output must be a vector, got {out_shape}")

    pp = preprocess
    if pp is None and arch.get("preprocess"):
        block = arch["preprocess"]
        try:
            pp = PreprocessSpec(
                height=block["height"],
                width=block["width"],
                mean=tuple(block["mean"]),
                std=tuple(block["std"]),
                resize=block.get("resize", "bilinear"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"bad preprocess block: {exc}") from exc

    return NetworkDef(
        layers=layers,
        weights={k: _frozen(v.astype(dtype)) for k, v in weights.items()},
        biases={k: _frozen(v.astype(dtype)) for k, v in biases.items()},
        input_shape=input_shape,
        class_count=out_shape[0],
        preprocess=pp,
        dtype=dtype,
        shapes=walker.shapes,
        relu_sites=tuple(walker.relu_sites),
        site_shapes=walker.site_shapes,
        fused_batchnorm_count=fused_count[0],
    )


def load_network(weights_path, arch_path, dtype=DEFAULT_DTYPE) -> NetworkDef:
    """Load and fuse a network from a weight file and a JSON architecture."""
    tensors = read_weight_file(weights_path)
    try:
        with open(arch_path, "r", encoding="utf-8") as fh:
            arch = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{arch_path}: cannot parse architecture: {exc}") from exc
    return build_network(arch, tensors, dtype=dtype)


# ---------------------------------------------------------------------------
# forward

def forward(net: NetworkDef, x) -> ActivationTrace:
    """Run the network and record masks, pooling routes, and activations."""
    x = as_tensor(x, net.dtype)
    if x.shape != net.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match network {net.input_shape}")
    trace = ActivationTrace(net=net, x=x, logits=None)
    out = _forward_sequence(net, net.layers, "", x, trace)
    if not np.all(np.isfinite(out)):
        raise NumericError("forward produced non-finite logits")
    trace.logits = out
    return trace


def _forward_sequence(net, specs, prefix, value, trace):
    for i, spec in enumerate(specs):
        value = _forward_one(net, spec, f"{prefix}{i}", value, trace)
    return value


def _forward_one(net, spec, path, value, trace):
    kind = spec.kind
    if kind == "conv2d":
        out = conv2d_forward(value, net.weights[spec.param_id], net.biases.get(spec.param_id), spec.stride, spec.pad)
    elif kind == "dense":
        out = net.weights[spec.param_id] @ value
        if spec.bias:
            out = out + net.biases[spec.param_id]
    elif kind == "relu":
        trace.preacts[path] = value
        out, mask = relu_forward(value)
        trace.masks[path] = mask
    elif kind == "maxpool":
        out, idx = maxpool_forward(value, spec.kernel[0], spec.stride[0])
        trace.pool_idx[path] = idx
    elif kind == "avgpool":
        out = avgpool_forward(value, spec.kernel[0], spec.stride[0])
    elif kind == "global_avgpool":
        out = value.mean(axis=(1, 2))
    elif kind == "flatten":
        out = value.reshape(-1)
    elif kind == "residual_block":
        main = _forward_sequence(net, spec.main, f"{path}.main.", value, trace)
        skip = _forward_sequence(net, spec.projection, f"{path}.proj.", value, trace) if spec.projection else value
        out = main + skip
        if spec.post_relu:
            site = f"{path}.post"
            trace.preacts[site] = out
            out, mask = relu_forward(out)
            trace.masks[site] = mask
    else:  # pragma: no cover - parse stage rejects unknown kinds
        raise DimensionError(f"unhandled layer kind {kind!r}")
    trace.activations[path] = out
    return out


def select_target(net: NetworkDef, class_index: int) -> Tensor:
    """Per-class filter: the selected row of the final classifier weight.

    The attribution target is always the pre-softmax logit this row produces.
    """
    if not 0 <= class_index < net.class_count:
        raise ValueError(f"class index {class_index} out of range [0, {net.class_count})")
    last = net.layers[-1]
    return net.weights[last.param_id][class_index]
