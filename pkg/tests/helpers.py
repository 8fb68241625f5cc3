"""Shared test utilities: in-memory networks, a second (independent) weight
file writer, and finite-difference harnesses."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from dmbp.model import build_network, forward
from dmbp.ops import as_tensor


# ---------------------------------------------------------------------------
# independent weight-file writer (the package only reads the format)

def write_weight_file(path, tensors):
    """tensors: dict or list of (name, array); arrays stored as float32."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    blob = bytearray(b"DMBPW001")
    blob += struct.pack("<I", len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        if arr.ndim:
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


# ---------------------------------------------------------------------------
# network builder

class NetBuilder:
    """Accumulates architecture entries and tensors with sequential param ids."""

    def __init__(self, input_shape):
        self.input_shape = [int(v) for v in input_shape]
        self.layers = []
        self.tensors = {}
        self._next = 0
        self.preprocess = None

    def _pid(self):
        pid = self._next
        self._next += 1
        return pid

    def conv(self, w, b=None, stride=1, pad=0, into=None):
        pid = self._pid()
        (into if into is not None else self.layers).append(
            {"kind": "conv2d", "stride": stride, "pad": pad, "bias": b is not None}
        )
        self.tensors[f"layer{pid}.weight"] = np.asarray(w, dtype=np.float32)
        if b is not None:
            self.tensors[f"layer{pid}.bias"] = np.asarray(b, dtype=np.float32)
        return pid

    def dense(self, w, b=None, into=None):
        pid = self._pid()
        (into if into is not None else self.layers).append({"kind": "dense", "bias": b is not None})
        self.tensors[f"layer{pid}.weight"] = np.asarray(w, dtype=np.float32)
        if b is not None:
            self.tensors[f"layer{pid}.bias"] = np.asarray(b, dtype=np.float32)
        return pid

    def batchnorm(self, gamma, beta, mean, var, eps=1e-5, into=None):
        pid = self._pid()
        (into if into is not None else self.layers).append({"kind": "batchnorm"})
        self.tensors[f"layer{pid}.gamma"] = np.asarray(gamma, dtype=np.float32)
        self.tensors[f"layer{pid}.beta"] = np.asarray(beta, dtype=np.float32)
        self.tensors[f"layer{pid}.mean"] = np.asarray(mean, dtype=np.float32)
        self.tensors[f"layer{pid}.var"] = np.asarray(var, dtype=np.float32)
        self.tensors[f"layer{pid}.eps"] = np.float32(eps)
        return pid

    def relu(self, into=None):
        (into if into is not None else self.layers).append({"kind": "relu"})

    def maxpool(self, kernel, stride=None, into=None):
        (into if into is not None else self.layers).append(
            {"kind": "maxpool", "kernel": kernel, "stride": stride if stride is not None else kernel}
        )

    def avgpool(self, kernel, stride=None, into=None):
        (into if into is not None else self.layers).append(
            {"kind": "avgpool", "kernel": kernel, "stride": stride if stride is not None else kernel}
        )

    def global_avgpool(self, into=None):
        (into if into is not None else self.layers).append({"kind": "global_avgpool"})

    def flatten(self, into=None):
        (into if into is not None else self.layers).append({"kind": "flatten"})

    def residual(self, main, projection=None, post_relu=False):
        self.layers.append(
            {"kind": "residual_block", "main": main, "projection": projection, "post_relu": post_relu}
        )

    def arch(self):
        spec = {"input_shape": self.input_shape, "layers": self.layers}
        if self.preprocess is not None:
            spec["preprocess"] = self.preprocess
        return spec

    def build(self, dtype=np.float32):
        return build_network(self.arch(), self.tensors, dtype=dtype)


def _winit(rng, *shape):
    fan_in = int(np.prod(shape[1:])) or 1
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def random_mlp(rng, sizes=(6, 8, 5, 3), bias=True, classifier_bias=None, dtype=np.float32):
    """Dense/ReLU stack ending in a dense classifier."""
    nb = NetBuilder([sizes[0]])
    for i in range(1, len(sizes)):
        last = i == len(sizes) - 1
        use_bias = classifier_bias if (last and classifier_bias is not None) else bias
        nb.dense(_winit(rng, sizes[i], sizes[i - 1]), rng.normal(0, 0.3, sizes[i]) if use_bias else None)
        if not last:
            nb.relu()
    return nb.build(dtype=dtype)


def random_cnn(
    rng,
    bn=False,
    residual=None,  # None | "plain" | "proj"
    pool="max",  # "max" | "avg"
    head="gap",  # "gap" | "flatten"
    classes=3,
    dtype=np.float32,
):
    """Small conv net on 3x8x8 inputs exercising the requested structures."""
    nb = NetBuilder([3, 8, 8])
    nb.conv(_winit(rng, 4, 3, 3, 3), rng.normal(0, 0.3, 4), stride=1, pad=1)
    if bn:
        nb.batchnorm(rng.uniform(0.5, 1.5, 4), rng.normal(0, 0.3, 4), rng.normal(0, 0.3, 4), rng.uniform(0.5, 2.0, 4))
    nb.relu()
    if pool == "max":
        nb.maxpool(2)
    else:
        nb.avgpool(2)
    nb.conv(_winit(rng, 6, 4, 3, 3), rng.normal(0, 0.3, 6), stride=1, pad=1)
    nb.relu()
    if residual:
        main = []
        nb.conv(_winit(rng, 6, 6, 3, 3), rng.normal(0, 0.3, 6), stride=1, pad=1, into=main)
        if bn:
            nb.batchnorm(
                rng.uniform(0.5, 1.5, 6), rng.normal(0, 0.3, 6), rng.normal(0, 0.3, 6), rng.uniform(0.5, 2.0, 6),
                into=main,
            )
        nb.relu(into=main)
        nb.conv(_winit(rng, 6, 6, 3, 3), rng.normal(0, 0.3, 6), stride=1, pad=1, into=main)
        projection = None
        if residual == "proj":
            projection = []
            nb.conv(_winit(rng, 6, 6, 1, 1), None, stride=1, pad=0, into=projection)
        nb.residual(main, projection, post_relu=True)
    if head == "gap":
        nb.global_avgpool()
        nb.dense(_winit(rng, 5, 6), rng.normal(0, 0.3, 5))
    else:
        feat = 6 * 4 * 4
        nb.flatten()
        nb.dense(_winit(rng, 5, feat), rng.normal(0, 0.3, 5))
    nb.relu()
    nb.dense(_winit(rng, classes, 5), rng.normal(0, 0.3, classes))
    return nb.build(dtype=dtype)


def boundary_safe_input(net, rng, margin=1e-4, tries=200):
    """An input whose pre-activations all sit at least `margin` from zero."""
    best, best_margin = None, -np.inf
    for _ in range(tries):
        x = as_tensor(rng.normal(0.0, 1.0, size=net.input_shape), net.dtype)
        trace = forward(net, x)
        if trace.preacts:
            m = min(float(np.abs(z).min()) for z in trace.preacts.values())
        else:
            m = np.inf
        if m > margin:
            return x
        if m > best_margin:
            best, best_margin = x, m
    raise AssertionError(f"no input cleared the ReLU-boundary margin {margin} (best {best_margin})")


# ---------------------------------------------------------------------------
# finite differences

def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        e = np.zeros_like(x).ravel()
        e[i] = step
        e = e.reshape(x.shape)
        flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return grad


def assert_close(actual, expected, rtol, floor=1e-8):
    """|a - e| <= rtol * max(|a|, |e|, floor), elementwise."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    err = np.abs(actual - expected) / scale
    assert np.all(err <= rtol), f"max relative error {err.max():.3e} exceeds {rtol:.1e}"
