"""Convert torch modules into DMBPW001 weight files plus architecture JSON.

Supported sources are VGG-style stacks (Sequential over conv / batchnorm /
relu / pooling / flatten / linear, dropout skipped) and ResNet-style residual
blocks, either this package's ResidualBlock or any module exposing the
conv1/bn1/conv2/bn2(/downsample) layout.  Batch norm is exported unfused;
the consumer folds it into the preceding convolution at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ExportError
from .writer import write_weight_file


@dataclass
class ExportManifest:
    """Record of one export: name mapping, shapes, and a reference evaluation."""

    source_id: str
    input_shape: List[int]
    layer_map: List[Dict[str, str]]
    shapes: Dict[str, List[int]]
    reference_input: List[float]
    reference_logits: List[float]
    fused_pairs: int = 0

    def to_dict(self) -> dict:
        return {
            "source": self.source_id,
            "input_shape": self.input_shape,
            "layer_map": self.layer_map,
            "shapes": self.shapes,
            "reference": {"input": self.reference_input, "logits": self.reference_logits},
            "batchnorm_layers": self.fused_pairs,
        }


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


class _Walker:
    def __init__(self):
        self.tensors: List[Tuple[str, np.ndarray]] = []
        self.layer_map: List[Dict[str, str]] = []
        self.batchnorm_count = 0
        self._next = 0

    def _param_id(self, source_name: str) -> int:
        pid = self._next
        self._next += 1
        self.layer_map.append({"source": source_name, "target": f"layer{pid}"})
        return pid

    def _store(self, name: str, tensor: torch.Tensor):
        self.tensors.append((name, tensor.detach().cpu().numpy()))

    # -- leaf handlers ------------------------------------------------------

    def conv(self, m: nn.Conv2d, name: str) -> dict:
        if m.groups != 1:
            raise ExportError(f"{name}: grouped convolution is not supported")
        if _pair(m.dilation) != (1, 1):
            raise ExportError(f"{name}: dilated convolution is not supported")
        if m.padding_mode != "zeros":
            raise ExportError(f"{name}: padding mode {m.padding_mode!r} is not supported")
        if isinstance(m.padding, str):
            raise ExportError(f"{name}: string padding {m.padding!r} is not supported")
        pid = self._param_id(name)
        self._store(f"layer{pid}.weight", m.weight)
        if m.bias is not None:
            self._store(f"layer{pid}.bias", m.bias)
        return {
            "kind": "conv2d",
            "stride": list(_pair(m.stride)),
            "pad": list(_pair(m.padding)),
            "bias": m.bias is not None,
        }

    def linear(self, m: nn.Linear, name: str) -> dict:
        pid = self._param_id(name)
        self._store(f"layer{pid}.weight", m.weight)
        if m.bias is not None:
            self._store(f"layer{pid}.bias", m.bias)
        return {"kind": "dense", "bias": m.bias is not None}

    def batchnorm(self, m: nn.BatchNorm2d, name: str) -> dict:
        if not m.affine or not m.track_running_stats:
            raise ExportError(f"{name}: batchnorm must be affine with running statistics")
        pid = self._param_id(name)
        self._store(f"layer{pid}.gamma", m.weight)
        self._store(f"layer{pid}.beta", m.bias)
        self._store(f"layer{pid}.mean", m.running_mean)
        self._store(f"layer{pid}.var", m.running_var)
        self.tensors.append((f"layer{pid}.eps", np.float32(m.eps)))
        self.batchnorm_count += 1
        return {"kind": "batchnorm"}

    def pool(self, m, name: str, kind: str) -> dict:
        kh, kw = _pair(m.kernel_size)
        sh, sw = _pair(m.stride if m.stride is not None else m.kernel_size)
        if kh != kw or sh != sw:
            raise ExportError(f"{name}: only square pooling windows are supported")
        if _pair(m.padding) != (0, 0):
            raise ExportError(f"{name}: padded pooling is not supported")
        if getattr(m, "ceil_mode", False):
            raise ExportError(f"{name}: ceil_mode pooling is not supported")
        if getattr(m, "dilation", 1) not in (1, (1, 1)):
            raise ExportError(f"{name}: dilated pooling is not supported")
        return {"kind": kind, "kernel": kh, "stride": sh}

    # -- structure ----------------------------------------------------------

    def sequence(self, module: nn.Module, name: str) -> List[dict]:
        entries: List[dict] = []
        for child_name, child in module.named_children():
            qual = f"{name}.{child_name}" if name else child_name
            entries.extend(self.dispatch(child, qual))
        return entries

    def residual(self, main: nn.Module, projection: Optional[nn.Module], post_relu: bool, name: str) -> dict:
        main_entries = self.sequence(main, f"{name}.main")
        proj_entries = None
        if projection is not None:
            proj_entries = self.sequence(projection, f"{name}.projection")
        return {
            "kind": "residual_block",
            "main": main_entries,
            "projection": proj_entries,
            "post_relu": bool(post_relu),
        }

    def dispatch(self, m: nn.Module, name: str) -> List[dict]:
        if isinstance(m, (nn.Dropout, nn.Dropout2d, nn.Identity)):
            return []
        if isinstance(m, nn.Conv2d):
            return [self.conv(m, name)]
        if isinstance(m, nn.Linear):
            return [self.linear(m, name)]
        if isinstance(m, nn.BatchNorm2d):
            return [self.batchnorm(m, name)]
        if isinstance(m, nn.ReLU):
            return [{"kind": "relu"}]
        if isinstance(m, nn.MaxPool2d):
            return [self.pool(m, name, "maxpool")]
        if isinstance(m, nn.AvgPool2d):
            return [self.pool(m, name, "avgpool")]
        if isinstance(m, nn.AdaptiveAvgPool2d):
            if _pair(m.output_size) != (1, 1):
                raise ExportError(f"{name}: adaptive pooling only supported with output size 1")
            return [{"kind": "global_avgpool"}]
        if isinstance(m, nn.Flatten):
            if m.start_dim not in (0, 1) or m.end_dim != -1:
                raise ExportError(f"{name}: partial flatten is not supported")
            return [{"kind": "flatten"}]
        if hasattr(m, "main") and isinstance(getattr(m, "main"), nn.Module):
            projection = getattr(m, "projection", None)
            return [self.residual(m.main, projection, getattr(m, "post_relu", False), name)]
        if all(hasattr(m, a) for a in ("conv1", "bn1", "conv2", "bn2")):
            main = nn.Sequential(m.conv1, m.bn1, nn.ReLU(), m.conv2, m.bn2)
            return [self.residual(main, getattr(m, "downsample", None), post_relu=True, name=name)]
        if isinstance(m, nn.Sequential):
            return self.sequence(m, name)
        raise ExportError(f"unsupported layer kind {type(m).__name__} at {name or '<root>'}")


def export_model(
    model: nn.Module,
    input_shape,
    source_id: str,
    weights_path,
    arch_path,
    manifest_path=None,
    preprocess: Optional[dict] = None,
    reference_seed: int = 0,
) -> ExportManifest:
    """Write the weight file and architecture JSON for a torch module.

    The module is evaluated once on a fixed random reference input (seeded by
    reference_seed) and the resulting logits are recorded in the manifest for
    cross-implementation checks.
    """
    model = model.eval()
    walker = _Walker()
    entries = walker.dispatch(model, "")
    arch = {"input_shape": [int(v) for v in input_shape], "layers": entries}
    if preprocess is not None:
        arch["preprocess"] = preprocess

    generator = torch.Generator().manual_seed(reference_seed)
    reference = torch.randn(list(input_shape), generator=generator, dtype=torch.float32)
    with torch.no_grad():
        logits = model(reference.unsqueeze(0))[0].to(torch.float32)

    tensors = dict(walker.tensors)
    write_weight_file(weights_path, tensors)
    Path(arch_path).write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    manifest = ExportManifest(
        source_id=source_id,
        input_shape=[int(v) for v in input_shape],
        layer_map=walker.layer_map,
        shapes={name: list(np.asarray(arr).shape) for name, arr in walker.tensors},
        reference_input=[float(v) for v in reference.flatten().numpy().astype(np.float32)],
        reference_logits=[float(v) for v in logits.numpy().astype(np.float32)],
        fused_pairs=walker.batchnorm_count,
    )
    if manifest_path is not None:
        Path(manifest_path).write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return manifest
