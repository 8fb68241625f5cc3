"""Command-line interface.

Commands: attribute, evaluate, sanity, inspect.  Exit codes: 0 success,
2 argument errors, 3 load errors, 4 numeric failures.  All file outputs are
written to a temporary name and renamed into place, and every command drops
a run_manifest.json recording the seed and the effective configuration, so
fixed seeds give byte-identical outputs across runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig
from .errors import LoadError, NumericError
from .imaging import load_image_raw, normalize_image, render_heatmap, write_raw
from .metrics import (
    METHODS,
    MetricConfig,
    complementary_insertion_metric,
    insertion_metric,
    method_attribution,
    reinit_classifier,
    spearman_rank_correlation,
    write_curve_csv,
    write_summary_csv,
)
from .model import load_network
from .optimizer import DmbpConfig, write_loss_trace
from .ops import as_tensor


@contextmanager
def _atomic(path: Path):
    """Yield a temp path, then rename over the target; clean up on failure."""
    tmp = Path(str(path) + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _write_json(path: Path, payload: dict):
    with _atomic(path) as tmp:
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_net(args):
    return load_network(args.model, args.arch)


def _load_inputs(net, image_path):
    if net.preprocess is None:
        raise ValueError("architecture has no preprocess block; image commands need one")
    raw = load_image_raw(image_path, net.preprocess)
    x = as_tensor(normalize_image(raw, net.preprocess), net.dtype)
    return raw, x


def _configs(args):
    dmbp_cfg = DmbpConfig(
        iterations=getattr(args, "iters", 200),
        learning_rate=getattr(args, "lr", 0.01),
    )
    base_cfg = BaselineConfig(seed=args.seed)
    return dmbp_cfg, base_cfg


def _compute_map(net, x, target, method, args):
    dmbp_cfg, base_cfg = _configs(args)
    rows = None
    if method == "dmbp":
        from .optimizer import attribution_map, optimize

        _, decomposed, rows = optimize(net, x, target, dmbp_cfg)
        amap = attribution_map(x, decomposed)
    else:
        amap = method_attribution(net, x, target, method, dmbp_cfg, base_cfg)
    amap.metadata.update(
        {"target": int(target), "method": method, "model": Path(args.model).name, "seed": args.seed}
    )
    return amap, rows


def _write_map_outputs(out_dir: Path, base: str, amap, raw_image, overlay: bool):
    with _atomic(out_dir / f"{base}.raw") as tmp:
        write_raw(amap, tmp)
    with _atomic(out_dir / f"{base}.png") as tmp:
        render_heatmap(amap, tmp, overlay=raw_image if overlay else None)


def _manifest_payload(args, extra: dict) -> dict:
    dmbp_cfg, base_cfg = _configs(args)
    payload = {
        "command": args.command,
        "model": str(args.model),
        "arch": str(args.arch),
        "seed": args.seed,
        "dmbp": asdict(dmbp_cfg),
        "baselines": {k: v for k, v in asdict(base_cfg).items() if k != "ig_reference"},
    }
    payload.update(extra)
    return payload


def cmd_attribute(args) -> int:
    net = _load_net(args)
    raw, x = _load_inputs(net, args.image)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    amap, rows = _compute_map(net, x, args.target, args.method, args)
    base = f"{Path(args.image).stem}_{args.method}"
    _write_map_outputs(out_dir, base, amap, raw, args.overlay)
    if rows is not None:
        trace_path = Path(args.loss_trace) if args.loss_trace else out_dir / f"{base}_loss.csv"
        with _atomic(trace_path) as tmp:
            write_loss_trace(tmp, rows)
        from .imaging import AttributionMap

        for name, component in (("pos", amap.positive), ("neg", amap.negative)):
            side = AttributionMap(values=component, metadata=dict(amap.metadata))
            with _atomic(out_dir / f"{base}_{name}.png") as tmp:
                render_heatmap(side, tmp)
    _write_json(
        out_dir / "run_manifest.json",
        _manifest_payload(args, {"image": str(args.image), "target": args.target, "method": args.method}),
    )
    return 0


def _read_manifest(path) -> list:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: cannot read manifest: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{path}: manifest must be a non-empty list of entries")
    base = Path(path).parent
    out = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "image" not in entry or "target" not in entry:
            raise ValueError(f"{path}: entry {i} must carry image and target")
        image = Path(entry["image"])
        if not image.is_absolute():
            image = base / image
        if not image.exists():
            raise LoadError(f"{path}: entry {i} references missing image {image}")
        out.append({"image": image, "target": int(entry["target"]), "others": entry.get("others")})
    return out


def cmd_evaluate(args) -> int:
    net = _load_net(args)
    entries = _read_manifest(args.manifest)
    metric_cfg = MetricConfig(steps=args.steps, blur_sigma=args.blur_sigma, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def evaluate_entry(entry):
        raw, x = _load_inputs(net, entry["image"])
        amap, _ = _compute_map(net, x, entry["target"], args.method, args)
        if args.metric == "im":
            curve = insertion_metric(net, raw, amap, entry["target"], metric_cfg)
        else:
            others = entry["others"]
            if not others:
                raise ValueError(f"{entry['image']}: cim requires other-label indices in the manifest")
            curve = complementary_insertion_metric(net, raw, amap, entry["target"], others, metric_cfg)
        stem = entry["image"].stem
        with _atomic(out_dir / f"{stem}_{args.method}_{args.metric}.csv") as tmp:
            write_curve_csv(tmp, curve)
        return stem, curve.auc

    jobs = args.jobs or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(evaluate_entry, entries))

    rows = [(stem, args.method, args.metric, auc) for stem, auc in results]
    mean_auc = float(np.mean([auc for _, auc in results]))
    rows.append(("mean", args.method, args.metric, mean_auc))
    with _atomic(out_dir / "summary.csv") as tmp:
        write_summary_csv(tmp, rows)
    _write_json(
        out_dir / "run_manifest.json",
        _manifest_payload(
            args,
            {
                "manifest": str(args.manifest),
                "metric": args.metric,
                "method": args.method,
                "steps": args.steps,
                "blur_sigma": args.blur_sigma,
                "jobs": jobs,
            },
        ),
    )
    print(f"mean {args.metric} auc ({args.method}): {mean_auc!r}")
    return 0


def cmd_sanity(args) -> int:
    net = _load_net(args)
    raw, x = _load_inputs(net, args.image)
    original, _ = _compute_map(net, x, args.target, args.method, args)
    reset_net = reinit_classifier(net, args.seed)
    reset, _ = _compute_map(reset_net, x, args.target, args.method, args)
    rho = spearman_rank_correlation(original.values, reset.values)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    _write_map_outputs(out_dir, f"{stem}_{args.method}_original", original, raw, overlay=False)
    _write_map_outputs(out_dir, f"{stem}_{args.method}_reinit", reset, raw, overlay=False)
    _write_json(
        out_dir / "run_manifest.json",
        _manifest_payload(
            args,
            {"image": str(args.image), "target": args.target, "method": args.method, "spearman": rho},
        ),
    )
    print(f"spearman={rho!r}")
    return 0


def cmd_inspect(args) -> int:
    net = _load_net(args)
    print(f"input shape: {net.input_shape}")
    print(f"classes: {net.class_count}")
    print(f"fused batchnorm layers: {net.fused_batchnorm_count}")
    print(f"preprocess: {'yes' if net.preprocess else 'no'}")
    print(f"{'path':<14} {'kind':<16} {'input':<16} {'output':<16} params")
    for path, (in_shape, out_shape) in net.shapes.items():
        spec = _spec_at(net, path)
        params = 0
        if spec.param_id is not None:
            params = net.weights[spec.param_id].size
            params += net.biases[spec.param_id].size if spec.param_id in net.biases else 0
        print(f"{path:<14} {spec.kind:<16} {str(in_shape):<16} {str(out_shape):<16} {params}")
    return 0


def _spec_at(net, path: str):
    specs = net.layers
    spec = None
    for token in path.split("."):
        if token == "main":
            specs = spec.main
        elif token == "proj":
            specs = spec.projection
        elif token == "post":
            return spec
        else:
            spec = specs[int(token)]
    return spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmbp", description="Attribution maps for ReLU networks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, image=True):
        p.add_argument("--model", required=True, help="DMBPW001 weight file")
        p.add_argument("--arch", required=True, help="architecture JSON")
        if image:
            p.add_argument("--image", required=True, help="PPM (P6) or 8-bit RGB PNG")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attribute", help="compute one attribution map")
    common(p)
    p.add_argument("--target", type=int, required=True, help="class index (pre-softmax logit)")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--overlay", action="store_true", help="blend the heatmap over the image")
    p.add_argument("--loss-trace", default=None, help="override the loss-trace CSV path")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("evaluate", help="insertion metrics over a manifest of images")
    common(p, image=False)
    p.add_argument("--metric", choices=("im", "cim"), required=True)
    p.add_argument("--manifest", required=True, help="JSON list of {image, target, others}")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--blur-sigma", type=float, default=5.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--jobs", type=int, default=None, help="worker pool size (default: logical cores)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sanity", help="classifier-reset correlation for one method")
    common(p)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("inspect", help="print the loaded layer table")
    common(p, image=False)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
