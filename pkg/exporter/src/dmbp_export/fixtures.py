"""Train small synthetic-image classifiers and export them as test fixtures.

Two tasks over RGB scenes of colored squares on full-range noise.  The
noise background keeps every pixel informative, and the class evidence is
deliberately high-frequency so that blurring a scene destroys it:

* squares2 (32x32): a colored-square location task.  Every corner region
  holds a shape in a random palette color; three are hollow frames and
  one is solid.  The class is whether the solid square sits top-left or
  bottom-right; shape colors are label-irrelevant.  Solid and hollow
  shapes blur to near-identical blobs, so the location of the solid one
  is unreadable from any smoothed version of the scene.  The conv stack
  feeds the classifier directly on flattened spatial features (no pooled
  bottleneck, so a classifier redraw genuinely reroutes attribution) and
  training uses label smoothing to keep logit margins soft enough that
  insertion curves rise gradually instead of saturating in one step.
* squares3 (16x16): exactly two of three colored corner squares are
  present; multi-label net with a residual block, trained with a
  per-label binary cross entropy.

Each fixture directory gets the exported weight file and architecture JSON,
an export manifest with a reference evaluation, twenty PNG test images, and
a manifest listing per-image targets plus the source-framework logits for
those exact quantized images.  Everything is derived from one seed so a
rerun reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import FixtureError
from .export import export_model

SIDE = 16
LOC_SIDE = 32
ACCURACY_BAR = 0.95

COLORS = (
    (220, 30, 30),
    (30, 220, 30),
    (30, 30, 220),
)

PALETTE = (
    (230, 40, 40),
    (40, 230, 40),
    (40, 40, 230),
    (230, 230, 40),
)

# shape anchor (top, left) per corner region of a squares2 scene; the class
# is whether the solid square occupies region 0 (top-left) or 3 (bottom-right)
LOC_REGIONS = ((3, 3), (3, 21), (21, 3), (21, 21))


class ResidualBlock(nn.Module):
    """Main branch plus identity (or projected) skip, ReLU after the sum."""

    def __init__(self, channels: int, post_relu: bool = True):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
        )
        self.projection = None
        self.post_relu = post_relu

    def forward(self, x):
        y = self.main(x) + x
        return torch.relu(y) if self.post_relu else y


def _paint_square(img: np.ndarray, top: int, left: int, size: int, color) -> None:
    img[top : top + size, left : left + size, :] = color


def _background(rng: np.random.Generator, side: int = SIDE) -> np.ndarray:
    return rng.integers(0, 256, size=(side, side, 3), dtype=np.int64).astype(np.uint8)


def _paint_frame(img: np.ndarray, top: int, left: int, size: int, color) -> None:
    """Hollow square: painted border two pixels thick, untouched interior."""
    img[top : top + size, left : left + size][
        np.pad(np.zeros((size - 4, size - 4), dtype=bool), 2, constant_values=True)
    ] = color


def squares2_image(rng: np.random.Generator, label: int) -> np.ndarray:
    """Solid square top-left (class 0) or bottom-right (class 1).

    Every corner region carries a shape in an independently drawn palette
    color; the three non-class regions get hollow frames with the same
    footprint, so neither color mass nor location alone gives the label
    away, only solidness at a location does.
    """
    img = _background(rng, LOC_SIDE)
    solid = 0 if label == 0 else 3
    for region, (top, left) in enumerate(LOC_REGIONS):
        r = top + int(rng.integers(0, 3))
        c = left + int(rng.integers(0, 3))
        color = PALETTE[int(rng.integers(0, 4))]
        if region == solid:
            _paint_square(img, r, c, 8, color)
        else:
            _paint_frame(img, r, c, 8, color)
    return img


def squares3_image(rng: np.random.Generator, present: Tuple[int, int]) -> np.ndarray:
    """Two of three 4x4 colored squares, one color per fixed corner region."""
    img = _background(rng)
    corners = ((1, 1), (1, 9), (9, 1))
    for cls in present:
        base_top, base_left = corners[cls]
        top = base_top + int(rng.integers(0, 3))
        left = base_left + int(rng.integers(0, 3))
        _paint_square(img, top, left, 4, COLORS[cls])
    return img


def normalize(images: np.ndarray) -> torch.Tensor:
    """uint8 HWC images -> normalized float32 NCHW tensor."""
    x = images.astype(np.float32) / 255.0
    x = (x - 0.5) / 0.5
    return torch.from_numpy(np.transpose(x, (0, 3, 1, 2)).copy())


def build_squares2_net() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1),
        nn.BatchNorm2d(16),
        nn.ReLU(),
        nn.Conv2d(16, 20, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(20, 24, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(24, 28, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(28 * 8 * 8, 2),
    )


def build_squares3_net() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(),
        nn.MaxPool2d(2),
        ResidualBlock(8, post_relu=True),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(8 * 4 * 4, 32),
        nn.ReLU(),
        nn.Linear(32, 3),
    )


def _pair_for_index(i: int) -> Tuple[int, int]:
    return ((0, 1), (0, 2), (1, 2))[i % 3]


def make_squares2_data(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n) % 2
    images = np.stack([squares2_image(rng, int(lab)) for lab in labels])
    return images, labels.astype(np.int64)


def make_squares3_data(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [_pair_for_index(i) for i in range(n)]
    images = np.stack([squares3_image(rng, pair) for pair in pairs])
    presence = np.zeros((n, 3), dtype=np.float32)
    for i, pair in enumerate(pairs):
        presence[i, list(pair)] = 1.0
    return images, presence


def _train(model, x, y, loss_fn, accuracy_fn, epochs: int, task: str, lr: float = 3e-3) -> float:
    """Run a fixed number of epochs, then gate on the accuracy bar.

    No early stopping: fixture quality depends on soft logit margins, and
    extra epochs under a smoothed loss sharpen features without blowing
    the margins up.
    """
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = x.shape[0]
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(n)
        for start in range(0, n, 64):
            idx = perm[start : start + 64]
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = accuracy_fn(model(x), y)
    if acc < ACCURACY_BAR:
        raise FixtureError(f"{task}: training accuracy {acc:.3f} is below {ACCURACY_BAR}")
    return float(acc)


def _class_accuracy(logits, labels) -> float:
    return float((logits.argmax(dim=1) == labels).float().mean())


def _label_accuracy(logits, presence) -> float:
    return float(((logits > 0).float() == presence).float().mean())


def _save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def _emit_fixture(out_dir: Path, name: str, model, test_images, entries, accuracy: float, seed: int):
    fix_dir = out_dir / name
    side = int(test_images.shape[1])
    (fix_dir / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(test_images):
        _save_png(fix_dir / "images" / f"img_{i:02d}.png", img)
    with torch.no_grad():
        logits = model(normalize(test_images)).numpy().astype(np.float32)
    manifest = []
    for i, entry in enumerate(entries):
        record = {"image": f"images/img_{i:02d}.png", "target": int(entry["target"])}
        if "others" in entry:
            record["others"] = [int(v) for v in entry["others"]]
        record["logits"] = [float(v) for v in logits[i]]
        manifest.append(record)
    (fix_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    export_model(
        model,
        (3, side, side),
        source_id=f"{name} torch fixture (seed {seed}, train accuracy {accuracy:.3f})",
        weights_path=fix_dir / "model.dmbpw",
        arch_path=fix_dir / "arch.json",
        manifest_path=fix_dir / "export_manifest.json",
        preprocess={
            "height": side,
            "width": side,
            "mean": [0.5, 0.5, 0.5],
            "std": [0.5, 0.5, 0.5],
        },
        reference_seed=seed,
    )


def make_fixtures(out_dir, seed: int = 0) -> None:
    """Train both fixture models and write every fixture artifact under out_dir."""
    out_dir = Path(out_dir)
    torch.manual_seed(seed)
    torch.set_num_threads(1)

    rng = np.random.default_rng(seed)
    images, labels = make_squares2_data(rng, 3000)
    model_a = build_squares2_net()
    acc_a = _train(
        model_a,
        normalize(images),
        torch.from_numpy(labels),
        nn.CrossEntropyLoss(label_smoothing=0.15),
        _class_accuracy,
        epochs=10,
        task="squares2",
        lr=2e-3,
    )
    test_images, test_labels = make_squares2_data(rng, 20)
    entries: List[dict] = [{"target": int(lab)} for lab in test_labels]
    _emit_fixture(out_dir, "squares2", model_a, test_images, entries, acc_a, seed)

    images, presence = make_squares3_data(rng, 600)
    model_b = build_squares3_net()
    # soft presence targets keep per-label logits moderate, same motivation
    # as the label smoothing on the squares2 side
    acc_b = _train(
        model_b,
        normalize(images),
        torch.from_numpy(presence * 0.8 + 0.1),
        nn.BCEWithLogitsLoss(),
        lambda logits, soft: _label_accuracy(logits, (soft > 0.5).float()),
        epochs=12,
        task="squares3",
    )
    test_images, test_presence = make_squares3_data(rng, 20)
    entries = []
    for row in test_presence:
        present = [int(c) for c in np.flatnonzero(row)]
        entries.append({"target": present[0], "others": present[1:]})
    _emit_fixture(out_dir, "squares3", model_b, test_images, entries, acc_b, seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate committed model fixtures")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    make_fixtures(args.out_dir, args.seed)
    print(f"fixtures written to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
