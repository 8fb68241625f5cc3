"""Insertion metrics, the blur baseline, Spearman correlation, and the
classifier-reinit sanity check, each against an independent oracle."""

import numpy as np
import pytest

from dmbp.errors import DimensionError
from dmbp.metrics import (
    MetricConfig,
    blur_baseline,
    complementary_insertion_metric,
    gaussian_kernel,
    insertion_metric,
    method_attribution,
    order_pixels,
    reinit_classifier,
    reinit_sanity_check,
    spearman_rank_correlation,
    write_curve_csv,
    write_summary_csv,
)
from dmbp.model import forward
from dmbp.ops import as_tensor
from helpers import NetBuilder, assert_close, boundary_safe_input, random_mlp


def blur_oracle(image, sigma, radius):
    """Dense 2-D Gaussian convolution with index clamping at the edges."""
    kern1 = gaussian_kernel(sigma, radius)
    kern2 = np.outer(kern1, kern1)
    c, h, w = image.shape
    out = np.zeros_like(image, dtype=np.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        acc += kern2[dy + radius, dx + radius] * float(image[ch, yy, xx])
                out[ch, y, x] = acc
    return out


def spearman_oracle(a, b):
    """Average-rank assignment followed by a plain Pearson correlation."""

    def ranks(v):
        v = np.asarray(v, np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size, np.float64)
        r[order] = np.arange(1, v.size + 1)
        out = np.empty_like(r)
        for val in np.unique(v):
            sel = v == val
            out[sel] = r[sel].mean()
        return out

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra * ra).sum() * (rb * rb).sum()))


def uniform_net(classes=2, shape=(3, 4, 4)):
    nb = NetBuilder(list(shape))
    nb.flatten()
    nb.dense(np.zeros((classes, int(np.prod(shape))), np.float32))
    return nb.build()


def gap_net(rng, channels=2, classes=3, hw=4):
    nb = NetBuilder([channels, hw, hw])
    nb.global_avgpool()
    nb.dense(rng.normal(size=(classes, channels)).astype(np.float32))
    return nb.build()


class TestBlurBaseline:
    def test_matches_dense_convolution_oracle(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(0, 1, (2, 6, 6))
        cfg = MetricConfig(blur_sigma=1.5, blur_radius=3)
        got = blur_baseline(image, cfg)
        want = blur_oracle(image, 1.5, 3)
        assert_close(got, want, rtol=1e-10, floor=1e-12)

    def test_constant_image_unchanged(self):
        image = np.full((3, 5, 5), 0.37)
        out = blur_baseline(image, MetricConfig(blur_sigma=2.0))
        assert np.allclose(out, image, atol=1e-12)

    def test_kernel_normalized_and_peaked(self):
        k = gaussian_kernel(5.0, 10)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        assert k[10] == k.max()
        assert np.array_equal(k, k[::-1])

    def test_default_radius_from_sigma(self):
        image = np.zeros((1, 30, 30))
        image[0, 15, 15] = 1.0
        out = blur_baseline(image, MetricConfig(blur_sigma=5.0))
        # radius 10 kernel: support must not extend past 10 pixels
        assert out[0, 15, 4] == 0.0
        assert out[0, 15, 5] > 0.0


class TestOrderPixels:
    def test_descending_without_ties(self):
        v = np.array([[0.5, 2.0], [-1.0, 1.0]])
        order = order_pixels(v, descending=True, seed=0)
        assert list(order) == [1, 3, 0, 2]

    def test_ties_resolved_by_seed(self):
        v = np.zeros((3, 3))
        a = order_pixels(v, descending=True, seed=4)
        b = order_pixels(v, descending=True, seed=4)
        c = order_pixels(v, descending=True, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestInsertionMetric:
    def test_uniform_logit_net_gives_flat_curve(self):
        rng = np.random.default_rng(1)
        net = uniform_net(classes=4)
        image = rng.uniform(0, 1, (3, 4, 4))
        amap_values = rng.normal(size=(4, 4))
        from dmbp.imaging import AttributionMap

        curve = insertion_metric(net, image, AttributionMap(amap_values, {}), 0, MetricConfig(steps=8))
        assert np.allclose(curve.probabilities, 0.25, atol=1e-12)
        assert curve.auc == pytest.approx(0.25, abs=1e-12)
        assert curve.fractions[0] == 0.0
        assert curve.fractions[-1] == 1.0

    def test_endpoints_are_baseline_and_image(self):
        rng = np.random.default_rng(2)
        net = gap_net(rng)
        image = rng.uniform(0, 1, (2, 4, 4))
        from dmbp.imaging import AttributionMap

        amap = AttributionMap(rng.normal(size=(4, 4)), {})
        cfg = MetricConfig(steps=5, blur_sigma=1.0, blur_radius=2)
        curve = insertion_metric(net, image, amap, 1, cfg)

        def prob(x):
            from dmbp.metrics import _softmax

            return float(_softmax(forward(net, as_tensor(x, np.float32)).logits)[1])

        assert curve.probabilities[0] == pytest.approx(prob(blur_baseline(image, cfg)), abs=1e-9)
        assert curve.probabilities[-1] == pytest.approx(prob(image), abs=1e-9)
        assert 0.0 <= curve.auc <= 1.0

    def test_permutation_equivariance_with_explicit_baseline(self):
        # a spatial permutation applied to image, map, and baseline together
        # cannot change the curve of a permutation-invariant model
        rng = np.random.default_rng(3)
        net = gap_net(rng)
        image = rng.uniform(0, 1, (2, 4, 4))
        baseline = rng.uniform(0, 1, (2, 4, 4))
        values = rng.normal(size=(4, 4))
        from dmbp.imaging import AttributionMap

        cfg = MetricConfig(steps=16)
        curve = insertion_metric(net, image, AttributionMap(values, {}), 0, cfg, baseline=baseline)

        perm = rng.permutation(16)
        p_image = image.reshape(2, 16)[:, perm].reshape(2, 4, 4)
        p_base = baseline.reshape(2, 16)[:, perm].reshape(2, 4, 4)
        p_values = values.reshape(16)[perm].reshape(4, 4)
        p_curve = insertion_metric(net, p_image, AttributionMap(p_values, {}), 0, cfg, baseline=p_base)
        assert_close(p_curve.probabilities, curve.probabilities, rtol=1e-6, floor=1e-9)
        assert p_curve.auc == pytest.approx(curve.auc, rel=1e-6)

    def test_map_shape_checked(self):
        rng = np.random.default_rng(4)
        net = gap_net(rng)
        from dmbp.imaging import AttributionMap

        with pytest.raises(DimensionError):
            insertion_metric(net, rng.uniform(0, 1, (2, 4, 4)), AttributionMap(np.zeros((3, 3)), {}), 0)

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(5)
        net = gap_net(rng)
        image = rng.uniform(0, 1, (2, 4, 4))
        from dmbp.imaging import AttributionMap

        amap = AttributionMap(np.zeros((4, 4)), {})  # all ties
        a = insertion_metric(net, image, amap, 0, MetricConfig(steps=4, seed=7))
        b = insertion_metric(net, image, amap, 0, MetricConfig(steps=4, seed=7))
        assert np.array_equal(a.probabilities, b.probabilities)


class TestComplementaryInsertion:
    def test_order_reversal_consistency(self):
        # descending insertion of the negated map must equal the ascending
        # machinery tracking the same label
        rng = np.random.default_rng(6)
        net = gap_net(rng, classes=3)
        image = rng.uniform(0, 1, (2, 4, 4))
        values = rng.normal(size=(4, 4))
        from dmbp.imaging import AttributionMap

        cfg = MetricConfig(steps=8, blur_sigma=1.0, blur_radius=1, seed=3)
        im_rev = insertion_metric(net, image, AttributionMap(-values, {}), 1, cfg)
        cim = complementary_insertion_metric(net, image, AttributionMap(values, {}), 0, [1], cfg)
        assert np.array_equal(im_rev.probabilities, cim.probabilities)
        assert im_rev.auc == cim.auc

    def test_single_step_two_point_trapezoid(self):
        rng = np.random.default_rng(7)
        net = gap_net(rng, classes=3)
        image = rng.uniform(0, 1, (2, 4, 4))
        from dmbp.imaging import AttributionMap

        curve = complementary_insertion_metric(
            net, image, AttributionMap(rng.normal(size=(4, 4)), {}), 0, [2], MetricConfig(steps=1)
        )
        assert curve.fractions.shape == (2,)
        assert curve.auc == pytest.approx(0.5 * (curve.probabilities[0] + curve.probabilities[1]), abs=1e-12)

    def test_two_object_scene_keeps_other_label_high_early(self):
        # channel 0 drives class 0, channel 1 drives class 1; the map puts
        # all attribution on the class-0 object, so ascending insertion
        # restores the class-1 object first
        nb = NetBuilder([2, 8, 8])
        nb.global_avgpool()
        nb.dense(np.array([[30.0, 0.0], [0.0, 30.0]], np.float32))
        net = nb.build()
        image = np.zeros((2, 8, 8))
        image[0, 1:3, 1:3] = 1.0  # class-0 object
        image[1, 5:7, 5:7] = 1.0  # class-1 object
        values = np.zeros((8, 8))
        values[1:3, 1:3] = 1.0
        from dmbp.imaging import AttributionMap

        cfg = MetricConfig(steps=16, blur_sigma=2.0, seed=0)
        curve = complementary_insertion_metric(net, image, AttributionMap(values, {}), 0, [1], cfg)
        early = curve.probabilities[: len(curve.probabilities) // 2].mean()
        assert early > curve.probabilities[-1]
        assert early > 0.6

    def test_validation(self):
        rng = np.random.default_rng(8)
        net = gap_net(rng, classes=3)
        image = rng.uniform(0, 1, (2, 4, 4))
        from dmbp.imaging import AttributionMap

        amap = AttributionMap(np.zeros((4, 4)), {})
        with pytest.raises(ValueError):
            complementary_insertion_metric(net, image, amap, 0, [])
        with pytest.raises(ValueError):
            complementary_insertion_metric(net, image, amap, 0, [0, 1])
        with pytest.raises(ValueError):
            complementary_insertion_metric(net, image, amap, 0, [5])


class TestSpearman:
    def test_identical_is_one(self):
        v = np.array([3.0, 1.0, 2.0])
        assert spearman_rank_correlation(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_reversed_is_minus_one(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert spearman_rank_correlation(a, a[::-1]) == pytest.approx(-1.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            a = rng.normal(size=40)
            b = rng.normal(size=40)
            assert abs(spearman_rank_correlation(a, b) - spearman_oracle(a, b)) <= 1e-10

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            a = rng.integers(0, 5, 30).astype(np.float64)
            b = rng.integers(0, 5, 30).astype(np.float64)
            assert abs(spearman_rank_correlation(a, b) - spearman_oracle(a, b)) <= 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman_rank_correlation(np.zeros(3), np.zeros(4))


class TestReinit:
    def test_only_classifier_changes(self):
        rng = np.random.default_rng(11)
        net = random_mlp(rng, (5, 7, 3), bias=True)
        new = reinit_classifier(net, seed=1)
        assert np.array_equal(net.weights[0], new.weights[0])
        assert np.array_equal(net.biases[0], new.biases[0])
        assert not np.array_equal(net.weights[1], new.weights[1])
        assert not np.array_equal(net.biases[1], new.biases[1])
        assert new.weights[1].shape == net.weights[1].shape

    def test_same_seed_same_draw(self):
        rng = np.random.default_rng(12)
        net = random_mlp(rng, (5, 7, 3))
        a = reinit_classifier(net, seed=3)
        b = reinit_classifier(net, seed=3)
        c = reinit_classifier(net, seed=4)
        assert np.array_equal(a.weights[1], b.weights[1])
        assert not np.array_equal(a.weights[1], c.weights[1])

    def test_single_hidden_unit_pins_rank_order(self):
        # with one hidden unit every gradient map is a scalar multiple of the
        # same vector, so the reinit correlation is exactly +-1
        rng = np.random.default_rng(13)
        net = random_mlp(rng, (6, 1, 2), bias=True)
        x = boundary_safe_input(net, rng, margin=1e-3, tries=500)
        rho = reinit_sanity_check(net, x, 0, "grad", seed=5)
        assert abs(rho) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(14)
        net = random_mlp(rng, (5, 8, 3))
        x = boundary_safe_input(net, rng)
        a = reinit_sanity_check(net, x, 1, "grad", seed=2)
        b = reinit_sanity_check(net, x, 1, "grad", seed=2)
        assert a == b

    def test_return_maps(self):
        rng = np.random.default_rng(15)
        net = random_mlp(rng, (5, 8, 3))
        x = boundary_safe_input(net, rng)
        rho, original, reinit = reinit_sanity_check(net, x, 1, "grad", seed=2, return_maps=True)
        assert original.values.shape == reinit.values.shape
        assert -1.0 <= rho <= 1.0


class TestMethodAttribution:
    def test_dispatch_and_metadata(self):
        rng = np.random.default_rng(16)
        net = random_mlp(rng, (5, 7, 3))
        x = boundary_safe_input(net, rng)
        from dmbp.baselines import BaselineConfig
        from dmbp.optimizer import DmbpConfig

        for method in ("grad", "ig", "sg", "dmbp"):
            amap = method_attribution(
                net, x, 1, method,
                dmbp_config=DmbpConfig(iterations=2),
                baseline_config=BaselineConfig(ig_steps=2, sg_samples=2),
            )
            assert amap.metadata["method"] == method

    def test_unknown_method(self):
        rng = np.random.default_rng(17)
        net = random_mlp(rng, (5, 7, 3))
        x = boundary_safe_input(net, rng)
        with pytest.raises(ValueError):
            method_attribution(net, x, 0, "lime")


class TestCsvWriters:
    def test_curve_csv(self, tmp_path):
        from dmbp.metrics import InsertionCurve

        curve = InsertionCurve(
            fractions=np.array([0.0, 0.5, 1.0]), probabilities=np.array([0.25, 0.5, 1.0]), auc=0.5625
        )
        path = tmp_path / "curve.csv"
        write_curve_csv(path, curve)
        lines = path.read_text().splitlines()
        assert lines[0] == "fraction,probability"
        assert lines[1] == "0.0,0.25"
        assert len(lines) == 4

    def test_summary_csv(self, tmp_path):
        path = tmp_path / "summary.csv"
        write_summary_csv(path, [("img0", "dmbp", "im", 0.75)])
        lines = path.read_text().splitlines()
        assert lines[0] == "image,method,metric,auc"
        assert lines[1] == "img0,dmbp,im,0.75"
