import io
import itertools

import numpy as np
import pytest
from PIL import Image

from oracles import shapley_exact
from trafficlens.errors import (
    ConfigError,
    InsufficientSamplingError,
    PartitionError,
    TrafficLensWarning,
)
from trafficlens.explain import (
    AttributionMap,
    background_suppression,
    bilinear_resize,
    class_consistency,
    default_tap_layer,
    ExplainQualityReport,
    grad_cam,
    interpretability_rank,
    kernel_shap,
    overlay_png_bytes,
    region_grid,
    shap_summary,
    spatial_compactness,
)
from trafficlens.layers import LayerSpec, build_layer
from trafficlens.models import Model, ModelConfig, build


def analytic_model(conv_weight=(1.0, 0.5, 0.25), dense_row=(2.0, -1.0), k=2):
    """One 1x1 conv -> GAP -> dense -> softmax with hand-set weights."""
    rng = np.random.default_rng(0)
    conv = build_layer(
        LayerSpec("conv2d", in_channels=3, out_channels=1, kernel_size=1, stride=1), rng
    )
    conv.params["weight"] = np.array(conv_weight).reshape(1, 1, 3, 1)
    conv.params["bias"] = np.zeros(1)
    gap = build_layer(LayerSpec("global_avg_pool"), rng)
    dense = build_layer(LayerSpec("dense", in_features=1, units=k), rng)
    dense.params["weight"] = np.array([list(dense_row)])
    dense.params["bias"] = np.zeros(k)
    softmax = build_layer(LayerSpec("softmax"), rng)
    config = ModelConfig(family="plain_cnn", n_classes=k, name="analytic")
    return Model(config, [conv, gap, dense, softmax], head_start=1, seed=0)


class TestGradCam:
    def test_closed_form_alpha_times_activation(self, rng):
        model = analytic_model()
        image = rng.random((60, 60, 3))
        cam = grad_cam(model, image, target_class=0, tap_layer=0)
        # activation is positive (positive weights, positive pixels) and the
        # channel weight is dense_w[0,0]/3600 > 0, so cam == A / max(A)
        activation = model.layers[0].forward(image[None])[0, :, :, 0]
        expected = activation / activation.max()
        assert np.max(np.abs(cam.values - expected)) < 1e-6

    def test_zero_gradient_gives_all_zero_map(self, rng):
        model = analytic_model(dense_row=(0.0, 1.0))
        cam = grad_cam(model, rng.random((60, 60, 3)), target_class=0, tap_layer=0)
        assert np.all(cam.values == 0.0)

    def test_normalization_contract_on_real_models(self, rng):
        for family in ("micro_mobile", "micro_dense"):
            model = build(ModelConfig(family=family, n_classes=3), seed=7)
            image = rng.integers(0, 256, size=(60, 60, 3), dtype=np.uint8)
            cam = grad_cam(model, image, target_class=1)
            assert cam.values.min() >= 0.0
            assert cam.values.max() == pytest.approx(1.0) or cam.values.max() == 0.0
            assert cam.values.shape == (60, 60)

    def test_gradient_scale_invariance(self, rng):
        image = rng.random((60, 60, 3))
        a = grad_cam(analytic_model(dense_row=(2.0, -1.0)), image, 0, tap_layer=0)
        b = grad_cam(analytic_model(dense_row=(4.0, -1.0)), image, 0, tap_layer=0)
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_default_tap_is_last_conv_before_gap(self):
        model = build(ModelConfig(family="micro_mobile", n_classes=3), seed=0)
        tap = default_tap_layer(model)
        assert model.layers[tap].spec.kind in (
            "conv2d", "depthwise_conv2d", "pointwise_conv2d", "concat_dense_block",
        )
        gap_idx = next(i for i, l in enumerate(model.layers) if l.spec.kind == "global_avg_pool")
        assert tap < gap_idx
        assert all(
            l.spec.kind not in ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "concat_dense_block")
            for l in model.layers[tap + 1 : gap_idx]
        )

    def test_non_conv_tap_rejected(self, rng):
        model = build(ModelConfig(family="micro_mobile", n_classes=3), seed=0)
        gap_idx = next(i for i, l in enumerate(model.layers) if l.spec.kind == "global_avg_pool")
        with pytest.raises(ConfigError, match="not convolutional"):
            grad_cam(model, rng.random((60, 60, 3)), 0, tap_layer=gap_idx)

    def test_bad_class_rejected(self, rng):
        model = analytic_model()
        with pytest.raises(ConfigError):
            grad_cam(model, rng.random((60, 60, 3)), target_class=5, tap_layer=0)


class TestBilinear:
    def test_identity_when_sizes_match(self, rng):
        grid = rng.random((7, 9))
        assert np.array_equal(bilinear_resize(grid, 7, 9), grid)

    def test_constant_preserved(self):
        grid = np.full((4, 4), 3.25)
        assert np.allclose(bilinear_resize(grid, 9, 11), 3.25)

    def test_hand_case_2x_upsample(self):
        grid = np.array([[0.0, 1.0]])
        out = bilinear_resize(grid, 1, 4)
        # centers at src coords -0.25, 0.25, 0.75, 1.25 -> clipped interp
        assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])


def region_sums(image, labels, n):
    return np.array([image[labels == r].sum() for r in range(n)])


class TestKernelShap:
    def test_baseline_equals_image_gives_zero(self, rng):
        image = rng.random((60, 60, 3))
        amap = kernel_shap(lambda batch: np.ones(len(batch)), image, baseline=image,
                           regions=region_grid(2), budget=16, seed=0)
        assert np.allclose(amap.region_values, 0.0, atol=1e-12)

    def test_additive_predictor_recovers_region_contributions(self, rng):
        labels = region_grid(2)
        weights = np.array([0.5, -1.5, 2.0, 0.25])

        def predict(batch):
            return np.array([region_sums(x, labels, 4) @ weights for x in batch])

        image = rng.random((60, 60, 3))
        amap = kernel_shap(predict, image, regions=labels, budget=16, seed=0)
        expected = weights * region_sums(image, labels, 4)  # baseline sums are 0
        assert np.allclose(amap.region_values, expected, atol=1e-8)

    def test_efficiency_sum_rule(self, rng):
        labels = region_grid(2)

        def predict(batch):
            return np.array([np.tanh(x[..., 0].sum() / 500.0) + x[..., 1].mean() for x in batch])

        image = rng.random((60, 60, 3))
        amap = kernel_shap(predict, image, regions=labels, budget=16, seed=0)
        assert amap.region_values.sum() == pytest.approx(
            amap.full_value - amap.base_value, abs=1e-6
        )

    def test_exhaustive_matches_permutation_oracle(self, rng):
        labels = region_grid(2)
        image = rng.random((60, 60, 3))
        baseline = np.zeros_like(image)
        for trial in range(5):
            mix = rng.standard_normal((4, 4))

            def predict(batch):
                sums = np.stack([region_sums(x, labels, 4) for x in batch])
                hidden = np.tanh(sums / 300.0 @ mix)
                return hidden.sum(axis=1)

            amap = kernel_shap(predict, image, regions=labels, budget=16, seed=trial)

            def value_fn(subset):
                present = np.isin(labels, list(subset))
                masked = np.where(present[..., None], image, baseline)
                return float(predict(masked[None])[0])

            oracle = shapley_exact(value_fn, 4)
            assert np.max(np.abs(amap.region_values - oracle)) < 1e-8

    def test_symmetry_of_equivalent_regions(self, rng):
        labels = region_grid(2)
        image = rng.random((60, 60, 3))
        image[labels == 1] = image[labels == 0][: (labels == 1).sum()]  # same content

        def predict(batch):
            sums = np.stack([region_sums(x, labels, 4) for x in batch])
            return sums[:, 0] + sums[:, 1] + 0.1 * sums[:, 2] ** 2 / 1e4

        amap = kernel_shap(predict, image, regions=labels, budget=16, seed=0)
        assert abs(amap.region_values[0] - amap.region_values[1]) < 1e-10

    def test_sampled_mode_converges_with_budget(self, rng):
        labels = region_grid(3)  # 9 regions, 512 coalitions
        image = rng.random((60, 60, 3))
        mix = rng.standard_normal((9, 3))

        def predict(batch):
            sums = np.stack([region_sums(x, labels, 9) for x in batch])
            return np.tanh(sums / 200.0 @ mix).sum(axis=1)

        exact = kernel_shap(predict, image, regions=labels, budget=512, seed=0).region_values
        rmses = []
        for budget in (128, 256, 512):
            errs = []
            for seed in range(5):
                got = kernel_shap(predict, image, regions=labels, budget=budget, seed=seed)
                errs.append(np.sqrt(np.mean((got.region_values - exact) ** 2)))
            rmses.append(np.mean(errs))
        assert rmses[2] < 1e-10
        assert rmses[0] >= rmses[1] >= rmses[2]

    def test_pixel_values_broadcast_from_regions(self, rng):
        labels = region_grid(2)
        amap = kernel_shap(lambda b: np.array([x.sum() for x in b]),
                           rng.random((60, 60, 3)), regions=labels, budget=16, seed=0)
        for r in range(4):
            assert np.allclose(amap.values[labels == r], amap.region_values[r])

    def test_budget_too_small(self, rng):
        with pytest.raises(InsufficientSamplingError):
            kernel_shap(lambda b: np.zeros(len(b)), rng.random((60, 60, 3)),
                        regions=region_grid(2), budget=5, seed=0)

    def test_bad_partition(self, rng):
        labels = region_grid(2).copy()
        labels[0, 0] = 7  # hole in the id range
        with pytest.raises(PartitionError):
            kernel_shap(lambda b: np.zeros(len(b)), rng.random((60, 60, 3)),
                        regions=labels, budget=32, seed=0)
        with pytest.raises(PartitionError):
            kernel_shap(lambda b: np.zeros(len(b)), rng.random((60, 60, 3)),
                        regions=np.zeros((30, 30), dtype=int), budget=32, seed=0)


def gc_map(values):
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    return AttributionMap(values=values / peak if peak > 0 else values, kind="gradcam")


class TestQualityScores:
    def test_compactness_single_pixel(self):
        values = np.zeros((60, 60))
        values[3, 4] = 1.0
        assert spatial_compactness(gc_map(values)) == 1.0

    def test_compactness_uniform_equals_fraction(self):
        assert spatial_compactness(gc_map(np.ones((60, 60)))) == pytest.approx(0.1)

    def test_compactness_two_band_hand_case(self):
        values = np.zeros((60, 60))
        values[:10, :] = 4.0   # 600 px of mass 4
        values[10:30, :] = 1.0  # 1200 px of mass 1
        # top 360 pixels all carry 4: 1440 of total 3600
        assert spatial_compactness(gc_map(values)) == pytest.approx(0.4)

    def test_compactness_scale_invariant(self, rng):
        values = rng.random((60, 60))
        a = spatial_compactness(AttributionMap(values=values, kind="shap"))
        b = spatial_compactness(AttributionMap(values=values * 37.5, kind="shap"))
        assert a == pytest.approx(b, abs=1e-12)

    def test_compactness_zero_map_warns(self):
        with pytest.warns(TrafficLensWarning):
            assert spatial_compactness(gc_map(np.zeros((60, 60)))) == 0.0

    def test_suppression_cases(self):
        image = np.zeros((60, 60, 3))
        image[:, 30:, :] = 1.0  # right half bright (foreground)
        fg = np.zeros((60, 60))
        fg[:, 30:] = 1.0
        assert background_suppression(gc_map(fg), image) == pytest.approx(1.0)
        bg = np.zeros((60, 60))
        bg[:, :30] = 1.0
        assert background_suppression(gc_map(bg), image) == pytest.approx(0.0)
        half = np.ones((60, 60))
        assert background_suppression(gc_map(half), image) == pytest.approx(0.5)

    def test_suppression_no_background_warns(self):
        image = np.ones((60, 60, 3))
        with pytest.warns(TrafficLensWarning):
            assert background_suppression(gc_map(np.ones((60, 60))), image) == 1.0

    def test_consistency_identical_maps(self, rng):
        m = gc_map(rng.random((60, 60)))
        assert class_consistency({0: [m, m], 1: [m, m]}) == pytest.approx(1.0)

    def test_consistency_negation_pair(self, rng):
        values = rng.standard_normal((60, 60))
        a = AttributionMap(values=values, kind="shap")
        b = AttributionMap(values=-values, kind="shap")
        assert class_consistency({0: [a, b]}) == pytest.approx(-1.0)

    def test_consistency_orthogonal_random_near_zero(self, rng):
        maps = [AttributionMap(values=rng.standard_normal((60, 60)), kind="shap")
                for _ in range(12)]
        assert abs(class_consistency({0: maps})) < 0.05

    def test_consistency_small_class_excluded(self, rng):
        m = gc_map(rng.random((60, 60)))
        with pytest.warns(TrafficLensWarning, match="excluded"):
            value = class_consistency({0: [m, m], 1: [m]})
        assert value == pytest.approx(1.0)

    def _shap_with_regions(self, region_values):
        labels = region_grid(2)
        region_values = np.asarray(region_values, dtype=np.float64)
        return AttributionMap(values=region_values[labels], kind="shap",
                              region_labels=labels, region_values=region_values)

    def test_separation_all_positive(self):
        _, sep = shap_summary([self._shap_with_regions([1.0, 2.0, 0.5, 0.1])])
        assert sep == pytest.approx(1.0)

    def test_separation_balanced(self):
        _, sep = shap_summary([self._shap_with_regions([1.0, -1.0, 2.0, -2.0])])
        assert sep == pytest.approx(0.0)

    def test_separation_hand_case(self):
        magnitude, sep = shap_summary([self._shap_with_regions([3.0, -1.0, 0.0, 0.0])])
        assert sep == pytest.approx(0.5)
        assert magnitude == pytest.approx(3.0)

    def test_zero_mass_map_warns(self):
        with pytest.warns(TrafficLensWarning):
            _, sep = shap_summary([self._shap_with_regions([0.0, 0.0, 0.0, 0.0])])
        assert sep == 0.0


def quality(model, **axes):
    base = dict(spatial_compactness=0.5, background_suppression=0.5,
                class_consistency=0.5, shap_magnitude=0.5, pos_neg_separation=0.5)
    base.update(axes)
    return ExplainQualityReport(model=model, **base)


class TestRanking:
    def test_single_model_rank_one(self):
        entries = interpretability_rank([quality("only")])
        assert entries[0].rank == 1 and entries[0].model == "only"

    def test_dominating_model_first(self):
        a = quality("strong", spatial_compactness=0.9, background_suppression=0.9,
                    class_consistency=0.9, shap_magnitude=0.9, pos_neg_separation=0.9)
        b = quality("weak", spatial_compactness=0.1, background_suppression=0.1,
                    class_consistency=0.1, shap_magnitude=0.1, pos_neg_separation=0.1)
        entries = interpretability_rank([b, a])
        assert [e.model for e in entries] == ["strong", "weak"]
        assert entries[0].composite == pytest.approx(1.0)
        assert entries[1].composite == pytest.approx(0.0)

    def test_hand_computed_two_model_table(self):
        a = quality("a", spatial_compactness=0.8, shap_magnitude=0.2)
        b = quality("b", spatial_compactness=0.4, shap_magnitude=0.6)
        entries = interpretability_rank([a, b])
        # each wins one axis (1.0 vs 0.0), other three axes tie at 0.5
        assert entries[0].composite == pytest.approx((1.0 + 0.0 + 0.5 * 3) / 5)
        assert entries[1].composite == pytest.approx((1.0 + 0.0 + 0.5 * 3) / 5)
        assert [e.model for e in entries] == ["a", "b"]  # alphabetical tie-break

    def test_ties_break_alphabetically(self):
        entries = interpretability_rank([quality("zeta"), quality("alpha")])
        assert [e.model for e in entries] == ["alpha", "zeta"]


class TestOverlay:
    def test_overlay_decodes_as_png(self, rng):
        image = rng.integers(0, 256, size=(60, 60, 3), dtype=np.uint8)
        cam = gc_map(rng.random((60, 60)))
        decoded = np.asarray(Image.open(io.BytesIO(overlay_png_bytes(cam, image))))
        assert decoded.shape == (60, 60, 3)
        shap = AttributionMap(values=rng.standard_normal((60, 60)), kind="shap")
        decoded = np.asarray(Image.open(io.BytesIO(overlay_png_bytes(shap, image))))
        assert decoded.shape == (60, 60, 3)
