import numpy as np
import pytest

from depthopt.dataio import PlaneSpec, SceneSpec, synth_scene
from depthopt.geometry import Intrinsics
from depthopt.losses import LossWeights
from depthopt.optim import (DisparityField, OptimizationError, OptimizeConfig,
                            adam_step, depth_to_disparity, disparity_to_depth,
                            gradcheck, init_state, lr_schedule, make_gradcheck_scene,
                            optimize_scene, run_gradcheck)
from depthopt.sampler import resize_bilinear


def scalar_adam_reference(grads, lr, b1, b2, eps):
    """Independent scalar Adam, straight from the update equations."""
    theta, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta -= lr * mh / (np.sqrt(vh) + eps)
    return theta


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        cfg = OptimizeConfig()
        p = {"x": np.array([1.0, 2.0])}
        m = {"x": np.zeros(2)}
        v = {"x": np.zeros(2)}
        adam_step(p, {"x": np.zeros(2)}, (m, v), 1, cfg)
        assert np.array_equal(p["x"], [1.0, 2.0])

    def test_first_step_magnitude(self):
        # t=1: m-hat = g, v-hat = g^2, so |step| = lr*|g|/(|g|+eps) ~ lr.
        cfg = OptimizeConfig(lr=1e-4)
        for g in (0.5, -2.0, 1e-3):
            p = {"x": np.array([0.0])}
            m = {"x": np.zeros(1)}
            v = {"x": np.zeros(1)}
            adam_step(p, {"x": np.array([g])}, (m, v), 1, cfg)
            expect = 1e-4 * abs(g) / (abs(g) + cfg.eps)
            assert abs(p["x"][0]) == pytest.approx(expect, rel=1e-12)
            assert abs(p["x"][0]) == pytest.approx(1e-4, rel=1e-4)

    def test_matches_scalar_reference(self):
        cfg = OptimizeConfig(lr=3e-3)
        rng = np.random.default_rng(0)
        grads = rng.normal(size=25)
        p = {"x": np.array([0.0])}
        m = {"x": np.zeros(1)}
        v = {"x": np.zeros(1)}
        for t, g in enumerate(grads, start=1):
            adam_step(p, {"x": np.array([g])}, (m, v), t, cfg, cfg.lr)
        want = scalar_adam_reference(grads, 3e-3, cfg.beta1, cfg.beta2, cfg.eps)
        assert p["x"][0] == pytest.approx(want, abs=1e-12)

    def test_non_finite_gradient_aborts(self):
        cfg = OptimizeConfig()
        p = {"x": np.array([0.0])}
        with pytest.raises(OptimizationError, match="x"):
            adam_step(p, {"x": np.array([np.nan])}, ({"x": np.zeros(1)}, {"x": np.zeros(1)}), 1, cfg)


class TestLrSchedule:
    def test_paper_spans(self):
        cfg = OptimizeConfig(iterations=100, scales=4, lr=1e-4)  # 400 total
        assert lr_schedule(0, cfg) == 1e-4
        assert lr_schedule(120, cfg) == 1e-4          # inside first 60%
        assert lr_schedule(239, cfg) == 1e-4
        assert lr_schedule(240, cfg) == 5e-5          # second span
        assert lr_schedule(300, cfg) == 5e-5
        assert lr_schedule(320, cfg) == 2.5e-5        # third span
        assert lr_schedule(399, cfg) == 2.5e-5

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, OptimizeConfig())


class TestDisparityDepth:
    K = Intrinsics(100.0, 100.0, 49.5, 49.5, 100, 100)

    def test_hand_value(self):
        # depth = fx*B/(s*W) = 100*0.5/(0.3*100)
        assert disparity_to_depth(0.3, self.K, 0.5) == pytest.approx(100 * 0.5 / 30.0)

    def test_inverse_proportionality(self):
        d1 = disparity_to_depth(0.2, self.K, 0.5)
        d2 = disparity_to_depth(0.1, self.K, 0.5)
        assert d2 == pytest.approx(2 * d1, rel=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(0.01, 0.3, (5, 5))
        back = depth_to_disparity(disparity_to_depth(s, self.K, 0.5), self.K, 0.5)
        assert np.abs(back - s).max() < 1e-12

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            disparity_to_depth(0.0, self.K, 0.5)

    def test_field_stays_inside_bounds(self):
        f = DisparityField(np.array([[-40.0, 0.0, 40.0]]))
        s = f.normalized()
        assert np.all(s > 0) and np.all(s < 0.3)
        depth = f.depth(self.K, 0.5)
        assert np.all(depth > 0) and np.all(np.isfinite(depth))


def tiny_sample(seed=5, w=32, h=16, depth=2.4):
    spec = SceneSpec(width=w, height=h, fx=25.0, fy=25.0, baseline=0.5,
                     planes=[PlaneSpec(depth)], seed=seed,
                     temporal_pose=(0.02, 0.008, 0.01, 0.001, 0.002, -0.0005))
    return synth_scene(spec)


class TestOptimizeScene:
    def test_zero_iterations_returns_initialization(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=0, scales=3)
        state, trace = optimize_scene(sample, cfg)
        assert trace == []
        assert np.all(state.disp["left"].logits == 0.0)
        assert np.all(state.mask_logits == cfg.mask_init_logit)
        assert np.array_equal(state.pose_stereo, [sample.baseline, 0, 0, 0, 0, 0])
        assert not state.pose_temporal.any()
        # final state is at full resolution
        assert state.disp["left"].logits.shape == (16, 32)

    def test_deterministic_bit_identical(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=4, scales=3, deterministic=True)
        s1, t1 = optimize_scene(sample, cfg)
        s2, t2 = optimize_scene(sample, cfg)
        for view in s1.disp:
            assert np.array_equal(s1.disp[view].logits, s2.disp[view].logits)
        assert np.array_equal(s1.pose_temporal, s2.pose_temporal)
        assert np.array_equal(s1.mask_logits, s2.mask_logits)
        assert [r.total for r in t1] == [r.total for r in t2]

    def test_frozen_stereo_pose_untouched(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=3, scales=2, freeze_stereo_pose=True)
        state, _ = optimize_scene(sample, cfg)
        assert np.array_equal(state.pose_stereo, [sample.baseline, 0, 0, 0, 0, 0])

    def test_free_stereo_pose_moves(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=20, scales=2, freeze_stereo_pose=False)
        state, _ = optimize_scene(sample, cfg)
        assert not np.array_equal(state.pose_stereo, [sample.baseline, 0, 0, 0, 0, 0])

    def test_trace_schema(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=2, scales=2)
        _, trace = optimize_scene(sample, cfg)
        assert len(trace) == 4
        assert [r.iteration for r in trace] == [0, 1, 2, 3]
        assert [r.scale for r in trace] == [0, 0, 1, 1]
        for r in trace:
            assert r.total == pytest.approx(
                r.image + r.smooth + r.consistency + r.explainability, abs=1e-12)

    def test_loss_decreases_on_synthetic_scene(self):
        sample = tiny_sample()
        cfg = OptimizeConfig(iterations=150, scales=2)
        _, trace = optimize_scene(sample, cfg)
        # windowed means over the first stage are non-increasing after warmup
        totals = np.array([r.total for r in trace if r.scale == 0])
        w1 = totals[100:125].mean()
        w2 = totals[125:150].mean()
        assert w2 <= w1 + 1e-9

    def test_upsample_preserves_constant_fields(self):
        c = np.full((4, 8), 0.731)
        up = resize_bilinear(c, (8, 16))
        assert np.all(up == 0.731)


class TestGradcheck:
    def test_default_scene_passes(self):
        state, images, K, baseline = make_gradcheck_scene(0)
        report = gradcheck(state, images, K, baseline)
        assert set(report) == {"disp_left", "disp_right", "disp_left_next",
                               "disp_right_next", "pose_stereo", "pose_temporal", "mask"}
        assert max(report.values()) < 1e-4

    def test_zero_weights_zero_error(self):
        state, images, K, baseline = make_gradcheck_scene(1)
        report = gradcheck(state, images, K, baseline, weights=LossWeights(0, 0, 0, 0))
        assert all(v == 0.0 for v in report.values())

    def test_injected_sign_flip_detected(self):
        state, images, K, baseline = make_gradcheck_scene(2)
        report = gradcheck(state, images, K, baseline, negate_block="disp_right")
        assert report["disp_right"] > 1e-4
        assert report["disp_left"] < 1e-4

    def test_eps_sweep_log_convex(self):
        # truncation ~ h^2 plus roundoff ~ 1/h is log-log convex
        state, images, K, baseline = make_gradcheck_scene(3)
        errs = []
        for eps in (1e-3, 1e-4, 1e-5):
            report = gradcheck(state, images, K, baseline, eps=eps)
            errs.append(max(report.values()))
        mid, lo, hi = errs[1], errs[0], errs[2]
        assert mid <= np.sqrt(lo * hi) * 3.0

    def test_run_gradcheck_shape(self):
        results = run_gradcheck(seeds=range(2))
        assert set(results) == {0, 1}
        assert all(len(r) == 7 for r in results.values())
