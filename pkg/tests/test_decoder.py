import numpy as np
import pytest

from splatstream.anchors import init_hierarchy
from splatstream.decoder import (
    DropoutSchedule, SeparateMLPs, SharedMLP, decode, decode_arrays,
    decode_backward, dropout_mask,
)

from conftest import make_camera


def zero_mlp(k=4):
    mlp = SharedMLP(feature_dim=32, hidden=32, k=k, seed=0)
    for p in mlp.params().values():
        p[:] = 0.0
    return mlp


def small_inputs(rng, m=2, k=4):
    centers = rng.uniform(-0.5, 0.5, (m, 3)) + np.array([0, 0, 2.5])
    features = rng.normal(0, 0.3, (m, 32))
    offsets = rng.uniform(-0.25, 0.25, (m, k, 3))
    raw_scales = np.log(rng.uniform(0.05, 0.3, (m, k, 3)))
    levels = np.arange(m) % 3
    voxels = 0.8 / 2.0 ** levels
    return centers, features, offsets, raw_scales, levels, voxels


class TestDecodeForward:
    def test_zero_network_case(self, rng):
        k = 4
        mlp = zero_mlp(k)
        cam = make_camera()
        centers, features, offsets, raw_scales, levels, voxels = small_inputs(rng, 1, k)
        features[:] = 0.0
        batch, _ = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
        assert np.allclose(batch.opacity, 0.5)
        assert np.allclose(batch.color, 0.5)
        assert np.allclose(batch.rot, np.tile([1.0, 0, 0, 0], (k, 1)))
        assert np.allclose(batch.scale.reshape(1, k, 3), np.exp(raw_scales))
        want_mu = centers[:, None, :] + offsets * voxels[:, None, None]
        assert np.allclose(batch.mu.reshape(1, k, 3), want_mu)

    def test_zero_offsets_collapse_to_center(self, rng):
        k = 4
        mlp = SharedMLP(k=k, seed=3)
        cam = make_camera()
        centers, features, offsets, raw_scales, levels, voxels = small_inputs(rng, 1, k)
        offsets[:] = 0.0
        batch, _ = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
        assert np.allclose(batch.mu, np.tile(centers[0], (k, 1)))

    def test_matches_straight_line_reimplementation(self, rng):
        # independent re-evaluation of the two-layer forward pass
        k = 3
        mlp = SharedMLP(k=k, seed=11)
        cam = make_camera()
        centers, features, offsets, raw_scales, levels, voxels = small_inputs(rng, 1, k)
        batch, _ = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)

        diff = centers[0] - cam.center
        dist = np.linalg.norm(diff)
        x = np.concatenate([features[0], [dist / 4.0], diff / dist])
        hidden = np.maximum(mlp.net.w1 @ x + mlp.net.b1, 0.0)
        y = (mlp.net.w2 @ hidden + mlp.net.b2).reshape(k, 11)
        for j in range(k):
            assert batch.opacity[j] == pytest.approx(1 / (1 + np.exp(-y[j, 0])), rel=1e-12)
            assert np.allclose(batch.color[j], 1 / (1 + np.exp(-y[j, 1:4])))
            want_scale = np.exp(raw_scales[0, j] + np.clip(y[j, 4:7], -10, 10))
            assert np.allclose(batch.scale[j], want_scale)
            u = y[j, 7:11] + np.array([1.0, 0, 0, 0])
            assert np.allclose(batch.rot[j], u / np.linalg.norm(u))

    def test_deterministic_forward(self, rng):
        k = 4
        mlp = SharedMLP(k=k, seed=5)
        cam = make_camera()
        args = small_inputs(rng, 3, k)
        b1, _ = decode_arrays(*args, cam, mlp, d_max=4.0)
        b2, _ = decode_arrays(*args, cam, mlp, d_max=4.0)
        assert np.array_equal(b1.mu, b2.mu)
        assert np.array_equal(b1.opacity, b2.opacity)

    def test_divergent_network_raises(self, rng):
        k = 2
        mlp = SharedMLP(k=k, seed=1)
        mlp.net.w1[0, 0] = np.nan
        cam = make_camera()
        args = small_inputs(rng, 1, k)
        with pytest.raises(FloatingPointError, match="decoder divergence"):
            decode_arrays(*args, cam, mlp, d_max=4.0)

    def test_single_anchor_surface(self, rng):
        h = init_hierarchy(rng.uniform(-1, 1, (40, 3)), (4.0, 1.0), delta=1.0, k=5)
        mlp = SharedMLP(k=5, seed=2)
        cam = make_camera()
        anchor = h.anchor(int(h.ids[0]))
        gaussians = decode(anchor, cam, mlp, delta=h.config.delta, d_max=4.0)
        assert len(gaussians) == 5
        assert all(g.parent_anchor == anchor.id for g in gaussians)
        assert all(g.level == anchor.level for g in gaussians)
        assert all(0 < g.opacity < 1 for g in gaussians)


class TestDecodeBackward:
    def test_zero_upstream_zero_grads(self, rng):
        k = 4
        mlp = SharedMLP(k=k, seed=7)
        cam = make_camera()
        args = small_inputs(rng, 2, k)
        batch, cache = decode_arrays(*args, cam, mlp, d_max=4.0)
        n = len(batch)
        zeros = [np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                 np.zeros(n), np.zeros((n, 3))]
        dg = decode_backward(cache, mlp, *zeros)
        assert np.all(dg.feature == 0) and np.all(dg.offsets == 0)
        assert np.all(dg.raw_scales == 0) and np.all(dg.center == 0)
        for g in dg.mlp["net"].values():
            assert np.all(g == 0)

    def test_position_gradient_is_voxel_scaled_identity(self, rng):
        k = 3
        mlp = SharedMLP(k=k, seed=7)
        cam = make_camera()
        args = small_inputs(rng, 2, k)
        batch, cache = decode_arrays(*args, cam, mlp, d_max=4.0)
        n = len(batch)
        d_mu = rng.normal(size=(n, 3))
        dg = decode_backward(
            cache, mlp, d_mu, np.zeros((n, 3)), np.zeros((n, 4)),
            np.zeros(n), np.zeros((n, 3)))
        voxels = args[5]
        assert np.allclose(dg.offsets, d_mu.reshape(2, k, 3) * voxels[:, None, None])

    def test_matches_finite_differences(self, rng):
        k = 4
        mlp = SharedMLP(k=k, seed=13)
        cam = make_camera()
        centers, features, offsets, raw_scales, levels, voxels = small_inputs(rng, 2, k)
        w = {
            "mu": rng.normal(size=(2 * k, 3)), "scale": rng.normal(size=(2 * k, 3)),
            "rot": rng.normal(size=(2 * k, 4)), "op": rng.normal(size=2 * k),
            "col": rng.normal(size=(2 * k, 3)),
        }

        def f():
            b, _ = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
            return float(
                np.sum(b.mu * w["mu"]) + np.sum(b.scale * w["scale"])
                + np.sum(b.rot * w["rot"]) + np.sum(b.opacity * w["op"])
                + np.sum(b.color * w["col"]))

        _, cache = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
        dg = decode_backward(cache, mlp, w["mu"], w["scale"], w["rot"],
                             w["op"], w["col"])
        h = 1e-6
        checks = [
            (features, dg.feature), (offsets, dg.offsets),
            (raw_scales, dg.raw_scales), (centers, dg.center),
            (mlp.net.w1, dg.mlp["net"]["w1"]), (mlp.net.b1, dg.mlp["net"]["b1"]),
            (mlp.net.w2, dg.mlp["net"]["w2"]), (mlp.net.b2, dg.mlp["net"]["b2"]),
        ]
        for arr, grad in checks:
            for _ in range(8):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                fp = f()
                arr[idx] = orig - h
                fm = f()
                arr[idx] = orig
                num = (fp - fm) / (2 * h)
                assert num == pytest.approx(grad[idx], rel=1e-4, abs=1e-7)

    def test_stale_tape_rejected(self, rng):
        k = 2
        mlp = SharedMLP(k=k, seed=1)
        cam = make_camera()
        args = small_inputs(rng, 2, k)
        _, cache = decode_arrays(*args, cam, mlp, d_max=4.0)
        with pytest.raises(ValueError, match="stale tape"):
            decode_backward(cache, mlp, np.zeros((3, 3)), np.zeros((3, 3)),
                            np.zeros((3, 4)), np.zeros(3), np.zeros((3, 3)))

    def test_separate_mlps_gradcheck(self, rng):
        k = 3
        mlp = SeparateMLPs(k=k, seed=21)
        cam = make_camera()
        centers, features, offsets, raw_scales, levels, voxels = small_inputs(rng, 1, k)
        w_op = rng.normal(size=k)

        def f():
            b, _ = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
            return float(np.sum(b.opacity * w_op) + np.sum(b.scale) + np.sum(b.rot))

        b, cache = decode_arrays(centers, features, offsets, raw_scales,
                                 levels, voxels, cam, mlp, d_max=4.0)
        n = len(b)
        dg = decode_backward(cache, mlp, np.zeros((n, 3)), np.ones((n, 3)),
                             np.ones((n, 4)), w_op, np.zeros((n, 3)))
        h = 1e-6
        for net_name in ("opacity", "scale", "rot"):
            arr = mlp.nets[net_name].w1
            grad = dg.mlp[net_name]["w1"]
            for _ in range(5):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                fp = f()
                arr[idx] = orig - h
                fm = f()
                arr[idx] = orig
                num = (fp - fm) / (2 * h)
                assert num == pytest.approx(grad[idx], rel=1e-4, abs=1e-8)


class TestDropout:
    def test_rate_formula(self):
        sched = DropoutSchedule(total_steps=1000)
        assert sched.rate(0, 0) == 0.0
        assert sched.rate(0, 1000) == pytest.approx(0.1)
        assert sched.rate(2, 500) == pytest.approx(0.1)  # 0.2 * 0.5
        assert sched.rate(3, 1000) == pytest.approx(0.25)

    def test_rate_monotone_in_step_and_level(self):
        sched = DropoutSchedule(total_steps=100)
        rates_m = [sched.rate(1, m) for m in range(0, 101, 10)]
        assert all(a <= b for a, b in zip(rates_m, rates_m[1:]))
        for m in (10, 50, 100):
            rates_l = [sched.rate(l, m) for l in range(5)]
            assert all(a < b for a, b in zip(rates_l, rates_l[1:]))

    def test_step_zero_keeps_all(self, rng):
        sched = DropoutSchedule(total_steps=10)
        keep, comp = dropout_mask(np.zeros(500, dtype=int), 0, sched, rng)
        assert keep.all()
        assert np.allclose(comp, 1.0)

    def test_empirical_rate(self):
        sched = DropoutSchedule(total_steps=10)
        rng = np.random.default_rng(0)
        levels = np.full(100_000, 2)
        keep, comp = dropout_mask(levels, 5, sched, rng)  # r = 0.2*0.5 = 0.1
        dropped = 1.0 - keep.mean()
        sd = np.sqrt(0.1 * 0.9 / 100_000)
        assert abs(dropped - 0.1) < 3 * sd
        assert np.allclose(comp, 1.0 / 0.9)

    def test_expected_opacity_compensation_identity(self):
        sched = DropoutSchedule(total_steps=10)
        rng = np.random.default_rng(7)
        alpha = 0.37
        levels = np.full(100_000, 3)
        keep, comp = dropout_mask(levels, 10, sched, rng)  # r = 0.25
        observed = np.mean(alpha * keep * comp)
        assert observed == pytest.approx(alpha, rel=0.01)

    def test_out_of_range_step_rejected(self):
        sched = DropoutSchedule(total_steps=10)
        with pytest.raises(ValueError):
            sched.rate(0, 11)
