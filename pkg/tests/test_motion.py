import numpy as np
import pytest

from splatstream.motion import (
    GradientLedger, classify_dynamic, fit_gmm,
)


def ledger_from(values):
    values = np.asarray(values, dtype=np.float64)
    led = GradientLedger.empty(np.arange(len(values)), window=1)
    led.add(values)
    return led


def bimodal(rng, n=400, lo=0.0, hi=1.0, sd=0.01):
    half = n // 2
    return np.concatenate([
        rng.normal(lo, sd, half), rng.normal(hi, sd, n - half)
    ])


class TestFitGmm:
    def test_recovers_separated_mixture(self, rng):
        x = bimodal(rng)
        gmm = fit_gmm(x)
        assert gmm.effective_components == 2
        assert abs(gmm.means[0] - 0.0) < 0.05
        assert abs(gmm.means[1] - 1.0) < 0.05
        assert abs(gmm.weights[0] - 0.5) < 0.1
        assert abs(gmm.weights[1] - 0.5) < 0.1

    def test_loglik_monotone_every_iteration(self, rng):
        for trial in range(30):
            r = np.random.default_rng(trial)
            x = r.normal(r.uniform(-1, 1), r.uniform(0.1, 2.0), 200)
            if trial % 2:
                x = np.concatenate([x, r.normal(5.0, 0.3, 100)])
            gmm = fit_gmm(x)
            lls = gmm.log_likelihoods
            assert all(b - a > -1e-10 for a, b in zip(lls, lls[1:]))

    def test_symmetric_point_gets_half_responsibility(self, rng):
        # mirror-exact data keeps the fit symmetric, so the midpoint splits 50/50
        half = rng.normal(1.0, 0.3, 300)
        x = np.concatenate([half, -half])
        gmm = fit_gmm(x)
        post = gmm.posteriors(np.array([0.5 * (gmm.means[0] + gmm.means[1])]))
        assert post[0, 0] == pytest.approx(0.5, abs=1e-6)
        assert post[0, 1] == pytest.approx(0.5, abs=1e-6)

    def test_identical_values_single_component(self):
        gmm = fit_gmm(np.full(50, 0.25))
        assert gmm.effective_components == 1

    def test_all_zeros_single_component(self):
        gmm = fit_gmm(np.zeros(64))
        assert gmm.effective_components == 1

    def test_canonical_mean_order(self, rng):
        gmm = fit_gmm(bimodal(rng))
        assert gmm.means[0] <= gmm.means[1]

    def test_needs_two_values(self):
        with pytest.raises(ValueError):
            fit_gmm(np.array([1.0]))

    def test_smooth_unimodal_data_is_one_effective_component(self, rng):
        # fit-error-like gradients: lognormal spread with no motion cluster
        x = np.exp(rng.normal(-3.0, 0.7, 500))
        gmm = fit_gmm(x)
        assert gmm.effective_components == 1


class TestClassifyDynamic:
    def test_high_mean_value_is_dynamic(self, rng):
        x = bimodal(rng)
        gmm = fit_gmm(x)
        led = ledger_from(x)
        dyn, stat = classify_dynamic(gmm, led, rho=0.8)
        assert set(dyn) == set(np.nonzero(x > 0.5)[0])
        assert len(dyn) + len(stat) == len(x)

    def test_matches_bruteforce_posteriors(self, rng):
        x = bimodal(rng, n=600, sd=0.05)
        gmm = fit_gmm(x)
        led = ledger_from(x)
        dyn, _ = classify_dynamic(gmm, led, rho=0.8)
        dyn = set(int(i) for i in dyn)
        for i, v in enumerate(x):
            post = gmm.posteriors(np.array([v]))[0, 1]
            assert (i in dyn) == (post > 0.8)

    def test_monotone_in_rho(self, rng):
        x = bimodal(rng, sd=0.3)  # overlapping enough for rho to matter
        gmm = fit_gmm(x)
        led = ledger_from(x)
        dyn8, _ = classify_dynamic(gmm, led, rho=0.8)
        dyn9, _ = classify_dynamic(gmm, led, rho=0.9)
        assert set(int(i) for i in dyn9) <= set(int(i) for i in dyn8)

    def test_scaling_invariance(self, rng):
        x = bimodal(rng)
        for scale in (1e-4, 7.3, 1e5):
            g1 = fit_gmm(x)
            g2 = fit_gmm(x * scale)
            d1, _ = classify_dynamic(g1, ledger_from(x), rho=0.8)
            d2, _ = classify_dynamic(g2, ledger_from(x * scale), rho=0.8)
            assert np.array_equal(np.sort(d1), np.sort(d2))
            p1 = g1.posteriors(x)
            p2 = g2.posteriors(x * scale)
            assert np.abs(p1 - p2).max() < 1e-6

    def test_all_zero_ledger_empty_dynamic_set(self):
        led = ledger_from(np.zeros(40))
        gmm = fit_gmm(led.mean())
        dyn, stat = classify_dynamic(gmm, led, rho=0.8)
        assert len(dyn) == 0
        assert len(stat) == 40

    def test_rho_range_validated(self, rng):
        x = bimodal(rng)
        gmm = fit_gmm(x)
        with pytest.raises(ValueError):
            classify_dynamic(gmm, ledger_from(x), rho=0.4)

    def test_updates_hierarchy_state(self, rng):
        from splatstream.anchors import init_hierarchy

        h = init_hierarchy(rng.uniform(-1, 1, (60, 3)), (4.0, 1.0), delta=1.0, k=2)
        x = rng.normal(0.0, 0.001, len(h))
        x[:5] = 1.0
        led = GradientLedger.empty(h.ids.copy(), window=1)
        led.add(x)
        gmm = fit_gmm(x)
        dyn, _ = classify_dynamic(gmm, led, rho=0.8, hierarchy=h)
        assert set(int(i) for i in dyn) == set(h.ids[:5].tolist())
        assert h.dynamic[:5].all() and not h.dynamic[5:].any()


class TestGradientLedger:
    def test_mean_requires_samples(self):
        led = GradientLedger.empty(np.arange(3), window=5)
        with pytest.raises(ValueError):
            led.mean()

    def test_mean_and_reset(self):
        led = GradientLedger.empty(np.arange(3), window=2)
        led.add(np.array([1.0, 2.0, 3.0]))
        led.add(np.array([3.0, 2.0, 1.0]))
        assert np.allclose(led.mean(), [2.0, 2.0, 2.0])
        led.reset()
        assert led.count == 0
