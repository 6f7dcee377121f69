"""Benchmark targets: densities, samplers, normalization."""
import numpy as np
import pytest
from scipy import stats as sps
from scipy.integrate import simpson

from stickflow import autodiff as ad
from stickflow.numerics import RngStream
from stickflow.targets import (
    complex_mixture_target,
    make_target,
    nig_target,
    normal_target,
    student_line_target,
)


def tan_grid_integral(logp, half_points=1500):
    """Integral of exp(logp) over the plane via a tangent substitution,
    which handles polynomial tails exactly."""
    u = np.linspace(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6, 2 * half_points + 1)
    x = np.tan(u)
    jac = 1.0 / np.cos(u) ** 2
    xx, yy = np.meshgrid(x, x, indexing="ij")
    vals = np.exp(logp(np.stack([xx.ravel(), yy.ravel()], axis=1))).reshape(xx.shape)
    vals = vals * jac[:, None] * jac[None, :]
    return float(simpson(simpson(vals, x=u), x=u))


class TestNig:
    def test_mode_of_variance_factor(self):
        t = nig_target()
        v = np.linspace(0.05, 1.0, 400)
        pts = np.stack([np.zeros_like(v), v], axis=1)
        lp = t.log_density(pts)
        assert v[np.argmax(lp)] == pytest.approx(0.25, abs=0.01)

    def test_survival_near_reported_percentile(self):
        # survival of the variance factor at 5.56 is about 1e-3
        t = nig_target()
        surv = sps.invgamma(3.0).sf(5.56)
        assert 5e-4 < surv < 2e-3
        draws = t.sample(10**6, RngStream(0, 30))
        assert np.mean(draws[:, 1] > 5.56) == pytest.approx(surv, rel=0.2)

    def test_normal_marginal_percentile(self):
        t = nig_target()
        draws = t.sample(10**6, RngStream(1, 31))
        assert np.quantile(draws[:, 0], 0.999) == pytest.approx(3.0902, abs=0.03)

    def test_outside_support(self):
        t = nig_target()
        lp = t.log_density(np.array([[0.0, -1.0], [0.0, 0.0]]))
        assert np.all(np.isneginf(lp))

    def test_sampler_matches_density_ks(self):
        t = nig_target()
        draws = t.sample(10**5, RngStream(2, 32))
        ks_beta = sps.kstest(draws[:, 0], "norm").statistic
        ks_v = sps.kstest(draws[:, 1], sps.invgamma(3.0).cdf).statistic
        assert ks_beta < 0.01 and ks_v < 0.01

    def test_normalized(self):
        t = nig_target()
        assert t.normalized
        total = tan_grid_integral(lambda z: np.where(
            z[:, 1] > 0, t.log_density(z), -np.inf))
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_graph_variant_matches_inside_support(self):
        t = nig_target()
        pts = np.array([[0.3, 0.8], [-1.0, 0.06], [2.0, 4.0]])
        np.testing.assert_allclose(t.log_density_graph(pts), t.log_density(pts),
                                   rtol=1e-12)

    def test_graph_variant_finite_and_increasing_below_support(self):
        t = nig_target()
        vs = np.array([[0.0, -3.0], [0.0, -1.0], [0.0, 0.01], [0.0, 0.04]])
        lp = ad.val(t.log_density_graph(vs))
        assert np.all(np.isfinite(lp))
        assert np.all(np.diff(lp) > 0)


class TestComplexMixture:
    def test_component_frequencies(self):
        t = complex_mixture_target()
        gen = RngStream(3, 33).generator()
        labels = gen.choice(4, size=10**6, p=[0.2, 0.2, 0.1, 0.5])
        freqs = np.bincount(labels, minlength=4) / 10**6
        np.testing.assert_allclose(freqs, [0.2, 0.2, 0.1, 0.5], atol=2e-3)

    def test_centered_component_symmetric(self):
        from stickflow.targets import student_t_logpdf

        z = np.linspace(-8, 8, 33)
        lp_pos = student_t_logpdf(z, 2.0)
        lp_neg = student_t_logpdf(-z, 2.0)
        np.testing.assert_allclose(lp_pos, lp_neg, rtol=1e-14)

    def test_right_mode_vertical_tail_is_t2(self):
        # exact-sampler draws from the (6, 0) component: vertical exceedances
        # match the t_2 survival
        t = complex_mixture_target()
        draws = t.sample(2 * 10**6, RngStream(4, 34))
        near = np.abs(draws[:, 0] - 6.0) < 3.0
        y = draws[near, 1]
        expected = 2 * sps.t(2).sf(20.0)
        got = np.mean(np.abs(y) > 20.0)
        assert got == pytest.approx(expected, rel=0.35)

    def test_density_integrates_to_one(self):
        t = complex_mixture_target()
        total = tan_grid_integral(t.log_density, half_points=2200)
        assert total == pytest.approx(1.0, abs=2e-2)

    def test_moons_sampler_matches_density(self):
        # x-marginal of moon draws against the quadrature marginal CDF
        from stickflow.targets import _moons_energy, _moons_log_norm, _moons_sample

        gen = RngStream(5, 35).generator()
        draws = _moons_sample(40_000, gen)
        g = np.linspace(-4, 4, 1201)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        dens = np.exp(_moons_energy(xx.ravel(), yy.ravel())).reshape(xx.shape)
        marg = simpson(dens, x=g, axis=1)
        marg /= np.trapz(marg, g)
        cdf = np.cumsum(marg) * (g[1] - g[0])
        emp = np.searchsorted(np.sort(draws[:, 0]), g) / draws.shape[0]
        assert np.max(np.abs(emp - cdf)) < 0.01

    def test_exact_sampler_mean_weights(self):
        t = complex_mixture_target()
        draws = t.sample(10**5, RngStream(6, 36))
        # mass near each center in proportion to the weights
        frac_origin = np.mean(np.linalg.norm(draws, axis=1) < 2.0)
        assert frac_origin == pytest.approx(0.5 * 0.756, abs=0.05)


class TestRegistry:
    def test_make_known_targets(self):
        assert make_target("nig").dim == 2
        assert make_target("complex-mixture").name == "complex_mixture"
        assert make_target("normal", dim=3).dim == 3
        assert make_target("student_line", nu=2.0).params["nu"] == 2.0

    def test_unknown_rejected(self):
        with pytest.raises(ValueError):
            make_target("nonsense")

    def test_student_line_sampler(self):
        t = student_line_target(2.0)
        draws = t.sample(10**5, RngStream(7, 37))
        assert sps.kstest(draws[:, 0], sps.t(2).cdf).statistic < 0.01
        assert sps.kstest(draws[:, 1], "norm").statistic < 0.01

    def test_normal_target_logp(self):
        t = normal_target(2)
        lp = t.log_density(np.zeros((1, 2)))
        assert lp[0] == pytest.approx(-np.log(2 * np.pi), rel=1e-12)

    def test_missing_sampler_raises(self):
        t = normal_target(2)
        t2 = type(t)(name="x", dim=2, log_density=t.log_density)
        with pytest.raises(ValueError):
            t2.sample(5, RngStream(0, 0))
