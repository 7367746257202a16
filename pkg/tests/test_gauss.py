import math

import numpy as np
import pytest
import torch
from scipy import integrate

from motiondiff.diffusion import (
    GuidanceSpec,
    build_schedule,
    interpolated_epsilon,
    reverse_std,
    temperature_scale,
)
from motiondiff.errors import ConfigurationError
from motiondiff.gauss import (
    ExpertDenoiser,
    GaussianExpert,
    SampleReport,
    draw,
    log_marginal,
    one_hot,
    optimal_epsilon,
    product_gaussian,
    reverse_chain_moments,
    verify_poe_sampling,
    verify_recovery,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


@pytest.fixture(scope="module")
def fine():
    return build_schedule(1000, 1e-4, 0.02)


def test_standard_normal_target(sched):
    x = torch.linspace(-3, 3, 13, dtype=torch.float64)[:, None]
    g = GaussianExpert(0.0, 1.0)
    for n in (1, 40, 100):
        assert torch.allclose(optimal_epsilon(x, n, g, sched), sched.beta_cum[n - 1] * x, atol=1e-15)


def test_zero_at_marginal_mean(sched):
    g = GaussianExpert(1.7, 0.4)
    for n in (1, 50, 100):
        x = torch.tensor([[sched.alpha_cum[n - 1] * 1.7]], dtype=torch.float64)
        assert abs(float(optimal_epsilon(x, n, g, sched))) < 1e-15


@pytest.mark.parametrize("n", [1, 10, 55, 100])
def test_epsilon_matches_score_by_finite_differences(sched, n):
    g = GaussianExpert(-0.8, 2.5)
    xs = np.linspace(-4, 4, 17)
    h = 1e-5
    fd = (log_marginal(xs + h, n, g, sched) - log_marginal(xs - h, n, g, sched)) / (2 * h)
    eps = optimal_epsilon(torch.from_numpy(xs)[:, None], n, g, sched).numpy()[:, 0]
    assert np.max(np.abs(fd - (-eps / sched.beta_cum[n - 1]))) < 1e-6


def test_product_gaussian_cases():
    g1, g2 = GaussianExpert(-1.0, 1.0), GaussianExpert(1.0, 1.0)
    assert product_gaussian(g1, g2, 0.0) == g1
    mid = product_gaussian(g1, g2, 0.5)
    assert mid.mean == pytest.approx(0.0, abs=1e-15) and mid.var == pytest.approx(1.0)
    a, b = GaussianExpert(0.3, 1.0), GaussianExpert(2.0, 1.0)
    ext = product_gaussian(a, b, 1.25)
    assert ext.var == pytest.approx(1.0, abs=1e-15)
    assert ext.mean == pytest.approx(1.25 * 2.0 - 0.25 * 0.3, abs=1e-14)


def test_product_gaussian_rejects_nonpositive_precision():
    with pytest.raises(ConfigurationError):
        product_gaussian(GaussianExpert(0.0, 0.5), GaussianExpert(1.0, 2.0), 1.5)


def _numeric_product(g1, g2, w1, w2):
    """Normalise p1^w1 p2^w2 by quadrature; return its mean and variance."""
    def dens(x):
        return math.exp(
            w1 * (-0.5 * (x - g1.mean) ** 2 / g1.var) + w2 * (-0.5 * (x - g2.mean) ** 2 / g2.var)
        )

    z = integrate.quad(dens, -40, 40, limit=200)[0]
    m = integrate.quad(lambda x: x * dens(x), -40, 40, limit=200)[0] / z
    v = integrate.quad(lambda x: (x - m) ** 2 * dens(x), -40, 40, limit=200)[0] / z
    return m, v


@pytest.mark.parametrize("gamma", [0.0, 0.25, 0.5, 0.9, 1.25])
def test_product_gaussian_against_quadrature(gamma):
    g1, g2 = GaussianExpert(-0.5, 1.0), GaussianExpert(1.5, 0.6)
    if (1 - gamma) / g1.var + gamma / g2.var <= 0:
        pytest.skip("outside the valid extrapolation range")
    p = product_gaussian(g1, g2, gamma)
    m, v = _numeric_product(g1, g2, 1 - gamma, gamma)
    assert p.mean == pytest.approx(m, abs=1e-8)
    assert p.var == pytest.approx(v, rel=1e-7)


def test_temperature_half_gives_plain_product():
    g1, g2 = GaussianExpert(-1.0, 0.7), GaussianExpert(2.0, 1.3)
    w = temperature_scale((0.5, 0.5), 0.5)
    assert w == (1.0, 1.0)
    p = product_gaussian(g1, g2, 0.5, tau=0.5)
    m, v = _numeric_product(g1, g2, *w)
    assert p.mean == pytest.approx(m, abs=1e-8)
    assert p.var == pytest.approx(v, rel=1e-7)
    # the plain product of two Gaussians: precisions add
    assert p.var == pytest.approx(1 / (1 / 0.7 + 1 / 1.3), rel=1e-14)


def test_interpolated_oracle_epsilon_equals_product_epsilon(sched):
    # per step, the weighted epsilons of equal-variance experts are the product's epsilon
    g1, g2 = GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 1.0)
    x = torch.linspace(-3, 3, 7, dtype=torch.float64)[:, None]
    for gamma in (0.0, 0.25, 1.25):
        prod = product_gaussian(g1, g2, gamma)
        for n in (1, 30, 100):
            e = interpolated_epsilon(
                [optimal_epsilon(x, n, g1, sched), optimal_epsilon(x, n, g2, sched)], (1 - gamma, gamma)
            )
            assert torch.allclose(e, optimal_epsilon(x, n, prod, sched), atol=1e-14)


def test_expert_denoiser_routing(sched):
    den = ExpertDenoiser([GaussianExpert(1.0, 1.0), GaussianExpert(-1.0, 1.0)], sched, GaussianExpert(0.0, 1.0))
    x = torch.zeros(2, 1, 1, dtype=torch.float64)
    n = torch.tensor([100, 100])
    c0 = torch.tensor([[[1.0, 0.0]]] * 2, dtype=torch.float64)
    c1 = torch.tensor([[[0.0, 1.0]]] * 2, dtype=torch.float64)
    cu = torch.zeros(2, 1, 2, dtype=torch.float64)
    assert float(den(x, c0, n)[0]) < 0 < float(den(x, c1, n)[0])
    assert float(den(x, cu, n)[0]) == 0.0
    with pytest.raises(ConfigurationError):
        ExpertDenoiser([GaussianExpert(0.0, 1.0)], sched)(x, torch.zeros(2, 1, 1), n)


def test_sample_report_rules():
    ok = SampleReport("x", 0.0, 1.0, 0.01, 1.02, 10_000)
    assert ok.passed and "PASS" in str(ok)
    off_mean = SampleReport("x", 0.0, 1.0, 0.05, 1.0, 10_000)
    assert not off_mean.passed and str(off_mean).startswith("FAIL")
    off_var = SampleReport("x", 0.0, 1.0, 0.0, 1.06, 10_000)
    assert not off_var.passed


def test_chain_moments_close_to_target_on_fine_schedule(fine):
    for m, v in ((0.0, 1.0), (2.0, 1.0), (-1.0, 0.25), (0.5, 4.0), (3.0, 0.5)):
        mean, var = reverse_chain_moments(GaussianExpert(m, v), fine)
        assert mean == pytest.approx(m, abs=2e-3)
        assert var / v - 1 == pytest.approx(0.0, abs=0.025)


def test_chain_moments_biased_on_default_schedule(sched):
    # the default schedule leaves 7.8% of the signal variance at n = N, so the chain
    # started from N(0, 1) misses a non-centred target by a visible margin
    mean, _ = reverse_chain_moments(GaussianExpert(3.0, 0.5), sched)
    assert abs(mean - 3.0) > 0.1


def test_recovery_small_sample(fine):
    rep = verify_recovery(GaussianExpert(1.0, 0.5), fine, n_samples=10_000, seed=3)
    assert rep.passed, str(rep)


def test_poe_symmetric_case(fine):
    rep = verify_poe_sampling(GaussianExpert(-1.0, 1.0), GaussianExpert(1.0, 1.0), 0.5, fine, 10_000, seed=1)
    assert rep.passed and abs(rep.mean) < 3 * rep.se


def test_poe_quarter_weight(fine):
    rep = verify_poe_sampling(GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 1.0), 0.25, fine, 10_000, seed=2)
    assert rep.target_mean == pytest.approx(0.5)
    assert rep.passed, str(rep)


def test_poe_requires_equal_variance(fine):
    with pytest.raises(ConfigurationError):
        verify_poe_sampling(GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 2.0), 0.5, fine, 10)


def test_temperature_sharpens_sampled_variance(fine):
    # tau = 0.5 on weights (1, 0) doubles the N(0, 1) oracle epsilon, 2 btilde_n x, so each
    # reverse step is linear in x and the final variance follows a scalar recursion
    g1, g2 = GaussianExpert(0.0, 1.0), GaussianExpert(0.0, 1.0)
    den = ExpertDenoiser([g1, g2], fine)
    spec = GuidanceSpec.interpolate(one_hot(0, 2), one_hot(1, 2), 0.0, tau=0.5)
    x = draw(den, spec, 10_000, seed=0)
    var = 1.0
    for n in range(fine.n_steps, 0, -1):
        gain = (1 - 2 * fine.beta[n - 1]) / fine.alpha[n - 1]
        var = gain**2 * var + reverse_std(fine, n) ** 2
    assert var < 0.5
    assert float(x.var()) == pytest.approx(var, rel=0.05)


def test_draw_is_deterministic(fine):
    den = ExpertDenoiser([GaussianExpert(0.0, 1.0)], fine)
    a = draw(den, GuidanceSpec("conditional"), 50, seed=4, style=one_hot(0, 1))
    b = draw(den, GuidanceSpec("conditional"), 50, seed=4, style=one_hot(0, 1))
    assert np.array_equal(a, b)
