import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from motiondiff.diffusion import (
    ConditioningSequence,
    GuidanceSpec,
    TrainingWeighting,
    build_schedule,
    forward_sample,
    guided_epsilon,
    interpolated_epsilon,
    reverse_std,
    reverse_step,
    sample,
    temperature_scale,
    training_loss,
)
from motiondiff.errors import ConfigurationError, ContractError, EvaluationFault, TrainingFault

# prod_{i<=100} sqrt(1 - beta_i) for the default linear schedule, evaluated with mpmath at 50 digits
ALPHA_CUM_100 = 0.2797039785592410


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def test_default_schedule_endpoints(sched):
    assert sched.n_steps == 100
    assert sched.beta[0] == 1e-4
    assert sched.beta[-1] == pytest.approx(5e-2, abs=1e-15)
    assert np.all(np.diff(sched.beta) >= 0)


def test_schedule_invariants(sched):
    assert np.array_equal(sched.alpha, np.sqrt(1.0 - sched.beta))
    assert np.max(np.abs(sched.alpha_cum**2 + sched.beta_cum**2 - 1.0)) <= 1e-12
    assert np.all(np.diff(sched.alpha_cum) < 0)
    assert np.all(np.diff(sched.beta_cum) > 0)


def test_alpha_cum_pin(sched):
    assert abs(sched.alpha_cum[-1] - ALPHA_CUM_100) <= 1e-6


def test_alpha_cum_pin_independent_product():
    # recompute by plain Python float products, no numpy
    beta = [1e-4 + (n - 1) / 99 * (5e-2 - 1e-4) for n in range(1, 101)]
    prod = 1.0
    for b in beta:
        prod *= math.sqrt(1.0 - b)
    assert abs(prod - ALPHA_CUM_100) <= 1e-12


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.alpha_cum[0] == pytest.approx(math.sqrt(0.5), abs=1e-15)
    assert s.beta_cum[0] == pytest.approx(math.sqrt(0.5), abs=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 1.0), (10, 0.2, 0.1)])
def test_schedule_rejects_bad_settings(args):
    with pytest.raises(ConfigurationError):
        build_schedule(*args)


def test_schedule_arrays_read_only(sched):
    with pytest.raises(ValueError):
        sched.beta[0] = 0.5


def test_forward_sample_cases(sched):
    x0 = torch.randn(4, 3, dtype=torch.float64)
    eps = torch.randn(4, 3, dtype=torch.float64)
    n = 37
    assert torch.allclose(forward_sample(x0, n, torch.zeros_like(x0), sched), sched.alpha_cum[n - 1] * x0)
    assert torch.allclose(forward_sample(torch.zeros_like(x0), n, eps, sched), sched.beta_cum[n - 1] * eps)
    ones = torch.ones(2, 5, dtype=torch.float64)
    out = forward_sample(ones, 100, ones, sched)
    expected = ALPHA_CUM_100 + math.sqrt(1 - ALPHA_CUM_100**2)
    assert torch.allclose(out, torch.full_like(out, expected), atol=1e-6)
    assert float(out[0, 0]) == pytest.approx(1.239790268628072, abs=1e-12)


def test_forward_sample_per_item_steps(sched):
    x0 = torch.randn(3, 4, 2, dtype=torch.float64)
    eps = torch.randn(3, 4, 2, dtype=torch.float64)
    n = torch.tensor([1, 50, 100])
    out = forward_sample(x0, n, eps, sched)
    for i in range(3):
        assert torch.allclose(out[i], forward_sample(x0[i], int(n[i]), eps[i], sched))


def test_forward_sample_errors(sched):
    with pytest.raises(ContractError):
        forward_sample(torch.zeros(2, 3), 5, torch.zeros(3, 2), sched)
    with pytest.raises(ContractError):
        forward_sample(torch.zeros(2, 3), 0, torch.zeros(2, 3), sched)
    with pytest.raises(ContractError):
        forward_sample(torch.zeros(2, 3), 101, torch.zeros(2, 3), sched)


def test_terminal_marginal_variance(sched):
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(100_000, generator=gen, dtype=torch.float64)
    eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
    var = float(forward_sample(x0, 100, eps, sched).var())
    assert 0.99 <= var <= 1.01


class Oracle(torch.nn.Module):
    """Returns whatever epsilon it is told to; used to probe the loss."""

    def __init__(self, mode):
        super().__init__()
        self.mode = mode
        self.scale = torch.nn.Parameter(torch.ones(()))
        self.last_eps = None

    def forward(self, x, cond, n):
        if self.mode == "zero":
            return self.scale * torch.zeros_like(x)
        return self.scale * torch.full_like(x, float("nan"))


def test_training_loss_perfect_prediction_is_zero(sched):
    x0 = torch.randn(3, 6, 2, dtype=torch.float64)
    cond = torch.zeros(3, 6, 1, dtype=torch.float64)
    state = {}

    def perfect(x, c, n):
        # invert the forward process using the known x0
        ac = torch.as_tensor(sched.alpha_cum[n.numpy() - 1])[:, None, None]
        bc = torch.as_tensor(sched.beta_cum[n.numpy() - 1])[:, None, None]
        state["n"] = n
        return (x - ac * x0) / bc

    loss = training_loss(perfect, x0, cond, sched, TrainingWeighting.uniform(100), torch.Generator().manual_seed(1))
    assert float(loss) == pytest.approx(0.0, abs=1e-20)
    assert state["n"].shape == (3,)


def test_training_loss_zero_predictor_expectation(sched):
    x0 = torch.randn(256, 16, 4)
    cond = torch.zeros(256, 16, 1)
    loss = training_loss(Oracle("zero"), x0, cond, sched, TrainingWeighting.uniform(100), torch.Generator().manual_seed(2))
    # mean of 16384 squared standard normals: sd of the mean ~ 0.011
    assert float(loss.detach()) == pytest.approx(1.0, abs=0.05)


def test_training_loss_reproducible(sched):
    torch.manual_seed(0)
    net = torch.nn.Linear(2, 2)

    def den(x, c, n):
        return net(x)

    x0 = torch.randn(4, 5, 2)
    cond = torch.zeros(4, 5, 1)
    w = TrainingWeighting.uniform(100)
    a = training_loss(den, x0, cond, sched, w, torch.Generator().manual_seed(9))
    b = training_loss(den, x0, cond, sched, w, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_training_loss_nonfinite_reports_batch_index(sched):
    x0 = torch.randn(3, 4, 2)
    cond = torch.zeros(3, 4, 1)
    with pytest.raises(TrainingFault) as info:
        training_loss(Oracle("nan"), x0, cond, sched, TrainingWeighting.uniform(100), torch.Generator().manual_seed(0))
    assert info.value.batch_index == 0


def test_training_loss_kappa_weighting(sched):
    x0 = torch.randn(8, 4, 2)
    cond = torch.zeros(8, 4, 1)
    w = TrainingWeighting(tuple([2.0] * 100))
    a = training_loss(Oracle("zero"), x0, cond, sched, w, torch.Generator().manual_seed(3))
    b = training_loss(Oracle("zero"), x0, cond, sched, TrainingWeighting.uniform(100), torch.Generator().manual_seed(3))
    assert float(a.detach()) == pytest.approx(2 * float(b.detach()), rel=1e-6)


def test_reverse_std_choices(sched):
    n = 40
    b, bc_prev, bc = sched.beta[n - 1], sched.beta_cum[n - 2], sched.beta_cum[n - 1]
    assert reverse_std(sched, n) == pytest.approx(math.sqrt(b * bc_prev**2 / bc**2), rel=1e-14)
    assert reverse_std(sched, n, "beta") == pytest.approx(math.sqrt(b), rel=1e-14)
    assert reverse_std(sched, 1) == 0.0
    with pytest.raises(ConfigurationError):
        reverse_std(sched, n, "learned")


def test_reverse_step_final_is_deterministic_mean(sched):
    x = torch.randn(5, 3, dtype=torch.float64)
    e = torch.randn(5, 3, dtype=torch.float64)
    out = reverse_step(x, e, 1, sched, torch.Generator().manual_seed(0))
    mu = (x - sched.beta[0] / sched.beta_cum[0] * e) / sched.alpha[0]
    assert torch.allclose(out, mu, rtol=0, atol=1e-15)
    z = torch.zeros(5, 3, dtype=torch.float64)
    assert torch.equal(reverse_step(z, z, 1, sched), z)


def test_reverse_step_noise_scale(sched):
    x = torch.zeros(200_000, dtype=torch.float64)
    out = reverse_step(x, x, 50, sched, torch.Generator().manual_seed(0))
    assert float(out.std()) == pytest.approx(reverse_std(sched, 50), rel=0.01)


def test_guided_epsilon_cases():
    eu, ec = torch.tensor([0.2]), torch.tensor([0.6])
    assert float(guided_epsilon(eu, ec, 2.0)) == pytest.approx(1.0, abs=1e-7)
    u, c = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(guided_epsilon(u, c, 0.0), u)
    assert torch.equal(guided_epsilon(u, c, 1.0), c)
    with pytest.raises(ContractError):
        guided_epsilon(u, c[:2], 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.integers(1, 6))
def test_guided_epsilon_is_affine(gamma, width):
    gen = torch.Generator().manual_seed(width)
    u = torch.randn(width, generator=gen, dtype=torch.float64)
    c = torch.randn(width, generator=gen, dtype=torch.float64)
    assert torch.allclose(guided_epsilon(u, c, gamma), u + gamma * (c - u), atol=1e-12)


def test_interpolated_epsilon_cases():
    a, b = torch.randn(4, 2), torch.randn(4, 2)
    assert torch.equal(interpolated_epsilon([a, b], (1.0, 0.0)), a)
    assert torch.equal(interpolated_epsilon([a, b], (0.0, 1.0)), b)
    z, o = torch.zeros(3), torch.ones(3)
    assert torch.allclose(interpolated_epsilon([z, o], (0.5, 0.5)), torch.full((3,), 0.5))
    out = interpolated_epsilon([a, b], (-0.25, 1.25))
    assert torch.allclose(out, 1.25 * b - 0.25 * a, atol=1e-6)
    c = torch.randn(4, 2)
    three = interpolated_epsilon([a, b, c], (0.2, 0.3, 0.5))
    assert torch.allclose(three, 0.2 * a + 0.3 * b + 0.5 * c, atol=1e-6)


def test_interpolated_epsilon_rejects_bad_weights():
    a = torch.zeros(2)
    with pytest.raises(ConfigurationError):
        interpolated_epsilon([a, a], (0.5, 0.6))
    with pytest.raises(ConfigurationError):
        interpolated_epsilon([a, a], (1.0,))
    # temperature-scaled weights are exempt from the sum rule
    assert torch.equal(interpolated_epsilon([a, a], (2.0, 0.0), temperature_scaled=True), a)


def test_temperature_scale():
    assert temperature_scale((0.3, 0.7), 1.0) == (0.3, 0.7)
    assert temperature_scale((0.5, 0.5), 2.0) == (0.25, 0.25)
    assert temperature_scale((1.0, 0.0), 0.5) == (2.0, 0.0)
    with pytest.raises(ConfigurationError):
        temperature_scale((0.5, 0.5), 0.0)


def test_guidance_spec_validation():
    GuidanceSpec("guided", 2.0, ((1.0, 0.0),)).validate(2)
    with pytest.raises(ConfigurationError):
        GuidanceSpec("guided", 2.0, ()).validate()
    with pytest.raises(ConfigurationError):
        GuidanceSpec("interpolated", 0.5, ((1.0,), (0.0,)), (0.5, 0.6)).validate()
    with pytest.raises(ConfigurationError):
        GuidanceSpec("sideways").validate()
    with pytest.raises(ConfigurationError):
        GuidanceSpec("guided", 1.0, ((1.0, 0.0, 0.0),)).validate(2)
    spec = GuidanceSpec.interpolate((1.0, 0.0), (0.0, 1.0), 0.25, tau=0.5)
    assert spec.weights == (1.5, 0.5) and spec.temperature_scaled


class StyleEcho(torch.nn.Module):
    """Prediction depends on the style span so guidance modes are distinguishable."""

    def forward(self, x, cond, n):
        return 0.1 * x + cond[..., -1:].expand_as(x) * 0.05 - cond[..., -2:-1].expand_as(x) * 0.03


def _cond(batch=None, T=6):
    shape = (T, 3) if batch is None else (batch, T, 3)
    frames = torch.zeros(shape, dtype=torch.float64)
    frames[..., 0] = torch.linspace(-1, 1, T, dtype=torch.float64)
    frames[..., 1] = 1.0
    return ConditioningSequence(frames, 1, 2)


def test_sample_shapes_and_determinism(sched):
    den = StyleEcho()
    a = sample(den, _cond(), 6, 2, sched, generator=torch.Generator().manual_seed(5))
    b = sample(den, _cond(), 6, 2, sched, generator=torch.Generator().manual_seed(5))
    assert a.shape == (6, 2) and torch.equal(a, b)
    batched = sample(den, _cond(3), 6, 2, sched, generator=torch.Generator().manual_seed(5))
    assert batched.shape == (3, 6, 2)
    long = _cond(T=240)
    assert sample(den, long, 240, 2, sched, generator=torch.Generator().manual_seed(1)).shape == (240, 2)


def test_sample_unconditional_equals_zeroed_style(sched):
    cond = _cond()
    zeroed = ConditioningSequence(cond.without_style(), 1, 2)
    a = sample(StyleEcho(), cond, 6, 2, sched, GuidanceSpec("unconditional"), torch.Generator().manual_seed(4))
    b = sample(StyleEcho(), zeroed, 6, 2, sched, GuidanceSpec("conditional"), torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_sample_guided_gamma_zero_is_unconditional(sched):
    cond = _cond()
    spec = GuidanceSpec("guided", 0.0, ((0.0, 1.0),))
    a = sample(StyleEcho(), cond, 6, 2, sched, spec, torch.Generator().manual_seed(8))
    b = sample(StyleEcho(), cond, 6, 2, sched, GuidanceSpec("unconditional"), torch.Generator().manual_seed(8))
    assert torch.equal(a, b)


def test_sample_frame_mismatch(sched):
    with pytest.raises(ContractError):
        sample(StyleEcho(), _cond(T=6), 7, 2, sched)


def test_sample_nonfinite_reports_step(sched):
    def blowup(x, cond, n):
        return torch.where(n[:, None, None] == 60, torch.full_like(x, float("inf")), torch.zeros_like(x))

    with pytest.raises(EvaluationFault, match="60"):
        sample(blowup, _cond(), 6, 2, sched, generator=torch.Generator().manual_seed(0))


def test_conditioning_sequence_contract():
    with pytest.raises(ContractError):
        ConditioningSequence(torch.zeros(4, 3), 2, 2)
    c = _cond()
    assert c.n_frames == 6
    styled = c.with_style((0.0, 1.0))
    assert torch.equal(styled[:, 1:], torch.tensor([[0.0, 1.0]] * 6, dtype=torch.float64))
    assert torch.equal(styled[:, 0], c.frames[:, 0])
    with pytest.raises(ContractError):
        c.with_style((1.0,))
