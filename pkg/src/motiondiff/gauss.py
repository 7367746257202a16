"""Closed-form Gaussian diffusion oracle.

For an isotropic Gaussian target N(m, s^2 I) the diffused marginal at step n is
N(alpha_cum m, (alpha_cum^2 s^2 + beta_cum^2) I), so the loss-optimal noise predictor is
known exactly. Plugging it into the sampler gives a ground truth for the reverse loop,
classifier-free guidance and product-of-experts interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import (
    ConditioningSequence,
    GuidanceSpec,
    NoiseSchedule,
    sample,
)
from .errors import ConfigurationError


@dataclass(frozen=True)
class GaussianExpert:
    mean: float | tuple
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ConfigurationError(f"expert variance must be positive, got {self.var}")

    @property
    def mean_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.mean, dtype=np.float64))


def optimal_epsilon(x: torch.Tensor, n: int, g: GaussianExpert, sched: NoiseSchedule) -> torch.Tensor:
    """Exact minimiser of the epsilon loss for target ``g``: ``bc (x - ac m) / (ac^2 s^2 + bc^2)``.

    The mean broadcasts against the last axis of ``x``.
    """
    ac = float(sched.alpha_cum[n - 1])
    bc = float(sched.beta_cum[n - 1])
    m = torch.as_tensor(g.mean_array, dtype=x.dtype)
    return bc * (x - ac * m) / (ac * ac * g.var + bc * bc)


def log_marginal(x: np.ndarray, n: int, g: GaussianExpert, sched: NoiseSchedule) -> np.ndarray:
    """Log density of the diffused marginal q(x_n) for a scalar expert."""
    ac = sched.alpha_cum[n - 1]
    var = ac * ac * g.var + sched.beta_cum[n - 1] ** 2
    return -0.5 * (x - ac * g.mean_array[0]) ** 2 / var - 0.5 * np.log(2 * np.pi * var)


def product_gaussian(g1: GaussianExpert, g2: GaussianExpert, gamma: float, tau: float = 1.0) -> GaussianExpert:
    """Normalised ``g1^((1-gamma)/tau) * g2^(gamma/tau)``."""
    return weighted_product([g1, g2], [(1.0 - gamma) / tau, gamma / tau])


def weighted_product(experts, weights) -> GaussianExpert:
    precision = sum(w / g.var for g, w in zip(experts, weights))
    if not precision > 0:
        raise ConfigurationError(
            f"weights {tuple(weights)} give nonpositive precision {precision}; extrapolated too far"
        )
    mean = sum(w * g.mean_array / g.var for g, w in zip(experts, weights)) / precision
    mean = float(mean[0]) if mean.size == 1 else tuple(float(v) for v in mean)
    return GaussianExpert(mean, 1.0 / precision)


class ExpertDenoiser:
    """A denoiser that routes on the style span of the conditioning.

    A one-hot style ``k`` selects ``experts[k]``; the all-zero style selects
    ``unconditional``. The audio span (if any) is ignored.
    """

    def __init__(self, experts, sched: NoiseSchedule, unconditional: GaussianExpert | None = None):
        self.experts = list(experts)
        self.sched = sched
        self.unconditional = unconditional

    @property
    def style_width(self) -> int:
        return len(self.experts)

    def __call__(self, x: torch.Tensor, cond: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        step = int(n.reshape(-1)[0])
        style = cond[..., -self.style_width:].reshape(-1, self.style_width)[0]
        if not torch.any(style != 0):
            if self.unconditional is None:
                raise ConfigurationError("no unconditional expert configured")
            return optimal_epsilon(x, step, self.unconditional, self.sched)
        k = int(torch.argmax(style))
        return optimal_epsilon(x, step, self.experts[k], self.sched)


def one_hot(k: int, width: int) -> tuple:
    return tuple(1.0 if i == k else 0.0 for i in range(width))


def draw(
    denoiser: ExpertDenoiser,
    guidance: GuidanceSpec,
    n_samples: int,
    seed: int,
    dim: int = 1,
    style=None,
) -> np.ndarray:
    """Run the real sampler over ``n_samples`` independent one-frame sequences."""
    width = denoiser.style_width
    frames = torch.zeros(n_samples, 1, width, dtype=torch.float64)
    if style is not None:
        frames[...] = torch.as_tensor(style, dtype=torch.float64)
    cond = ConditioningSequence(frames, 0, width)
    gen = torch.Generator().manual_seed(seed)
    x = sample(denoiser, cond, 1, dim, denoiser.sched, guidance, gen)
    return x.reshape(n_samples, dim).numpy()


@dataclass
class SampleReport:
    label: str
    target_mean: float
    target_var: float
    mean: float
    var: float
    n_samples: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.mean_ok and self.var_ok

    @property
    def se(self) -> float:
        return math.sqrt(self.var / self.n_samples)

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean - self.target_mean) <= 3.0 * self.se

    @property
    def var_ok(self) -> bool:
        return abs(self.var / self.target_var - 1.0) <= 0.05

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.label}: mean={self.mean:.5f} target={self.target_mean:.5f} "
            f"(3SE={3 * self.se:.5f}) var={self.var:.5f} target={self.target_var:.5f} "
            f"(rel={self.var / self.target_var - 1:+.4f}) n={self.n_samples}"
        )


def _report(label, samples, target: GaussianExpert) -> SampleReport:
    x = samples[:, 0]
    return SampleReport(label, float(target.mean_array[0]), target.var, float(x.mean()), float(x.var(ddof=1)), len(x))


def verify_recovery(g: GaussianExpert, sched: NoiseSchedule, n_samples: int = 10_000, seed: int = 0) -> SampleReport:
    """Sample with the optimal epsilon of ``g`` and compare against ``g`` itself."""
    den = ExpertDenoiser([g], sched)
    x = draw(den, GuidanceSpec("conditional"), n_samples, seed, style=one_hot(0, 1))
    return _report(f"recover N({g.mean_array[0]:g}, {g.var:g})", x, g)


def verify_poe_sampling(
    g1: GaussianExpert,
    g2: GaussianExpert,
    gamma: float,
    sched: NoiseSchedule,
    n_samples: int = 10_000,
    seed: int = 0,
) -> SampleReport:
    """Interpolated sampling between two equal-variance experts vs the closed-form product."""
    if not math.isclose(g1.var, g2.var, rel_tol=0, abs_tol=1e-15):
        raise ConfigurationError("product-of-experts equivalence is only exact for equal variances")
    den = ExpertDenoiser([g1, g2], sched)
    guidance = GuidanceSpec.interpolate(one_hot(0, 2), one_hot(1, 2), gamma)
    x = draw(den, guidance, n_samples, seed)
    return _report(f"poe gamma={gamma:g}", x, product_gaussian(g1, g2, gamma))


def guidance_displacements(
    uncond: GaussianExpert,
    cond: GaussianExpert,
    gammas,
    sched: NoiseSchedule,
    n_samples: int = 10_000,
    seed: int = 0,
) -> list:
    """Sample mean distance from the unconditional mean under classifier-free guidance.

    Every gamma reuses the same seed so the comparison across gammas is paired.
    """
    den = ExpertDenoiser([cond], sched, unconditional=uncond)
    out = []
    for gamma in gammas:
        x = draw(den, GuidanceSpec("guided", gamma, (one_hot(0, 1),)), n_samples, seed)
        out.append(float(np.linalg.norm(x.mean(axis=0) - uncond.mean_array)))
    return out


def reverse_chain_moments(g: GaussianExpert, sched: NoiseSchedule, variance: str = "posterior") -> tuple:
    """Exact mean and variance of x_0 after the reverse loop driven by the optimal epsilon.

    The loop is linear-Gaussian in x, so moments propagate in closed form. Used to see
    how far the discretised sampler lands from its target before any Monte-Carlo noise.
    """
    from .diffusion import reverse_std

    m = float(g.mean_array[0])
    mean, var = 0.0, 1.0
    for n in range(sched.n_steps, 0, -1):
        ac, bc = sched.alpha_cum[n - 1], sched.beta_cum[n - 1]
        c = bc / (ac * ac * g.var + bc * bc)
        k = sched.beta[n - 1] / bc
        a = sched.alpha[n - 1]
        # x' = (x - k c (x - ac m)) / a + std z
        slope = (1.0 - k * c) / a
        offset = k * c * ac * m / a
        mean = slope * mean + offset
        var = slope * slope * var + reverse_std(sched, n, variance) ** 2
    return mean, var
