"""Gaussian diffusion over pose sequences: schedule, noising, loss, ancestral sampling and guidance.

Step indices are 1-based throughout (``n = 1..N``); ``n = 0`` is the data itself.
Denoisers are any callable ``eps_hat = denoiser(x_n, cond, n)`` with ``x_n`` of shape
``(B, T, D)``, ``cond`` of shape ``(B, T, C)`` and ``n`` a ``(B,)`` integer tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ContractError, EvaluationFault, TrainingFault

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants; arrays are indexed ``[n - 1]`` for step ``n``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_cum: np.ndarray
    beta_cum: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def settings(self) -> dict:
        return {"n_steps": self.n_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_step(self, n: int) -> None:
        if not 1 <= n <= self.n_steps:
            raise ContractError(f"step {n} outside 1..{self.n_steps}")


def build_schedule(n_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 5e-2) -> NoiseSchedule:
    """Linear beta schedule with alpha_n = sqrt(1 - beta_n) and variance-preserving cumulants."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    n_steps = int(n_steps)
    if n_steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        frac = np.arange(n_steps, dtype=np.float64) / (n_steps - 1)
        beta = beta_start + frac * (beta_end - beta_start)
    alpha = np.sqrt(1.0 - beta)
    alpha_cum = np.cumprod(alpha)
    beta_cum = np.sqrt(1.0 - alpha_cum**2)
    for arr in (beta, alpha, alpha_cum, beta_cum):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_cum, beta_cum, float(beta_start), float(beta_end))


def _coef(values: np.ndarray, n: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # gather per-item constants and broadcast over the trailing (T, D) axes
    c = torch.tensor(values, dtype=like.dtype, device=like.device)[n - 1]
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def forward_sample(x0: torch.Tensor, n, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Return ``alpha_cum[n] * x0 + beta_cum[n] * eps``; ``n`` may be an int or a per-item tensor."""
    if x0.shape != eps.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} does not match data shape {tuple(x0.shape)}")
    if isinstance(n, int):
        sched.check_step(n)
        return float(sched.alpha_cum[n - 1]) * x0 + float(sched.beta_cum[n - 1]) * eps
    n = torch.as_tensor(n, dtype=torch.long)
    if n.numel() and (n.min() < 1 or n.max() > sched.n_steps):
        raise ContractError(f"steps outside 1..{sched.n_steps}")
    return _coef(sched.alpha_cum, n, x0) * x0 + _coef(sched.beta_cum, n, x0) * eps


@dataclass(frozen=True)
class TrainingWeighting:
    kappa: tuple

    @classmethod
    def uniform(cls, n_steps: int) -> "TrainingWeighting":
        return cls(tuple([1.0] * n_steps))


def training_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    weighting: TrainingWeighting | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Epsilon-prediction loss, one diffusion step drawn per batch item.

    ``x0`` is ``(B, T, D)`` and ``cond`` is ``(B, T, C)``. Returns the batch mean of
    ``kappa_n * mean((eps - eps_hat)**2)``.
    """
    if x0.dim() != 3 or cond.dim() != 3:
        raise ContractError("x0 and cond must be (B, T, features)")
    if x0.shape[0] == 0:
        raise ContractError("empty batch")
    if x0.shape[:2] != cond.shape[:2]:
        raise ContractError(f"cond frames {tuple(cond.shape[:2])} != pose frames {tuple(x0.shape[:2])}")
    batch = x0.shape[0]
    n = torch.randint(1, sched.n_steps + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_n = forward_sample(x0, n, eps, sched)
    eps_hat = denoiser(x_n, cond, n)
    per_item = ((eps - eps_hat) ** 2).mean(dim=(1, 2))
    if weighting is not None:
        per_item = per_item * torch.as_tensor(weighting.kappa, dtype=x0.dtype)[n - 1]
    bad = ~torch.isfinite(per_item)
    if bad.any():
        idx = int(bad.nonzero()[0, 0])
        raise TrainingFault(f"non-finite loss for batch item {idx}", batch_index=idx)
    return per_item.mean()


def reverse_std(sched: NoiseSchedule, n: int, variance: str = "posterior") -> float:
    """Standard deviation of the noise injected when stepping from n to n - 1."""
    if n == 1:
        return 0.0
    beta = sched.beta[n - 1]
    if variance == "posterior":
        return math.sqrt(beta * sched.beta_cum[n - 2] ** 2 / sched.beta_cum[n - 1] ** 2)
    if variance == "beta":
        return math.sqrt(beta)
    raise ConfigurationError(f"unknown reverse variance {variance!r}")


def reverse_step(
    x_n: torch.Tensor,
    eps_hat: torch.Tensor,
    n: int,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    variance: str = "posterior",
) -> torch.Tensor:
    """One ancestral step x_n -> x_{n-1}. The final step (n = 1) adds no noise."""
    sched.check_step(n)
    if x_n.shape != eps_hat.shape:
        raise ContractError(f"eps_hat shape {tuple(eps_hat.shape)} != x_n shape {tuple(x_n.shape)}")
    beta = float(sched.beta[n - 1])
    mean = (x_n - (beta / float(sched.beta_cum[n - 1])) * eps_hat) / float(sched.alpha[n - 1])
    if n == 1:
        return mean
    z = torch.randn(x_n.shape, generator=generator, dtype=x_n.dtype)
    return mean + reverse_std(sched, n, variance) * z


def guided_epsilon(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, gamma: float) -> torch.Tensor:
    """Classifier-free guidance: ``eps_uncond + gamma * (eps_cond - eps_uncond)``.

    Evaluated as ``(1 - gamma) * eps_uncond + gamma * eps_cond`` so that gamma = 0 and
    gamma = 1 return the two inputs bit for bit.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ContractError("guidance inputs differ in shape")
    return (1.0 - gamma) * eps_uncond + gamma * eps_cond


def check_weights(weights: Sequence[float]) -> None:
    if abs(math.fsum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigurationError(f"interpolation weights must sum to 1, got {math.fsum(weights)!r}")


def interpolated_epsilon(
    eps_list: Sequence[torch.Tensor], weights: Sequence[float], temperature_scaled: bool = False
) -> torch.Tensor:
    """Weighted sum of expert predictions.

    Weights must be barycentric unless they came out of :func:`temperature_scale`
    (pass ``temperature_scaled=True``). Negative weights extrapolate.
    """
    if len(eps_list) != len(weights) or not eps_list:
        raise ConfigurationError("need one weight per expert prediction")
    if not temperature_scaled:
        check_weights(weights)
    shape = eps_list[0].shape
    if any(e.shape != shape for e in eps_list):
        raise ContractError("expert predictions differ in shape")
    out = weights[0] * eps_list[0]
    for w, e in zip(weights[1:], eps_list[1:]):
        out = out + w * e
    return out


def temperature_scale(weights: Sequence[float], tau: float) -> tuple:
    """Divide the product-of-experts exponents by ``tau`` (tau < 1 sharpens)."""
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return tuple(w / tau for w in weights)


@dataclass(frozen=True)
class ConditioningSequence:
    """Per-frame conditioning ``[audio ; style]``, shape ``(T, C)`` or ``(B, T, C)``."""

    frames: torch.Tensor
    audio_width: int
    style_width: int

    def __post_init__(self):
        if self.frames.shape[-1] != self.audio_width + self.style_width:
            raise ContractError(
                f"cond width {self.frames.shape[-1]} != audio {self.audio_width} + style {self.style_width}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[-2]

    def with_style(self, style) -> torch.Tensor:
        style = torch.as_tensor(style, dtype=self.frames.dtype)
        if style.shape != (self.style_width,):
            raise ContractError(f"style vector must have width {self.style_width}")
        out = self.frames.clone()
        out[..., self.audio_width:] = style
        return out

    def without_style(self) -> torch.Tensor:
        return self.with_style(torch.zeros(self.style_width))


@dataclass(frozen=True)
class GuidanceSpec:
    """How the epsilon fed to each reverse step is assembled.

    ``unconditional``: style span zeroed. ``conditional``: cond used as given.
    ``guided``: classifier-free guidance towards ``styles[0]`` with strength ``gamma``.
    ``interpolated``: weighted sum over ``styles`` with ``weights``.
    """

    mode: str = "conditional"
    gamma: float = 1.0
    styles: tuple = ()
    weights: tuple = ()
    temperature_scaled: bool = False

    def validate(self, style_width: int | None = None) -> None:
        if self.mode not in ("unconditional", "conditional", "guided", "interpolated"):
            raise ConfigurationError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "guided" and len(self.styles) != 1:
            raise ConfigurationError("guided mode takes exactly one style")
        if self.mode == "interpolated":
            if len(self.styles) < 2 or len(self.weights) != len(self.styles):
                raise ConfigurationError("interpolated mode needs 2+ styles and one weight per style")
            if not self.temperature_scaled:
                check_weights(self.weights)
        if style_width is not None:
            for s in self.styles:
                if len(s) != style_width:
                    raise ConfigurationError(f"style vector width {len(s)} != {style_width}")

    @classmethod
    def interpolate(cls, s1, s2, gamma: float, tau: float = 1.0) -> "GuidanceSpec":
        weights = (1.0 - gamma, gamma)
        if tau != 1.0:
            weights = temperature_scale(weights, tau)
        return cls("interpolated", gamma, (tuple(s1), tuple(s2)), weights, tau != 1.0)


def guided_prediction(
    denoiser: Denoiser, x: torch.Tensor, cond: ConditioningSequence, n: torch.Tensor, guidance: GuidanceSpec
) -> torch.Tensor:
    """Epsilon estimate for one step under the requested guidance mode."""
    if guidance.mode == "unconditional":
        return denoiser(x, cond.without_style(), n)
    if guidance.mode == "conditional":
        return denoiser(x, cond.frames, n)
    if guidance.mode == "guided":
        eps_u = denoiser(x, cond.without_style(), n)
        eps_c = denoiser(x, cond.with_style(guidance.styles[0]), n)
        return guided_epsilon(eps_u, eps_c, guidance.gamma)
    eps_list = [denoiser(x, cond.with_style(s), n) for s in guidance.styles]
    return interpolated_epsilon(eps_list, guidance.weights, guidance.temperature_scaled)


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    cond: ConditioningSequence,
    n_frames: int,
    pose_dim: int,
    sched: NoiseSchedule,
    guidance: GuidanceSpec | None = None,
    generator: torch.Generator | None = None,
    variance: str = "posterior",
) -> torch.Tensor:
    """Ancestral sampling from x_N ~ N(0, I) down to x_0.

    ``cond.frames`` of shape ``(T, C)`` gives a ``(T, D)`` result; ``(B, T, C)`` gives ``(B, T, D)``.
    """
    guidance = guidance or GuidanceSpec()
    guidance.validate(cond.style_width)
    if cond.n_frames != n_frames:
        raise ContractError(f"conditioning has {cond.n_frames} frames, asked for {n_frames}")
    batched = cond.frames.dim() == 3
    if not batched:
        cond = ConditioningSequence(cond.frames.unsqueeze(0), cond.audio_width, cond.style_width)
    batch = cond.frames.shape[0]
    dtype = cond.frames.dtype
    x = torch.randn((batch, n_frames, pose_dim), generator=generator, dtype=dtype)
    for n in range(sched.n_steps, 0, -1):
        steps = torch.full((batch,), n, dtype=torch.long)
        eps_hat = guided_prediction(denoiser, x, cond, steps, guidance)
        x = reverse_step(x, eps_hat, n, sched, generator, variance)
        if not torch.isfinite(x).all():
            raise EvaluationFault(f"non-finite sample values after reverse step {n}")
    return x if batched else x[0]
