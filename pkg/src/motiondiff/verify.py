"""Self-checks runnable from the command line: schedule pins, guidance identities,
Gaussian-oracle sampling, network gradients and equivariance, data round trips.

Each suite returns a list of :class:`Check` records; nothing here writes files.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import rotations as rot
from .bvh import parse_bvh, serialize_bvh
from .diffusion import build_schedule, forward_sample, guided_epsilon
from .gauss import GaussianExpert, guidance_displacements, verify_poe_sampling, verify_recovery
from .model import Denoiser, DenoiserConfig
from .training import TrainConfig, apply_style_dropout, lr_at

# alpha_cum at n = 100 for the default 100-step linear schedule, computed once with
# mpmath at 50 digits directly from prod sqrt(1 - beta_i)
ALPHA_CUM_100 = 0.2797039785592410

# The default schedule stops at alpha_cum ~ 0.28, so x_N is not standard normal and
# sampling from N(0, I) cannot land exactly on the target. The oracle checks use a
# schedule whose terminal marginal is N(0, I) to within 1e-4.
ORACLE_SCHEDULE = (1000, 1e-4, 0.02)

RECOVERY_TARGETS = ((0.0, 1.0), (2.0, 1.0), (-1.0, 0.25), (0.5, 4.0), (3.0, 0.5))
POE_GAMMAS = (0.0, 0.25, 0.5, 1.0, 1.25)
GUIDANCE_GAMMAS = (0.0, 0.5, 1.0, 1.5, 2.0)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.suite}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(suite, name, fn) -> Check:
    t0 = time.perf_counter()
    passed, detail = fn()
    return Check(suite, name, bool(passed), detail, time.perf_counter() - t0)


def oracle_schedule():
    return build_schedule(*ORACLE_SCHEDULE)


def suite_schedule() -> list:
    sched = build_schedule()

    def identity():
        err = float(np.max(np.abs(sched.alpha_cum**2 + sched.beta_cum**2 - 1.0)))
        return err <= 1e-12, f"max |a~^2 + b~^2 - 1| = {err:.3e}"

    def pin():
        v = float(sched.alpha_cum[99])
        return abs(v - ALPHA_CUM_100) <= 1e-6, f"alpha_cum[100] = {v:.16f} (pinned {ALPHA_CUM_100})"

    return [_timed("schedule", "variance preservation", identity), _timed("schedule", "alpha_cum_100 pin", pin)]


def suite_guidance(n_trials: int = 100, seed: int = 0) -> list:
    gen = torch.Generator().manual_seed(seed)

    def identities():
        for _ in range(n_trials):
            shape = tuple(torch.randint(1, 9, (3,), generator=gen).tolist())
            eu = torch.randn(shape, generator=gen, dtype=torch.float64)
            ec = torch.randn(shape, generator=gen, dtype=torch.float64)
            if not torch.equal(guided_epsilon(eu, ec, 0.0), eu):
                return False, "gamma=0 differs from the unconditional prediction"
            if not torch.equal(guided_epsilon(eu, ec, 1.0), ec):
                return False, "gamma=1 differs from the conditional prediction"
        return True, f"{n_trials} random tensor pairs bitwise equal"

    return [_timed("guidance", "gamma 0/1 identities", identities)]


def suite_gauss(n_samples: int = 10_000, seed: int = 0) -> list:
    sched = oracle_schedule()
    out = []
    for i, (m, v) in enumerate(RECOVERY_TARGETS):
        def run(m=m, v=v, i=i):
            rep = verify_recovery(GaussianExpert(m, v), sched, n_samples, seed + i)
            return rep.passed, str(rep)

        out.append(_timed("gauss", f"recover N({m:g}, {v:g})", run))
    return out


def suite_poe(n_samples: int = 10_000, seed: int = 0) -> list:
    sched = oracle_schedule()
    g1, g2 = GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 1.0)
    out = []
    for i, gamma in enumerate(POE_GAMMAS):
        def run(gamma=gamma, i=i):
            rep = verify_poe_sampling(g1, g2, gamma, sched, n_samples, seed + i)
            return rep.passed, str(rep)

        out.append(_timed("poe", f"gamma={gamma:g}", run))

    def monotone():
        d = guidance_displacements(g1, g2, GUIDANCE_GAMMAS, sched, n_samples, seed)
        ok = all(b > a for a, b in zip(d, d[1:]))
        return ok, "displacements " + ", ".join(f"{g:g}:{x:.4f}" for g, x in zip(GUIDANCE_GAMMAS, d))

    out.append(_timed("poe", "guidance displacement monotone", monotone))
    return out


def suite_lr() -> list:
    cfg = TrainConfig()

    def pins():
        a, b = lr_at(10_000, cfg), lr_at(10_010, cfg)
        ok = a == 1e-4 and b / a == 1 - 0.5e-5 and lr_at(5_000, cfg) == 0.5e-4
        return ok, f"lr(10000)={a!r} lr(10010)/lr(10000)={b / a!r}"

    return [_timed("lr", "warmup and decay pins", pins)]


def suite_dropout(n_sequences: int = 100_000, seed: int = 0) -> list:
    def rate():
        cond = torch.ones(n_sequences, 1, 3)
        out = apply_style_dropout(cond, 2, 0.2, torch.Generator().manual_seed(seed))
        dropped = float((out[:, 0, 1:] == 0).all(dim=1).double().mean())
        audio_ok = bool((out[:, :, 0] == 1).all())
        return abs(dropped - 0.2) <= 0.004 and audio_ok, f"dropped fraction {dropped:.5f}"

    return [_timed("dropout", "style dropout rate", rate)]


def toy_config(**kw) -> DenoiserConfig:
    base = dict(
        input_dim=3, cond_dim=2, n_blocks=2, n_heads=2, attention_width=8,
        feedforward_width=8, step_embed_dim=8, step_hidden=8, max_relative_distance=4,
    )
    base.update(kw)
    return DenoiserConfig(**base)


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> None:
    """Replace every parameter (including zero-initialised ones) with Gaussian noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype))


def gradient_errors(cfg: DenoiserConfig | None = None, frames: int = 8, seed: int = 0, h: float = 1e-6) -> dict:
    """Relative error between autograd and central differences, per parameter tensor."""
    cfg = cfg or toy_config()
    torch.manual_seed(seed)
    model = Denoiser(cfg).double()
    randomize(model, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    sched = build_schedule()
    x0 = torch.randn(2, frames, cfg.input_dim, generator=gen, dtype=torch.float64)
    cond = torch.randn(2, frames, cfg.cond_dim, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, frames, cfg.input_dim, generator=gen, dtype=torch.float64)
    n = torch.tensor([3, 70])
    xn = forward_sample(x0, n, eps, sched)

    def loss():
        return ((eps - model(xn, cond, n)) ** 2).sum()

    model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            numeric = torch.empty_like(analytic)
            flat = p.data.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss())
                flat[i] = orig - h
                down = float(loss())
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
            errors[name] = float((analytic - numeric).norm()) / scale
    return errors


def suite_gradient() -> list:
    def run():
        errs = gradient_errors()
        worst = max(errs, key=errs.get)
        return errs[worst] < 1e-4, f"{len(errs)} parameter tensors, worst {worst} rel err {errs[worst]:.2e}"

    return [_timed("gradient", "finite differences", run)]


def equivariance_errors(seed: int = 0) -> tuple:
    """(circular-mode error, zero-padding interior error) for a toy denoiser."""
    gen = torch.Generator().manual_seed(seed)

    circ = Denoiser(toy_config(padding="circular")).double()
    randomize(circ, seed)
    T, k = 16, 5
    x = torch.randn(T, 3, generator=gen, dtype=torch.float64)
    c = torch.randn(T, 2, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        a = circ(torch.roll(x, k, 0), torch.roll(c, k, 0), 17)
        b = torch.roll(circ(x, c, 17), k, 0)
    circ_err = float((a - b).abs().max())

    cfg = toy_config(attention_window=2)
    zero = Denoiser(cfg).double()
    randomize(zero, seed + 1)
    r = cfg.receptive_radius()
    T, k = 2 * r + 24, 7
    long_x = torch.randn(T + k, 3, generator=gen, dtype=torch.float64)
    long_c = torch.randn(T + k, 2, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        a = zero(long_x[:T], long_c[:T], 17)
        b = zero(long_x[k:k + T], long_c[k:k + T], 17)
    # frame t of the first window is frame t - k of the second; keep frames more than r
    # from both ends of both windows
    lo, hi = r + k, T - r
    zero_err = float((a[lo:hi] - b[lo - k:hi - k]).abs().max())
    return circ_err, zero_err


def suite_equivariance() -> list:
    def run():
        circ, zero = equivariance_errors()
        return circ <= 1e-5 and zero <= 1e-4, f"circular max err {circ:.2e}, zero-padding interior max err {zero:.2e}"

    return [_timed("equivariance", "time-shift commutation", run)]


_ROUNDTRIP_BVH = """HIERARCHY
ROOT Hips
{
\tOFFSET 0.000000 0.000000 0.000000
\tCHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
\tJOINT Spine
\t{
\t\tOFFSET 0.000000 10.500000 0.000000
\t\tCHANNELS 3 Zrotation Xrotation Yrotation
\t\tEnd Site
\t\t{
\t\t\tOFFSET 0.000000 8.250000 0.000000
\t\t}
\t}
}
MOTION
Frames: 2
Frame Time: 0.03333333
1.250000 90.000000 -3.500000 10.000000 -20.000000 30.000000 1.000000 2.000000 3.000000
1.500000 90.125000 -3.250000 12.500000 -22.000000 31.000000 -179.000000 45.000000 0.500000
"""


def suite_roundtrip(seed: int = 0) -> list:
    def bvh():
        skel, motion = parse_bvh(_ROUNDTRIP_BVH)
        text = serialize_bvh(skel, motion)
        _, again = parse_bvh(text)
        err = float(np.max(np.abs(again.values - motion.values)))
        return err <= 1e-4 and text == _ROUNDTRIP_BVH, f"max value error {err:.2e}, text identical {text == _ROUNDTRIP_BVH}"

    def expmap():
        rng = np.random.default_rng(seed)
        axes = rng.normal(size=(10_000, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        r = axes * rng.uniform(0, math.pi, size=(10_000, 1))
        R = rot.expmap_to_matrix(r)
        err_r = float(np.max(np.abs(rot.matrix_to_expmap(R) - r)))
        err_m = float(np.max(np.abs(rot.expmap_to_matrix(rot.matrix_to_expmap(R)) - R)))
        return max(err_r, err_m) <= 1e-9, f"expmap err {err_r:.2e}, matrix err {err_m:.2e}"

    return [_timed("roundtrip", "bvh", bvh), _timed("roundtrip", "expmap/matrix", expmap)]


SUITES = {
    "schedule": suite_schedule,
    "guidance": suite_guidance,
    "gauss": suite_gauss,
    "poe": suite_poe,
    "lr": suite_lr,
    "dropout": suite_dropout,
    "gradient": suite_gradient,
    "equivariance": suite_equivariance,
    "roundtrip": suite_roundtrip,
}


def resolve(selector: str) -> list:
    """Comma-separated suite names, or ``all``. Raises KeyError on unknown names."""
    names = [s.strip() for s in selector.split(",") if s.strip()]
    if names == ["all"]:
        return list(SUITES)
    unknown = [s for s in names if s not in SUITES]
    if unknown or not names:
        raise KeyError(f"unknown suite(s) {unknown or [selector]}; choose from {sorted(SUITES)} or 'all'")
    return names


def run_suites(names) -> list:
    checks = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks
