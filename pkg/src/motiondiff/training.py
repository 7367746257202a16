"""Optimisation loop: learning-rate schedule, style dropout, Adam updates and checkpoints.

Every step draws its randomness from a generator seeded by ``(seed, step)``, so a run
resumed from a checkpoint at step k continues exactly like an uninterrupted run.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .checkpoint import Checkpoint, digest
from .diffusion import NoiseSchedule, TrainingWeighting, build_schedule, training_loss
from .errors import ConfigurationError, EvaluationFault, TrainingFault
from .model import Denoiser, DenoiserConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    warmup_steps: int = 10_000
    decay_factor: float = 0.5e-5
    decay_interval: int = 10
    style_dropout: float = 0.2
    batch_size: int = 32
    total_steps: int = 150_000
    seed: int = 0
    checkpoint_every: int = 5_000
    window: int = 120
    hop: int = 30
    n_diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 5e-2

    def __post_init__(self):
        if not self.lr_max > 0 or not 0 < self.decay_factor < 1:
            raise ConfigurationError("lr_max must be positive and decay_factor in (0, 1)")
        if self.warmup_steps < 0 or self.decay_interval < 1:
            raise ConfigurationError("warmup_steps must be >= 0 and decay_interval >= 1")
        if not 0.0 <= self.style_dropout <= 1.0:
            raise ConfigurationError("style_dropout must lie in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 0 or self.checkpoint_every < 1:
            raise ConfigurationError("batch_size and checkpoint_every must be positive, total_steps >= 0")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.n_diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# optimisation lengths used for the four datasets
PRESETS = {
    "trinity": {"total_steps": 150_000},
    "zeggs": {"total_steps": 100_000},
    "dance": {"total_steps": 200_000},
    "locomotion": {"total_steps": 250_000},
}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr_max``, then ``(1 - decay_factor)`` per ``decay_interval`` steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    return cfg.lr_max * (1.0 - cfg.decay_factor) ** ((step - cfg.warmup_steps) // cfg.decay_interval)


def apply_style_dropout(cond: torch.Tensor, style_width: int, p: float, generator=None) -> torch.Tensor:
    """Zero the style span of whole sequences, each independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1], got {p}")
    if style_width == 0 or p == 0.0:
        return cond
    drop = torch.rand(cond.shape[0], generator=generator) < p
    out = cond.clone()
    out[drop, :, cond.shape[-1] - style_width:] = 0.0
    return out


def step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, step]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


@dataclass
class TrainingSet:
    """Fixed-length training windows. ``meta`` travels into checkpoint headers."""

    poses: torch.Tensor
    conds: torch.Tensor
    style_width: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.poses) == 0:
            raise ConfigurationError("training set is empty")
        if self.poses.shape[:2] != self.conds.shape[:2]:
            raise ConfigurationError("pose and conditioning windows disagree in count or length")

    @property
    def pose_dim(self) -> int:
        return self.poses.shape[-1]

    @property
    def cond_dim(self) -> int:
        return self.conds.shape[-1]


class Trainer:
    def __init__(
        self,
        data: TrainingSet,
        cfg: TrainConfig,
        model_cfg: DenoiserConfig,
        resume: Checkpoint | None = None,
    ):
        if model_cfg.input_dim != data.pose_dim or model_cfg.cond_dim != data.cond_dim:
            raise ConfigurationError(
                f"model expects ({model_cfg.input_dim}, {model_cfg.cond_dim}) features, "
                f"data has ({data.pose_dim}, {data.cond_dim})"
            )
        self.data = data
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.sched = cfg.schedule()
        self.weighting = TrainingWeighting.uniform(self.sched.n_steps)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.model = Denoiser(model_cfg)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8)
        self.step = 0
        self.history: list = []
        if resume is not None:
            self._restore(resume)

    def config_digest(self) -> str:
        return digest({"train": self.cfg.to_dict(), "model": self.model_cfg.to_dict()})

    def checkpoint(self) -> Checkpoint:
        header = {
            "step": self.step,
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "schedule": self.sched.settings(),
            "config_digest": self.config_digest(),
            "data": self.data.meta,
            "style_width": self.data.style_width,
        }
        tensors = {}
        for name, p in self.model.named_parameters():
            tensors[f"param/{name}"] = p.detach().cpu().numpy().astype(np.float32)
        for name, p in self.model.named_parameters():
            state = self.opt.state.get(p)
            if state:
                tensors[f"adam.exp_avg/{name}"] = state["exp_avg"].detach().cpu().numpy().copy()
                tensors[f"adam.exp_avg_sq/{name}"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
        return Checkpoint(header, tensors)

    def _restore(self, ckpt: Checkpoint) -> None:
        load_params(self.model, ckpt)
        self.step = ckpt.step
        for name, p in self.model.named_parameters():
            key = f"adam.exp_avg/{name}"
            if key in ckpt.tensors:
                self.opt.state[p] = {
                    "step": torch.tensor(float(self.step)),
                    "exp_avg": torch.from_numpy(ckpt.tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"adam.exp_avg_sq/{name}"].copy()),
                }

    def train_step(self) -> float:
        gen = step_generator(self.cfg.seed, self.step)
        idx = torch.randint(len(self.data.poses), (self.cfg.batch_size,), generator=gen)
        x0 = self.data.poses[idx]
        cond = apply_style_dropout(self.data.conds[idx], self.data.style_width, self.cfg.style_dropout, gen)
        try:
            loss = training_loss(self.model, x0, cond, self.sched, self.weighting, gen)
        except TrainingFault as exc:
            raise TrainingFault(f"step {self.step}: {exc}", exc.batch_index, self.step) from exc
        except EvaluationFault as exc:
            raise TrainingFault(f"step {self.step}: {exc}", None, self.step) from exc
        lr = lr_at(self.step, self.cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        value = float(loss.detach())
        self.history.append((self.step, value, lr))
        self.step += 1
        return value

    def run(self):
        """Yield checkpoints: the starting state, every ``checkpoint_every`` steps and the end."""
        yield self.checkpoint()
        self.model.train()
        while self.step < self.cfg.total_steps:
            self.train_step()
            if self.step % self.cfg.checkpoint_every == 0 or self.step == self.cfg.total_steps:
                log.info("step %d loss %.5f", self.step, self.history[-1][1])
                yield self.checkpoint()


def train(data: TrainingSet, cfg: TrainConfig, model_cfg: DenoiserConfig, resume: Checkpoint | None = None):
    return Trainer(data, cfg, model_cfg, resume).run()


def load_params(model: Denoiser, ckpt: Checkpoint) -> None:
    params = ckpt.params()
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise ConfigurationError(f"checkpoint parameters do not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigurationError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))


def model_from_checkpoint(ckpt: Checkpoint) -> Denoiser:
    model = Denoiser(DenoiserConfig.from_dict(ckpt.header["model"]))
    load_params(model, ckpt)
    model.eval()
    return model
