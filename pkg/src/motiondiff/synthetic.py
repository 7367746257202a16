"""Synthetic data for smoke tests and demos.

``sinusoid_set`` is a two-style toy problem: the "audio" channel is a sinusoid with
random frequency and phase, and the pose follows it in phase (style 0) or in
antiphase (style 1). ``write_demo_corpus`` writes a small directory of paired BVH and
WAV files with a ``styles.json`` map, enough to exercise prepare/train/sample.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import Waveform, write_wav
from .bvh import Joint, MotionChannels, Skeleton, write_bvh
from .diffusion import ConditioningSequence, GuidanceSpec, sample
from .model import DenoiserConfig
from .training import TrainConfig, Trainer, TrainingSet


def sinusoid_batch(
    n_seq: int, frames: int, rng: np.random.Generator, styles=None, noise: float = 0.1, purity: float = 1.0,
):
    """(audio (n, T), style index (n,), pose (n, T)) with pose = +-audio + noise.

    With probability ``purity`` the sign follows the style (+ for style 0), otherwise
    it is flipped.
    """
    styles = rng.integers(0, 2, n_seq) if styles is None else np.asarray(styles)
    omega = rng.uniform(0.3, 0.8, (n_seq, 1))
    phase = rng.uniform(0.0, 2 * np.pi, (n_seq, 1))
    audio = np.sin(omega * np.arange(frames) + phase)
    keep = rng.uniform(size=n_seq) < purity
    sign = np.where((styles == 0) == keep, 1.0, -1.0)[:, None]
    pose = sign * audio + noise * rng.standard_normal((n_seq, frames))
    return audio, styles, pose


def sinusoid_cond(audio: np.ndarray, styles) -> torch.Tensor:
    """Conditioning ``[audio ; one-hot style]``; a style of None gives the zero sentinel."""
    n, T = audio.shape
    cond = np.zeros((n, T, 3))
    cond[..., 0] = audio
    for i, s in enumerate(styles):
        if s is not None:
            cond[i, :, 1 + int(s)] = 1.0
    return torch.from_numpy(cond).float()


def sinusoid_set(
    n_seq: int = 512, frames: int = 32, seed: int = 0, noise: float = 0.1, purity: float = 1.0,
) -> TrainingSet:
    rng = np.random.default_rng(seed)
    audio, styles, pose = sinusoid_batch(n_seq, frames, rng, noise=noise, purity=purity)
    return TrainingSet(
        torch.from_numpy(pose[..., None]).float(),
        sinusoid_cond(audio, styles),
        style_width=2,
        meta={"dataset": "sinusoid", "n_seq": n_seq, "frames": frames, "seed": seed, "noise": noise,
              "purity": purity},
    )


def phase_statistic(pose: np.ndarray, audio: np.ndarray) -> np.ndarray:
    """Least-squares gain of pose on audio per sequence: +1 in phase, -1 in antiphase."""
    pose = np.asarray(pose).reshape(audio.shape)
    return (pose * audio).sum(axis=-1) / (audio * audio).sum(axis=-1)


SMOKE_MODEL = dict(
    input_dim=1, cond_dim=3, n_blocks=3, layers_per_block=1, n_heads=2, attention_width=32,
    feedforward_width=64, step_embed_dim=32, step_hidden=64, max_relative_distance=16,
)


@dataclass
class SmokeResult:
    initial_loss: float
    final_loss: float
    # least-squares slope of the per-block mean loss against block index
    trend: float
    # gamma -> (mean phase statistic for style 0, for style 1)
    phase: dict = field(default_factory=dict)
    train_seconds: float = 0.0
    total_seconds: float = 0.0

    def separation(self, gamma: float) -> float:
        s0, s1 = self.phase[gamma]
        return s0 - s1

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss, "final_loss": self.final_loss, "trend": self.trend,
            "phase": {str(g): list(v) for g, v in self.phase.items()},
            "separation": {str(g): self.separation(g) for g in self.phase},
            "train_seconds": self.train_seconds, "total_seconds": self.total_seconds,
        }


def smoke_learning(
    steps: int = 5000, n_seq: int = 512, frames: int = 32, purity: float = 0.85, gammas=(1.0, 2.0),
    n_eval: int = 200, seed: int = 0, progress=None,
) -> SmokeResult:
    """Train the tiny denoiser on the sinusoid task, then measure guided phase statistics.

    ``purity`` below one leaves each style with a minority of flipped sequences, so the
    conditional is a two-mode mixture that guidance can sharpen.
    """
    t0 = time.perf_counter()
    data = sinusoid_set(n_seq, frames, seed=seed, purity=purity)
    tc = TrainConfig(lr_max=2e-3, warmup_steps=200, batch_size=32, total_steps=steps,
                     checkpoint_every=max(steps, 1), seed=seed)
    trainer = Trainer(data, tc, DenoiserConfig(**SMOKE_MODEL))
    for _ in trainer.run():
        if progress is not None:
            progress(trainer.step)
    train_seconds = time.perf_counter() - t0
    losses = np.array([h[1] for h in trainer.history])
    head, tail = min(50, len(losses)), min(200, len(losses))
    blocks = np.array([b.mean() for b in np.array_split(losses, 10)])
    trend = float(np.polyfit(np.arange(len(blocks)), blocks, 1)[0])
    result = SmokeResult(float(losses[:head].mean()), float(losses[-tail:].mean()), trend,
                         train_seconds=train_seconds)

    model = trainer.model.eval()
    sched = tc.schedule()
    audio, _, _ = sinusoid_batch(n_eval, frames, np.random.default_rng(seed + 1))
    cond = ConditioningSequence(sinusoid_cond(audio, [None] * n_eval), 1, 2)
    for gamma in gammas:
        means = []
        for style in ((1.0, 0.0), (0.0, 1.0)):
            spec = GuidanceSpec("guided", gamma, (style,))
            x = sample(model, cond, frames, 1, sched, spec, torch.Generator().manual_seed(seed + 7))
            means.append(float(phase_statistic(x.numpy()[..., 0], audio).mean()))
        result.phase[float(gamma)] = tuple(means)
    result.total_seconds = time.perf_counter() - t0
    return result


def demo_skeleton() -> Skeleton:
    z = np.zeros(3)
    joints = [
        Joint("Hips", None, z.copy(), ["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"]),
        Joint("Spine", 0, np.array([0.0, 10.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"]),
        Joint("Head", 1, np.array([0.0, 15.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"], np.array([0.0, 8.0, 0.0])),
        Joint("RightArm", 1, np.array([-8.0, 12.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"]),
        Joint("RightHand", 3, np.array([-12.0, 0.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"]),
        Joint("RightHandIndex1", 4, np.array([-3.0, 0.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"],
              np.array([-2.0, 0.0, 0.0])),
        Joint("LeftArm", 1, np.array([8.0, 12.0, 0.0]), ["Zrotation", "Xrotation", "Yrotation"],
              np.array([12.0, 0.0, 0.0])),
    ]
    return Skeleton(joints)


def demo_motion(seconds: float, rate: float, sign: float, rng: np.random.Generator) -> MotionChannels:
    """Slow walk forward with arm swing whose phase follows the audio envelope."""
    t = np.arange(int(round(seconds * rate))) / rate
    skel = demo_skeleton()
    values = np.zeros((len(t), skel.n_channels))
    env = np.sin(2 * np.pi * 0.5 * t)
    values[:, 0] = 5.0 * np.sin(0.3 * t)
    values[:, 1] = 90.0 + 0.5 * np.sin(2 * np.pi * t)
    values[:, 2] = 20.0 * t
    values[:, 5] = 15.0 * np.sin(0.3 * t)  # yaw
    for col in range(6, values.shape[1]):
        values[:, col] = sign * 20.0 * env * np.cos(col) + rng.normal(0, 0.5, len(t))
    return MotionChannels(1.0 / rate, values)


def demo_audio(seconds: float, sample_rate: int, tone_hz: float, rng: np.random.Generator) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    env = 0.5 + 0.5 * np.sin(2 * np.pi * 0.5 * t)
    x = 0.3 * env * np.sin(2 * np.pi * tone_hz * t) + 0.01 * rng.standard_normal(len(t))
    return Waveform(x, sample_rate)


def write_demo_corpus(
    directory, n_items: int = 4, seconds: float = 6.0, seed: int = 0,
    motion_rate: float = 60.0, sample_rate: int = 16_000, styles=("calm", "lively"),
) -> list:
    """Write ``take<i>.bvh``/``take<i>.wav`` pairs plus ``styles.json``; returns the stems."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    skel = demo_skeleton()
    stems, labels = [], {}
    for i in range(n_items):
        stem = f"take{i}"
        label = styles[i % len(styles)] if styles else None
        sign = 1.0 if i % 2 == 0 else -1.0
        tone = float(rng.uniform(200, 600))
        write_bvh(os.path.join(directory, f"{stem}.bvh"), skel, demo_motion(seconds, motion_rate, sign, rng))
        write_wav(os.path.join(directory, f"{stem}.wav"), demo_audio(seconds, sample_rate, tone, rng))
        if label is not None:
            labels[stem] = label
        stems.append(stem)
    if labels:
        with open(os.path.join(directory, "styles.json"), "w", encoding="utf-8") as fh:
            json.dump(labels, fh, indent=1, sort_keys=True)
    return stems
