import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from motiondiff.checkpoint import Checkpoint
from motiondiff.diffusion import training_loss
from motiondiff.errors import ConfigurationError, TrainingFault
from motiondiff.model import Denoiser, DenoiserConfig
from motiondiff.training import (
    PRESETS,
    TrainConfig,
    Trainer,
    TrainingSet,
    apply_style_dropout,
    load_params,
    lr_at,
    model_from_checkpoint,
    step_generator,
    train,
)

TINY = DenoiserConfig(
    input_dim=1, cond_dim=1, n_blocks=2, layers_per_block=1, n_heads=2, attention_width=8,
    feedforward_width=16, step_embed_dim=8, step_hidden=16, max_relative_distance=4,
)


def gaussian_set(n=64, frames=8, mean=1.5, std=0.5, seed=0):
    g = torch.Generator().manual_seed(seed)
    poses = mean + std * torch.randn(n, frames, 1, generator=g)
    return TrainingSet(poses, torch.zeros(n, frames, 1), meta={"dataset": "gaussian"})


# learning rate

def test_lr_pins():
    cfg = TrainConfig()
    assert lr_at(10_000, cfg) == 1e-4
    assert lr_at(5_000, cfg) == pytest.approx(0.5e-4, rel=1e-15)
    assert lr_at(10_010, cfg) == pytest.approx(1e-4 * (1 - 0.5e-5), rel=1e-15)
    assert lr_at(10_009, cfg) == 1e-4
    assert lr_at(0, cfg) == 0.0


def test_lr_continuous_and_monotone():
    cfg = TrainConfig(warmup_steps=100, decay_factor=0.01, decay_interval=3)
    assert lr_at(99, cfg) == pytest.approx(cfg.lr_max, rel=0.011)
    values = [lr_at(s, cfg) for s in range(100, 1000)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert all(b >= a for a, b in zip([lr_at(s, cfg) for s in range(101)], [lr_at(s, cfg) for s in range(1, 101)]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**7))
def test_lr_deterministic(step):
    cfg = TrainConfig()
    assert lr_at(step, cfg) == lr_at(step, cfg)
    assert 0.0 <= lr_at(step, cfg) <= cfg.lr_max


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(style_dropout=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_max=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"lr": 1.0})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
    assert set(PRESETS) == {"trinity", "zeggs", "dance", "locomotion"}


# style dropout

def test_dropout_p0_and_p1():
    cond = torch.rand(5, 7, 6) + 0.1
    assert torch.equal(apply_style_dropout(cond, 2, 0.0), cond)
    out = apply_style_dropout(cond, 2, 1.0)
    assert torch.equal(out[..., 4:], torch.zeros(5, 7, 2))
    assert torch.equal(out[..., :4], cond[..., :4])
    with pytest.raises(ConfigurationError):
        apply_style_dropout(cond, 2, 1.1)


def test_dropout_rate_and_whole_sequences():
    cond = torch.ones(100_000, 3, 3)
    out = apply_style_dropout(cond, 2, 0.2, torch.Generator().manual_seed(0))
    style = out[..., 1:]
    per_seq = style.sum(dim=(1, 2))
    # each sequence is either untouched or fully zeroed
    assert set(per_seq.unique().tolist()) <= {0.0, 6.0}
    assert torch.equal(out[..., 0], cond[..., 0])
    frac = float((per_seq == 0).float().mean())
    assert abs(frac - 0.2) <= 0.004


def test_step_generator_is_seeded_by_seed_and_step():
    a = torch.rand(3, generator=step_generator(1, 5))
    assert torch.equal(a, torch.rand(3, generator=step_generator(1, 5)))
    assert not torch.equal(a, torch.rand(3, generator=step_generator(1, 6)))
    assert not torch.equal(a, torch.rand(3, generator=step_generator(2, 5)))


# training loop

def _fixed_loss(model, data, cfg):
    g = torch.Generator().manual_seed(1234)
    with torch.no_grad():
        return float(training_loss(model, data.poses, data.conds, cfg.schedule(), generator=g))


def test_gaussian_smoke_200_steps():
    data = gaussian_set()
    cfg = TrainConfig(lr_max=1e-2, warmup_steps=20, batch_size=16, total_steps=200, checkpoint_every=200, seed=0)
    ckpts = list(train(data, cfg, TINY))
    assert [c.step for c in ckpts] == [0, 200]
    before = _fixed_loss(model_from_checkpoint(ckpts[0]), data, cfg)
    after = _fixed_loss(model_from_checkpoint(ckpts[-1]), data, cfg)
    assert after < before


def test_total_steps_zero_emits_initial_checkpoint_only():
    ckpts = list(train(gaussian_set(), TrainConfig(total_steps=0), TINY))
    assert len(ckpts) == 1 and ckpts[0].step == 0


def test_checkpoint_cadence():
    cfg = TrainConfig(total_steps=7, checkpoint_every=3, batch_size=4)
    assert [c.step for c in train(gaussian_set(), cfg, TINY)] == [0, 3, 6, 7]


def test_resume_matches_uninterrupted_run():
    data = gaussian_set()
    cfg = TrainConfig(lr_max=1e-2, warmup_steps=5, batch_size=8, total_steps=12, checkpoint_every=6, seed=3)
    full = Trainer(data, cfg, TINY)
    ckpts = list(full.run())
    mid = next(c for c in ckpts if c.step == 6)

    resumed = Trainer(data, cfg, TINY, resume=Checkpoint.from_bytes(mid.to_bytes()))
    assert resumed.step == 6
    for name, p in resumed.model.named_parameters():
        state = resumed.opt.state[p]
        assert np.array_equal(state["exp_avg"].numpy(), mid.tensors[f"adam.exp_avg/{name}"])
    for _ in resumed.run():
        pass
    # every post-resume loss, including the first, is bitwise equal
    assert [h[1] for h in resumed.history] == [h[1] for h in full.history[6:]]
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)


def test_training_is_bit_reproducible():
    cfg = TrainConfig(lr_max=1e-2, warmup_steps=5, batch_size=8, total_steps=10, seed=7)
    a, b = list(train(gaussian_set(), cfg, TINY)), list(train(gaussian_set(), cfg, TINY))
    assert a[-1].to_bytes() == b[-1].to_bytes()


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    cfg = TrainConfig(total_steps=3, batch_size=4)
    ckpt = list(train(gaussian_set(), cfg, TINY))[-1]
    ckpt.save(tmp_path / "a.ckpt")
    Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert ckpt.header["config_digest"]
    assert ckpt.header["schedule"]["n_steps"] == 100


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(8))
    good = list(train(gaussian_set(), TrainConfig(total_steps=0), TINY))[0].to_bytes()
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(good + b"\0")


def test_nonfinite_loss_aborts_and_keeps_last_checkpoint():
    data = gaussian_set()
    cfg = TrainConfig(total_steps=10, checkpoint_every=2, batch_size=4)
    trainer = Trainer(data, cfg, TINY)
    kept = []
    with pytest.raises(TrainingFault) as info:
        for ckpt in trainer.run():
            kept.append(ckpt)
            if ckpt.step == 4:
                trainer.data.poses[:] = float("nan")
    assert info.value.step == 4
    assert kept[-1].step == 4
    assert all(np.isfinite(v).all() for v in kept[-1].params().values())


def test_dataset_width_must_match_model():
    with pytest.raises(ConfigurationError):
        Trainer(gaussian_set(), TrainConfig(), DenoiserConfig(**{**TINY.to_dict(), "input_dim": 2}))
    with pytest.raises(ConfigurationError):
        TrainingSet(torch.zeros(0, 4, 1), torch.zeros(0, 4, 1))


def test_load_params_mismatch():
    ckpt = list(train(gaussian_set(), TrainConfig(total_steps=0), TINY))[0]
    other = Denoiser(DenoiserConfig(**{**TINY.to_dict(), "n_blocks": 3}))
    with pytest.raises(ConfigurationError, match="missing"):
        load_params(other, ckpt)
    wider = Denoiser(DenoiserConfig(**{**TINY.to_dict(), "feedforward_width": 32}))
    with pytest.raises(ConfigurationError, match="shape"):
        load_params(wider, ckpt)
