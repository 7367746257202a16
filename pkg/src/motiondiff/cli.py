"""Command-line entry points: prepare, train, sample, verify.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 verification failure.

Config files are YAML (JSON also parses) with optional sections ``data``, ``model``,
``train`` and ``sample``, plus ``preset`` naming a dataset-length preset. Command-line
flags override the matching config keys; the merged config's digest goes into the run
manifest written beside every command's outputs.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import logging
import os
import sys

import numpy as np
import torch
import yaml

from . import __version__
from .audio import AudioConfig, FeatureMatrix, align, dance_features, mfcc, read_feature_csv, read_wav
from .bvh import parse_bvh, write_bvh
from .checkpoint import Checkpoint, digest
from .diffusion import ConditioningSequence, GuidanceSpec, build_schedule, sample
from .errors import ConfigurationError, ContractError, DataError, EvaluationFault, ParseError, TrainingFault
from .model import DenoiserConfig
from .motion import Normalizer, PoseLayout, features_to_motion
from .store import DataConfig, load_store, prepare_store, style_vector, training_windows, write_json
from .training import PRESETS, TrainConfig, Trainer, TrainingSet, model_from_checkpoint
from . import verify as verify_mod

log = logging.getLogger("motiondiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    unknown = set(cfg) - {"data", "model", "train", "sample", "preset"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def merged_train_config(cfg: dict) -> TrainConfig:
    values = {}
    if cfg.get("preset") is not None:
        if cfg["preset"] not in PRESETS:
            raise ConfigurationError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[cfg["preset"]])
    values.update(cfg.get("train") or {})
    return TrainConfig.from_dict(values)


def parse_gammas(text: str) -> list:
    try:
        return [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gamma takes a number or comma-separated numbers, got {text!r}") from None


def write_manifest(out_dir, command, config, seed, inputs, outputs, started) -> None:
    write_json(os.path.join(out_dir, MANIFEST), {
        "command": command,
        "config": config,
        "config_digest": digest(config),
        "seed": seed,
        "inputs": [os.fspath(p) for p in inputs],
        "outputs": sorted(os.fspath(p) for p in outputs),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    })


def cmd_prepare(data_dir, out_dir, config: dict | None = None) -> dict:
    started = _now()
    config = copy.deepcopy(config or {})
    data_cfg = DataConfig.from_dict(config.get("data") or {})
    train_cfg = merged_train_config(config)
    config["data"] = data_cfg.to_dict()
    os.makedirs(out_dir, exist_ok=True)
    index = prepare_store(data_dir, out_dir, data_cfg, train_cfg.window, train_cfg.hop)
    outputs = ["store.json"] + [f"items/{it['name']}.{k}.npy" for it in index["items"] for k in ("pose", "cond")]
    write_manifest(out_dir, "prepare", config, None, [data_dir], outputs, started)
    for it in index["items"]:
        print(
            f"{it['name']}: {it['frames']} frames at {index['data']['frame_rate']:g} Hz "
            f"(source {it['source_frame_rate']:g} Hz), {it['windows']} windows, "
            f"{it['dropped_tail_frames']} tail frames dropped"
        )
    for s in index["skipped"]:
        print(f"skipped {s['file']}: {s['reason']}")
    return index


def cmd_train(store_dir, out_dir, config: dict | None = None, seed: int | None = None, resume=None) -> Checkpoint:
    started = _now()
    config = copy.deepcopy(config or {})
    if seed is not None:
        config.setdefault("train", {})["seed"] = seed
    train_cfg = merged_train_config(config)
    index, arrays = load_store(store_dir)
    poses, conds = training_windows(index, arrays, train_cfg.window, train_cfg.hop)
    style_width = len(index["style_labels"])
    meta = {
        "frame_rate": index["data"]["frame_rate"],
        "conditioning": index["data"]["conditioning"],
        "n_mfcc": index["data"]["n_mfcc"],
        "skeleton_bvh": index["skeleton_bvh"],
        "layout": index["layout"],
        "pose_norm": index["pose_norm"],
        "cond_norm": index["cond_norm"],
        "cond_columns": index["cond_columns"],
        "style_labels": index["style_labels"],
    }
    data = TrainingSet(torch.from_numpy(poses).float(), torch.from_numpy(conds).float(), style_width, meta)
    model_cfg = DenoiserConfig(input_dim=data.pose_dim, cond_dim=data.cond_dim, **(config.get("model") or {}))
    config["train"] = train_cfg.to_dict()
    config["model"] = model_cfg.to_dict()
    resume_ckpt = Checkpoint.load(resume) if resume else None
    trainer = Trainer(data, train_cfg, model_cfg, resume_ckpt)
    os.makedirs(out_dir, exist_ok=True)
    outputs, last = set(), None
    loss_path = os.path.join(out_dir, "loss.csv")

    def write_loss():
        with open(loss_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,loss,lr\n")
            for step, loss, lr in trainer.history:
                fh.write(f"{step},{loss!r},{lr!r}\n")
        outputs.add("loss.csv")

    try:
        for ckpt in trainer.run():
            name = f"ckpt_{ckpt.step:08d}.ckpt"
            ckpt.save(os.path.join(out_dir, name))
            ckpt.save(os.path.join(out_dir, "last.ckpt"))
            outputs.update([name, "last.ckpt"])
            write_loss()
            last = ckpt
            if trainer.history:
                print(f"step {ckpt.step}: loss {trainer.history[-1][1]:.6f} lr {trainer.history[-1][2]:.3e}")
    finally:
        write_loss()
        inputs = [store_dir] + ([resume] if resume else [])
        write_manifest(out_dir, "train", config, train_cfg.seed, inputs, outputs, started)
    return last


class PairedDenoiser:
    """Two networks in the roles of one: zero-style inputs go to ``uncond``, the rest to ``cond``."""

    def __init__(self, cond, uncond, style_width: int):
        self.cond, self.uncond, self.style_width = cond, uncond, style_width

    def __call__(self, x, c, n):
        if self.style_width == 0:
            return self.cond(x, c, n)
        blank = (c[..., c.shape[-1] - self.style_width:] == 0).flatten(1).all(dim=1)
        out = torch.empty_like(x)
        if blank.any():
            out[blank] = self.uncond(x[blank], c[blank], n[blank])
        if (~blank).any():
            out[~blank] = self.cond(x[~blank], c[~blank], n[~blank])
        return out


def _resolve_style(name: str, labels: list) -> str:
    if name in labels:
        return name
    if name.lstrip("-").isdigit() and 0 <= int(name) < len(labels):
        return labels[int(name)]
    raise ConfigurationError(f"unknown style {name!r}; available: {', '.join(labels) or '(none)'}")


def _sample_conditioning(meta: dict, inputs: list, frames: int | None) -> np.ndarray:
    rate = meta["frame_rate"]
    mode = meta["conditioning"]
    if not inputs:
        raise UsageError("sample needs an input: a WAV file, a feature CSV, or a path-control CSV")
    first = inputs[0]
    if first.endswith(".csv"):
        fm = read_feature_csv(first)
    elif mode == "path":
        raise UsageError("path-conditioned checkpoints take a path-control CSV input")
    else:
        acfg = AudioConfig(frame_rate=rate)
        wav = read_wav(first)
        if mode == "mfcc":
            fm = mfcc(wav, meta["n_mfcc"], acfg)
        else:
            if len(inputs) < 2:
                raise UsageError("dance checkpoints need a WAV file and a beat CSV")
            fm = dance_features(wav, read_feature_csv(inputs[1]), acfg)
    if list(fm.columns) != list(meta["cond_columns"]):
        raise DataError(f"input columns {fm.columns} do not match the checkpoint's {meta['cond_columns']}")
    if frames is None:
        frames = int(round(fm.n_frames * rate / fm.frame_rate))
    if frames < 1:
        raise UsageError("--frames must be positive")
    # a shorter request crops the input; a longer one must still fit within align's tolerance
    keep = int(np.ceil(frames * fm.frame_rate / rate))
    if keep < fm.n_frames:
        fm = FeatureMatrix(fm.frames[:keep], fm.frame_rate, list(fm.columns))
    return align(fm, rate, frames).frames


def cmd_sample(
    checkpoint,
    inputs: list,
    out_dir,
    style: str | None = None,
    styles: str | None = None,
    gammas: list | None = None,
    temperature: float = 1.0,
    frames: int | None = None,
    seed: int = 0,
    config: dict | None = None,
) -> list:
    """Write one BVH per guidance strength; returns the output paths."""
    started = _now()
    paths = checkpoint.split(",") if isinstance(checkpoint, str) else list(checkpoint)
    ckpts = [Checkpoint.load(p) for p in paths]
    if len(ckpts) > 2:
        raise UsageError("--checkpoint takes one checkpoint, or a conditional and an unconditional one")
    ckpt = ckpts[0]
    meta = ckpt.header["data"]
    labels = meta["style_labels"]
    style_width = len(labels)
    model = model_from_checkpoint(ckpt)
    denoiser = PairedDenoiser(model, model_from_checkpoint(ckpts[1]), style_width) if len(ckpts) == 2 else model
    if not temperature > 0:
        raise ConfigurationError("--temperature must be positive")

    if style and styles:
        raise UsageError("give either --style or --styles, not both")
    specs, fixed_style = [], None
    if styles:
        names = [_resolve_style(s.strip(), labels) for s in styles.split(",")]
        if len(names) != 2:
            raise UsageError("--styles takes exactly two labels")
        if not gammas:
            raise UsageError("--styles needs --gamma (the weight of the second style)")
        s1, s2 = (tuple(style_vector(n, labels)) for n in names)
        specs = [(g, GuidanceSpec.interpolate(s1, s2, g, temperature)) for g in gammas]
    elif style:
        vec = tuple(style_vector(_resolve_style(style, labels), labels))
        if gammas:
            specs = [(g, GuidanceSpec("guided", g, (vec,))) for g in gammas]
        else:
            fixed_style = vec
            specs = [(None, GuidanceSpec("conditional"))]
    else:
        if gammas:
            raise UsageError("--gamma needs --style or --styles")
        specs = [(None, GuidanceSpec("unconditional" if style_width else "conditional"))]

    raw = _sample_conditioning(meta, inputs, frames)
    n_frames = len(raw)
    cond_norm = Normalizer.from_dict(meta["cond_norm"])
    base = np.concatenate([cond_norm.normalize(raw), np.zeros((n_frames, style_width))], axis=1)
    if fixed_style is not None:
        base[:, base.shape[1] - style_width:] = fixed_style
    cond = ConditioningSequence(torch.from_numpy(base).float(), base.shape[1] - style_width, style_width)

    skel, _ = parse_bvh(meta["skeleton_bvh"])
    layout = PoseLayout.from_dict(meta["layout"])
    pose_norm = Normalizer.from_dict(meta["pose_norm"])
    sched = ckpt_schedule(ckpt)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for i, (gamma, spec) in enumerate(specs):
        gen = torch.Generator().manual_seed(int(seed))
        x = sample(denoiser, cond, n_frames, model.cfg.input_dim, sched, spec, gen)
        feats = pose_norm.denormalize(x.double().numpy())
        if meta["conditioning"] == "path":
            # the requested trajectory drives the root, not the network's own estimate
            feats[:, 1:4] = raw
        motion = features_to_motion(feats, skel, layout, 1.0 / meta["frame_rate"])
        name = "sample.bvh" if len(specs) == 1 else f"sample_{i:02d}_gamma{gamma:+.3f}.bvh"
        write_bvh(os.path.join(out_dir, name), skel, motion)
        outputs.append(os.path.join(out_dir, name))
    record = dict(copy.deepcopy(config or {}))
    record["sample"] = {
        "style": style, "styles": styles, "gamma": gammas, "temperature": temperature,
        "frames": n_frames, "seed": seed, "checkpoints": [c.header["config_digest"] for c in ckpts],
    }
    write_manifest(out_dir, "sample", record, seed, paths + list(inputs), [os.path.basename(p) for p in outputs], started)
    return outputs


def ckpt_schedule(ckpt: Checkpoint):
    s = ckpt.header["schedule"]
    return build_schedule(s["n_steps"], s["beta_start"], s["beta_end"])


def cmd_verify(selector: str, out_dir=None) -> bool:
    started = _now()
    try:
        names = verify_mod.resolve(selector)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    checks = []
    for name in names:
        for check in verify_mod.SUITES[name]():
            print(check, flush=True)
            checks.append(check)
    passed = all(c.passed for c in checks)
    summary = {"passed": passed, "suites": names, "checks": [c.to_dict() for c in checks]}
    print(f"{'PASS' if passed else 'FAIL'}: {sum(c.passed for c in checks)}/{len(checks)} checks passed")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "verify.json"), summary)
        write_manifest(out_dir, "verify", {"suite": selector}, None, [], ["verify.json"], started)
    return passed


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motiondiff", description="Audio-driven motion diffusion: prepare, train, sample, verify.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("prepare", help="build a feature store from paired BVH and audio files")
    sp.add_argument("data_dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")

    sp = sub.add_parser("train", help="train a denoiser on a feature store")
    sp.add_argument("store")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint", help="resume from this checkpoint")

    sp = sub.add_parser("sample", help="generate motion as BVH")
    sp.add_argument("inputs", nargs="+", help="WAV (plus beat CSV for dance), or a feature / path-control CSV")
    sp.add_argument("--checkpoint", required=True, help="checkpoint, or COND,UNCOND for a separate unconditional model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--style")
    sp.add_argument("--styles", help="two labels to interpolate between, e.g. old,angry")
    sp.add_argument("--gamma", help="guidance strength or interpolation weight; comma-separated for a sweep")
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--frames", type=int)

    sp = sub.add_parser("verify", help="run self-check suites")
    sp.add_argument("--suite", default="all", help=f"comma-separated from {', '.join(verify_mod.SUITES)}, or all")
    sp.add_argument("--out")
    return p


def _run(args) -> int:
    config = load_config(getattr(args, "config", None))
    if args.command == "prepare":
        cmd_prepare(args.data_dir, args.out, config)
    elif args.command == "train":
        cmd_train(args.store, args.out, config, args.seed, args.checkpoint)
    elif args.command == "sample":
        opts = dict(config.get("sample") or {})
        unknown = set(opts) - {"style", "styles", "gamma", "temperature", "frames", "seed"}
        if unknown:
            raise ConfigurationError(f"unknown sample config keys: {sorted(unknown)}")
        for key in ("style", "styles", "gamma", "temperature", "frames", "seed"):
            if getattr(args, key) is not None:
                opts[key] = getattr(args, key)
        gamma = opts.get("gamma")
        gammas = parse_gammas(gamma) if isinstance(gamma, str) else ([float(gamma)] if gamma is not None else None)
        cmd_sample(
            args.checkpoint, args.inputs, args.out,
            style=None if opts.get("style") is None else str(opts["style"]),
            styles=opts.get("styles"), gammas=gammas, temperature=float(opts.get("temperature", 1.0)),
            frames=opts.get("frames"), seed=int(opts.get("seed", 0)), config=config,
        )
    elif args.command == "verify":
        return EXIT_OK if cmd_verify(args.suite, args.out) else EXIT_VERIFY
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, FileNotFoundError, EvaluationFault, TrainingFault) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
