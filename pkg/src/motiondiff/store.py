"""Feature store: aligned pose and conditioning arrays for every usable recording.

Layout of a store directory::

    store.json               index: settings, skeleton, layout, normalisers, styles, per-file report
    items/<stem>.pose.npy    raw pose features (T, D), float64
    items/<stem>.cond.npy    raw conditioning features (T, A), float64, same T

Style labels come from an optional ``styles.json`` (``{stem: label}``) in the data
directory. Arrays are stored unnormalised; ``store.json`` carries the statistics,
fitted on every item not listed in ``holdout``. Preparing the same inputs twice gives
byte-identical store files.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import AudioConfig, align, dance_features, mfcc, read_feature_csv, read_wav
from .bvh import MotionChannels, read_bvh, serialize_bvh
from .errors import ConfigurationError, DataError, ParseError
from .motion import (
    Normalizer,
    PoseLayout,
    fixed_pose_from_motion,
    joint_matrices,
    make_path_control,
    make_pose_features,
    resample_motion,
    root_position,
    window_dataset,
)
from . import rotations as rot

log = logging.getLogger(__name__)

STORE_INDEX = "store.json"
CONDITIONING_MODES = ("mfcc", "dance", "path")
PATH_COLUMNS = ["yaw_delta", "forward", "sideways"]


@dataclass
class DataConfig:
    frame_rate: float = 30.0
    # "mfcc": speech MFCCs; "dance": MFCC(5)+flux+chroma+beats; "path": root trajectory control
    conditioning: str = "mfcc"
    n_mfcc: int = 20
    layout: dict = field(default_factory=lambda: {"root": "path"})
    holdout: list = field(default_factory=list)

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if not self.frame_rate > 0:
            raise ConfigurationError("frame_rate must be positive")
        if self.conditioning == "path" and self.layout.get("root", "path") != "path":
            raise ConfigurationError("path conditioning needs layout root 'path'")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def path_control(skel, motion: MotionChannels) -> np.ndarray:
    heading = rot.heading_angle(joint_matrices(skel, motion, skel.joints[0].name))
    return make_path_control(root_position(skel, motion), heading)


def conditioning_features(cfg: DataConfig, data_dir: str, stem: str, skel, motion: MotionChannels):
    """(T, A) conditioning for one recording and its column names, aligned to the motion."""
    if cfg.conditioning == "path":
        return path_control(skel, motion), list(PATH_COLUMNS)
    csv = os.path.join(data_dir, f"{stem}.features.csv")
    if os.path.exists(csv):
        fm = read_feature_csv(csv)
    else:
        acfg = AudioConfig(frame_rate=cfg.frame_rate)
        wav = read_wav(os.path.join(data_dir, f"{stem}.wav"))
        if cfg.conditioning == "mfcc":
            fm = mfcc(wav, cfg.n_mfcc, acfg)
        else:
            fm = dance_features(wav, read_feature_csv(os.path.join(data_dir, f"{stem}.beats.csv")), acfg)
    aligned = align(fm, cfg.frame_rate, motion.n_frames)
    return aligned.frames, list(aligned.columns)


def _sources(cfg: DataConfig, data_dir: str, stem: str) -> list:
    if cfg.conditioning == "path":
        return []
    if os.path.exists(os.path.join(data_dir, f"{stem}.features.csv")):
        return [f"{stem}.features.csv"]
    need = [f"{stem}.wav"] + ([f"{stem}.beats.csv"] if cfg.conditioning == "dance" else [])
    return need


def _skeleton_signature(skel) -> list:
    return [(j.name, j.parent, list(j.channels)) for j in skel.joints]


def prepare_store(data_dir, out_dir, cfg: DataConfig, window: int = 120, hop: int = 30) -> dict:
    """Build a feature store; returns the index written to ``store.json``."""
    data_dir, out_dir = os.fspath(data_dir), os.fspath(out_dir)
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory {data_dir!r} does not exist")
    names = sorted(os.listdir(data_dir))
    stems = sorted(n[:-4] for n in names if n.endswith(".bvh"))
    skipped = []
    for n in names:
        if n.endswith(".wav") and n[:-4] not in stems:
            skipped.append({"file": n, "reason": "no matching .bvh"})

    style_map = {}
    styles_path = os.path.join(data_dir, "styles.json")
    if os.path.exists(styles_path):
        with open(styles_path, encoding="utf-8") as fh:
            style_map = json.load(fh)
        if not isinstance(style_map, dict) or not all(isinstance(v, str) for v in style_map.values()):
            raise DataError("styles.json must map recording names to label strings")

    layout = PoseLayout.from_dict(cfg.layout)
    items, skel0, signature, motions = [], None, None, []
    for stem in stems:
        missing = [s for s in _sources(cfg, data_dir, stem) if not os.path.exists(os.path.join(data_dir, s))]
        if missing:
            skipped.append({"file": f"{stem}.bvh", "reason": f"missing {', '.join(missing)}"})
            continue
        try:
            skel, motion = read_bvh(os.path.join(data_dir, f"{stem}.bvh"))
            if signature is None:
                skel0, signature = skel, _skeleton_signature(skel)
            elif _skeleton_signature(skel) != signature:
                raise DataError("skeleton differs from the first recording")
            source_rate = motion.frame_rate
            motion = resample_motion(skel, motion, cfg.frame_rate)
            if motion.n_frames < 2:
                raise DataError("fewer than two frames after resampling")
            cond, columns = conditioning_features(cfg, data_dir, stem, skel, motion)
        except (DataError, ParseError, ValueError, OSError) as exc:
            skipped.append({"file": f"{stem}.bvh", "reason": str(exc)})
            continue
        motions.append(motion)
        n = motion.n_frames
        items.append({
            "name": stem,
            "motion": motion,
            "cond": cond,
            "columns": columns,
            "report": {
                "name": stem,
                "source_frame_rate": source_rate,
                "frames": n,
                "windows": 0 if n < window else (n - window) // hop + 1,
                "dropped_tail_frames": n if n < window else (n - window) % hop,
                "style": style_map.get(stem),
                "holdout": stem in cfg.holdout,
            },
        })
    for s in skipped:
        log.warning("skipped %s: %s", s["file"], s["reason"])
    if not items:
        raise DataError(f"no training pairs in {data_dir!r}")
    columns = items[0]["columns"]
    for it in items:
        if it["columns"] != columns:
            raise DataError(f"{it['name']}: conditioning columns differ from {items[0]['name']}")

    if layout.fixed:
        layout.fixed_pose = fixed_pose_from_motion(skel0, motions, layout)
    poses = {it["name"]: make_pose_features(skel0, it["motion"], layout).frames for it in items}
    train_names = [it["name"] for it in items if it["name"] not in cfg.holdout]
    if not train_names:
        raise DataError("every prepared recording is held out; nothing to fit statistics on")
    pose_norm = Normalizer.fit([poses[n] for n in train_names])
    cond_norm = Normalizer.fit([it["cond"] for it in items if it["name"] in train_names])

    labels = sorted({v for k, v in style_map.items() if k in poses})
    zero_frame = MotionChannels(1.0 / cfg.frame_rate, np.zeros((1, skel0.n_channels)))
    index = {
        "format": 1,
        "data": cfg.to_dict(),
        "window": window,
        "hop": hop,
        "skeleton_bvh": serialize_bvh(skel0, zero_frame),
        "layout": layout.to_dict(),
        "pose_norm": pose_norm.to_dict(),
        "cond_norm": cond_norm.to_dict(),
        "cond_columns": columns,
        "style_labels": labels,
        "items": [it["report"] for it in items],
        "skipped": skipped,
    }
    os.makedirs(os.path.join(out_dir, "items"), exist_ok=True)
    for it in items:
        np.save(os.path.join(out_dir, "items", f"{it['name']}.pose.npy"), poses[it["name"]])
        np.save(os.path.join(out_dir, "items", f"{it['name']}.cond.npy"), np.asarray(it["cond"], dtype=np.float64))
    write_json(os.path.join(out_dir, STORE_INDEX), index)
    return index


def load_store(store_dir) -> tuple:
    """(index, {name: (pose, cond)}) with raw arrays."""
    store_dir = os.fspath(store_dir)
    path = os.path.join(store_dir, STORE_INDEX)
    if not os.path.exists(path):
        raise DataError(f"{store_dir!r} is not a feature store (no {STORE_INDEX})")
    with open(path, encoding="utf-8") as fh:
        index = json.load(fh)
    arrays = {}
    for item in index["items"]:
        name = item["name"]
        pose = np.load(os.path.join(store_dir, "items", f"{name}.pose.npy"))
        cond = np.load(os.path.join(store_dir, "items", f"{name}.cond.npy"))
        if len(pose) != len(cond):
            raise DataError(f"{name}: stored pose and conditioning lengths differ")
        arrays[name] = (pose, cond)
    return index, arrays


def style_vector(label, labels) -> np.ndarray:
    out = np.zeros(len(labels))
    if label is not None:
        out[labels.index(label)] = 1.0
    return out


def training_windows(index: dict, arrays: dict, window: int, hop: int) -> tuple:
    """Normalised (poses, conds) window stacks, conditioning = [audio ; style one-hot]."""
    pose_norm = Normalizer.from_dict(index["pose_norm"])
    cond_norm = Normalizer.from_dict(index["cond_norm"])
    labels = index["style_labels"]
    poses, conds = [], []
    for item in index["items"]:
        if item["holdout"]:
            continue
        pose, cond = arrays[item["name"]]
        style = np.tile(style_vector(item["style"], labels), (len(cond), 1))
        full = np.concatenate([cond_norm.normalize(cond), style], axis=1)
        for p, c in window_dataset(pose_norm.normalize(pose), full, window, hop):
            poses.append(p)
            conds.append(c)
    if not poses:
        raise DataError(f"no recording is at least {window} frames long; nothing to train on")
    return np.stack(poses), np.stack(conds)
