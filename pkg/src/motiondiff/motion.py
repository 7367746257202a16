"""Pose features from BVH motion: exponential-map joint rotations plus root channels.

Root handling (``PoseLayout.root``):

* ``"path"``: root height, then per-frame (yaw delta, forward, sideways) deltas in the
  previous frame's heading frame. The root joint's exp-map has its heading removed,
  so features do not depend on where the character stands or faces.
* ``"position"``: raw root translation channels.
* ``"none"``: rotations only.
"""

from __future__ import annotations

import fnmatch
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot
from .bvh import MotionChannels, Skeleton
from .errors import ConfigurationError

log = logging.getLogger(__name__)

ROOT_WIDTH = {"path": 4, "position": 3, "none": 0}
FINGER_PATTERNS = ("*Thumb*", "*Index*", "*Middle*", "*Ring*", "*Pinky*")


@dataclass
class PoseLayout:
    """Which joints become features and how the root is represented.

    ``joints=None`` takes every joint with rotation channels. Joints matching
    ``fixed`` patterns are left out of the features and written back with the
    rotation stored in ``fixed_pose`` (Euler degrees in the joint's own order).
    """

    joints: list | None = None
    fixed: tuple = ()
    root: str = "path"
    fixed_pose: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.root not in ROOT_WIDTH:
            raise ConfigurationError(f"root mode must be one of {sorted(ROOT_WIDTH)}, got {self.root!r}")
        self.fixed = tuple(self.fixed)

    def is_fixed(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.fixed)

    def feature_joints(self, skeleton: Skeleton) -> list:
        if self.joints is None:
            names = [j.name for j in skeleton.joints if j.rotation_order and not self.is_fixed(j.name)]
        else:
            names = list(self.joints)
        for name in names:
            if name not in skeleton.names:
                raise ConfigurationError(f"layout joint {name!r} not in skeleton")
            j = skeleton.joints[skeleton.index(name)]
            if len(j.rotation_order) != 3:
                raise ConfigurationError(f"layout joint {name!r} needs three rotation channels")
        return names

    def width(self, skeleton: Skeleton) -> int:
        return 3 * len(self.feature_joints(skeleton)) + ROOT_WIDTH[self.root]

    def spans(self, skeleton: Skeleton) -> list:
        """(name, start, width) for every feature group, root channels first."""
        out, start = [], 0
        if self.root != "none":
            out.append(("root", 0, ROOT_WIDTH[self.root]))
            start = ROOT_WIDTH[self.root]
        for name in self.feature_joints(skeleton):
            out.append((name, start, 3))
            start += 3
        return out

    def to_dict(self) -> dict:
        return {
            "joints": self.joints,
            "fixed": list(self.fixed),
            "root": self.root,
            "fixed_pose": {k: [float(v) for v in vals] for k, vals in sorted(self.fixed_pose.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseLayout":
        return cls(d.get("joints"), tuple(d.get("fixed", ())), d.get("root", "path"), dict(d.get("fixed_pose", {})))


@dataclass
class PoseSequence:
    frames: np.ndarray
    frame_rate: float
    spans: list

    def __post_init__(self):
        width = sum(w for _, _, w in self.spans)
        if self.frames.ndim != 2 or self.frames.shape[1] != width:
            raise ValueError(f"pose frames must be (T, {width})")
        if not np.isfinite(self.frames).all():
            raise ValueError("pose frames contain non-finite values")


def _joint_columns(skeleton: Skeleton, name: str) -> tuple:
    """Column indices of a joint's rotation channels (in channel order) and its position channels."""
    i = skeleton.index(name)
    sl = skeleton.channel_slices()[i]
    chans = skeleton.joints[i].channels
    rot_cols = [sl.start + k for k, c in enumerate(chans) if c.endswith("rotation")]
    pos_cols = {c[0]: sl.start + k for k, c in enumerate(chans) if c.endswith("position")}
    return rot_cols, pos_cols


def joint_matrices(skeleton: Skeleton, motion: MotionChannels, name: str) -> np.ndarray:
    rot_cols, _ = _joint_columns(skeleton, name)
    order = skeleton.joints[skeleton.index(name)].rotation_order
    return rot.euler_to_matrix(motion.values[:, rot_cols], order)


def root_position(skeleton: Skeleton, motion: MotionChannels) -> np.ndarray:
    _, pos = _joint_columns(skeleton, skeleton.joints[0].name)
    out = np.zeros((motion.n_frames, 3))
    for axis, col in pos.items():
        out[:, "XYZ".index(axis)] = motion.values[:, col]
    return out


def wrap_angle(a):
    return np.remainder(np.asarray(a) + np.pi, 2 * np.pi) - np.pi


def make_path_control(positions, yaw) -> np.ndarray:
    """Per-frame (yaw delta, forward, sideways) from a Y-up root trajectory.

    Translation deltas are expressed in the previous frame's heading frame, where a
    heading of 0 faces +Z and sideways is +X. Frame 0 has no predecessor and repeats
    frame 1's row so the output keeps one row per input frame.
    """
    positions = np.asarray(positions, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3 or len(yaw) != len(positions):
        raise ValueError("need (F, 3) positions and F yaw angles")
    if len(positions) < 2:
        raise ValueError("path control needs at least two frames")
    dyaw = wrap_angle(np.diff(yaw))
    dp = np.diff(positions, axis=0)
    prev = yaw[:-1]
    forward = dp[:, 0] * np.sin(prev) + dp[:, 2] * np.cos(prev)
    sideways = dp[:, 0] * np.cos(prev) - dp[:, 2] * np.sin(prev)
    out = np.stack([dyaw, forward, sideways], axis=-1)
    return np.concatenate([out[:1], out], axis=0)


def integrate_path_control(control, start_yaw: float = 0.0, start_xz=(0.0, 0.0)) -> tuple:
    """Inverse of :func:`make_path_control` (ignores the padded first row)."""
    control = np.asarray(control, dtype=np.float64)
    n = len(control)
    yaw = np.empty(n)
    xz = np.empty((n, 2))
    yaw[0], xz[0] = start_yaw, start_xz
    for t in range(1, n):
        dyaw, fwd, side = control[t]
        s, c = math.sin(yaw[t - 1]), math.cos(yaw[t - 1])
        xz[t, 0] = xz[t - 1, 0] + fwd * s + side * c
        xz[t, 1] = xz[t - 1, 1] + fwd * c - side * s
        yaw[t] = yaw[t - 1] + dyaw
    return yaw, xz


def make_pose_features(
    skeleton: Skeleton, motion: MotionChannels, layout: PoseLayout, normalizer: "Normalizer | None" = None
) -> PoseSequence:
    """Feature matrix (T, D) with root channels first, then one exp-map triple per joint."""
    names = layout.feature_joints(skeleton)
    root_name = skeleton.joints[0].name
    cols = []
    heading = None
    if layout.root != "none" and not _joint_columns(skeleton, root_name)[1]:
        raise ConfigurationError(f"root mode {layout.root!r} needs root position channels")
    if layout.root == "path":
        pos = root_position(skeleton, motion)
        root_rot = joint_matrices(skeleton, motion, root_name)
        heading = rot.heading_angle(root_rot)
        if motion.n_frames < 2:
            control = np.zeros((1, 3))
        else:
            control = make_path_control(pos, heading)
        cols.append(np.concatenate([pos[:, 1:2], control], axis=1))
    elif layout.root == "position":
        cols.append(root_position(skeleton, motion))
    for name in names:
        R = joint_matrices(skeleton, motion, name)
        if name == root_name and heading is not None:
            R = rot.axis_matrix("Y", -heading) @ R
        cols.append(rot.matrix_to_expmap(R))
    frames = np.concatenate(cols, axis=1) if cols else np.zeros((motion.n_frames, 0))
    if normalizer is not None:
        frames = normalizer.normalize(frames)
    return PoseSequence(frames, motion.frame_rate, layout.spans(skeleton))


def features_to_motion(
    frames: np.ndarray, skeleton: Skeleton, layout: PoseLayout, frame_time: float
) -> MotionChannels:
    """Rebuild a BVH channel table from (denormalised) pose features."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1] != layout.width(skeleton):
        raise ConfigurationError(f"features have width {frames.shape[1]}, layout needs {layout.width(skeleton)}")
    n = len(frames)
    values = np.zeros((n, skeleton.n_channels))
    root_name = skeleton.joints[0].name
    spans = {name: (start, width) for name, start, width in layout.spans(skeleton)}
    heading = None
    _, root_pos_cols = _joint_columns(skeleton, root_name)
    if layout.root == "path":
        root = frames[:, :4]
        heading, xz = integrate_path_control(root[:, 1:])
        pos = np.stack([xz[:, 0], root[:, 0], xz[:, 1]], axis=-1)
    elif layout.root == "position":
        pos = frames[:, :3]
    else:
        pos = np.tile(skeleton.joints[0].offset, (n, 1))
    for axis, col in root_pos_cols.items():
        values[:, col] = pos[:, "XYZ".index(axis)]
    for j in skeleton.joints:
        order = j.rotation_order
        if not order:
            continue
        rot_cols, _ = _joint_columns(skeleton, j.name)
        if j.name in spans:
            start, _ = spans[j.name]
            R = rot.expmap_to_matrix(frames[:, start:start + 3])
            if j.name == root_name and heading is not None:
                R = rot.axis_matrix("Y", heading) @ R
            values[:, rot_cols] = rot.matrix_to_euler(R, order)
        elif j.name in layout.fixed_pose:
            values[:, rot_cols] = np.asarray(layout.fixed_pose[j.name], dtype=np.float64)
    return MotionChannels(frame_time, values)


def fixed_pose_from_motion(skeleton: Skeleton, motions, layout: PoseLayout) -> dict:
    """Mean rotation (Euler, joint order) of every fixed joint over a set of motions."""
    out = {}
    for j in skeleton.joints:
        if not j.rotation_order or not layout.is_fixed(j.name):
            continue
        mats = np.concatenate([joint_matrices(skeleton, m, j.name) for m in motions])
        # projection of the mean matrix back onto SO(3)
        u, _, vt = np.linalg.svd(mats.mean(axis=0))
        mean = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
        out[j.name] = [float(v) for v in rot.matrix_to_euler(mean, j.rotation_order)]
    return out


def resample_motion(skeleton: Skeleton, motion: MotionChannels, target_rate: float) -> MotionChannels:
    """Linear interpolation of exp-map rotations and translations to ``target_rate``."""
    if not target_rate > 0:
        raise ValueError("target rate must be positive")
    src_rate = motion.frame_rate
    if math.isclose(src_rate, target_rate, rel_tol=1e-12):
        return MotionChannels(motion.frame_time, motion.values.copy())
    duration = (motion.n_frames - 1) / src_rate
    n_out = int(math.floor(duration * target_rate + 1e-9)) + 1
    src_pos = np.arange(n_out) * (src_rate / target_rate)
    lo = np.minimum(np.floor(src_pos + 1e-9).astype(int), motion.n_frames - 1)
    hi = np.minimum(lo + 1, motion.n_frames - 1)
    w = np.clip(src_pos - lo, 0.0, 1.0)[:, None]

    def lerp(a):
        return a[lo] * (1.0 - w) + a[hi] * w

    values = np.zeros((n_out, skeleton.n_channels))
    for j, sl in zip(skeleton.joints, skeleton.channel_slices()):
        rot_cols, pos_cols = _joint_columns(skeleton, j.name)
        for col in pos_cols.values():
            values[:, col] = lerp(motion.values[:, col:col + 1])[:, 0]
        if rot_cols:
            order = j.rotation_order
            r = rot.euler_to_expmap(motion.values[:, rot_cols], order)
            values[:, rot_cols] = rot.expmap_to_euler(lerp(_unwrap_expmap(r)), order)
    return MotionChannels(1.0 / target_rate, values)


def _unwrap_expmap(r: np.ndarray) -> np.ndarray:
    # choose, frame by frame, the equivalent vector (r or r - 2*pi*axis) nearest the previous one
    out = r.copy()
    for t in range(1, len(out)):
        theta = np.linalg.norm(out[t])
        if theta < 1e-12:
            continue
        alt = out[t] * (1.0 - 2.0 * np.pi / theta)
        if np.linalg.norm(alt - out[t - 1]) < np.linalg.norm(out[t] - out[t - 1]):
            out[t] = alt
    return out


@dataclass
class Normalizer:
    """Per-feature z-score. Constant features get unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, arrays) -> "Normalizer":
        data = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def window_dataset(pose: np.ndarray, cond: np.ndarray, window: int, hop: int) -> list:
    """Aligned (pose, cond) windows starting every ``hop`` frames; the ragged tail is dropped."""
    pose = np.asarray(pose)
    cond = np.asarray(cond)
    if len(pose) != len(cond):
        raise ValueError(f"pose has {len(pose)} frames, conditioning has {len(cond)}")
    if window < 1 or hop < 1:
        raise ValueError("window and hop must be positive")
    if window > len(pose):
        log.warning("sequence of %d frames is shorter than the %d-frame window; skipped", len(pose), window)
        return []
    return [(pose[s:s + window], cond[s:s + window]) for s in range(0, len(pose) - window + 1, hop)]
