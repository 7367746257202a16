"""BVH reading and writing.

Only single-root hierarchies are supported. ``End Site`` blocks are kept on their
parent joint so a parse/serialize round trip reproduces the hierarchy.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

CHANNEL_NAMES = ("Xposition", "Yposition", "Zposition", "Xrotation", "Yrotation", "Zrotation")


@dataclass
class Joint:
    name: str
    parent: int | None
    offset: np.ndarray
    channels: list
    end_site: np.ndarray | None = None

    @property
    def rotation_order(self) -> str:
        return "".join(c[0] for c in self.channels if c.endswith("rotation"))


@dataclass
class Skeleton:
    joints: list = field(default_factory=list)

    def __post_init__(self):
        roots = [j for j in self.joints if j.parent is None]
        if len(roots) != 1 or (self.joints and self.joints[0].parent is not None):
            raise ValueError("skeleton needs exactly one root, listed first")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not 0 <= j.parent < i:
                raise ValueError(f"joint {j.name!r}: parent must precede child")
            bad = [c for c in j.channels if c not in CHANNEL_NAMES]
            if bad:
                raise ValueError(f"joint {j.name!r}: unknown channels {bad}")

    @property
    def names(self) -> list:
        return [j.name for j in self.joints]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def n_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    def channel_slices(self) -> list:
        """Column range of every joint in the motion table."""
        out, start = [], 0
        for j in self.joints:
            out.append(slice(start, start + len(j.channels)))
            start += len(j.channels)
        return out

    def children(self, index: int) -> list:
        return [i for i, j in enumerate(self.joints) if j.parent == index]


@dataclass
class MotionChannels:
    frame_time: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("motion needs a (frames, channels) table with at least one frame")
        if not np.isfinite(self.values).all():
            raise ValueError("motion contains non-finite values")
        if not self.frame_time > 0:
            raise ValueError("frame_time must be positive")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.frame_time


_TOKEN = re.compile(r"[^\s{}:]+|[{}:]")


class _Tokens:
    def __init__(self, text: str):
        self.toks = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            for m in _TOKEN.finditer(line):
                self.toks.append((m.group(), lineno, m.start() + 1))
        self.i = 0
        self.last_line = text.count("\n") + 1

    def peek(self):
        return self.toks[self.i][0] if self.i < len(self.toks) else None

    def next(self, what: str):
        if self.i >= len(self.toks):
            raise ParseError(f"unexpected end of file, expected {what}", self.last_line)
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, word: str):
        tok, line, col = self.next(repr(word))
        if tok != word:
            raise ParseError(f"expected {word!r}, found {tok!r}", line, col)

    def number(self, what: str = "number") -> float:
        tok, line, col = self.next(what)
        try:
            value = float(tok)
        except ValueError:
            raise ParseError(f"expected {what}, found {tok!r}", line, col) from None
        if not math.isfinite(value):
            raise ParseError(f"non-finite {what} {tok!r}", line, col)
        return value

    def integer(self, what: str) -> int:
        tok, line, col = self.next(what)
        if not tok.isdigit():
            raise ParseError(f"expected {what}, found {tok!r}", line, col)
        return int(tok)


def _parse_joint(toks: _Tokens, name: str, parent, joints: list) -> None:
    toks.expect("{")
    toks.expect("OFFSET")
    offset = np.array([toks.number("offset") for _ in range(3)])
    toks.expect("CHANNELS")
    count = toks.integer("channel count")
    channels = []
    for _ in range(count):
        tok, line, col = toks.next("channel name")
        if tok not in CHANNEL_NAMES:
            raise ParseError(f"unknown channel {tok!r}", line, col)
        channels.append(tok)
    index = len(joints)
    joints.append(Joint(name, parent, offset, channels))
    while True:
        tok, line, col = toks.next("'JOINT', 'End' or '}'")
        if tok == "}":
            return
        if tok == "JOINT":
            child, _, _ = toks.next("joint name")
            _parse_joint(toks, child, index, joints)
        elif tok == "End":
            toks.expect("Site")
            toks.expect("{")
            toks.expect("OFFSET")
            site = np.array([toks.number("offset") for _ in range(3)])
            toks.expect("}")
            if joints[index].end_site is not None:
                raise ParseError(f"joint {name!r} has more than one End Site", line, col)
            joints[index].end_site = site
        else:
            raise ParseError(f"expected 'JOINT', 'End' or '}}', found {tok!r}", line, col)


def parse_bvh(text: str, require_final_newline: bool = True) -> tuple[Skeleton, MotionChannels]:
    """Parse a BVH document.

    A file cut inside its last motion value still tokenizes, so by default the final
    row must end in a newline; that turns every truncation into a ParseError.
    """
    if require_final_newline and text and not text.endswith("\n"):
        raise ParseError("file does not end with a newline (truncated?)", text.count("\n") + 1)
    toks = _Tokens(text)
    toks.expect("HIERARCHY")
    toks.expect("ROOT")
    name, _, _ = toks.next("root name")
    joints: list = []
    _parse_joint(toks, name, None, joints)
    skeleton = Skeleton(joints)
    toks.expect("MOTION")
    toks.expect("Frames")
    toks.expect(":")
    n_frames = toks.integer("frame count")
    if n_frames < 1:
        raise ParseError("motion needs at least one frame", toks.toks[toks.i - 1][1])
    toks.expect("Frame")
    toks.expect("Time")
    toks.expect(":")
    frame_time = toks.number("frame time")
    if frame_time <= 0:
        raise ParseError(f"frame time must be positive, got {frame_time}", toks.toks[toks.i - 1][1])

    k = skeleton.n_channels
    rest = toks.toks[toks.i:]
    rows: dict = {}
    for tok, line, col in rest:
        rows.setdefault(line, []).append((tok, line, col))
    if len(rows) != n_frames:
        where = max(rows) if rows else toks.last_line
        raise ParseError(f"header declares {n_frames} frames, found {len(rows)} motion rows", where)
    values = np.empty((n_frames, k))
    for r, line in enumerate(sorted(rows)):
        cells = rows[line]
        if len(cells) != k:
            raise ParseError(f"expected {k} channel values, found {len(cells)}", line)
        for c, (tok, _, col) in enumerate(cells):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"non-numeric value {tok!r}", line, col) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {tok!r}", line, col)
            values[r, c] = v
    return skeleton, MotionChannels(frame_time, values)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def serialize_bvh(skeleton: Skeleton, motion: MotionChannels) -> str:
    if motion.values.shape[1] != skeleton.n_channels:
        raise ValueError(
            f"motion has {motion.values.shape[1]} channels, skeleton declares {skeleton.n_channels}"
        )
    order = []

    def visit(i):
        order.append(i)
        for c in skeleton.children(i):
            visit(c)

    visit(0)
    if order != list(range(len(skeleton.joints))):
        # the motion table follows hierarchy order, so anything else would scramble columns
        raise ValueError("joints must be listed in depth-first hierarchy order")
    lines = ["HIERARCHY"]

    def emit(index: int, depth: int):
        j = skeleton.joints[index]
        pad = "\t" * depth
        head = "ROOT" if j.parent is None else "JOINT"
        lines.append(f"{pad}{head} {j.name}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}\tOFFSET {' '.join(_fmt(v) for v in j.offset)}")
        lines.append(f"{pad}\tCHANNELS {len(j.channels)}" + "".join(f" {c}" for c in j.channels))
        for child in skeleton.children(index):
            emit(child, depth + 1)
        if j.end_site is not None:
            lines.append(f"{pad}\tEnd Site")
            lines.append(f"{pad}\t{{")
            lines.append(f"{pad}\t\tOFFSET {' '.join(_fmt(v) for v in j.end_site)}")
            lines.append(f"{pad}\t}}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {motion.n_frames}")
    lines.append(f"Frame Time: {motion.frame_time:.8f}")
    for row in motion.values:
        lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def read_bvh(path) -> tuple[Skeleton, MotionChannels]:
    with open(path, encoding="utf-8") as fh:
        return parse_bvh(fh.read())


def write_bvh(path, skeleton: Skeleton, motion: MotionChannels) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_bvh(skeleton, motion))
