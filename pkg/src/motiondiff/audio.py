"""Acoustic conditioning features computed at the motion frame rate.

Frames start every ``sample_rate / frame_rate`` samples (rounded per frame, so the
average hop is exact even when it is fractional) and span a 46.4 ms analysis window.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import DataError, ParseError

LOG_FLOOR = 1e-10
PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
CHROMA_BANDS = tuple(f"{PITCH_CLASSES[2 * i]}/{PITCH_CLASSES[2 * i + 1]}" for i in range(6))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a nonempty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_rate: float
    columns: list

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != len(self.columns):
            raise ValueError("feature frames must be (T, len(columns))")
        if not np.isfinite(self.frames).all():
            raise ValueError("features contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AudioConfig:
    frame_rate: float = 30.0
    window_seconds: float = 2048 / 44100
    pre_emphasis: float = 0.97
    n_mels: int = 26
    fmin: float = 0.0
    fmax: float | None = None
    chroma_fmin: float = 27.5
    chroma_fmax: float = 5000.0

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_seconds * sample_rate))

    def hop(self, sample_rate: int) -> float:
        return sample_rate / self.frame_rate


def read_wav(path) -> Waveform:
    """16-bit PCM WAV; multi-channel files are averaged to mono."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise DataError(f"{path}: only 16-bit PCM is supported")
        n_ch = fh.getnchannels()
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    data = data.reshape(-1, n_ch).mean(axis=1) / 32768.0
    return Waveform(data, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def frame_signal(w: Waveform, cfg: AudioConfig) -> np.ndarray:
    """(T, window) matrix of analysis frames."""
    win = cfg.window_length(w.sample_rate)
    if len(w.samples) < win:
        raise DataError(
            f"waveform of {len(w.samples)} samples is shorter than one {win}-sample analysis window"
        )
    hop = cfg.hop(w.sample_rate)
    n_frames = int(math.floor((len(w.samples) - win) / hop + 1e-9)) + 1
    starts = np.round(np.arange(n_frames) * hop).astype(np.int64)
    starts = starts[starts + win <= len(w.samples)]
    return w.samples[starts[:, None] + np.arange(win)]


def magnitude_spectrum(w: Waveform, cfg: AudioConfig, emphasis: bool = True) -> np.ndarray:
    """|rfft| of pre-emphasised, Hann-windowed frames, shape (T, win // 2 + 1)."""
    frames = frame_signal(w, cfg)
    if emphasis and cfg.pre_emphasis:
        frames = np.concatenate([frames[:, :1], frames[:, 1:] - cfg.pre_emphasis * frames[:, :-1]], axis=1)
    win = frames.shape[1]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    return np.abs(np.fft.rfft(frames * hann, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfcc(w: Waveform, n_coeffs: int = 20, cfg: AudioConfig = AudioConfig()) -> FeatureMatrix:
    """MFCCs including the 0th (log-energy-like) coefficient."""
    if n_coeffs < 1 or n_coeffs > cfg.n_mels:
        raise ValueError(f"n_coeffs must be in 1..{cfg.n_mels}")
    spec = magnitude_spectrum(w, cfg)
    fb = mel_filterbank(cfg.n_mels, cfg.window_length(w.sample_rate), w.sample_rate, cfg.fmin, cfg.fmax)
    logmel = np.log(np.maximum(spec @ fb.T, LOG_FLOOR))
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return FeatureMatrix(coeffs, cfg.frame_rate, [f"mfcc{i}" for i in range(n_coeffs)])


def spectral_flux(w: Waveform, cfg: AudioConfig = AudioConfig()) -> FeatureMatrix:
    spec = magnitude_spectrum(w, cfg, emphasis=False)
    rise = np.maximum(0.0, np.diff(spec, axis=0)).sum(axis=1)
    return FeatureMatrix(np.concatenate([[0.0], rise])[:, None], cfg.frame_rate, ["flux"])


def pitch_class(freqs) -> np.ndarray:
    """Nearest equal-tempered pitch class (C = 0) of each frequency, A4 = 440 Hz."""
    midi = np.round(69 + 12 * np.log2(np.asarray(freqs, dtype=np.float64) / 440.0)).astype(int)
    return np.mod(midi, 12)


def chroma(w: Waveform, cfg: AudioConfig = AudioConfig()) -> FeatureMatrix:
    """Spectral power folded onto 12 pitch classes, pooled into 6 adjacent pairs, L1-normalised."""
    spec = magnitude_spectrum(w, cfg, emphasis=False)
    n_fft = cfg.window_length(w.sample_rate)
    freqs = np.arange(spec.shape[1]) * w.sample_rate / n_fft
    keep = (freqs >= cfg.chroma_fmin) & (freqs <= min(cfg.chroma_fmax, w.sample_rate / 2))
    fold = np.zeros((spec.shape[1], 6))
    fold[np.nonzero(keep)[0], pitch_class(freqs[keep]) // 2] = 1.0
    bands = (spec**2) @ fold
    total = bands.sum(axis=1, keepdims=True)
    out = np.where(total > 0, bands / np.where(total > 0, total, 1.0), 1.0 / 6.0)
    return FeatureMatrix(out, cfg.frame_rate, list(CHROMA_BANDS))


def read_feature_csv(path) -> FeatureMatrix:
    """Read a feature CSV: column names, then ``frame_rate=<Hz>``, then one row per frame."""
    with open(path, encoding="utf-8") as fh:
        return parse_feature_csv(fh.read())


def parse_feature_csv(text: str) -> FeatureMatrix:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing column-name header", 1)
    columns = [c.strip() for c in lines[0].split(",")]
    if len(lines) < 2 or not lines[1].startswith("frame_rate="):
        raise ParseError("missing 'frame_rate=<Hz>' declaration", 2)
    try:
        rate = float(lines[1][len("frame_rate="):])
    except ValueError:
        raise ParseError(f"bad frame rate {lines[1]!r}", 2) from None
    if not (math.isfinite(rate) and rate > 0):
        raise ParseError(f"frame rate must be positive, got {rate}", 2)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(columns):
            raise ParseError(f"expected {len(columns)} values, found {len(cells)}", lineno)
        row = []
        for c in cells:
            try:
                v = float(c)
            except ValueError:
                raise ParseError(f"non-numeric value {c.strip()!r}", lineno) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {c.strip()!r}", lineno)
            row.append(v)
        rows.append(row)
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    return FeatureMatrix(frames, rate, columns)


def format_feature_csv(fm: FeatureMatrix) -> str:
    lines = [",".join(fm.columns), f"frame_rate={fm.frame_rate!r}"]
    lines += [",".join(repr(float(v)) for v in row) for row in fm.frames]
    return "\n".join(lines) + "\n"


def write_feature_csv(path, fm: FeatureMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_feature_csv(fm))


MAX_LENGTH_MISMATCH = 0.5


def align(features: FeatureMatrix, target_rate: float, target_frames: int) -> FeatureMatrix:
    """Linearly resample to exactly ``target_frames`` frames at ``target_rate``.

    Frames past the end of the source repeat its last value. Durations that differ by
    more than half a second mean the inputs do not belong together.
    """
    if features.n_frames == 0:
        raise ValueError("cannot align an empty feature matrix")
    src_duration = features.n_frames / features.frame_rate
    dst_duration = target_frames / target_rate
    if abs(src_duration - dst_duration) > MAX_LENGTH_MISMATCH:
        raise DataError(
            f"feature duration {src_duration:.3f}s vs target {dst_duration:.3f}s differ by more than "
            f"{MAX_LENGTH_MISMATCH}s"
        )
    if features.frame_rate == target_rate and features.n_frames == target_frames:
        return FeatureMatrix(features.frames.copy(), target_rate, list(features.columns))
    pos = np.arange(target_frames) * (features.frame_rate / target_rate)
    src = np.arange(features.n_frames)
    cols = [np.interp(pos, src, features.frames[:, k]) for k in range(features.frames.shape[1])]
    frames = np.stack(cols, axis=1) if cols else np.zeros((target_frames, 0))
    return FeatureMatrix(frames, target_rate, list(features.columns))


def dance_features(w: Waveform, beats: FeatureMatrix, cfg: AudioConfig = AudioConfig()) -> FeatureMatrix:
    """MFCC(5), flux(1), chroma(6), beat(1), downbeat(1) in that column order."""
    parts = [mfcc(w, 5, cfg), spectral_flux(w, cfg), chroma(w, cfg)]
    n = parts[0].n_frames
    beat = align(beats, cfg.frame_rate, n)
    if beat.frames.shape[1] != 2:
        raise DataError("beat file must carry exactly two columns (beat, downbeat)")
    frames = np.concatenate([p.frames for p in parts] + [beat.frames], axis=1)
    columns = sum((p.columns for p in parts), []) + ["beat", "downbeat"]
    return FeatureMatrix(frames, cfg.frame_rate, columns)
