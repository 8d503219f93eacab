"""Audio windowing, LFCC extraction, deltas and frequency masking."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from math import gcd
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.fft import dct
from scipy.signal import resample_poly

CANONICAL_RATE = 16000
LOG_FLOOR = 1e-10
DELTA_WIDTH = 2

_FEA_MAGIC = b"FEA1"


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.rate <= 0:
            raise FrontendError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FrontendError(f"non-finite samples in {self.source_id!r}")

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class FeatureMatrix:
    """T x C feature values plus the extraction settings that produced them."""

    values: np.ndarray
    window_ms: float = 20.0
    shift_ms: float = 10.0
    n_filters: int = 20
    with_deltas: bool = False

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def coeffs(self) -> int:
        return self.values.shape[1]


def read_audio(path, rate: int = CANONICAL_RATE) -> AudioSegment:
    """Decode a WAV/FLAC file to mono float64, resampling to ``rate``."""
    try:
        data, file_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as exc:
        raise FrontendError(f"cannot read audio {path}: {exc}") from exc
    samples = data.mean(axis=1)
    if samples.size == 0:
        raise FrontendError(f"zero-length audio: {path}")
    if file_rate != rate:
        g = gcd(int(file_rate), int(rate))
        samples = resample_poly(samples, rate // g, file_rate // g)
    return AudioSegment(samples, rate, source_id=str(path))


def fit_window(samples: np.ndarray, n_target: int, offset: int | str = 0, rng=None) -> np.ndarray:
    """Repeat-pad ``samples`` to at least ``n_target`` and crop.

    ``offset`` is an explicit start index or ``"random"`` (drawn from ``rng``).
    """
    if samples.size == 0:
        raise FrontendError("cannot window zero-length audio")
    if samples.size < n_target:
        reps = -(-n_target // samples.size)
        samples = np.tile(samples, reps)
    slack = samples.size - n_target
    if offset == "random":
        rng = np.random.default_rng(rng)
        offset = int(rng.integers(0, slack + 1))
    if not 0 <= offset <= slack:
        raise FrontendError(f"crop offset {offset} outside [0, {slack}]")
    return samples[offset:offset + n_target]


def load_window(path, target_seconds: float = 4.0, mode: str = "eval_start",
                seed=None, rate: int = CANONICAL_RATE) -> AudioSegment:
    """Load a fixed-length window: repeat-padded, then cropped.

    ``train_random`` crops at a seeded random offset, ``eval_start`` at 0.
    """
    if mode not in ("train_random", "eval_start"):
        raise FrontendError(f"unknown window mode {mode!r}")
    seg = read_audio(path, rate)
    n_target = int(round(target_seconds * rate))
    offset = "random" if mode == "train_random" else 0
    return AudioSegment(fit_window(seg.samples, n_target, offset, seed), rate, seg.source_id)


def frame_count(n_samples: int, win: int, shift: int) -> int:
    return 1 + (n_samples - win) // shift


def linear_filterbank(n_filters: int, n_fft: int, rate: int,
                      f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular filters with linearly spaced centres, shape (n_filters, n_fft//2+1)."""
    f_max = rate / 2 if f_max is None else f_max
    edges = np.linspace(f_min, f_max, n_filters + 2)
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (centre - left)
    falling = (right - freqs) / (right - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def _frame_params(rate: int, window_ms: float, shift_ms: float) -> tuple[int, int, int]:
    win = int(round(rate * window_ms / 1000))
    shift = int(round(rate * shift_ms / 1000))
    n_fft = 1 << (win - 1).bit_length()
    return win, shift, n_fft


def lfcc(seg: AudioSegment, n_filters: int = 20, n_coeffs: int = 20,
         window_ms: float = 20.0, shift_ms: float = 10.0) -> FeatureMatrix:
    """Linear-frequency cepstral coefficients, one row per frame.

    Hamming-windowed frames are zero-padded to the next power of two, the
    power spectrum is pooled by a linear triangular filterbank, floored at
    ``LOG_FLOOR`` before the log, and compressed with an orthonormal DCT-II.
    """
    if n_coeffs > n_filters:
        raise FrontendError(f"n_coeffs={n_coeffs} exceeds n_filters={n_filters}")
    win, shift, n_fft = _frame_params(seg.rate, window_ms, shift_ms)
    x = np.asarray(seg.samples, dtype=np.float64)
    if x.size < win:
        raise FrontendError(f"segment of {x.size} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::shift]
    power = np.abs(np.fft.rfft(frames * np.hamming(win), n=n_fft, axis=1)) ** 2
    energies = power @ linear_filterbank(n_filters, n_fft, seg.rate).T
    ceps = dct(np.log(np.maximum(energies, LOG_FLOOR)), type=2, norm="ortho", axis=1)
    return FeatureMatrix(ceps[:, :n_coeffs], window_ms, shift_ms, n_filters, False)


def _delta(values: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    n_frames = values.shape[0]
    padded = np.pad(values, ((width, width), (0, 0)), mode="edge")
    denom = 2 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(values)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + n_frames] - padded[width - n:width - n + n_frames])
    return out / denom


def add_deltas(fm: FeatureMatrix) -> FeatureMatrix:
    """Append delta and delta-delta blocks (regression over +-2 frames, edges replicated)."""
    if fm.with_deltas:
        raise FrontendError("feature matrix already carries deltas")
    d1 = _delta(fm.values)
    d2 = _delta(d1)
    return replace(fm, values=np.concatenate([fm.values, d1, d2], axis=1), with_deltas=True)


def mask_band(n_coeffs: int, max_width: int, seed) -> tuple[int, int]:
    """Draw the (start, width) of a frequency mask."""
    if not 0 < max_width <= n_coeffs:
        raise FrontendError(f"max_width must lie in (0, {n_coeffs}], got {max_width}")
    rng = np.random.default_rng(seed)
    width = int(rng.integers(1, max_width + 1))
    start = int(rng.integers(0, n_coeffs - width + 1))
    return start, width


def freq_mask(fm: FeatureMatrix, max_width: int, seed) -> FeatureMatrix:
    """Zero one seeded-random contiguous coefficient band across all frames."""
    start, width = mask_band(fm.coeffs, max_width, seed)
    values = fm.values.copy()
    values[:, start:start + width] = 0.0
    return replace(fm, values=values)


def extract(seg: AudioSegment, n_filters: int = 20, n_coeffs: int = 20,
            window_ms: float = 20.0, shift_ms: float = 10.0, deltas: bool = True) -> FeatureMatrix:
    fm = lfcc(seg, n_filters, n_coeffs, window_ms, shift_ms)
    return add_deltas(fm) if deltas else fm


# Feature cache: "FEA1", u32 T, u32 C, f32 window_ms, f32 shift_ms,
# u32 n_filters, u8 deltas, then T*C little-endian f32 (row-major).
_FEA_HEADER = struct.Struct("<4sIIffIB")


def write_features(path, fm: FeatureMatrix) -> None:
    header = _FEA_HEADER.pack(_FEA_MAGIC, fm.frames, fm.coeffs, fm.window_ms, fm.shift_ms,
                              fm.n_filters, int(fm.with_deltas))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def read_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _FEA_HEADER.size:
        raise FrontendError(f"{path}: truncated feature header")
    magic, t, c, window_ms, shift_ms, n_filters, deltas = _FEA_HEADER.unpack_from(raw)
    if magic != _FEA_MAGIC:
        raise FrontendError(f"{path}: bad magic {magic!r}")
    body = raw[_FEA_HEADER.size:]
    if len(body) != 4 * t * c:
        raise FrontendError(f"{path}: expected {t}x{c} values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(t, c).astype(np.float64)
    return FeatureMatrix(values, float(window_ms), float(shift_ms), int(n_filters), bool(deltas))
