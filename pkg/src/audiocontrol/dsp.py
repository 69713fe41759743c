"""Signal-processing primitives shared by the condition extractors.

Framing and RMS, the Savitzky-Golay smoother, a YIN-style f0 estimator, the
Ricker continuous wavelet transform and a uniform quantizer. Everything here
is a pure function of its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 44100
DB_EPS = 1e-5


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class FrameSpec:
    frame_length: int = 4096
    hop: int = 1025

    def __post_init__(self):
        if self.frame_length < 1 or not 1 <= self.hop <= self.frame_length:
            raise ValueError(f"invalid frame spec {self.frame_length}/{self.hop}")

    def n_frames(self, n_samples: int) -> int:
        if n_samples <= self.frame_length:
            return 1
        return (n_samples - self.frame_length) // self.hop + 1

    def frame_rate(self, sample_rate: int = SAMPLE_RATE) -> float:
        return sample_rate / self.hop

    def centers(self, n_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        """Frame-center times in seconds."""
        t = np.arange(self.n_frames(n_samples))
        return (t * self.hop + self.frame_length / 2) / sample_rate


@dataclass(frozen=True)
class F0Track:
    f0: np.ndarray
    voiced: np.ndarray
    frame_rate: float = SAMPLE_RATE / 1025

    def __post_init__(self):
        if len(self.f0) != len(self.voiced):
            raise ValueError("f0 and voiced must have equal length")
        if np.any(np.asarray(self.f0)[np.asarray(self.voiced)] <= 0):
            raise ValueError("voiced frames need a positive f0")


@dataclass(frozen=True)
class Scalogram:
    values: np.ndarray  # scales x time
    scales: tuple = field(default_factory=tuple)


def frame_signal(samples: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """View ``samples`` as ``[n_frames, frame_length]``, zero-padding the tail if short."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot frame an empty signal")
    if samples.size < spec.frame_length:
        samples = np.pad(samples, (0, spec.frame_length - samples.size))
    frames = np.lib.stride_tricks.sliding_window_view(samples, spec.frame_length)
    return frames[::spec.hop][: spec.n_frames(samples.size)]


def frame_rms(clip: AudioClip, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    frames = frame_signal(clip.samples, spec)
    return np.sqrt(np.mean(frames * frames, axis=1))


def rms_to_db(rms, eps: float = DB_EPS) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return 20.0 * np.log10(np.asarray(rms, dtype=np.float64) + eps)


def savgol_coefficients(window: int, poly_order: int, pos: int | None = None) -> np.ndarray:
    """Least-squares weights that evaluate the fitted polynomial at ``pos`` within the window."""
    from scipy.signal import savgol_coeffs

    return savgol_coeffs(window, poly_order, pos=pos, use="dot")


def savgol_filter(x, window: int = 11, poly_order: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing with mirror padding at the edges.

    Series shorter than the window come back unchanged.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if poly_order < 0 or poly_order >= window:
        raise ValueError(f"poly_order must be in [0, window), got {poly_order}")
    x = np.asarray(x, dtype=np.float64)
    if x.size < window:
        return x.copy()
    from scipy import signal

    return signal.savgol_filter(x, window, poly_order, mode="mirror")


def _difference_function(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """YIN squared-difference d(tau) for tau in [0, tau_max), per frame."""
    n_frames, length = frames.shape
    width = length - tau_max
    size = 1 << int(np.ceil(np.log2(length + width)))
    spec_full = np.fft.rfft(frames, size, axis=1)
    spec_head = np.fft.rfft(frames[:, :width], size, axis=1)
    # cross[t] = sum_j x[j] * x[j + t] for j < width
    cross = np.fft.irfft(np.conj(spec_head) * spec_full, size, axis=1)[:, :tau_max]
    energy = np.cumsum(np.pad(frames * frames, ((0, 0), (1, 0))), axis=1)
    head = energy[:, width][:, None]
    lagged = energy[:, width:width + tau_max] - energy[:, :tau_max]
    return head + lagged - 2.0 * cross


def estimate_f0(clip: AudioClip, spec: FrameSpec = FrameSpec(), fmin: float = 60.0,
                fmax: float = 1000.0, threshold: float = 0.15) -> F0Track:
    """Frame-wise f0 with the YIN cumulative-mean-normalized difference.

    A frame is voiced when the normalized difference dips below
    ``threshold`` at a lag inside ``[sr/fmax, sr/fmin]``; the dip is refined
    with parabolic interpolation.
    """
    sr = clip.sample_rate
    if not 0 < fmin < fmax < sr / 2:
        raise ValueError(f"need 0 < fmin < fmax < sr/2, got {fmin}, {fmax}")
    tau_min = max(2, int(np.floor(sr / fmax)))
    tau_max = int(np.ceil(sr / fmin)) + 2
    if tau_max >= spec.frame_length:
        raise ValueError("frame too short for fmin")
    frames = frame_signal(clip.samples, spec)
    d = _difference_function(frames, tau_max)
    d[:, 0] = 0.0
    csum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, tau_max)
    cmndf = np.ones_like(d)
    with np.errstate(invalid="ignore", divide="ignore"):
        cmndf[:, 1:] = d[:, 1:] * taus / csum

    n = frames.shape[0]
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    silent = np.mean(frames * frames, axis=1) < 1e-10
    for i in range(n):
        if silent[i]:
            continue
        row = cmndf[i]
        below = np.nonzero(row[tau_min:tau_max - 1] < threshold)[0]
        if below.size == 0:
            continue
        tau = below[0] + tau_min
        while tau + 1 < tau_max - 1 and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        freq = sr / (tau + shift)
        if fmin <= freq <= fmax:
            f0[i] = freq
            voiced[i] = True
    return F0Track(f0=f0, voiced=voiced, frame_rate=spec.frame_rate(sr))


def fill_unvoiced(track: F0Track) -> np.ndarray:
    """Gap-free f0: linear interpolation over unvoiced runs, constant at the ends.

    A fully unvoiced track returns all zeros.
    """
    idx = np.nonzero(track.voiced)[0]
    if idx.size == 0:
        return np.zeros(len(track.f0))
    return np.interp(np.arange(len(track.f0)), idx, np.asarray(track.f0)[idx])


def ricker(scale: float, half_width: float = 5.0) -> np.ndarray:
    """Zero-mean Ricker wavelet sampled on ``[-half_width*scale, half_width*scale]``.

    The truncated samples are shifted to sum to exactly zero so constants map
    to zero response.
    """
    n = int(np.ceil(half_width * scale))
    t = np.arange(-n, n + 1, dtype=np.float64)
    amp = 2.0 / (np.sqrt(3.0 * scale) * np.pi ** 0.25)
    w = amp * (1.0 - (t / scale) ** 2) * np.exp(-0.5 * (t / scale) ** 2)
    return w - w.mean()


def ricker_cwt(x, scales=tuple(range(1, 33))) -> Scalogram:
    """Ricker CWT with symmetric extension; output has the input's length."""
    x = np.asarray(x, dtype=np.float64)
    scales = tuple(scales)
    if not scales:
        raise ValueError("need at least one scale")
    if any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")
    if x.size == 0:
        raise ValueError("empty input")
    out = np.empty((len(scales), x.size))
    for row, s in enumerate(scales):
        w = ricker(s)
        half = w.size // 2
        padded = np.pad(x, half, mode="symmetric")
        # the wavelet is symmetric, so correlation == convolution
        out[row] = np.convolve(padded, w, mode="valid")
    return Scalogram(values=out, scales=scales)


def quantize_uniform(values, n_bins: int = 256, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if not lo < hi:
        raise ValueError("need lo < hi")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    bins = np.floor((values - lo) / (hi - lo) * n_bins)
    return np.clip(bins, 0, n_bins - 1).astype(np.int64)


def dequantize_uniform(bins, n_bins: int = 256, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Bin centers."""
    return lo + (np.asarray(bins, dtype=np.float64) + 0.5) * (hi - lo) / n_bins


def resample(samples: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase resampling with scipy's anti-aliasing FIR."""
    from math import gcd

    from scipy.signal import resample_poly

    samples = np.asarray(samples, dtype=np.float64)
    if src_rate == dst_rate:
        return samples
    g = gcd(int(src_rate), int(dst_rate))
    return resample_poly(samples, dst_rate // g, src_rate // g)
