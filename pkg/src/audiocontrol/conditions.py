"""Loudness, pitch and event-roll conditions as time-aligned feature matrices.

All three end up as a :class:`ConditionSequence` of shape ``[T, D]`` at the
feature frame rate (44100 / 1025, about 43 frames per second). The learned
parts (pitch codebook, event projection) are passed in as plain arrays here;
the model owns and trains them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioClip, FrameSpec

FRAME_RATE = dsp.SAMPLE_RATE / 1025
TEXT_WIDTH = 64
N_PITCH_BINS = 256
PITCH_SCALES = tuple(range(1, 33))
# (-1, 1) shifted down half a bin so a flat contour (CWT = 0) sits mid-bin 128
DEFAULT_PITCH_RANGE = (-1.0 - 1.0 / 256, 1.0 - 1.0 / 256)
LOUDNESS_RANGE_DB = (-100.0, 0.0)
KINDS = ("loudness", "pitch", "event", "edit")


@dataclass
class ConditionSequence:
    kind: str
    values: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"condition values must be [T>=1, D], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("condition values must be finite")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class LoudnessCurve:
    db: np.ndarray
    frame_rate: float = FRAME_RATE


@dataclass
class PitchCode:
    bins: np.ndarray  # [T, S] ints
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        if self.bins.ndim != 2:
            raise ValueError("PitchCode bins must be [T, S]")


@dataclass
class EventTrack:
    label: str
    intervals: list = field(default_factory=list)


@dataclass
class EventRoll:
    """Per-label onset/offset intervals in seconds; different labels may overlap."""

    duration: float
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        tracks = []
        for ev in self.events:
            if isinstance(ev, dict):
                ev = EventTrack(ev["label"], ev.get("intervals", []))
            if not ev.label:
                raise ValueError("event labels must be non-empty")
            intervals = [(float(a), float(b)) for a, b in ev.intervals]
            for on, off in intervals:
                if not 0 <= on < off <= self.duration + 1e-9:
                    raise ValueError(f"bad interval ({on}, {off}) for {ev.label!r} in a {self.duration} s roll")
            tracks.append(EventTrack(ev.label, intervals))
        self.events = tracks

    @property
    def labels(self) -> list:
        return sorted({ev.label for ev in self.events})

    def intervals_for(self, label: str) -> list:
        return [iv for ev in self.events if ev.label == label for iv in ev.intervals]

    def active(self, label: str, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        mask = np.zeros(times.shape, dtype=bool)
        for on, off in self.intervals_for(label):
            mask |= (times >= on) & (times < off)
        return mask

    def to_json(self) -> dict:
        return {
            "duration": self.duration,
            "events": [{"label": ev.label, "intervals": [list(iv) for iv in ev.intervals]} for ev in self.events],
        }

    @classmethod
    def from_json(cls, obj) -> "EventRoll":
        if isinstance(obj, (str, Path)) and Path(obj).is_file():
            obj = json.loads(Path(obj).read_text())
        elif isinstance(obj, str):
            obj = json.loads(obj)
        return cls(float(obj["duration"]), list(obj.get("events", [])))


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray


def n_frames_for(duration: float, frame_rate: float = FRAME_RATE) -> int:
    return max(1, int(round(duration * frame_rate)))


def center_pad(clip: AudioClip, spec: FrameSpec) -> AudioClip:
    """Reflect-pad by half a frame on each side so frame ``t`` is centered on ``t * hop``."""
    half = spec.frame_length // 2
    mode = "reflect" if clip.samples.size > half else "constant"
    return AudioClip(np.pad(clip.samples, half, mode=mode), clip.sample_rate)


# -- loudness ---------------------------------------------------------------------

def extract_loudness(clip: AudioClip, spec: FrameSpec = FrameSpec(), window: int = 11,
                     poly_order: int = 3, eps: float = dsp.DB_EPS) -> LoudnessCurve:
    rms = dsp.frame_rms(center_pad(clip, spec), spec)
    db = dsp.savgol_filter(dsp.rms_to_db(rms, eps), window, poly_order)
    return LoudnessCurve(db=db, frame_rate=spec.frame_rate(clip.sample_rate))


def normalize_loudness(db) -> np.ndarray:
    lo, hi = LOUDNESS_RANGE_DB
    return 2.0 * (np.asarray(db, dtype=np.float64) - lo) / (hi - lo) - 1.0


def loudness_to_condition(curve: LoudnessCurve, width: int) -> ConditionSequence:
    if width < 1:
        raise ValueError("width must be >= 1")
    scalar = normalize_loudness(curve.db)
    return ConditionSequence("loudness", np.repeat(scalar[:, None], width, axis=1), curve.frame_rate)


# -- pitch ------------------------------------------------------------------------

def pitch_scalogram(clip: AudioClip, spec: FrameSpec = FrameSpec(), scales=PITCH_SCALES,
                    fmin: float = 60.0, fmax: float = 1000.0) -> np.ndarray:
    """Ricker CWT of the gap-filled log-f0 contour, ``[S, T]``."""
    track = dsp.estimate_f0(center_pad(clip, spec), spec, fmin, fmax)
    # frames whose window reaches into the reflect padding see a phase jump;
    # hold the nearest fully covered frame instead
    half = spec.frame_length // 2
    centers = np.arange(len(track.f0)) * spec.hop
    covered = (centers >= half) & (centers + half <= clip.samples.size)
    if (track.voiced & covered).any():
        track = dsp.F0Track(track.f0, track.voiced & covered, track.frame_rate)
    f0 = dsp.fill_unvoiced(track)
    if not track.voiced.any():
        f0 = np.full(f0.shape, fmin)
    return dsp.ricker_cwt(np.log(f0), scales).values


def extract_pitch(clip: AudioClip, spec: FrameSpec = FrameSpec(), scales=PITCH_SCALES,
                  n_bins: int = N_PITCH_BINS, value_range=DEFAULT_PITCH_RANGE,
                  fmin: float = 60.0, fmax: float = 1000.0) -> PitchCode:
    """Quantized multi-scale pitch code.

    ``value_range`` is the corpus-level (lo, hi) of the scalogram values;
    a trained model carries its own in the checkpoint.
    """
    cwt = pitch_scalogram(clip, spec, scales, fmin, fmax)
    lo, hi = value_range
    bins = dsp.quantize_uniform(cwt, n_bins, lo, hi).T
    return PitchCode(bins=bins, frame_rate=spec.frame_rate(clip.sample_rate))


def pitch_to_condition(code: PitchCode, codebook) -> ConditionSequence:
    """Average of the codebook rows picked by each scale's bin."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if code.bins.size and (code.bins.min() < 0 or code.bins.max() >= codebook.shape[0]):
        raise ValueError(f"pitch bin outside codebook range [0, {codebook.shape[0]})")
    return ConditionSequence("pitch", codebook[code.bins].mean(axis=1), code.frame_rate)


# -- events -----------------------------------------------------------------------

def _label_seed(label: str) -> int:
    digest = hashlib.blake2b(label.lower().encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def embed_label(label: str, width: int = TEXT_WIDTH) -> TextEmbedding:
    """Deterministic unit vector for a label (stand-in for a text encoder)."""
    if not label:
        raise ValueError("label must be a non-empty string")
    gen = np.random.Generator(np.random.Philox(key=_label_seed(label)))
    v = gen.standard_normal(width)
    return TextEmbedding(v / np.linalg.norm(v))


def frame_times(n_frames: int, frame_rate: float = FRAME_RATE) -> np.ndarray:
    return (np.arange(n_frames) + 0.5) / frame_rate


def event_activity(roll: EventRoll, n_frames: int | None = None, frame_rate: float = FRAME_RATE,
                   width: int = TEXT_WIDTH) -> np.ndarray:
    """Sum of active label embeddings per frame, ``[T, width]`` (before projection)."""
    T = n_frames_for(roll.duration, frame_rate) if n_frames is None else n_frames
    times = frame_times(T, frame_rate)
    out = np.zeros((T, width))
    for label in roll.labels:
        active = roll.active(label, times)
        if active.any():
            out[active] += embed_label(label, width).vector
    return out


def eventroll_to_condition(roll: EventRoll, proj, frame_rate: float = FRAME_RATE,
                           n_frames: int | None = None) -> ConditionSequence:
    """Project the summed label embeddings with ``proj[D, 64]``."""
    proj = np.asarray(proj, dtype=np.float64)
    activity = event_activity(roll, n_frames, frame_rate, proj.shape[1])
    return ConditionSequence("event", activity @ proj.T, frame_rate)


def resample_nearest(values, n_frames: int) -> np.ndarray:
    """Nearest-frame time resampling of ``[T, D]`` to ``[n_frames, D]``."""
    values = np.asarray(values)
    src = values.shape[0]
    if src == n_frames:
        return values
    idx = np.floor((np.arange(n_frames) + 0.5) * src / n_frames).astype(int)
    return values[np.clip(idx, 0, src - 1)]
