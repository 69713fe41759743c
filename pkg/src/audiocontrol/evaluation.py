"""Objective metrics: loudness/pitch MAE, event- and segment-based F1, edit score.

The sound event detector here is a band-energy detector that knows each toy
label's tone frequency. It stands in for a learned detector on the
synthetic corpus, where it is exact by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from . import conditions, dsp
from .conditions import EventRoll, EventTrack, LoudnessCurve
from .data import label_frequencies
from .dsp import AudioClip, F0Track, FrameSpec

SED_SPEC = FrameSpec(2048, 512)
SED_FLOOR_DB = -50.0
SED_CEIL_DB = -20.0


@dataclass
class DetectionResult:
    duration: float
    intervals: dict  # label -> [(onset, offset), ...]
    probabilities: dict = field(default_factory=dict)  # label -> per-frame activity in [0, 1]
    frame_times: np.ndarray | None = None

    def to_roll(self) -> EventRoll:
        tracks = [EventTrack(label, ivs) for label, ivs in sorted(self.intervals.items()) if ivs]
        return EventRoll(self.duration, tracks)


@dataclass
class F1Report:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    per_label: dict = field(default_factory=dict)


def f_measure(tp: int, fp: int, fn: int) -> tuple:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def _report(tp, fp, fn, per_label) -> F1Report:
    if tp + fp + fn == 0:
        # nothing to find and nothing claimed: identical empty inputs
        return F1Report(1.0, 1.0, 1.0, 0, 0, 0, per_label)
    f1, p, r = f_measure(tp, fp, fn)
    return F1Report(f1, p, r, tp, fp, fn, per_label)


def _as_roll(hyp) -> EventRoll:
    return hyp.to_roll() if isinstance(hyp, DetectionResult) else hyp


# -- detector ---------------------------------------------------------------------

def band_levels(clip: AudioClip, freqs: dict, spec: FrameSpec = SED_SPEC) -> tuple:
    """Per-label band level in dB (mean-square scale) at centered frames."""
    half = spec.frame_length // 2
    frames = dsp.frame_signal(np.pad(clip.samples, half), spec)
    window = np.blackman(spec.frame_length)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    power *= 2.0 / (spec.frame_length * np.sum(window ** 2))
    bin_hz = clip.sample_rate / spec.frame_length
    labels = sorted(freqs, key=freqs.get)
    centers = np.array([freqs[lab] for lab in labels])
    # band edges halfway (geometric) between neighbouring tones
    edges = np.sqrt(centers[:-1] * centers[1:])
    lo = np.concatenate([[centers[0] / 1.15], edges])
    hi = np.concatenate([edges, [centers[-1] * 1.15]])
    levels = {}
    for label, a, b in zip(labels, lo, hi):
        k0, k1 = int(np.ceil(a / bin_hz)), int(np.floor(b / bin_hz))
        band = power[:, k0:k1 + 1].sum(axis=1)
        levels[label] = 10 * np.log10(band + 1e-12)
    times = np.arange(frames.shape[0]) * spec.hop / clip.sample_rate
    return levels, times


def toy_sed(clip: AudioClip, vocabulary, threshold: float = 0.5, median: int = 5,
            spec: FrameSpec = SED_SPEC) -> DetectionResult:
    """Detect toy labels by thresholding their tone-band energy."""
    vocabulary = tuple(vocabulary)
    if not vocabulary:
        raise ValueError("empty vocabulary")
    freqs = label_frequencies(vocabulary)
    levels, times = band_levels(clip, freqs, spec)
    hop_s = spec.hop / clip.sample_rate
    intervals, probs = {}, {}
    for label in vocabulary:
        p = np.clip((levels[label] - SED_FLOOR_DB) / (SED_CEIL_DB - SED_FLOOR_DB), 0.0, 1.0)
        active = median_filter((p >= threshold).astype(np.int8), size=median, mode="nearest").astype(bool)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], active.astype(int), [0]])))
        ivs = []
        for a, b in zip(edges[::2], edges[1::2]):
            on = max(0.0, times[a] - hop_s / 2)
            off = min(clip.duration, times[b - 1] + hop_s / 2)
            if off > on:
                ivs.append((float(on), float(off)))
        intervals[label] = ivs
        probs[label] = p
    return DetectionResult(clip.duration, intervals, probs, times)


# -- F1 metrics -------------------------------------------------------------------

def event_f1(ref: EventRoll, hyp, collar: float = 0.2, offset_ratio: float = 0.2) -> F1Report:
    """Event-based F1 with onset collar and offset tolerance max(collar, ratio * ref length).

    Matching is one-to-one and greedy: reference events in onset order each
    take the admissible hypothesis with the smallest onset difference.
    """
    if collar <= 0:
        raise ValueError("collar must be positive")
    hyp = _as_roll(hyp)
    refs = sorted(((on, off, lab) for lab in ref.labels for on, off in ref.intervals_for(lab)),
                  key=lambda e: (e[0], e[2]))
    hyps = sorted((on, off, lab) for lab in hyp.labels for on, off in hyp.intervals_for(lab))
    used = [False] * len(hyps)
    per_label = {}
    tp = 0
    for on, off, lab in refs:
        tol_off = max(collar, offset_ratio * (off - on))
        best, best_key = None, None
        for j, (h_on, h_off, h_lab) in enumerate(hyps):
            if used[j] or h_lab != lab:
                continue
            if abs(h_on - on) <= collar and abs(h_off - off) <= tol_off:
                key = (abs(h_on - on), h_on)
                if best_key is None or key < best_key:
                    best, best_key = j, key
        if best is not None:
            used[best] = True
            tp += 1
            per_label[lab] = per_label.get(lab, 0) + 1
    fp = len(hyps) - tp
    fn = len(refs) - tp
    labels = sorted(set(ref.labels) | set(hyp.labels))
    breakdown = {}
    for lab in labels:
        n_ref = len(ref.intervals_for(lab))
        n_hyp = len(hyp.intervals_for(lab))
        hits = per_label.get(lab, 0)
        breakdown[lab] = f_measure(hits, n_hyp - hits, n_ref - hits)[0]
    return _report(tp, fp, fn, breakdown)


def segment_activity(roll: EventRoll, labels, segment: float, duration: float) -> np.ndarray:
    """Boolean ``[n_segments, n_labels]``: label active anywhere inside the segment."""
    n_seg = int(np.ceil(duration / segment - 1e-9))
    starts = np.arange(n_seg) * segment
    ends = np.minimum(starts + segment, duration)
    out = np.zeros((n_seg, len(labels)), dtype=bool)
    for j, lab in enumerate(labels):
        for on, off in roll.intervals_for(lab):
            out[:, j] |= (on < ends) & (off > starts)
    return out


def segment_f1(ref: EventRoll, hyp, segment: float = 1.0) -> F1Report:
    """Micro-averaged F1 over (segment, label) cells."""
    if segment <= 0:
        raise ValueError("segment length must be positive")
    hyp = _as_roll(hyp)
    labels = sorted(set(ref.labels) | set(hyp.labels))
    duration = max(ref.duration, hyp.duration)
    r = segment_activity(ref, labels, segment, duration)
    h = segment_activity(hyp, labels, segment, duration)
    tp = int(np.sum(r & h))
    fp = int(np.sum(~r & h))
    fn = int(np.sum(r & ~h))
    breakdown = {lab: f_measure(int(np.sum(r[:, j] & h[:, j])), int(np.sum(~r[:, j] & h[:, j])),
                                int(np.sum(r[:, j] & ~h[:, j])))[0] for j, lab in enumerate(labels)}
    return _report(tp, fp, fn, breakdown)


def pooled(reports) -> F1Report:
    """Micro-average a list of reports by summing their counts."""
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    return _report(tp, fp, fn, {})


# -- feature MAE ------------------------------------------------------------------

def curve_mae(a, b, tolerance: int = 1) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if abs(a.size - b.size) > tolerance:
        raise ValueError(f"length mismatch {a.size} vs {b.size} exceeds {tolerance} frame(s)")
    n = min(a.size, b.size)
    return float(np.mean(np.abs(a[:n] - b[:n])))


def loudness_mae(gen: AudioClip, target: LoudnessCurve, spec: FrameSpec = FrameSpec()) -> float:
    """Mean absolute dB difference between the generated loudness and the target curve."""
    return curve_mae(conditions.extract_loudness(gen, spec).db, target.db)


def pitch_mae(gen: AudioClip, target: F0Track, spec: FrameSpec = FrameSpec(),
              fmin: float = 60.0, fmax: float = 1000.0) -> float:
    """Mean |f0 difference| in Hz over frames voiced in both; NaN when there are none."""
    track = dsp.estimate_f0(gen, spec, fmin, fmax)
    n = min(len(track.f0), len(target.f0))
    if abs(len(track.f0) - len(target.f0)) > 1:
        raise ValueError("track lengths differ by more than one frame")
    both = track.voiced[:n] & np.asarray(target.voiced)[:n]
    if not both.any():
        return float("nan")
    return float(np.mean(np.abs(track.f0[:n][both] - np.asarray(target.f0)[:n][both])))


def edit_score(gen: AudioClip, label: str, span, vocabulary) -> float:
    """Mean detector activity for ``label`` over frames centered inside ``span``."""
    start, end = span
    if not 0 <= start < end <= gen.duration + 1e-9:
        raise ValueError(f"span {span} outside the clip")
    det = toy_sed(gen, vocabulary)
    inside = (det.frame_times >= start) & (det.frame_times <= end)
    if not inside.any():
        inside[np.argmin(np.abs(det.frame_times - 0.5 * (start + end)))] = True
    return float(np.mean(det.probabilities[label][inside]))
