"""Synthetic tone corpus and insert/remove edit-pair simulation.

Each label in the toy vocabulary owns a fixed-frequency tone, so clips are
"detectable by construction": the band around that frequency carries the
label's energy and nothing else. :class:`ToneBank` is the matching
analysis/synthesis pair that turns audio into per-band level features (the
model's data space) and back.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .conditions import FRAME_RATE, EventRoll, EventTrack, frame_times, n_frames_for
from .dsp import SAMPLE_RATE, AudioClip, FrameSpec

VOCABULARY = (
    "alarm", "bell", "bird", "cat", "clap", "dog",
    "drum", "engine", "siren", "speech", "water", "whistle",
)
AMBIENCE_HZ = 100.0
LEVEL_FLOOR_DB = -80.0
RAMP_S = 0.010
PEAK = 0.9
TARGET_MIN_S, TARGET_MAX_S = 0.5, 4.0


def label_frequencies(vocabulary=VOCABULARY, lo: float = 600.0, hi: float = 8000.0) -> dict:
    """Log-spaced tone frequency per label, rounded to whole Hz."""
    freqs = np.geomspace(lo, hi, len(vocabulary))
    return {label: float(np.round(f)) for label, f in zip(vocabulary, freqs)}


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_clips: int = 512
    duration: float = 6.0
    vocabulary: tuple = VOCABULARY
    events_per_clip: tuple = (1, 3)
    event_length: tuple = (0.5, 3.0)
    gain_db: tuple = (-20.0, 0.0)
    ambience_db: tuple = (-45.0, -30.0)
    seed: int = 0

    def __post_init__(self):
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary labels must be distinct")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def frequencies(self) -> dict:
        return label_frequencies(self.vocabulary)


@dataclass
class ToyClip:
    """Recipe for one corpus clip; audio is rendered on demand."""

    roll: EventRoll
    gains_db: dict
    ambience_db: float | None

    @property
    def caption(self) -> list:
        return self.roll.labels


def _raised_cosine_gate(n: int, start: int, stop: int, ramp: int) -> np.ndarray:
    gate = np.zeros(n)
    start, stop = max(0, start), min(n, stop)
    if stop <= start:
        return gate
    gate[start:stop] = 1.0
    r = min(ramp, (stop - start) // 2)
    if r > 0:
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        gate[start:start + r] = up
        gate[stop - r:stop] = up[::-1]
    return gate


def synth_toy_clip(spec: ToyCorpusSpec, roll: EventRoll, gains_db: dict | None = None,
                   ambience_db: float | None = None, sample_rate: int = SAMPLE_RATE,
                   normalize: bool = True) -> AudioClip:
    """Render an event roll as summed label tones, peak-normalized to 0.9."""
    freqs = spec.frequencies
    unknown = [label for label in roll.labels if label not in freqs]
    if unknown:
        raise ValueError(f"labels not in vocabulary: {unknown}")
    n = int(round(roll.duration * sample_rate))
    t = np.arange(n) / sample_rate
    ramp = int(round(RAMP_S * sample_rate))
    out = np.zeros(n)
    for ev in roll.events:
        gain = 10 ** ((gains_db or {}).get(ev.label, 0.0) / 20)
        envelope = np.zeros(n)
        for on, off in ev.intervals:
            envelope += _raised_cosine_gate(n, int(round(on * sample_rate)), int(round(off * sample_rate)), ramp)
        out += gain * envelope * np.sin(2 * np.pi * freqs[ev.label] * t)
    if ambience_db is not None:
        out += 10 ** (ambience_db / 20) * np.sin(2 * np.pi * AMBIENCE_HZ * t)
    peak = np.max(np.abs(out))
    if normalize and peak > 0:
        out *= PEAK / peak
    return AudioClip(out, sample_rate)


def random_roll(spec: ToyCorpusSpec, rng: np.random.Generator, labels=None) -> EventRoll:
    lo, hi = spec.events_per_clip
    if labels is None:
        k = int(rng.integers(lo, hi + 1))
        labels = rng.choice(len(spec.vocabulary), size=k, replace=False)
        labels = [spec.vocabulary[i] for i in sorted(labels)]
    tracks = []
    for label in labels:
        length = rng.uniform(spec.event_length[0], min(spec.event_length[1], spec.duration))
        onset = rng.uniform(0.0, spec.duration - length)
        tracks.append(EventTrack(label, [(round(onset, 3), round(onset + length, 3))]))
    return EventRoll(spec.duration, tracks)


def make_toy_corpus(spec: ToyCorpusSpec) -> list:
    """Seeded list of :class:`ToyClip` recipes."""
    rng = np.random.default_rng(spec.seed)
    clips = []
    for _ in range(spec.n_clips):
        roll = random_roll(spec, rng)
        gains = {label: float(rng.uniform(*spec.gain_db)) for label in roll.labels}
        ambience = float(rng.uniform(*spec.ambience_db))
        clips.append(ToyClip(roll, gains, ambience))
    return clips


def render(spec: ToyCorpusSpec, clip: ToyClip) -> AudioClip:
    return synth_toy_clip(spec, clip.roll, clip.gains_db, clip.ambience_db)


# -- band features ----------------------------------------------------------------

class ToneBank:
    """Per-band level analysis and the inverse tone synthesis.

    Band ``k`` is a fixed frequency: the vocabulary tones first, then the
    ambience hum, then spare bands above the vocabulary. Features are levels
    in dB mapped affinely from [-80, 0] dB to [-1, 1].
    """

    def __init__(self, n_bands: int = 16, n_frames: int = 64, duration: float = 6.0,
                 vocabulary=VOCABULARY, sample_rate: int = SAMPLE_RATE, window: int = 4096):
        freqs = list(label_frequencies(vocabulary).values()) + [AMBIENCE_HZ]
        if n_bands < len(freqs):
            raise ValueError(f"need at least {len(freqs)} bands for this vocabulary")
        ratio = freqs[len(vocabulary) - 1] / freqs[len(vocabulary) - 2]
        top = freqs[len(vocabulary) - 1]
        while len(freqs) < n_bands:
            top = top * ratio
            freqs.append(float(np.round(min(top, 0.45 * sample_rate))))
        self.freqs = np.array(freqs[:n_bands])
        self.vocabulary = tuple(vocabulary)
        self.n_frames = n_frames
        self.duration = duration
        self.sample_rate = sample_rate
        self.n_samples = int(round(duration * sample_rate))
        self.window = window
        hann = np.hanning(window)
        n = np.arange(window) - window // 2
        self._centers = np.round((np.arange(n_frames) + 0.5) * self.n_samples / n_frames).astype(int)
        self._kernel = hann[:, None] * np.exp(-2j * np.pi * np.outer(n, self.freqs) / sample_rate)
        self._norm = 2.0 / hann.sum()

    @property
    def frame_rate(self) -> float:
        return self.n_frames / self.duration

    def band_of(self, label: str) -> int:
        return self.vocabulary.index(label)

    def amplitudes(self, clip: AudioClip) -> np.ndarray:
        """Per-frame tone amplitude estimate ``[n_frames, n_bands]``."""
        x = clip.samples
        half = self.window // 2
        padded = np.pad(x, (half, half + max(0, self.n_samples - x.size)))
        frames = np.stack([padded[c:c + self.window] for c in self._centers])
        return np.abs(frames @ self._kernel) * self._norm

    def analyze(self, clip: AudioClip) -> np.ndarray:
        return amplitude_to_feature(self.amplitudes(clip))

    def synthesize(self, features) -> AudioClip:
        """Render ``[n_frames, n_bands]`` features as tones with interpolated amplitudes."""
        amps = feature_to_amplitude(features)
        t = np.arange(self.n_samples)
        out = np.zeros(self.n_samples)
        for k, f in enumerate(self.freqs):
            env = np.interp(t, self._centers, amps[:, k])
            out += env * np.sin(2 * np.pi * f * t / self.sample_rate)
        return AudioClip(np.clip(out, -1.0, 1.0), self.sample_rate)


def amplitude_to_feature(amps) -> np.ndarray:
    db = 20 * np.log10(np.maximum(np.asarray(amps, dtype=np.float64), 1e-12))
    return (np.clip(db, LEVEL_FLOOR_DB, 0.0) - LEVEL_FLOOR_DB / 2) / (-LEVEL_FLOOR_DB / 2)


def feature_to_amplitude(features) -> np.ndarray:
    u = np.clip(np.asarray(features, dtype=np.float64), -1.0, 1.0)
    db = u * (-LEVEL_FLOOR_DB / 2) + LEVEL_FLOOR_DB / 2
    return 10 ** (db / 20)


# -- target segmentation and edit pairs --------------------------------------------

def segment_targets(clip: AudioClip, energy_threshold_db: float = -40.0,
                    spec: FrameSpec = FrameSpec(512, 128)) -> list:
    """Runs of frames above the energy threshold, as (start s, end s) within [0.5, 4] s.

    Longer runs are split into equal pieces no longer than 4 s; runs shorter
    than 0.5 s are dropped.
    """
    half = spec.frame_length // 2
    padded = np.pad(clip.samples, half)
    db = dsp.rms_to_db(dsp.frame_rms(AudioClip(padded, clip.sample_rate), spec))
    above = np.concatenate([[False], db > energy_threshold_db, [False]])
    edges = np.flatnonzero(np.diff(above.astype(int)))
    segments = []
    for a, b in zip(edges[::2], edges[1::2]):
        start = max(0.0, (a - 0.5) * spec.hop / clip.sample_rate)
        end = min(clip.duration, (b - 0.5) * spec.hop / clip.sample_rate)
        length = end - start
        if length < TARGET_MIN_S:
            continue
        pieces = int(np.ceil(length / TARGET_MAX_S))
        bounds = np.linspace(start, end, pieces + 1)
        segments.extend((float(lo), float(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return segments


def cut(clip: AudioClip, start: float, end: float) -> AudioClip:
    sr = clip.sample_rate
    return AudioClip(clip.samples[int(round(start * sr)):int(round(end * sr))], sr)


EDIT_GRAMMAR = "action: label: start: end   (e.g. 'insert: clap: 2.0: 2.5')"
_SPEC_RE = re.compile(r"^\s*(insert|remove)\s*:\s*([^:]+?)\s*:\s*([^:]+?)\s*:\s*([^:]+?)\s*$")


@dataclass(frozen=True)
class EditSpec:
    action: str
    label: str
    start: float
    end: float

    def __post_init__(self):
        if self.action not in ("insert", "remove"):
            raise ValueError(f"action must be insert or remove, got {self.action!r}")
        if not self.label or ":" in self.label:
            raise ValueError("label must be non-empty and contain no ':'")
        if not (np.isfinite(self.start) and np.isfinite(self.end)) or not 0 <= self.start < self.end:
            raise ValueError(f"need 0 <= start < end, got {self.start}, {self.end}")

    @classmethod
    def parse(cls, text: str) -> "EditSpec":
        m = _SPEC_RE.match(text)
        if not m:
            raise ValueError(f"malformed edit spec {text!r}; expected {EDIT_GRAMMAR}")
        action, label, start, end = m.groups()
        try:
            start, end = float(start), float(end)
        except ValueError:
            raise ValueError(f"malformed edit spec {text!r}; expected {EDIT_GRAMMAR}") from None
        return cls(action, label, start, end)

    def format(self) -> str:
        return f"{self.action}: {self.label}: {self.start!r}: {self.end!r}"

    def describe(self) -> str:
        return f"{self.action} {self.label} sound: from {self.start:.1f} s to {self.end:.1f} s"

    def roll(self, duration: float) -> EventRoll:
        return EventRoll(duration, [EventTrack(self.label, [(self.start, min(self.end, duration))])])


@dataclass
class EditPair:
    background: AudioClip
    caption_labels: list
    target: AudioClip
    target_label: str
    action: str
    span: tuple
    input_audio: AudioClip
    output_audio: AudioClip
    edit_mask: np.ndarray
    instruction: EditSpec = field(init=False)

    def __post_init__(self):
        self.instruction = EditSpec(self.action, self.target_label, *self.span)

    def check(self):
        """Assert the structural invariants of a simulated pair."""
        length = self.target.duration
        assert TARGET_MIN_S - 1e-9 <= length <= TARGET_MAX_S + 1e-9, length
        assert self.target_label not in self.caption_labels
        start, end = self.span
        assert 0 <= start < end <= self.background.duration + 1e-9
        assert set(np.unique(self.edit_mask)) <= {0, 1}
        assert len(self.input_audio) == len(self.output_audio) == len(self.background)


def edit_mask_for(span, duration: float, frame_rate: float = FRAME_RATE, n_frames: int | None = None) -> np.ndarray:
    T = n_frames_for(duration, frame_rate) if n_frames is None else n_frames
    times = frame_times(T, frame_rate)
    return ((times >= span[0]) & (times < span[1])).astype(np.int64)


def mix_gain(background: AudioClip, target: AudioClip) -> float:
    """Scale so the target peak sits 3 dB above the background RMS."""
    bg_rms = float(np.sqrt(np.mean(background.samples ** 2)))
    peak = float(np.max(np.abs(target.samples)))
    if peak == 0:
        return 0.0
    goal = bg_rms * 10 ** (3 / 20) if bg_rms > 0 else 0.5
    return goal / peak


def make_edit_pair(background: AudioClip, caption_labels, target: AudioClip, target_label: str,
                   action: str, rng: np.random.Generator, frame_rate: float = FRAME_RATE,
                   start: float | None = None) -> EditPair:
    """Insert ``target`` into ``background`` at a random position.

    ``insert`` pairs map background -> mixture, ``remove`` pairs the reverse.
    """
    if action not in ("insert", "remove"):
        raise ValueError(f"unknown action {action!r}")
    if target_label in caption_labels:
        raise ValueError(f"target label {target_label!r} already in the caption")
    if len(target) > len(background):
        raise ValueError("target is longer than the background")
    sr = background.sample_rate
    room = len(background) - len(target)
    offset = int(rng.integers(0, room + 1)) if start is None else int(round(start * sr))
    offset = min(max(offset, 0), room)
    mixed = background.samples.copy()
    mixed[offset:offset + len(target)] += mix_gain(background, target) * target.samples
    mixture = AudioClip(mixed, sr)
    span = (offset / sr, (offset + len(target)) / sr)
    inp, out = (background, mixture) if action == "insert" else (mixture, background)
    mask = edit_mask_for(span, background.duration, frame_rate)
    return EditPair(background, list(caption_labels), target, target_label, action, span, inp, out, mask)


def target_pool(spec: ToyCorpusSpec, rng: np.random.Generator, per_label: int = 4) -> dict:
    """Segmented single-event target clips, ``{label: [AudioClip, ...]}``."""
    pool = {}
    for label in spec.vocabulary:
        clips = []
        while len(clips) < per_label:
            length = rng.uniform(TARGET_MIN_S + 0.1, min(TARGET_MAX_S, spec.duration))
            onset = rng.uniform(0.0, spec.duration - length)
            roll = EventRoll(spec.duration, [EventTrack(label, [(onset, onset + length)])])
            audio = synth_toy_clip(spec, roll)
            for lo, hi in segment_targets(audio):
                clips.append(cut(audio, lo, hi))
        pool[label] = clips[:per_label]
    return pool


def simulate_edit_pairs(spec: ToyCorpusSpec, corpus: list, n_pairs: int, rng: np.random.Generator,
                        actions=("insert", "remove"), pool: dict | None = None):
    """Yield ``(clip_index, EditPair)``; targets whose label is in the caption are resampled."""
    pool = target_pool(spec, rng) if pool is None else pool
    for i in range(n_pairs):
        idx = int(rng.integers(len(corpus)))
        item = corpus[idx]
        background = render(spec, item)
        while True:
            label = spec.vocabulary[int(rng.integers(len(spec.vocabulary)))]
            if label not in item.caption:
                break
        target = pool[label][int(rng.integers(len(pool[label])))]
        action = actions[i % len(actions)]
        yield idx, make_edit_pair(background, item.caption, target, label, action, rng)


def write_corpus(directory, spec: ToyCorpusSpec, corpus: list, splits=(0.8, 0.1, 0.1),
                 n_pairs: int = 0, rng: np.random.Generator | None = None):
    """Write clips/*.wav, rolls/*.json, captions/*.json, pairs/*.json and manifest.json."""
    from .io import write_wav

    root = Path(directory)
    for sub in ("clips", "rolls", "captions", "pairs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i, item in enumerate(corpus):
        name = f"clip{i:05d}"
        write_wav(root / "clips" / f"{name}.wav", render(spec, item))
        (root / "rolls" / f"{name}.json").write_text(json.dumps(item.roll.to_json()))
        (root / "captions" / f"{name}.json").write_text(json.dumps(item.caption))
        names.append(name)
    n_train = int(round(splits[0] * len(names)))
    n_val = int(round(splits[1] * len(names)))
    manifest = {
        "spec": {"n_clips": spec.n_clips, "duration": spec.duration, "seed": spec.seed,
                 "vocabulary": list(spec.vocabulary)},
        "splits": {"train": names[:n_train], "val": names[n_train:n_train + n_val],
                   "test": names[n_train + n_val:]},
        "pairs": [],
    }
    if n_pairs:
        rng = np.random.default_rng(spec.seed + 1) if rng is None else rng
        for j, (idx, pair) in enumerate(simulate_edit_pairs(spec, corpus, n_pairs, rng)):
            record = {"background": names[idx], "instruction": pair.instruction.format(),
                      "caption": pair.caption_labels, "span": list(pair.span)}
            (root / "pairs" / f"pair{j:05d}.json").write_text(json.dumps(record))
            manifest["pairs"].append(f"pair{j:05d}")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
