"""Desk-scale experiments: corpus features, training runs, and the controllability evaluations.

The synthetic "audio" representation is the tone-bank band-level sequence
(one band per vocabulary label plus an ambience hum), mapped into the model
latent by :class:`~audiocontrol.model.LatentCodec`. Generated latents are
rendered back to audio through the tone synthesis head so that every metric
runs on waveforms with the same extractors and detector as the references.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import conditions, dsp, evaluation
from .conditions import EventRoll, EventTrack
from .data import ToneBank, ToyCorpusSpec, make_toy_corpus, render, simulate_edit_pairs, target_pool
from .dsp import AudioClip
from .model import AdapterBranch, Backbone, BackboneConfig, EditorBranch, ModelBundle
from .train import FlowData, SampleConfig, TrainConfig, fit, sample, sample_edit

log = logging.getLogger(__name__)

N_LATENT_FRAMES = 64


@dataclass
class DeskCorpus:
    """Rendered corpus with its latents and condition inputs."""

    spec: ToyCorpusSpec
    items: list
    bank: ToneBank
    latents: np.ndarray  # [N, T, W]
    loudness_db: np.ndarray  # [N, T_feat]
    activity: np.ndarray  # [N, T_feat, 64]
    audio: list = field(default_factory=list, repr=False)

    @property
    def captions(self) -> list:
        return [item.caption for item in self.items]

    def loudness_input(self, idx=slice(None), width: int = 16) -> np.ndarray:
        norm = conditions.normalize_loudness(self.loudness_db[idx])
        return np.repeat(norm[..., None], width, axis=-1)


def build_corpus(spec: ToyCorpusSpec, codec, bank: ToneBank | None = None, keep_audio: bool = True) -> DeskCorpus:
    bank = bank or ToneBank(n_frames=N_LATENT_FRAMES, duration=spec.duration, vocabulary=spec.vocabulary)
    items = make_toy_corpus(spec)
    latents, loud, act, audio = [], [], [], []
    n_feat = conditions.n_frames_for(spec.duration)
    for item in items:
        clip = render(spec, item)
        latents.append(codec.encode(bank.analyze(clip)))
        db = conditions.extract_loudness(clip).db
        loud.append(conditions.resample_nearest(db[:, None], n_feat)[:, 0])
        act.append(conditions.event_activity(item.roll, n_feat))
        if keep_audio:
            audio.append(clip)
    return DeskCorpus(spec, items, bank, np.stack(latents), np.stack(loud), np.stack(act), audio)


def render_latents(bundle: ModelBundle, bank: ToneBank, latents) -> list:
    return [bank.synthesize(bundle.codec.decode(z)) for z in np.asarray(latents)]


# -- edit pairs ---------------------------------------------------------------------

@dataclass
class EditSet:
    pairs: list
    ref: np.ndarray  # [N, T, W] input latents
    out: np.ndarray  # [N, T, W] target latents
    activity: np.ndarray  # [N, T_feat, 64] signed edit events
    mask: np.ndarray  # [N, T] latent-rate edit mask

    def flow_data(self) -> FlowData:
        return FlowData(self.out, [[] for _ in self.pairs], (self.ref, self.activity), self.mask)


def edit_activity(label: str, span, action: str, duration: float) -> np.ndarray:
    """Edit-event condition: the label's embedding over the span, negated for removals."""
    roll = EventRoll(duration, [EventTrack(label, [tuple(span)])])
    sign = 1.0 if action == "insert" else -1.0
    return sign * conditions.event_activity(roll, conditions.n_frames_for(duration))


def build_edit_set(spec: ToyCorpusSpec, items: list, n_pairs: int, codec, bank: ToneBank,
                   seed: int = 0) -> EditSet:
    rng = np.random.default_rng(seed)
    pool = target_pool(spec, rng)
    pairs, ref, out, act, mask = [], [], [], [], []
    for _, pair in simulate_edit_pairs(spec, items, n_pairs, rng, pool=pool):
        pairs.append(pair)
        ref.append(codec.encode(bank.analyze(pair.input_audio)))
        out.append(codec.encode(bank.analyze(pair.output_audio)))
        act.append(edit_activity(pair.target_label, pair.span, pair.action, spec.duration))
        times = (np.arange(bank.n_frames) + 0.5) / bank.frame_rate
        mask.append(((times >= pair.span[0]) & (times < pair.span[1])).astype(np.int64))
    return EditSet(pairs, np.stack(ref), np.stack(out), np.stack(act), np.stack(mask))


# -- experiment config -----------------------------------------------------------------

@dataclass
class DeskConfig:
    """Sizes for the end-to-end desk runs."""

    n_clips: int = 512
    n_eval: int = 20
    backbone_steps: int = 5000
    branch_steps: int = 5000
    editor_steps: int = 5000
    n_pairs: int = 512
    batch_size: int = 16
    learning_rate: float = 1e-3
    adapter_depth: int = 4
    adapter_proj: bool = True
    adapter_query_pos: float = 4.0
    lora_rank: int = 64
    sample: SampleConfig = field(default_factory=SampleConfig)
    seed: int = 0


def corpus_spec(cfg: DeskConfig, split: str) -> ToyCorpusSpec:
    if split == "train":
        return ToyCorpusSpec(n_clips=cfg.n_clips, seed=cfg.seed)
    return ToyCorpusSpec(n_clips=cfg.n_eval, seed=cfg.seed + 10_000)


def train_config(cfg: DeskConfig, steps: int, seed_offset: int = 0) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, steps=steps,
                       seed=cfg.seed + seed_offset, log_every=100)


def train_backbone(bundle: ModelBundle, corpus: DeskCorpus, cfg: DeskConfig, **kw):
    data = FlowData(corpus.latents, corpus.captions)
    return fit(bundle, "backbone", data, train_config(cfg, cfg.backbone_steps), **kw)


def loudness_data(corpus: DeskCorpus, width: int) -> FlowData:
    return FlowData(corpus.latents, corpus.captions, corpus.loudness_input(width=width))


def event_data(corpus: DeskCorpus) -> FlowData:
    return FlowData(corpus.latents, corpus.captions, corpus.activity)


def pitch_data(corpus: DeskCorpus, bundle: ModelBundle) -> FlowData:
    """Quantized pitch codes; the corpus range is stored as the bundle's quantizer stats."""
    clips = held_out_audio(corpus)
    n_feat = corpus.activity.shape[1]
    cwts = [conditions.resample_nearest(conditions.pitch_scalogram(c).T, n_feat) for c in clips]
    lo = float(min(c.min() for c in cwts))
    hi = float(max(c.max() for c in cwts))
    if hi <= lo:
        lo, hi = conditions.DEFAULT_PITCH_RANGE
    bundle.quantizer_stats["pitch"] = {"lo": lo, "hi": hi, "n_bins": conditions.N_PITCH_BINS}
    bins = np.stack([dsp.quantize_uniform(c, conditions.N_PITCH_BINS, lo, hi) for c in cwts])
    return FlowData(corpus.latents, corpus.captions, bins)


def train_adapter(bundle: ModelBundle, kind: str, corpus: DeskCorpus, cfg: DeskConfig, name: str | None = None,
                  steps: int | None = None, **kw):
    name = name or f"adapter-{kind}"
    if name not in bundle.branches:
        bundle.add_branch(name, AdapterBranch(bundle.backbone, kind, cfg.adapter_depth, seed=cfg.seed + 1,
                                                   per_layer_proj=cfg.adapter_proj,
                                                   query_pos=cfg.adapter_query_pos))
    width = bundle.config.latent_width
    data = loudness_data(corpus, width) if kind == "loudness" else event_data(corpus)
    steps = cfg.branch_steps if steps is None else steps
    return fit(bundle, name, data, train_config(cfg, steps, 1), **kw)


def train_editor(bundle: ModelBundle, edits: EditSet, cfg: DeskConfig, lora: bool, name: str | None = None, **kw):
    name = name or ("editor-lora" if lora else "editor")
    if name not in bundle.branches:
        branch = EditorBranch(bundle.backbone, cfg.adapter_depth, seed=cfg.seed + 2,
                              lora_rank=cfg.lora_rank if lora else None,
                              per_layer_proj=cfg.adapter_proj, query_pos=cfg.adapter_query_pos)
        bundle.add_branch(name, branch)
    return fit(bundle, name, edits.flow_data(), train_config(cfg, cfg.editor_steps, 2), **kw)


# -- evaluations ------------------------------------------------------------------------

def loudness_eval(bundle: ModelBundle, held: DeskCorpus, branch: str | None, cfg: SampleConfig) -> dict:
    """Loudness MAE (dB) of generations against the held-out clips' curves."""
    width = bundle.config.latent_width
    conds = {branch: held.loudness_input(width=width)} if branch else {}
    latents = sample(bundle, held.captions, conds, cfg, n_frames=held.bank.n_frames)
    maes = []
    for clip, db in zip(render_latents(bundle, held.bank, latents), held.loudness_db):
        maes.append(evaluation.loudness_mae(clip, conditions.LoudnessCurve(db)))
    return {"mae": float(np.mean(maes)), "per_clip": maes}


def event_eval(bundle: ModelBundle, held: DeskCorpus, branch: str | None, cfg: SampleConfig) -> dict:
    """Pooled event- and segment-based F1 of the detector on generations."""
    conds = {branch: held.activity} if branch else {}
    latents = sample(bundle, held.captions, conds, cfg, n_frames=held.bank.n_frames)
    ev, seg = [], []
    vocab = held.spec.vocabulary
    for clip, item in zip(render_latents(bundle, held.bank, latents), held.items):
        det = evaluation.toy_sed(clip, vocab)
        ev.append(evaluation.event_f1(item.roll, det))
        seg.append(evaluation.segment_f1(item.roll, det))
    return {"event_f1": evaluation.pooled(ev).f1, "segment_f1": evaluation.pooled(seg).f1,
            "per_clip_event": [r.f1 for r in ev], "per_clip_segment": [r.f1 for r in seg]}


def edit_eval(bundle: ModelBundle, edits: EditSet, editor: str, cfg: SampleConfig) -> dict:
    """Edit scores of inputs and outputs, split by action."""
    latents = sample_edit(bundle, editor, edits.ref, edits.activity, cfg)
    bank_clips = render_latents(bundle, _bank_for(edits), latents)
    ref_clips = render_latents(bundle, _bank_for(edits), edits.ref)
    vocab = _bank_for(edits).vocabulary
    rows = {"insert": [], "remove": []}
    for pair, gen, ref in zip(edits.pairs, bank_clips, ref_clips):
        before = evaluation.edit_score(ref, pair.target_label, pair.span, vocab)
        after = evaluation.edit_score(gen, pair.target_label, pair.span, vocab)
        rows[pair.action].append((before, after))
    out = {}
    for action, vals in rows.items():
        arr = np.array(vals) if vals else np.zeros((0, 2))
        out[action] = {"input": float(arr[:, 0].mean()) if len(arr) else float("nan"),
                       "output": float(arr[:, 1].mean()) if len(arr) else float("nan"), "n": len(arr)}
    return out


_BANKS: dict = {}


def _bank_for(edits: EditSet) -> ToneBank:
    duration = edits.pairs[0].background.duration
    key = (edits.ref.shape[1], round(duration, 6))
    if key not in _BANKS:
        _BANKS[key] = ToneBank(n_frames=edits.ref.shape[1], duration=duration)
    return _BANKS[key]


def new_bundle(cfg: DeskConfig, backbone: BackboneConfig | None = None) -> ModelBundle:
    return ModelBundle(Backbone(backbone or BackboneConfig(seed=cfg.seed)))


def held_out_audio(corpus: DeskCorpus) -> list:
    return corpus.audio or [render(corpus.spec, item) for item in corpus.items]


def as_clip(samples, sample_rate: int) -> AudioClip:
    return AudioClip(np.asarray(samples, dtype=np.float64), sample_rate)


# -- cached desk runs ----------------------------------------------------------------------

class DeskRuns:
    """Train-once store for the desk experiments.

    Each stage (backbone, one adapter, one editor) is saved as its own bundle
    zip under ``cache_dir``, named by the stage and a hash of the desk config,
    so a later session reuses it instead of retraining. Delete the directory
    to force fresh runs.
    """

    def __init__(self, cache_dir, cfg: DeskConfig | None = None):
        from pathlib import Path

        self.cfg = cfg or DeskConfig()
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._corpora: dict = {}

    @property
    def key(self) -> str:
        import hashlib
        import json

        from .train import config_dict

        blob = json.dumps(config_dict(self.cfg), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def path(self, stage: str):
        return self.dir / f"{stage}-{self.key}.zip"

    def corpus(self, split: str) -> DeskCorpus:
        if split not in self._corpora:
            codec = ModelBundle(Backbone(BackboneConfig(seed=self.cfg.seed))).codec
            self._corpora[split] = build_corpus(corpus_spec(self.cfg, split), codec, keep_audio=split != "train")
        return self._corpora[split]

    def _stage(self, stage: str, build) -> ModelBundle:
        p = self.path(stage)
        if p.is_file():
            return ModelBundle.load(p)
        bundle = build()
        bundle.save(p)
        return bundle

    def backbone(self) -> ModelBundle:
        def build():
            bundle = new_bundle(self.cfg)
            state = train_backbone(bundle, self.corpus("train"), self.cfg)
            bundle.meta["losses"] = {"backbone": state.losses[-100:]}
            return bundle

        return self._stage("backbone", build)

    def adapter(self, kind: str) -> ModelBundle:
        def build():
            bundle = self.backbone()
            state = train_adapter(bundle, kind, self.corpus("train"), self.cfg)
            bundle.meta["losses"] = {f"adapter-{kind}": state.losses[-100:]}
            return bundle

        return self._stage(f"adapter-{kind}", build)

    def edit_set(self, split: str) -> EditSet:
        corpus = self.corpus(split)
        n = self.cfg.n_pairs if split == "train" else self.cfg.n_eval
        seed = self.cfg.seed + (3 if split == "train" else 20_003)
        return build_edit_set(corpus.spec, corpus.items, n, self.backbone().codec, corpus.bank, seed)

    def editor(self, lora: bool) -> ModelBundle:
        stage = "editor-lora" if lora else "editor"

        def build():
            bundle = self.backbone()
            state = train_editor(bundle, self.edit_set("train"), self.cfg, lora)
            bundle.meta["losses"] = {stage: state.losses[-100:]}
            return bundle

        return self._stage(stage, build)
