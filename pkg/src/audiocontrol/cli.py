"""Command-line entry point: extract, simulate, train, generate, edit, eval.

Every subcommand accepts ``--config FILE`` (JSON or TOML). File values act
as defaults and explicit flags win; keys that are not flags of the
subcommand are rejected. ``FGC_THREADS`` caps numeric worker threads.

Exit codes: 0 ok, 1 runtime failure, 2 bad input (missing file, malformed
edit spec, bad flag), 3 incompatible checkpoint, 4 NaN in an evaluation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import conditions, dsp, evaluation
from .conditions import EventRoll
from .data import EDIT_GRAMMAR, EditSpec, ToneBank, ToyCorpusSpec, make_toy_corpus, write_corpus
from .dsp import FrameSpec
from .io import FormatError, load_csv, load_fgc1, read_wav, save_csv, save_fgc1, write_wav
from .model import (AdapterBranch, Backbone, BackboneConfig, ConfigError, ControlNetBranch, EditorBranch,
                    ModelBundle)
from .train import SampleConfig, TrainConfig, config_dict, fit, sample, sample_edit

log = logging.getLogger("audiocontrol")

EXIT_RUNTIME, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NAN = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FGC_THREADS", "1")))
    except ValueError:
        raise CliError("FGC_THREADS must be an integer")


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p


def _load_config(path) -> dict:
    p = _need_file(path)
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python 3.10
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _load_bundle(path) -> ModelBundle:
    p = _need_file(path)
    try:
        return ModelBundle.load(p)
    except (ConfigError, FormatError, KeyError, ValueError) as exc:
        raise CliError(f"incompatible checkpoint {p}: {exc}", EXIT_CHECKPOINT)


def _load_series(path) -> np.ndarray:
    p = _need_file(path)
    if p.suffix.lower() == ".csv":
        return load_csv(p)
    return load_fgc1(p)


# -- extract -----------------------------------------------------------------------------

def cmd_extract(args) -> int:
    clip = read_wav(_need_file(args.audio))
    spec = FrameSpec(args.frame_length, args.hop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {"source": str(args.audio), "kind": args.kind, "frame_length": spec.frame_length,
               "hop": spec.hop, "frame_rate": spec.frame_rate(clip.sample_rate), "duration": clip.duration}
    if args.kind == "loudness":
        curve = conditions.extract_loudness(clip, spec, args.savgol_window, args.savgol_order)
        save_fgc1(out / "loudness.fgc1", curve.db)
        save_csv(out / "loudness.csv", curve.db, curve.frame_rate)
        sidecar.update(n_frames=len(curve.db), savgol_window=args.savgol_window, savgol_order=args.savgol_order,
                       eps=1e-5)
    elif args.kind == "pitch":
        code = conditions.extract_pitch(clip, spec, n_bins=args.n_bins, value_range=(args.pitch_lo, args.pitch_hi))
        save_fgc1(out / "pitch.fgc1", code.bins, dtype=np.int32)
        save_csv(out / "pitch.csv", code.bins, code.frame_rate)
        sidecar.update(n_frames=code.bins.shape[0], n_scales=code.bins.shape[1], n_bins=args.n_bins,
                       value_range=[args.pitch_lo, args.pitch_hi])
    else:
        det = evaluation.toy_sed(clip, ToyCorpusSpec().vocabulary)
        (out / "events.json").write_text(json.dumps(det.to_roll().to_json(), indent=1))
        sidecar.update(detector="tone-band")
    sidecar_name = "event_params.json" if args.kind == "event" else f"{args.kind}.json"
    (out / sidecar_name).write_text(json.dumps(sidecar, indent=1))
    print(f"wrote {args.kind} features to {out}")
    return 0


# -- simulate ------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = ToyCorpusSpec(n_clips=args.n_clips, duration=args.duration, seed=args.seed)
    corpus = make_toy_corpus(spec)
    write_corpus(args.out, spec, corpus, n_pairs=args.n_pairs, rng=np.random.default_rng(args.seed + 1))
    print(f"wrote {len(corpus)} clips and {args.n_pairs} edit pairs to {args.out}")
    return 0


# -- train ---------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from . import recipes

    if args.checkpoint:
        bundle = _load_bundle(args.checkpoint)
    else:
        bb_cfg = BackboneConfig(n_mmdit=args.n_mmdit, n_dit=args.n_dit, latent_width=args.latent_width,
                                hidden=args.hidden, heads=args.heads, seed=args.seed)
        bundle = ModelBundle(Backbone(bb_cfg))
    tcfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, steps=args.steps,
                       cfg_drop_prob=args.cfg_drop_prob, seed=args.seed, log_every=args.log_every,
                       checkpoint_every=args.checkpoint_every)
    spec = ToyCorpusSpec(n_clips=args.n_clips, seed=args.seed)
    target = args.target
    if target == "backbone":
        corpus = recipes.build_corpus(spec, bundle.codec, keep_audio=False)
        data = recipes.FlowData(corpus.latents, corpus.captions)
        name = "backbone"
    elif target == "editor":
        corpus = recipes.build_corpus(spec, bundle.codec, keep_audio=False)
        edits = recipes.build_edit_set(spec, corpus.items, args.n_pairs, bundle.codec, corpus.bank, args.seed)
        name = args.name or "editor"
        if name not in bundle.branches:
            bundle.add_branch(name, EditorBranch(bundle.backbone, args.depth, seed=args.seed,
                                                 lora_rank=args.lora_rank or None,
                                                 per_layer_proj=args.per_layer_proj, query_pos=args.query_pos))
        data = edits.flow_data()
    else:
        if args.kind not in ("loudness", "event", "pitch"):
            raise CliError(f"--kind must be loudness, event or pitch for {target}")
        corpus = recipes.build_corpus(spec, bundle.codec, keep_audio=args.kind == "pitch")
        name = args.name or f"{target}-{args.kind}"
        if name not in bundle.branches:
            if target == "adapter":
                branch = AdapterBranch(bundle.backbone, args.kind, args.depth, seed=args.seed,
                                       per_layer_proj=args.per_layer_proj, query_pos=args.query_pos)
            else:
                branch = ControlNetBranch(bundle.backbone, args.kind, args.depth, seed=args.seed)
            bundle.add_branch(name, branch)
        if args.kind == "loudness":
            data = recipes.loudness_data(corpus, bundle.config.latent_width)
        elif args.kind == "event":
            data = recipes.event_data(corpus)
        else:
            data = recipes.pitch_data(corpus, bundle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.meta.setdefault("train", {})[name] = config_dict(tcfg)
    state = fit(bundle, name, data, tcfg, log_path=args.metrics, checkpoint_path=out)
    bundle.save(out)
    print(f"trained {name} for {state.step} steps, final loss {state.losses[-1] if state.losses else float('nan'):.4f}; "
          f"saved {out}")
    return 0


# -- generate ------------------------------------------------------------------------------

def _parse_conditions(items, bundle: ModelBundle, n_frames: int, duration: float) -> dict:
    conds = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--condition expects key=path, got {item!r}")
        key, path = item.split("=", 1)
        name = key if key in bundle.branches else _branch_for_kind(bundle, key)
        kind = bundle.branches[name].spec().get("kind", "edit")
        if kind == "event":
            roll = EventRoll.from_json(_need_file(path))
            value = conditions.event_activity(roll, conditions.n_frames_for(duration))
        elif kind == "loudness":
            db = np.asarray(_load_series(path), dtype=np.float64).reshape(-1)
            norm = conditions.normalize_loudness(db)
            value = np.repeat(norm[:, None], bundle.config.latent_width, axis=1)
        elif kind == "pitch":
            value = np.asarray(_load_series(path)).astype(np.int64)
            value = value.reshape(value.shape[0], -1)
        else:
            raise CliError(f"branch {name!r} cannot be driven by --condition")
        conds[name] = value[None]
    return conds


def _branch_for_kind(bundle: ModelBundle, kind: str) -> str:
    names = sorted(n for n, b in bundle.branches.items() if b.spec().get("kind") == kind)
    if not names:
        raise CliError(f"checkpoint has no branch for condition {kind!r}", EXIT_CHECKPOINT)
    return names[0]


def cmd_generate(args) -> int:
    bundle = _load_bundle(args.checkpoint)
    bank = ToneBank(n_bands=bundle.config.latent_width, n_frames=args.n_frames, duration=args.duration,
                    vocabulary=bundle.config.vocabulary)
    caption = [w.strip() for w in args.text.split(",") if w.strip()] if args.text else []
    try:
        bundle.backbone.encode_text([caption])
    except ValueError as exc:
        raise CliError(str(exc))
    conds = _parse_conditions(args.condition, bundle, args.n_frames, args.duration)
    scfg = SampleConfig(steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed)
    latent = sample(bundle, [caption], conds, scfg, n_frames=args.n_frames)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_fgc1(out / "gen_latent.fgc1", latent, dtype=np.float64)
    write_wav(out / "gen.wav", bank.synthesize(bundle.codec.decode(latent)))
    (out / "gen.json").write_text(json.dumps({"text": caption, "conditions": {k: str(v.shape) for k, v in conds.items()},
                                              "sample": config_dict(scfg)}, indent=1))
    print(f"wrote {out / 'gen.wav'} and {out / 'gen_latent.fgc1'}")
    return 0


# -- edit ----------------------------------------------------------------------------------

def cmd_edit(args) -> int:
    from . import recipes

    try:
        spec = EditSpec.parse(args.spec)
    except ValueError as exc:
        raise CliError(f"bad edit spec {args.spec!r}: {exc}\n  grammar: {EDIT_GRAMMAR}")
    bundle = _load_bundle(args.checkpoint)
    clip = read_wav(_need_file(args.input))
    if spec.end > clip.duration + 1e-9:
        raise CliError(f"edit span ends at {spec.end} s but the input is {clip.duration:.3f} s long\n  grammar: {EDIT_GRAMMAR}")
    if spec.label not in bundle.config.vocabulary:
        raise CliError(f"label {spec.label!r} not in the model vocabulary {list(bundle.config.vocabulary)}")
    editors = sorted(n for n, b in bundle.branches.items() if isinstance(b, EditorBranch))
    name = args.editor or (editors[-1] if editors else None)
    if name not in bundle.branches:
        raise CliError(f"checkpoint has no editor branch {name!r}", EXIT_CHECKPOINT)
    bank = ToneBank(n_bands=bundle.config.latent_width, n_frames=args.n_frames, duration=clip.duration,
                    vocabulary=bundle.config.vocabulary)
    ref = bundle.codec.encode(bank.analyze(clip))[None]
    activity = recipes.edit_activity(spec.label, (spec.start, spec.end), spec.action, clip.duration)[None]
    scfg = SampleConfig(steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed)
    latent = sample_edit(bundle, name, ref, activity, scfg, use_lora=not args.no_lora)[0]
    edited = bank.synthesize(bundle.codec.decode(latent))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "edited.wav", edited)
    vocab = bundle.config.vocabulary
    report = {
        "instruction": spec.describe(), "spec": spec.format(), "editor": name,
        "edit_score_before": evaluation.edit_score(clip, spec.label, (spec.start, spec.end), vocab),
        "edit_score_after": evaluation.edit_score(edited, spec.label, (spec.start, spec.end), vocab),
    }
    (out / "edit_report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    return 0


# -- eval ----------------------------------------------------------------------------------

def _eval_one(kind: str, gen_path: str, ref_path: str, args) -> dict:
    gen = read_wav(_need_file(gen_path))
    row = {"gen": str(gen_path), "ref": str(ref_path)}
    if kind == "loudness":
        ref = Path(ref_path)
        if ref.suffix.lower() == ".wav":
            curve = conditions.extract_loudness(read_wav(_need_file(ref)))
        else:
            curve = conditions.LoudnessCurve(np.asarray(_load_series(ref), dtype=np.float64).reshape(-1))
        row["loudness_mae_db"] = evaluation.loudness_mae(gen, curve)
    elif kind == "pitch":
        spec = FrameSpec()
        track = dsp.estimate_f0(read_wav(_need_file(ref_path)), spec)
        row["pitch_mae_hz"] = evaluation.pitch_mae(gen, track, spec)
    else:
        roll = EventRoll.from_json(_need_file(ref_path))
        det = evaluation.toy_sed(gen, ToyCorpusSpec().vocabulary)
        ev = evaluation.event_f1(roll, det, collar=args.collar)
        seg = evaluation.segment_f1(roll, det, segment=args.segment)
        row.update(event_f1=ev.f1, event_precision=ev.precision, event_recall=ev.recall,
                   segment_f1=seg.f1, segment_precision=seg.precision, segment_recall=seg.recall,
                   _counts=((ev.tp, ev.fp, ev.fn), (seg.tp, seg.fp, seg.fn)))
    return row


def cmd_eval(args) -> int:
    if len(args.gen) != len(args.ref):
        raise CliError(f"{len(args.gen)} generated files but {len(args.ref)} references")
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(lambda gr: _eval_one(args.kind, gr[0], gr[1], args), zip(args.gen, args.ref)))
    aggregates = {}
    if args.kind == "event":
        counts = [r.pop("_counts") for r in rows]
        for i, key in enumerate(("event", "segment")):
            tp, fp, fn = (sum(c[i][j] for c in counts) for j in range(3))
            rep = evaluation._report(tp, fp, fn, {})
            aggregates[f"{key}_f1"] = rep.f1
    else:
        key = "loudness_mae_db" if args.kind == "loudness" else "pitch_mae_hz"
        vals = [r[key] for r in rows]
        aggregates[key] = float(np.mean(vals)) if vals else float("nan")
    report = {"kind": args.kind, "per_clip": rows, "aggregates": aggregates}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, allow_nan=True))
    csv_path = out.with_suffix(".csv")
    metric_keys = sorted({k for r in rows for k in r if k not in ("gen", "ref")})
    with csv_path.open("w") as fh:
        fh.write(",".join(["gen", "ref", *metric_keys]) + "\n")
        for r in rows:
            fh.write(",".join([r["gen"], r["ref"], *(repr(float(r[k])) for k in metric_keys)]) + "\n")
    print(json.dumps(aggregates))
    nan = [k for r in rows for k, v in r.items() if isinstance(v, float) and np.isnan(v)]
    nan += [k for k, v in aggregates.items() if np.isnan(v)]
    if nan:
        print(f"NaN metric(s): {sorted(set(nan))}", file=sys.stderr)
        return EXIT_NAN
    return 0


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="audiocontrol", description=__doc__.split("\n")[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML file of flag defaults (explicit flags win)")
        p.add_argument("--seed", type=int, default=0, help="global seed")
        return p

    p = common(sub.add_parser("extract", help="extract loudness/pitch/event features from a WAV", formatter_class=fmt))
    p.add_argument("audio", help="mono WAV file")
    p.add_argument("--kind", choices=("loudness", "pitch", "event"), default="loudness")
    p.add_argument("--out", default="features", help="output directory")
    p.add_argument("--frame-length", type=int, default=4096, help="frame length in samples")
    p.add_argument("--hop", type=int, default=1025, help="hop in samples")
    p.add_argument("--savgol-window", type=int, default=11, help="Savitzky-Golay window")
    p.add_argument("--savgol-order", type=int, default=3, help="Savitzky-Golay order")
    p.add_argument("--n-bins", type=int, default=256, help="pitch quantizer bins")
    p.add_argument("--pitch-lo", type=float, default=conditions.DEFAULT_PITCH_RANGE[0], help="pitch quantizer lower edge")
    p.add_argument("--pitch-hi", type=float, default=conditions.DEFAULT_PITCH_RANGE[1], help="pitch quantizer upper edge")
    p.set_defaults(func=cmd_extract)

    p = common(sub.add_parser("simulate", help="write a synthetic corpus and edit pairs", formatter_class=fmt))
    p.add_argument("--out", default="corpus")
    p.add_argument("--n-clips", type=int, default=512)
    p.add_argument("--n-pairs", type=int, default=64)
    p.add_argument("--duration", type=float, default=6.0)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("train", help="train the backbone or a control branch", formatter_class=fmt))
    p.add_argument("--target", choices=("backbone", "adapter", "controlnet", "editor"), default="backbone")
    p.add_argument("--kind", default="loudness", help="condition kind for adapter/controlnet")
    p.add_argument("--name", help="branch name in the checkpoint")
    p.add_argument("--checkpoint", help="start from this checkpoint (required for branches)")
    p.add_argument("--out", default="model.zip", help="checkpoint to write")
    p.add_argument("--metrics", default=None, help="JSON-lines metrics log")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate")
    p.add_argument("--cfg-drop-prob", type=float, default=0.10, help="joint caption+condition drop")
    p.add_argument("--depth", type=int, default=4, help="number of controlled layers")
    p.add_argument("--lora-rank", type=int, default=64, help="editor LoRA rank, 0 disables")
    p.add_argument("--per-layer-proj", action=argparse.BooleanOptionalAction, default=True,
                   help="adapter queries pass through a per-layer LayerNorm and Linear")
    p.add_argument("--query-pos", type=float, default=4.0,
                   help="scale of the frame position added to adapter queries, 0 disables")
    p.add_argument("--n-clips", type=int, default=512)
    p.add_argument("--n-pairs", type=int, default=512)
    p.add_argument("--n-mmdit", type=int, default=2, help="MMDiT blocks (full size: 4)")
    p.add_argument("--n-dit", type=int, default=2, help="DiT blocks (full size: 8)")
    p.add_argument("--latent-width", type=int, default=16, help="latent width (full size: 40)")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N steps (0: only at the end)")
    p.set_defaults(func=cmd_train)

    def sampling(p):
        p.add_argument("--steps", type=int, default=25, help="Euler steps")
        p.add_argument("--cfg-scale", type=float, default=4.5, help="guidance scale")
        p.add_argument("--n-frames", type=int, default=64, help="latent frames")

    p = common(sub.add_parser("generate", help="sample audio from text and conditions", formatter_class=fmt))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", default="", help="comma-separated caption labels")
    p.add_argument("--condition", action="append", help="kind=path or branch=path; repeat to compose")
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--out", default="gen")
    sampling(p)
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("edit", help="apply an insert/remove instruction to a WAV", formatter_class=fmt))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="WAV to edit")
    p.add_argument("--spec", required=True, help=f"edit instruction, {EDIT_GRAMMAR}")
    p.add_argument("--editor", help="editor branch name (default: last editor in the checkpoint)")
    p.add_argument("--no-lora", action="store_true", help="ignore the editor's LoRA weights")
    p.add_argument("--out", default="edited")
    sampling(p)
    p.set_defaults(func=cmd_edit)

    p = common(sub.add_parser("eval", help="score generated audio against references", formatter_class=fmt))
    p.add_argument("--kind", choices=("loudness", "pitch", "event"), required=True)
    p.add_argument("--gen", nargs="+", required=True, help="generated WAV files")
    p.add_argument("--ref", nargs="+", required=True,
                   help="references: loudness FGC1/CSV/WAV, pitch WAV, or event-roll JSON")
    p.add_argument("--collar", type=float, default=0.2, help="event onset collar in seconds")
    p.add_argument("--segment", type=float, default=1.0, help="segment length in seconds")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse twice: once to find the subcommand and config, then with file values as defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = _load_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown config key(s) for {args.command}: {unknown}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
