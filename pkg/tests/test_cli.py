import json

import numpy as np
import pytest

from audiocontrol import conditions
from audiocontrol.cli import main
from audiocontrol.conditions import EventRoll, EventTrack
from audiocontrol.dsp import SAMPLE_RATE, AudioClip
from audiocontrol.io import load_fgc1, save_csv, write_wav
from audiocontrol.model import ModelBundle

TINY = ["--n-mmdit", "1", "--n-dit", "1", "--hidden", "16", "--heads", "2", "--n-clips", "8",
        "--batch-size", "4", "--log-every", "1", "--depth", "1"]


def tone(path, freq=220.0, seconds=2.0, amp=0.5):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    write_wav(path, AudioClip(amp * np.sin(2 * np.pi * freq * t)))
    return str(path)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    bb = d / "bb.zip"
    assert main(["train", "--target", "backbone", "--steps", "3", "--out", str(bb), *TINY]) == 0
    full = d / "full.zip"
    assert main(["train", "--target", "adapter", "--kind", "loudness", "--checkpoint", str(bb),
                 "--steps", "2", "--out", str(full), *TINY]) == 0
    return bb, full


# -- extract -------------------------------------------------------------------------------

def test_extract_loudness_frame_count(tmp_path):
    wav = tone(tmp_path / "a.wav", seconds=3.0)
    assert main(["extract", wav, "--kind", "loudness", "--out", str(tmp_path / "f")]) == 0
    db = load_fgc1(tmp_path / "f" / "loudness.fgc1")
    assert abs(db.shape[0] - 3.0 * conditions.FRAME_RATE) <= 2
    side = json.loads((tmp_path / "f" / "loudness.json").read_text())
    assert side["savgol_window"] == 11 and side["n_frames"] == db.shape[0]


def test_extract_pitch_of_steady_tone_has_equal_rows(tmp_path):
    wav = tone(tmp_path / "a.wav", seconds=1.5)
    assert main(["extract", wav, "--kind", "pitch", "--out", str(tmp_path / "p")]) == 0
    bins = load_fgc1(tmp_path / "p" / "pitch.fgc1")
    assert bins.dtype == np.int32 and np.all(bins == bins[0])


def test_extract_missing_file_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.wav"
    assert main(["extract", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


# -- config files --------------------------------------------------------------------------

def test_config_file_defaults_and_flag_precedence(tmp_path):
    wav = tone(tmp_path / "a.wav", seconds=2.0)
    cfg = tmp_path / "c.toml"
    cfg.write_text('savgol_window = 7\nout = "from_file"\n')
    out = tmp_path / "flag"
    assert main(["extract", wav, "--config", str(cfg), "--out", str(out)]) == 0
    side = json.loads((out / "loudness.json").read_text())
    assert side["savgol_window"] == 7


def test_config_file_unknown_key(tmp_path, capsys):
    wav = tone(tmp_path / "a.wav")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"savgol_windw": 7}))
    assert main(["extract", wav, "--config", str(cfg)]) == 2
    assert "savgol_windw" in capsys.readouterr().err


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["extract", "--help"])
    text = capsys.readouterr().out
    assert "default: 4096" in text and "default: 1025" in text


# -- generate ------------------------------------------------------------------------------

def test_generate_is_deterministic(ckpt, tmp_path):
    _, full = ckpt
    args = ["generate", "--checkpoint", str(full), "--text", "dog", "--steps", "3", "--seed", "5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "gen.wav").read_bytes() == (tmp_path / "b" / "gen.wav").read_bytes()
    assert load_fgc1(tmp_path / "a" / "gen_latent.fgc1").shape == (64, 16)


def test_generate_with_fresh_adapter_matches_no_condition(ckpt, tmp_path):
    bb, _ = ckpt
    bundle = ModelBundle.load(bb)
    from audiocontrol.model import AdapterBranch

    bundle.add_branch("adapter-loudness", AdapterBranch(bundle.backbone, "loudness", 1, query_pos=1.0,
                                                        per_layer_proj=True))
    fresh = tmp_path / "fresh.zip"
    bundle.save(fresh)
    loud = tmp_path / "loud.csv"
    save_csv(loud, np.linspace(-40, -5, 258), conditions.FRAME_RATE)
    base = ["generate", "--checkpoint", str(fresh), "--text", "bird", "--steps", "3"]
    assert main([*base, "--out", str(tmp_path / "plain")]) == 0
    assert main([*base, "--condition", f"loudness={loud}", "--out", str(tmp_path / "ctl")]) == 0
    a = load_fgc1(tmp_path / "plain" / "gen_latent.fgc1")
    b = load_fgc1(tmp_path / "ctl" / "gen_latent.fgc1")
    assert np.array_equal(a, b)


def test_generate_cfg_one_matches_conditional_only_sampler(ckpt, tmp_path):
    _, full = ckpt
    from audiocontrol import tensor as T
    from audiocontrol.train import SampleConfig, sample

    assert main(["generate", "--checkpoint", str(full), "--text", "dog,bell", "--cfg-scale", "1", "--steps", "3",
                 "--seed", "2", "--out", str(tmp_path / "g")]) == 0
    bundle = ModelBundle.load(full)
    bb = bundle.backbone
    text = bb.encode_text([["dog", "bell"]])

    def cond_only(x, t):
        with T.no_grad():
            return bb.forward(x, np.full(1, t), text).data

    direct = sample(bundle, [["dog", "bell"]], {}, SampleConfig(steps=3, cfg_scale=1.0, seed=2), 64,
                    velocity_fn=cond_only)[0]
    assert np.array_equal(load_fgc1(tmp_path / "g" / "gen_latent.fgc1"), direct)


def test_generate_unknown_word_and_missing_branch(ckpt, tmp_path, capsys):
    bb, _ = ckpt
    assert main(["generate", "--checkpoint", str(bb), "--text", "unicorn", "--out", str(tmp_path)]) == 2
    roll = tmp_path / "r.json"
    roll.write_text(json.dumps(EventRoll(6.0, [EventTrack("dog", [(1, 2)])]).to_json()))
    assert main(["generate", "--checkpoint", str(bb), "--condition", f"event={roll}", "--out", str(tmp_path)]) == 3


def test_bad_branch_depth_is_an_input_error(ckpt, tmp_path, capsys):
    bb, _ = ckpt
    assert main(["train", "--target", "adapter", "--checkpoint", str(bb), "--depth", "9", "--steps", "1",
                 "--out", str(tmp_path / "x.zip")]) == 2
    assert "depth 9" in capsys.readouterr().err


def test_headerless_csv_is_rejected(ckpt, tmp_path):
    _, full = ckpt
    loud = tmp_path / "bare.csv"
    np.savetxt(loud, np.zeros(10))
    assert main(["generate", "--checkpoint", str(full), "--condition", f"loudness={loud}",
                 "--out", str(tmp_path / "g")]) == 2


def test_incompatible_checkpoint_exit_code(tmp_path):
    junk = tmp_path / "junk.zip"
    junk.write_bytes(b"garbage")
    assert main(["generate", "--checkpoint", str(junk), "--out", str(tmp_path / "g")]) == 3


# -- edit ----------------------------------------------------------------------------------

@pytest.mark.parametrize("spec", ["remove: dog: 1.5: 0.5", "insert dog 1 2", "insert: dog: 1.0: 9.0"])
def test_edit_spec_errors_show_grammar(ckpt, tmp_path, capsys, spec):
    _, full = ckpt
    wav = tone(tmp_path / "a.wav", seconds=2.0)
    assert main(["edit", "--checkpoint", str(full), "--input", wav, "--spec", spec, "--out", str(tmp_path)]) == 2
    assert "grammar" in capsys.readouterr().err


def test_edit_runs_with_trained_editor(ckpt, tmp_path):
    bb, _ = ckpt
    ed = tmp_path / "ed.zip"
    assert main(["train", "--target", "editor", "--checkpoint", str(bb), "--steps", "2", "--n-pairs", "4",
                 "--lora-rank", "2", "--out", str(ed), *TINY]) == 0
    wav = tone(tmp_path / "a.wav", freq=440.0, seconds=6.0)
    out = tmp_path / "e"
    assert main(["edit", "--checkpoint", str(ed), "--input", wav, "--spec", "insert: dog: 1.0: 2.0",
                 "--steps", "2", "--out", str(out)]) == 0
    report = json.loads((out / "edit_report.json").read_text())
    assert 0.0 <= report["edit_score_after"] <= 1.0
    assert (out / "edited.wav").is_file()


# -- eval ----------------------------------------------------------------------------------

def test_eval_loudness_and_event_reports(tmp_path):
    a = tone(tmp_path / "a.wav", seconds=2.0)
    assert main(["eval", "--kind", "loudness", "--gen", a, "--ref", a, "--out", str(tmp_path / "l.json")]) == 0
    rep = json.loads((tmp_path / "l.json").read_text())
    assert rep["aggregates"]["loudness_mae_db"] == 0.0
    assert (tmp_path / "l.csv").read_text().startswith("gen,ref,loudness_mae_db")
    roll = tmp_path / "r.json"
    roll.write_text(json.dumps(EventRoll(2.0).to_json()))
    silent = tmp_path / "s.wav"
    write_wav(silent, AudioClip(np.zeros(2 * SAMPLE_RATE)))
    assert main(["eval", "--kind", "event", "--gen", str(silent), "--ref", str(roll),
                 "--out", str(tmp_path / "e.json")]) == 0


def test_eval_nan_metric_exit_code(tmp_path):
    silent = tmp_path / "s.wav"
    write_wav(silent, AudioClip(np.zeros(SAMPLE_RATE)))
    ref = tone(tmp_path / "r.wav", seconds=1.0)
    assert main(["eval", "--kind", "pitch", "--gen", str(silent), "--ref", ref, "--out", str(tmp_path / "p.json")]) == 4


def test_eval_mismatched_lists(tmp_path):
    a = tone(tmp_path / "a.wav")
    assert main(["eval", "--kind", "loudness", "--gen", a, a, "--ref", a, "--out", str(tmp_path / "x.json")]) == 2


def test_simulate_writes_corpus(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "c"), "--n-clips", "3", "--n-pairs", "2",
                 "--duration", "2"]) == 0
    assert len(list((tmp_path / "c" / "clips").glob("*.wav"))) == 3
