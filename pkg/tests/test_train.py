import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocontrol import tensor as T
from audiocontrol.model import AdapterBranch, Backbone, BackboneConfig, EditorBranch, ModelBundle
from audiocontrol.train import (AdamW, EditLossWeights, FlowData, SampleConfig, TrainConfig, TrainState,
                                cfg_combine, clip_grad_norm, edit_loss, euler_sample, fit, flow_loss,
                                guided_velocity, sample, sample_edit, train_step, velocity)
from audiocontrol.tensor import Parameter, Tensor

TINY = dict(n_mmdit=1, n_dit=1, latent_width=4, hidden=8, heads=2, text_width=8)


def tiny_bundle(seed=0):
    return ModelBundle(Backbone(BackboneConfig(seed=seed, **TINY)))


def toy_data(n=4, frames=6, seed=0, cond=True):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, frames, 4)) * 0.5
    captions = [["dog"], ["cat"], [], ["bell", "dog"]] * (n // 4 + 1)
    c = rng.uniform(-1, 1, (n, frames, 4)) if cond else None
    return FlowData(x0, captions[:n], c)


# -- configs --------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cfg_drop_prob=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        SampleConfig(steps=0)
    with pytest.raises(ValueError):
        SampleConfig(cfg_scale=-1)
    with pytest.raises(ValueError):
        EditLossWeights(0.0, 1.0)
    assert (SampleConfig().steps, SampleConfig().cfg_scale) == (25, 4.5)
    assert TrainConfig().cfg_drop_prob == 0.10 and TrainConfig().learning_rate == 1e-4


# -- losses ----------------------------------------------------------------------------

def test_flow_loss_examples():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    assert flow_loss(eps - x0, x0, eps).item() == 0.0
    assert flow_loss(np.zeros((2, 3, 4)), x0, x0).item() == 0.0
    out = rng.standard_normal((2, 3, 4))
    total, count = 0.0, 0
    for idx in np.ndindex(out.shape):
        total += (out[idx] - (eps[idx] - x0[idx])) ** 2
        count += 1
    assert flow_loss(out, x0, eps).item() == pytest.approx(total / count, rel=1e-13)
    with pytest.raises(T.ShapeError):
        flow_loss(out[:, :2], x0, eps)


def test_edit_loss_uniform_masks_equal_flow_loss():
    rng = np.random.default_rng(1)
    out, x0, eps = (rng.standard_normal((3, 5, 4)) for _ in range(3))
    ref = flow_loss(out, x0, eps).item()
    for fill in (0, 1):
        mask = np.full((3, 5), fill)
        assert edit_loss(out, eps - x0, mask).item() == pytest.approx(ref, rel=1e-13)


def test_edit_loss_half_mask_matches_loop():
    rng = np.random.default_rng(2)
    out, target = rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 6, 3))
    mask = np.zeros((2, 6), int)
    mask[:, :3] = 1
    num = den = 0.0
    for b in range(2):
        for t in range(6):
            w = 10.0 if mask[b, t] else 1.0
            num += w * sum((out[b, t, d] - target[b, t, d]) ** 2 for d in range(3))
            den += w
    assert abs(edit_loss(out, target, mask).item() - num / (3 * den)) < 1e-12


def test_edit_loss_errors():
    with pytest.raises(ValueError):
        edit_loss(np.zeros((0, 0, 2)), np.zeros((0, 0, 2)), np.zeros((0, 0)))
    with pytest.raises(T.ShapeError):
        edit_loss(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), np.zeros((1, 4)))


# -- optimizer ---------------------------------------------------------------------------

def test_adamw_first_step_is_signed_lr_plus_decay():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 0.0])
    AdamW([p], lr=0.1, weight_decay=0.01).step()
    # bias-corrected first step: m/sqrt(v) = sign(g) (0 where g = 0)
    expected = np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([1.0, -1.0, 0.0])
    assert np.allclose(p.data, expected, atol=1e-7)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0, rel=1e-9)
    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    assert a.grad.tolist() == [0.3, 0.0]


# -- training ----------------------------------------------------------------------------

def test_smoke_training_lowers_loss():
    bundle = tiny_bundle()
    data = toy_data(cond=False)
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, steps=100, seed=0, cfg_drop_prob=0.0)
    # evaluate one fixed noise draw before and after
    probe = np.random.default_rng(7)
    t = probe.uniform(size=4)
    eps = probe.standard_normal(data.x0.shape)
    x_t = (1 - t)[:, None, None] * data.x0 + t[:, None, None] * eps

    def probe_loss():
        with T.no_grad():
            return flow_loss(velocity(bundle, "backbone", x_t, t, data.captions), data.x0, eps).item()

    before = probe_loss()
    fit(bundle, "backbone", data, cfg)
    assert probe_loss() < before


def test_null_condition_never_used_without_dropout():
    bundle = tiny_bundle()
    bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
    cfg = TrainConfig(batch_size=4, steps=30, cfg_drop_prob=0.0)
    assert fit(bundle, "ad", toy_data(), cfg).null_used == 0
    state = fit(bundle, "ad", toy_data(), TrainConfig(batch_size=4, steps=50, cfg_drop_prob=0.5))
    assert 0 < state.null_used < state.samples_seen


def test_dropped_samples_zero_caption_and_condition_together():
    bundle = tiny_bundle()
    ad = bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
    rng = np.random.default_rng(3)
    for p in ad.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    data = toy_data()
    x = rng.standard_normal(data.x0.shape)
    t = np.full(4, 0.4)
    keep = np.array([True, False, True, False])
    other = data.cond + 1.0
    a = velocity(bundle, "ad", x, t, data.captions, data.cond, keep).data
    b = velocity(bundle, "ad", x, t, [["cat"]] * 4, other, keep).data
    # dropped rows ignore both caption and condition
    assert np.array_equal(a[~keep], b[~keep])
    assert not np.allclose(a[keep], b[keep])


def test_branch_training_freezes_backbone():
    bundle = tiny_bundle()
    bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
    before = {k: v.copy() for k, v in bundle.backbone.state_dict().items()}
    branch_before = {k: v.copy() for k, v in bundle.branches["ad"].state_dict().items()}
    fit(bundle, "ad", toy_data(), TrainConfig(batch_size=4, steps=40, learning_rate=1e-2))
    after = bundle.backbone.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert any(not np.array_equal(branch_before[k], v) for k, v in bundle.branches["ad"].state_dict().items())
    assert all(p.requires_grad for p in bundle.backbone.parameters())


def test_training_is_deterministic(tmp_path):
    states = []
    for i in range(2):
        bundle = tiny_bundle()
        bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
        log = tmp_path / f"log{i}.jsonl"
        state = fit(bundle, "ad", toy_data(), TrainConfig(batch_size=4, steps=12, log_every=5), log_path=log)
        states.append((state.losses, bundle.branches["ad"].state_dict()))
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["step"] for r in rows] == [5, 10, 12]
        assert set(rows[0]) == {"step", "loss", "grad_norm", "lr"}
    assert states[0][0] == states[1][0]
    assert all(np.array_equal(states[0][1][k], states[1][1][k]) for k in states[0][1])


def test_nan_loss_aborts_with_diagnostics():
    bundle = tiny_bundle()
    data = toy_data(cond=False)
    data.x0[0, 0, 0] = np.nan
    cfg = TrainConfig(batch_size=4, steps=1)
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        train_step(bundle, "backbone", data, cfg, AdamW(bundle.backbone.parameters()),
                   np.random.default_rng(0), TrainState())


def test_checkpoints_written(tmp_path):
    bundle = tiny_bundle()
    cfg = TrainConfig(batch_size=4, steps=4, checkpoint_every=2)
    fit(bundle, "backbone", toy_data(cond=False), cfg, checkpoint_path=tmp_path / "ck.zip")
    assert (tmp_path / "ck.zip").exists()
    ModelBundle.load(tmp_path / "ck.zip")


def test_editor_training_runs_with_edit_mask():
    bundle = tiny_bundle()
    bundle.add_branch("ed", EditorBranch(bundle.backbone, 2, lora_rank=2))
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((4, 6, 4))
    act = rng.random((4, 6, 64))
    mask = np.zeros((4, 6), int)
    mask[:, 2:4] = 1
    data = FlowData(rng.standard_normal((4, 6, 4)), [[]] * 4, (ref, act), mask)
    state = fit(bundle, "ed", data, TrainConfig(batch_size=2, steps=3))
    assert len(state.losses) == 3 and np.all(np.isfinite(state.losses))


# -- sampling ---------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_euler_recovers_constant_velocity_endpoint(steps, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))
    # v = eps - c is constant along the straight path, so Euler is exact
    out = euler_sample(lambda x, t: eps - c, c.shape, SampleConfig(steps=steps), noise=eps)
    assert np.max(np.abs(out - c)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.integers(0, 10_000))
def test_cfg_combine_algebra(scale, seed):
    rng = np.random.default_rng(seed)
    u, c = rng.standard_normal(5), rng.standard_normal(5)
    assert np.allclose(cfg_combine(u, c, scale), u + scale * (c - u))
    assert np.max(np.abs(cfg_combine(u, c, 1.0) - c)) <= 1e-12
    assert np.array_equal(cfg_combine(u, c, 0.0), u)


def test_guided_velocity_skips_unused_pass():
    calls = []

    def cond(x, t):
        calls.append("c")
        return x + 1

    def uncond(x, t):
        calls.append("u")
        return x - 1

    assert guided_velocity(cond, uncond, 1.0)(np.zeros(2), 0.5).tolist() == [1, 1]
    assert guided_velocity(cond, uncond, 0.0)(np.zeros(2), 0.5).tolist() == [-1, -1]
    assert calls == ["c", "u"]


def test_sample_cfg_identities_with_real_model():
    bundle = tiny_bundle()
    ad = bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
    rng = np.random.default_rng(5)
    for p in ad.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    cond_a, cond_b = rng.uniform(-1, 1, (2, 6, 4)), rng.uniform(-1, 1, (2, 6, 4))
    caps = [["dog"], ["cat"]]
    s0 = SampleConfig(steps=5, cfg_scale=0.0, seed=1)
    assert np.array_equal(sample(bundle, caps, {"ad": cond_a}, s0, 6),
                          sample(bundle, [["bell"], []], {"ad": cond_b}, s0, 6))
    s1 = SampleConfig(steps=5, cfg_scale=1.0, seed=1)
    bb = bundle.backbone
    from audiocontrol.model import bind_control

    def cond_only(x, t):
        return bb.forward(x, np.full(2, t), bb.encode_text(caps), [bind_control(ad, cond_a)]).data

    direct = sample(bundle, caps, cfg=s1, n_frames=6, velocity_fn=cond_only)
    assert np.max(np.abs(sample(bundle, caps, {"ad": cond_a}, s1, 6) - direct)) <= 1e-12


def test_sample_is_deterministic_and_fresh_branch_transparent():
    bundle = tiny_bundle()
    bundle.add_branch("ad", AdapterBranch(bundle.backbone, "loudness", 2))
    caps = [["dog"], ["cat"]]
    cond = np.random.default_rng(6).uniform(-1, 1, (2, 6, 4))
    sc = SampleConfig(steps=4, seed=3)
    a = sample(bundle, caps, {"ad": cond}, sc, 6)
    assert np.array_equal(a, sample(bundle, caps, {"ad": cond}, sc, 6))
    assert np.array_equal(a, sample(bundle, caps, {}, sc, 6))


def test_sample_edit_shapes():
    bundle = tiny_bundle()
    bundle.add_branch("ed", EditorBranch(bundle.backbone, 2, lora_rank=2))
    ref = np.random.default_rng(7).standard_normal((2, 6, 4))
    out = sample_edit(bundle, "ed", ref, np.zeros((2, 6, 64)), SampleConfig(steps=3))
    assert out.shape == ref.shape and np.all(np.isfinite(out))
