import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocontrol import tensor as T
from audiocontrol.model import (AdapterBranch, Backbone, BackboneConfig, BoundControl, ConfigError,
                                ControlNetBranch, EditorBranch, LatentCodec, ModelBundle, bind_control,
                                compose_conditions, describe, editor_forward)
from audiocontrol.nn import Conv1d, count_params
from audiocontrol.tensor import Tensor
from param_oracle import adapter_oracle, controlnet_oracle

TINY = dict(n_mmdit=1, n_dit=1, latent_width=4, hidden=8, heads=2, text_width=8)


def tiny(seed=0, **kw):
    return Backbone(BackboneConfig(seed=seed, **{**TINY, **kw}))


def jiggle(module, seed, scale=0.3):
    """Move every parameter off its initial value (zero-inits included)."""
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def inputs(bb, seed=0, B=2, n=6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, n, bb.config.latent_width))
    t = rng.uniform(size=B)
    text = bb.encode_text([["dog"], ["cat", "bell"]][:B])
    return x, t, text


def loud(bb, B=2, n=6, seed=1):
    return np.random.default_rng(seed).uniform(-1, 1, (B, n, bb.config.latent_width))


# -- config -------------------------------------------------------------------------

def test_config_validation_and_full_sizes():
    with pytest.raises(ValueError):
        BackboneConfig(hidden=10, heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(n_mmdit=0)
    full = BackboneConfig.full_size()
    assert (full.n_mmdit, full.n_dit, full.latent_width) == (4, 8, 40)
    assert BackboneConfig().n_layers == 4


def test_depth_outside_backbone_is_config_error():
    bb = tiny()
    for depth in (0, 3):
        with pytest.raises(ConfigError):
            AdapterBranch(bb, "loudness", depth)
        with pytest.raises(ConfigError):
            ControlNetBranch(bb, "loudness", depth)


# -- backbone -----------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(0, 2), st.integers(1, 3), st.integers(1, 9))
def test_backbone_output_shape_matches_input(n_mmdit, n_dit, B, n):
    bb = Backbone(BackboneConfig(n_mmdit=n_mmdit, n_dit=n_dit, latent_width=3, hidden=8, heads=2, text_width=8))
    x = np.random.default_rng(n).standard_normal((B, n, 3))
    out = bb.forward(x, np.full(B, 0.3), bb.encode_text([["dog"]] * B))
    assert out.shape == x.shape


def test_backbone_is_deterministic():
    a, b = tiny(seed=5), tiny(seed=5)
    x, t, text = inputs(a)
    assert np.array_equal(a.forward(x, t, text).data, b.forward(x, t, text).data)
    assert np.array_equal(a.forward(x, t, text).data, a.forward(x, t, text).data)


def test_backbone_shape_errors_and_unknown_word():
    bb = tiny()
    x, t, text = inputs(bb)
    with pytest.raises(T.ShapeError):
        bb.forward(x[..., :3], t, text)
    with pytest.raises(T.ShapeError):
        bb.forward(x[:1], t, text)
    with pytest.raises(ValueError):
        bb.encode_text([["unicorn"]])


def test_null_text_differs_from_empty_caption():
    bb = tiny()
    empty = bb.encode_text([[]])
    null = bb.encode_text([[]], null=[True])
    assert np.all(empty.tokens == 0) and np.all(null.tokens == 1)
    assert not np.allclose(bb.context(0.5, empty).cond.data, bb.context(0.5, null).cond.data)


def test_backbone_gradients_on_one_mmdit_one_dit():
    bb = tiny()
    jiggle(bb, 1)
    x, t, text = inputs(bb)
    # the DiT key bias has an exactly zero gradient (softmax ignores a per-query shift),
    # so the floor absorbs the ~1e-9 difference noise there
    err = T.check_gradients(lambda: (bb.forward(x, t, text) ** 2).sum(), bb.parameters(), n_samples=6, floor=1e-4)
    assert err < 1e-4


# -- codec ----------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_codec_round_trip(n, seed):
    codec = LatentCodec(16)
    x = np.random.default_rng(seed).uniform(-3, 1, (n, 16))
    assert np.max(np.abs(codec.decode(codec.encode(x)) - x)) < 1e-9


# -- zero-init transparency ---------------------------------------------------------------

def make_branch(kind, bb, depth=2, seed=3):
    if kind == "controlnet":
        return ControlNetBranch(bb, "loudness", depth, seed)
    return AdapterBranch(bb, "loudness", depth, seed)


@pytest.mark.parametrize("kind", ["controlnet", "adapter"])
def test_fresh_branch_is_transparent(kind):
    bb = tiny()
    jiggle(bb, 2)
    branch = make_branch(kind, bb)
    x, t, text = inputs(bb)
    trace = []
    ctl = bind_control(branch, loud(bb))
    bound = ctl(bb, x, t, bb.context(t, text))
    for i in range(branch.depth):
        assert np.all(bound.residual(i, Tensor(np.ones((2, 6, 8)))).data == 0.0)
    assert np.array_equal(bb.forward(x, t, text, [ctl], trace=trace).data, bb.forward(x, t, text).data)


def test_fresh_editor_matches_empty_text_backbone():
    bb = tiny()
    jiggle(bb, 4)
    x, t, _ = inputs(bb)
    ref = np.random.default_rng(5).standard_normal(x.shape)
    act = np.random.default_rng(6).standard_normal((2, 6, 64))
    plain = bb.forward(x, t, bb.encode_text([[], []])).data
    for lora in (None, 4):
        ed = EditorBranch(bb, 2, seed=1, lora_rank=lora)
        for use in (False, True):
            assert np.array_equal(editor_forward(bb, ed, x, t, ref, act, use_lora=use).data, plain)


def test_editor_reference_shape_error():
    bb = tiny()
    x, t, _ = inputs(bb)
    ed = EditorBranch(bb, 1, lora_rank=None)
    with pytest.raises(T.ShapeError):
        editor_forward(bb, ed, x, t, x[:, :5], np.zeros((2, 6, 64)))


# -- branch internals ---------------------------------------------------------------------

def test_controlnet_copies_backbone_blocks():
    bb = tiny()
    cn = ControlNetBranch(bb, "loudness", 2)
    assert [b.dual for b in cn.blocks] == [True, False]
    for mine, theirs in zip(cn.blocks, bb.blocks):
        for (n1, p1), (n2, p2) in zip(mine.named_parameters(), theirs.named_parameters()):
            assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1 is not p2


def test_controlnet_residual_is_linear_in_zero_conv_weight():
    bb = tiny()
    cn = ControlNetBranch(bb, "loudness", 2, seed=1)
    jiggle(cn, 7)
    x, t, text = inputs(bb)
    ctx = bb.context(t, text)
    z = Tensor(np.zeros((2, 6, 8)))
    cn.zero_out[1].bias.data[:] = 0.0
    r1 = cn.bind(bb, x, t, ctx, loud(bb)).residual(1, z).data
    cn.zero_out[1].weight.data *= 2.0
    r2 = cn.bind(bb, x, t, ctx, loud(bb)).residual(1, z).data
    assert np.allclose(r2, 2 * r1, rtol=1e-12, atol=1e-15)


def test_adapter_single_key_attention_is_position_independent():
    bb = tiny()
    ad = AdapterBranch(bb, "loudness", 2, seed=2)
    jiggle(ad, 8)
    cond = T.as_tensor(loud(bb, n=1))
    k, v = ad.encode(bb, cond, 1)
    z = Tensor(np.random.default_rng(9).standard_normal((2, 6, 8)))
    attn = T.attention(z, k, v, bb.config.heads).data
    assert np.allclose(attn, np.broadcast_to(v.data, attn.shape), atol=1e-14)


def test_adapter_shares_one_key_value_encoding():
    bb = tiny()
    ad = AdapterBranch(bb, "loudness", 2, seed=2)
    calls = []
    original = ad.encode

    def counting(*args):
        calls.append(1)
        return original(*args)

    ad.encode = counting
    x, t, text = inputs(bb)
    bb.forward(x, t, text, [bind_control(ad, loud(bb))])
    assert len(calls) == 1


def test_residuals_never_touch_the_text_stream():
    bb = tiny(n_mmdit=2, n_dit=1)
    x, t, text = inputs(bb)
    for branch in (ControlNetBranch(bb, "loudness", 3, 1), AdapterBranch(bb, "loudness", 3, 1)):
        jiggle(branch, 10)
        plain, ctl = [], []
        bb.forward(x, t, text, trace=plain)
        bb.forward(x, t, text, [bind_control(branch, loud(bb))], trace=ctl)
        for a, b in zip(plain, ctl):
            if a["text"] is not None:
                assert np.array_equal(a["text"], b["text"])
        assert not np.allclose(plain[-1]["latent"], ctl[-1]["latent"])


@pytest.mark.parametrize("kind", ["controlnet", "adapter", "editor"])
def test_branch_forward_and_loss_gradients(kind):
    bb = tiny()
    jiggle(bb, 11)
    x, t, text = inputs(bb)
    target = np.random.default_rng(12).standard_normal(x.shape)
    if kind == "editor":
        br = EditorBranch(bb, 2, seed=3, lora_rank=2)
        jiggle(br, 13)
        ref, act = np.random.default_rng(14).standard_normal(x.shape), np.random.default_rng(15).random((2, 6, 64))

        def f():
            return ((editor_forward(bb, br, x, t, ref, act) - target) ** 2).mean()
    else:
        br = make_branch(kind, bb)
        jiggle(br, 13)
        bb.freeze()

        def f():
            return ((bb.forward(x, t, text, [bind_control(br, loud(bb))]) - target) ** 2).mean()
    assert T.check_gradients(f, br.parameters(), n_samples=8) < 1e-4
    bb.unfreeze()


# -- composition ------------------------------------------------------------------------

def bound_pair(bb, seed=0):
    x, t, text = inputs(bb)
    ctx = bb.context(t, text)
    a = AdapterBranch(bb, "loudness", 2, seed=1, name="a")
    b = ControlNetBranch(bb, "event", 1, seed=2, name="b")
    jiggle(a, 20 + seed)
    jiggle(b, 30 + seed)
    act = np.random.default_rng(seed).random((2, 6, 64))
    return a.bind(bb, x, t, ctx, loud(bb)), b.bind(bb, x, t, ctx, act), x


def test_composition_equals_separate_sum_and_is_order_invariant():
    bb = tiny()
    ha, hb, _ = bound_pair(bb)
    z = Tensor(np.random.default_rng(1).standard_normal((2, 6, 8)))
    for layer in range(2):
        joint = compose_conditions([ha, hb], layer, z)
        flipped = compose_conditions([hb, ha], layer, z)
        assert np.array_equal(joint.data, flipped.data)
        parts = [h.residual(layer, z).data for h in sorted([ha, hb], key=lambda h: h.key) if layer < h.depth]
        assert np.array_equal(joint.data, sum(parts[1:], parts[0]))
    assert np.array_equal(compose_conditions([ha], 0, z).data, ha.residual(0, z).data)
    assert compose_conditions([], 0, z) is None


def test_composition_with_fresh_branch_equals_other_alone():
    bb = tiny()
    x, t, text = inputs(bb)
    a = AdapterBranch(bb, "loudness", 2, seed=1, name="a")
    jiggle(a, 3)
    fresh = AdapterBranch(bb, "loudness", 2, seed=4, name="b")
    alone = bb.forward(x, t, text, [bind_control(a, loud(bb))]).data
    both = bb.forward(x, t, text, [bind_control(a, loud(bb)), bind_control(fresh, loud(bb, seed=9))]).data
    assert np.array_equal(alone, both)


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(3)), st.integers(0, 10_000))
def test_composition_is_commutative_and_associative(order, seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((1, 3, 2)))
    fixed = [rng.standard_normal((1, 3, 2)) for _ in range(3)]
    hooks = [BoundControl(f"k{i}", (lambda i: lambda layer, _: Tensor(fixed[i]))(i), 1) for i in range(3)]
    ref = compose_conditions(hooks, 0, z).data
    assert np.array_equal(compose_conditions([hooks[i] for i in order], 0, z).data, ref)
    assert np.allclose(ref, fixed[0] + fixed[1] + fixed[2], rtol=0, atol=1e-14)


# -- parameter counts -----------------------------------------------------------------

def test_conv_layer_count():
    assert count_params(Conv1d(5, 7, 3, np.random.default_rng(0))) == 7 * 5 * 3 + 7


def test_adapter_count_matches_symbolic_oracle():
    bb = Backbone(BackboneConfig())
    assert count_params(AdapterBranch(bb, "loudness", 4)) == adapter_oracle(16, 64, 64, 4) == 56_832
    assert count_params(AdapterBranch(bb, "loudness", 2, per_layer_proj=True)) == adapter_oracle(16, 64, 64, 2, True)
    # event adds the 64 x W label projection
    assert count_params(AdapterBranch(bb, "event", 4)) == adapter_oracle(16, 64, 64, 4, kind="event")


@pytest.mark.parametrize("kind", ["loudness", "event"])
@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_controlnet_count_matches_symbolic_oracle(kind, depth):
    bb = Backbone(BackboneConfig())
    assert count_params(ControlNetBranch(bb, kind, depth)) == controlnet_oracle(16, 64, 2, 2, depth, kind)


def test_adapter_is_far_smaller_than_controlnet():
    bb = Backbone(BackboneConfig())
    ratios = [count_params(AdapterBranch(bb, "loudness", d)) / count_params(ControlNetBranch(bb, "loudness", d))
              for d in range(1, 5)]
    # the shared encoder is a fixed cost, so the ratio falls with depth
    assert np.all(np.diff(ratios) < 0)
    assert ratios[2] < 0.25 and ratios[3] < 0.25


def test_frozen_backbone_counts_zero_and_lora_arithmetic():
    bb = Backbone(BackboneConfig())
    n = count_params(bb)
    bb.freeze()
    assert count_params(bb) == 0 and count_params(bb, trainable_only=False) == n
    bb.unfreeze()
    plain = count_params(EditorBranch(bb, 4, lora_rank=None))
    lora = count_params(EditorBranch(bb, 4, lora_rank=64))
    n_mats = len(bb.attention_paths())
    assert lora - plain == n_mats * 2 * 64 * 64


# -- checkpoints ---------------------------------------------------------------------------

def test_bundle_round_trip(tmp_path):
    bb = tiny()
    jiggle(bb, 40)
    bundle = ModelBundle(bb, quantizer_stats={"pitch": {"lo": -0.5, "hi": 0.5, "n_bins": 256}}, meta={"run": 1})
    for name, br in {"ad": AdapterBranch(bb, "pitch", 2, 1, per_layer_proj=True),
                     "cn": ControlNetBranch(bb, "event", 1, 2),
                     "ed": EditorBranch(bb, 2, 3, lora_rank=2)}.items():
        jiggle(br, len(name))
        bundle.add_branch(name, br)
    bundle.save(tmp_path / "m.zip")
    back = ModelBundle.load(tmp_path / "m.zip")
    assert back.quantizer_stats == bundle.quantizer_stats and back.meta == {"run": 1}
    assert describe(back) == describe(bundle)
    x, t, text = inputs(bb)
    bins = np.random.default_rng(0).integers(0, 256, (2, 6, 32))
    for a, b in ((bundle, back),):
        ya = a.backbone.forward(x, t, text, [bind_control(a.branches["ad"], bins)]).data
        yb = b.backbone.forward(x, t, text, [bind_control(b.branches["ad"], bins)]).data
        assert np.array_equal(ya, yb)
    ref = np.ones_like(x)
    act = np.zeros((2, 6, 64))
    assert np.array_equal(editor_forward(bb, bundle.branches["ed"], x, t, ref, act).data,
                          editor_forward(back.backbone, back.branches["ed"], x, t, ref, act).data)


def test_bundle_load_rejects_incompatible_config(tmp_path):
    import json
    import zipfile

    bundle = ModelBundle(tiny())
    bundle.save(tmp_path / "m.zip")
    with zipfile.ZipFile(tmp_path / "m.zip") as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    config = json.loads(files["config.json"])
    config["backbone"]["n_layers_typo"] = 3
    files["config.json"] = json.dumps(config).encode()
    with zipfile.ZipFile(tmp_path / "bad.zip", "w") as zf:
        for n, data in files.items():
            zf.writestr(n, data)
    with pytest.raises(ConfigError):
        ModelBundle.load(tmp_path / "bad.zip")
