"""Flow-matching transformer backbone and its control branches.

The backbone runs ``n_mmdit`` dual-stream blocks (text and audio tokens with
joint attention) followed by ``n_dit`` single-stream blocks over the audio
tokens, all modulated adaLN-style by the fused time + caption embedding, and
a small convolutional output head.

Control branches produce one residual per backbone layer that is added to
the audio tokens after that layer:

* :class:`ControlNetBranch` runs copies of the first ``depth`` blocks on the
  (zero-convolved) condition.
* :class:`AdapterBranch` encodes the condition once with a small conv stack;
  each layer cross-attends from its audio latent into that encoding and
  passes the result through a zero-initialized projection.
* :class:`EditorBranch` is an adapter whose input is the reference latent
  concatenated with the edit-event condition, optionally with LoRA deltas on
  the backbone's attention projections.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conditions
from . import tensor as T
from .data import VOCABULARY
from .io import load_arrays, save_arrays
from .nn import MLP, Conv1d, Linear, LoRA, Module, ZeroConv, count_params, sinusoidal
from .tensor import Parameter, Tensor

PAD, NULL = 0, 1
N_SPECIAL = 2


class ConfigError(ValueError):
    """Incompatible model / branch configuration."""


@dataclass
class BackboneConfig:
    n_mmdit: int = 2
    n_dit: int = 2
    latent_width: int = 16
    hidden: int = 64
    heads: int = 4
    text_width: int = conditions.TEXT_WIDTH
    mlp_ratio: int = 2
    max_text_tokens: int = 3
    pos_period: float = 100.0
    vocabulary: tuple = VOCABULARY
    seed: int = 0

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.n_mmdit < 1 or self.n_dit < 0:
            raise ConfigError("need n_mmdit >= 1 and n_dit >= 0")

    @classmethod
    def full_size(cls, **overrides) -> "BackboneConfig":
        """Layer counts and latent width of the full-size model."""
        base = dict(n_mmdit=4, n_dit=8, latent_width=40)
        base.update(overrides)
        return cls(**base)

    @property
    def n_layers(self) -> int:
        return self.n_mmdit + self.n_dit


@dataclass
class TextBatch:
    """Caption tokens, pooled caption vector, and the per-sample null flag."""

    tokens: np.ndarray
    global_vec: np.ndarray
    null: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def take(self, idx) -> "TextBatch":
        return TextBatch(self.tokens[idx], self.global_vec[idx], self.null[idx])


@dataclass
class Context:
    cond: Tensor  # silu of the fused embedding, [B, hidden]
    text: Tensor  # [B, L, hidden]


class LatentCodec:
    """Fixed invertible affine map between band features and the model latent."""

    def __init__(self, width: int = 16, seed: int = 1234, offset: float = -0.8):
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((width, width)))
        self.rotation = q * np.sign(np.diag(r))
        self.offset = offset

    def encode(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.offset) @ self.rotation

    def decode(self, latent) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64) @ self.rotation.T + self.offset


# -- blocks -------------------------------------------------------------------------

def _gate(g: Tensor) -> Tensor:
    return g.reshape(g.shape[0], 1, g.shape[1])


class Stream(Module):
    """Per-stream weights: adaLN modulation, attention projections, MLP."""

    def __init__(self, hidden: int, mlp_ratio: int, rng: np.random.Generator):
        self.mod = Linear(hidden, 6 * hidden, rng, zero=True)
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.o = Linear(hidden, hidden, rng)
        self.mlp = MLP(hidden, mlp_ratio * hidden, hidden, rng)

    def modulation(self, c: Tensor) -> list:
        m = self.mod(c)
        h = m.shape[1] // 6
        return [m[:, i * h:(i + 1) * h] for i in range(6)]

    def qkv(self, x: Tensor, mods: list, lora: dict, path: str):
        h = T.adaptive_scale_shift(T.layer_norm(x), mods[1], mods[0])
        return (self.q(h, lora.get(path + ".q")), self.k(h, lora.get(path + ".k")),
                self.v(h, lora.get(path + ".v")))

    def finish(self, x: Tensor, attn: Tensor, mods: list, lora: dict, path: str) -> Tensor:
        x = x + _gate(mods[2]) * self.o(attn, lora.get(path + ".o"))
        h = T.adaptive_scale_shift(T.layer_norm(x), mods[4], mods[3])
        return x + _gate(mods[5]) * self.mlp(h)


class MMDiTBlock(Module):
    dual = True

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, path: str):
        self.text = Stream(cfg.hidden, cfg.mlp_ratio, rng)
        self.audio = Stream(cfg.hidden, cfg.mlp_ratio, rng)
        self._heads = cfg.heads
        self._path = path

    def __call__(self, txt: Tensor, aud: Tensor, c: Tensor, lora: dict | None = None):
        lora = lora or {}
        mt, ma = self.text.modulation(c), self.audio.modulation(c)
        qt, kt, vt = self.text.qkv(txt, mt, lora, self._path + ".text")
        qa, ka, va = self.audio.qkv(aud, ma, lora, self._path + ".audio")
        o = T.attention(T.concat([qt, qa], 1), T.concat([kt, ka], 1), T.concat([vt, va], 1), self._heads)
        n = txt.shape[1]
        txt = self.text.finish(txt, o[:, :n], mt, lora, self._path + ".text")
        aud = self.audio.finish(aud, o[:, n:], ma, lora, self._path + ".audio")
        return txt, aud


class DiTBlock(Module):
    dual = False

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, path: str):
        self.audio = Stream(cfg.hidden, cfg.mlp_ratio, rng)
        self._heads = cfg.heads
        self._path = path

    def __call__(self, aud: Tensor, c: Tensor, lora: dict | None = None) -> Tensor:
        lora = lora or {}
        ma = self.audio.modulation(c)
        q, k, v = self.audio.qkv(aud, ma, lora, self._path + ".audio")
        return self.audio.finish(aud, T.attention(q, k, v, self._heads), ma, lora, self._path + ".audio")


# -- backbone -----------------------------------------------------------------------

class Backbone(Module):
    def __init__(self, cfg: BackboneConfig):
        self.config = None  # not a parameter; set below to keep attribute order stable
        rng = np.random.default_rng(cfg.seed)
        H = cfg.hidden
        table = rng.standard_normal((N_SPECIAL + len(cfg.vocabulary), cfg.text_width)) / np.sqrt(cfg.text_width)
        for i, label in enumerate(cfg.vocabulary):
            table[N_SPECIAL + i] = conditions.embed_label(label, cfg.text_width).vector
        self.token_table = Parameter(table)
        self.null_global = Parameter(rng.standard_normal(cfg.text_width) / np.sqrt(cfg.text_width))
        self.text_mlp = MLP(cfg.text_width, H, H, rng)
        self.global_proj = Linear(cfg.text_width, H, rng)
        self.time_mlp = MLP(H, H, H, rng)
        self.x_in = Linear(cfg.latent_width, H, rng)
        self.blocks = [MMDiTBlock(cfg, rng, f"blocks.{i}") for i in range(cfg.n_mmdit)]
        self.blocks += [DiTBlock(cfg, rng, f"blocks.{cfg.n_mmdit + i}") for i in range(cfg.n_dit)]
        self.final_mod = Linear(H, 2 * H, rng, zero=True)
        self.head_in = Conv1d(H, H, 3, rng)
        self.head_out = Conv1d(H, cfg.latent_width, 3, rng, scale=0.5)
        self.config = cfg
        self._token_ids = {label: N_SPECIAL + i for i, label in enumerate(cfg.vocabulary)}

    # text ----------------------------------------------------------------------
    def encode_text(self, captions, null=None) -> TextBatch:
        """Token ids and pooled label vector for each caption (a list of labels).

        An empty caption is the "empty string": all-PAD tokens and a zero
        pooled vector. ``null`` marks samples whose caption is dropped.
        """
        cfg = self.config
        B = len(captions)
        null = np.zeros(B, dtype=bool) if null is None else np.asarray(null, dtype=bool)
        tokens = np.full((B, cfg.max_text_tokens), PAD, dtype=np.int64)
        pooled = np.zeros((B, cfg.text_width))
        for b, caption in enumerate(captions):
            caption = list(caption)[: cfg.max_text_tokens]
            for j, label in enumerate(caption):
                if label not in self._token_ids:
                    raise ValueError(f"caption word {label!r} not in the model vocabulary")
                tokens[b, j] = self._token_ids[label]
                pooled[b] += conditions.embed_label(label, cfg.text_width).vector
            norm = np.linalg.norm(pooled[b])
            if norm > 0:
                pooled[b] /= norm
        tokens[null] = NULL
        return TextBatch(tokens, pooled, null)

    def context(self, t, text: TextBatch) -> Context:
        cfg = self.config
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(text),))
        temb = Tensor(sinusoidal(t * 1000.0, cfg.hidden))
        keep = (~text.null).astype(np.float64)[:, None]
        g = text.global_vec * keep + self.null_global * (1.0 - keep)
        c = self.time_mlp(temb) + self.global_proj(g)
        tokens = self.text_mlp(T.embedding(self.token_table, text.tokens))
        return Context(T.silu(c), tokens)

    def positions(self, n: int) -> np.ndarray:
        return sinusoidal(np.arange(n), self.config.hidden, self.config.pos_period)

    # forward --------------------------------------------------------------------
    def forward(self, x_t, t, text: TextBatch, controls=(), lora: dict | None = None,
                trace: list | None = None) -> Tensor:
        """Velocity prediction ``[B, T, latent_width]``.

        ``controls`` are bound branches (see :meth:`AdapterBranch.bind`);
        their residuals for layer ``i`` are summed by
        :func:`compose_conditions` and added to the audio tokens after block
        ``i``. ``trace``, when given, collects per-layer diagnostics.
        """
        x_t = T.as_tensor(x_t)
        cfg = self.config
        if x_t.ndim != 3 or x_t.shape[2] != cfg.latent_width or x_t.shape[0] != len(text):
            raise T.ShapeError(f"x_t shape {x_t.shape} does not match batch {len(text)} x T x {cfg.latent_width}")
        ctx = self.context(t, text)
        hooks = [ctl(self, x_t, t, ctx) if callable(ctl) else ctl for ctl in controls]
        h = self.x_in(x_t) + self.positions(x_t.shape[1])
        txt = ctx.text
        for i, block in enumerate(self.blocks):
            if block.dual:
                txt, h = block(txt, h, ctx.cond, lora)
            else:
                h = block(h, ctx.cond, lora)
            residual = compose_conditions(hooks, i, h)
            if trace is not None:
                trace.append({"layer": i, "text": txt.data.copy() if block.dual else None,
                              "latent": h.data.copy(), "residual": None if residual is None else residual.data.copy()})
            if residual is not None:
                h = h + residual
        mods = self.final_mod(ctx.cond)
        H = cfg.hidden
        h = T.adaptive_scale_shift(T.layer_norm(h), mods[:, H:], mods[:, :H])
        return self.head_out(T.silu(self.head_in(h)))

    __call__ = forward

    def attention_paths(self) -> dict:
        """Backbone attention projections that can carry LoRA: path -> Linear."""
        out = {}
        for block in self.blocks:
            streams = ("text", "audio") if block.dual else ("audio",)
            for s in streams:
                stream = getattr(block, s)
                for proj in ("q", "k", "v", "o"):
                    out[f"{block._path}.{s}.{proj}"] = getattr(stream, proj)
        return out


@dataclass
class BoundControl:
    """A branch bound to one forward pass: ``residual(i, z)`` for layer ``i``."""

    key: str
    residual: object
    depth: int


def compose_conditions(hooks, layer: int, latent: Tensor):
    """Sum of the residuals every bound branch gives for ``layer``.

    Summation runs in a fixed order (sorted branch keys) so the result does
    not depend on the order branches were passed in; branches shallower than
    ``layer`` contribute nothing.
    """
    total = None
    for hook in sorted(hooks, key=lambda h: h.key):
        if layer >= hook.depth:
            continue
        r = hook.residual(layer, latent)
        total = r if total is None else total + r
    return total


# -- condition embedding ------------------------------------------------------------

class ConditionEmbed(Module):
    """Learned front end that turns raw condition input into ``[B, T, D]``.

    * loudness: input is already the broadcast curve (no parameters)
    * event:    summed label embeddings ``[B, T, 64]`` times a projection
    * pitch:    bins ``[B, T, S]`` looked up in a 256-entry codebook, mean over S
    * edit:     reference latent concatenated with the projected edit events
    """

    def __init__(self, kind: str, width: int, rng: np.random.Generator, text_width: int = conditions.TEXT_WIDTH,
                 latent_width: int = 16, n_bins: int = conditions.N_PITCH_BINS):
        if kind not in conditions.KINDS:
            raise ConfigError(f"unknown condition kind {kind!r}")
        self._kind = kind
        self.proj = None
        self.codebook = None
        if kind in ("event", "edit"):
            self.proj = Parameter(rng.standard_normal((text_width, width)) / np.sqrt(text_width))
        if kind == "pitch":
            self.codebook = Parameter(rng.standard_normal((n_bins, width)) * 0.5)
        self.out_width = width + (latent_width if kind == "edit" else 0)

    def __call__(self, cond, keep: np.ndarray | None = None) -> Tensor:
        if self._kind == "loudness":
            out = T.as_tensor(cond)
        elif self._kind == "event":
            out = T.as_tensor(cond) @ self.proj
        elif self._kind == "pitch":
            bins = np.asarray(cond)
            out = T.embedding(self.codebook, bins).mean(axis=2)
        else:
            ref, activity = cond
            ref = T.as_tensor(ref)
            # the edit events may come at feature rate; bring them to the latent frame grid
            events = _fit_length(T.as_tensor(activity), ref.shape[1]) @ self.proj
            out = T.concat([ref, events], axis=2)
        if keep is not None:
            out = out * np.asarray(keep, dtype=np.float64).reshape(-1, 1, 1)
        return out


def _fit_length(cond: Tensor, n: int) -> Tensor:
    if cond.shape[1] == n:
        return cond
    idx = np.floor((np.arange(n) + 0.5) * cond.shape[1] / n).astype(int)
    return cond[:, np.clip(idx, 0, cond.shape[1] - 1)]


# -- branches -----------------------------------------------------------------------

class Branch(Module):
    """Shared plumbing: configuration record and depth validation."""

    branch_type = "base"

    def _check_depth(self, cfg: BackboneConfig, depth: int):
        if not 1 <= depth <= cfg.n_layers:
            raise ConfigError(f"depth {depth} outside [1, {cfg.n_layers}]")

    def spec(self) -> dict:
        return {"type": self.branch_type, **self._spec}

    def __call__(self, backbone, x_t, t, ctx, cond=None, keep=None):
        return self.bind(backbone, x_t, t, ctx, cond, keep)


class ControlNetBranch(Branch):
    branch_type = "controlnet"

    def __init__(self, backbone: Backbone, kind: str, depth: int, seed: int = 0, name: str | None = None):
        cfg = backbone.config
        self._check_depth(cfg, depth)
        rng = np.random.default_rng(seed)
        self.embed = ConditionEmbed(kind, cfg.latent_width, rng, conditions.TEXT_WIDTH, cfg.latent_width)
        self.zero_in = ZeroConv(self.embed.out_width, cfg.hidden, rng)
        self.blocks = [blk.clone().unfreeze() for blk in backbone.blocks[:depth]]
        self.zero_out = [ZeroConv(cfg.hidden, cfg.hidden, rng) for _ in range(depth)]
        self._spec = {"kind": kind, "depth": depth, "seed": seed}
        self._name = name or f"controlnet-{kind}"

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def bind(self, backbone: Backbone, x_t, t, ctx: Context, cond, keep=None) -> BoundControl:
        n = T.as_tensor(x_t).shape[1]
        c = _fit_length(self.embed(cond, keep), n)
        a = self.zero_in(c) + backbone.positions(n)
        txt = ctx.text
        residuals = []
        for block, zc in zip(self.blocks, self.zero_out):
            if block.dual:
                txt, a = block(txt, a, ctx.cond)
            else:
                a = block(a, ctx.cond)
            residuals.append(zc(a))
        return BoundControl(self._name, lambda i, z: residuals[i], self.depth)


class AdapterBranch(Branch):
    branch_type = "adapter"

    def __init__(self, backbone: Backbone, kind: str, depth: int, seed: int = 0, name: str | None = None,
                 encoder_width: int | None = None, per_layer_proj: bool = False, query_pos: float = 0.0):
        cfg = backbone.config
        self._check_depth(cfg, depth)
        rng = np.random.default_rng(seed)
        H = cfg.hidden
        E = encoder_width or H
        self.embed = ConditionEmbed(kind, cfg.latent_width, rng, conditions.TEXT_WIDTH, cfg.latent_width)
        self.encoder = [Conv1d(self.embed.out_width, E, 3, rng), Conv1d(E, E, 3, rng), Conv1d(E, 2 * H, 3, rng)]
        self.q_proj = [Linear(H, H, rng) for _ in range(depth)] if per_layer_proj else []
        self.zero = [ZeroConv(H, H, rng) for _ in range(depth)]
        self._heads = cfg.heads
        self._spec = {"kind": kind, "depth": depth, "seed": seed, "encoder_width": E,
                      "per_layer_proj": per_layer_proj, "query_pos": float(query_pos)}
        self._query_pos = float(query_pos)
        self._positions = backbone.positions
        self._name = name or f"adapter-{kind}"

    @property
    def depth(self) -> int:
        return len(self.zero)

    def encode(self, backbone: Backbone, cond: Tensor, n: int):
        """Keys and values ``[B, n, H]`` shared by every adapted layer."""
        h = _fit_length(cond, n)
        h = T.silu(self.encoder[0](h))
        h = T.silu(self.encoder[1](h))
        kv = self.encoder[2](h)
        H = kv.shape[2] // 2
        # keys carry the frame position so queries can find their own time step
        return kv[:, :, :H] + backbone.positions(n), kv[:, :, H:]

    def layer_residual(self, i: int, z: Tensor, k: Tensor, v: Tensor) -> Tensor:
        q = self.q_proj[i](T.layer_norm(z)) if self.q_proj else z
        if self._query_pos:
            # position on the query side too, so attention can lock onto its own frame
            q = q + self._query_pos * self._positions(z.shape[1])
        return self.zero[i](T.attention(q, k, v, self._heads))

    def bind(self, backbone: Backbone, x_t, t, ctx: Context, cond, keep=None) -> BoundControl:
        n = T.as_tensor(x_t).shape[1]
        k, v = self.encode(backbone, self.embed(cond, keep), n)
        return BoundControl(self._name, lambda i, z: self.layer_residual(i, z, k, v), self.depth)


class EditorBranch(AdapterBranch):
    """Adapter on (reference latent, edit events) with optional LoRA on backbone attention."""

    branch_type = "editor"

    def __init__(self, backbone: Backbone, depth: int, seed: int = 0, name: str | None = None,
                 lora_rank: int | None = 64, encoder_width: int | None = None, per_layer_proj: bool = False,
                 query_pos: float = 0.0):
        super().__init__(backbone, "edit", depth, seed, name or "editor", encoder_width, per_layer_proj, query_pos)
        rng = np.random.default_rng(seed + 7919)
        self.lora = {}
        if lora_rank:
            for path, lin in backbone.attention_paths().items():
                d_in, d_out = lin.shape
                self.lora[path] = LoRA(d_in, d_out, lora_rank, rng)
        self._spec.update({"lora_rank": lora_rank or 0})
        del self._spec["kind"]

    @property
    def lora_enabled(self) -> bool:
        return bool(self.lora)


def editor_forward(backbone: Backbone, editor: EditorBranch, x_t, t, ref_latent, edit_activity,
                   keep=None, use_lora: bool = True, trace=None) -> Tensor:
    """Backbone velocity with the caption forced to the empty string."""
    ref_latent = np.asarray(ref_latent, dtype=np.float64)
    x_shape = T.as_tensor(x_t).shape
    if ref_latent.shape != x_shape:
        raise T.ShapeError(f"reference latent {ref_latent.shape} must match x_t {x_shape}")
    text = backbone.encode_text([[]] * x_shape[0])
    control = lambda bb, x, tt, ctx: editor.bind(bb, x, tt, ctx, (ref_latent, edit_activity), keep)
    lora = editor.lora if (use_lora and editor.lora_enabled) else None
    return backbone.forward(x_t, t, text, [control], lora=lora, trace=trace)


def bind_control(branch: Branch, cond, keep=None):
    """Defer binding until the backbone has built its context."""
    return lambda bb, x, t, ctx: branch.bind(bb, x, t, ctx, cond, keep)


# -- bundle + checkpoints ------------------------------------------------------------

def build_branch(backbone: Backbone, spec: dict) -> Branch:
    spec = dict(spec)
    kind_of = spec.pop("type")
    name = spec.pop("name", None)
    if kind_of == "controlnet":
        return ControlNetBranch(backbone, spec["kind"], spec["depth"], spec.get("seed", 0), name)
    if kind_of == "adapter":
        return AdapterBranch(backbone, spec["kind"], spec["depth"], spec.get("seed", 0), name,
                             spec.get("encoder_width"), spec.get("per_layer_proj", False),
                             spec.get("query_pos", 0.0))
    if kind_of == "editor":
        return EditorBranch(backbone, spec["depth"], spec.get("seed", 0), name, spec.get("lora_rank") or None,
                            spec.get("encoder_width"), spec.get("per_layer_proj", False),
                            spec.get("query_pos", 0.0))
    raise ConfigError(f"unknown branch type {kind_of!r}")


@dataclass
class ModelBundle:
    backbone: Backbone
    branches: dict = field(default_factory=dict)
    codec: LatentCodec = None
    quantizer_stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.codec is None:
            self.codec = LatentCodec(self.backbone.config.latent_width)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def add_branch(self, name: str, branch: Branch) -> Branch:
        branch._name = name
        self.branches[name] = branch
        return branch

    def save(self, path):
        arrays = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        for name, branch in self.branches.items():
            arrays.update({f"branch.{name}.{k}": v for k, v in branch.state_dict().items()})
        cfg = asdict(self.config)
        cfg["vocabulary"] = list(cfg["vocabulary"])
        config = {
            "backbone": cfg,
            "branches": {name: {**b.spec(), "name": name} for name, b in self.branches.items()},
            "codec": {"seed": 1234, "offset": self.codec.offset},
            "meta": self.meta,
        }
        save_arrays(path, arrays, config, self.quantizer_stats)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays, config, stats = load_arrays(path)
        try:
            cfg = BackboneConfig(**config["backbone"])
        except TypeError as exc:
            raise ConfigError(f"incompatible backbone config: {exc}") from exc
        backbone = Backbone(cfg)
        backbone.load_state_dict({k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")})
        bundle = cls(backbone, codec=LatentCodec(cfg.latent_width, config["codec"]["seed"], config["codec"]["offset"]),
                     quantizer_stats=stats, meta=config.get("meta", {}))
        for name, spec in config.get("branches", {}).items():
            branch = build_branch(backbone, spec)
            prefix = f"branch.{name}."
            branch.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
            bundle.add_branch(name, branch)
        return bundle


def describe(bundle: ModelBundle) -> str:
    rows = [f"backbone: {count_params(bundle.backbone, trainable_only=False)} params"]
    for name, b in bundle.branches.items():
        rows.append(f"{name}: {count_params(b, trainable_only=False)} params ({json.dumps(b.spec())})")
    return "\n".join(rows)
