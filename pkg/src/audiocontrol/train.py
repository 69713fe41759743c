"""Flow-matching training, classifier-free guidance and the Euler sampler.

Training follows the linear path ``x_t = (1 - t) x_0 + t eps`` and regresses
the velocity ``eps - x_0``. With probability ``cfg_drop_prob`` a sample's
caption and control condition are dropped *together*: the caption becomes the
learned null text and the condition becomes zeros.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Backbone, EditorBranch, ModelBundle, bind_control, editor_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

BACKBONE = "backbone"


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    steps: int = 1000
    cfg_drop_prob: float = 0.10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.cfg_drop_prob < 1.0:
            raise ValueError("cfg_drop_prob must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


@dataclass
class SampleConfig:
    steps: int = 25
    cfg_scale: float = 4.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass
class EditLossWeights:
    alpha_edit: float = 10.0
    alpha_no_edit: float = 1.0

    def __post_init__(self):
        if self.alpha_edit <= 0 or self.alpha_no_edit <= 0:
            raise ValueError("edit loss weights must be positive")


# -- losses -------------------------------------------------------------------------

def _check_pair(out: Tensor, target: np.ndarray):
    if out.shape != target.shape:
        raise T.ShapeError(f"model output {out.shape} vs target {target.shape}")


def flow_loss(model_out, x0, eps, t=None) -> Tensor:
    """Mean squared error to the path velocity ``eps - x0``."""
    out = T.as_tensor(model_out)
    target = np.asarray(eps, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    _check_pair(out, target)
    return ((out - target) ** 2).mean()


def edit_loss(model_out, target_velocity, edit_mask, weights: EditLossWeights = EditLossWeights()) -> Tensor:
    """Frame-weighted squared error, normalized by the total weight and the width.

    Frames inside the edit span weigh ``alpha_edit``, the rest
    ``alpha_no_edit``; with a uniform mask this equals :func:`flow_loss`.
    """
    out = T.as_tensor(model_out)
    target = np.asarray(target_velocity, dtype=np.float64)
    _check_pair(out, target)
    mask = np.asarray(edit_mask)
    if out.size == 0 or mask.size == 0:
        raise ValueError("edit_loss needs at least one frame")
    if mask.shape != out.shape[:2]:
        raise T.ShapeError(f"edit mask {mask.shape} vs frames {out.shape[:2]}")
    w = np.where(mask > 0, weights.alpha_edit, weights.alpha_no_edit)
    per_frame = ((out - target) ** 2).sum(axis=2)
    return (per_frame * w).sum() * (1.0 / (out.shape[2] * w.sum()))


# -- optimizer ----------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data * (1 - self.lr * self.weight_decay) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- data -----------------------------------------------------------------------------

@dataclass
class FlowData:
    """Training examples: latents, captions, and optional condition input.

    ``cond`` is an array with a leading sample axis, or a tuple of such
    arrays (the editor takes ``(reference latent, edit activity)``).
    ``edit_mask`` ``[N, T]`` switches the loss to :func:`edit_loss`.
    """

    x0: np.ndarray
    captions: list
    cond: object = None
    edit_mask: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if len(self.captions) != len(self.x0):
            raise ValueError("one caption per latent")

    def __len__(self):
        return len(self.x0)

    def take(self, idx) -> "FlowData":
        idx = np.asarray(idx)
        cond = self.cond
        if isinstance(cond, tuple):
            cond = tuple(np.asarray(c)[idx] for c in cond)
        elif cond is not None:
            cond = np.asarray(cond)[idx]
        mask = None if self.edit_mask is None else self.edit_mask[idx]
        return FlowData(self.x0[idx], [self.captions[i] for i in idx], cond, mask)


@dataclass
class TrainState:
    step: int = 0
    null_used: int = 0  # samples that saw the null unified condition
    samples_seen: int = 0
    losses: list = field(default_factory=list)


# -- forward dispatch ------------------------------------------------------------------

def velocity(bundle: ModelBundle, target: str, x_t, t, captions, cond=None, keep=None) -> Tensor:
    """Velocity of ``target`` (the backbone alone or one named branch).

    ``keep`` is a per-sample mask; dropped samples get the null caption and
    a zeroed condition at the same time.
    """
    bb = bundle.backbone
    B = len(captions)
    keep = np.ones(B, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    if target == BACKBONE:
        return bb.forward(x_t, t, bb.encode_text(captions, null=~keep))
    branch = bundle.branches[target]
    if isinstance(branch, EditorBranch):
        ref, activity = cond
        return editor_forward(bb, branch, x_t, t, ref, activity, keep)
    return bb.forward(x_t, t, bb.encode_text(captions, null=~keep), [bind_control(branch, cond, keep)])


def trainable(bundle: ModelBundle, target: str) -> list:
    module = bundle.backbone if target == BACKBONE else bundle.branches[target]
    return module.parameters()


def train_step(bundle: ModelBundle, target: str, batch: FlowData, cfg: TrainConfig, opt: AdamW,
               rng: np.random.Generator, state: TrainState,
               weights: EditLossWeights = EditLossWeights()) -> dict:
    """One optimizer step on ``target``'s parameters; returns the step metrics."""
    B = len(batch)
    t = rng.uniform(size=B)
    eps = rng.standard_normal(batch.x0.shape)
    drop = rng.uniform(size=B) < cfg.cfg_drop_prob
    x_t = (1 - t)[:, None, None] * batch.x0 + t[:, None, None] * eps
    state.null_used += int(drop.sum())
    state.samples_seen += B

    out = velocity(bundle, target, x_t, t, batch.captions, batch.cond, keep=~drop)
    if batch.edit_mask is not None:
        loss = edit_loss(out, eps - batch.x0, batch.edit_mask, weights)
    else:
        loss = flow_loss(out, batch.x0, eps, t)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss at step {state.step} (target {target!r}, t={np.round(t, 3).tolist()}, "
            f"max |out|={np.max(np.abs(out.data)):.3g})")

    params = opt.params
    for p in params:
        p.grad = None
    loss.backward()
    grad_norm = clip_grad_norm(params, cfg.grad_clip)
    opt.step()
    state.step += 1
    state.losses.append(value)
    return {"step": state.step, "loss": value, "grad_norm": grad_norm, "lr": opt.lr}


def fit(bundle: ModelBundle, target: str, data: FlowData, cfg: TrainConfig, log_path=None,
        checkpoint_path=None, weights: EditLossWeights = EditLossWeights(), progress=None) -> TrainState:
    """Train the backbone (``target="backbone"``) or a branch with the backbone frozen."""
    if target == BACKBONE:
        bundle.backbone.unfreeze()
    else:
        if target not in bundle.branches:
            raise KeyError(f"no branch named {target!r}")
        bundle.backbone.freeze()
        bundle.branches[target].unfreeze()
    opt = AdamW(trainable(bundle, target), cfg.learning_rate, cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    sink = open(log_path, "a") if log_path else None
    started = time.perf_counter()
    try:
        for _ in range(cfg.steps):
            idx = rng.choice(len(data), size=cfg.batch_size, replace=len(data) < cfg.batch_size)
            metrics = train_step(bundle, target, data.take(idx), cfg, opt, rng, state, weights)
            if sink and (state.step % cfg.log_every == 0 or state.step == cfg.steps):
                sink.write(json.dumps(metrics) + "\n")
                sink.flush()
            if state.step % max(cfg.log_every, 1) == 0:
                log.info("%s step %d loss %.4f (%.1fs)", target, state.step, metrics["loss"],
                         time.perf_counter() - started)
                if progress:
                    progress(metrics)
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                bundle.save(checkpoint_path)
    finally:
        if sink:
            sink.close()
    if target != BACKBONE:
        bundle.backbone.unfreeze()
    return state


# -- sampling ---------------------------------------------------------------------------

def cfg_combine(v_uncond, v_cond, scale: float) -> np.ndarray:
    """``v_u + s (v_c - v_u)``; the two endpoint scales return the operand itself."""
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def euler_sample(velocity_fn, shape, cfg: SampleConfig, noise=None, trajectory: list | None = None) -> np.ndarray:
    """Integrate ``dx/dt = velocity_fn(x, t)`` from t=1 (noise) down to t=0.

    If ``trajectory`` is a list, every state (the start noise included) is appended to it.
    """
    x = np.random.default_rng(cfg.seed).standard_normal(shape) if noise is None else np.array(noise, dtype=np.float64)
    ts = np.linspace(1.0, 0.0, cfg.steps + 1)
    if trajectory is not None:
        trajectory.append(x.copy())
    for t0, t1 in zip(ts[:-1], ts[1:]):
        x = x + (t1 - t0) * np.asarray(velocity_fn(x, t0))
        if trajectory is not None:
            trajectory.append(x.copy())
    return x


def guided_velocity(cond_fn, uncond_fn, scale: float):
    """Velocity function applying classifier-free guidance to two predictors."""

    def fn(x, t):
        if scale == 1.0:
            return cond_fn(x, t)
        if scale == 0.0:
            return uncond_fn(x, t)
        return cfg_combine(uncond_fn(x, t), cond_fn(x, t), scale)

    return fn


def sample(bundle: ModelBundle, captions, conds: dict | None = None, cfg: SampleConfig = SampleConfig(),
           n_frames: int = 64, noise=None, velocity_fn=None, trajectory: list | None = None) -> np.ndarray:
    """Generate latents ``[B, n_frames, latent_width]``.

    ``conds`` maps branch names to their condition input; all of them are
    applied at once and their residuals summed. The unconditional pass uses
    the null caption and zeroed conditions for every branch.
    """
    bb: Backbone = bundle.backbone
    conds = conds or {}
    B = len(captions)
    shape = (B, n_frames, bb.config.latent_width)
    if velocity_fn is None:
        text_c = bb.encode_text(captions)
        text_u = bb.encode_text(captions, null=np.ones(B, dtype=bool))
        zero = np.zeros(B, dtype=bool)

        def cond_fn(x, t):
            with T.no_grad():
                ctl = [bind_control(bundle.branches[k], c) for k, c in conds.items()]
                return bb.forward(x, np.full(B, t), text_c, ctl).data

        def uncond_fn(x, t):
            with T.no_grad():
                ctl = [bind_control(bundle.branches[k], c, zero) for k, c in conds.items()]
                return bb.forward(x, np.full(B, t), text_u, ctl).data

        velocity_fn = guided_velocity(cond_fn, uncond_fn, cfg.cfg_scale)
    return euler_sample(velocity_fn, shape, cfg, noise, trajectory)


def sample_edit(bundle: ModelBundle, editor: str, ref_latent, activity, cfg: SampleConfig = SampleConfig(),
                use_lora: bool = True, noise=None, trajectory: list | None = None) -> np.ndarray:
    """Edited latents from a reference latent and an edit-event activity."""
    bb = bundle.backbone
    branch = bundle.branches[editor]
    ref_latent = np.asarray(ref_latent, dtype=np.float64)
    B = ref_latent.shape[0]
    zero = np.zeros(B, dtype=bool)

    def cond_fn(x, t):
        with T.no_grad():
            return editor_forward(bb, branch, x, np.full(B, t), ref_latent, activity, None, use_lora).data

    def uncond_fn(x, t):
        with T.no_grad():
            return editor_forward(bb, branch, x, np.full(B, t), ref_latent, activity, zero, use_lora).data

    return euler_sample(guided_velocity(cond_fn, uncond_fn, cfg.cfg_scale), ref_latent.shape, cfg, noise, trajectory)


def config_dict(cfg) -> dict:
    out = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def write_metrics(path, rows):
    with Path(path).open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
