"""Loss, Adam, step-decay schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .dataio import Checkpoint, Patch, extract_patches
from .metrics import CMSE_FLOOR
from .model import ModelConfig, forward_batch, init_params
from .selection import sample_train_subset
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_MILESTONES = (120, 220, 300, 360, 400, 440, 480)
DEFAULT_EPOCHS = 520


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or update; ``state`` holds the diagnostic dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    milestones: tuple = DEFAULT_MILESTONES
    gamma: float = 0.8
    epochs: int = DEFAULT_EPOCHS
    batch: int = 4
    T: int = 9
    patch: int = 32
    stride: int | None = None
    steps_per_epoch: int | None = None
    checkpoint_every: int = 0
    decoupled_weight_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestone {ms[-1]} is not below epochs={self.epochs}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.epochs < 1 or self.batch < 1 or self.T < 1 or self.patch < 1:
            raise ValueError(f"epochs, batch, T and patch must be positive: {self}")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("lr0 and weight_decay must be non-negative")

    @classmethod
    def scaled(cls, epochs: int, **overrides) -> "TrainConfig":
        """The default step-decay schedule with milestones rescaled to ``epochs``."""
        ms = sorted({max(1, round(m * epochs / DEFAULT_EPOCHS)) for m in DEFAULT_MILESTONES} - {epochs})
        return cls(epochs=epochs, milestones=tuple(m for m in ms if m < epochs), **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * gamma ** (number of milestones <= epoch)."""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * cfg.gamma ** passed


def loss_neg_cpsnr(sr: Tensor, hr, mask) -> Tensor:
    """Differentiable -cPSNR averaged over a batch.

    ``sr`` is (..., H, W) (a leading singleton channel is squeezed to match
    ``hr``). The brightness bias and the 1e-10 cMSE floor match
    :func:`qanet.metrics.cpsnr`.
    """
    hr = np.asarray(hr, dtype=np.float64)
    mask = (np.asarray(mask) != 0).astype(np.float64)
    if sr.shape != hr.shape:
        if sr.data.squeeze().shape != hr.squeeze().shape:
            raise tn.ShapeError(f"SR {sr.shape} does not match HR {hr.shape}")
        sr = tn.reshape(sr, hr.shape)
    n = mask.sum(axis=(-2, -1), keepdims=True)
    if np.any(n == 0):
        raise ValueError("loss needs at least one clear pixel per image")
    m = Tensor(mask, dtype=sr.dtype)
    d = tn.mul(tn.sub(Tensor(hr, dtype=sr.dtype), sr), m)
    bias = tn.div(tn.reduce(d, (-2, -1), "sum", keepdims=True), Tensor(n, dtype=sr.dtype))
    resid = tn.mul(tn.sub(d, bias), m)
    cmse = tn.div(tn.reduce(tn.mul(resid, resid), (-2, -1), "sum", keepdims=True), Tensor(n, dtype=sr.dtype))
    cmse = tn.clamp_min(cmse, CMSE_FLOOR)
    per_image = tn.scale(tn.log(cmse), 10.0 / math.log(10.0))
    return tn.reduce(per_image, None, "mean")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              decoupled: bool = False):
    """One Adam update with bias correction.

    Weight decay is coupled (added to the gradient) unless ``decoupled``.
    Returns new parameter tensors and a new state; inputs are not modified.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise tn.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        w = p.data
        if weight_decay and not decoupled:
            g = g + weight_decay * w
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decoupled:
            update = update + lr * weight_decay * w
        w_new = w - update
        if not np.all(np.isfinite(w_new)):
            raise tn.NonFiniteError(f"non-finite update for parameter {name}")
        new_params[name] = Tensor(w_new, requires_grad=p.requires_grad, dtype=w.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)   # (epoch, step, loss, lr)

    def history_csv(self) -> str:
        lines = ["epoch,step,loss,lr"]
        lines += [f"{e},{s},{loss!r},{lr!r}" for e, s, loss, lr in self.history]
        return "\n".join(lines) + "\n"


def collect_patches(scenes, cfg: TrainConfig) -> list:
    patches = []
    for scene in scenes:
        if scene.n_images < cfg.T:
            log.warning("scene %s has %d images (< T=%d); skipped", scene.scene_id, scene.n_images, cfg.T)
            continue
        if not scene.registered:
            raise ValueError(f"scene {scene.scene_id} is not registered")
        patches.extend(extract_patches(scene, cfg.patch, cfg.stride))
    return patches


def _batch(patches: list, idx, T: int, rng: np.random.Generator):
    lr, qm, hr, sm = [], [], [], []
    for i in idx:
        p: Patch = patches[i]
        pick = sample_train_subset(p.qm, T, rng)
        lr.append(p.lr[pick])
        qm.append(p.qm[pick])
        hr.append(p.hr)
        sm.append(p.sm)
    return np.stack(lr), np.stack(qm), np.stack(hr), np.stack(sm)


def _snapshot(model_cfg, params, state, epoch, rng, train_cfg) -> Checkpoint:
    return Checkpoint(model_cfg, {k: p.data.copy() for k, p in params.items()},
                      {k: a.copy() for k, a in state.m.items()}, {k: a.copy() for k, a in state.v.items()},
                      state.step, epoch, rng.bit_generator.state,
                      {"train_config": {k: (list(v) if isinstance(v, tuple) else v)
                                        for k, v in train_cfg.__dict__.items()}})


def train(scenes, model_cfg: ModelConfig, train_cfg: TrainConfig, on_checkpoint=None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Train on registered scenes.

    Each step draws ``batch`` patches, samples T images per patch with
    probability proportional to clear pixels, and takes one Adam step on the
    mean -cPSNR. ``on_checkpoint(ckpt)`` is called every ``checkpoint_every``
    epochs and at the end. Fully determined by ``train_cfg.seed``.
    """
    if model_cfg.T != train_cfg.T:
        raise ValueError(f"model T={model_cfg.T} differs from train T={train_cfg.T}")
    patches = collect_patches(scenes, train_cfg)
    if not patches:
        raise ValueError("no training patches: dataset is empty or every scene was skipped")
    rng = np.random.default_rng(train_cfg.seed)
    if resume is None:
        params = init_params(model_cfg, train_cfg.seed)
        state = AdamState.zeros(params)
        start = 0
    else:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in resume.params.items()}
        state = AdamState(dict(resume.adam_m), dict(resume.adam_v), resume.step)
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    steps = train_cfg.steps_per_epoch or math.ceil(len(patches) / train_cfg.batch)
    history = []
    for epoch in range(start, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        order = rng.permutation(len(patches))
        for s in range(steps):
            idx = order[(s * train_cfg.batch + np.arange(train_cfg.batch)) % len(order)]
            lrb, qmb, hrb, smb = _batch(patches, idx, train_cfg.T, rng)
            try:
                # overflow shows up as NonFiniteError when the Tensor is built
                with np.errstate(over="ignore", invalid="ignore"), tn.enable_grad():
                    sr = forward_batch(lrb, qmb, params, model_cfg)
                    loss = loss_neg_cpsnr(tn.reshape(sr, hrb.shape), hrb, smb)
                    tn.backward(loss)
            except tn.NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {state.step}",
                                       {"epoch": epoch, "step": state.step, "batch": idx.tolist()}) from exc
            grads = {k: p.grad for k, p in params.items()}
            value = loss.item()
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, step {state.step}",
                                       {"epoch": epoch, "step": state.step, "loss": value, "batch": idx.tolist()})
            try:
                params, state = adam_step(params, grads, state, lr, train_cfg.weight_decay,
                                          train_cfg.decoupled_weight_decay)
            except tn.NonFiniteError as exc:
                raise TrainingDiverged(str(exc), {"epoch": epoch, "step": state.step, "loss": value}) from exc
            history.append((epoch, state.step, value, lr))
        if on_checkpoint and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0 \
                and epoch + 1 < train_cfg.epochs:
            on_checkpoint(_snapshot(model_cfg, params, state, epoch + 1, rng, train_cfg))
        log.info("epoch %d: mean loss %.4f", epoch, np.mean([h[2] for h in history[-steps:]]))
    final = _snapshot(model_cfg, params, state, train_cfg.epochs, rng, train_cfg)
    if on_checkpoint:
        on_checkpoint(final)
    return TrainResult(final, history)
