"""Finite-difference verification of every differentiable block."""
from __future__ import annotations

import numpy as np

from . import model as qm
from . import tensor as tn
from .model import ModelConfig
from .tensor import Tensor
from .training import loss_neg_cpsnr

DEFAULT_TOL = 1e-4


def _randomized_params(cfg: ModelConfig, seed: int) -> dict:
    # nonzero biases so ReLU kinks and residual paths are all exercised
    rng = np.random.default_rng(seed + 1)
    params = qm.init_params(cfg, seed)
    return {k: Tensor(p.data + (rng.uniform(-0.1, 0.1, p.shape) if k.endswith(".bias") else 0.0))
            for k, p in params.items()}


def _inputs(cfg: ModelConfig, seed: int, H: int, W: int):
    rng = np.random.default_rng(seed + 2)
    lr = rng.uniform(0.05, 0.95, (cfg.T, H, W))
    qmap = (rng.random((cfg.T, H, W)) > 0.3).astype(np.float64)
    hr = rng.uniform(0.05, 0.95, (H * cfg.r, W * cfg.r))
    mask = (rng.random(hr.shape) > 0.2).astype(np.float64)
    return lr, qmap, hr, mask


def block_checks(cfg: ModelConfig, seed: int = 0, H: int = 4, W: int = 4) -> dict:
    """name -> loss function over a name->Tensor map, plus the point to probe."""
    params = _randomized_params(cfg, seed)
    lr, qmap, hr, mask = _inputs(cfg, seed, H, W)
    rng = np.random.default_rng(seed + 3)
    T, C = cfg.T, cfg.C
    feat = lambda: rng.normal(0, 0.5, (T, C, H, W))
    probe = lambda x: tn.reduce(tn.mul(x, Tensor(np.sin(np.arange(x.data.size)).reshape(x.shape))), None, "sum")
    sub = lambda prefix: {k: v for k, v in params.items() if k.startswith(prefix)}

    checks = {
        "conv2d": (lambda d: probe(tn.conv2d(d["x"], d["w"], d["b"])),
                   {"x": rng.normal(0, 1, (2, 3, 5, 5)), "w": rng.normal(0, 1, (4, 3, 3, 3)), "b": rng.normal(0, 1, 4)}),
        "matmul": (lambda d: probe(tn.matmul(d["a"], d["b"])),
                   {"a": rng.normal(0, 1, (3, 2, 4)), "b": rng.normal(0, 1, (4, 5))}),
        "softmax": (lambda d: probe(tn.softmax_lastdim(d["x"])), {"x": rng.normal(0, 2, (3, 5))}),
        "elementwise": (lambda d: probe(tn.div(tn.mul(tn.relu(d["x"]), tn.sigmoid(d["y"])),
                                               tn.add(tn.exp(d["y"]), 1.0)) - tn.scale(d["x"], 0.3)),
                        {"x": rng.normal(0, 1, (3, 4)), "y": rng.normal(0, 1, (4,))}),
        "reduce": (lambda d: probe(tn.reduce(d["x"], (0, 2), "mean")) + tn.reduce(d["x"], 1, "sum").sum(),
                   {"x": rng.normal(0, 1, (2, 3, 4))}),
        "pixel_shuffle": (lambda d: probe(tn.pixel_shuffle(d["x"], 2)), {"x": rng.normal(0, 1, (1, 8, 3, 3))}),
    }
    l, q = rng.normal(0, 1, (H * W, T, C)), rng.normal(0, 1, (H * W, T, C))
    checks["self_attention"] = (lambda d: probe(qm.self_attention(d["l"], d, 1)), {"l": l, **sub("lem1.sa")})
    checks["qm_attention"] = (lambda d: probe(qm.qm_attention(d["l"], d["q"], d, 1)),
                              {"l": l, "q": q, **sub("lem1.qa")})
    if cfg.M >= 1:
        checks["rcab"] = (lambda d: probe(qm.rcab(d["x"], d, "lem1.rcab1")),
                          {"x": rng.normal(0, 1, (T, C, H, W)), **sub("lem1.rcab1.")})
    checks["lem"] = (lambda d: probe(qm.lem_forward(d["L"], d["Q"], d, 1)), {"L": feat(), "Q": feat(), **sub("lem1.")})
    checks["qem"] = (lambda d: probe(qm.qem_forward(d["Q"], d, 1)), {"Q": feat(), **sub("qem1.")})
    checks["fusion"] = (lambda d: probe(qm.fuse_weighted_mean(d["L0"], d["LN"], tn.sigmoid(d["QN"]))),
                        {"L0": feat(), "LN": feat(), "QN": feat()})
    checks["upsample"] = (lambda d: probe(qm.upsample(d["f"], d, cfg.r)),
                          {"f": rng.normal(0, 1, (C, H, W)), **sub("up.")})
    checks["loss"] = (lambda d: loss_neg_cpsnr(d["sr"], hr, mask),
                      {"sr": hr + rng.normal(0, 0.05, hr.shape)})
    checks["full_model"] = (lambda d: loss_neg_cpsnr(qm.forward(lr, qmap, d, cfg), hr, mask), params)
    return checks


def run_suite(cfg: ModelConfig | None = None, seed: int = 0, step: float = 1e-6,
              coords: int | None = None) -> dict:
    """Max relative finite-difference error for every block: name -> {tensor: error}."""
    cfg = cfg or ModelConfig.tiny()
    results = {}
    for name, (fn, point) in block_checks(cfg, seed).items():
        results[name] = tn.grad_check_many(fn, point, step=step, coords=coords, seed=seed)
    return results


def worst(results: dict) -> dict:
    return {name: max(errs.values()) for name, errs in results.items()}
