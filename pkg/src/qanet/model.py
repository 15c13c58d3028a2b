"""Quality-map associated attention network for multi-image super-resolution.

Feature stacks are kept as 5-d arrays ``(B, T, C, H, W)``: B independent
scenes (or patches), T images per scene. Convolutions run on the flattened
``(B*T, C, H, W)`` view with weights shared across images; attention runs
per pixel across the T axis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

FUSION_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    T: int = 9
    N: int = 12
    M: int = 8
    C: int = 64
    r: int = 3
    rcab_reduction: int = 16
    lr_size: tuple = (32, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "lr_size", tuple(int(v) for v in self.lr_size))
        if self.T < 1 or self.N < 1 or self.M < 0 or self.C < 1 or self.r < 1:
            raise ValueError(f"invalid model config: need T>=1, N>=1, M>=0, C>=1, r>=1; got {self}")
        if self.rcab_reduction < 1 or self.C % self.rcab_reduction:
            raise ValueError(f"C={self.C} is not divisible by rcab_reduction={self.rcab_reduction}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by tests and the gradient suite."""
        base = dict(T=2, N=1, M=1, C=4, r=2, rcab_reduction=4, lr_size=(8, 8))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_size"] = list(self.lr_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every learnable tensor, in canonical order."""
    C, T, k, r = cfg.C, cfg.T, cfg.kernel, cfg.r
    cr = C // cfg.rcab_reduction
    shapes = {"sf.weight": (C, 1, k, k), "sf.bias": (C,)}
    for j in range(1, cfg.N + 1):
        p = f"lem{j}"
        for name in ("sa.wq", "sa.wk", "sa.wv", "qa.vq", "qa.vk", "qa.vv"):
            shapes[f"{p}.{name}"] = (C, T)
        shapes[f"{p}.sa.w0"] = (T, C)
        shapes[f"{p}.qa.v0"] = (T, C)
        for m in range(1, cfg.M + 1):
            b = f"{p}.rcab{m}"
            shapes[f"{b}.conv1.weight"] = (C, C, k, k)
            shapes[f"{b}.conv1.bias"] = (C,)
            shapes[f"{b}.conv2.weight"] = (C, C, k, k)
            shapes[f"{b}.conv2.bias"] = (C,)
            shapes[f"{b}.ca_down.weight"] = (cr, C, 1, 1)
            shapes[f"{b}.ca_down.bias"] = (cr,)
            shapes[f"{b}.ca_up.weight"] = (C, cr, 1, 1)
            shapes[f"{b}.ca_up.bias"] = (C,)
        q = f"qem{j}"
        shapes[f"{q}.conv1.weight"] = (C, C, k, k)
        shapes[f"{q}.conv1.bias"] = (C,)
        shapes[f"{q}.conv2.weight"] = (C, C, k, k)
        shapes[f"{q}.conv2.bias"] = (C,)
    shapes["up.weight"] = (r * r, C, k, k)
    shapes["up.bias"] = (r * r,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None, requires_grad: bool = True) -> dict:
    """Seeded initialization.

    Convolution weights are uniform in +-sqrt(3/fan_in), attention projections
    uniform in +-0.1, biases zero.
    """
    rng = np.random.default_rng(seed)
    dtype = dtype or tn.get_default_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif len(shape) == 4:
            bound = math.sqrt(3.0 / (shape[1] * shape[2] * shape[3]))
            arr = rng.uniform(-bound, bound, shape)
        else:
            arr = rng.uniform(-0.1, 0.1, shape)
        params[name] = Tensor(arr, requires_grad=requires_grad, dtype=dtype)
    return params


def _flat(x: Tensor) -> Tensor:
    B, T, C, H, W = x.shape
    return tn.reshape(x, (B * T, C, H, W))


def _stack(x: Tensor, B: int, T: int) -> Tensor:
    _, C, H, W = x.shape
    return tn.reshape(x, (B, T, C, H, W))


def _as5d(x: Tensor):
    x = tn.as_tensor(x)
    if x.ndim == 4:
        return tn.reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise tn.ShapeError(f"expected (T,C,H,W) or (B,T,C,H,W), got {x.shape}")
    return x, False


def _restore(x: Tensor, squeezed: bool) -> Tensor:
    return tn.reshape(x, x.shape[1:]) if squeezed else x


# -- shallow features ---------------------------------------------------------

def shallow_features(lr, qm, params: dict):
    """Apply the shared shallow conv to every LR image and every QM.

    ``lr`` and ``qm`` are (T, 1, H, W) or (B, T, 1, H, W).
    """
    lr, sq = _as5d(lr)
    qm, _ = _as5d(qm)
    B, T = lr.shape[:2]
    w, b = params["sf.weight"], params["sf.bias"]
    L0 = _stack(tn.conv2d(_flat(lr), w, b), B, T)
    Q0 = _stack(tn.conv2d(_flat(qm), w, b), B, T)
    return _restore(L0, sq), _restore(Q0, sq)


# -- attention ----------------------------------------------------------------

def _pixels_first(x: Tensor) -> Tensor:
    # (B, T, C, H, W) -> (B, H, W, T, C)
    return tn.transpose(x, (0, 3, 4, 1, 2))


def _pixels_last(x: Tensor) -> Tensor:
    # (B, H, W, T, C) -> (B, T, C, H, W); the permutation is its own inverse
    return tn.transpose(x, (0, 3, 4, 1, 2))


def attention_map(query_src: Tensor, key_src: Tensor, wq, wk) -> Tensor:
    """softmax((query_src wq)(key_src wk)^T / sqrt(T)) over the last axis.

    Inputs are per-pixel (..., T, C) slices; returns (..., T, T).
    """
    T = query_src.shape[-2]
    qp = tn.matmul(query_src, wq)
    kp = tn.matmul(key_src, wk)
    scores = tn.matmul(qp, tn.swap_last(kp))
    return tn.softmax_lastdim(tn.scale(scores, 1.0 / math.sqrt(T)))


def attend(amap: Tensor, l: Tensor, wv, w0) -> Tensor:
    """((amap l) wv) w0 on per-pixel (..., T, C) slices."""
    return tn.matmul(tn.matmul(tn.matmul(amap, l), wv), w0)


def self_attention(l, params: dict, j: int, return_map: bool = False):
    """Self-attention over the image axis for per-pixel slices l of shape (..., T, C)."""
    l = tn.as_tensor(l)
    p = f"lem{j}.sa"
    sam = attention_map(l, l, params[f"{p}.wq"], params[f"{p}.wk"])
    out = attend(sam, l, params[f"{p}.wv"], params[f"{p}.w0"])
    return (out, sam) if return_map else out


def qm_attention(l, q, params: dict, j: int, return_map: bool = False):
    """QM-associated attention: queries from QM features q, keys and values from l."""
    l, q = tn.as_tensor(l), tn.as_tensor(q)
    p = f"lem{j}.qa"
    qam = attention_map(q, l, params[f"{p}.vq"], params[f"{p}.vk"])
    out = attend(qam, l, params[f"{p}.vv"], params[f"{p}.v0"])
    return (out, qam) if return_map else out


# -- convolutional blocks -----------------------------------------------------

def rcab(x, params: dict, prefix: str) -> Tensor:
    """Residual channel attention block on a (N, C, H, W) stack."""
    x = tn.as_tensor(x)
    p = lambda s: params[f"{prefix}.{s}"]
    h = tn.relu(tn.conv2d(x, p("conv1.weight"), p("conv1.bias")))
    h = tn.conv2d(h, p("conv2.weight"), p("conv2.bias"))
    pooled = tn.reduce(h, (2, 3), "mean", keepdims=True)
    gate = tn.relu(tn.conv2d(pooled, p("ca_down.weight"), p("ca_down.bias")))
    gate = tn.sigmoid(tn.conv2d(gate, p("ca_up.weight"), p("ca_up.bias")))
    return tn.add(x, tn.mul(h, gate))


def lem_forward(L_prev, Q_prev, params: dict, j: int, record: list | None = None) -> Tensor:
    """One LR-image encoding module.

    a = L + SA(L); b = a + QA(a, Q); output = RCAB_M(...RCAB_1(b)).
    When ``record`` is a list, the (SAM, QAM) arrays of shape (B, H, W, T, T)
    are appended to it.
    """
    L_prev, sq = _as5d(L_prev)
    Q_prev, _ = _as5d(Q_prev)
    B, T = L_prev.shape[:2]
    l = _pixels_first(L_prev)
    q = _pixels_first(Q_prev)
    sa, sam = self_attention(l, params, j, return_map=True)
    a = tn.add(l, sa)
    qa, qam = qm_attention(a, q, params, j, return_map=True)
    b = tn.add(a, qa)
    if record is not None:
        record.append((sam.data, qam.data))
    h = _flat(_pixels_last(b))
    m = 1
    while f"lem{j}.rcab{m}.conv1.weight" in params:
        h = rcab(h, params, f"lem{j}.rcab{m}")
        m += 1
    return _restore(_stack(h, B, T), sq)


def qem_forward(Q_prev, params: dict, j: int) -> Tensor:
    """sigmoid(conv2(relu(conv1(Q))) + Q); outputs lie in (0, 1)."""
    Q_prev, sq = _as5d(Q_prev)
    B, T = Q_prev.shape[:2]
    x = _flat(Q_prev)
    p = f"qem{j}"
    h = tn.relu(tn.conv2d(x, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"]))
    h = tn.conv2d(h, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"])
    out = tn.sigmoid(tn.add(h, x))
    return _restore(_stack(out, B, T), sq)


def fuse_weighted_mean(L0, LN, QN, eps: float = FUSION_EPS) -> Tensor:
    """Channel-wise weighted mean over images of (L0 + LN) with weights QN.

    Stacks are (T, C, H, W) -> (C, H, W), or batched (B, T, ...) -> (B, C, H, W).
    """
    L0, LN, QN = tn.as_tensor(L0), tn.as_tensor(LN), tn.as_tensor(QN)
    if not (L0.shape == LN.shape == QN.shape):
        raise tn.ShapeError(f"fusion stacks differ in shape: {L0.shape}, {LN.shape}, {QN.shape}")
    if np.any(QN.data <= 0):
        raise ValueError("fusion weights must be strictly positive")
    axis = L0.ndim - 4
    num = tn.reduce(tn.mul(tn.add(L0, LN), QN), axis, "sum")
    den = tn.add(tn.reduce(QN, axis, "sum"), eps)
    return tn.div(num, den)


def upsample(f, params: dict, r: int) -> Tensor:
    """Conv to r*r channels then pixel shuffle: (C,H,W) -> (1,rH,rW), batched (B,C,H,W) -> (B,1,rH,rW)."""
    f = tn.as_tensor(f)
    single = f.ndim == 3
    if single:
        f = tn.reshape(f, (1,) + f.shape)
    y = tn.pixel_shuffle(tn.conv2d(f, params["up.weight"], params["up.bias"]), r)
    return tn.reshape(y, y.shape[1:]) if single else y


# -- full model -----------------------------------------------------------------

def _inputs(lr, qm, cfg: ModelConfig, batched: bool):
    lr = np.asarray(lr.data if isinstance(lr, Tensor) else lr)
    qm = np.asarray(qm.data if isinstance(qm, Tensor) else qm)
    if lr.shape != qm.shape:
        raise tn.ShapeError(f"LR stack {lr.shape} and QM stack {qm.shape} differ")
    want = 4 if batched else 3
    if lr.ndim == want + 1 and lr.shape[-3] == 1:
        lr, qm = lr[..., 0, :, :], qm[..., 0, :, :]
    if lr.ndim != want:
        layout = "(B, T, H, W)" if batched else "(T, H, W)"
        raise tn.ShapeError(f"expected an LR stack shaped {layout}, got {lr.shape}")
    if not batched:
        lr, qm = lr[None], qm[None]
    if lr.shape[1] != cfg.T:
        raise ValueError(
            f"scene has {lr.shape[1]} images but the model expects T={cfg.T}; "
            "run image selection first")
    dtype = tn.get_default_dtype()
    return Tensor(lr[:, :, None], dtype=dtype), Tensor(qm[:, :, None], dtype=dtype)


def forward_batch(lr, qm, params: dict, cfg: ModelConfig, trace: dict | None = None) -> Tensor:
    """Super-resolve B stacks at once: (B, T, H, W) -> (B, 1, rH, rW).

    ``trace``, when given, receives the per-stage ``L`` and ``Q`` stacks and
    the per-LEM ``maps`` list of (SAM, QAM) arrays.
    """
    lr_t, qm_t = _inputs(lr, qm, cfg, batched=True)
    return _run(lr_t, qm_t, params, cfg, trace)


def forward(lr, qm, params: dict, cfg: ModelConfig, trace: dict | None = None) -> Tensor:
    """Super-resolve one registered scene of exactly T images: (T, H, W) -> (1, rH, rW)."""
    lr_t, qm_t = _inputs(lr, qm, cfg, batched=False)
    sr = _run(lr_t, qm_t, params, cfg, trace)
    return tn.reshape(sr, sr.shape[1:])


def _run(lr_t: Tensor, qm_t: Tensor, params: dict, cfg: ModelConfig, trace: dict | None) -> Tensor:
    L0, Q0 = shallow_features(lr_t, qm_t, params)
    L, Q = L0, Q0
    record = [] if trace is not None else None
    if trace is not None:
        trace["L"], trace["Q"] = [L0.data], [Q0.data]
    for j in range(1, cfg.N + 1):
        # LEM_j reads Q^{j-1}; QEM_j produces Q^j
        L_next = lem_forward(L, Q, params, j, record=record)
        Q = qem_forward(Q, params, j)
        L = L_next
        if trace is not None:
            trace["L"].append(L.data)
            trace["Q"].append(Q.data)
    if trace is not None:
        trace["maps"] = record
    f = fuse_weighted_mean(L0, L, Q)
    return upsample(f, params, cfg.r)


def extract_attention_maps(lr, qm, params: dict, cfg: ModelConfig, pixel) -> tuple:
    """Per-LEM (T x T) attention matrices at one pixel.

    ``pixel`` is (x, y) with x the column and y the row. Returns
    ``(qams, sams)``, each a list of N arrays.
    """
    lr_arr = np.asarray(lr)
    H, W = lr_arr.shape[-2:]
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < W and 0 <= y < H):
        raise IndexError(f"pixel (x={x}, y={y}) outside the {W}x{H} LR grid")
    trace = {}
    with tn.no_grad():
        forward(lr, qm, params, cfg, trace=trace)
    sams = [sam[0, y, x].copy() for sam, _ in trace["maps"]]
    qams = [qam[0, y, x].copy() for _, qam in trace["maps"]]
    return qams, sams


def count_parameters(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))

