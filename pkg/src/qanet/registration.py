"""Translation registration by masked normalized cross-correlation.

Masked NCC over all integer shifts is assembled from six masked
cross-correlations (counts, sums, sums of squares and the cross term),
each evaluated with zero-padded real FFTs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft

from .dataio import Scene

log = logging.getLogger(__name__)

VAR_RTOL = 1e-9
VAR_ATOL = 1e-12


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Shift:
    """Displacement of a moving image relative to the reference.

    ``moving[y, x] == reference[y - dy, x - dx]`` at the peak.
    """

    dx: int
    dy: int
    peak_ncc: float


@dataclass
class NCCSurface:
    """NCC for every shift in [-max_shift, max_shift]^2, indexed [dy + K, dx + K]."""

    values: np.ndarray
    valid: np.ndarray
    max_shift: int

    def at(self, dx: int, dy: int) -> float:
        K = self.max_shift
        return float(self.values[dy + K, dx + K])

    def peak(self) -> Shift:
        if not self.valid.any():
            raise RegistrationError("no valid shift in correlation surface")
        v = np.where(self.valid, self.values, -np.inf)
        iy, ix = np.unravel_index(int(np.argmax(v)), v.shape)
        K = self.max_shift
        return Shift(int(ix - K), int(iy - K), float(self.values[iy, ix]))


def _prepare(image, mask):
    image = np.asarray(image, dtype=np.float64)
    mask = (np.asarray(mask) != 0).astype(np.float64)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    clear = mask > 0
    # NCC is invariant to an additive constant; centring limits cancellation
    centre = image[clear].mean() if clear.any() else 0.0
    return (image - centre) * mask, mask


def _ncc_from_sums(n, sf, sm, sff, smm, sfm, min_pixels):
    with np.errstate(divide="ignore", invalid="ignore"):
        vf = sff - sf * sf / n
        vm = smm - sm * sm / n
        num = sfm - sf * sm / n
        valid = (n >= min_pixels) & (n > 0)
        valid &= vf > VAR_RTOL * sff + VAR_ATOL * n
        valid &= vm > VAR_RTOL * smm + VAR_ATOL * n
        ncc = np.where(valid, num / np.sqrt(np.where(valid, vf * vm, 1.0)), np.nan)
    return np.clip(ncc, -1.0, 1.0), valid


def _checked(surface: NCCSurface) -> NCCSurface:
    if not surface.valid.any():
        raise RegistrationError("every shift is invalid (too little overlap or a constant image)")
    return surface


def masked_ncc_surface(fixed, fixed_mask, moving, moving_mask, max_shift: int,
                       overlap_min: float = 0.5) -> NCCSurface:
    """Masked NCC of ``moving`` against ``fixed`` for all shifts up to ``max_shift``.

    At shift (dx, dy) the pair ``fixed[y, x]``, ``moving[y + dy, x + dx]``
    contributes when both masks are clear there. Shifts whose overlap is
    below ``overlap_min`` (a fraction of the image's pixels) or where either
    image is constant over the overlap are invalid; a surface with no valid
    shift raises :class:`RegistrationError`.
    """
    f, mf = _prepare(fixed, fixed_mask)
    m, mm = _prepare(moving, moving_mask)
    if f.shape != m.shape:
        raise ValueError(f"fixed {f.shape} and moving {m.shape} differ in shape")
    H, W = f.shape
    K = int(min(max_shift, H - 1, W - 1))
    shape = (fft.next_fast_len(H + K, real=True), fft.next_fast_len(W + K, real=True))
    fwd = lambda a: fft.rfft2(a, s=shape)
    F_mf, F_f, F_ff = fwd(mf), fwd(f), fwd(f * f)
    F_mm, F_m, F_mmsq = fwd(mm), fwd(m), fwd(m * m)

    rows = np.r_[np.arange(K + 1), shape[0] - np.arange(K, 0, -1)]
    cols = np.r_[np.arange(K + 1), shape[1] - np.arange(K, 0, -1)]
    order_r = np.r_[np.arange(K + 1, 2 * K + 1), np.arange(K + 1)]
    order_c = np.r_[np.arange(K + 1, 2 * K + 1), np.arange(K + 1)]

    def xcorr(A, B):
        # sum_y a(y) b(y + s), cropped to |s| <= K and reordered to s = -K..K
        full = fft.irfft2(np.conj(A) * B, s=shape)
        return full[np.ix_(rows, cols)][np.ix_(order_r, order_c)]

    n = np.round(xcorr(F_mf, F_mm))
    sums = (xcorr(F_f, F_mm), xcorr(F_mf, F_m), xcorr(F_ff, F_mm), xcorr(F_mf, F_mmsq), xcorr(F_f, F_m))
    ncc, valid = _ncc_from_sums(n, *sums, overlap_min * H * W)
    return _checked(NCCSurface(ncc, valid, K))


def masked_ncc_direct(fixed, fixed_mask, moving, moving_mask, max_shift: int,
                      overlap_min: float = 0.5) -> NCCSurface:
    """Shift-by-shift evaluation of the same masked NCC (reference path)."""
    f, mf = _prepare(fixed, fixed_mask)
    m, mm = _prepare(moving, moving_mask)
    H, W = f.shape
    K = int(min(max_shift, H - 1, W - 1))
    size = 2 * K + 1
    out = {k: np.zeros((size, size)) for k in ("n", "sf", "sm", "sff", "smm", "sfm")}
    for dy in range(-K, K + 1):
        for dx in range(-K, K + 1):
            y0, y1 = max(0, -dy), min(H, H - dy)
            x0, x1 = max(0, -dx), min(W, W - dx)
            fw = f[y0:y1, x0:x1]
            mfw = mf[y0:y1, x0:x1]
            mw = m[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            mmw = mm[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            i, j = dy + K, dx + K
            both = mfw * mmw
            out["n"][i, j] = both.sum()
            out["sf"][i, j] = (fw * mmw).sum()
            out["sm"][i, j] = (mfw * mw).sum()
            out["sff"][i, j] = (fw * fw * mmw).sum()
            out["smm"][i, j] = (mfw * mw * mw).sum()
            out["sfm"][i, j] = (fw * mw).sum()
    ncc, valid = _ncc_from_sums(out["n"], out["sf"], out["sm"], out["sff"], out["smm"], out["sfm"],
                                overlap_min * H * W)
    return _checked(NCCSurface(ncc, valid, K))


def translate(image, mask, dx: int, dy: int):
    """Undo a (dx, dy) displacement: out[y, x] = image[y + dy, x + dx].

    Pixels that fall outside the source are zero in the image and
    disturbed in the mask.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    H, W = image.shape
    out = np.zeros_like(image)
    out_mask = np.zeros_like(mask)
    y0, y1 = max(0, -dy), min(H, H - dy)
    x0, x1 = max(0, -dx), min(W, W - dx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = image[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        out_mask[y0:y1, x0:x1] = mask[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return out, out_mask


@dataclass
class RegistrationResult:
    scene: Scene
    reference: int
    shifts: list
    dropped: list = field(default_factory=list)

    def report(self) -> str:
        lines = [f"{'index':>5} {'dx':>4} {'dy':>4} {'peak_ncc':>10}"]
        for i, s in enumerate(self.shifts):
            if s is None:
                lines.append(f"{i:>5} {'-':>4} {'-':>4} {'dropped':>10}")
            else:
                lines.append(f"{i:>5} {s.dx:>4d} {s.dy:>4d} {s.peak_ncc:>10.6f}")
        return "\n".join(lines)


def reference_index(qms) -> int:
    """Index of the QM with the most clear pixels (lowest index on ties)."""
    counts = [int(np.count_nonzero(q)) for q in qms]
    return int(np.argmax(counts))


def register_scene(scene: Scene, max_shift: int = 16, overlap_min: float = 0.5) -> RegistrationResult:
    """Align every LR of a scene to its clearest image by integer translation.

    Images whose correlation surface has no valid shift are dropped and
    listed in ``dropped``; their entry in ``shifts`` is None.
    """
    if not scene.lr:
        raise ValueError(f"scene {scene.scene_id!r} has no images")
    ref = reference_index(scene.qm)
    lr_out, qm_out, shifts, dropped = [], [], [], []
    for i, (img, q) in enumerate(zip(scene.lr, scene.qm)):
        if i == ref:
            lr_out.append(np.array(img, copy=True))
            qm_out.append(np.array(q, copy=True))
            shifts.append(Shift(0, 0, 1.0))
            continue
        try:
            s = masked_ncc_surface(scene.lr[ref], scene.qm[ref], img, q, max_shift, overlap_min).peak()
        except RegistrationError:
            log.warning("scene %s: image %d has no valid registration shift; dropped", scene.scene_id, i)
            dropped.append(i)
            shifts.append(None)
            continue
        a, am = translate(img, q, s.dx, s.dy)
        lr_out.append(a)
        qm_out.append(am)
        shifts.append(s)
    kept = [i for i in range(len(scene.lr)) if i not in dropped]
    reg = replace(scene, lr=lr_out, qm=qm_out, registered=True,
                  lr_names=[scene.lr_names[i] for i in kept] if scene.lr_names else None)
    return RegistrationResult(reg, ref, shifts, dropped)
