"""Clear-pixel quality measures and the shift-search evaluation protocol."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

CMSE_FLOOR = 1e-10
MIN_CLEAR = 64
BORDER = 3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _clear(hr, sr, mask, min_clear: int = 1):
    hr = np.asarray(hr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    if hr.shape != sr.shape:
        raise ValueError(f"HR shape {hr.shape} != SR shape {sr.shape}")
    if mask is None:
        mask = np.ones(hr.shape, dtype=bool)
    mask = np.asarray(mask) != 0
    if mask.shape != hr.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {hr.shape}")
    n = int(mask.sum())
    if n < max(1, min_clear):
        raise ValueError(f"only {n} clear pixels; at least {max(1, min_clear)} required")
    return hr, sr, mask, n


def brightness_bias(hr, sr, mask=None) -> float:
    """Mean of HR - SR over clear pixels."""
    hr, sr, mask, n = _clear(hr, sr, mask)
    return float((hr - sr)[mask].sum() / n)


def cmse(hr, sr, mask=None) -> float:
    """Bias-corrected clear MSE, floored at 1e-10."""
    hr, sr, mask, n = _clear(hr, sr, mask)
    d = (hr - sr)[mask]
    b = d.sum() / n
    return max(float(((d - b) ** 2).sum() / n), CMSE_FLOOR)


def cpsnr(hr, sr, mask=None) -> float:
    """-10 log10(cMSE); 100 dB for a perfect (or constant-offset) reconstruction."""
    return -10.0 * math.log10(cmse(hr, sr, mask))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, y, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5), reflected borders."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = gaussian_window()
    filt = lambda a: ndimage.correlate(a, w, mode="reflect")
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def cssim(hr, sr, mask=None) -> float:
    """SSIM map averaged over clear pixels (no brightness correction)."""
    hr, sr, mask, n = _clear(hr, sr, mask)
    return float(ssim_map(hr, sr)[mask].sum() / n)


@dataclass
class SceneScore:
    scene_id: str
    cpsnr: float | None
    offset: tuple | None
    cssim: float | None
    clear_pixels: int
    candidates: int = 0

    @property
    def scored(self) -> bool:
        return self.cpsnr is not None


def evaluate_with_shift_search(hr, sr, status_map=None, scene_id: str = "",
                               border: int = BORDER, min_clear: int = MIN_CLEAR) -> SceneScore:
    """Score the border-cropped SR against every HR placement within +-border.

    The crop ``sr[b:-b, b:-b]`` is compared with ``hr[u:u+h, v:v+w]`` for
    ``u, v in 0..2b``; offset (b, b) is zero displacement. The best cPSNR, its
    offset, and cSSIM at that offset are reported. Placements with fewer than
    ``min_clear`` clear pixels are skipped; if none qualify the scene is
    returned unscored.
    """
    hr = np.asarray(hr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    if hr.shape != sr.shape:
        raise ValueError(f"HR shape {hr.shape} != SR shape {sr.shape}")
    mask = np.ones(hr.shape, bool) if status_map is None else np.asarray(status_map) != 0
    span = 2 * border + 1
    if min(hr.shape) < span:
        raise ValueError(f"image {hr.shape} is smaller than {span} pixels per side")
    h, w = hr.shape[0] - 2 * border, hr.shape[1] - 2 * border
    crop = sr[border:border + h, border:border + w]
    best = None
    evaluated = 0
    for u in range(span):
        for v in range(span):
            evaluated += 1
            m = mask[u:u + h, v:v + w]
            if m.sum() < min_clear:
                continue
            score = cpsnr(hr[u:u + h, v:v + w], crop, m)
            if best is None or score > best[0]:
                best = (score, (u, v))
    total_clear = int(mask.sum())
    if best is None:
        return SceneScore(scene_id, None, None, None, total_clear, evaluated)
    u, v = best[1]
    m = mask[u:u + h, v:v + w]
    ss = cssim(hr[u:u + h, v:v + w], crop, m)
    return SceneScore(scene_id, best[0], (u, v), ss, int(m.sum()), evaluated)


@dataclass
class EvalReport:
    scenes: list = field(default_factory=list)
    intensity_divisor: float = 65535.0

    @property
    def scored(self) -> list:
        return [s for s in self.scenes if s.scored]

    @property
    def mean_cpsnr(self) -> float | None:
        s = self.scored
        return float(np.mean([x.cpsnr for x in s])) if s else None

    @property
    def mean_cssim(self) -> float | None:
        s = self.scored
        return float(np.mean([x.cssim for x in s])) if s else None

    def table(self) -> str:
        lines = [f"{'scene':<24} {'cPSNR(dB)':>10} {'offset':>8} {'cSSIM':>8} {'clear':>8}"]
        for s in self.scenes:
            if s.scored:
                lines.append(f"{s.scene_id:<24} {s.cpsnr:>10.4f} {str(s.offset[0]) + ',' + str(s.offset[1]):>8} "
                             f"{s.cssim:>8.5f} {s.clear_pixels:>8d}")
            else:
                lines.append(f"{s.scene_id:<24} {'unscored':>10} {'-':>8} {'-':>8} {s.clear_pixels:>8d}")
        if self.scored:
            lines.append(f"{'mean':<24} {self.mean_cpsnr:>10.4f} {'':>8} {self.mean_cssim:>8.5f} "
                         f"{len(self.scored):>8d}")
        return "\n".join(lines)

    def records(self) -> list:
        out = []
        for s in self.scenes:
            rec = asdict(s)
            rec["offset"] = list(s.offset) if s.offset is not None else None
            rec["intensity_divisor"] = self.intensity_divisor
            out.append(rec)
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def bicubic_upsample(image, r: int) -> np.ndarray:
    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    h, w = im.size[1], im.size[0]
    return np.asarray(im.resize((w * r, h * r), Image.BICUBIC), dtype=np.float64)


def mean_bicubic_baseline(lrs, r: int) -> np.ndarray:
    """QM-agnostic reference: per-pixel mean of bicubic-upsampled LR images."""
    return np.mean([bicubic_upsample(a, r) for a in lrs], axis=0)
