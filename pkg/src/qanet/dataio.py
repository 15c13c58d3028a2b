"""Scenes, PROBA-V ingestion, synthetic data, patches and checkpoints."""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .model import ModelConfig, param_shapes

INTENSITY_DIVISOR = 65535.0
REGISTERED_MARKER = "REGISTERED.json"
CKPT_MAGIC = b"QANETCK1"
CKPT_VERSION = 1
PATCH_MIN_CLEAR = 0.1

_LR_RE = re.compile(r"^LR(\d+)\.png$")
_QM_RE = re.compile(r"^QM(\d+)\.png$")


class SceneLoadError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Scene:
    """One location: LR images with their quality maps, optional HR truth.

    LR/HR intensities are floats in [0, 1]; QM/SM are uint8 {0, 1}.
    """

    scene_id: str
    lr: list
    qm: list
    hr: np.ndarray | None = None
    sm: np.ndarray | None = None
    band: str = "synthetic"
    registered: bool = False
    lr_names: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.lr) != len(self.qm) or not self.lr:
            raise SceneLoadError(f"scene {self.scene_id}: {len(self.lr)} LR images but {len(self.qm)} QMs")
        shape = np.shape(self.lr[0])
        for i, (a, q) in enumerate(zip(self.lr, self.qm)):
            if np.shape(a) != shape or np.shape(q) != shape:
                raise SceneLoadError(f"scene {self.scene_id}: image {i} shape {np.shape(a)} / QM "
                                     f"{np.shape(q)} differs from {shape}")
        if (self.hr is None) != (self.sm is None):
            raise SceneLoadError(f"scene {self.scene_id}: HR and SM must be both present or both absent")
        if self.hr is not None:
            if np.shape(self.hr) != np.shape(self.sm):
                raise SceneLoadError(f"scene {self.scene_id}: HR {np.shape(self.hr)} != SM {np.shape(self.sm)}")
            r = self.hr.shape[0] // shape[0]
            if r < 1 or self.hr.shape != (shape[0] * r, shape[1] * r):
                raise SceneLoadError(f"scene {self.scene_id}: HR {self.hr.shape} is not an integer "
                                     f"multiple of LR {shape}")

    @property
    def n_images(self) -> int:
        return len(self.lr)

    @property
    def lr_shape(self) -> tuple:
        return tuple(np.shape(self.lr[0]))

    @property
    def scale(self) -> int | None:
        return None if self.hr is None else self.hr.shape[0] // self.lr_shape[0]

    @property
    def has_truth(self) -> bool:
        return self.hr is not None

    def subset(self, indices) -> "Scene":
        idx = list(indices)
        return Scene(self.scene_id, [self.lr[i] for i in idx], [self.qm[i] for i in idx], self.hr, self.sm,
                     self.band, self.registered,
                     [self.lr_names[i] for i in idx] if self.lr_names else None, dict(self.meta))


# -- PNG ------------------------------------------------------------------------

def _png_header(path: Path) -> tuple:
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise SceneLoadError(f"{path}: not a PNG file")
    return head[24], head[25]


def read_png16(path) -> np.ndarray:
    """Read a single-channel 16-bit PNG as uint16."""
    path = Path(path)
    depth, color = _png_header(path)
    if depth != 16 or color != 0:
        raise SceneLoadError(f"{path}: expected a 16-bit single-channel PNG, found bit depth {depth}, "
                             f"color type {color}")
    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint16)


def read_mask_png(path) -> np.ndarray:
    """Read a single-channel mask PNG of any bit depth; nonzero -> 1."""
    path = Path(path)
    depth, color = _png_header(path)
    if color != 0:
        raise SceneLoadError(f"{path}: mask must be single-channel grayscale (color type {color})")
    with Image.open(path) as im:
        return (np.asarray(im) != 0).astype(np.uint8)


def write_png16(path, image: np.ndarray, divisor: float = INTENSITY_DIVISOR) -> None:
    """Write intensities in [0, 1] as a 16-bit PNG (value * divisor, rounded)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * divisor), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8)).save(path)


# -- scene directories ---------------------------------------------------------

def load_probav_scene(path, divisor: float = INTENSITY_DIVISOR, band: str | None = None) -> Scene:
    """Load an imgset directory (LR###.png, QM###.png, optional HR.png and SM.png)."""
    path = Path(path)
    if not path.is_dir():
        raise SceneLoadError(f"{path}: not a directory")
    names = os.listdir(path)
    lrs = {int(m.group(1)): n for n in names if (m := _LR_RE.match(n))}
    qms = {int(m.group(1)): n for n in names if (m := _QM_RE.match(n))}
    for idx in sorted(set(lrs) ^ set(qms)):
        have, missing = (lrs[idx], f"QM{idx:03d}.png") if idx in lrs else (qms[idx], f"LR{idx:03d}.png")
        raise SceneLoadError(f"{path}: {have} has no matching {missing}")
    if not lrs:
        raise SceneLoadError(f"{path}: no LR###.png images found")
    order = sorted(lrs)
    lr = [read_png16(path / lrs[i]).astype(np.float64) / divisor for i in order]
    qm = [read_mask_png(path / qms[i]) for i in order]
    shape = lr[0].shape
    for i, a, q in zip(order, lr, qm):
        if a.shape != shape or q.shape != shape:
            raise SceneLoadError(f"{path}: LR{i:03d}/QM{i:03d} shapes {a.shape}/{q.shape} differ from {shape}")
    hr = sm = None
    has_hr, has_sm = (path / "HR.png").exists(), (path / "SM.png").exists()
    if has_hr != has_sm:
        raise SceneLoadError(f"{path}: {'SM.png' if has_hr else 'HR.png'} is missing")
    if has_hr:
        hr = read_png16(path / "HR.png").astype(np.float64) / divisor
        sm = read_mask_png(path / "SM.png")
        if hr.shape != sm.shape:
            raise SceneLoadError(f"{path}: HR.png {hr.shape} and SM.png {sm.shape} differ")
        r = hr.shape[0] // shape[0]
        if r < 1 or hr.shape != (shape[0] * r, shape[1] * r):
            raise SceneLoadError(f"{path}: HR.png {hr.shape} is not an integer multiple of LR {shape}")
    meta = {}
    registered = False
    marker = path / REGISTERED_MARKER
    if marker.exists():
        meta = json.loads(marker.read_text())
        registered = True
    if band is None:
        parts = {p.upper() for p in path.parts}
        band = "NIR" if "NIR" in parts else "RED" if "RED" in parts else "unknown"
    return Scene(path.name, lr, qm, hr, sm, band, registered, [f"LR{i:03d}" for i in order], meta)


def save_scene(scene: Scene, path, divisor: float = INTENSITY_DIVISOR) -> Path:
    """Write a scene in the imgset layout; registered scenes get a marker file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, (a, q) in enumerate(zip(scene.lr, scene.qm)):
        write_png16(path / f"LR{i:03d}.png", a, divisor)
        write_mask_png(path / f"QM{i:03d}.png", q)
    if scene.hr is not None:
        write_png16(path / "HR.png", scene.hr, divisor)
        write_mask_png(path / "SM.png", scene.sm)
    if scene.registered:
        (path / REGISTERED_MARKER).write_text(json.dumps(scene.meta, sort_keys=True, indent=1) + "\n")
    return path


def list_scene_dirs(root) -> list:
    """Imgset directories under ``root`` (``root`` itself if it is one), sorted."""
    root = Path(root)
    if not root.is_dir():
        raise SceneLoadError(f"{root}: not a directory")
    if any(_LR_RE.match(n) for n in os.listdir(root)):
        return [root]
    found = sorted(p.parent for p in root.rglob("LR*.png") if _LR_RE.match(p.name))
    return sorted(set(found))


def load_dataset(root, divisor: float = INTENSITY_DIVISOR) -> list:
    return [load_probav_scene(d, divisor) for d in list_scene_dirs(root)]


# -- synthetic scenes -------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a procedural scene. ``size`` is the LR side length; shifts are in HR pixels."""

    size: int = 32
    r: int = 3
    n_images: int = 9
    cloud_fraction: float = 0.3
    shift_range: int = 0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 1 or self.r < 1 or self.n_images < 1:
            raise ValueError(f"size, r and n_images must be positive: {self}")
        if not 0 <= self.cloud_fraction < 1:
            raise ValueError(f"cloud_fraction must lie in [0, 1), got {self.cloud_fraction}")
        if self.shift_range < 0 or self.noise_sigma < 0:
            raise ValueError(f"shift_range and noise_sigma must be non-negative: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic-scene keys: {sorted(unknown)}")
        return cls(**d)


def _hr_field(rng: np.random.Generator, side: int, r: int) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma=1.5 * r)
    fine = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma=0.7 * r)
    img = coarse / (coarse.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.25, 0.75) * side
        edge = (np.cos(theta) * (xx - side / 2) + np.sin(theta) * (yy - side / 2) + side / 2) > offset
        img = img + rng.uniform(-1.5, 1.5) * edge
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def box_downsample(image: np.ndarray, r: int) -> np.ndarray:
    H, W = image.shape
    return image.reshape(H // r, r, W // r, r).mean(axis=(1, 3))


def _cloud_mask(rng: np.random.Generator, size: int, fraction: float):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=max(1.0, size / 8))
    if fraction <= 0:
        return np.zeros((size, size), bool), np.zeros((size, size))
    thr = np.quantile(field_, 1 - fraction)
    cloud = field_ > thr
    span = max(field_.max() - thr, 1e-12)
    alpha = np.clip(0.6 + 0.4 * (field_ - thr) / span, 0, 1) * cloud
    return cloud, alpha


def synth_scene(spec: SynthSpec, scene_id: str | None = None) -> Scene:
    """Procedural scene with HR ground truth.

    HR is a smooth random field with step edges in [0.1, 0.9]. Each LR is the
    r x r box average of an integer-shifted HR plus Gaussian noise; clouds are
    smooth blobs that push the LR toward 1.0 and zero the QM.
    """
    rng = np.random.default_rng(spec.seed)
    side = spec.size * spec.r
    pad = spec.shift_range
    canvas = _hr_field(rng, side + 2 * pad, spec.r)
    hr = canvas[pad:pad + side, pad:pad + side].copy()
    lrs, qms, shifts = [], [], []
    for _ in range(spec.n_images):
        sy, sx = (int(v) for v in rng.integers(-pad, pad + 1, size=2)) if pad else (0, 0)
        shifted = canvas[pad + sy:pad + sy + side, pad + sx:pad + sx + side]
        lr = box_downsample(shifted, spec.r)
        if spec.noise_sigma > 0:
            lr = lr + rng.normal(0.0, spec.noise_sigma, lr.shape)
        frac = min(spec.cloud_fraction * rng.uniform(0.5, 1.5), 0.95) if spec.cloud_fraction > 0 else 0.0
        cloud, alpha = _cloud_mask(rng, spec.size, frac)
        lr = lr + (1.0 - lr) * alpha
        lrs.append(np.clip(lr, 0.0, 1.0))
        qms.append((~cloud).astype(np.uint8))
        # displacement (dx, dy) of this image's content relative to the HR grid
        shifts.append((-sx, -sy))
    sm = np.ones(hr.shape, np.uint8)
    sid = scene_id or f"synth{spec.seed:05d}"
    return Scene(sid, lrs, qms, hr, sm, "synthetic", registered=False,
                 meta={"spec": asdict(spec), "hr_shifts": shifts})


# -- patches ------------------------------------------------------------------------

@dataclass
class Patch:
    lr: np.ndarray      # (n, p, p)
    qm: np.ndarray      # (n, p, p)
    hr: np.ndarray      # (p*r, p*r)
    sm: np.ndarray      # (p*r, p*r)
    offset: tuple       # LR (row, col) of the top-left corner
    scene_id: str = ""


def extract_patches(scene: Scene, patch: int = 32, stride: int | None = None,
                    min_clear: float = PATCH_MIN_CLEAR) -> list:
    """Aligned LR/QM/HR patch tuples from a registered scene.

    HR offsets are r times the LR offsets. Patches whose HR clear fraction is
    below ``min_clear`` are skipped.
    """
    if not scene.registered:
        raise ValueError(f"scene {scene.scene_id}: register the scene before extracting patches")
    if scene.hr is None:
        raise ValueError(f"scene {scene.scene_id}: patches need an HR image")
    H, W = scene.lr_shape
    if patch > min(H, W):
        raise ValueError(f"patch {patch} exceeds LR size {H}x{W}")
    stride = stride or patch
    r = scene.scale
    lr = np.stack(scene.lr)
    qm = np.stack(scene.qm)
    out = []
    for y in range(0, H - patch + 1, stride):
        for x in range(0, W - patch + 1, stride):
            sm = scene.sm[y * r:(y + patch) * r, x * r:(x + patch) * r]
            if sm.mean() < min_clear:
                continue
            out.append(Patch(lr[:, y:y + patch, x:x + patch].copy(), qm[:, y:y + patch, x:x + patch].copy(),
                             scene.hr[y * r:(y + patch) * r, x * r:(x + patch) * r].copy(), sm.copy(),
                             (y, x), scene.scene_id))
    return out


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model parameters plus the optimizer and RNG state needed to resume."""

    config: ModelConfig
    params: dict                  # name -> ndarray
    adam_m: dict | None = None
    adam_v: dict | None = None
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(param_shapes(ckpt.config))
    missing = set(names) ^ set(ckpt.params)
    if missing:
        raise CheckpointError(f"parameter set does not match the config: {sorted(missing)}")
    dtype = np.asarray(ckpt.params[names[0]]).dtype.newbyteorder("<")
    has_moments = ckpt.adam_m is not None
    meta = {
        "format_version": CKPT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": int(ckpt.epoch),
        "step": int(ckpt.step),
        "names": names,
        "shapes": [list(np.shape(ckpt.params[n])) for n in names],
        "dtype": dtype.str,
        "has_moments": has_moments,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    blob = _canonical(meta)
    parts = [CKPT_MAGIC, struct.pack("<Q", len(blob)), blob]
    groups = [ckpt.params] + ([ckpt.adam_m, ckpt.adam_v] if has_moments else [])
    for group in groups:
        for n in names:
            parts.append(np.ascontiguousarray(group[n], dtype=dtype).tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(data[16:16 + mlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if meta.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected_config}")
    expected = param_shapes(config)
    names = meta["names"]
    unknown = [n for n in names if n not in expected]
    if unknown:
        raise CheckpointError(f"{path}: unknown parameter names {unknown}")
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        raise CheckpointError(f"{path}: parameter set is not closed under the config "
                              f"(missing {sorted(set(expected) - set(names))})")
    for n, shp in zip(names, meta["shapes"]):
        if tuple(shp) != expected[n]:
            raise CheckpointError(f"{path}: {n} has shape {tuple(shp)}, config requires {expected[n]}")
    dtype = np.dtype(meta["dtype"])
    sizes = [int(np.prod(s)) for s in meta["shapes"]]
    groups = 3 if meta["has_moments"] else 1
    need = 16 + mlen + groups * sum(sizes) * dtype.itemsize
    if len(data) != need:
        raise CheckpointError(f"{path}: payload is {len(data)} bytes, expected {need}")
    offset = 16 + mlen
    loaded = []
    for _ in range(groups):
        group = {}
        for n, shp, size in zip(names, meta["shapes"], sizes):
            arr = np.frombuffer(data, dtype=dtype, count=size, offset=offset).reshape(shp)
            group[n] = arr.astype(dtype.newbyteorder("="))
            offset += size * dtype.itemsize
        loaded.append(group)
    m, v = (loaded[1], loaded[2]) if groups == 3 else (None, None)
    return Checkpoint(config, loaded[0], m, v, meta["step"], meta["epoch"], meta["rng_state"], meta.get("extra", {}))
