"""Command-line entry point: ``qanet <subcommand> ...``.

Exit status is 0 on success, 1 on validation errors (bad flags, configs or
inputs) and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from PIL import Image

from . import dataio, gradcheck, metrics, model, registration, selection, training
from .tensor import Tensor, no_grad

log = logging.getLogger("qanet")

LOCK_NAME = ".qanet.lock"


class ValidationError(Exception):
    """Bad user input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- run configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    model: model.ModelConfig
    train: training.TrainConfig
    selection: selection.SelectionConfig
    max_shift: int = 16
    overlap_min: float = 0.5
    train_data: str | None = None
    val_data: str | None = None
    divisor: float = dataio.INTENSITY_DIVISOR
    output_dir: str = "run"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, source: str = "config") -> "RunConfig":
        allowed = {"model", "train", "selection", "registration", "data", "output_dir", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValidationError(f"{source}: unknown keys {sorted(unknown)}")
        try:
            seed = int(d.get("seed", 0))
            mcfg = model.ModelConfig.from_dict(d.get("model", {}))
            tdict = {"T": mcfg.T, **d.get("train", {}), "seed": seed}
            tcfg = training.TrainConfig.from_dict(tdict)
            sdict = {"T": mcfg.T, **d.get("selection", {}), "seed": seed}
            unknown_sel = set(sdict) - set(selection.SelectionConfig.__dataclass_fields__)
            if unknown_sel:
                raise ValueError(f"unknown selection keys: {sorted(unknown_sel)}")
            scfg = selection.SelectionConfig(**sdict)
            reg = dict(d.get("registration", {}))
            unknown_reg = set(reg) - {"max_shift", "overlap_min"}
            if unknown_reg:
                raise ValueError(f"unknown registration keys: {sorted(unknown_reg)}")
            data = dict(d.get("data", {}))
            unknown_data = set(data) - {"train", "val", "divisor"}
            if unknown_data:
                raise ValueError(f"unknown data keys: {sorted(unknown_data)}")
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{source}: {exc}") from None
        if not (tcfg.T == scfg.T == mcfg.T):
            raise ValidationError(f"{source}: T differs between model ({mcfg.T}), train ({tcfg.T}) "
                                  f"and selection ({scfg.T})")
        max_shift = int(reg.get("max_shift", 16))
        overlap_min = float(reg.get("overlap_min", 0.5))
        if max_shift < 0 or not 0 < overlap_min <= 1:
            raise ValidationError(f"{source}: registration needs max_shift >= 0 and 0 < overlap_min <= 1")
        return cls(mcfg, tcfg, scfg, max_shift, overlap_min, data.get("train"), data.get("val"),
                   float(data.get("divisor", dataio.INTENSITY_DIVISOR)), d.get("output_dir", "run"), seed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"--config: {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--config: {path} is not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"--config: {path} must hold a JSON object")
        return cls.from_dict(raw, source=str(path))


# -- helpers -------------------------------------------------------------------------

@contextmanager
def _locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"{directory}: another qanet process holds {LOCK_NAME}") from None
    try:
        yield
    finally:
        lock.release()


def _load_scenes(root, flag: str, divisor: float = dataio.INTENSITY_DIVISOR) -> list:
    root = Path(root)
    if not root.exists():
        raise ValidationError(f"{flag}: {root} does not exist")
    try:
        dirs = dataio.list_scene_dirs(root)
        if not dirs:
            raise ValidationError(f"{flag}: no imgset directories under {root}")
        return [dataio.load_probav_scene(d, divisor) for d in dirs]
    except dataio.SceneLoadError as exc:
        raise ValidationError(f"{flag}: {exc}") from None


def _ensure_registered(scene, max_shift: int = 16, overlap_min: float = 0.5):
    if scene.registered:
        return scene
    return registration.register_scene(scene, max_shift, overlap_min).scene


def _load_ckpt(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"--ckpt: {path} does not exist")
    try:
        return dataio.load_checkpoint(path)
    except dataio.CheckpointError as exc:
        raise ValidationError(f"--ckpt: {exc}") from None


def _params(ckpt) -> dict:
    return {k: Tensor(v) for k, v in ckpt.params.items()}


def _selected_stack(scene, cfg: model.ModelConfig, sel: selection.SelectionConfig):
    if scene.n_images < cfg.T:
        raise ValidationError(f"scene {scene.scene_id}: {scene.n_images} images after registration, "
                              f"model needs T={cfg.T}")
    idx = selection.select_test_subset(scene.qm, sel)
    return np.stack([scene.lr[i] for i in idx]), np.stack([scene.qm[i] for i in idx]), idx


def _parse_pixel(text: str):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--pixel: expected x,y integers, got {text!r}") from None
    return x, y


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except FileNotFoundError:
        raise ValidationError(f"--spec: {args.spec} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--spec: {args.spec} is not valid JSON ({exc})") from None
    n_scenes = int(raw.pop("n_scenes", 1))
    divisor = float(raw.pop("divisor", dataio.INTENSITY_DIVISOR))
    try:
        spec = dataio.SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"--spec: {exc}") from None
    out = Path(args.out)
    with _locked(out):
        for i in range(n_scenes):
            scene = dataio.synth_scene(replace(spec, seed=spec.seed + i), scene_id=f"imgset{i:04d}")
            dataio.save_scene(scene, out / scene.scene_id, divisor)
    print(f"wrote {n_scenes} synthetic scenes to {out}")
    return 0


def cmd_register(args) -> int:
    scenes = _load_scenes(args.data, "--data")
    out = Path(args.out) if args.out else Path(str(Path(args.data).resolve()) + "_registered")
    lines = []
    with _locked(out):
        for scene in scenes:
            res = registration.register_scene(scene, args.max_shift, args.overlap_min)
            res.scene.meta = {**res.scene.meta, "registration": {
                "reference": res.reference, "dropped": res.dropped,
                "shifts": [None if s is None else [s.dx, s.dy, s.peak_ncc] for s in res.shifts]}}
            dataio.save_scene(res.scene, out / scene.scene_id)
            lines.append(f"# {scene.scene_id} (reference {res.reference})\n{res.report()}")
        report = "\n".join(lines) + "\n"
        (out / "shifts.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_select(args) -> int:
    scenes = _load_scenes(args.data, "--data")
    try:
        cfg = selection.SelectionConfig(args.t, args.p, args.iterations, args.objective, args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    for scene in scenes:
        try:
            idx = selection.select_test_subset(scene.qm, cfg)
        except ValueError as exc:
            raise ValidationError(f"scene {scene.scene_id}: {exc}") from None
        print(f"{scene.scene_id}: {idx}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if not cfg.train_data:
        raise ValidationError(f"{args.config}: data.train is required")
    scenes = _load_scenes(cfg.train_data, "data.train", cfg.divisor)
    scenes = [_ensure_registered(s, cfg.max_shift, cfg.overlap_min) for s in scenes]
    out = Path(cfg.output_dir)
    with _locked(out):
        def sink(ckpt):
            name = "final.qnt" if ckpt.epoch == cfg.train.epochs else f"ckpt_epoch{ckpt.epoch:04d}.qnt"
            dataio.save_checkpoint(ckpt, out / name)

        result = training.train(scenes, cfg.model, cfg.train, on_checkpoint=sink)
        (out / "loss.csv").write_text(result.history_csv())
    last = result.history[-1]
    print(f"trained {last[1]} steps; final loss {last[2]:.4f}; checkpoint {out / 'final.qnt'}")
    return 0


def cmd_infer(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cfg = ckpt.config
    scenes = _load_scenes(args.data, "--data")
    sel = selection.SelectionConfig(cfg.T, args.p, args.iterations, args.objective, args.seed)
    params = _params(ckpt)
    out = Path(args.out)
    with _locked(out):
        for scene in scenes:
            scene = _ensure_registered(scene, args.max_shift, args.overlap_min)
            lr, qmap, _ = _selected_stack(scene, cfg, sel)
            with no_grad():
                sr = model.forward(lr, qmap, params, cfg).data[0]
            dataio.write_png16(out / f"{scene.scene_id}.png", np.clip(sr, 0.0, 1.0))
    print(f"wrote {len(scenes)} SR images to {out}")
    return 0


def cmd_evaluate(args) -> int:
    scenes = _load_scenes(args.data, "--data", args.divisor)
    sr_dir = Path(args.sr)
    if not sr_dir.is_dir():
        raise ValidationError(f"--sr: {sr_dir} is not a directory")
    report = metrics.EvalReport(intensity_divisor=args.divisor)
    for scene in scenes:
        if not scene.has_truth:
            raise ValidationError(f"--data: scene {scene.scene_id} has no HR.png/SM.png and cannot be scored")
        path = sr_dir / f"{scene.scene_id}.png"
        if not path.exists():
            raise ValidationError(f"--sr: missing {path}")
        try:
            sr = dataio.read_png16(path).astype(np.float64) / args.divisor
        except dataio.SceneLoadError as exc:
            raise ValidationError(f"--sr: {exc}") from None
        if sr.shape != scene.hr.shape:
            raise ValidationError(f"--sr: {path} has shape {sr.shape}, HR is {scene.hr.shape}")
        report.scenes.append(metrics.evaluate_with_shift_search(scene.hr, sr, scene.sm, scene.scene_id))
    out = Path(args.report) if args.report else sr_dir / "evaluation.jsonl"
    report.write_jsonl(out)
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config).model if args.config else model.ModelConfig.tiny()
    results = gradcheck.worst(gradcheck.run_suite(cfg, seed=args.seed))
    failed = False
    for name, err in results.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<16} max rel err {err:.3e}")
    return 1 if failed else 0


def _render(mat: np.ndarray, cell: int = 16) -> Image.Image:
    m = np.asarray(mat, dtype=np.float64)
    img = np.rint(np.clip(m, 0.0, 1.0) * 255).astype(np.uint8)
    return Image.fromarray(np.kron(img, np.ones((cell, cell), np.uint8)))


def cmd_attmaps(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cfg = ckpt.config
    x, y = _parse_pixel(args.pixel)
    scene = _load_scenes(args.scene, "--scene")[0]
    scene = _ensure_registered(scene)
    sel = selection.SelectionConfig(cfg.T, args.p, args.iterations, seed=args.seed)
    lr, qmap, idx = _selected_stack(scene, cfg, sel)
    try:
        qams, sams = model.extract_attention_maps(lr, qmap, _params(ckpt), cfg, (x, y))
    except IndexError as exc:
        raise ValidationError(f"--pixel: {exc}") from None
    out = Path(args.out)
    with _locked(out):
        for j, (qam, sam) in enumerate(zip(qams, sams), start=1):
            for tag, mat in (("qam", qam), ("sam", sam)):
                np.savetxt(out / f"lem{j:02d}_{tag}.csv", mat, delimiter=",", fmt="%.10f")
                _render(mat).save(out / f"lem{j:02d}_{tag}.png")
        (out / "images.txt").write_text(" ".join(str(i) for i in idx) + "\n")
    print(f"wrote {len(qams)} QAM/SAM pairs for pixel ({x}, {y}) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qanet", description="Quality-map associated attention network for multi-image SR.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", help="register scenes and print the shift report")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--max-shift", type=int, default=16)
    s.add_argument("--overlap-min", type=float, default=0.5)
    s.set_defaults(func=cmd_register)

    def selection_flags(s, with_t: bool):
        if with_t:
            s.add_argument("--t", type=int, required=True)
        s.add_argument("--p", type=int, default=50)
        s.add_argument("--iterations", type=int, default=1000)
        s.add_argument("--objective", choices=selection.OBJECTIVES, default="maximize_min_coverage")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("select", help="choose T images per scene")
    s.add_argument("--data", required=True)
    selection_flags(s, with_t=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", help="train from a run configuration")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="write 16-bit SR PNGs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-shift", type=int, default=16)
    s.add_argument("--overlap-min", type=float, default=0.5)
    selection_flags(s, with_t=False)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="score SR PNGs against HR with shift search")
    s.add_argument("--data", required=True)
    s.add_argument("--sr", required=True)
    s.add_argument("--report")
    s.add_argument("--divisor", type=float, default=dataio.INTENSITY_DIVISOR)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="run the finite-difference suite")
    s.add_argument("--config")
    s.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("attmaps", help="dump per-LEM attention maps at one pixel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--pixel", required=True, help="x,y (column, row) on the LR grid")
    s.add_argument("--out", required=True)
    selection_flags(s, with_t=False)
    s.set_defaults(func=cmd_attmaps)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
