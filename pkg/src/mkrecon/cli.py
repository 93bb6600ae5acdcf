"""Command line interface binding the library into reproducible jobs.

Commands: synth-data, train-stage1, train-stage2, reconstruct, evaluate,
compare-baseline, export-slices, plot-log.  Configuration comes from a JSON
file (see docs/FORMATS.md and docs/config.example.json); command-line flags
override file values.  All randomness flows from the single config seed.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as dio
from . import metrics, pipeline, training
from .difftensor import NumericError
from .losses import Stage1LossConfig, Stage2LossConfig, parse_loss_log
from .pipeline import GAPS, Volume


class UsageError(Exception):
    """Bad command, flag or configuration."""


class DataError(Exception):
    """Missing or inconsistent input data."""


@dataclass
class JobConfig:
    """Structured job settings; JSON keys match field names."""

    seed: int | None = None
    gap: int = 8
    output_dir: str = "out"
    volumes: str = ""                    # glob of ground-truth volume payloads
    phantom_count: int = 4
    phantom_dims: tuple[int, int, int] = (33, 48, 48)
    phantom_ellipsoids: int = 5
    phantom_lesion: bool = True
    levels: int = 3
    base_channels: int = 32
    refine_hidden: int = 8
    alpha: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 1.0
    alpha1: float = 0.25
    alpha2_initial: float = 1.0
    alpha2_decrement: float = 0.016
    acquired_slice_weight: float = 2.0
    stage1_lr: float = 1e-4
    stage1_batch: int = 8
    stage1_epochs: int = 20
    stage2_lr: float = 1e-4
    stage2_batch: int = 4
    stage2_epochs: int = 50
    shared_stage1_model: bool = False
    ssim_mode: str = "global"
    models: dict = field(default_factory=dict)   # {"2"|"4"|"8"|"stage2": path}

    def validate(self) -> None:
        if self.gap not in GAPS:
            raise UsageError(f"config: gap must be one of {GAPS}, got {self.gap}")
        if self.ssim_mode not in ("global", "windowed"):
            raise UsageError(f"config: unknown ssim_mode {self.ssim_mode!r}")

    def require_seed(self) -> int:
        if self.seed is None:
            raise UsageError("config: a seed is required for training commands")
        return int(self.seed)

    def model_path(self, key: str) -> str:
        default = {"stage2": os.path.join(self.output_dir, "stage2.ckpt")}
        for g in GAPS:
            default[str(g)] = os.path.join(self.output_dir, f"stage1_gap{g}.ckpt")
        return self.models.get(key, default[key])


def load_config(path: str | None, overrides: dict) -> JobConfig:
    cfg = JobConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        known = {f.name for f in fields(JobConfig)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"config: unknown keys {sorted(unknown)}")
        if "phantom_dims" in raw:
            raw["phantom_dims"] = tuple(raw["phantom_dims"])
        cfg = replace(cfg, **raw)
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="mkrecon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON job config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--gap", type=int, default=None, choices=GAPS)
        sp.add_argument("--output-dir", default=None)

    sp = sub.add_parser("synth-data", help="generate seeded phantom volumes")
    common(sp)
    sp.add_argument("--count", type=int, default=None)

    sp = sub.add_parser("train-stage1", help="train the slice-synthesis model")
    common(sp)
    sp.add_argument("--epochs", type=int, default=None)

    sp = sub.add_parser("train-stage2", help="train the volumetric refiner")
    common(sp)
    sp.add_argument("--epochs", type=int, default=None)

    sp = sub.add_parser("reconstruct", help="reconstruct a dense volume")
    common(sp)
    sp.add_argument("--input", required=True, help="ground-truth volume payload")
    sp.add_argument("--output", required=True, help="output volume payload path")
    sp.add_argument("--refine", dest="refine", action="store_true", default=True)
    sp.add_argument("--no-refine", dest="refine", action="store_false")
    sp.add_argument("--zero-init-models", action="store_true",
                    help="use untrained zero-init models (baseline behaviour)")

    sp = sub.add_parser("evaluate", help="score a reconstruction against truth")
    common(sp)
    sp.add_argument("--recon", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--report", default=None, help="CSV output path")
    sp.add_argument("--refined", action="store_true",
                    help="annotate the report row as refined")
    sp.add_argument("--per-slice", action="store_true")

    sp = sub.add_parser("compare-baseline",
                        help="classical interpolation vs the model, one report")
    common(sp)
    sp.add_argument("--input", required=True, help="ground-truth volume payload")
    sp.add_argument("--report", default=None)
    sp.add_argument("--method", choices=["linear", "cubic", "both"],
                    default="both")
    sp.add_argument("--with-model", action="store_true",
                    help="also run the trained model (and refiner if present)")
    sp.add_argument("--zero-init-models", action="store_true")

    sp = sub.add_parser("export-slices", help="write slices as 8-bit PGM")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--indices", type=int, nargs="+", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("plot-log", help="render a loss log as a PGM curve")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--out", required=True)
    return p


def _config_from_args(args) -> JobConfig:
    overrides = {"seed": getattr(args, "seed", None),
                 "gap": getattr(args, "gap", None),
                 "output_dir": getattr(args, "output_dir", None)}
    return load_config(args.config, overrides)


def _glob_volumes(cfg: JobConfig) -> list[tuple[str, Volume]]:
    pattern = cfg.volumes or os.path.join(cfg.output_dir, "*.vol")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise DataError(f"no volumes match {pattern!r}")
    out = []
    for p in paths:
        vid = os.path.splitext(os.path.basename(p))[0]
        out.append((vid, dio.load_volume(p)))
    return out


def _load_stage1_registry(cfg: JobConfig, zero_init: bool):
    from .models import init_params
    needed = []
    g = cfg.gap
    while g >= 2:
        needed.append(g)
        g //= 2
    registry = {}
    if zero_init:
        seed = 0 if cfg.seed is None else int(cfg.seed)
        shared = init_params("stage1", seed, levels=cfg.levels,
                             base_channels=cfg.base_channels)
        return {g: shared for g in needed}
    if cfg.shared_stage1_model:
        ckpt = training.load_checkpoint(_existing(cfg.model_path(str(cfg.gap))))
        shared = training.stage1_params_from_checkpoint(ckpt)
        return {g: shared for g in needed}
    for g in needed:
        ckpt = training.load_checkpoint(_existing(cfg.model_path(str(g))))
        registry[g] = training.stage1_params_from_checkpoint(ckpt)
    return registry


def _existing(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing model checkpoint {path}")
    return path


def _crop_truth(truth: Volume, recon: Volume, gap: int) -> Volume:
    if truth.shape[1:] != recon.shape[1:]:
        raise DataError(
            f"in-plane dims differ: truth {truth.shape[1:]} vs "
            f"recon {recon.shape[1:]}")
    if truth.depth == recon.depth:
        return truth
    expected = gap * ((truth.depth - 1) // gap) + 1
    if recon.depth == expected:
        return replace(truth, voxels=truth.voxels[:expected].copy(),
                       acquired_mask=truth.acquired_mask[:expected].copy())
    raise DataError(
        f"depth mismatch: truth {truth.depth}, recon {recon.depth}; "
        f"gap-{gap} cropping of the truth would give {expected} slices")


def _acquired_count(depth: int, gap: int) -> int:
    return (depth - 1) // gap + 1


# ---------------------------------------------------------------------------
# commands


def _cmd_synth_data(args) -> int:
    cfg = _config_from_args(args)
    seed = cfg.require_seed()
    count = cfg.phantom_count if args.count is None else args.count
    os.makedirs(cfg.output_dir, exist_ok=True)
    for i in range(count):
        vol = dio.generate_phantom(seed + i, dims=cfg.phantom_dims,
                                   n_ellipsoids=cfg.phantom_ellipsoids,
                                   lesion=cfg.phantom_lesion)
        path = os.path.join(cfg.output_dir, f"vol{i:03d}.vol")
        dio.save_volume(vol, path)
        print(f"wrote {path} dims={vol.shape}")
    return 0


def _cmd_train_stage1(args) -> int:
    cfg = _config_from_args(args)
    seed = cfg.require_seed()
    volumes = dict(_glob_volumes(cfg))
    half = cfg.gap // 2
    triplets = dio.make_triplets(list(volumes.items()), half)
    if not triplets:
        raise DataError(f"no training triplets at half-gap {half}")
    tc = training.Stage1TrainConfig(
        seed=seed, epochs=cfg.stage1_epochs if args.epochs is None else args.epochs,
        batch_size=cfg.stage1_batch, lr=cfg.stage1_lr, levels=cfg.levels,
        base_channels=cfg.base_channels,
        loss=Stage1LossConfig(lambda1=cfg.lambda1, lambda2=cfg.lambda2))
    ckpt, log = training.train_stage1(triplets, volumes, tc)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = cfg.model_path(str(cfg.gap))
    training.save_checkpoint(ckpt, path)
    with open(path + ".loss.log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    print(f"wrote {path} (best val PSNR {ckpt.best_metric:.6f} dB, "
          f"epoch {ckpt.epoch})")
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _config_from_args(args)
    seed = cfg.require_seed()
    volumes = _glob_volumes(cfg)
    registry = _load_stage1_registry(cfg, zero_init=False)
    pairs = []
    for vid, vol in volumes:
        sparse = pipeline.sparse_sample(vol, cfg.gap)
        plan = pipeline.doubling_plan(sparse.depth, cfg.gap)
        coarse = pipeline.reconstruct_volume(sparse, plan, registry)
        truth = replace(vol, voxels=vol.voxels[:sparse.depth].copy(),
                        acquired_mask=vol.acquired_mask[:sparse.depth].copy())
        pairs.append((vid, coarse, truth))
    tc = training.Stage2TrainConfig(
        seed=seed, epochs=cfg.stage2_epochs if args.epochs is None else args.epochs,
        batch_size=cfg.stage2_batch, lr=cfg.stage2_lr,
        hidden_channels=cfg.refine_hidden, alpha=cfg.alpha,
        loss=Stage2LossConfig(alpha1=cfg.alpha1,
                              alpha2_initial=cfg.alpha2_initial,
                              alpha2_decrement_per_epoch=cfg.alpha2_decrement,
                              acquired_slice_weight=cfg.acquired_slice_weight))
    ckpt, log = training.train_stage2(pairs, tc)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = cfg.model_path("stage2")
    training.save_checkpoint(ckpt, path)
    with open(path + ".loss.log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    print(f"wrote {path} (best val SSIM {ckpt.best_metric:.6f}, "
          f"epoch {ckpt.epoch})")
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _config_from_args(args)
    if not os.path.exists(args.input):
        raise DataError(f"missing input volume {args.input}")
    vol = dio.load_volume(args.input)
    sparse = pipeline.sparse_sample(vol, cfg.gap)
    plan = pipeline.doubling_plan(sparse.depth, cfg.gap)
    registry = _load_stage1_registry(cfg, zero_init=args.zero_init_models)
    refine = None
    if args.refine and not args.zero_init_models:
        ckpt = training.load_checkpoint(_existing(cfg.model_path("stage2")))
        refine = training.stage2_params_from_checkpoint(ckpt)
    recon = pipeline.reconstruct_volume(sparse, plan, registry, refine=refine)
    out_dir = os.path.dirname(args.output)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    dio.save_volume(recon, args.output)
    print(f"wrote {args.output} dims={recon.shape} refined={refine is not None}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    for path in (args.recon, args.truth):
        if not os.path.exists(path):
            raise DataError(f"missing volume {path}")
    recon = dio.load_volume(args.recon)
    truth = _crop_truth(dio.load_volume(args.truth), recon, cfg.gap)
    vid = os.path.splitext(os.path.basename(args.recon))[0]
    report = metrics.evaluate_volume(
        vid, recon.voxels, truth.voxels, cfg.gap, args.refined,
        _acquired_count(recon.depth, cfg.gap), ssim_mode=cfg.ssim_mode,
        per_slice=args.per_slice)
    print(metrics.REPORT_HEADER)
    print(metrics.format_report_row(report))
    if args.report:
        metrics.write_reports(args.report, [report])
    return 0


def _cmd_compare_baseline(args) -> int:
    cfg = _config_from_args(args)
    if not os.path.exists(args.input):
        raise DataError(f"missing input volume {args.input}")
    vol = dio.load_volume(args.input)
    sparse = pipeline.sparse_sample(vol, cfg.gap)
    truth = vol.voxels[:sparse.depth]
    vid = os.path.splitext(os.path.basename(args.input))[0]
    n_acq = _acquired_count(sparse.depth, cfg.gap)

    methods = ["linear", "cubic"] if args.method == "both" else [args.method]
    rows = []
    for method in methods:
        est = pipeline.baseline_interpolate(sparse, method)
        rows.append(metrics.evaluate_volume(
            f"{vid}:{method}", est.voxels, truth, cfg.gap, False, n_acq,
            ssim_mode=cfg.ssim_mode))
    if args.with_model or args.zero_init_models:
        plan = pipeline.doubling_plan(sparse.depth, cfg.gap)
        registry = _load_stage1_registry(cfg, zero_init=args.zero_init_models)
        coarse = pipeline.reconstruct_volume(sparse, plan, registry)
        rows.append(metrics.evaluate_volume(
            f"{vid}:model", coarse.voxels, truth, cfg.gap, False, n_acq,
            ssim_mode=cfg.ssim_mode))
        stage2_path = cfg.model_path("stage2")
        if not args.zero_init_models and os.path.exists(stage2_path):
            refine = training.stage2_params_from_checkpoint(
                training.load_checkpoint(stage2_path))
            refined = pipeline.reconstruct_volume(sparse, plan, registry,
                                                  refine=refine)
            rows.append(metrics.evaluate_volume(
                f"{vid}:model+refine", refined.voxels, truth, cfg.gap, True,
                n_acq, ssim_mode=cfg.ssim_mode))
    print(metrics.REPORT_HEADER)
    for r in rows:
        print(metrics.format_report_row(r))
    if args.report:
        metrics.write_reports(args.report, rows)
    return 0


def _cmd_export_slices(args) -> int:
    if not os.path.exists(args.input):
        raise DataError(f"missing input volume {args.input}")
    vol = dio.load_volume(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    for idx in args.indices:
        if not 0 <= idx < vol.depth:
            raise DataError(
                f"slice index {idx} out of range 0..{vol.depth - 1}")
        path = os.path.join(args.out_dir, f"slice{idx:04d}.pgm")
        dio.export_slice_pgm(vol, idx, path)
        print(f"wrote {path}")
    return 0


def _render_curves(series: list[np.ndarray], height: int = 256,
                   width: int = 512) -> np.ndarray:
    img = np.zeros((height, width), dtype=np.uint8)
    finite = np.concatenate([s for s in series if len(s)])
    lo, hi = float(finite.min()), float(finite.max())
    span = (hi - lo) or 1.0
    shades = (120, 180, 255)
    for s, shade in zip(series, shades):
        if len(s) < 1:
            continue
        xs = (np.linspace(0, width - 1, num=len(s))).astype(int)
        ys = (height - 1 - (s - lo) / span * (height - 1)).astype(int)
        for i in range(len(s) - 1):
            x0, x1 = xs[i], xs[i + 1]
            y0, y1 = ys[i], ys[i + 1]
            steps = max(abs(x1 - x0), abs(y1 - y0), 1)
            for t in range(steps + 1):
                x = x0 + (x1 - x0) * t // steps
                y = y0 + (y1 - y0) * t // steps
                img[y, x] = shade
    return img


def _cmd_plot_log(args) -> int:
    if not os.path.exists(args.log):
        raise DataError(f"missing loss log {args.log}")
    with open(args.log, "r", encoding="utf-8") as fh:
        rows = parse_loss_log(fh.read())
    if not rows:
        raise DataError(f"loss log {args.log} has no data rows")
    l1 = np.array([r[2] for r in rows])
    fil = np.array([r[3] for r in rows])
    total = np.array([r[4] for r in rows])
    img = _render_curves([l1, fil, total])
    with open(args.out, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="C"))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "compare-baseline": _cmd_compare_baseline,
    "export-slices": _cmd_export_slices,
    "plot-log": _cmd_plot_log,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, dio.VolumeFormatError, training.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
