"""Optimisation, schedules, the two training loops and checkpoint I/O.

Everything is deterministic given (seed, data, config): parameter init and
shuffling draw from seeded splitmix64 streams, batches are formed in shuffle
order, and reductions are plain numpy sums, so repeated runs produce
byte-identical loss logs and checkpoints.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import TrainingTriplet
from .difftensor import NumericError, Tensor, add, scale, zero_grads
from .losses import (LOSS_LOG_HEADER, Stage1LossConfig, Stage2LossConfig,
                     format_loss_line, stage1_loss_terms, stage2_loss_terms)
from .metrics import psnr, ssim
from .models import (MKResReconParams, RefineNetParams, apply_refinement,
                     identityrefine_forward, init_params, mkresrecon_forward)
from .pipeline import Volume
from .rng import SplitMix64, derive_seed, fnv1a64


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a named parameter set."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, tensors: Mapping[str, Tensor], lr: float = 1e-4) -> "AdamState":
        state = cls(lr=lr)
        for name, t in tensors.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(tensors: Mapping[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update; a missing gradient counts as zero."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, tensor in tensors.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class PlateauState:
    """Reduce-on-plateau over a maximised validation metric.

    The very first observation seeds ``best`` and already counts as a
    validation without improvement; once the no-improvement streak exceeds
    ``patience`` the rate is halved (floored at ``min_lr``) and the streak
    resets.
    """

    lr: float = 1e-4
    mode: str = "max"
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    best: Optional[float] = None
    bad_count: int = 0

    def __post_init__(self):
        if self.mode != "max":
            raise ValueError("only mode='max' is supported")


def plateau_step(state: PlateauState, val_metric: float) -> PlateauState:
    if state.best is None:
        state.best = float(val_metric)
        state.bad_count = 1
    elif val_metric > state.best:
        state.best = float(val_metric)
        state.bad_count = 0
    else:
        state.bad_count += 1
    if state.bad_count > state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.bad_count = 0
    return state


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MKC1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    """Named parameters plus optimiser and provenance state."""

    kind: str                       # "stage1" | "stage2"
    arch: dict
    epoch: int
    best_metric: float
    seed: int
    rng_state: int
    lr: float
    adam_step_count: int
    beta1: float
    beta2: float
    eps: float
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or of an unsupported version."""


def save_checkpoint(ckpt: ModelCheckpoint, path: str) -> None:
    names = list(ckpt.params)
    entries = []
    chunks = []
    for role, table in (("param", ckpt.params), ("m", ckpt.adam_m),
                        ("v", ckpt.adam_v)):
        for name in names:
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            entries.append({"name": name, "role": role,
                            "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = {
        "kind": ckpt.kind,
        "arch": ckpt.arch,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "lr": ckpt.lr,
        "adam_step_count": ckpt.adam_step_count,
        "beta1": ckpt.beta1,
        "beta2": ckpt.beta2,
        "eps": ckpt.eps,
        "tensors": entries,
        "payload_crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}")
    hlen = int.from_bytes(raw[8:12], "little")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[12 + hlen:]
    expected = sum(
        8 * int(np.prod(e["shape"])) for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} != {expected} bytes)")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tables = {"param": {}, "m": {}, "v": {}}
    offset = 0
    for e in header["tensors"]:
        n = 8 * int(np.prod(e["shape"]))
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8,
                            offset=offset).reshape(e["shape"]).copy()
        tables[e["role"]][e["name"]] = arr
        offset += n
    return ModelCheckpoint(
        kind=header["kind"], arch=header["arch"], epoch=header["epoch"],
        best_metric=header["best_metric"], seed=header["seed"],
        rng_state=header["rng_state"], lr=header["lr"],
        adam_step_count=header["adam_step_count"], beta1=header["beta1"],
        beta2=header["beta2"], eps=header["eps"], params=tables["param"],
        adam_m=tables["m"], adam_v=tables["v"], version=version)


def stage1_params_from_checkpoint(ckpt: ModelCheckpoint) -> MKResReconParams:
    if ckpt.kind != "stage1":
        raise CheckpointError(f"expected a stage1 checkpoint, got {ckpt.kind!r}")
    tensors = {n: Tensor(a.copy(), requires_grad=True)
               for n, a in ckpt.params.items()}
    return MKResReconParams(levels=int(ckpt.arch["levels"]),
                            base_channels=int(ckpt.arch["base_channels"]),
                            tensors=tensors)


def stage2_params_from_checkpoint(ckpt: ModelCheckpoint) -> RefineNetParams:
    if ckpt.kind != "stage2":
        raise CheckpointError(f"expected a stage2 checkpoint, got {ckpt.kind!r}")
    tensors = {n: Tensor(a.copy(), requires_grad=True)
               for n, a in ckpt.params.items()}
    return RefineNetParams(hidden_channels=int(ckpt.arch["hidden_channels"]),
                           alpha=float(ckpt.arch["alpha"]), tensors=tensors)


def _snapshot(kind: str, arch: dict, tensors: Mapping[str, Tensor],
              adam: AdamState, epoch: int, metric: float, seed: int,
              rng_state: int) -> ModelCheckpoint:
    return ModelCheckpoint(
        kind=kind, arch=arch, epoch=epoch, best_metric=float(metric),
        seed=seed, rng_state=rng_state, lr=adam.lr,
        adam_step_count=adam.step_count, beta1=adam.beta1, beta2=adam.beta2,
        eps=adam.eps,
        params={n: t.data.copy() for n, t in tensors.items()},
        adam_m={n: a.copy() for n, a in adam.m.items()},
        adam_v={n: a.copy() for n, a in adam.v.items()})


# ---------------------------------------------------------------------------
# validation splits


def split_by_volume_hash(ids: Sequence[str], denominator: int = 10) -> tuple[set[str], set[str]]:
    """Deterministic 90/10 split by id hash; validation never ends up empty."""
    unique = sorted(set(ids))
    val = {i for i in unique if fnv1a64(i) % denominator == 0}
    if not val:
        val = {min(unique, key=lambda i: (fnv1a64(i), i))}
    train = set(unique) - val
    if not train:
        train = set(unique)  # single-volume corpus: reused for both
    return train, val


# ---------------------------------------------------------------------------
# stage 1: middle-slice synthesis


@dataclass
class Stage1TrainConfig:
    seed: int
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    levels: int = 3
    base_channels: int = 32
    loss: Stage1LossConfig = field(default_factory=Stage1LossConfig)


def _triplet_arrays(triplets: Sequence[TrainingTriplet],
                    volumes: Mapping[str, Volume]):
    left = np.stack([volumes[t.volume_id].voxels[t.left] for t in triplets])
    right = np.stack([volumes[t.volume_id].voxels[t.right] for t in triplets])
    target = np.stack([volumes[t.volume_id].voxels[t.target] for t in triplets])
    return left, right, target


def validate_stage1(params: MKResReconParams,
                    triplets: Sequence[TrainingTriplet],
                    volumes: Mapping[str, Volume]) -> float:
    """Mean per-triplet PSNR of clamped predictions against targets."""
    left, right, target = _triplet_arrays(triplets, volumes)
    pred = mkresrecon_forward(left, right, params, mode="infer").data
    return float(np.mean([psnr(pred[i], target[i]) for i in range(len(triplets))]))


def train_stage1(triplets: Sequence[TrainingTriplet],
                 volumes: Mapping[str, Volume],
                 cfg: Stage1TrainConfig) -> tuple[ModelCheckpoint, list[str]]:
    """Train the synthesis network; keep the best-validation-PSNR checkpoint."""
    if not triplets:
        raise ValueError("train_stage1: empty dataset")
    train_ids, val_ids = split_by_volume_hash([t.volume_id for t in triplets])
    train_set = [t for t in triplets if t.volume_id in train_ids]
    val_set = [t for t in triplets if t.volume_id in val_ids]

    params = init_params("stage1", cfg.seed, levels=cfg.levels,
                         base_channels=cfg.base_channels)
    arch = {"levels": cfg.levels, "base_channels": cfg.base_channels}
    adam = AdamState.create(params.tensors, lr=cfg.lr)
    plateau = PlateauState(lr=cfg.lr)
    shuffle_rng = SplitMix64(derive_seed(cfg.seed, "stage1.shuffle"))

    log = [LOSS_LOG_HEADER]
    best: Optional[ModelCheckpoint] = None
    step = 0
    for epoch in range(cfg.epochs):
        order = list(train_set)
        shuffle_rng.shuffle(order)
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i:i + cfg.batch_size]
            left, right, target = _triplet_arrays(batch, volumes)
            try:
                pred = mkresrecon_forward(left, right, params, mode="train")
                l1, fil, total = stage1_loss_terms(pred, Tensor(target), cfg.loss)
                zero_grads(params.tensors.values())
                total.backward()
                adam_step(params.tensors, adam)
            except NumericError as exc:
                raise NumericError(f"stage1 step {step}: {exc}") from exc
            log.append(format_loss_line(step, epoch, l1.item(), fil.item(),
                                        total.item()))
            step += 1
        val_psnr = validate_stage1(params, val_set, volumes)
        plateau_step(plateau, val_psnr)
        adam.lr = plateau.lr
        if best is None or val_psnr > best.best_metric:
            best = _snapshot("stage1", arch, params.tensors, adam, epoch,
                             val_psnr, cfg.seed, shuffle_rng._state)
    return best, log


# ---------------------------------------------------------------------------
# stage 2: volumetric refinement


@dataclass
class Stage2TrainConfig:
    seed: int
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    hidden_channels: int = 8
    alpha: float = 0.1
    loss: Stage2LossConfig = field(default_factory=Stage2LossConfig)


def validate_stage2(params: RefineNetParams,
                    pairs: Sequence[tuple[str, Volume, Volume]],
                    ssim_mode: str = "global") -> float:
    """Mean SSIM of refined volumes against ground truth."""
    scores = []
    for _, coarse, truth in pairs:
        r = identityrefine_forward(coarse.voxels, params)
        refined = apply_refinement(coarse.voxels, r.data, params.alpha,
                                   clamp=True).data
        scores.append(ssim(refined, truth.voxels, ssim_mode))
    return float(np.mean(scores))


def train_stage2(pairs: Sequence[tuple[str, Volume, Volume]],
                 cfg: Stage2TrainConfig) -> tuple[ModelCheckpoint, list[str]]:
    """Train the refiner on (coarse, truth) volume pairs from a frozen
    stage-1 pipeline; keep the best-validation-SSIM checkpoint."""
    if not pairs:
        raise ValueError("train_stage2: empty dataset")
    for vid, coarse, truth in pairs:
        if coarse.shape != truth.shape:
            raise ValueError(f"pair {vid!r}: shape mismatch "
                             f"{coarse.shape} vs {truth.shape}")
    train_ids, val_ids = split_by_volume_hash([vid for vid, _, _ in pairs])
    train_set = [p for p in pairs if p[0] in train_ids]
    val_set = [p for p in pairs if p[0] in val_ids]

    params = init_params("stage2", cfg.seed, hidden_channels=cfg.hidden_channels,
                         alpha=cfg.alpha)
    arch = {"hidden_channels": cfg.hidden_channels, "alpha": cfg.alpha}
    adam = AdamState.create(params.tensors, lr=cfg.lr)
    plateau = PlateauState(lr=cfg.lr)
    shuffle_rng = SplitMix64(derive_seed(cfg.seed, "stage2.shuffle"))

    log = [LOSS_LOG_HEADER]
    best: Optional[ModelCheckpoint] = None
    step = 0
    for epoch in range(cfg.epochs):
        order = list(train_set)
        shuffle_rng.shuffle(order)
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i:i + cfg.batch_size]
            try:
                l1s, fils, totals = [], [], []
                for _, coarse, truth in batch:
                    r = identityrefine_forward(coarse.voxels, params)
                    pred = apply_refinement(coarse.voxels, r, params.alpha)
                    l1, fil, total = stage2_loss_terms(
                        pred, Tensor(truth.voxels), epoch,
                        coarse.acquired_mask, cfg.loss)
                    l1s.append(l1)
                    fils.append(fil)
                    totals.append(total)
                inv = 1.0 / len(batch)
                batch_total = scale(_sum(totals), inv)
                zero_grads(params.tensors.values())
                batch_total.backward()
                adam_step(params.tensors, adam)
            except NumericError as exc:
                raise NumericError(f"stage2 step {step}: {exc}") from exc
            log.append(format_loss_line(
                step, epoch,
                float(np.mean([x.item() for x in l1s])),
                float(np.mean([x.item() for x in fils])),
                batch_total.item()))
            step += 1
        val_ssim = validate_stage2(params, val_set)
        plateau_step(plateau, val_ssim)
        adam.lr = plateau.lr
        if best is None or val_ssim > best.best_metric:
            best = _snapshot("stage2", arch, params.tensors, adam, epoch,
                             val_ssim, cfg.seed, shuffle_rng._state)
    return best, log


def _sum(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total
