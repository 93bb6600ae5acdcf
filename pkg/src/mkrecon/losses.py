"""Loss family: plain L1, multi-kernel filtered L1, stage composites.

Filtered terms compare kernel responses of prediction and target on the
valid interior only (no padded border), so no gradient is fabricated from
out-of-range reads.  The stage-2 composite applies a depth-sensitive weight
map that emphasises the physically acquired slices; the map is rescaled to
mean 1 so weighting never changes the overall loss magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .difftensor import Tensor, add, as_tensor, conv, reduce_mean_abs, scale
from .kernels import KernelBank, load_bank


@dataclass
class Stage1LossConfig:
    lambda1: float = 0.1
    lambda2: float = 1.0
    bank: KernelBank = field(default_factory=lambda: load_bank(2))

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Stage2LossConfig:
    alpha1: float = 0.25
    alpha2_initial: float = 1.0
    alpha2_decrement_per_epoch: float = 0.016
    acquired_slice_weight: float = 2.0
    bank: KernelBank = field(default_factory=lambda: load_bank(3))

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2_initial < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.acquired_slice_weight < 1.0:
            raise ValueError("acquired_slice_weight must be >= 1")

    def alpha2(self, epoch: int) -> float:
        """Per-epoch filtered-term weight: starts at the initial value and
        drops by the decrement each epoch, clamped at zero."""
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return max(0.0, self.alpha2_initial
                   - epoch * self.alpha2_decrement_per_epoch)


def l1_loss(pred, target, weight_map=None) -> Tensor:
    """Mean (weighted) absolute difference."""
    return reduce_mean_abs(pred, target, weight_map)


def _crop_valid(arr: np.ndarray, kshape: tuple[int, ...]) -> np.ndarray:
    nd = len(kshape)
    sl = (slice(None),) * (arr.ndim - nd) + tuple(
        slice(k // 2, s - (k // 2)) for k, s in zip(kshape, arr.shape[-nd:]))
    return arr[sl]


def filtered_l1_loss(pred, target, bank: KernelBank, weight_map=None) -> Tensor:
    """Weighted sum over the bank of mean |K*pred - K*target| on the valid
    interior.  The weight map, when given, is cropped to the same interior."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"filtered_l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim < bank.dims:
        raise ValueError("filtered_l1_loss: input rank below bank dims")
    if any(s < 3 for s in pred.shape[-bank.dims:]):
        raise ValueError("filtered_l1_loss: input smaller than kernel")
    wm = None if weight_map is None else as_tensor(weight_map).data

    total: Tensor | None = None
    for _, kernel, weight in bank:
        cp = conv(pred, kernel, padding="valid")
        ct = conv(target, kernel, padding="valid")
        cw = None if wm is None else _crop_valid(wm, kernel.shape)
        term = scale(reduce_mean_abs(cp, ct, cw), weight)
        total = term if total is None else add(total, term)
    return total


def stage1_loss(pred, target, cfg: Stage1LossConfig) -> Tensor:
    l1, fil, total = stage1_loss_terms(pred, target, cfg)
    return total


def stage1_loss_terms(pred, target, cfg: Stage1LossConfig):
    """(l1, filtered, lambda1*l1 + lambda2*filtered) for 2D slices."""
    l1 = l1_loss(pred, target)
    fil = filtered_l1_loss(pred, target, cfg.bank)
    total = add(scale(l1, cfg.lambda1), scale(fil, cfg.lambda2))
    return l1, fil, total


def depth_weight_map(mask, shape: tuple[int, ...], w_acq: float) -> np.ndarray:
    """Per-voxel weights: w_acq on acquired slices, 1 elsewhere, rescaled to
    mean exactly 1 over the volume.  Depth is the third-from-last axis."""
    mask = np.asarray(mask, dtype=bool)
    if len(shape) < 3:
        raise ValueError("depth_weight_map: need a (..., D, H, W) shape")
    depth = shape[-3]
    if mask.shape != (depth,):
        raise ValueError(
            f"depth_weight_map: mask length {mask.shape} != depth {depth}")
    if w_acq < 1.0:
        raise ValueError("depth_weight_map: w_acq must be >= 1")
    per_slice = np.where(mask, float(w_acq), 1.0)
    per_slice = per_slice / per_slice.mean()
    wm = np.broadcast_to(
        per_slice.reshape((1,) * (len(shape) - 3) + (depth, 1, 1)), shape)
    return np.ascontiguousarray(wm)


def stage2_loss(pred, target, epoch: int, mask, cfg: Stage2LossConfig) -> Tensor:
    l1, fil, total = stage2_loss_terms(pred, target, epoch, mask, cfg)
    return total


def stage2_loss_terms(pred, target, epoch: int, mask, cfg: Stage2LossConfig):
    """(l1, filtered, alpha1*l1 + alpha2(epoch)*filtered) for volumes.

    Both terms use the depth-sensitive weight map built from the acquisition
    mask, so acquired slices dominate the refinement objective.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"stage2_loss: shape mismatch {pred.shape} vs {target.shape}")
    wm = depth_weight_map(mask, pred.shape, cfg.acquired_slice_weight)
    l1 = l1_loss(pred, target, wm)
    fil = filtered_l1_loss(pred, target, cfg.bank, wm)
    total = add(scale(l1, cfg.alpha1), scale(fil, cfg.alpha2(epoch)))
    return l1, fil, total


# --- loss-curve log format shared with the CLI plot command ----------------

LOSS_LOG_HEADER = "step,epoch,l1,filtered,total"


def format_loss_line(step: int, epoch: int, l1: float, filtered: float,
                     total: float) -> str:
    return f"{step},{epoch},{l1:.12g},{filtered:.12g},{total:.12g}"


def parse_loss_log(text: str) -> list[tuple[int, int, float, float, float]]:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line == LOSS_LOG_HEADER:
            continue
        step, epoch, l1, fil, total = line.split(",")
        rows.append((int(step), int(epoch), float(l1), float(fil), float(total)))
    return rows
