"""Sparse sampling, the recursive doubling plan, reconstruction, baselines.

Reconstruction runs the doubling plan level by level: each level synthesises
the midpoints of the previous level's slice pairs, halving the gap, until
the volume is dense.  Acquired slices are never overwritten during this
stage.  The optional 3D refinement is applied to the full coarse volume
afterwards (chunked along depth with an overlap blend above a voxel budget).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .models import (MKResReconParams, RefineNetParams, apply_refinement,
                     identityrefine_forward, mkresrecon_forward)

GAPS = (2, 4, 8)


@dataclass
class Volume:
    """Depth-ordered voxel stack with acquisition and normalisation metadata."""

    voxels: np.ndarray                      # (D, H, W) float64 in [0, 1]
    acquired_mask: np.ndarray = None        # (D,) bool; default all acquired
    intensity_min: float = 0.0              # original range, for inversion
    intensity_max: float = 1.0
    spacing: Optional[tuple[float, float, float]] = None   # mm, (d, h, w)
    constant_flagged: bool = False          # set when a constant input was zeroed

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be (D, H, W), got {self.voxels.shape}")
        if self.acquired_mask is None:
            self.acquired_mask = np.ones(self.voxels.shape[0], dtype=bool)
        else:
            self.acquired_mask = np.asarray(self.acquired_mask, dtype=bool)
        if self.acquired_mask.shape != (self.voxels.shape[0],):
            raise ValueError("acquired_mask length must equal depth")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def acquired_indices(self) -> np.ndarray:
        return np.flatnonzero(self.acquired_mask)

    def validate(self) -> None:
        """Check pipeline invariants: range, mask endpoints, finiteness."""
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        if self.voxels.min() < 0.0 or self.voxels.max() > 1.0:
            raise ValueError("volume values outside [0, 1]")
        acq = self.acquired_indices()
        if len(acq) < 2:
            raise ValueError("volume needs at least 2 acquired slices")
        if acq[0] != 0 or acq[-1] != self.depth - 1:
            raise ValueError("first and last slices must be acquired")


@dataclass(frozen=True)
class PlanLevel:
    gap: int                                   # source spacing at this level
    triples: tuple[tuple[int, int, int], ...]  # (target, left, right)


@dataclass(frozen=True)
class DoublingPlan:
    gap: int
    depth: int
    levels: tuple[PlanLevel, ...]

    def target_indices(self) -> set[int]:
        return {t for level in self.levels for t, _, _ in level.triples}


def sparse_sample(volume: Volume, gap: int) -> Volume:
    """Keep every gap-th slice; crop depth so the last kept slice is the last
    slice of the cropped volume; zero the dropped slices."""
    if gap not in GAPS:
        raise ValueError(f"gap must be one of {GAPS}, got {gap}")
    if volume.depth < gap + 1:
        raise ValueError(
            f"volume depth {volume.depth} too shallow for gap {gap}")
    new_depth = gap * ((volume.depth - 1) // gap) + 1
    vox = volume.voxels[:new_depth].copy()
    mask = np.zeros(new_depth, dtype=bool)
    mask[::gap] = True
    vox[~mask] = 0.0
    return replace(volume, voxels=vox, acquired_mask=mask)


def doubling_plan(depth: int, gap: int) -> DoublingPlan:
    """Midpoint-synthesis schedule from spacing ``gap`` down to spacing 2."""
    if gap not in GAPS:
        raise ValueError(f"gap must be one of {GAPS}, got {gap}")
    if (depth - 1) % gap != 0:
        raise ValueError(
            f"depth {depth} misaligned: (depth - 1) must be divisible by {gap}")
    levels = []
    spacing = gap
    while spacing >= 2:
        half = spacing // 2
        triples = tuple(
            (left + half, left, left + spacing)
            for left in range(0, depth - 1, spacing))
        levels.append(PlanLevel(gap=spacing, triples=triples))
        spacing = half
    return DoublingPlan(gap=gap, depth=depth, levels=tuple(levels))


def reconstruct_volume(sparse: Volume, plan: DoublingPlan,
                       models: Mapping[int, MKResReconParams],
                       refine: Optional[RefineNetParams] = None,
                       alpha: Optional[float] = None,
                       voxel_budget: int = 1 << 22,
                       chunk_depth: int = 32,
                       chunk_overlap: int = 4) -> Volume:
    """Run the doubling plan, then optionally the volumetric refinement."""
    if plan.depth != sparse.depth:
        raise ValueError(
            f"plan depth {plan.depth} does not match volume depth {sparse.depth}")
    expected = np.zeros(sparse.depth, dtype=bool)
    expected[::plan.gap] = True
    if not np.array_equal(sparse.acquired_mask, expected):
        raise ValueError("volume acquisition mask does not match the plan gap")

    vox = sparse.voxels.copy()
    for level in plan.levels:
        params = models.get(level.gap)
        if params is None:
            raise ValueError(f"missing model for gap {level.gap}")
        targets = [t for t, _, _ in level.triples]
        left = np.stack([vox[l] for _, l, _ in level.triples])
        right = np.stack([vox[r] for _, _, r in level.triples])
        synth = mkresrecon_forward(left, right, params, mode="infer").data
        for i, t in enumerate(targets):
            vox[t] = synth[i]

    coarse = replace(sparse, voxels=vox,
                     acquired_mask=np.ones(sparse.depth, dtype=bool))
    if refine is None:
        return replace(coarse, acquired_mask=sparse.acquired_mask.copy())
    a = refine.alpha if alpha is None else float(alpha)
    refined = _refine_full(coarse.voxels, refine, a, voxel_budget,
                           chunk_depth, chunk_overlap)
    return replace(coarse, voxels=refined,
                   acquired_mask=sparse.acquired_mask.copy())


def _refine_full(vox: np.ndarray, params: RefineNetParams, alpha: float,
                 voxel_budget: int, chunk_depth: int, chunk_overlap: int) -> np.ndarray:
    if vox.size <= voxel_budget or vox.shape[0] <= chunk_depth:
        r = identityrefine_forward(vox, params)
        return apply_refinement(vox, r.data, alpha, clamp=True).data
    if chunk_overlap >= chunk_depth:
        raise ValueError("chunk overlap must be below chunk depth")
    step = chunk_depth - chunk_overlap
    out = np.empty_like(vox)
    start = 0
    first = True
    while True:
        end = min(start + chunk_depth, vox.shape[0])
        chunk = vox[start:end]
        r = identityrefine_forward(chunk, params)
        p = apply_refinement(chunk, r.data, alpha, clamp=True).data
        if first:
            out[start:end] = p
            first = False
        else:
            ov = min(chunk_overlap, end - start)
            # linear cross-fade; prev + t*(new - prev) keeps agreeing chunks bit-exact
            for j in range(ov):
                t = (j + 1) / (ov + 1)
                out[start + j] = out[start + j] + t * (p[j] - out[start + j])
            out[start + ov:end] = p[ov:]
        if end == vox.shape[0]:
            break
        start += step
    return out


def baseline_interpolate(sparse: Volume, method: str = "linear") -> Volume:
    """Classical per-voxel interpolation along depth between acquired slices."""
    acq = sparse.acquired_indices()
    if method == "linear":
        if len(acq) < 2:
            raise ValueError("linear interpolation needs >= 2 acquired slices")
    elif method == "cubic":
        if len(acq) < 4:
            raise ValueError("cubic interpolation needs >= 4 acquired slices")
    else:
        raise ValueError(f"unknown interpolation method {method!r}")

    vox = sparse.voxels.copy()
    for k in range(len(acq) - 1):
        a, b = int(acq[k]), int(acq[k + 1])
        span = b - a
        p1, p2 = sparse.voxels[a], sparse.voxels[b]
        if method == "cubic":
            p0 = sparse.voxels[int(acq[k - 1])] if k > 0 else p1
            p3 = sparse.voxels[int(acq[k + 2])] if k + 2 < len(acq) else p2
            m1, m2 = (p2 - p0) / 2.0, (p3 - p1) / 2.0
        for d in range(a + 1, b):
            t = (d - a) / span
            if method == "linear":
                vox[d] = (1.0 - t) * p1 + t * p2
            else:
                h00 = 2 * t**3 - 3 * t**2 + 1
                h10 = t**3 - 2 * t**2 + t
                h01 = -2 * t**3 + 3 * t**2
                h11 = t**3 - t**2
                vox[d] = h00 * p1 + h10 * m1 + h01 * p2 + h11 * m2
    if method == "cubic":
        np.clip(vox, 0.0, 1.0, out=vox)
    return replace(sparse, voxels=vox)
