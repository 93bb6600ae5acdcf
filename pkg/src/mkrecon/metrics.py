"""Quantitative evaluation: PSNR, SSIM and the scan-time reduction factor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
PSNR_CAP_DB = 100.0
_PSNR_MSE_FLOOR = 1e-10
SSIM_WINDOW = 7


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def psnr(pred, target, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 100 for near-zero MSE."""
    if peak <= 0:
        raise ValueError("peak must be > 0")
    err = mse(pred, target)
    if err < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / err))


def _ssim_formula(mu_p, mu_t, var_p, var_t, cov):
    num = (2.0 * mu_p * mu_t + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_p**2 + mu_t**2 + SSIM_C1) * (var_p + var_t + SSIM_C2)
    return num / den


def _box_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sums over every complete w-wide window along each axis of ``a``."""
    s = a
    for axis in range(a.ndim):
        c = np.cumsum(s, axis=axis)
        pad_shape = list(c.shape)
        pad_shape[axis] = 1
        c = np.concatenate([np.zeros(pad_shape), c], axis=axis)
        hi = [slice(None)] * a.ndim
        lo = [slice(None)] * a.ndim
        hi[axis] = slice(w, None)
        lo[axis] = slice(0, c.shape[axis] - w)
        s = c[tuple(hi)] - c[tuple(lo)]
    return s


def ssim(pred, target, mode: str = "global") -> float:
    """Structural similarity from mean/variance/covariance statistics.

    "global" evaluates the formula once with statistics over all cells;
    "windowed" averages it over every complete 7-wide window (7x7 for 2D
    input, 7x7x7 for 3D).  Population variances throughout.
    """
    p, t = _pair(pred, target)
    if mode == "global":
        mu_p, mu_t = p.mean(), t.mean()
        var_p = np.mean(p * p) - mu_p * mu_p
        var_t = np.mean(t * t) - mu_t * mu_t
        cov = np.mean(p * t) - mu_p * mu_t
        return float(_ssim_formula(mu_p, mu_t, var_p, var_t, cov))
    if mode == "windowed":
        w = SSIM_WINDOW
        if any(s < w for s in p.shape):
            raise ValueError(f"windowed ssim needs every extent >= {w}")
        n = float(w**p.ndim)
        mu_p = _box_sums(p, w) / n
        mu_t = _box_sums(t, w) / n
        var_p = _box_sums(p * p, w) / n - mu_p * mu_p
        var_t = _box_sums(t * t, w) / n - mu_t * mu_t
        cov = _box_sums(p * t, w) / n - mu_p * mu_t
        return float(np.mean(_ssim_formula(mu_p, mu_t, var_p, var_t, cov)))
    raise ValueError(f"unknown ssim mode {mode!r}")


def scan_time_factor(full_slices: int, acquired_slices: int) -> float:
    """Relative scan-time reduction N/n with acquisition settings held fixed."""
    if acquired_slices <= 0:
        raise ValueError("acquired_slices must be > 0")
    if acquired_slices > full_slices:
        raise ValueError("acquired_slices cannot exceed full_slices")
    return full_slices / acquired_slices


@dataclass
class ReconReport:
    """Per-volume evaluation record."""

    volume_id: str
    slice_gap: int
    refined: bool
    psnr_db: float
    ssim: float
    scan_time_factor: float
    per_slice: Optional[list[tuple[int, float, float]]] = None


REPORT_HEADER = "volume,slice_gap,refined,psnr_db,ssim,scan_time_factor"
SLICE_REPORT_HEADER = "volume,slice,psnr_db,ssim"


def format_report_row(r: ReconReport) -> str:
    return (f"{r.volume_id},{r.slice_gap},{int(r.refined)},"
            f"{r.psnr_db:.6f},{r.ssim:.6f},{r.scan_time_factor:.6f}")


def write_reports(path, reports: Iterable[ReconReport]) -> None:
    reports = list(reports)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in reports:
            fh.write(format_report_row(r) + "\n")
    slices = [(r.volume_id, r.per_slice) for r in reports if r.per_slice]
    if slices:
        with open(str(path) + ".slices.csv", "w", encoding="utf-8") as fh:
            fh.write(SLICE_REPORT_HEADER + "\n")
            for vid, rows in slices:
                for idx, p, s in rows:
                    fh.write(f"{vid},{idx},{p:.6f},{s:.6f}\n")


def evaluate_volume(volume_id: str, recon: np.ndarray, truth: np.ndarray,
                    slice_gap: int, refined: bool, acquired_count: int,
                    ssim_mode: str = "global",
                    per_slice: bool = False) -> ReconReport:
    """Full-volume PSNR/SSIM (all voxels) plus optional per-slice rows."""
    rows = None
    if per_slice:
        rows = [(d, psnr(recon[d], truth[d]), ssim(recon[d], truth[d], ssim_mode))
                for d in range(recon.shape[0])]
    return ReconReport(
        volume_id=volume_id,
        slice_gap=slice_gap,
        refined=refined,
        psnr_db=psnr(recon, truth),
        ssim=ssim(recon, truth, ssim_mode),
        scan_time_factor=scan_time_factor(recon.shape[0], acquired_count),
        per_slice=rows,
    )
