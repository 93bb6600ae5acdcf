"""Fixed 2D and 3D convolution kernel banks for the filtered losses.

The matrices and per-kernel weights are fixed constants of the method.  Raw
kernels are kept verbatim; the stored working set is normalised so that each
kernel has unit absolute sum and the weights sum to one, which keeps the
filtered loss terms on comparable scales across kernels and banks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

EPSILON = 1e-6  # degenerate-kernel guard: a bank kernel must have |sum| above this

_SOBEL_ROWS = [[1, 2, 1], [0, 0, 0], [-1, -2, -1]]
_SOBEL_COLS = [[1, 0, -1], [2, 0, -2], [1, 0, -1]]
_DIAG1 = [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]]
_DIAG2 = [[2, 1, 0], [1, 0, -1], [0, -1, -2]]
_LAPLACIAN_2D = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]
_CHECKER = [[1, -1, 1], [-1, 1, -1], [1, -1, 1]]
_CHECKER_INV = [[-1, 1, -1], [1, -1, 1], [-1, 1, -1]]

# 2D bank: (name, matrix, raw weight), in fixed order.
_BANK_2D = [
    ("sobel_x", _SOBEL_ROWS, 0.1),
    ("sobel_y", _SOBEL_COLS, 0.1),
    ("diag1", _DIAG1, 0.5),
    ("diag2", _DIAG2, 0.5),
    ("laplacian", _LAPLACIAN_2D, 2.0),
    ("checkerboard", _CHECKER, 0.05),
]

_SOBEL3_X = [[[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]] * 3
_SOBEL3_Y = [_SOBEL_ROWS] * 3
_SOBEL3_Z = [
    [[1, 1, 1], [1, 1, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
    [[-1, -1, -1], [-1, -1, -1], [-1, -1, -1]],
]
_LAPLACIAN_3D = [
    [[0, 1, 0], [1, -6, 1], [0, 1, 0]],
    [[1, -6, 1], [-6, 24, -6], [1, -6, 1]],
    [[0, 1, 0], [1, -6, 1], [0, 1, 0]],
]
_GAUSSIAN_3D = [
    [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
    [[2, 4, 2], [4, 8, 4], [2, 4, 2]],
    [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
]
_HIGHPASS_3D = [[[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]]] * 3
_LOG_3D = [
    [[0, 0, -1], [0, -1, -2], [-1, -2, -1]],
    [[0, -1, -2], [-1, 16, -2], [-2, -1, 0]],
    [[-1, -2, -1], [-2, -1, 0], [0, 0, 0]],
]
_CROSS_DIAG_3D = [[[1, 0, -1], [0, 0, 0], [-1, 0, 1]]] * 3
_CHECKER_3D = [_CHECKER, _CHECKER_INV, _CHECKER]

# 3D bank: depth slices stacked front-to-back along axis 0.
_BANK_3D = [
    ("sobel_x", _SOBEL3_X, 1.0),
    ("sobel_y", _SOBEL3_Y, 1.0),
    ("sobel_z", _SOBEL3_Z, 1.0),
    ("laplacian", _LAPLACIAN_3D, 2.0),
    ("diag1", [_DIAG1] * 3, 0.8),
    ("diag2", [_DIAG2] * 3, 0.8),
    ("gaussian", _GAUSSIAN_3D, 0.5),
    ("highpass", _HIGHPASS_3D, 1.2),
    ("log", _LOG_3D, 1.5),
    ("cross_diag", _CROSS_DIAG_3D, 0.8),
    ("checkerboard", _CHECKER_3D, 0.5),
]


@dataclass(frozen=True)
class KernelBank:
    """Ordered fixed kernels with raw and normalised forms."""

    dims: int
    names: tuple[str, ...]
    raw_kernels: tuple[np.ndarray, ...]
    kernels: tuple[np.ndarray, ...]
    raw_weights: tuple[float, ...]
    weights: tuple[float, ...]
    epsilon: float = EPSILON

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(zip(self.names, self.kernels, self.weights))


def normalize_bank(bank: KernelBank) -> KernelBank:
    """Rescale raw kernels to unit absolute sum and weights to unit total.

    A kernel whose absolute sum does not exceed ``bank.epsilon`` is rejected:
    it would be all zero (or numerically so) and carry no signal.
    """
    kernels = []
    for name, raw in zip(bank.names, bank.raw_kernels):
        s = float(np.abs(raw).sum())
        if s <= bank.epsilon:
            raise ValueError(f"kernel {name!r} is all zero, cannot normalize")
        k = raw / s
        k.setflags(write=False)
        kernels.append(k)
    total = float(sum(bank.raw_weights))
    if total <= 0.0:
        raise ValueError("kernel weights must have positive sum")
    weights = tuple(w / total for w in bank.raw_weights)
    return replace(bank, kernels=tuple(kernels), weights=weights)


def load_bank(dims: int) -> KernelBank:
    """Build the fixed kernel bank; dims selects the 2D or 3D variant."""
    if dims == 2:
        spec = _BANK_2D
    elif dims == 3:
        spec = _BANK_3D
    else:
        raise ValueError(f"load_bank: dims must be 2 or 3, got {dims}")
    names, raws, weights = [], [], []
    for name, matrix, weight in spec:
        names.append(name)
        arr = np.asarray(matrix, dtype=np.float64)
        arr.setflags(write=False)
        raws.append(arr)
        weights.append(float(weight))
    bank = KernelBank(
        dims=dims,
        names=tuple(names),
        raw_kernels=tuple(raws),
        kernels=tuple(raws),  # replaced by normalize_bank
        raw_weights=tuple(weights),
        weights=tuple(weights),
    )
    return normalize_bank(bank)


def describe_bank(bank: KernelBank) -> str:
    """Plain-text dump of the bank (name, weights, raw matrix rows)."""
    lines = [f"kernel bank dims={bank.dims} count={len(bank)}"]
    for name, raw, rw, w in zip(bank.names, bank.raw_kernels,
                                bank.raw_weights, bank.weights):
        lines.append(f"{name} raw_weight={rw:g} weight={w:.12g}")
        mats = raw[None] if bank.dims == 2 else raw
        for d, plane in enumerate(mats):
            prefix = "  " if bank.dims == 2 else f"  [{d}] "
            for row in plane:
                lines.append(prefix + " ".join(f"{v:g}" for v in row))
                prefix = " " * len(prefix)
    return "\n".join(lines) + "\n"
