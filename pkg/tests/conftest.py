"""Shared test oracles: nested-loop convolution and finite differences.

These deliberately reimplement the operations with plain Python loops so the
library paths are checked against an independent route.
"""

from __future__ import annotations

import numpy as np
import pytest


def loop_conv2d(image: np.ndarray, kernel: np.ndarray,
                padding: str = "valid") -> np.ndarray:
    """Direct nested-loop cross-correlation with a centred 2D kernel."""
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    h, w = image.shape
    if padding == "valid":
        out = np.zeros((h - kh + 1, w - kw + 1))
        oy, ox = ch, cw
    else:
        out = np.zeros((h, w))
        oy, ox = 0, 0
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    y = i + oy + (u - ch)
                    x = j + ox + (v - cw)
                    if 0 <= y < h and 0 <= x < w:
                        acc += kernel[u, v] * image[y, x]
            out[i, j] = acc
    return out


def loop_conv3d(volume: np.ndarray, kernel: np.ndarray,
                padding: str = "valid") -> np.ndarray:
    """Direct nested-loop cross-correlation with a centred 3D kernel."""
    kd, kh, kw = kernel.shape
    cd, ch, cw = kd // 2, kh // 2, kw // 2
    d, h, w = volume.shape
    if padding == "valid":
        out = np.zeros((d - kd + 1, h - kh + 1, w - kw + 1))
        od, oy, ox = cd, ch, cw
    else:
        out = np.zeros((d, h, w))
        od, oy, ox = 0, 0, 0
    for a in range(out.shape[0]):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                acc = 0.0
                for s in range(kd):
                    for u in range(kh):
                        for v in range(kw):
                            z = a + od + (s - cd)
                            y = i + oy + (u - ch)
                            x = j + ox + (v - cw)
                            if 0 <= z < d and 0 <= y < h and 0 <= x < w:
                                acc += kernel[s, u, v] * volume[z, y, x]
                out[a, i, j] = acc
    return out


FD_EPS = 1e-5
FD_REL_TOL = 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_gradients(make_loss, arrays: dict[str, np.ndarray],
                    eps: float = FD_EPS, tol: float = FD_REL_TOL) -> None:
    """Compare analytic gradients with central finite differences.

    ``make_loss`` maps {name: ndarray} to a scalar difftensor Tensor built on
    Tensors with requires_grad=True for every entry of ``arrays``; gradients
    are checked elementwise for each named input.
    """
    from mkrecon.difftensor import Tensor

    tensors = {k: Tensor(v.copy(), requires_grad=True)
               for k, v in arrays.items()}
    loss = make_loss(tensors)
    loss.backward()
    for name, base in arrays.items():
        grad = tensors[name].grad
        assert grad is not None, f"no gradient for {name}"
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]

            def value_at(v: float) -> float:
                probe = {k: a.copy() for k, a in arrays.items()}
                probe[name].reshape(-1)[idx] = v
                frozen = {k: Tensor(a) for k, a in probe.items()}
                return make_loss(frozen).item()

            numeric = (value_at(orig + eps) - value_at(orig - eps)) / (2 * eps)
            analytic = grad.reshape(-1)[idx]
            assert rel_err(analytic, numeric) < tol, (
                f"{name}[{idx}]: analytic {analytic} vs numeric {numeric}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
