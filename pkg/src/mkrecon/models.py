"""The two networks and the residual application rule.

MKResRecon synthesises the middle slice between two inputs: a U-Net with
additive attention gates on the skip connections predicts a correction on
top of the plain average of the inputs, so a zero final projection makes the
network exactly the linear-interpolation baseline.  IdentityRefineNet3D is a
three-layer 3D CNN whose last layer starts at zero, making the whole
refinement path the identity at initialisation: P = I + alpha * R.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import difftensor as dt
from .difftensor import Tensor
from .rng import SplitMix64, derive_seed


@dataclass
class MKResReconParams:
    """Slice-synthesis network: hyperparameters plus named parameter tensors."""

    levels: int = 3
    base_channels: int = 32
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class RefineNetParams:
    """Volumetric refiner: three 3x3x3 conv layers, 1 -> h -> h -> 1."""

    hidden_channels: int = 8
    alpha: float = 0.1
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _init_conv(rng: SplitMix64, shape: tuple[int, ...], zero: bool = False) -> Tensor:
    """Conv weight from uniform(-b, b), b = 1/sqrt(fan_in)."""
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.fill_uniform(int(np.prod(shape)), -bound, bound).reshape(shape)
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _stage1_tensors(rng: SplitMix64, levels: int, base: int) -> dict[str, Tensor]:
    t: dict[str, Tensor] = {}
    widths = [base * 2**l for l in range(levels)]
    bottleneck = base * 2**levels

    def conv_pair(prefix: str, cin: int, cout: int) -> None:
        t[f"{prefix}.conv1.w"] = _init_conv(rng, (cout, cin, 3, 3))
        t[f"{prefix}.conv1.b"] = _zeros((cout,))
        t[f"{prefix}.conv2.w"] = _init_conv(rng, (cout, cout, 3, 3))
        t[f"{prefix}.conv2.b"] = _zeros((cout,))

    cin = 2
    for l, c in enumerate(widths):
        conv_pair(f"enc{l}", cin, c)
        cin = c
    conv_pair("bottleneck", widths[-1], bottleneck)

    above = bottleneck
    for l in reversed(range(levels)):
        c = widths[l]
        t[f"dec{l}.up.w"] = _init_conv(rng, (c, above, 3, 3))
        t[f"dec{l}.up.b"] = _zeros((c,))
        inter = max(c // 2, 1)
        t[f"att{l}.wg.w"] = _init_conv(rng, (inter, c, 1, 1))
        t[f"att{l}.wg.b"] = _zeros((inter,))
        t[f"att{l}.wx.w"] = _init_conv(rng, (inter, c, 1, 1))
        t[f"att{l}.wx.b"] = _zeros((inter,))
        t[f"att{l}.psi.w"] = _init_conv(rng, (1, inter, 1, 1))
        t[f"att{l}.psi.b"] = _zeros((1,))
        conv_pair(f"dec{l}", 2 * c, c)
        above = c
    # zero final projection: the network starts as the input average
    t["out.w"] = _init_conv(rng, (1, widths[0], 1, 1), zero=True)
    t["out.b"] = _zeros((1,))
    return t


def _stage2_tensors(rng: SplitMix64, hidden: int) -> dict[str, Tensor]:
    t: dict[str, Tensor] = {}
    t["conv1.w"] = _init_conv(rng, (hidden, 1, 3, 3, 3))
    t["conv1.b"] = _zeros((hidden,))
    t["conv2.w"] = _init_conv(rng, (hidden, hidden, 3, 3, 3))
    t["conv2.b"] = _zeros((hidden,))
    # zero last layer: refinement is exactly zero at initialisation
    t["conv3.w"] = _init_conv(rng, (1, hidden, 3, 3, 3), zero=True)
    t["conv3.b"] = _zeros((1,))
    return t


def init_params(kind: str, seed: int, *, levels: int = 3, base_channels: int = 32,
                hidden_channels: int = 8, alpha: float = 0.1):
    """Deterministic seeded initialisation for either network."""
    rng = SplitMix64(derive_seed(seed, f"init.{kind}"))
    if kind == "stage1":
        return MKResReconParams(
            levels=levels, base_channels=base_channels,
            tensors=_stage1_tensors(rng, levels, base_channels))
    if kind == "stage2":
        return RefineNetParams(
            hidden_channels=hidden_channels, alpha=alpha,
            tensors=_stage2_tensors(rng, hidden_channels))
    raise ValueError(f"init_params: unknown kind {kind!r}")


def attention_gate(gating: Tensor, skip: Tensor, wg: tuple[Tensor, Tensor],
                   wx: tuple[Tensor, Tensor], psi: tuple[Tensor, Tensor]) -> Tensor:
    """Additive attention: skip * sigmoid(psi(relu(Wg g + Wx x)))."""
    if gating.shape[-2:] != skip.shape[-2:]:
        raise ValueError(
            f"attention_gate: spatial mismatch {gating.shape} vs {skip.shape}")
    g1 = dt.conv_nn2d(gating, wg[0], wg[1])
    x1 = dt.conv_nn2d(skip, wx[0], wx[1])
    a = dt.sigmoid(dt.conv_nn2d(dt.relu(dt.add(g1, x1)), psi[0], psi[1]))
    return dt.mul(skip, a)


def _as_batched_slices(x) -> tuple[Tensor, tuple[int, ...]]:
    """(H, W) or (B, H, W) -> (B, 1, H, W) tensor plus the original shape."""
    t = dt.as_tensor(x)
    if t.ndim == 2:
        return dt.reshape(t, (1, 1) + t.shape), t.shape
    if t.ndim == 3:
        return dt.reshape(t, (t.shape[0], 1) + t.shape[1:]), t.shape
    raise ValueError(f"expected a 2D slice or batch of slices, got {t.shape}")


def mkresrecon_forward(slice_a, slice_b, params: MKResReconParams,
                       mode: str = "infer") -> Tensor:
    """Synthesise the slice midway between two inputs.

    Output is 0.5*(a+b) plus the U-Net correction on the 2-channel stack
    [a; b].  Inference clamps to [0, 1]; training leaves the value free so
    gradients are not cut at the range boundary.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mkresrecon_forward: unknown mode {mode!r}")
    a, orig_shape = _as_batched_slices(slice_a)
    b, shape_b = _as_batched_slices(slice_b)
    if a.shape != b.shape:
        raise ValueError(f"slice shape mismatch {orig_shape} vs {shape_b}")
    h, w = a.shape[-2:]
    div = 2**params.levels
    if h % div or w % div:
        raise ValueError(
            f"spatial dims {(h, w)} must be divisible by 2^levels = {div}")
    for name, s in (("slice_a", a), ("slice_b", b)):
        if s.data.min() < 0.0 or s.data.max() > 1.0:
            raise ValueError(f"{name} values outside [0, 1]")

    t = params.tensors

    def conv_pair(prefix: str, x: Tensor) -> Tensor:
        x = dt.relu(dt.conv_nn2d(x, t[f"{prefix}.conv1.w"], t[f"{prefix}.conv1.b"]))
        return dt.relu(dt.conv_nn2d(x, t[f"{prefix}.conv2.w"], t[f"{prefix}.conv2.b"]))

    x = dt.concat_channels(a, b, axis=1)
    skips = []
    for l in range(params.levels):
        x = conv_pair(f"enc{l}", x)
        skips.append(x)
        x = dt.pool_avg(x, 2)
    x = conv_pair("bottleneck", x)
    for l in reversed(range(params.levels)):
        up = dt.upsample_nearest(x, 2)
        up = dt.relu(dt.conv_nn2d(up, t[f"dec{l}.up.w"], t[f"dec{l}.up.b"]))
        gated = attention_gate(
            up, skips[l],
            (t[f"att{l}.wg.w"], t[f"att{l}.wg.b"]),
            (t[f"att{l}.wx.w"], t[f"att{l}.wx.b"]),
            (t[f"att{l}.psi.w"], t[f"att{l}.psi.b"]))
        x = conv_pair(f"dec{l}", dt.concat_channels(gated, up, axis=1))
    delta = dt.conv_nn2d(x, t["out.w"], t["out.b"])

    base = dt.scale(dt.add(a, b), 0.5)
    out = dt.add(base, delta)
    if mode == "infer":
        out = dt.clamp01(out)
    return dt.reshape(out, orig_shape)


def identityrefine_forward(volume, params: RefineNetParams) -> Tensor:
    """Raw refinement R for a single-channel volume, before alpha scaling."""
    v = dt.as_tensor(volume)
    if v.ndim != 3:
        raise ValueError(f"expected a (D, H, W) volume, got rank {v.ndim}")
    t = params.tensors
    x = dt.reshape(v, (1, 1) + v.shape)
    x = dt.relu(dt.conv_nn3d(x, t["conv1.w"], t["conv1.b"]))
    x = dt.relu(dt.conv_nn3d(x, t["conv2.w"], t["conv2.b"]))
    x = dt.conv_nn3d(x, t["conv3.w"], t["conv3.b"])
    return dt.reshape(x, v.shape)


def apply_refinement(volume, refinement, alpha: float, clamp: bool = False) -> Tensor:
    """P = I + alpha * R; clamp to [0, 1] at inference only."""
    v, r = dt.as_tensor(volume), dt.as_tensor(refinement)
    if v.shape != r.shape:
        raise ValueError(f"shape mismatch {v.shape} vs {r.shape}")
    out = dt.add(v, dt.scale(r, alpha))
    return dt.clamp01(out) if clamp else out
