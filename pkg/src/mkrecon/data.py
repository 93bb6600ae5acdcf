"""Volume I/O, preprocessing, phantom generation and training pairs.

On-disk formats:

* Raw volume: binary payload of D*H*W IEEE-754 float32 values, little-endian,
  depth-major then row-major (C order), in ``<path>``; a text sidecar header
  in ``<path>.hdr`` with one ``key: value`` per line (rawvolume version, dims,
  optional spacing, intensity min/max, byte order, dtype).
* A read-only subset of the single/dual-file neuroimaging volume format with
  magic "n+1"/"ni1": dims 1..3, datatypes uint8/int16/float32, optional
  slope/intercept scaling, vox_offset honoured, gzip transparent.
* PGM (P5, 8-bit) slice export for qualitative inspection.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import Volume
from .rng import SplitMix64, derive_seed


class VolumeFormatError(ValueError):
    """A volume file is missing, malformed or uses an unsupported feature."""


RAW_HEADER_VERSION = 1


# ---------------------------------------------------------------------------
# raw format


def save_volume(volume: Volume, path: str) -> None:
    """Write payload to ``path`` and the text header to ``path + '.hdr'``."""
    vox = volume.voxels
    if not np.all(np.isfinite(vox)):
        raise ValueError("refusing to save non-finite voxels")
    if any(s == 0 for s in vox.shape):
        raise ValueError("refusing to save an empty volume")
    d, h, w = vox.shape
    lines = [
        f"rawvolume: {RAW_HEADER_VERSION}",
        f"dims: {d} {h} {w}",
        f"intensity_min: {volume.intensity_min!r}",
        f"intensity_max: {volume.intensity_max!r}",
        "byte_order: little",
        "dtype: float32",
    ]
    if volume.spacing is not None:
        sd, sh, sw = volume.spacing
        lines.insert(2, f"spacing: {sd!r} {sh!r} {sw!r}")
    with open(str(path) + ".hdr", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = vox.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(payload)


def _parse_raw_header(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read header {path}: {exc}") from exc
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise VolumeFormatError(f"malformed header line {line!r} in {path}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    return fields


def _load_raw(path: str) -> Volume:
    fields = _parse_raw_header(str(path) + ".hdr")
    if fields.get("rawvolume") != str(RAW_HEADER_VERSION):
        raise VolumeFormatError(f"unsupported raw header version in {path}.hdr")
    if fields.get("byte_order", "little") != "little":
        raise VolumeFormatError("raw payload must be little-endian")
    if fields.get("dtype", "float32") != "float32":
        raise VolumeFormatError("raw payload must be float32")
    try:
        d, h, w = (int(v) for v in fields["dims"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"bad dims in {path}.hdr") from exc
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) != 4 * d * h * w:
        raise VolumeFormatError(
            f"payload length {len(payload)} != expected {4 * d * h * w} in {path}")
    vox = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(d, h, w)
    spacing = None
    if "spacing" in fields:
        spacing = tuple(float(v) for v in fields["spacing"].split())
    return Volume(
        voxels=vox,
        intensity_min=float(fields.get("intensity_min", 0.0)),
        intensity_max=float(fields.get("intensity_max", 1.0)),
        spacing=spacing,
    )


# ---------------------------------------------------------------------------
# neuroimaging format subset (read-only)

_HDR_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def _read_maybe_gz(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc


def _load_nifti(path: str) -> Volume:
    blob = _read_maybe_gz(path)
    if len(blob) < _HDR_SIZE:
        raise VolumeFormatError(f"{path}: header truncated")
    sizeof_hdr = struct.unpack("<i", blob[0:4])[0]
    endian = "<"
    if sizeof_hdr != _HDR_SIZE:
        if struct.unpack(">i", blob[0:4])[0] == _HDR_SIZE:
            endian = ">"
        else:
            raise VolumeFormatError(f"{path}: bad header size {sizeof_hdr}")
    magic = blob[344:348]
    if magic not in (_MAGIC_SINGLE, _MAGIC_PAIR):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = struct.unpack(endian + "f", blob[108:112])[0]
    scl_slope = struct.unpack(endian + "f", blob[112:116])[0]
    scl_inter = struct.unpack(endian + "f", blob[116:120])[0]

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0] = {ndim}")
    nx = dim[1] if ndim >= 1 else 1
    ny = dim[2] if ndim >= 2 else 1
    nz = dim[3] if ndim >= 3 else 1
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: nonpositive dimension in {dim[1:4]}")
    for extra in dim[4:1 + ndim]:
        if extra > 1:
            raise VolumeFormatError(f"{path}: >3D volumes are unsupported")
    if datatype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    np_dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)

    if magic == _MAGIC_PAIR:
        base, _ = os.path.splitext(
            str(path)[:-3] if str(path).endswith(".gz") else str(path))
        img_path = base + ".img"
        payload = _read_maybe_gz(
            img_path if os.path.exists(img_path) else img_path + ".gz")
        offset = int(vox_offset)
    else:
        payload = blob
        offset = int(vox_offset) if vox_offset >= _HDR_SIZE else _HDR_SIZE

    count = nx * ny * nz
    need = offset + count * np_dtype.itemsize
    if len(payload) < need:
        raise VolumeFormatError(
            f"{path}: payload truncated ({len(payload)} < {need} bytes)")
    flat = np.frombuffer(payload, dtype=np_dtype, count=count, offset=offset)
    data = flat.astype(np.float64).reshape(nz, ny, nx)  # fastest axis last
    if scl_slope != 0.0:
        data = data * float(scl_slope) + float(scl_inter)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite voxels after scaling")
    return Volume(
        voxels=data,
        intensity_min=float(data.min()),
        intensity_max=float(data.max()),
        spacing=(float(pixdim[3]), float(pixdim[2]), float(pixdim[1])),
    )


def load_volume(path: str, format: str = "auto") -> Volume:
    """Load a volume; format "auto" picks by extension (.nii/.nii.gz/.hdr...)."""
    name = str(path)
    if format == "auto":
        lowered = name.lower()
        if lowered.endswith((".nii", ".nii.gz", ".hdr", ".hdr.gz")):
            format = "nifti"
        else:
            format = "raw"
    if format == "nifti":
        return _load_nifti(name)
    if format == "raw":
        return _load_raw(name)
    raise ValueError(f"unknown volume format {format!r}")


# ---------------------------------------------------------------------------
# slice export


def export_slice_pgm(volume: Volume, index: int, path: str) -> None:
    """8-bit binary PGM of one slice; values mapped by round-half-up(255 v)."""
    if not 0 <= index < volume.depth:
        raise IndexError(f"slice index {index} out of range 0..{volume.depth - 1}")
    sl = volume.voxels[index]
    pixels = np.floor(255.0 * sl + 0.5)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    h, w = sl.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


# ---------------------------------------------------------------------------
# preprocessing


def _resize_axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-centre mapping with edge clamping
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(vox: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """In-plane bilinear resize of a (D, H, W) stack."""
    th, tw = target_hw
    y0, y1, fy = _resize_axis_coords(vox.shape[1], th)
    x0, x1, fx = _resize_axis_coords(vox.shape[2], tw)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    v00 = vox[:, y0][:, :, x0]
    v01 = vox[:, y0][:, :, x1]
    v10 = vox[:, y1][:, :, x0]
    v11 = vox[:, y1][:, :, x1]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bot


def preprocess(volume: Volume, target_hw: tuple[int, int] = (256, 256)) -> Volume:
    """In-plane bilinear resize plus per-volume min-max normalisation.

    The original min/max is stored for inversion.  A constant volume cannot
    be range-normalised; it becomes all zeros with ``constant_flagged`` set.
    """
    if volume.voxels.shape[1] < 2 or volume.voxels.shape[2] < 2:
        raise ValueError("preprocess needs in-plane extents >= 2")
    vox = volume.voxels
    if (vox.shape[1], vox.shape[2]) != tuple(target_hw):
        vox = bilinear_resize(vox, tuple(target_hw))
    lo, hi = float(vox.min()), float(vox.max())
    if hi == lo:
        return replace(volume, voxels=np.zeros_like(vox), intensity_min=lo,
                       intensity_max=hi, constant_flagged=True)
    vox = (vox - lo) / (hi - lo)
    return replace(volume, voxels=vox, intensity_min=lo, intensity_max=hi,
                   constant_flagged=False)


# ---------------------------------------------------------------------------
# phantom generation

def _smoothstep(x: np.ndarray) -> np.ndarray:
    # polynomial soft edge; no libm in the reproducible sampling path
    s = np.clip(x, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _rotation_matrix(rng: SplitMix64) -> np.ndarray:
    # compose two axis rotations from trig-free (cos, sin) samples
    c1, s1 = rng.unit_cos_sin()
    c2, s2 = rng.unit_cos_sin()
    rz = np.array([[1.0, 0.0, 0.0], [0.0, c1, -s1], [0.0, s1, c1]])
    ry = np.array([[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]])
    return rz @ ry


def generate_phantom(seed: int, dims: tuple[int, int, int] = (32, 48, 48),
                     n_ellipsoids: int = 5, lesion: bool = False) -> Volume:
    """Deterministic soft-edged ellipsoid phantom in [0, 1].

    A gentle intensity gradient forms the background; rotated ellipsoids of
    varying size and brightness sit on top, plus an optional small bright
    spherical lesion.  Construction is additive (before the final clip), and
    every sampled quantity comes from the seeded splitmix64 stream using
    plain arithmetic, so volumes reproduce across platforms.
    """
    d, h, w = dims
    if min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 each, got {dims}")
    rng = SplitMix64(derive_seed(seed, "phantom"))

    grids = np.meshgrid(
        (np.arange(d) + 0.5) / d * 2.0 - 1.0,
        (np.arange(h) + 0.5) / h * 2.0 - 1.0,
        (np.arange(w) + 0.5) / w * 2.0 - 1.0,
        indexing="ij")
    coords = np.stack(grids)  # (3, D, H, W) in (-1, 1)

    b0 = rng.uniform(0.12, 0.22)
    slopes = [rng.uniform(-0.05, 0.05) for _ in range(3)]
    vol = b0 + sum(s * g for s, g in zip(slopes, coords))

    for _ in range(n_ellipsoids):
        centre = [rng.uniform(-0.45, 0.45) for _ in range(3)]
        axes = [rng.uniform(0.18, 0.5) for _ in range(3)]
        rot = _rotation_matrix(rng)
        amp = rng.uniform(0.12, 0.4)
        edge = rng.uniform(0.15, 0.35)
        diff = [coords[i] - centre[i] for i in range(3)]
        # explicit elementwise rotation keeps the arithmetic order fixed
        q = np.zeros(dims)
        for i in range(3):
            rel = rot[i, 0] * diff[0] + rot[i, 1] * diff[1] + rot[i, 2] * diff[2]
            q += (rel / axes[i]) ** 2
        vol = vol + amp * _smoothstep((1.0 - q) / edge)

    if lesion:
        centre = [rng.uniform(-0.3, 0.3) for _ in range(3)]
        radius = rng.uniform(0.1, 0.18)
        q = np.zeros(dims)
        for i in range(3):
            q += ((coords[i] - centre[i]) / radius) ** 2
        vol = vol + 0.35 * _smoothstep((1.0 - q) / 0.4)

    np.clip(vol, 0.0, 1.0, out=vol)
    return Volume(voxels=vol)


# ---------------------------------------------------------------------------
# training pairs


@dataclass(frozen=True)
class TrainingTriplet:
    """Indices of one (left, target, right) synthesis example."""

    volume_id: str
    left: int
    target: int
    right: int
    half_gap: int

    def __post_init__(self):
        if not (self.left < self.target < self.right):
            raise ValueError("triplet indices must satisfy left < target < right")
        if (self.target - self.left != self.half_gap
                or self.right - self.target != self.half_gap):
            raise ValueError("triplet must be centred: spacing equal to half_gap")


def make_triplets(volumes: list[tuple[str, Volume]], half_gap: int) -> list[TrainingTriplet]:
    """All stride-1 centred triplets per volume, in deterministic order."""
    if half_gap < 1:
        raise ValueError("half_gap must be >= 1")
    out = []
    for vid, vol in volumes:
        for target in range(half_gap, vol.depth - half_gap):
            out.append(TrainingTriplet(
                volume_id=vid, left=target - half_gap, target=target,
                right=target + half_gap, half_gap=half_gap))
    return out
