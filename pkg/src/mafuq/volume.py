"""Dense 3D scalar volumes, rotation with trilinear resampling and voxel-wise statistics.

Volumes are indexed ``data[x, y, z]`` with shape ``(W, H, D)``. The flat
layout is x-fastest, then y, then z (Fortran order), see :func:`flat_index`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ShapeError

# voxels per slab when resampling or reducing; bounds peak float64 memory
_SLAB_VOXELS = 1 << 21
# tolerance on source coordinates so exact-edge voxels are not lost to rounding
_EDGE_EPS = 1e-9


class Axis(str, Enum):
    X = "x"
    Y = "y"
    Z = "z"

    @property
    def index(self) -> int:
        return "xyz".index(self.value)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume3:
    """A ``W x H x D`` scalar grid with voxel spacing and optional validity.

    Data is stored as float32, except float64 input which is kept as is
    (fusion statistics are accumulated and returned in float64).

    ``validity=None`` means every voxel is valid. Arrays are made read-only
    on construction so instances can be shared between threads.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    validity: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        # float64 is kept for fused statistics; everything else is stored as float32
        dtype = np.float64 if data.dtype == np.float64 else np.float32
        data = np.array(data, dtype=dtype, copy=True)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ParameterError(f"spacing must be three positive finite values, got {self.spacing}")
        validity = self.validity
        if validity is not None:
            validity = np.array(validity, dtype=bool, copy=True)
            if validity.shape != data.shape:
                raise ShapeError(f"validity shape {validity.shape} != data shape {data.shape}")
            if validity.all():
                validity = None
        finite = np.isfinite(data)
        bad = ~finite if validity is None else (~finite & validity)
        if bad.any():
            raise ParameterError("volume has non-finite intensities at valid voxels")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "validity", None if validity is None else _frozen(validity))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def valid(self) -> np.ndarray:
        """Boolean validity grid (all True when no mask is stored)."""
        if self.validity is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.validity

    @property
    def fully_valid(self) -> bool:
        return self.validity is None

    def flat(self) -> np.ndarray:
        """Data in the canonical x-fastest flat layout."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, flat, dims, spacing=(1.0, 1.0, 1.0), validity=None) -> "Volume3":
        flat = np.asarray(flat)
        w, h, d = (int(n) for n in dims)
        if flat.size != w * h * d:
            raise ShapeError(f"flat data has {flat.size} values, expected {w}*{h}*{d}={w * h * d}")
        return cls(flat.reshape((w, h, d), order="F"), spacing, validity)

    @classmethod
    def constant(cls, value, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume3":
        return cls(np.full(tuple(dims), value, dtype=np.float32), spacing)

    def with_data(self, data, validity=None) -> "Volume3":
        """New volume on the same grid."""
        return Volume3(data, self.spacing, validity)

    def same_grid(self, other: "Volume3") -> bool:
        return self.dims == other.dims


def flat_index(x, y, z, dims) -> int:
    w, h, _ = dims
    return x + w * (y + h * z)


def unflat_index(i, dims) -> Tuple[int, int, int]:
    w, h, _ = dims
    return i % w, (i // w) % h, i // (w * h)


def check_same_dims(*volumes: Volume3) -> Tuple[int, int, int]:
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise ShapeError(f"volume dims mismatch: {dims} vs {v.dims}")
    return dims


@dataclass(frozen=True)
class RigidRotation:
    """Rotation about a principal axis through the volume's geometric center.

    The pivot is ``((W-1)/2, (H-1)/2, (D-1)/2)`` in index space. Positive
    angles follow the right-hand rule about ``axis``.
    """

    axis: Axis
    angle_degrees: float

    def __post_init__(self):
        object.__setattr__(self, "axis", Axis(self.axis))
        angle = float(self.angle_degrees)
        if not math.isfinite(angle):
            raise ParameterError(f"rotation angle must be finite, got {self.angle_degrees}")
        if abs(angle) > 180.0:
            raise ParameterError(f"|angle| must be <= 180 degrees, got {angle}")
        object.__setattr__(self, "angle_degrees", angle)

    def inverse(self) -> "RigidRotation":
        return RigidRotation(self.axis, -self.angle_degrees)

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix acting on (x, y, z) index coordinates."""
        a = math.radians(self.angle_degrees)
        c, s = math.cos(a), math.sin(a)
        # rotate the two axes that are not the rotation axis, in cyclic order
        i, j = {Axis.X: (1, 2), Axis.Y: (2, 0), Axis.Z: (0, 1)}[self.axis]
        m = np.eye(3)
        m[i, i], m[i, j] = c, -s
        m[j, i], m[j, j] = s, c
        return m

    def __str__(self):
        return f"{self.axis.value}{self.angle_degrees:+g}"


def _slabs(depth: int, plane_voxels: int):
    step = max(1, _SLAB_VOXELS // max(1, plane_voxels))
    for z0 in range(0, depth, step):
        yield z0, min(depth, z0 + step)


def rotate_resample(v: Volume3, r: RigidRotation) -> Volume3:
    """Rotate ``v`` about its center and resample trilinearly on the same grid.

    Each output voxel samples ``v`` at the inverse-rotated coordinate. Output
    voxels whose source lies outside the grid, or whose interpolation stencil
    gives nonzero weight to an invalid source voxel, are invalid and set to 0.
    """
    if r.angle_degrees == 0.0:
        return Volume3(v.data, v.spacing, v.validity)

    dims = np.array(v.dims)
    center = (dims - 1) / 2.0
    inv = r.inverse().matrix()
    src = v.data.astype(np.float64)
    src_valid = v.valid
    w, h, d = v.dims
    out = np.zeros(v.dims, dtype=v.data.dtype)
    out_valid = np.zeros(v.dims, dtype=bool)

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), indexing="ij")
    for z0, z1 in _slabs(d, w * h):
        gz = np.arange(z0, z1, dtype=np.float64)
        px = np.broadcast_to(gx[..., None], (w, h, z1 - z0)) - center[0]
        py = np.broadcast_to(gy[..., None], (w, h, z1 - z0)) - center[1]
        pz = np.broadcast_to(gz[None, None, :], (w, h, z1 - z0)) - center[2]
        coords = [inv[k, 0] * px + inv[k, 1] * py + inv[k, 2] * pz + center[k] for k in range(3)]

        inside = np.ones(px.shape, dtype=bool)
        lo, frac = [], []
        for k in range(3):
            q = coords[k]
            inside &= (q >= -_EDGE_EPS) & (q <= dims[k] - 1 + _EDGE_EPS)
            q = np.clip(q, 0.0, dims[k] - 1)
            i0 = np.minimum(np.floor(q).astype(np.intp), max(dims[k] - 2, 0))
            t = q - i0
            if dims[k] == 1:
                t = np.zeros_like(t)
            lo.append(i0)
            frac.append(t)
        hi = [np.minimum(lo[k] + 1, dims[k] - 1) for k in range(3)]

        tx, ty, tz = frac
        # nested lerps so that a constant neighbourhood reproduces the constant exactly
        touched_invalid = np.zeros(px.shape, dtype=bool)
        corner = {}
        for cx in (0, 1):
            ix = hi[0] if cx else lo[0]
            for cy in (0, 1):
                iy = hi[1] if cy else lo[1]
                for cz in (0, 1):
                    iz = hi[2] if cz else lo[2]
                    corner[cx, cy, cz] = src[ix, iy, iz]
                    if v.validity is not None:
                        weight_pos = (tx > 0 if cx else tx < 1) & (ty > 0 if cy else ty < 1) & (tz > 0 if cz else tz < 1)
                        touched_invalid |= weight_pos & ~src_valid[ix, iy, iz]

        def lerp(a, b, t):
            return a + t * (b - a)

        c00 = lerp(corner[0, 0, 0], corner[1, 0, 0], tx)
        c10 = lerp(corner[0, 1, 0], corner[1, 1, 0], tx)
        c01 = lerp(corner[0, 0, 1], corner[1, 0, 1], tx)
        c11 = lerp(corner[0, 1, 1], corner[1, 1, 1], tx)
        val = lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)

        ok = inside & ~touched_invalid
        out[:, :, z0:z1] = np.where(ok, val, 0.0)
        out_valid[:, :, z0:z1] = ok

    return Volume3(out, v.spacing, out_valid)


def voxelwise_mean_var(vs: Sequence[Volume3], min_count: int = 2):
    """Voxel-wise mean and population variance over the valid contributions.

    Returns ``(mean, var, count)``. At voxels with ``n`` valid contributions
    the variance divides by ``n``. Voxels with ``n < min_count`` get variance
    0 and are marked invalid in both ``mean`` and ``var``; their mean is still
    filled from the available samples when ``n >= 1``.

    Samples are sorted per voxel before accumulation, so the result is exactly
    invariant to the order of ``vs``.
    """
    if len(vs) == 0:
        raise ParameterError("voxelwise_mean_var needs at least one volume")
    if int(min_count) < 1:
        raise ParameterError(f"min_count must be a positive integer, got {min_count}")
    dims = check_same_dims(*vs)
    w, h, d = dims
    mean = np.zeros(dims, dtype=np.float64)
    var = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)

    for z0, z1 in _slabs(d, w * h * len(vs)):
        vals = np.stack([v.data[:, :, z0:z1] for v in vs]).astype(np.float64)
        valid = np.stack([v.valid[:, :, z0:z1] for v in vs])
        n = valid.sum(axis=0)
        # shift by the smallest sample so identical samples give exactly zero deviations
        ref = np.where(valid, vals, np.inf).min(axis=0)
        ref[n == 0] = 0.0
        shifted = np.where(valid, vals - ref, 0.0)
        total = np.sort(shifted, axis=0).sum(axis=0)
        dbar = np.divide(total, n, out=np.zeros_like(total), where=n > 0)
        dev = np.where(valid, (shifted - dbar) ** 2, 0.0)
        ss = np.sort(dev, axis=0).sum(axis=0)
        enough = n >= min_count
        var[:, :, z0:z1] = np.divide(ss, n, out=np.zeros_like(ss), where=enough)
        mean[:, :, z0:z1] = ref + dbar
        count[:, :, z0:z1] = n

    ok = count >= min_count
    spacing = vs[0].spacing
    return (
        Volume3(mean, spacing, ok),
        Volume3(var, spacing, ok),
        Volume3(count.astype(np.float32), spacing),
    )


def absdiff(a: Volume3, b: Volume3) -> Volume3:
    """Voxel-wise ``|a - b|``; valid where both inputs are valid."""
    check_same_dims(a, b)
    diff = np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))
    validity = None
    if a.validity is not None or b.validity is not None:
        validity = a.valid & b.valid
        diff = np.where(validity, diff, 0.0)
    return Volume3(diff, a.spacing, validity)
