"""Volume files: NIfTI-1 (``.nii``, ``.nii.gz``) and raw ``.rvol``.

``.rvol`` is raw little-endian float32 in x-fastest order, with a JSON
sidecar ``<name>.rvol.json`` holding ``{"dims": [W, H, D], "spacing": [sx, sy, sz]}``.
Validity is not stored by either format; invalid voxels are written as 0.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import nibabel as nib
import numpy as np

from .errors import VolumeIOError
from .volume import Volume3

NIFTI_SUFFIXES = (".nii", ".nii.gz")
RVOL_SUFFIX = ".rvol"


def _kind(path) -> str:
    p = str(path).lower()
    if p.endswith(NIFTI_SUFFIXES):
        return "nifti"
    if p.endswith(RVOL_SUFFIX):
        return "rvol"
    raise VolumeIOError(f"{path}: unknown volume format (expected .nii, .nii.gz or .rvol)")


def sidecar_path(path) -> str:
    return str(path) + ".json"


def _check_axis_aligned(affine: np.ndarray, path):
    rot = affine[:3, :3]
    off = rot - np.diag(np.diag(rot))
    if np.abs(off).max() > 1e-6 * max(1.0, np.abs(rot).max()):
        raise VolumeIOError(f"{path}: oblique orientation matrix is not supported (only axis-aligned affines)")


def read_volume(path) -> Volume3:
    kind = _kind(path)
    if not os.path.exists(path):
        raise VolumeIOError(f"{path}: no such file")
    try:
        if kind == "rvol":
            return _read_rvol(path)
        return _read_nifti(path)
    except VolumeIOError:
        raise
    except (OSError, ValueError, KeyError, TypeError, nib.filebasedimages.ImageFileError) as exc:
        raise VolumeIOError(f"{path}: cannot read volume: {exc}") from exc


def read_affine(path) -> Optional[np.ndarray]:
    """The NIfTI affine, or None for ``.rvol``."""
    if _kind(path) == "rvol":
        return None
    try:
        return np.asarray(nib.load(str(path)).affine)
    except Exception as exc:
        raise VolumeIOError(f"{path}: cannot read header: {exc}") from exc


def _read_rvol(path) -> Volume3:
    with open(sidecar_path(path)) as f:
        meta = json.load(f)
    dims = [int(n) for n in meta["dims"]]
    spacing = [float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0))]
    raw = np.fromfile(path, dtype="<f4")
    if len(dims) != 3 or raw.size != dims[0] * dims[1] * dims[2]:
        raise VolumeIOError(f"{path}: holds {raw.size} floats, sidecar declares dims {dims}")
    return Volume3.from_flat(raw.astype(np.float32), dims, spacing)


def _read_nifti(path) -> Volume3:
    img = nib.load(str(path))
    if not isinstance(img, nib.Nifti1Image):
        raise VolumeIOError(f"{path}: not a single-file NIfTI-1 image")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise VolumeIOError(f"{path}: expected a 3D volume, got shape {img.shape}")
    _check_axis_aligned(img.affine, path)
    # get_fdata honours scl_slope / scl_inter
    data = img.get_fdata(dtype=np.float32).reshape(shape)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume3(data, spacing)


def write_volume(path, v: Volume3, affine: Optional[np.ndarray] = None, dtype: str = "float32"):
    """Write ``v``; invalid voxels are stored as 0.

    ``dtype="int16"`` rounds values (meant for label maps). ``affine``
    defaults to a diagonal matrix built from the spacing.
    """
    kind = _kind(path)
    data = np.where(v.valid, v.data, 0).astype(np.float32)
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        if kind == "rvol":
            if dtype != "float32":
                raise VolumeIOError(f"{path}: .rvol only stores float32")
            data.ravel(order="F").astype("<f4").tofile(path)
            meta = {"dims": list(v.dims), "spacing": list(v.spacing)}
            with open(sidecar_path(path), "w") as f:
                json.dump(meta, f, sort_keys=True)
                f.write("\n")
            return
        if affine is None:
            affine = np.diag(list(v.spacing) + [1.0])
        affine = np.asarray(affine, dtype=np.float64)
        _check_axis_aligned(affine, path)
        if dtype == "int16":
            arr = np.rint(data).astype(np.int16)
        elif dtype == "float32":
            arr = data
        else:
            raise VolumeIOError(f"{path}: unsupported dtype {dtype}")
        img = nib.Nifti1Image(arr, affine)
        img.header.set_data_dtype(arr.dtype)
        img.set_qform(affine, code=1)
        img.set_sform(affine, code=1)
        # fixed slope/intercept so files are byte-identical across runs
        img.header["scl_slope"] = 1.0
        img.header["scl_inter"] = 0.0
        nib.save(img, str(path))
    except VolumeIOError:
        raise
    except (OSError, ValueError) as exc:
        raise VolumeIOError(f"{path}: cannot write volume: {exc}") from exc
