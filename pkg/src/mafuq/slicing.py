"""Slicing plans, slice extraction/stacking and 2.5D predictor inputs."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ShapeError
from .volume import Axis, RigidRotation, Volume3, check_same_dims, rotate_resample

N_SEQUENCES = 3
N_NEIGHBOURS = 3
N_CHANNELS = N_SEQUENCES * N_NEIGHBOURS


class PlaneKind(str, Enum):
    AXIAL = "axial"
    SAGITTAL = "sagittal"
    CORONAL = "coronal"

    @property
    def normal(self) -> Axis:
        return {PlaneKind.AXIAL: Axis.Z, PlaneKind.SAGITTAL: Axis.X, PlaneKind.CORONAL: Axis.Y}[self]


@dataclass(frozen=True)
class SlicingPlane:
    """A principal slicing direction, optionally applied to a pre-rotated volume."""

    kind: PlaneKind
    pre_rotation: Optional[RigidRotation] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PlaneKind(self.kind))
        r = self.pre_rotation
        if r is not None and r.axis == self.kind.normal:
            raise ParameterError(
                f"rotation about {r.axis.value} only spins {self.kind.value} slices in-plane; "
                "it does not define a new slicing plane")

    @property
    def oblique(self) -> bool:
        return self.pre_rotation is not None and self.pre_rotation.angle_degrees != 0.0

    @property
    def name(self) -> str:
        if self.pre_rotation is None:
            return self.kind.value
        return f"{self.kind.value}@{self.pre_rotation}"

    def __str__(self):
        return self.name

    @classmethod
    def parse(cls, text: str) -> "SlicingPlane":
        """Parse ``axial``, ``coronal@x+45``, ``sagittal@z-45`` and the like."""
        m = re.fullmatch(r"\s*(axial|sagittal|coronal)\s*(?:@\s*([xyz])\s*([+-]?\d+(?:\.\d*)?)\s*)?", text.lower())
        if not m:
            raise ParameterError(f"cannot parse slicing plane {text!r}")
        rot = RigidRotation(m.group(2), float(m.group(3))) if m.group(2) else None
        return cls(PlaneKind(m.group(1)), rot)


AXIAL = SlicingPlane(PlaneKind.AXIAL)
SAGITTAL = SlicingPlane(PlaneKind.SAGITTAL)
CORONAL = SlicingPlane(PlaneKind.CORONAL)
PRINCIPAL_PLANES = (AXIAL, SAGITTAL, CORONAL)


@dataclass(frozen=True)
class SlicingPlan:
    planes: Tuple[SlicingPlane, ...]

    def __post_init__(self):
        planes = tuple(self.planes)
        if not planes:
            raise ParameterError("a slicing plan needs at least one plane")
        if len(set(planes)) != len(planes):
            raise ParameterError(f"slicing plan has duplicate planes: {[p.name for p in planes]}")
        object.__setattr__(self, "planes", planes)

    def __len__(self):
        return len(self.planes)

    def __iter__(self) -> Iterator[SlicingPlane]:
        return iter(self.planes)

    def names(self):
        return [p.name for p in self.planes]

    @classmethod
    def parse(cls, text: str) -> "SlicingPlan":
        """``canonical``, ``principal``, or a comma separated list of planes."""
        key = text.strip().lower()
        if key == "canonical":
            return canonical_maf_plan()
        if key == "principal":
            return cls(PRINCIPAL_PLANES)
        return cls(tuple(SlicingPlane.parse(p) for p in key.split(",") if p.strip()))


def canonical_maf_plan(angle_degrees: float = 45.0) -> SlicingPlan:
    """The 9-plane plan: 3 principal planes plus 6 oblique ones.

    Rotating about axis ``k`` tilts exactly the two plane families whose
    normal is not ``k``; each rotation therefore contributes two planes.
    """
    planes = list(PRINCIPAL_PLANES)
    for axis in Axis:
        rot = RigidRotation(axis, angle_degrees)
        planes.extend(SlicingPlane(p.kind, rot) for p in PRINCIPAL_PLANES if p.kind.normal != axis)
    return SlicingPlan(tuple(planes))


@dataclass(frozen=True, eq=False)
class SliceSet:
    """Ordered 2D slices of a volume cut perpendicular to ``plane``'s normal.

    ``images`` has shape ``(D_m, a, b)`` where ``(a, b)`` are the two in-plane
    axes in increasing x, y, z order (axial: x, y; sagittal: y, z;
    coronal: x, z).
    """

    plane: SlicingPlane
    images: np.ndarray
    validity: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 3:
            raise ShapeError(f"slice set images must be (n, a, b), got shape {images.shape}")
        validity = np.asarray(self.validity, dtype=bool)
        if validity.shape != images.shape:
            raise ShapeError(f"slice validity shape {validity.shape} != image shape {images.shape}")
        images = np.array(images, copy=True)
        validity = np.array(validity, copy=True)
        images.setflags(write=False)
        validity.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "validity", validity)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, d):
        return self.images[d]

    @property
    def slice_dims(self) -> Tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


def _to_slices(a: np.ndarray, normal: Axis) -> np.ndarray:
    return np.moveaxis(a, normal.index, 0)


def _from_slices(a: np.ndarray, normal: Axis) -> np.ndarray:
    return np.moveaxis(a, 0, normal.index)


def _frame_volume(v: Volume3, plane: SlicingPlane) -> Volume3:
    if plane.pre_rotation is None:
        return v
    return rotate_resample(v, plane.pre_rotation)


def slice_volume(v: Volume3, plane: SlicingPlane) -> SliceSet:
    """Cut ``v`` (rotated first for oblique planes) into slices along the plane normal."""
    framed = _frame_volume(v, plane)
    normal = plane.kind.normal
    return SliceSet(plane, _to_slices(framed.data, normal), _to_slices(framed.valid, normal), v.spacing)


def stack_slices(s: SliceSet) -> Volume3:
    """Reassemble a slice set into a volume in the original (unrotated) frame."""
    normal = s.plane.kind.normal
    local = Volume3(_from_slices(s.images, normal), s.spacing, _from_slices(s.validity, normal))
    if s.plane.pre_rotation is None:
        return local
    return rotate_resample(local, s.plane.pre_rotation.inverse())


def _neighbour_indices(d: int, n: int) -> Tuple[int, int, int]:
    return max(d - 1, 0), d, min(d + 1, n - 1)


def stack_25d_from_slices(sets: Sequence[SliceSet], d: int) -> np.ndarray:
    """9-channel input for slice ``d`` from already-extracted slice sets.

    Channels are sequence-major: ``[seq0(d-1), seq0(d), seq0(d+1), seq1(d-1), ...]``,
    with edge slices replicated at the boundaries.
    """
    if len(sets) != N_SEQUENCES:
        raise ParameterError(f"expected {N_SEQUENCES} sequences, got {len(sets)}")
    n = len(sets[0])
    if any(len(s) != n or s.slice_dims != sets[0].slice_dims for s in sets):
        raise ShapeError("sequence slice sets differ in slice count or slice dims")
    if not 0 <= d < n:
        raise ParameterError(f"slice index {d} out of range [0, {n})")
    idx = _neighbour_indices(d, n)
    return np.stack([s.images[i] for s in sets for i in idx])


def stack_25d_all(sets: Sequence[SliceSet]) -> np.ndarray:
    """All 2.5D inputs of a slice set as an ``(n, 9, a, b)`` float32 array."""
    n = len(sets[0])
    return np.stack([stack_25d_from_slices(sets, d) for d in range(n)]).astype(np.float32, copy=False)


def build_25d_stack(seqs: Sequence[Volume3], plane: SlicingPlane, d: int) -> np.ndarray:
    """The ``(9, a, b)`` 2.5D input for slice ``d`` of ``plane``."""
    if len(seqs) != N_SEQUENCES:
        raise ParameterError(f"expected {N_SEQUENCES} sequences, got {len(seqs)}")
    check_same_dims(*seqs)
    return stack_25d_from_slices([slice_volume(v, plane) for v in seqs], d)
