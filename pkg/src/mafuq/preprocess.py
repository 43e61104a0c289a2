"""Histogram standardization (Nyul), joint MinMax normalization and range shift."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .volume import Volume3, check_same_dims

log = logging.getLogger(__name__)

LANDMARK_PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
STANDARD_SCALE = (1.0, 4095.0)


def foreground(v: Volume3) -> np.ndarray:
    return v.data[(v.data > 0) & v.valid].astype(np.float64)


def volume_landmarks(v: Volume3, percentiles=LANDMARK_PERCENTILES) -> np.ndarray:
    """Foreground intensities at ``percentiles`` (linear interpolation between order statistics)."""
    fg = foreground(v)
    if fg.size == 0:
        raise DegenerateInputError("volume has no foreground (intensity > 0)")
    lm = np.percentile(fg, percentiles)
    if not np.all(np.diff(lm) > 0):
        raise DegenerateInputError("volume landmarks are not strictly increasing (degenerate histogram)")
    return lm


def rescale_landmarks(lm: np.ndarray, scale=STANDARD_SCALE) -> np.ndarray:
    """Map the first and last landmark linearly onto ``scale``."""
    lo, hi = scale
    return lo + (lm - lm[0]) * (hi - lo) / (lm[-1] - lm[0])


@dataclass
class NyulLandmarks:
    """Standard-scale landmarks per sequence name."""

    standard: Dict[str, np.ndarray]
    percentiles: Tuple[float, ...] = LANDMARK_PERCENTILES

    def __post_init__(self):
        for seq, lm in self.standard.items():
            lm = np.asarray(lm, dtype=np.float64)
            if lm.shape != (len(self.percentiles),):
                raise ParameterError(f"{seq}: expected {len(self.percentiles)} landmarks, got {lm.shape}")
            if not np.all(np.diff(lm) > 0):
                raise ParameterError(f"{seq}: landmarks must be strictly increasing")
            self.standard[seq] = lm

    def __getitem__(self, seq: str) -> np.ndarray:
        try:
            return self.standard[seq]
        except KeyError:
            raise ParameterError(f"no landmarks for sequence {seq!r}") from None

    def to_json(self) -> str:
        return json.dumps({k: [float(x) for x in v] for k, v in sorted(self.standard.items())}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, percentiles=LANDMARK_PERCENTILES) -> "NyulLandmarks":
        doc = json.loads(text)
        if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
            raise ParameterError("landmark document must map sequence names to lists of floats")
        return cls({k: np.array(v, dtype=np.float64) for k, v in doc.items()}, tuple(percentiles))


LANDMARK_SCHEMA = {
    "type": "object",
    "additionalProperties": {
        "type": "array",
        "items": {"type": "number"},
        "minItems": len(LANDMARK_PERCENTILES),
        "maxItems": len(LANDMARK_PERCENTILES),
    },
}


def train_sequence_landmarks(volumes: Sequence[Volume3], percentiles=LANDMARK_PERCENTILES,
                             scale=STANDARD_SCALE) -> np.ndarray:
    """Average of the rescaled per-volume landmarks; degenerate volumes are skipped."""
    rows = []
    for i, v in enumerate(volumes):
        try:
            rows.append(rescale_landmarks(volume_landmarks(v, percentiles), scale))
        except DegenerateInputError as exc:
            log.warning("volume %d skipped for landmark training: %s", i, exc)
    if not rows:
        raise DegenerateInputError("no usable volume to train landmarks from")
    return np.mean(rows, axis=0)


def nyul_train(cohort: Mapping[str, Sequence[Volume3]], percentiles=LANDMARK_PERCENTILES,
               scale=STANDARD_SCALE) -> NyulLandmarks:
    """Learn standard landmarks for each sequence from a training cohort."""
    if not cohort:
        raise ParameterError("empty training cohort")
    return NyulLandmarks({seq: train_sequence_landmarks(vols, percentiles, scale)
                          for seq, vols in cohort.items()}, tuple(percentiles))


def _piecewise_linear(x, xp, fp):
    # np.interp clamps at the ends; extend the first and last segments instead
    y = np.interp(x, xp, fp)
    lo_slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
    hi_slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    y = np.where(x < xp[0], fp[0] + (x - xp[0]) * lo_slope, y)
    return np.where(x > xp[-1], fp[-1] + (x - xp[-1]) * hi_slope, y)


def nyul_apply(v: Volume3, lm: NyulLandmarks, sequence: str) -> Volume3:
    """Map foreground intensities through (own landmarks -> standard landmarks); background stays 0."""
    standard = lm[sequence]
    fg_mask = (v.data > 0) & v.valid
    if not fg_mask.any():
        return v
    own = volume_landmarks(v, lm.percentiles)
    out = v.data.astype(np.float64)
    out[fg_mask] = _piecewise_linear(out[fg_mask], own, standard)
    return Volume3(out.astype(np.float32), v.spacing, v.validity)


@dataclass(frozen=True)
class MinMaxParams:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DegenerateInputError(f"MinMax range is degenerate: lo={self.lo}, hi={self.hi}")

    def forward(self, v: Volume3) -> Volume3:
        # float64 so that inverse(forward(v)) is exact to well below float32 resolution
        x = (v.data.astype(np.float64) - self.lo) / (self.hi - self.lo)
        return Volume3(2.0 * x - 1.0, v.spacing, v.validity)

    def inverse(self, v: Volume3) -> Volume3:
        x = (v.data.astype(np.float64) + 1.0) / 2.0
        return Volume3(x * (self.hi - self.lo) + self.lo, v.spacing, v.validity)


def minmax_shift(inputs: Sequence[Volume3], target: Volume3 = None):
    """Scale all volumes by the joint input range to ``[-1, 1]``.

    The target (if given) uses the same parameters, so it may exceed 1.
    Returns ``(inputs, target, params)``.
    """
    if len(inputs) != 3:
        raise ParameterError(f"expected 3 input volumes, got {len(inputs)}")
    check_same_dims(*inputs, *([target] if target is not None else []))
    vals = [v.data[v.valid] for v in inputs]
    if not any(a.size for a in vals):
        raise DegenerateInputError("inputs have no valid voxel")
    lo = float(min(a.min() for a in vals if a.size))
    hi = float(max(a.max() for a in vals if a.size))
    params = MinMaxParams(lo, hi)
    out_target = params.forward(target) if target is not None else None
    return [params.forward(v) for v in inputs], out_target, params
