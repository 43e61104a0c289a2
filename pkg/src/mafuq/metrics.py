"""ROIs, MAE / mean-uncertainty scores and cohort-level correlation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .volume import Volume3, absdiff, check_same_dims

log = logging.getLogger(__name__)

ROIS = ("healthy", "tumor")


@dataclass(frozen=True, eq=False)
class RoiPair:
    tumor: np.ndarray
    healthy: np.ndarray

    def __post_init__(self):
        if self.tumor.shape != self.healthy.shape:
            raise ShapeError("tumor and healthy masks differ in shape")
        if (self.tumor & self.healthy).any():
            raise ParameterError("tumor and healthy ROIs overlap")

    def __getitem__(self, roi: str) -> np.ndarray:
        if roi not in ROIS:
            raise ParameterError(f"unknown ROI {roi!r}")
        return getattr(self, roi)


@dataclass(frozen=True)
class EvalRecord:
    case_id: str
    roi: str
    mae: float
    mu: float


def build_rois(seg: Volume3, brain_ref: Sequence[Volume3], brain_mask: Optional[np.ndarray] = None) -> RoiPair:
    """Tumor = label > 0; brain = any input > 0 (or ``brain_mask``); healthy = brain minus tumor."""
    check_same_dims(seg, *brain_ref)
    tumor = seg.data > 0
    if brain_mask is None:
        brain = np.zeros(seg.dims, dtype=bool)
        for v in brain_ref:
            brain |= v.data > 0
    else:
        brain = np.asarray(brain_mask, dtype=bool)
        if brain.shape != seg.dims:
            raise ShapeError(f"brain mask shape {brain.shape} != {seg.dims}")
    return RoiPair(tumor=tumor, healthy=brain & ~tumor)


def masked_mean(v: Volume3, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.dims:
        raise ShapeError(f"mask shape {mask.shape} != volume dims {v.dims}")
    sel = mask & v.valid
    n = int(sel.sum())
    if n == 0:
        raise DegenerateInputError("mask and validity have no voxel in common")
    return float(np.sum(v.data[sel], dtype=np.float64) / n)


def _as_pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"inputs must be 1D of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DegenerateInputError(f"need at least 2 points, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ParameterError("inputs must be finite")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _as_pair(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("pearson is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def kendall_tau(xs, ys) -> float:
    """Kendall tau-b by explicit O(n^2) pair counting."""
    x, y = _as_pair(xs, ys)
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    sx, sy = sx[iu], sy[iu]
    s = int(np.sum(sx * sy))
    n_x = int(np.count_nonzero(sx))  # pairs not tied in x
    n_y = int(np.count_nonzero(sy))
    if n_x == 0 or n_y == 0:
        raise DegenerateInputError("kendall tau is undefined when one input is all ties")
    return max(-1.0, min(1.0, s / math.sqrt(n_x * n_y)))


def ols_fit(xs, ys):
    """Least-squares line ``y = slope * x + intercept``."""
    x, y = _as_pair(xs, ys)
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateInputError("OLS fit is undefined for a constant regressor")
    slope = float(dx @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


@dataclass
class EvalCase:
    case_id: str
    prediction: Volume3
    ground_truth: Volume3
    uncertainty: Volume3
    rois: RoiPair


@dataclass
class CohortReport:
    method: str
    records: List[EvalRecord]
    summary: Dict[str, dict]
    skipped: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "roi", "mae", "mu"])
        for r in self.records:
            w.writerow([r.case_id, r.roi, repr(r.mae), repr(r.mu)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {"method": self.method}
        out.update(self.summary)
        out["skipped"] = self.skipped
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def scatter(self, roi: str):
        """Figure-style scatter data ``[(case_id, mae, mu), ...]`` for one ROI."""
        return [(r.case_id, r.mae, r.mu) for r in self.records if r.roi == roi]


def _roi_summary(records: List[EvalRecord]) -> dict:
    mae = [r.mae for r in records]
    mu = [r.mu for r in records]
    out = {"n": len(records), "pearson": None, "kendall": None, "ols_slope": None, "ols_intercept": None}
    if len(records) < 2:
        out["undefined"] = f"fewer than 2 usable cases ({len(records)})"
        return out
    reasons = []
    for key, fn in (("pearson", pearson), ("kendall", kendall_tau)):
        try:
            out[key] = fn(mae, mu)
        except DegenerateInputError as exc:
            reasons.append(f"{key}: {exc}")
    try:
        # MU is the quantity available at inference time, so MAE is regressed on it
        out["ols_slope"], out["ols_intercept"] = ols_fit(mu, mae)
    except DegenerateInputError as exc:
        reasons.append(f"ols: {exc}")
    if reasons:
        out["undefined"] = "; ".join(reasons)
    return out


def evaluate_cohort(cases: Sequence[EvalCase], method: str = "") -> CohortReport:
    """Per-case MAE/MU in each ROI, then per-ROI Pearson, Kendall and OLS fit.

    Cases whose ROI is empty (after validity) are skipped for that ROI and
    listed in ``skipped``.
    """
    records, skipped = [], []
    for case in cases:
        check_same_dims(case.prediction, case.ground_truth, case.uncertainty)
        err = absdiff(case.prediction, case.ground_truth)
        for roi in ROIS:
            mask = case.rois[roi]
            try:
                mae = masked_mean(err, mask)
                mu = masked_mean(case.uncertainty, mask)
            except DegenerateInputError as exc:
                log.warning("case %s, ROI %s skipped: %s", case.case_id, roi, exc)
                skipped.append({"case_id": case.case_id, "roi": roi, "reason": str(exc)})
                continue
            records.append(EvalRecord(case.case_id, roi, mae, mu))
    summary = {roi: _roi_summary([r for r in records if r.roi == roi]) for roi in ROIS}
    return CohortReport(method, records, summary, skipped)
