"""MC-Dropout, Deep Ensemble and Multi-Axis Fusion uncertainty estimators.

All three produce M sample volumes in the original frame and reduce them
with :func:`~mafuq.volume.voxelwise_mean_var`: the prediction is the
voxel-wise sample mean and the uncertainty the population variance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence

from .errors import MafError, ParameterError
from .predictor import PredictorBank, SlicePredictor, predict_sliceset
from .slicing import AXIAL, SlicingPlan, SlicingPlane, canonical_maf_plan, stack_slices
from .volume import Volume3, check_same_dims, voxelwise_mean_var

log = logging.getLogger(__name__)

DEFAULT_M = 9


class Method(str, Enum):
    MC_DROPOUT = "mc-dropout"
    ENSEMBLE = "ensemble"
    MAF = "maf"


@dataclass(frozen=True, eq=False)
class FusionResult:
    prediction: Volume3
    uncertainty: Volume3
    contributions: Volume3
    method: Method
    m_samples: int


def _map(fn: Callable, items: Sequence, threads: int) -> List:
    # results keep input order, so reductions see the same sample list at any thread count
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _prefix(exc: Exception, where: str):
    exc.args = (f"{where}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]


def _reduce(samples: List[Volume3], method: Method, min_count: int) -> FusionResult:
    mean, var, count = voxelwise_mean_var(samples, min_count)
    return FusionResult(mean, var, count, method, len(samples))


def _check_inputs(seqs):
    if len(seqs) != 3:
        raise ParameterError(f"expected 3 input sequences, got {len(seqs)}")
    check_same_dims(*seqs)


def fuse_mc_dropout(p: SlicePredictor, seqs: Sequence[Volume3], plane: SlicingPlane = AXIAL,
                    seeds: Optional[Sequence[int]] = None, threads: int = 1) -> FusionResult:
    """One stochastic pass per seed on a single plane; mean and variance across passes."""
    if not p.stochastic:
        raise ParameterError(f"MC-Dropout needs a stochastic predictor, {p.name} is deterministic")
    seeds = list(range(1, DEFAULT_M + 1)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ParameterError(f"MC-Dropout needs at least 2 seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ParameterError(f"MC-Dropout seeds must be pairwise distinct: {seeds}")
    _check_inputs(seqs)

    def one(seed):
        log.debug("mc-dropout pass seed=%d plane=%s", seed, plane)
        return stack_slices(predict_sliceset(p, seqs, plane, seed))

    return _reduce(_map(one, seeds, threads), Method.MC_DROPOUT, 2)


def fuse_ensemble(bank: PredictorBank, seqs: Sequence[Volume3], plane: SlicingPlane = AXIAL,
                  threads: int = 1) -> FusionResult:
    """One pass per ensemble member on a single plane."""
    if len(bank) < 2:
        raise ParameterError(f"an ensemble needs at least 2 members, got {len(bank)}")
    _check_inputs(seqs)

    def one(member):
        try:
            return stack_slices(predict_sliceset(member, seqs, plane))
        except MafError as exc:
            _prefix(exc, f"ensemble member {member.name}")
            raise

    return _reduce(_map(one, bank.members, threads), Method.ENSEMBLE, 2)


def fuse_maf(p: SlicePredictor, seqs: Sequence[Volume3], plan: Optional[SlicingPlan] = None,
             threads: int = 1) -> FusionResult:
    """Multi-Axis Fusion with a single deterministic predictor.

    Every plane's prediction is mapped back to the original frame before
    fusion. Voxels lost to rotation are excluded from the statistics; voxels
    with fewer than 2 valid planes are invalid (for a one-plane plan the
    threshold is 1).
    """
    plan = canonical_maf_plan() if plan is None else plan
    if len(plan) == 0:
        raise ParameterError("MAF needs a non-empty slicing plan")
    if p.stochastic:
        raise ParameterError(f"MAF uses one deterministic model; {p.name} is stochastic")
    _check_inputs(seqs)

    def one(plane):
        try:
            return stack_slices(predict_sliceset(p, seqs, plane))
        except MafError as exc:
            _prefix(exc, f"plane {plane.name}")
            raise

    return _reduce(_map(one, list(plan), threads), Method.MAF, min(2, len(plan)))
