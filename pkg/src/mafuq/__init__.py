"""Multi-axis fusion uncertainty estimation for slice-wise 3D image translation."""

__version__ = "0.1.0"

from .errors import (DegenerateInputError, ExternalPredictorError, MafError, ParameterError,
                     ShapeError, VolumeIOError)
from .fusion import FusionResult, Method, fuse_ensemble, fuse_maf, fuse_mc_dropout
from .metrics import EvalCase, EvalRecord, RoiPair, build_rois, evaluate_cohort, kendall_tau, masked_mean, pearson
from .predictor import (PredictorBank, SlicePredictor, analytic_predictor, external_predictor,
                        predict_sliceset)
from .preprocess import MinMaxParams, NyulLandmarks, minmax_shift, nyul_apply, nyul_train
from .slicing import (SliceSet, SlicingPlan, SlicingPlane, build_25d_stack, canonical_maf_plan,
                      slice_volume, stack_slices)
from .volume import Axis, RigidRotation, Volume3, absdiff, rotate_resample, voxelwise_mean_var

__all__ = [
    "Axis", "DegenerateInputError", "EvalCase", "EvalRecord", "ExternalPredictorError", "FusionResult",
    "MafError", "Method", "MinMaxParams", "NyulLandmarks", "ParameterError", "PredictorBank",
    "RigidRotation", "RoiPair", "ShapeError", "SlicePredictor", "SliceSet", "SlicingPlan",
    "SlicingPlane", "Volume3", "VolumeIOError", "absdiff", "analytic_predictor", "build_25d_stack",
    "build_rois", "canonical_maf_plan", "evaluate_cohort", "external_predictor", "fuse_ensemble",
    "fuse_maf", "fuse_mc_dropout", "kendall_tau", "masked_mean", "minmax_shift", "nyul_apply",
    "nyul_train", "pearson", "predict_sliceset", "rotate_resample", "slice_volume", "stack_slices",
    "voxelwise_mean_var",
]
