"""Slice predictors: analytic test doubles, ensembles and an external-process bridge.

A predictor maps a ``(9, a, b)`` 2.5D input stack to a single ``(a, b)``
slice. Batches are ``(n, 9, a, b)`` -> ``(n, a, b)``.

External predictor exchange format
----------------------------------
For each slice set a fresh request directory is created containing

* ``manifest.json``: ``{"num_slices", "width", "height", "channels": 9,
  "seed": int | null, "plane": str}``
* ``input.bin``: little-endian float32, slice-major, then channel, then
  row (y), then column (x).

The child must write ``output.bin`` with the same layout and one channel,
and exit 0. It may also write ``response.json`` with the keys
``num_slices``, ``width``, ``height`` and ``channels``; if present it is
validated against the request. Here ``width`` is the first in-plane axis of
the slice (see :class:`~mafuq.slicing.SliceSet`) and ``height`` the second.
"""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import shutil
import subprocess
import tempfile
import threading
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ExternalPredictorError, MafError, ParameterError, ShapeError
from .slicing import N_CHANNELS, SliceSet, SlicingPlane, slice_volume, stack_25d_all
from .volume import Volume3, check_same_dims

# index of sequence 0's centre slice in the sequence-major channel layout
CENTER_CHANNEL = 1
MAX_SEED = 2**64 - 1


def _check_seed(seed):
    if seed is None:
        return None
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


class SlicePredictor:
    """Base class. Subclasses override :meth:`predict` or :meth:`predict_batch`."""

    stochastic = False

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"

    def predict(self, stack: np.ndarray, seed: Optional[int] = None) -> np.ndarray:
        return self.predict_batch(np.asarray(stack)[None], seed)[0]

    def predict_batch(self, stacks: np.ndarray, seed: Optional[int] = None) -> np.ndarray:
        out = []
        for d, stack in enumerate(stacks):
            try:
                out.append(self.predict(stack, seed))
            except MafError as exc:
                exc.args = (f"predictor {self.name} failed on slice {d}: {exc}",) + exc.args[1:]
                raise
            except Exception as exc:
                raise MafError(f"predictor {self.name} failed on slice {d}: {exc}") from exc
        return np.stack(out)

    def run_batch(self, stacks: np.ndarray, seed: Optional[int] = None, plane: str = "") -> np.ndarray:
        """Validated batch call used by :func:`predict_sliceset`."""
        stacks = np.asarray(stacks, dtype=np.float32)
        if stacks.ndim != 4 or stacks.shape[1] != N_CHANNELS:
            raise ShapeError(f"predictor input must be (n, {N_CHANNELS}, a, b), got {stacks.shape}")
        seed = _check_seed(seed)
        if self.stochastic and seed is None:
            raise ParameterError(f"stochastic predictor {self.name} needs a sample seed")
        out = np.asarray(self._run(stacks, seed, plane), dtype=np.float32)
        expected = (stacks.shape[0],) + stacks.shape[2:]
        if out.shape != expected:
            raise ShapeError(f"predictor {self.name} returned shape {out.shape}, expected {expected}")
        return out

    def _run(self, stacks, seed, plane):
        return self.predict_batch(stacks, seed)


class IdentityPredictor(SlicePredictor):
    def __init__(self, name="identity-center-channel"):
        super().__init__(name)

    def predict_batch(self, stacks, seed=None):
        return np.array(stacks[:, CENTER_CHANNEL], dtype=np.float32)


class AffinePredictor(SlicePredictor):
    def __init__(self, a: float, b: float, name=None):
        super().__init__(name or f"affine({a:g},{b:g})")
        self.a, self.b = float(a), float(b)

    def predict_batch(self, stacks, seed=None):
        x = stacks[:, CENTER_CHANNEL].astype(np.float64)
        return (self.a * x + self.b).astype(np.float32)


class GaussianBlurPredictor(SlicePredictor):
    def __init__(self, sigma: float, name=None):
        super().__init__(name or f"gaussian-blur({sigma:g})")
        self.sigma = float(sigma)

    def predict(self, stack, seed=None):
        x = np.asarray(stack[CENTER_CHANNEL], dtype=np.float64)
        if self.sigma == 0:
            return x.astype(np.float32)
        return ndimage.gaussian_filter(x, self.sigma, mode="nearest").astype(np.float32)


class AdditiveNoisePredictor(SlicePredictor):
    """Centre channel plus i.i.d. Gaussian noise; stands in for a dropout-sampled model.

    The noise of a batch is a pure function of ``(base seed, sample seed)``.
    """

    stochastic = True

    def __init__(self, sigma: float, seed: int = 0, name=None):
        super().__init__(name or f"additive-noise({sigma:g},{seed})")
        self.sigma = float(sigma)
        self.seed = _check_seed(seed)

    def predict_batch(self, stacks, seed=None):
        rng = np.random.default_rng([self.seed, 0 if seed is None else seed])
        x = stacks[:, CENTER_CHANNEL].astype(np.float64)
        return (x + self.sigma * rng.standard_normal(x.shape)).astype(np.float32)


def _number(a):
    # ints stay exact so 64-bit seeds survive parsing
    try:
        return int(a)
    except (TypeError, ValueError):
        return float(a)


_ANALYTIC = re.compile(r"\s*([a-z-]+)\s*(?:\((.*)\))?\s*")


def analytic_predictor(spec, name: Optional[str] = None) -> SlicePredictor:
    """Build an analytic predictor from a spec string or tuple.

    Accepted forms: ``identity-center-channel``, ``affine(a,b)``,
    ``gaussian-blur(sigma)``, ``additive-noise(sigma_n,seed)``; tuples like
    ``("affine", 2, 1)`` work too.
    """
    if isinstance(spec, str):
        m = _ANALYTIC.fullmatch(spec)
        if not m:
            raise ParameterError(f"cannot parse predictor spec {spec!r}")
        kind = m.group(1)
        args = [a for a in (m.group(2) or "").split(",") if a.strip()]
    else:
        kind, *args = spec
    try:
        args = [_number(a) for a in args]
    except ValueError:
        raise ParameterError(f"non-numeric predictor arguments in {spec!r}") from None
    if not all(math.isfinite(a) for a in args):
        raise ParameterError(f"predictor arguments must be finite: {spec!r}")

    def need(n):
        if len(args) != n:
            raise ParameterError(f"{kind} takes {n} arguments, got {len(args)}")

    if kind in ("identity-center-channel", "identity"):
        need(0)
        return IdentityPredictor(name or "identity-center-channel")
    if kind == "affine":
        need(2)
        return AffinePredictor(args[0], args[1], name)
    if kind == "gaussian-blur":
        need(1)
        if args[0] < 0:
            raise ParameterError("gaussian-blur sigma must be >= 0")
        return GaussianBlurPredictor(args[0], name)
    if kind == "additive-noise":
        if len(args) == 1:
            args.append(0)
        need(2)
        if args[0] < 0:
            raise ParameterError("additive-noise sigma must be >= 0")
        return AdditiveNoisePredictor(args[0], int(args[1]), name)
    raise ParameterError(f"unknown analytic predictor {kind!r}")


class ExternalPredictor(SlicePredictor):
    """Runs a child process once per slice set using the exchange format above.

    ``command`` is a list or shell-like string; the token ``{request}`` is
    replaced by the request directory, otherwise the directory is appended
    as the last argument. Invocations on one instance are serialized.
    """

    def __init__(self, command, workdir=None, stochastic=False, name=None, timeout=None, keep_requests=False):
        argv = shlex.split(command) if isinstance(command, str) else [str(c) for c in command]
        if not argv:
            raise ParameterError("external predictor command is empty")
        if shutil.which(argv[0]) is None and not os.path.exists(argv[0]):
            raise ParameterError(f"external predictor command not found: {argv[0]}")
        super().__init__(name or f"external:{shlex.join(argv)}")
        self.argv = argv
        self.workdir = workdir
        self.stochastic = bool(stochastic)
        self.timeout = timeout
        self.keep_requests = keep_requests
        self._lock = threading.Lock()

    def predict_batch(self, stacks, seed=None):
        return self._run(np.asarray(stacks, dtype=np.float32), seed, "")

    def _run(self, stacks, seed, plane):
        with self._lock:
            return self._invoke(stacks, seed, plane)

    def _invoke(self, stacks, seed, plane):
        n, c, w, h = stacks.shape
        if self.workdir is not None:
            os.makedirs(self.workdir, exist_ok=True)
        req = tempfile.mkdtemp(prefix="request-", dir=self.workdir)
        ok = False
        try:
            manifest = {"num_slices": n, "width": w, "height": h, "channels": c,
                        "seed": seed, "plane": str(plane)}
            with open(os.path.join(req, "manifest.json"), "w") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
            # (n, c, x, y) -> (n, c, y, x): rows are y, columns are x
            np.ascontiguousarray(stacks.transpose(0, 1, 3, 2)).astype("<f4").tofile(os.path.join(req, "input.bin"))

            argv = [a.replace("{request}", req) for a in self.argv]
            if not any("{request}" in a for a in self.argv):
                argv.append(req)
            try:
                proc = subprocess.run(argv, cwd=req, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ExternalPredictorError(f"external predictor {self.name} could not run: {exc}") from exc
            diag = (proc.stderr or "") + (proc.stdout or "")
            if proc.returncode != 0:
                raise ExternalPredictorError(
                    f"external predictor exited with status {proc.returncode}", proc.returncode, diag)

            resp_path = os.path.join(req, "response.json")
            if os.path.exists(resp_path):
                try:
                    with open(resp_path) as f:
                        resp = json.load(f)
                    declared = {k: int(resp[k]) for k in ("num_slices", "width", "height", "channels")}
                except (ValueError, KeyError, TypeError) as exc:
                    raise ExternalPredictorError(f"malformed response header: {exc}", 0, diag) from exc
                expected = {"num_slices": n, "width": w, "height": h, "channels": 1}
                if declared != expected:
                    raise ExternalPredictorError(
                        f"dims mismatch: response declares {declared}, expected {expected}", 0, diag)

            out_path = os.path.join(req, "output.bin")
            if not os.path.exists(out_path):
                raise ExternalPredictorError("external predictor wrote no output.bin", 0, diag)
            raw = np.fromfile(out_path, dtype="<f4")
            if raw.size != n * w * h:
                raise ExternalPredictorError(
                    f"dims mismatch: output.bin holds {raw.size} floats, expected {n}x1x{h}x{w}={n * w * h}", 0, diag)
            out = raw.reshape(n, h, w).transpose(0, 2, 1).astype(np.float32)
            if not np.isfinite(out).all():
                raise ExternalPredictorError("external predictor returned non-finite values", 0, diag)
            ok = True
            return out
        finally:
            if ok or not self.keep_requests:
                shutil.rmtree(req, ignore_errors=True)


def external_predictor(command, workdir=None, **kwargs) -> ExternalPredictor:
    return ExternalPredictor(command, workdir, **kwargs)


class PredictorBank:
    """Ordered ensemble members ``f_1..f_M`` with distinct names."""

    def __init__(self, members: Sequence[SlicePredictor]):
        members = list(members)
        if not members:
            raise ParameterError("a predictor bank needs at least one member")
        names = [m.name for m in members]
        if len(set(names)) != len(names):
            raise ParameterError(f"predictor bank member names must be distinct: {names}")
        self.members: List[SlicePredictor] = members

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @classmethod
    def from_specs(cls, specs) -> "PredictorBank":
        """Bank from analytic specs; repeated specs get ``#k`` suffixes."""
        return cls(dedupe_names([analytic_predictor(spec) for spec in specs]))


def dedupe_names(predictors: Sequence[SlicePredictor]) -> List[SlicePredictor]:
    """Suffix repeated predictor names with ``#1``, ``#2``... (in place)."""
    names = [p.name for p in predictors]
    seen = {}
    for p in predictors:
        if names.count(p.name) > 1:
            seen[p.name] = seen.get(p.name, 0) + 1
            p.name = f"{p.name}#{seen[p.name]}"
    return list(predictors)


def predict_sliceset(p: SlicePredictor, seqs: Sequence[Volume3], plane: SlicingPlane,
                     seed: Optional[int] = None) -> SliceSet:
    """Translate every slice of ``plane``; returns ``S'`` in the plane's own frame.

    A predicted pixel is valid where the centre slice is valid in all three
    input sequences.
    """
    if len(seqs) != 3:
        raise ParameterError(f"expected 3 input sequences, got {len(seqs)}")
    check_same_dims(*seqs)
    sets = [slice_volume(v, plane) for v in seqs]
    stacks = stack_25d_all(sets)
    out = p.run_batch(stacks, seed, plane.name)
    validity = sets[0].validity & sets[1].validity & sets[2].validity
    out = np.where(validity, out, np.float32(0))
    return SliceSet(plane, out, validity, seqs[0].spacing)
