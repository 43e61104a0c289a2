"""Acceptance suite: one test per primary criterion, each reporting PASS/FAIL."""

import itertools
import json
import math
import os
import random
import stat
import time
from fractions import Fraction

import numpy as np

from mafuq.cli import main
from mafuq.fusion import fuse_ensemble, fuse_maf, fuse_mc_dropout
from mafuq.metrics import kendall_tau, pearson
from mafuq.phantom import inscribed_sphere, synthetic_cohort
from mafuq.predictor import PredictorBank, analytic_predictor, external_predictor, predict_sliceset
from mafuq.preprocess import LANDMARK_PERCENTILES, minmax_shift, nyul_apply, nyul_train, volume_landmarks
from mafuq.slicing import PRINCIPAL_PLANES, SlicingPlan, canonical_maf_plan, slice_volume, stack_slices
from mafuq.volio import read_volume, sidecar_path, write_volume
from mafuq.volume import RigidRotation, Volume3, rotate_resample, voxelwise_mean_var

from conftest import ROUND_TRIP_REL_TOL
from test_metrics import kendall_brute, pearson_direct
from test_predictor import ECHO_SH
from test_preprocess import percentile_by_sort

# Frozen after simulating the 20-case cohort through the CLI (measured rho 0.958, tau 0.905).
E2E_MIN_PEARSON = 0.9
E2E_MAX_SECONDS = 60.0


def rel_l2_in_sphere(a, b):
    m = inscribed_sphere(b.dims) & a.valid
    return float(np.linalg.norm((a.data - b.data)[m]) / np.linalg.norm(b.data[m]))


def test_lossless_axis_aligned_round_trip(rng, criterion):
    failures = 0
    for _ in range(50):
        dims = tuple(int(n) for n in rng.integers(32, 65, 3))
        v = Volume3(rng.normal(size=dims).astype(np.float32))
        for plane in PRINCIPAL_PLANES:
            back = stack_slices(slice_volume(v, plane))
            if not (back.fully_valid and np.array_equal(back.data, v.data)):
                failures += 1
    criterion(failures == 0, f"50 volumes x 3 planes, {failures} not bit-identical")


def test_rotation_round_trip(phantom, criterion):
    errs = {}
    for axis in "xyz":
        r = rotate_resample(rotate_resample(phantom, RigidRotation(axis, 45.0)), RigidRotation(axis, -45.0))
        errs[axis] = rel_l2_in_sphere(r, phantom)
    c = Volume3.constant(np.float32(2.75), (40, 40, 40))
    const_ok = True
    for axis in "xyz":
        r = rotate_resample(rotate_resample(c, RigidRotation(axis, 45.0)), RigidRotation(axis, -45.0))
        const_ok &= bool(r.valid.any() and np.all(r.data[r.valid] == np.float32(2.75)))
    worst = max(errs.values())
    criterion(worst < ROUND_TRIP_REL_TOL and ROUND_TRIP_REL_TOL <= 0.02 and const_ok,
              f"max rel L2 {worst:.5f} < {ROUND_TRIP_REL_TOL}; constants exact: {const_ok}")


def test_variance_semantics(rng, criterion):
    # O(1) samples: 1e-12 absolute is below float64 resolution once the variance exceeds ~1e3
    dims = (3, 4, 5)
    samples = [rng.normal(size=dims) * 2.0 for _ in range(7)]
    samples[0][0, 0, 0:3] = (1.0, 0.5, -2.0)
    samples[1][0, 0, 0:3] = (2.0, 0.5, 4.0)
    samples[2][0, 0, 0:3] = (3.0, 0.5, 1.0)
    mean, var, count = voxelwise_mean_var([Volume3(s) for s in samples])
    worst = 0.0
    for idx in itertools.product(*(range(n) for n in dims)):
        xs = [Fraction(float(s[idx])) for s in samples]
        mu = sum(xs) / len(xs)
        pv = sum((x - mu) ** 2 for x in xs) / len(xs)
        worst = max(worst, abs(mean.data[idx] - float(mu)), abs(var.data[idx] - float(pv)))
    three = voxelwise_mean_var([Volume3.constant(x, (2, 2, 2)) for x in (1.0, 2.0, 3.0)])
    worst = max(worst, float(np.max(np.abs(three[1].data - 2.0 / 3.0))))
    same = Volume3(rng.normal(size=dims))
    zero_ok = bool(np.all(voxelwise_mean_var([same] * 5)[1].data == 0))
    perm_ok = True
    vols = [Volume3(s) for s in samples]
    for _ in range(10):
        perm = random.Random(int(rng.integers(1 << 30))).sample(vols, len(vols))
        m2, v2, _ = voxelwise_mean_var(perm)
        perm_ok &= bool(np.array_equal(m2.data, mean.data) and np.array_equal(v2.data, var.data))
    criterion(worst <= 1e-12 and zero_ok and perm_ok,
              f"max oracle deviation {worst:.2e}; identical->0: {zero_ok}; permutation exact: {perm_ok}")


def test_maf_identity_sanity(phantom, rng, criterion):
    ident = analytic_predictor("identity-center-channel")
    seqs = [Volume3(rng.normal(size=(20, 22, 24)).astype(np.float32)) for _ in range(3)]
    r = fuse_maf(ident, seqs, SlicingPlan(PRINCIPAL_PLANES))
    principal_ok = bool(np.array_equal(r.prediction.data, seqs[0].data) and np.all(r.uncertainty.data == 0))
    r9 = fuse_maf(ident, [phantom] * 3, canonical_maf_plan())
    s = inscribed_sphere(phantom.dims)
    mu = float(r9.uncertainty.data[s & r9.uncertainty.valid].mean())
    bound = ROUND_TRIP_REL_TOL**2 * float(np.mean(phantom.data[s].astype(np.float64) ** 2))
    criterion(principal_ok and mu < bound,
              f"principal exact: {principal_ok}; canonical mean uncertainty {mu:.3e} < bound {bound:.3e}")


def test_mc_dropout_statistics(phantom, criterion):
    sigma, m = 0.1, 9
    r = fuse_mc_dropout(analytic_predictor(f"additive-noise({sigma},0)"), [phantom] * 3)
    n = phantom.data.size
    expected = sigma**2 * (m - 1) / m
    se = math.sqrt(2 * sigma**4 * (m - 1) / m**2 / n)
    got = float(r.uncertainty.data.mean())
    z = (got - expected) / se
    criterion(r.m_samples == m and abs(z) < 3, f"mean variance {got:.7f} vs {expected:.7f}, z = {z:+.2f}")


def test_ensemble_exactness(criterion):
    bank = PredictorBank.from_specs(["affine(1,0)", "affine(1,2)"])
    r = fuse_ensemble(bank, [Volume3.constant(5.0, (16, 16, 16))] * 3)
    ok = bool(np.all(r.prediction.data == 6.0) and np.all(r.uncertainty.data == 1.0) and r.prediction.fully_valid)
    criterion(ok, "prediction == 6 and uncertainty == 1 on every voxel")


def test_correlation_oracles(rng, criterion):
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 100))
        x, y = rng.normal(size=n), rng.normal(size=n)
        worst = max(worst, abs(pearson(x, y) - pearson_direct(list(x), list(y))))
    kendall_ok = True
    for n in (2, 5, 17, 64, 150, 200):
        x = rng.integers(0, max(2, n // 5), n).astype(float)
        y = rng.integers(0, max(2, n // 4), n).astype(float)
        if len(set(x)) > 1 and len(set(y)) > 1:
            kendall_ok &= kendall_tau(x, y) == kendall_brute(list(x), list(y))
    x, y = rng.normal(size=100), rng.normal(size=100)
    mono_ok = kendall_tau(np.exp(x), np.arctan(y) * 5 + 1) == kendall_tau(x, y)
    affine_ok = abs(pearson(4 * x - 3, 0.5 * y + 9) - pearson(x, y)) < 1e-12
    criterion(worst <= 1e-12 and kendall_ok and mono_ok and affine_ok,
              f"pearson max dev {worst:.1e}; kendall exact: {kendall_ok}; "
              f"tau monotone-invariant: {mono_ok}; rho affine-invariant: {affine_ok}")


def test_end_to_end_synthetic_cohort(tmp_path, criterion):
    t0 = time.perf_counter()
    assert main(["phantom", "--out", str(tmp_path / "raw"), "--cases", "20", "--size", "64", "--seed", "0"]) == 0
    t_pre = time.perf_counter()
    assert main(["preprocess", "--cohort", str(tmp_path / "raw" / "cohort.json"), "--out", str(tmp_path / "pre")]) == 0
    cohort = json.loads((tmp_path / "pre" / "cohort.json").read_text())
    runs = []
    for i, case in enumerate(cohort["cases"]):
        out = tmp_path / "runs" / case["id"]
        assert main(["fuse", "--method", "mc-dropout", "--m", "9",
                     "--predictor", f"additive-noise({case['noise_sigma']},{i})",
                     "--case", str(tmp_path / "pre" / case["id"] / "case.json"), "--out", str(out)]) == 0
        runs.append(str(out))
    assert main(["eval", "--runs", *runs, "--out", str(tmp_path / "report")]) == 0
    elapsed = time.perf_counter() - t_pre
    total = time.perf_counter() - t0
    healthy = json.loads((tmp_path / "report" / "summary.json").read_text())["healthy"]
    ok = (healthy["n"] == 20 and healthy["pearson"] is not None and healthy["pearson"] >= E2E_MIN_PEARSON
          and healthy["kendall"] > 0 and elapsed < E2E_MAX_SECONDS)
    criterion(ok, f"rho_healthy {healthy['pearson']:.3f} (>= {E2E_MIN_PEARSON}), "
                  f"tau_healthy {healthy['kendall']:.3f} (> 0), pipeline {elapsed:.1f}s "
                  f"(< {E2E_MAX_SECONDS:.0f}s; {total:.1f}s with cohort generation)")


def test_format_fidelity(tmp_path, rng, criterion):
    v = Volume3(rng.normal(size=(9, 8, 7)).astype(np.float32), spacing=(0.9, 1.0, 1.2))
    nifti_ok = True
    for name in ("v.nii", "v.nii.gz"):
        write_volume(str(tmp_path / name), v)
        back = read_volume(str(tmp_path / name))
        # pixdim is a float32 header field
        spacing = tuple(float(np.float32(x)) for x in v.spacing)
        nifti_ok &= bool(np.array_equal(back.data, v.data) and back.spacing == spacing)
    a, b = str(tmp_path / "a.rvol"), str(tmp_path / "b.rvol")
    write_volume(a, v)
    write_volume(b, read_volume(a))
    rvol_ok = (open(a, "rb").read() == open(b, "rb").read()
               and open(sidecar_path(a)).read() == open(sidecar_path(b)).read())
    script = tmp_path / "echo.sh"
    script.write_text(ECHO_SH)
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    ext = external_predictor([str(script)], workdir=str(tmp_path / "work"))
    ident = analytic_predictor("identity-center-channel")
    seqs = [Volume3(rng.normal(size=(10, 11, 12)).astype(np.float32)) for _ in range(3)]
    ext_ok = all(np.array_equal(predict_sliceset(ext, seqs, p).images, predict_sliceset(ident, seqs, p).images)
                 for p in canonical_maf_plan())
    criterion(nifti_ok and rvol_ok and ext_ok,
              f"nifti value-identical: {nifti_ok}; rvol byte-identical: {rvol_ok}; "
              f"script predictor == identity on 9 planes: {ext_ok}")
    assert os.listdir(tmp_path / "work") == []


def test_preprocessing(rng, criterion):
    vs = [Volume3((rng.random((12, 12, 12)) * s + o).astype(np.float32)) for s, o in ((50, 10), (900, 100), (5, 3))]
    out, _, params = minmax_shift(vs)
    ends_ok = min(o.data.min() for o in out) == -1.0 and max(o.data.max() for o in out) == 1.0
    inv_dev = max(float(np.max(np.abs(params.inverse(o).data.astype(np.float64) - v.data) / np.abs(v.data)))
                  for v, o in zip(vs, out))

    cohort = synthetic_cohort(n_cases=4, size=32, seed=5)
    lm = nyul_train({"t1n": [c.t1n for c in cohort]})
    worst_pct = worst_fixed = 0.0
    for c in cohort:
        fg = c.t1n.data[c.t1n.data > 0]
        own = volume_landmarks(c.t1n)
        oracle = [percentile_by_sort(list(map(float, fg)), p) for p in LANDMARK_PERCENTILES]
        worst_pct = max(worst_pct, float(np.max(np.abs(own - oracle))))
        # a volume made of exactly its own landmark values maps onto the standard landmarks
        probe = Volume3(np.concatenate([fg, own]).astype(np.float64).reshape(-1, 1, 1))
        mapped = nyul_apply(probe, lm, "t1n").data.ravel()[-len(own):]
        probe_own = volume_landmarks(probe)
        slope = np.max(np.diff(lm["t1n"]) / np.diff(probe_own))
        worst_fixed = max(worst_fixed, float(np.max(np.abs(mapped - lm["t1n"]) - slope * np.abs(own - probe_own))))
    ok = ends_ok and inv_dev <= 1e-6 and worst_pct <= 1e-9 and worst_fixed <= 1.0
    criterion(ok, f"endpoints exact: {ends_ok}; inverse rel dev {inv_dev:.1e}; "
                  f"percentile oracle dev {worst_pct:.1e}; landmark fixed-point dev {worst_fixed:.2e}")
