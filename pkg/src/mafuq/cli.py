"""Command-line driver: ``mafuq {phantom,preprocess,fuse,eval}``.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 external-predictor
failure. Errors are reported on stderr as one JSON line
``{"error": <kind>, "message": <text>}``.

``fuse`` reads an optional JSON config whose keys mirror the long flags
(``method``, ``m``, ``plan``, ``plane``, ``predictor``, ``seed``, ``threads``,
``inputs``, ``ground_truth``, ``segmentation``, ``brain_mask``, ``case``,
``format``, ``workdir``); flags override the file. The manifest written next
to the outputs uses the same keys, so ``mafuq fuse --config manifest.json
--out other/`` replays a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import (DegenerateInputError, ExternalPredictorError, MafError, ParameterError,
                     ShapeError, VolumeIOError)
from .fusion import DEFAULT_M, Method, fuse_ensemble, fuse_maf, fuse_mc_dropout
from .metrics import EvalCase, build_rois, evaluate_cohort
from .phantom import SEQUENCES, smooth_phantom, synthetic_cohort
from .predictor import PredictorBank, SlicePredictor, analytic_predictor, dedupe_names, external_predictor
from .preprocess import NyulLandmarks, minmax_shift, nyul_apply, nyul_train
from .slicing import SlicingPlan, SlicingPlane
from .volio import read_affine, read_volume, write_volume
from .volume import Volume3

log = logging.getLogger("mafuq")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_EXTERNAL = 0, 1, 2, 3


class ConfigError(ParameterError):
    pass


# --------------------------------------------------------------------- helpers

def _ext(path: str) -> str:
    p = path.lower()
    for suffix in (".nii.gz", ".nii", ".rvol"):
        if p.endswith(suffix):
            return suffix
    raise ConfigError(f"cannot infer volume format from {path}")


def _fmt_suffix(fmt: str) -> str:
    fmt = fmt.lower().lstrip(".")
    if fmt not in ("rvol", "nii", "nii.gz"):
        raise ConfigError(f"unknown volume format {fmt!r} (rvol, nii, nii.gz)")
    return "." + fmt


def _resolve(path: Optional[str], base: str) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise VolumeIOError(f"{path}: cannot read: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _write_json(path: str, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path: str, text: str):
    with open(path, "w", newline="") as f:
        f.write(text)


def _load_cohort(path: str) -> List[dict]:
    doc = _read_json(path)
    cases = doc.get("cases") if isinstance(doc, dict) else None
    if not isinstance(cases, list):
        raise ConfigError(f"{path}: expected an object with a 'cases' list")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, c in enumerate(cases):
        if not isinstance(c, dict) or "id" not in c:
            raise ConfigError(f"{path}: case {i} needs an 'id'")
        c = dict(c)
        for key in ("t1n", "t2w", "t2f", "t1c", "seg", "brain_mask"):
            if key in c and c[key] is not None:
                c[key] = _resolve(c[key], base)
        out.append(c)
    return out


def _predictor_from_spec(spec: str, workdir: Optional[str]) -> SlicePredictor:
    for prefix, stochastic in (("external-stochastic:", True), ("external:", False)):
        if spec.startswith(prefix):
            return external_predictor(spec[len(prefix):], workdir, stochastic=stochastic)
    return analytic_predictor(spec)


# --------------------------------------------------------------------- phantom

def cmd_phantom(args) -> int:
    suffix = _fmt_suffix(args.format)
    os.makedirs(args.out, exist_ok=True)
    if args.cases <= 0:
        path = os.path.join(args.out, "phantom" + suffix)
        write_volume(path, smooth_phantom(args.size))
        print(path)
        return EXIT_OK
    entries = []
    for case in synthetic_cohort(args.cases, args.size, args.seed, (args.sigma_min, args.sigma_max)):
        entry = {"id": case.case_id, "noise_sigma": case.noise_sigma}
        for key in ("t1n", "t2w", "t2f", "t1c", "seg"):
            rel = os.path.join(case.case_id, key + suffix)
            write_volume(os.path.join(args.out, rel), getattr(case, key),
                         dtype="int16" if key == "seg" and suffix != ".rvol" else "float32")
            entry[key] = rel
        entries.append(entry)
    path = os.path.join(args.out, "cohort.json")
    _write_json(path, {"cases": entries})
    print(path)
    return EXIT_OK


# ------------------------------------------------------------------ preprocess

def cmd_preprocess(args) -> int:
    cases = _load_cohort(args.cohort)
    if not cases:
        raise ConfigError(f"{args.cohort}: cohort is empty")
    for c in cases:
        for key in SEQUENCES:
            if not c.get(key):
                raise ConfigError(f"case {c['id']}: missing input sequence {key}")
    has_target = all(c.get("t1c") for c in cases)
    seqs = SEQUENCES + (("t1c",) if has_target else ())

    loaded = {c["id"]: {k: read_volume(c[k]) for k in seqs} for c in cases}

    if args.landmarks:
        with open(args.landmarks) as f:
            landmarks = NyulLandmarks.from_json(f.read())
    else:
        landmarks = nyul_train({k: [loaded[c["id"]][k] for c in cases] for k in seqs})

    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "landmarks.json"), landmarks.to_json())
    out_cases = []
    for c in cases:
        cid = c["id"]
        fmt = _fmt_suffix(args.format) if args.format else _ext(c["t1n"])
        vols = loaded[cid]
        affine = read_affine(c["t1n"])
        std = {k: nyul_apply(vols[k], landmarks, k) for k in seqs}
        inputs, target, params = minmax_shift([std[k] for k in SEQUENCES], std.get("t1c"))
        case_dir = os.path.join(args.out, cid)
        entry = {"id": cid, "minmax": {"lo": params.lo, "hi": params.hi}}
        for k, v in zip(SEQUENCES, inputs):
            entry[k] = os.path.join(cid, k + fmt)
            write_volume(os.path.join(args.out, entry[k]), v, affine)
        if target is not None:
            entry["t1c"] = os.path.join(cid, "t1c" + fmt)
            write_volume(os.path.join(args.out, entry["t1c"]), target, affine)
        # the shifted inputs no longer have a zero background, so keep the raw support
        if c.get("brain_mask"):
            brain = read_volume(c["brain_mask"]).data > 0
        else:
            brain = np.zeros(vols["t1n"].dims, dtype=bool)
            for k in SEQUENCES:
                brain |= vols[k].data > 0
        entry["brain_mask"] = os.path.join(cid, "brain_mask" + fmt)
        write_volume(os.path.join(args.out, entry["brain_mask"]), Volume3(brain.astype(np.float32), vols["t1n"].spacing),
                     affine, dtype="float32")
        if c.get("seg"):
            entry["seg"] = os.path.join(cid, "seg" + fmt)
            write_volume(os.path.join(args.out, entry["seg"]), read_volume(c["seg"]), read_affine(c["seg"]),
                         dtype="int16" if fmt != ".rvol" else "float32")
        for k, v in c.items():
            # carry extra metadata (e.g. noise_sigma) through
            entry.setdefault(k, v)
        os.makedirs(case_dir, exist_ok=True)
        _write_json(os.path.join(case_dir, "case.json"), {**entry, **{k: os.path.basename(entry[k])
                    for k in ("t1n", "t2w", "t2f", "t1c", "seg", "brain_mask") if k in entry}})
        out_cases.append(entry)
    _write_json(os.path.join(args.out, "cohort.json"), {"cases": out_cases, "landmarks": "landmarks.json"})
    print(os.path.join(args.out, "cohort.json"))
    return EXIT_OK


# ------------------------------------------------------------------------ fuse

FUSE_KEYS = ("method", "m", "plan", "plane", "predictor", "seed", "threads", "inputs", "ground_truth",
             "segmentation", "brain_mask", "case", "case_id", "format", "workdir", "minmax")


def _fuse_config(args) -> dict:
    cfg = {}
    if args.config:
        doc = _read_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        base = os.path.dirname(os.path.abspath(args.config))
        cfg = {k: doc[k] for k in FUSE_KEYS if k in doc}
        if "inputs" in cfg:
            cfg["inputs"] = [_resolve(p, base) for p in cfg["inputs"]]
        for k in ("ground_truth", "segmentation", "brain_mask", "case"):
            if cfg.get(k):
                cfg[k] = _resolve(cfg[k], base)
    for k in FUSE_KEYS:
        val = getattr(args, k, None)
        if val is not None:
            cfg[k] = val

    if cfg.get("case"):
        case = _read_json(cfg["case"])
        base = os.path.dirname(os.path.abspath(cfg["case"]))
        cfg.setdefault("inputs", [_resolve(case[k], base) for k in SEQUENCES])
        cfg.setdefault("case_id", case.get("id"))
        if case.get("minmax"):
            cfg.setdefault("minmax", case["minmax"])
        for key, ck in (("ground_truth", "t1c"), ("segmentation", "seg"), ("brain_mask", "brain_mask")):
            if case.get(ck):
                cfg.setdefault(key, _resolve(case[ck], base))
    return cfg


def _validate_fuse(cfg: dict) -> dict:
    try:
        method = Method(cfg.get("method"))
    except ValueError:
        raise ConfigError(f"method must be one of {[m.value for m in Method]}, got {cfg.get('method')!r}") from None
    inputs = cfg.get("inputs")
    if not inputs or len(inputs) != 3:
        raise ConfigError("inputs must list exactly 3 volumes (T1N T2W T2F)")
    preds = cfg.get("predictor") or []
    if isinstance(preds, str):
        preds = [preds]
    seeds = cfg.get("seed") or []
    if isinstance(seeds, int):
        seeds = [seeds]
    m = cfg.get("m")
    out = {"method": method.value, "inputs": list(inputs), "predictor": list(preds), "threads": int(cfg.get("threads") or 1)}

    if method is Method.MAF:
        plan = SlicingPlan.parse(cfg.get("plan") or "canonical")
        if m is not None and int(m) != len(plan):
            raise ConfigError(f"maf: m={m} but the plan has {len(plan)} planes")
        if len(preds) != 1:
            raise ConfigError(f"maf needs exactly one predictor, got {len(preds)}")
        out.update(m=len(plan), plan=",".join(plan.names()))
    else:
        plane = SlicingPlane.parse(cfg.get("plane") or "axial")
        out["plane"] = plane.name
        if method is Method.MC_DROPOUT:
            if len(preds) != 1:
                raise ConfigError(f"mc-dropout needs exactly one predictor, got {len(preds)}")
            m = int(m) if m is not None else (len(seeds) or DEFAULT_M)
            seeds = [int(s) for s in seeds] or list(range(1, m + 1))
            if len(seeds) != m:
                raise ConfigError(f"mc-dropout: m={m} but {len(seeds)} seeds given")
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"mc-dropout: duplicate seeds {seeds}")
            out.update(m=m, seed=seeds)
        else:
            m = int(m) if m is not None else len(preds)
            if len(preds) != m:
                raise ConfigError(f"ensemble: m={m} but {len(preds)} predictor specs given")
            if m < 2:
                raise ConfigError("ensemble needs at least 2 predictor specs")
            out["m"] = m
    for k in ("ground_truth", "segmentation", "brain_mask", "case_id", "workdir", "minmax"):
        if cfg.get(k):
            out[k] = cfg[k]
    out["format"] = _fmt_suffix(cfg["format"]).lstrip(".") if cfg.get("format") else _ext(inputs[0]).lstrip(".")
    return out


def cmd_fuse(args) -> int:
    cfg = _validate_fuse(_fuse_config(args))
    method = Method(cfg["method"])
    workdir = cfg.get("workdir")
    predictors = [_predictor_from_spec(s, workdir) for s in cfg["predictor"]]
    seqs = [read_volume(p) for p in cfg["inputs"]]
    affine = read_affine(cfg["inputs"][0])
    threads = max(1, cfg["threads"])

    if method is Method.MAF:
        result = fuse_maf(predictors[0], seqs, SlicingPlan.parse(cfg["plan"]), threads)
    elif method is Method.MC_DROPOUT:
        if not predictors[0].stochastic:
            raise ConfigError(f"mc-dropout needs a stochastic predictor, {predictors[0].name} is deterministic")
        result = fuse_mc_dropout(predictors[0], seqs, SlicingPlane.parse(cfg["plane"]), cfg["seed"], threads)
    else:
        result = fuse_ensemble(PredictorBank(dedupe_names(predictors)), seqs, SlicingPlane.parse(cfg["plane"]), threads)

    os.makedirs(args.out, exist_ok=True)
    suffix = "." + cfg["format"]
    outputs = {}
    for key in ("prediction", "uncertainty", "contributions"):
        outputs[key] = key + suffix
        write_volume(os.path.join(args.out, outputs[key]), getattr(result, key), affine)
    manifest = dict(cfg)
    manifest["inputs"] = [os.path.abspath(p) for p in cfg["inputs"]]
    for k in ("ground_truth", "segmentation", "brain_mask"):
        if k in manifest:
            manifest[k] = os.path.abspath(manifest[k])
    manifest.update(
        outputs=outputs,
        predictor_identity=[p.name for p in predictors],
        min_count=min(2, result.m_samples),
        software={"name": "mafuq", "version": __version__},
    )
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    print(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


# ------------------------------------------------------------------------ eval

def _eval_cases_from_runs(run_dirs) -> List[dict]:
    cases = []
    for d in run_dirs:
        man = _read_json(os.path.join(d, "manifest.json"))
        missing = [k for k in ("ground_truth", "segmentation") if not man.get(k)]
        if missing:
            raise ConfigError(f"run {d}: manifest lacks {', '.join(missing)}")
        outs = man["outputs"]
        cases.append({
            "id": man.get("case_id") or os.path.basename(os.path.normpath(d)),
            "method": man.get("method"),
            "prediction": os.path.join(d, outs["prediction"]),
            "uncertainty": os.path.join(d, outs["uncertainty"]),
            "contributions": os.path.join(d, outs["contributions"]),
            "min_count": man.get("min_count", 2),
            "ground_truth": man["ground_truth"],
            "segmentation": man["segmentation"],
            "brain_mask": man.get("brain_mask"),
            "inputs": man["inputs"],
        })
    return cases


def _eval_cases_from_file(path) -> List[dict]:
    doc = _read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    cases = []
    for c in doc.get("cases", []):
        c = dict(c)
        for k in ("prediction", "uncertainty", "contributions", "ground_truth", "segmentation", "brain_mask"):
            if c.get(k):
                c[k] = _resolve(c[k], base)
        c["inputs"] = [_resolve(p, base) for p in c.get("inputs", [])]
        c.setdefault("method", doc.get("method"))
        cases.append(c)
    return cases


def cmd_eval(args) -> int:
    cases = _eval_cases_from_runs(args.runs) if args.runs else []
    if args.cohort:
        cases += _eval_cases_from_file(args.cohort)
    if not cases:
        raise ConfigError("eval needs at least one case (--runs or --cohort)")
    methods = sorted({c.get("method") or "unknown" for c in cases})
    method = methods[0] if len(methods) == 1 else "mixed"

    eval_cases = []
    for c in cases:
        for k in ("prediction", "uncertainty", "ground_truth", "segmentation"):
            if not c.get(k):
                raise ConfigError(f"case {c.get('id')}: missing {k}")
        pred = read_volume(c["prediction"])
        unc = read_volume(c["uncertainty"])
        if c.get("contributions"):
            # files carry no validity; rebuild it from the per-voxel sample count
            ok = read_volume(c["contributions"]).data >= c.get("min_count", 2)
            pred = Volume3(pred.data, pred.spacing, ok)
            unc = Volume3(unc.data, unc.spacing, ok)
        seg = read_volume(c["segmentation"])
        refs = [read_volume(p) for p in c.get("inputs", [])]
        brain = read_volume(c["brain_mask"]).data > 0 if c.get("brain_mask") else None
        if brain is None and len(refs) != 3:
            raise ConfigError(f"case {c.get('id')}: need 3 input volumes or a brain mask to build ROIs")
        rois = build_rois(seg, refs or [seg], brain)
        eval_cases.append(EvalCase(str(c["id"]), pred, read_volume(c["ground_truth"]), unc, rois))

    report = evaluate_cohort(eval_cases, method)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "records.csv"), report.to_csv())
    _write_text(os.path.join(args.out, "summary.json"), report.to_json())
    for roi, s in report.summary.items():
        print(f"{roi}: n={s['n']} pearson={s['pearson']} kendall={s['kendall']}")
    return EXIT_OK


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mafuq", description="Multi-axis fusion uncertainty for slice-wise volume translation.")
    parser.add_argument("--version", action="version", version=f"mafuq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write the smooth phantom or a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cases", type=int, default=0, help="number of synthetic cases (0: single smooth phantom)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-min", type=float, default=0.02)
    p.add_argument("--sigma-max", type=float, default=0.3)
    p.add_argument("--format", default="rvol")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="Nyul standardization, MinMax and range shift for a cohort")
    p.add_argument("--cohort", required=True, help="cohort JSON with per-case t1n/t2w/t2f[/t1c/seg] paths")
    p.add_argument("--landmarks", help="apply these landmarks instead of training on the cohort")
    p.add_argument("--format", help="output format (default: same as inputs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fuse", help="run one uncertainty estimator on one case")
    p.add_argument("--config", help="JSON config (or a previous run manifest)")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--m", type=int)
    p.add_argument("--plan", help="maf plan: canonical, principal, or comma-separated planes like axial,coronal@x+45")
    p.add_argument("--plane", help="slicing plane for mc-dropout / ensemble (default axial)")
    p.add_argument("--predictor", action="append",
                   help="analytic spec (e.g. 'affine(1,0)') or 'external:CMD' / 'external-stochastic:CMD'; repeat for ensembles")
    p.add_argument("--seed", type=int, action="append", help="MC-Dropout sample seed; repeat m times")
    p.add_argument("--threads", type=int)
    p.add_argument("--inputs", nargs=3, metavar=("T1N", "T2W", "T2F"))
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--segmentation")
    p.add_argument("--brain-mask", dest="brain_mask")
    p.add_argument("--case", help="case.json written by preprocess")
    p.add_argument("--case-id", dest="case_id")
    p.add_argument("--format")
    p.add_argument("--workdir", help="where external predictor request directories are created")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="MAE vs mean-uncertainty correlation over a cohort")
    p.add_argument("--runs", nargs="*", help="fuse output directories")
    p.add_argument("--cohort", help="JSON listing prediction/uncertainty/ground_truth/segmentation per case")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExternalPredictorError as exc:
        return _fail("external-predictor", exc, EXIT_EXTERNAL)
    except (VolumeIOError, OSError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (ParameterError, ShapeError, DegenerateInputError, MafError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
