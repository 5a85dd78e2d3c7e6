"""Command-line entry point: ``rankbench <subcommand> ...``.

Every subcommand writes one JSON report (with an embedded run manifest) and,
when ``--csv`` is given, a flat table ready for plotting. Exit codes: 0 ok,
1 usage error, 2 data error, 3 numerical error.
"""

import argparse
import csv
import dataclasses
import difflib
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, dataio, leakage, matching, metrics, models, protocols, stats, synth
from .errors import DataError, RankbenchError, UsageError

SUBCOMMANDS = ("eval", "decompose", "kshot", "moa", "leakage", "biomarker", "concordance", "synth")
DEFAULT_PCA = {"rna": 550, "mut": 200}
# flags that name outputs or plumbing and stay out of the resolved config
_NOT_CONFIG = {"command", "config", "report", "csv", "threads", "out"}


class _ArgError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message, self)


# ---------------------------------------------------------------- json / manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    """UTC timestamp; SOURCE_DATE_EPOCH pins it for reproducible reports."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


class _Run:
    def __init__(self, args):
        self.args = args
        self.started = _now()
        self.inputs = {}

    def input(self, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise DataError(f"file not found: {path}")
        self.inputs[str(path)] = _sha256(path)
        return path

    def manifest(self, seeds):
        config = {k: v for k, v in vars(self.args).items() if k not in _NOT_CONFIG}
        return {
            "subcommand": self.args.command,
            "config": _jsonable(config),
            "inputs": dict(sorted(self.inputs.items())),
            "version": __version__,
            "seeds": _jsonable(seeds),
            "started": self.started,
            "finished": _now(),
        }

    def finish(self, result, seeds=None, rows=None, columns=None):
        report = {"manifest": self.manifest(seeds or {}), "result": _jsonable(result)}
        text = json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"
        if self.args.report:
            Path(self.args.report).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        if getattr(self.args, "csv", None) and rows is not None:
            with open(self.args.csv, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(columns)
                for r in rows:
                    w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
        return report


# ---------------------------------------------------------------- argument helpers


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text):
    """``lo:hi:step`` or a comma list."""
    if ":" in text:
        try:
            lo, hi, step = (float(x) for x in text.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid must be lo:hi:step, got {text!r}") from None
        if step <= 0 or hi < lo:
            raise argparse.ArgumentTypeError("grid needs step > 0 and hi >= lo")
        n = int(math.floor((hi - lo) / step + 1e-9))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return _floats(text)


def _common(p, seed=True):
    p.add_argument("--config", help="JSON file of defaults; flags override it")
    p.add_argument("--report", help="write the JSON report here (default: stdout)")
    p.add_argument("--csv", help="write a plot-ready CSV table here")
    p.add_argument("--threads", type=int, help="worker threads (default: $RANKBENCH_THREADS or all cores)")
    if seed:
        p.add_argument("--seed", type=int, default=42)


def _response_args(p, flag="--responses", required=True):
    p.add_argument(flag, required=required, help="response CSV")
    p.add_argument("--col-drug", default="drug_id")
    p.add_argument("--col-cell", default="cell_id")
    p.add_argument("--col-value", default="value")


def _model_args(p):
    p.add_argument("--cells", action="append", required=True, metavar="[NAME=]PATH",
                   help="cell feature CSV; repeat for several modalities")
    p.add_argument("--pca", action="append", default=[], metavar="NAME=K", help="PCA dims for a named modality")
    p.add_argument("--pca-rna", type=int, default=DEFAULT_PCA["rna"])
    p.add_argument("--pca-mut", type=int, default=DEFAULT_PCA["mut"])
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--scheme", default="drug-blind", choices=["drug-blind", "cell-blind", "scaffold", "mixed"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--scaffold", help="scaffold CSV (drug_id,scaffold_id)")
    p.add_argument("--min-obs", type=int, default=5)
    p.add_argument("--zero-variance-policy", default="zero", choices=list(metrics.ZERO_VARIANCE_POLICIES))


def build_parser():
    parser = _Parser(prog="rankbench", description="Drug-response evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"rankbench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("eval", help="cross-validated ridge evaluation")
    _common(p)
    _response_args(p)
    _model_args(p)
    p.add_argument("--drug-features", default="none", help="none | <path> | moa-onehot | random:<dim>:<seed>")
    p.add_argument("--pca-drug", type=int)
    p.add_argument("--targets", default="raw", choices=["raw", "zscore"])
    p.add_argument("--moa", help="MoA CSV (drug_id,moa_class)")
    p.add_argument("--moa-weight-grid", type=_floats, help="run MoA-weighted training over this grid")
    p.add_argument("--seed-sweep", type=int, metavar="N", help="also report pooled per-drug r over N fold seeds")

    p = sub.add_parser("decompose", help="global vs per-drug r and the covariance decomposition")
    _common(p, seed=False)
    _response_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--predictions", help="prediction CSV (drug_id,cell_id,predicted)")
    g.add_argument("--predictor", choices=["drug-mean", "cell-mean"], help="score a reference predictor fitted on the responses")
    p.add_argument("--min-obs", type=int, default=5)
    p.add_argument("--zero-variance-policy", default="zero", choices=list(metrics.ZERO_VARIANCE_POLICIES))

    p = sub.add_parser("kshot", help="K-shot profile matching curve")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k-list", type=_ints, default=list(matching.DEFAULT_K_LIST))
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--grid", type=_grid, default=list(matching.DEFAULT_GRID))
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--inner-trials", type=int, default=1)
    p.add_argument("--min-obs", type=int, default=5)
    p.add_argument("--min-overlap", type=int, default=2)
    p.add_argument("--control", choices=["none", "permuted"], default="none")
    p.add_argument("--control-k", type=int, default=50)
    p.add_argument("--raw-blend", action="store_true", help="blend without per-drug standardisation")

    p = sub.add_parser("moa", help="MoA one-hot, weighted and within-class experiments")
    _common(p)
    _response_args(p)
    _model_args(p)
    p.add_argument("--moa", required=True)
    p.add_argument("--mode", required=True, choices=["onehot", "weighted", "within"])
    p.add_argument("--class", dest="moa_class", help="restrict to one MoA class")
    p.add_argument("--permute-seed", type=int, help="add a permuted-MoA control with this seed")
    p.add_argument("--moa-weight-grid", type=_floats, default=list(protocols.DEFAULT_WEIGHT_GRID))

    p = sub.add_parser("leakage", help="checkpoint-snooping and best-fold inflation audit")
    _common(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--noise", type=float, help="noise sd for the synthetic noisy-leakage preset")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--responses", help="use supplied data instead of the synthetic preset")
    p.add_argument("--cells", help="cell feature CSV (with --responses)")
    p.add_argument("--drug-features", help="drug feature CSV (with --responses)")

    p = sub.add_parser("biomarker", help="mutant vs wild-type response test for one drug")
    _common(p, seed=False)
    _response_args(p)
    p.add_argument("--mutations", required=True, help="CSV cell_id,status (0/1)")
    p.add_argument("--drug", required=True)
    p.add_argument("--alternative", default="less", choices=list(stats.ALTERNATIVES))

    p = sub.add_parser("concordance", help="replicate or within-class profile concordance")
    _common(p, seed=False)
    _response_args(p)
    p.add_argument("--mode", required=True, choices=["replicate", "profile"])
    p.add_argument("--replicate", help="second assay response CSV (replicate mode)")
    p.add_argument("--anchors", help="comma list of drug ids or a file with one id per line (replicate mode)")
    p.add_argument("--moa", help="MoA CSV (profile mode)")
    p.add_argument("--class", dest="moa_class", help="class label (profile mode; default all classes)")
    p.add_argument("--min-obs", type=int, default=5)

    p = sub.add_parser("synth", help="write a synthetic dataset with known structure")
    _common(p)
    p.add_argument("--preset", default="dominance", choices=sorted(synth.PRESETS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE", help="override a generator field")
    return parser


# ---------------------------------------------------------------- loading


def _load_response(args, flag="responses", run=None):
    path = getattr(args, flag)
    run.input(path)
    cols = {"drug": args.col_drug, "cell": args.col_cell, "value": args.col_value}
    return dataio.load_response_table(path, cols)


def _load_cells(args, run):
    mats = []
    for spec in args.cells:
        name, _, path = spec.rpartition("=") if "=" in spec else ("", "", spec)
        fm = dataio.load_feature_matrix(run.input(path), "cell")
        mats.append(fm.with_prefix(name) if name else fm)
    return mats[0] if len(mats) == 1 else dataio.FeatureMatrix.hstack(mats)


def _pipeline(args, cell_fm):
    named = {}
    for item in args.pca:
        name, _, k = item.partition("=")
        try:
            named[name] = int(k)
        except ValueError:
            raise UsageError(f"--pca expects NAME=K, got {item!r}") from None
    mods = cell_fm.modalities
    if "" in mods and len(mods) > 1:
        raise UsageError("mix of named and unnamed cell feature files; name every --cells source")
    if not mods or mods == [""]:
        if named:
            raise UsageError("--pca needs named modalities (--cells NAME=PATH)")
        return ()
    defaults = {"rna": args.pca_rna, "mut": args.pca_mut}
    unknown = set(named) - set(mods)
    if unknown:
        raise UsageError(f"--pca names unknown modalities {sorted(unknown)}; have {list(mods)}")
    return tuple(protocols.ModalitySpec(m, named.get(m, defaults.get(m))) for m in mods)


def _cv_config(args, cell_fm, **extra):
    return protocols.CvConfig(
        scheme=args.scheme.replace("-", "_"),
        k=args.k,
        seed=args.seed,
        cell_pipeline=_pipeline(args, cell_fm),
        standardize=args.standardize,
        alpha=args.alpha,
        min_obs=args.min_obs,
        zero_variance_policy=args.zero_variance_policy,
        threads=args.threads,
        **extra,
    )


def _dataset(args, run, drug_fm=None, moa=None):
    response = _load_response(args, run=run)
    cell_fm = _load_cells(args, run)
    scaffold = dataio.load_scaffold_map(run.input(args.scaffold)) if args.scaffold else None
    if args.scheme == "scaffold" and scaffold is None:
        raise UsageError("--scheme scaffold needs --scaffold")
    return dataio.align(response, cell_fm, drug_fm, moa, scaffold), cell_fm


def _per_drug_rows(report):
    return [[d, r] for d, r in sorted(report.per_drug_values.items())]


# ---------------------------------------------------------------- subcommands


def cmd_eval(args, run):
    moa = dataio.load_moa_map(run.input(args.moa)) if args.moa else None
    mode, extra, drug_fm = args.drug_features, {}, None
    if mode == "none":
        extra["drug_feature_mode"] = "none"
    elif mode == "moa-onehot":
        if moa is None:
            raise UsageError("--drug-features moa-onehot needs --moa")
        extra["drug_feature_mode"] = "moa_onehot"
    elif mode.startswith("random:"):
        parts = mode.split(":")
        if len(parts) != 3:
            raise UsageError("random drug features are given as random:<dim>:<seed>")
        try:
            dim, rseed = int(parts[1]), int(parts[2])
        except ValueError:
            raise UsageError("random:<dim>:<seed> needs integers") from None
        extra.update(drug_feature_mode="random_vector", random_dim=dim, random_seed=rseed)
    else:
        drug_fm = dataio.load_feature_matrix(run.input(mode), "drug")
        extra.update(drug_feature_mode="matrix", drug_pca=args.pca_drug)
    if args.pca_drug is not None and extra["drug_feature_mode"] != "matrix":
        raise UsageError("--pca-drug applies only to a drug feature matrix")
    if args.moa_weight_grid and moa is None:
        raise UsageError("--moa-weight-grid needs --moa")
    data, cell_fm = _dataset(args, run, drug_fm, moa)
    config = _cv_config(args, cell_fm, target_mode=args.targets, **extra)
    result = {"alignment": data.report}
    if args.moa_weight_grid:
        res = protocols.run_moa_weighted(data, moa, args.moa_weight_grid, config)
        result["cv"] = res.result.to_dict()
        result["uniform"] = res.uniform.to_dict()
        result["selected_weights"] = res.selected_weights
        result["per_class"] = res.per_class
        cv = res.result
    else:
        cv = protocols.run_cv(data, config)
        result["cv"] = cv.to_dict()
    if args.seed_sweep:
        result["seed_sensitivity"] = protocols.seed_sensitivity(data, config, range(args.seed_sweep))
    run.finish(result, {"fold_seed": args.seed}, _per_drug_rows(cv.report), ["drug_id", "per_drug_r"])


def cmd_decompose(args, run):
    truth = _load_response(args, run=run)
    if args.predictions:
        pred = dataio.load_prediction_table(run.input(args.predictions))
    elif args.predictor == "drug-mean":
        pred = models.drug_mean_predictor(truth).predict_table(truth)
    else:
        pred = models.cell_mean_predictor(truth).predict_table(truth)
    report = metrics.per_drug_r(pred, truth, args.min_obs, args.zero_variance_policy)
    decomposition = metrics.decompose_global_r(pred, truth)
    run.finish({"metrics": report, "decomposition": decomposition}, {}, _per_drug_rows(report), ["drug_id", "per_drug_r"])


def cmd_kshot(args, run):
    train = dataio.load_response_table(run.input(args.train))
    test = dataio.load_response_table(run.input(args.test))
    kw = dict(N=args.n, grid=args.grid, seed=args.seed, min_obs=args.min_obs, min_overlap=args.min_overlap,
              inner_trials=args.inner_trials, standardize=not args.raw_blend, threads=args.threads)
    curve = matching.kshot_curve(train, test, args.k_list, args.trials, **kw)
    result = {"curve": curve.to_dict()}
    rows = [[p.K, "matched", p.selected_w, p.per_drug_r_mean, p.per_drug_r_sd, p.n_drugs, p.n_skipped, p.n_fallback_cells]
            for _, p in sorted(curve.points.items())]
    if args.control == "permuted":
        K = args.control_k
        w = curve.points[K].selected_w if K in curve.points else None
        point, donors = matching.permuted_pairing_control(train, test, K, w=w, trials_per_drug=args.trials, **kw)
        result["control"] = {"point": dataclasses.asdict(point), "donors": donors}
        rows.append([K, "permuted", point.selected_w, point.per_drug_r_mean, point.per_drug_r_sd, point.n_drugs,
                     point.n_skipped, point.n_fallback_cells])
    cols = ["K", "kind", "selected_w", "per_drug_r_mean", "per_drug_r_sd", "n_drugs", "n_skipped", "n_fallback_cells"]
    run.finish(result, {"seed": args.seed}, rows, cols)


def cmd_moa(args, run):
    moa = dataio.load_moa_map(run.input(args.moa))
    data, cell_fm = _dataset(args, run, None, moa)
    moa = data.moa
    if moa is None:
        raise DataError("MoA map shares no drugs with the responses")
    classes = [args.moa_class] if args.moa_class else [c for c, n in sorted(moa.class_sizes().items()) if n >= 2]
    if args.moa_class and args.moa_class not in moa.classes:
        hint = difflib.get_close_matches(args.moa_class, moa.classes, n=1)
        raise UsageError(f"unknown class {args.moa_class!r}" + (f"; did you mean {hint[0]!r}?" if hint else ""))
    config = _cv_config(args, cell_fm)
    base = protocols.run_cv(data, config)
    result = {"alignment": data.report, "baseline": base.to_dict()}
    rows, cols = [], ["class", "n_drugs", "baseline", "condition", "delta"]

    def bars(res):
        for c in classes:
            b, v = base.class_mean(moa.members(c)), res.class_mean(moa.members(c))
            rows.append([c, len(moa.members(c)), b, v, None if b is None or v is None else v - b])

    if args.mode == "onehot":
        oh = protocols.run_cv(data, dataclasses.replace(config, drug_feature_mode="moa_onehot"), moa=moa)
        result["onehot"] = oh.to_dict()
        result["delta_per_drug_r"] = oh.report.per_drug_r_mean - base.report.per_drug_r_mean
        result["delta_global_r"] = oh.report.global_r - base.report.global_r
        bars(oh)
    elif args.mode == "weighted":
        res = protocols.run_moa_weighted(data, moa, args.moa_weight_grid, config, classes)
        result["weighted"] = res.result.to_dict()
        result["selected_weights"] = res.selected_weights
        result["per_class"] = res.per_class
        result["uncovered_drugs"] = res.uncovered_drugs
        bars(res.result)
    else:
        within = {}
        for c in classes:
            r = protocols.run_within_moa_loo(data, c, moa, args.alpha, config)
            b = base.class_mean(moa.members(c))
            within[c] = {"within": r.report, "all_drug": b, "delta": r.report.per_drug_r_mean - b if b is not None else None}
            rows.append([c, len(moa.members(c)), b, r.report.per_drug_r_mean, within[c]["delta"]])
        result["within"] = within
    seeds = {"fold_seed": args.seed}
    if args.permute_seed is not None:
        pm = protocols.permute_moa(moa, args.permute_seed)
        if args.mode == "onehot":
            perm = protocols.run_cv(data, dataclasses.replace(config, drug_feature_mode="moa_onehot"), moa=pm)
            result["permuted"] = perm.to_dict()
        elif args.mode == "weighted":
            perm = protocols.run_moa_weighted(data, pm, args.moa_weight_grid, config, [c for c in classes if c in pm.classes])
            result["permuted"] = perm.result.to_dict()
        else:
            result["permuted"] = {
                c: protocols.run_within_moa_loo(data, c, pm, args.alpha, config).report
                for c in classes if len(pm.members(c)) >= 2
            }
        seeds["permute_seed"] = args.permute_seed
    run.finish(result, seeds, rows, cols)


def cmd_leakage(args, run):
    if args.responses:
        if not args.cells:
            raise UsageError("--responses needs --cells")
        if args.noise is not None:
            raise UsageError("--noise applies only to the synthetic preset")
        response = dataio.load_response_table(run.input(args.responses))
        cell_fm = dataio.load_feature_matrix(run.input(args.cells), "cell")
        drug_fm = dataio.load_feature_matrix(run.input(args.drug_features), "drug") if args.drug_features else None
        data = dataio.align(response, cell_fm, drug_fm)
    else:
        if args.cells or args.drug_features:
            raise UsageError("--cells/--drug-features need --responses")
        over = {"seed": args.seed}
        if args.noise is not None:
            over["sigma_noise"] = args.noise
        data = synth.generate(synth.preset("noisy-leakage", **over))
    rep = leakage.simulate_leakage(data, args.folds, args.epochs, args.lr, args.alpha, args.seed, args.val_fraction, args.threads)
    rows = [
        [i + 1, f["epochs"]["validation_max"], f["epochs"]["test_max"], f["global_r"]["validation_max"],
         f["global_r"]["test_max"], f["global_r"]["last"], f["per_drug_r"]["validation_max"], f["per_drug_r"]["test_max"]]
        for i, f in enumerate(rep.per_fold)
    ]
    cols = ["fold", "epoch_fair", "epoch_snooped", "global_r_fair", "global_r_snooped", "global_r_last",
            "per_drug_r_fair", "per_drug_r_snooped"]
    run.finish(rep, {"seed": args.seed}, rows, cols)


def cmd_biomarker(args, run):
    truth = _load_response(args, run=run)
    status = dataio.load_mutation_status(run.input(args.mutations))
    res, d, sizes = stats.biomarker_stratify(truth, status, args.drug, args.alternative)
    run.finish({"test": res, "cohens_d": d, "group_sizes": sizes}, {},
               [[args.drug, res.statistic, res.p_value, d, sizes["mutant"], sizes["wild_type"]]],
               ["drug_id", "U", "p_value", "cohens_d", "n_mutant", "n_wild_type"])


def cmd_concordance(args, run):
    truth = _load_response(args, run=run)
    if args.mode == "replicate":
        if not args.replicate or not args.anchors:
            raise UsageError("replicate mode needs --replicate and --anchors")
        other = dataio.load_response_table(run.input(args.replicate))
        if os.path.exists(args.anchors):
            run.input(args.anchors)
            anchors = [x.strip() for x in Path(args.anchors).read_text(encoding="utf-8").splitlines() if x.strip()]
        else:
            anchors = [x.strip() for x in args.anchors.split(",") if x.strip()]
        rep = metrics.replicate_concordance(truth, other, anchors, args.min_obs)
        run.finish({"replicate": rep}, {}, _per_drug_rows(rep), ["drug_id", "replicate_r"])
        return
    if not args.moa:
        raise UsageError("profile mode needs --moa")
    if args.replicate or args.anchors:
        raise UsageError("--replicate/--anchors apply to replicate mode only")
    moa = dataio.load_moa_map(run.input(args.moa))
    classes = [args.moa_class] if args.moa_class else moa.classes
    out, rows = {}, []
    for c in classes:
        try:
            m, sd, n = metrics.profile_concordance(truth, moa, c, args.min_obs)
        except DataError as e:
            if args.moa_class:
                raise
            out[c] = {"skipped": str(e)}
            continue
        out[c] = {"mean": m, "sd": sd, "n_pairs": n}
        rows.append([c, m, sd, n])
    run.finish({"profile": out}, {}, rows, ["class", "mean_r", "sd_r", "n_pairs"])


def _coerce(field, text):
    current = getattr(synth.SynthConfig(), field)
    try:
        if isinstance(current, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, tuple):
            return tuple(float(x) for x in text.split(","))
        if current is None or isinstance(current, float):
            return None if text.lower() == "none" else float(text)
    except ValueError:
        raise UsageError(f"bad value for {field}: {text!r}") from None
    return text


def cmd_synth(args, run):
    fields = {f.name for f in dataclasses.fields(synth.SynthConfig)}
    over = {"seed": args.seed}
    for item in args.set:
        key, _, val = item.partition("=")
        key = key.strip().replace("-", "_")
        if key not in fields:
            hint = difflib.get_close_matches(key, sorted(fields), n=1)
            raise UsageError(f"unknown generator field {key!r}" + (f"; did you mean {hint[0]!r}?" if hint else ""))
        over[key] = _coerce(key, val)
    ds = synth.generate(synth.preset(args.preset, **over))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_response_table(ds.response, out / "responses.csv")
    dataio.save_feature_matrix(ds.cell_features, out / "cells.csv")
    dataio.save_label_map(ds.moa, out / "moa.csv")
    written = ["responses.csv", "cells.csv", "moa.csv"]
    if ds.drug_features is not None:
        dataio.save_feature_matrix(ds.drug_features, out / "drugs.csv")
        written.append("drugs.csv")
    train, test = ds.split()
    dataio.save_response_table(train, out / "train.csv")
    dataio.save_response_table(test, out / "test.csv")
    (out / "ground_truth.json").write_text(synth.ground_truth_json(ds) + "\n", encoding="utf-8")
    written += ["train.csv", "test.csv", "ground_truth.json"]
    files = {name: _sha256(out / name) for name in written}
    run.finish({"preset": args.preset, "config": dataclasses.asdict(ds.config), "files": files,
                "n_records": ds.response.n_records, "test_drugs": list(ds.test_drugs)}, {"seed": args.seed})


COMMANDS = {
    "eval": cmd_eval, "decompose": cmd_decompose, "kshot": cmd_kshot, "moa": cmd_moa, "leakage": cmd_leakage,
    "biomarker": cmd_biomarker, "concordance": cmd_concordance, "synth": cmd_synth,
}


# ---------------------------------------------------------------- dispatch


def _option_strings(parser):
    opts = []
    for action in parser._actions:
        opts.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for p in action.choices.values():
                opts.extend(_option_strings(p))
    return sorted(set(opts))


def _suggest(message, parser, root):
    words = []
    if "invalid choice" in message:
        bad = message.split("invalid choice:")[1].split("(")[0].strip().strip("'\"")
        words = difflib.get_close_matches(bad, SUBCOMMANDS, n=1)
    elif "unrecognized arguments" in message:
        known = _option_strings(root)
        for tok in message.split(":", 1)[1].split():
            words += difflib.get_close_matches(tok.split("=")[0], known, n=1)
    return f"did you mean {', '.join(words)}?" if words else None


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install the JSON config as subcommand defaults so explicit flags still win."""
    path = _config_path(argv)
    command = next((t for t in argv if t in SUBCOMMANDS), None)
    if path is None or command is None:
        return
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    subparser = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    dests = {a.dest for a in subparser._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for key in cfg:
        if key not in dests or key in ("config", "help"):
            hint = difflib.get_close_matches(key, sorted(dests), n=1)
            raise UsageError(f"unknown config key {key!r}" + (f"; did you mean {hint[0]!r}?" if hint else ""))
    for a in subparser._actions:
        if a.required and a.dest in cfg:
            a.required = False
    subparser.set_defaults(**cfg)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            _apply_config(parser, argv)
            args = parser.parse_args(argv)
        except _ArgError as e:
            e.parser.print_usage(sys.stderr)
            hint = _suggest(str(e), e.parser, parser)
            sys.stderr.write(f"{e.parser.prog}: error: {e}\n" + (f"{hint}\n" if hint else ""))
            return 1
        COMMANDS[args.command](args, _Run(args))
    except RankbenchError as e:
        sys.stderr.write(f"rankbench: error: {e}\n")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
