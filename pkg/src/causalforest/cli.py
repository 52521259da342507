"""Command-line front end.

Subcommands: ``fit``, ``predict``, ``ate``, ``diagnose``, ``report`` and
``simulate``. Settings may come from a JSON file (``--config``); flags given
on the command line override it. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import diagnostics as diag
from . import inference as inf
from . import presentation as pres
from .cate import predict_cates
from .centering import CenteredData, local_center
from .data import Dataset, Schema, load_csv, split_holdout, write_csv
from .errors import (
    CausalForestError,
    DataError,
    InSampleKernelWarning,
    InvalidParams,
    MissingColumn,
    UnknownMethod,
)
from .forest import Forest, ForestParams
from .inference import DrScores
from .pipeline import fit as fit_pipeline
from .simulate import DGP_NAMES, DgpSpec, generate, truth_frame

FOREST = "forest.json"
FOREST_INITIAL = "forest_initial.json"
CENTERED = "centered.csv"
CATE_OOB = "cate_oob.csv"
RUN = "run.json"
HOLDOUT_CENTERED = "holdout_centered.csv"
HOLDOUT_CATE = "holdout_cate.csv"
HOLDOUT_SCORES = "holdout_scores.csv"
CATE_PRED = "cate.csv"
ATE = "ate.json"
DIAGNOSTICS = "diagnostics.json"

REPORT_METHODS = (
    "variable_importance", "histogram", "ranked", "quantile_bins", "covariate_profile",
    "cate_by_variable", "group_cates", "best_tree", "blp", "rate", "policy",
)
REFUSED = {
    "linear_on_predictions": (
        "refusing to regress on forest predictions directly: the predictions are noisy "
        "estimates and the fit inherits their errors; use --method blp, which projects the "
        "doubly robust scores onto the chosen covariates"
    ),
}
PARAM_FLAGS = {"trees": "num_trees", "mtry": "mtry", "min_node_size": "min_node_size",
               "sample_fraction": "sample_fraction", "honesty_fraction": "honesty_fraction",
               "ci_group_size": "ci_group_size"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidParams(f"{self.prog}: {message}")


def _add_common(p):
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _add_data(p):
    p.add_argument("--data", help="input CSV")
    p.add_argument("--treatment", help="treatment column (default W)")
    p.add_argument("--outcome", help="outcome column (default Y)")
    p.add_argument("--covariates", help="comma separated covariate columns (default: all others)")
    p.add_argument("--oracle-propensity-col", dest="oracle_propensity",
                   help="column of known assignment probabilities; used instead of a propensity forest")
    p.add_argument("--groups", help="column of group labels")
    p.add_argument("--reserved", help="comma separated numeric columns kept out of the covariates")


def _add_forest(p):
    p.add_argument("--trees", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--min-node-size", dest="min_node_size", type=int)
    p.add_argument("--sample-fraction", dest="sample_fraction", type=float)
    p.add_argument("--honesty-fraction", dest="honesty_fraction", type=float)
    p.add_argument("--ci-group-size", dest="ci_group_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="causalforest", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="center, grow the causal forest and predict out of bag")
    _add_common(p)
    _add_data(p)
    _add_forest(p)
    p.add_argument("--holdout", type=float, help="share of rows held out for evaluation")
    p.add_argument("--basu", action="store_true", default=None,
                   help="refit on features with above-average importance")
    p.add_argument("--basu-stage", choices=("both", "heterogeneity"),
                   help="reduce the features of both stages (default) or only the causal forest")
    p.add_argument("--trim", help="lo,hi propensity bounds; rows outside are dropped")

    p = sub.add_parser("predict", help="CATE estimates for new rows")
    _add_common(p)
    p.add_argument("--model", required=True, help="directory written by fit")
    p.add_argument("--data", required=True)
    p.add_argument("--oob", action="store_true", help="exclude trees that saw each training row")

    p = sub.add_parser("ate", help="AIPW average effect and calibration test")
    _add_common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("diagnose", help="overlap, trimming and falsification checks")
    _add_common(p)
    _add_forest(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--trim", help="lo,hi bounds for the overlap report (default 0.05,0.95)")
    p.add_argument("--placebo-reps", type=int, default=0)
    p.add_argument("--dummy-outcome", help="'random_noise' or a column name")

    p = sub.add_parser("report", help="presentation tables")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", action="append", required=True,
                   help=f"one of {', '.join(REPORT_METHODS)}; repeatable")
    p.add_argument("--k", type=int, default=4, help="number of quantile or curve bins")
    p.add_argument("--bins", type=int, default=20, help="histogram bins")
    p.add_argument("--variable", help="covariate for cate_by_variable")
    p.add_argument("--mode", choices=("binned", "smoothed"), default="binned")
    p.add_argument("--blp-cols", help="comma separated covariates for blp (default: all)")
    p.add_argument("--bootstrap-reps", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--weighting", choices=("AUTOC", "QINI"), default="AUTOC")
    p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("simulate", help="write a synthetic dataset and its true effects")
    _add_common(p)
    p.add_argument("--dgp", required=True, help=", ".join(DGP_NAMES))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--tau", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float, default=1.0)
    return parser


# ---------------------------------------------------------------------------
# configuration


def _merge(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InvalidParams(f"config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidParams(f"config file {path} is not valid JSON: {exc}") from None
    params = dict(cfg.pop("params", {}))
    for k, v in vars(args).items():
        if v is None or k in ("config", "command"):
            continue
        if k in PARAM_FLAGS:
            params[PARAM_FLAGS[k]] = v
        else:
            cfg[k] = v
    if "seed" in cfg:
        params["seed"] = cfg["seed"]
    cfg["params"] = params
    if not cfg.get("out"):
        raise InvalidParams("--out is required")
    return cfg


def _params(cfg) -> ForestParams:
    known = set(ForestParams.__dataclass_fields__)
    unknown = set(cfg["params"]) - known
    if unknown:
        raise InvalidParams(f"unknown forest parameters: {sorted(unknown)}")
    return ForestParams(**cfg["params"])


def _split_list(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return list(v)
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _bounds(v):
    if v is None:
        return None
    parts = _split_list(v)
    if len(parts) != 2:
        raise InvalidParams("bounds must be given as lo,hi")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise InvalidParams(f"bounds {v!r} are not numbers") from None


def _schema(cfg) -> Schema:
    return Schema(
        treatment=cfg.get("treatment", "W"),
        outcome=cfg.get("outcome", "Y"),
        covariates=_split_list(cfg.get("covariates")),
        oracle_propensity=cfg.get("oracle_propensity"),
        groups=cfg.get("groups"),
        reserved=_split_list(cfg.get("reserved")) or (),
    )


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=pres._jsonable))


def _read_csv(path) -> pd.DataFrame:
    # the default float parser can be off by one ulp; persisted values must reload exactly
    return pd.read_csv(path, float_precision="round_trip")


def _read_run(model_dir) -> dict:
    path = Path(model_dir) / RUN
    if not path.exists():
        raise MissingColumn(f"{path} not found; run fit first")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(cfg) -> int:
    if not cfg.get("data"):
        raise InvalidParams("--data is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    schema = _schema(cfg)
    full = load_csv(cfg["data"], schema)
    params = _params(cfg)
    use_oracle = schema.oracle_propensity is not None
    run = {"data": str(cfg["data"]), "schema": asdict(schema), "use_oracle": use_oracle,
           "checksum": full.checksum()}

    data, hold = full, None
    if cfg.get("holdout") is not None:
        pair = split_holdout(full, 1.0 - float(cfg["holdout"]), params.seed)
        data, hold = pair.train, pair.holdout
        run["holdout"] = float(cfg["holdout"])
    run["train_row_ids"] = data.row_ids.tolist()

    centered = None
    trim = _bounds(cfg.get("trim"))
    if trim is not None:
        centered = local_center(data, params, use_oracle=use_oracle)
        tr = diag.trim_by_propensity(data, centered, trim)
        data, centered = tr.data, tr.centered
        run["trim"] = {"bounds": list(trim), "removed": tr.removed}
        run["train_row_ids"] = data.row_ids.tolist()

    features = list(range(full.p))
    if cfg.get("basu"):
        first = fit_pipeline(data, params, use_oracle=use_oracle, centered=centered)
        first.forest.save(out / FOREST_INITIAL)
        imp = pres.variable_importance(first.forest)
        sel, fallback = pres.basu_select(imp)
        features = [int(j) for j in sel]
        stage = cfg.get("basu_stage", "both")
        run["basu"] = {"importance": imp.weights.tolist(), "selected": features,
                       "fallback": fallback, "stage": stage}
        reduced = data.select_features(features)
        if stage == "heterogeneity":
            centered = first.centered
        else:
            centered = None
        res = fit_pipeline(reduced, params, use_oracle=use_oracle, centered=centered)
    else:
        res = fit_pipeline(data, params, use_oracle=use_oracle, centered=centered)
    run["features"] = [full.feature_names[j] for j in features]
    run["params"] = asdict(res.forest.params)
    run["propensity_source"] = res.centered.propensity_source

    res.forest.save(out / FOREST)
    res.centered.to_frame().to_csv(out / CENTERED, index=False, float_format="%.17g")
    res.oob.to_frame().to_csv(out / CATE_OOB, index=False, float_format="%.17g")
    pd.DataFrame({"row_id": res.scores.row_ids, "gamma": res.scores.gamma}).to_csv(
        out / "scores.csv", index=False, float_format="%.17g")

    if hold is not None:
        hold_x = hold.select_features(features)
        hc = local_center(hold_x, params, use_oracle=use_oracle)
        hb = predict_cates(res.forest, res.centered, hold_x.X, row_ids=hold.row_ids)
        hs = inf.dr_scores(hc, hb.tau, provenance={"holdout": True})
        hc.to_frame().to_csv(out / HOLDOUT_CENTERED, index=False, float_format="%.17g")
        hb.to_frame().to_csv(out / HOLDOUT_CATE, index=False, float_format="%.17g")
        pd.DataFrame({"row_id": hs.row_ids, "gamma": hs.gamma}).to_csv(
            out / HOLDOUT_SCORES, index=False, float_format="%.17g")
        run["holdout_row_ids"] = hold.row_ids.tolist()
    _write_json(out / RUN, run)
    return 0


class _Model:
    """Everything ``fit`` persisted, reloaded for the downstream subcommands."""

    def __init__(self, model_dir):
        self.dir = Path(model_dir)
        self.run = _read_run(self.dir)
        self.forest = Forest.load(self.dir / FOREST)
        self.centered = CenteredData.from_frame(_read_csv(self.dir / CENTERED),
                                                self.run.get("propensity_source", "estimated"))
        self.oob = _read_csv(self.dir / CATE_OOB)
        self.schema = Schema.from_dict(self.run["schema"])
        self._data = None

    @property
    def data(self) -> Dataset:
        """Training rows (after holdout and trimming) on the forest's features."""
        if self._data is None:
            full = load_csv(self.run["data"], self.schema)
            if full.checksum() != self.run["checksum"]:
                raise DataError(f"{self.run['data']} changed since the model was fitted")
            pos = {int(r): i for i, r in enumerate(full.row_ids)}
            idx = [pos[int(r)] for r in self.run["train_row_ids"]]
            cols = [full.feature_names.index(c) for c in self.run["features"]]
            self._data = full.subset(idx).select_features(cols)
            self.forest.X = self._data.X
        return self._data

    def scores(self) -> DrScores:
        return inf.dr_scores(self.centered, self.oob["tau_hat"].to_numpy(float))

    def holdout(self):
        if "holdout_row_ids" not in self.run:
            raise InvalidParams("this method needs a model fitted with --holdout")
        hc = CenteredData.from_frame(_read_csv(self.dir / HOLDOUT_CENTERED),
                                     self.run.get("propensity_source", "estimated"))
        hb = _read_csv(self.dir / HOLDOUT_CATE)
        hs = inf.dr_scores(hc, hb["tau_hat"].to_numpy(float), provenance={"holdout": True})
        return hb, hs

    @property
    def train_ids(self):
        return np.asarray(self.run["train_row_ids"], np.int64)


def cmd_predict(cfg) -> int:
    model = _Model(cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    new = load_csv(cfg["data"], model.schema)
    cols = []
    for c in model.run["features"]:
        if c not in new.feature_names:
            raise MissingColumn(f"covariate {c!r} missing from {cfg['data']}")
        cols.append(new.feature_names.index(c))
    new = new.select_features(cols)
    is_training = new.checksum() == model.run["checksum"] or (
        model.data.n == new.n and np.array_equal(model.data.X, new.X))
    if cfg.get("oob"):
        if not is_training:
            raise InvalidParams("--oob needs the training rows the model was fitted on")
        frame = model.oob
    else:
        if is_training:
            warnings.warn("predicting on the training rows with every tree; the kernel includes "
                          "each row's own outcome (use --oob for out-of-bag estimates)",
                          InSampleKernelWarning, stacklevel=2)
        frame = predict_cates(model.forest, model.centered, new.X, row_ids=new.row_ids).to_frame()
    frame.to_csv(out / CATE_PRED, index=False, float_format="%.17g")
    return 0


def cmd_ate(cfg) -> int:
    model = _Model(cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    scores = model.scores()
    ate = inf.ate_aipw(scores)
    cal = inf.calibration_test(model.oob["tau_hat"].to_numpy(float), scores)
    _write_json(out / ATE, {"ate": ate.to_dict(), "calibration": cal.to_dict(),
                            "n": scores.n, "propensity_source": model.centered.propensity_source})
    return 0


def cmd_diagnose(cfg) -> int:
    model = _Model(cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    bounds = _bounds(cfg.get("trim")) or diag.DEFAULT_TRIM
    entries = {"overlap": diag.overlap_report(model.centered, cfg.get("bins", 20), bounds)}
    params = ForestParams(**{**model.run["params"], "mtry": None, **cfg["params"]})
    reps = int(cfg.get("placebo_reps") or 0)
    if reps > 0:
        entries["placebo_treatment"] = diag.placebo_treatment_test(model.data, params, reps,
                                                                   seed=params.seed)
    if cfg.get("dummy_outcome"):
        name = cfg["dummy_outcome"]
        data = model.data
        if name != "random_noise" and name not in data.extras and name not in data.feature_names:
            full = load_csv(model.run["data"], replace(model.schema, reserved=(
                *model.schema.reserved, name)))
            pos = {int(r): i for i, r in enumerate(full.row_ids)}
            col = full.extras[name][[pos[int(r)] for r in model.run["train_row_ids"]]]
            data = replace(data, extras={**data.extras, name: col})
        entries["dummy_outcome"] = diag.dummy_outcome_test(
            data, name, params, seed=params.seed, use_oracle=model.run["use_oracle"])
    diag.write_report(diag.diagnostics_report(**entries), out / DIAGNOSTICS)
    return 0


def cmd_report(cfg) -> int:
    model = _Model(cfg["model"])
    out = Path(cfg["out"])
    for method in cfg["method"]:
        if method in REFUSED:
            raise InvalidParams(REFUSED[method])
        if method not in REPORT_METHODS:
            raise UnknownMethod(f"unknown report method {method!r}; choose from "
                                f"{', '.join(REPORT_METHODS)}")
    for method in cfg["method"]:
        table, params, extra = _report(model, method, cfg)
        prov = {"model": str(model.dir), "forest_seed": model.run["params"]["seed"],
                "propensity_source": model.centered.propensity_source, **extra}
        pres.write_report(out, method, table, params, prov)
    return 0


def _report(model: _Model, method: str, cfg):
    taus = model.oob["tau_hat"].to_numpy(float)
    if method == "variable_importance":
        return pres.variable_importance(model.forest).to_frame(), {"decay": 0.5, "max_depth": 4}, {}
    if method == "histogram":
        bins = cfg.get("bins", 20)
        return pres.cate_histogram(taus, bins), {"bins": bins}, {}
    if method == "ranked":
        a = cfg.get("alpha", 0.05)
        return pres.ranked_cate_table(taus, model.oob["se"].to_numpy(float), a,
                                      model.oob["row_id"].to_numpy()), {"alpha": a}, {}
    if method == "best_tree":
        _ = model.data  # attaches the training covariates to the forest
        losses = pres.tree_rlosses(model.forest, model.centered)
        b = int(np.argmin(losses))
        return pres.tree_table(model.forest, b), {}, {"tree": b, "rloss": float(losses[b])}
    if method == "cate_by_variable":
        var = cfg.get("variable")
        if var is None or var not in model.run["features"]:
            raise InvalidParams("--variable must name a covariate of the forest")
        x = model.data.X[:, model.run["features"].index(var)]
        table, merged = pres.cate_by_variable(taus, x, cfg.get("mode", "binned"), k=cfg.get("k", 10))
        return table, {"variable": var, "mode": cfg.get("mode", "binned")}, {"merged_bins": merged}
    if method == "covariate_profile":
        qs = np.quantile(taus, np.arange(1, cfg.get("k", 4)) / cfg.get("k", 4))
        assign = np.searchsorted(qs, taus, side="left") + 1
        return pres.covariate_profile_by_quantile(model.data.X, assign, model.run["features"]), \
            {"k": cfg.get("k", 4)}, {}
    if method == "group_cates":
        if model.schema.groups is None:
            raise InvalidParams("group_cates needs a model fitted with --groups")
        return pres.group_cates(model.scores(), model.data.groups), {}, {}
    if method == "blp":
        names = _split_list(cfg.get("blp_cols")) or model.run["features"]
        miss = [c for c in names if c not in model.run["features"]]
        if miss:
            raise MissingColumn(f"blp columns {miss} are not covariates of the forest")
        A = model.data.X[:, [model.run["features"].index(c) for c in names]]
        reps = int(cfg.get("bootstrap_reps", 0))
        return inf.blp(model.scores(), A, names, bootstrap_reps=reps,
                       seed=model.run["params"]["seed"]).to_frame(), \
            {"columns": names, "bootstrap_reps": reps}, {}
    hb, hs = model.holdout()
    htau = hb["tau_hat"].to_numpy(float)
    if method == "quantile_bins":
        k = cfg.get("k", 4)
        rep = pres.quantile_bins(taus, hs, htau, k, train_ids=model.train_ids)
        return rep.table, {"k": k}, rep.to_dict()
    if method == "rate":
        wt = cfg.get("weighting", "AUTOC")
        r = inf.rate(htau, hs, wt, train_ids=model.train_ids, seed=model.run["params"]["seed"])
        return r.curve, {"weighting": wt}, r.to_dict()
    if method == "policy":
        thr = cfg.get("threshold", 0.0)
        pol = pres.derive_policy(htau, thr)
        pv = pres.policy_value(pol, hs, "treat_none", train_ids=model.train_ids, priority=htau)
        return pv.qini, {"threshold": thr, "baseline": "treat_none"}, pv.to_dict()
    raise UnknownMethod(method)


def cmd_simulate(cfg) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = DgpSpec(cfg["dgp"], n=cfg.get("n", 2000), p=cfg.get("p", 10), tau=cfg.get("tau"),
                   noise_sd=cfg.get("noise_sd", 1.0), seed=cfg["params"].get("seed", 0))
    data, tau, ate = generate(spec)
    write_csv(data, out / "data.csv")
    truth_frame(data, tau).to_csv(out / "truth.csv", index=False, float_format="%.17g")
    _write_json(out / "simulate.json", {"dgp": asdict(spec), "true_ate": ate})
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "ate": cmd_ate, "diagnose": cmd_diagnose,
            "report": cmd_report, "simulate": cmd_simulate}


def run(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise InvalidParams("a subcommand is required: " + " | ".join(COMMANDS))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = COMMANDS[args.command](_merge(args))
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        return code
    except CausalForestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main():
    sys.exit(run())
