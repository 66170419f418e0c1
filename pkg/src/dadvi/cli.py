"""Command-line front end: ``dadvi fit | postprocess | experiment``.

A run is described by one YAML file; ``--set dotted.key=value`` overrides
any key (the value is parsed as YAML).  Every artifact embeds the resolved
configuration.  Exit status: 0 success, 1 numeric or convergence failure
(artifacts written), 2 configuration error (nothing written).

Seeds: the fit draws use ``substream_seed(seed, "fit")`` and experiments use
``substream_seed(seed, "experiment", <name>)``; model data seeds live in the
model parameters.
"""
import argparse
import copy
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import CGNotConverged, DegenerateNormalization, InvalidConfiguration, NonFiniteObjective, NotAtOptimum
from .experiments import (
    CoverageExperiment,
    degeneracy_path,
    global_local_scaling,
    normalized_trace,
    run_coverage,
    substream_seed,
    write_csv,
)
from .model import MODEL_PARAMS, QuadraticModel, build_model
from .optimize import OptimizerConfig, SGConfig, dadvi_fit, dadvi_fit_fullrank, sg_fit
from .posterior import CGConfig, build_qoi_report
from .saa import ObjectiveBundle, sample_draws
from .variational import MeanFieldParams, QuantityOfInterest

NUMERIC_ERRORS = (ArithmeticError, NotAtOptimum, CGNotConverged, DegenerateNormalization, np.linalg.LinAlgError)

# Ordered lists, not sets: artifact key order must not depend on hash seeds.
_OPTIMIZER_KEYS = [f.name for f in dataclasses.fields(OptimizerConfig)]
_SG_KEYS = [f.name for f in dataclasses.fields(SGConfig)]

DEFAULTS = {
    "model": {"name": "quadratic", "params": {}},
    "N": 30,
    "seed": 0,
    "workers": 1,
    "family": "mean-field",
    "optimizer": {},
    "quantities": None,
    "postprocess": {"cg_tol": 1e-10, "cg_max_iter": None, "preconditioned": True, "flag_fraction": 0.5},
    "experiment": None,
    "output_dir": "out",
}

EXPERIMENT_DEFAULTS = {
    "trace": {"methods": ["dadvi", "sg"], "z_indep_size": 1000, "sg": {}},
    "coverage": {
        "N_values": [8, 16, 32, 64],
        "replications": 100,
        "reference_N": 64,
        "reference_replications": 100,
        "indices": [0],
    },
    "degeneracy": {"D": 10, "N": 3, "eps": 1.0, "log_M": [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]},
    "scaling": {"P_values": [10, 100, 1000], "N": None, "replications": 20, "reference_N": 4096, "data_seed": 0},
}

_QUANTITY_KEYS = {
    "coordinate": {"kind", "index", "name"},
    "coordinate-square": {"kind", "index", "name"},
    "linear": {"kind", "coefficients", "name"},
    "constant": {"kind", "value", "name"},
}


def _reject_unknown(section, given, allowed):
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise InvalidConfiguration(f"unknown key(s) in {section}: {', '.join(map(str, extra))}")


def _merge(defaults, given, section):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise InvalidConfiguration(f"{section} must be a mapping")
    _reject_unknown(section, given, defaults)
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _int(value, what, minimum):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise InvalidConfiguration(f"invalid {what}: {value!r}")
    return int(value)


def _numeric(section, values, defaults):
    """YAML 1.1 reads ``1e-8`` as a string; coerce numeric settings by their default's type."""
    for k, default in defaults.items():
        v = values.get(k)
        if isinstance(default, bool) or v is None or isinstance(v, bool):
            continue
        if isinstance(default, (int, float)):
            try:
                num = float(v)
            except (TypeError, ValueError):
                raise InvalidConfiguration(f"{section}.{k} must be a number, got {v!r}") from None
            values[k] = int(num) if isinstance(default, int) and num.is_integer() else num
    return values


def resolve_config(raw):
    """Validate a raw mapping and fill defaults; returns the canonical mapping."""
    try:
        return _resolve(raw)
    except InvalidConfiguration:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise InvalidConfiguration(f"invalid configuration value: {exc}") from None


def _resolve(raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidConfiguration("configuration must be a mapping")
    cfg = _merge(DEFAULTS, raw, "config")
    cfg["model"] = _merge(DEFAULTS["model"], cfg["model"], "model")
    name = cfg["model"]["name"]
    if name not in MODEL_PARAMS:
        raise InvalidConfiguration(f"unknown model {name!r}")
    cfg["model"]["params"] = dict(cfg["model"]["params"] or {})
    _reject_unknown("model.params", cfg["model"]["params"], MODEL_PARAMS[name])
    try:
        cfg["N"] = _int(cfg["N"], "draw count", 1)
    except InvalidConfiguration:
        raise InvalidConfiguration(f"invalid draw count: {cfg['N']!r}") from None
    cfg["seed"] = _int(cfg["seed"], "seed", 0)
    cfg["workers"] = _int(cfg["workers"], "workers", 1)
    if cfg["family"] not in ("mean-field", "full-rank"):
        raise InvalidConfiguration(f"unknown family {cfg['family']!r}")
    opt_defaults = {k: getattr(OptimizerConfig(), k) for k in _OPTIMIZER_KEYS}
    cfg["optimizer"] = _numeric("optimizer", _merge(opt_defaults, cfg["optimizer"], "optimizer"), opt_defaults)
    cfg["optimizer"]["cg_tol"] = None if cfg["optimizer"]["cg_tol"] is None else float(cfg["optimizer"]["cg_tol"])
    OptimizerConfig(**cfg["optimizer"])
    pp = _merge(DEFAULTS["postprocess"], cfg["postprocess"], "postprocess")
    cfg["postprocess"] = _numeric("postprocess", pp, DEFAULTS["postprocess"])
    if pp["cg_max_iter"] is not None:
        pp["cg_max_iter"] = _int(pp["cg_max_iter"], "postprocess.cg_max_iter", 1)
    if not pp["cg_tol"] > 0 or not pp["flag_fraction"] >= 0:
        raise InvalidConfiguration("postprocess tolerances must be positive")
    if cfg["quantities"] is not None:
        if not isinstance(cfg["quantities"], list):
            raise InvalidConfiguration("quantities must be a list")
        for q in cfg["quantities"]:
            if not isinstance(q, dict) or q.get("kind") not in _QUANTITY_KEYS:
                raise InvalidConfiguration(f"invalid quantity {q!r}")
            _reject_unknown("quantity", q, _QUANTITY_KEYS[q["kind"]])
    if cfg["experiment"] is not None:
        exp = cfg["experiment"]
        if not isinstance(exp, dict) or "name" not in exp:
            raise InvalidConfiguration("experiment needs a name")
        _reject_unknown("experiment", exp, {"name", "params"})
        if exp["name"] not in EXPERIMENT_DEFAULTS:
            raise InvalidConfiguration(f"unknown experiment {exp['name']!r}")
        params = _merge(EXPERIMENT_DEFAULTS[exp["name"]], exp.get("params"), f"experiment {exp['name']}")
        if exp["name"] == "trace":
            sg_defaults = {k: getattr(SGConfig(), k) for k in _SG_KEYS}
            params["sg"] = _numeric("experiment.sg", _merge(sg_defaults, params["sg"], "experiment.sg"), sg_defaults)
            SGConfig(**params["sg"])
            unknown = set(params["methods"]) - {"dadvi", "sg"}
            if unknown:
                raise InvalidConfiguration(f"unknown trace method(s): {sorted(unknown)}")
        cfg["experiment"] = {"name": exp["name"], "params": params}
    cfg["output_dir"] = str(cfg["output_dir"])
    return cfg


def parse_config(text):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfiguration(f"cannot parse configuration: {exc}") from None
    return resolve_config(raw)


def serialize_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


def apply_override(raw, assignment):
    """Apply ``a.b.c=value`` to a raw mapping in place."""
    if "=" not in assignment:
        raise InvalidConfiguration(f"override must look like key=value: {assignment!r}")
    path, _, text = assignment.partition("=")
    keys = path.strip().split(".")
    node = raw
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise InvalidConfiguration(f"cannot override inside non-mapping key {k!r}")
    try:
        node[keys[-1]] = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfiguration(f"bad override value {text!r}: {exc}") from None
    return raw


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise InvalidConfiguration(f"cannot read {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise InvalidConfiguration(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise InvalidConfiguration("configuration must be a mapping")
    for o in overrides:
        apply_override(raw, o)
    return resolve_config(raw)


# -- artifact writing -------------------------------------------------------


def _json_value(x, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}" for k, v in x.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        if len(x) == 0:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in x):
            return "[" + ", ".join(_json_value(v, indent, level) for v in x) + "]"
        items = [pad + _json_value(v, indent, level + 1) for v in x]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}" if math.isfinite(x) else "null"
    if x is None:
        return "null"
    return json.dumps(str(x))


def dumps_json(obj, indent=2):
    """JSON with every float written to 17 significant digits."""
    return _json_value(obj, indent, 0) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


# -- model and quantity construction ----------------------------------------


def make_model(cfg):
    return build_model(cfg["model"]["name"], cfg["model"]["params"])


def make_quantities(cfg, dim):
    specs = cfg["quantities"]
    if specs is None:
        return [QuantityOfInterest.coordinate(i) for i in range(dim)]
    out = []
    for q in specs:
        kind, name = q["kind"], q.get("name")
        if kind in ("coordinate", "coordinate-square"):
            idx = _int(q.get("index"), "quantity index", 0)
            if idx >= dim:
                raise InvalidConfiguration(f"quantity index {idx} out of range for dimension {dim}")
            make = QuantityOfInterest.coordinate if kind == "coordinate" else QuantityOfInterest.coordinate_square
            out.append(make(idx, name))
        elif kind == "linear":
            c = np.asarray(q.get("coefficients"), dtype=float)
            if c.shape != (dim,):
                raise InvalidConfiguration(f"linear quantity needs {dim} coefficients")
            out.append(QuantityOfInterest.linear(c, name))
        else:
            out.append(QuantityOfInterest.constant(float(q.get("value", 0.0)), name))
    return out


def fit_draws(cfg, dim):
    return sample_draws(substream_seed(cfg["seed"], "fit"), cfg["N"], dim)


# -- subcommands ------------------------------------------------------------


def cmd_fit(cfg):
    model = make_model(cfg)
    draws = fit_draws(cfg, model.dim)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    opt = OptimizerConfig(**cfg["optimizer"])
    bundle = ObjectiveBundle(model, draws, family=cfg["family"], workers=cfg["workers"])
    try:
        if cfg["family"] == "full-rank":
            result, trace = dadvi_fit_fullrank(bundle, config=opt)
        else:
            result, trace = dadvi_fit(bundle, config=opt)
    except NonFiniteObjective as exc:
        write_json(out / "fit.json", {"config": cfg, "seed": cfg["seed"], "N": cfg["N"], "converged": False, "error": str(exc)})
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1
    artifact = result.to_dict()
    artifact.update(
        config=cfg,
        seed=cfg["seed"],
        N=cfg["N"],
        draw_seed=draws.seed,
        draws_id=draws.identifier,
        family=cfg["family"],
    )
    write_json(out / "fit.json", artifact)
    trace.to_csv(out / "trace.csv")
    if not result.converged:
        print(f"fit did not converge: {result.status} ({result.message})", file=sys.stderr)
        return 1
    return 0


def cmd_postprocess(cfg, fit_path=None):
    fit_path = Path(fit_path) if fit_path else Path(cfg["output_dir"]) / "fit.json"
    try:
        fit = json.loads(fit_path.read_text())
    except (OSError, ValueError) as exc:
        raise InvalidConfiguration(f"cannot read fit artifact {fit_path}: {exc}") from None
    if not fit.get("converged"):
        print("refusing to post-process a fit that did not converge", file=sys.stderr)
        return 1
    fit_cfg = resolve_config(fit["config"])
    if fit_cfg["family"] != "mean-field":
        raise InvalidConfiguration("post-processing needs a mean-field fit")
    model = make_model(fit_cfg)
    draws = fit_draws(fit_cfg, model.dim)
    if draws.identifier != fit.get("draws_id"):
        raise InvalidConfiguration("fit artifact draws do not match its configuration")
    quantities = make_quantities(cfg, model.dim)
    eta = MeanFieldParams(fit["eta_hat"]["mu"], fit["eta_hat"]["xi"])
    bundle = ObjectiveBundle(model, draws, workers=cfg["workers"])
    pp = cfg["postprocess"]
    cg = CGConfig(tol=pp["cg_tol"], max_iter=pp["cg_max_iter"], preconditioned=pp["preconditioned"])
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = build_qoi_report(quantities, eta, bundle, config=cg, flag_fraction=pp["flag_fraction"])
    except NotAtOptimum as exc:
        print(f"refusing to post-process: {exc}", file=sys.stderr)
        return 1
    artifact = report.to_dict()
    artifact.update(config=cfg, fit_config=fit_cfg, draws_id=draws.identifier)
    write_json(out / "qoi_report.json", artifact)
    return 1 if any(r.error for r in report.rows) else 0


def _experiment_trace(cfg, params, seed, out):
    model = make_model(cfg)
    draws = fit_draws(cfg, model.dim)
    bundle = ObjectiveBundle(model, draws, workers=cfg["workers"])
    dadvi_result, dadvi_trace = dadvi_fit(bundle, config=OptimizerConfig(**cfg["optimizer"]))
    traces = []
    summary = {"dadvi": {"converged": dadvi_result.converged, "evaluations": int(dadvi_result.eval_counts["model_evals"])}}
    for method in params["methods"]:
        if method == "dadvi":
            traces.append(dadvi_trace)
        else:
            sg_result, sg_trace = sg_fit(model, config=SGConfig(**params["sg"]), seed=substream_seed(seed, "sg"))
            traces.append(sg_trace)
            summary["sg"] = {"converged": sg_result.converged, "evaluations": int(sg_result.eval_counts["model_evals"])}
    z_indep = sample_draws(substream_seed(seed, "z_indep"), params["z_indep_size"], model.dim)
    comp = normalized_trace(traces, dadvi_result.eta_hat, z_indep, model)
    write_csv(out / "trace_comparison.csv", comp.header, comp.rows())
    for name, (_, evals, kappa) in comp.methods.items():
        summary.setdefault(name, {}).update(final_kappa=float(kappa[-1]), final_evaluations=int(evals[-1]))
    return {
        "z_indep_id": z_indep.identifier,
        "z_indep_seed": z_indep.seed,
        "reference": comp.reference,
        "scale": comp.scale,
        "methods": summary,
    }, 0 if dadvi_result.converged else 1


def _experiment_coverage(cfg, params, seed, out):
    exp = CoverageExperiment(
        make_model(cfg),
        indices=tuple(params["indices"]),
        N_values=tuple(params["N_values"]),
        replications=params["replications"],
        reference_N=params["reference_N"],
        reference_replications=params["reference_replications"],
        seed=seed,
        gtol=cfg["optimizer"]["gtol"],
    )
    res = run_coverage(exp)
    write_csv(out / "coverage.csv", res.header, res.rows)
    return {"mu_inf": res.mu_inf, "excluded": res.excluded, "per_N": {str(k): v for k, v in res.summary.items()}}, 0


def _experiment_degeneracy(cfg, params, seed, out):
    D, N = int(params["D"]), int(params["N"])
    if N >= D:
        raise InvalidConfiguration("degeneracy needs N < D")
    Z = sample_draws(substream_seed(seed, "draws"), N, D)
    path = degeneracy_path(D, N, Z, params["log_M"], eps=float(params["eps"]), model=QuadraticModel(np.eye(D)))
    write_csv(out / "degeneracy.csv", path.header, path.rows())
    return {"span_rank": path.span_rank, "draws_id": Z.identifier, "strictly_decreasing": bool(np.all(np.diff(path.objective) < 0))}, 0


def _experiment_scaling(cfg, params, seed, out):
    res = global_local_scaling(
        params["P_values"],
        N=params["N"] or cfg["N"],
        replications=params["replications"],
        seed=seed,
        reference_N=params["reference_N"],
        data_seed=params["data_seed"],
        gtol=cfg["optimizer"]["gtol"],
    )
    write_csv(out / "scaling.csv", res.header, res.rows)
    return {"per_P": {str(k): v for k, v in res.summary.items()}}, 0


EXPERIMENTS = {
    "trace": _experiment_trace,
    "coverage": _experiment_coverage,
    "degeneracy": _experiment_degeneracy,
    "scaling": _experiment_scaling,
}


def cmd_experiment(cfg):
    if cfg["experiment"] is None:
        raise InvalidConfiguration("no experiment block in the configuration")
    name, params = cfg["experiment"]["name"], cfg["experiment"]["params"]
    seed = substream_seed(cfg["seed"], "experiment", name)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary, status = EXPERIMENTS[name](cfg, params, seed, out)
    except NUMERIC_ERRORS as exc:
        write_json(out / f"{name}.json", {"config": cfg, "experiment_seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 1
    write_json(out / f"{name}.json", {"config": cfg, "experiment_seed": seed, "summary": summary})
    return status


def build_parser():
    parser = argparse.ArgumentParser(prog="dadvi", description="Deterministic ADVI with linear-response post-processing.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "fit the variational approximation"),
        ("postprocess", "LR covariances and MC standard errors for a fit"),
        ("experiment", "run a diagnostic experiment"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", nargs="?", help="YAML configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--output-dir", help="overrides output_dir")
        if name == "postprocess":
            p.add_argument("--fit", help="fit artifact (default: <output_dir>/fit.json)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "postprocess":
            return cmd_postprocess(cfg, args.fit)
        return cmd_experiment(cfg)
    except InvalidConfiguration as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
