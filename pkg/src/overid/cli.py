"""Command-line interface.

Every command accepts ``--config FILE`` (``name = value`` lines whose names
match the long options, with dashes or underscores), ``--report FILE`` for a
JSON report with the keys command, seed, params, results and warnings, and
``--dry-run`` to print the resolved configuration without computing.

Exit codes: 0 success, 1 configuration error, 2 schema error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from overid import estimators as est
from overid import experiments as exp
from overid.errors import ConfigError, OverIdError, SchemaError
from overid.partial_mle import (
    MleConfig,
    PartialData,
    ThetaVec,
    mle_fit,
    optimal_k,
    write_ve_curve,
)
from overid.scm import (
    DEFAULT_PARAMS,
    PRESETS,
    Dataset,
    Schema,
    ScmParams,
    sample,
    sample_binary_treatment,
)
from overid.semiparam import if_ate

log = logging.getLogger("overid")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

PARAM_KEYS = ("a", "b", "c", "d", "var_uw", "var_ux", "var_um", "var_uy")


def parse_params(text: str | None) -> ScmParams:
    """Preset name and/or ``key=value`` overrides, comma separated.

    ``"fig3a"``, ``"a=1,c=2"`` and ``"f2-case1,b=4"`` are all valid; missing
    values come from the preset (default: a=10, b=4, c=5, d=5, unit variances).
    """
    if text is None or not text.strip():
        return DEFAULT_PARAMS
    base = DEFAULT_PARAMS
    overrides = {}
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        if "=" not in token:
            try:
                base = PRESETS[token.lower()]
            except KeyError:
                raise ConfigError(
                    f"unknown preset {token!r}; choose from {sorted(PRESETS)}"
                ) from None
            continue
        key, value = (s.strip() for s in token.split("=", 1))
        key = key.lower().replace("sigma2_", "var_")
        if key not in PARAM_KEYS:
            raise ConfigError(f"unknown parameter {key!r}; expected one of {PARAM_KEYS}")
        try:
            overrides[key] = float(value)
        except ValueError:
            raise ConfigError(f"parameter {key} has non-numeric value {value!r}") from None
    return base.replace(**overrides)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip().lower() for v in str(text).split(",") if v.strip())


def read_dataset(path) -> Dataset:
    """Headered CSV with columns x, y and w (or w1..wk) and/or m."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file {str(path)!r} does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    try:
        values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError:
        raise SchemaError(f"{path} has non-numeric or ragged rows") from None
    cols = {name: values[:, i] for i, name in enumerate(header)}
    w_multi = sorted(
        (h for h in header if h.startswith("w") and h[1:].isdigit()), key=lambda h: int(h[1:])
    )
    known = {"x", "y", "w", "m", *w_multi}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise SchemaError(f"{path} has unexpected columns {unknown}")
    if w_multi and "w" in cols:
        raise SchemaError("use either a single w column or w1..wk, not both")
    if w_multi:
        cols["w"] = np.column_stack([cols.pop(h) for h in w_multi])
    for required in ("x", "y"):
        if required not in cols:
            raise SchemaError(f"{path} lacks required column {required!r}")
    has_w, has_m = "w" in cols, "m" in cols
    if has_w and has_m:
        schema = Schema.FULL
    elif has_w:
        schema = Schema.CONFOUNDER_ONLY
    elif has_m:
        schema = Schema.MEDIATOR_ONLY
    else:
        raise SchemaError(f"{path} needs a w or m column")
    return Dataset(schema, cols)


def write_dataset(path, data: Dataset) -> None:
    names, arrays = [], []
    for name in data.schema.columns:
        arr = data.columns[name]
        if arr.ndim == 2:
            names += [f"{name}{j + 1}" for j in range(arr.shape[1])]
            arrays += list(arr.T)
        else:
            names.append(name)
            arrays.append(arr)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*arrays):
            writer.writerow([repr(float(v)) for v in row])


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _params_arg(args) -> ScmParams:
    return parse_params(getattr(args, "params", None))


def cmd_simulate(args) -> dict:
    params = _params_arg(args)
    if args.n < 1:
        raise ConfigError("--n must be positive")
    if args.binary_treatment:
        data = sample_binary_treatment(params, args.n, args.seed)
    else:
        data = sample(params, args.n, args.seed)
    data = data.restrict(args.schema)
    if args.out:
        write_dataset(args.out, data)
    return {"n": data.n, "schema": data.schema.value, "true_effect": params.true_effect}


def cmd_estimate(args) -> dict:
    data = read_dataset(args.data)
    if args.center:
        data = data.centered()
    params = parse_params(args.params) if args.params else None
    if args.method == "all":
        methods = [m for m in est.Method if all(data.has(c) for c in _needs(m))]
        if not methods:
            raise SchemaError("no estimator is applicable to this dataset")
    else:
        methods = [est.Method.parse(args.method)]
    out = {}
    for method in methods:
        out[method.value] = est.estimate(data, method, params).as_dict()
    return out


def _needs(method: "est.Method") -> str:
    return {est.Method.BACKDOOR: "xyw", est.Method.FRONTDOOR: "xym", est.Method.COMBINED: "xywm"}[
        method
    ]


def _try(fn, *a):
    try:
        return fn(*a)
    except OverIdError as exc:
        return f"{type(exc).__name__}: {exc}"


def cmd_compare(args) -> dict:
    params = _params_arg(args)
    n = args.n
    out = {
        "true_effect": params.true_effect,
        "variance": {
            m.value: _try(lambda m=m: est.variance_theory(m, params, n).as_dict())
            for m in est.Method
        },
        "variance_ratio": _try(est.variance_ratio, params, n),
        "dominance_threshold": {
            "backdoor": _try(est.dominance_threshold, params, "backdoor"),
            "frontdoor": _try(est.dominance_threshold, params, "frontdoor"),
        },
        "ideal_mediator": {
            "frontdoor": _try(est.ideal_mediator_frontdoor, params, n),
            "combined": _try(est.ideal_mediator_combined, params),
        },
        "equal_variance_b": _try(est.equal_variance_b, params, n),
        "combined_dominance_ratio_bound": _try(est.combined_dominance_ratio_bound, params, n),
    }
    return out


def cmd_mc_validate(args) -> dict:
    source = "prior" if args.params in (None, "", "prior") else _params_arg(args)
    config = exp.McConfig(
        reps=args.reps,
        n_values=_int_list(args.n_values),
        seed=args.seed,
        params=source,
        draws=args.draws,
    )
    if args.experiment == "mape":
        summary = exp.mape_experiment(config)
        stats = {}
        for name in config.estimators:
            for n in config.n_values:
                mean, sd = summary.mape_stats(name, n)
                entry = {"mape_mean": mean, "mape_sd": sd}
                if name == "combined":
                    entry["inside_fraction"] = summary.inside_fraction(name, n)
                stats[f"{name}@{n}"] = entry
        results = {"mape": stats, "rejected_draws": summary.rejected_draws}
    else:
        if source == "prior":
            raise ConfigError(f"--experiment {args.experiment} needs fixed --params")
        if args.experiment == "mse":
            summary = exp.mse_comparison(config, source, label=args.params)
        else:
            summary = exp.partial_mse_comparison(config, source, label=args.params)
        results = {
            f"{r.estimator}@{r.n}": {"mse": r.mse, "mse_se": r.mse_se, "mean": r.mean}
            for r in summary.rows
        }
    if args.out:
        summary.write_csv(args.out)
    results["notes"] = summary.notes
    return results


def cmd_cramer_rao(args) -> dict:
    theta = ThetaVec.from_params(_params_arg(args))
    curve = optimal_k(theta, args.grid)
    if args.out:
        write_ve_curve(args.out, curve)
    return {"k_star": curve.k_star, "ve_star": curve.ve_star, "grid": args.grid,
            "points": len(curve.curve)}


def cmd_mle_partial(args) -> dict:
    if args.data:
        full = read_dataset(args.data)
        if full.schema is not Schema.FULL:
            raise SchemaError("--data must hold x, y, w and m to be split")
        p = args.split if args.split else full.n // 2
        order = np.random.default_rng([args.seed, 4]).permutation(full.n)
        data = PartialData.split(full.take(order), p)
    elif args.confounder and args.mediator:
        data = PartialData(read_dataset(args.confounder), read_dataset(args.mediator))
    else:
        raise ConfigError("give --confounder and --mediator files, or --data to split")
    config = MleConfig(
        tol=args.tol,
        max_iter=args.max_iter,
        bootstrap_reps=args.bootstrap_reps,
        seed=args.seed,
        multi_start=args.multi_start,
    )
    fit = mle_fit(data, config)
    return {
        "effect": fit.theta.e,
        "theta": dict(fit.theta._asdict()),
        "init_theta": dict(fit.init_theta._asdict()),
        "loglik": fit.loglik,
        "init_loglik": fit.init_loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "p": data.p,
        "q": data.q,
        "k": data.k,
    }


def cmd_if_estimate(args) -> dict:
    data = read_dataset(args.data)
    if data.schema is not Schema.FULL:
        raise SchemaError("influence-function estimators need x, y, w and m")
    variants = ("restricted", "fulcher", "frontdoor") if args.variant == "all" else (args.variant,)
    return {v: if_ate(data, v, not args.keep_x_in_outcome).as_dict() for v in variants}


def cmd_ihdp_gen(args) -> dict:
    if args.covariates:
        cov, treat = _read_covariates(args.covariates)
    else:
        cov, treat = exp.synthetic_covariates(args.seed, n=args.rows, treated_rate=args.treated_rate)
    results = {"rows": int(cov.shape[0]), "columns": int(cov.shape[1]),
               "treated": int(treat.sum())}
    if args.reps:
        summary = exp.ihdp_protocol(cov, treat, args.setting, args.reps, args.seed)
        if args.out:
            summary.write_csv(args.out)
        results["mse"] = {r.estimator: r.mse for r in summary.rows}
        results["setting"] = args.setting
    elif args.setting_sample:
        setting = exp.IHDP_SETTINGS[args.setting.upper()]
        data = exp.ihdp_rep(cov, treat, setting, args.seed)
        if args.out:
            write_dataset(args.out, data)
        results["setting"] = args.setting
    elif args.out:
        _write_covariates(args.out, cov, treat)
    return results


def _read_covariates(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"covariate file {str(path)!r} does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        rows = [r for r in reader if r]
    values = np.array(rows, dtype=float)
    if "x" not in header:
        raise SchemaError("covariate file needs a treatment column x")
    w_cols = [i for i, h in enumerate(header) if h.startswith("w")]
    if not w_cols:
        raise SchemaError("covariate file needs w1..wk columns")
    return values[:, w_cols], values[:, header.index("x")]


def _write_covariates(path, cov, treat):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x"] + [f"w{j + 1}" for j in range(cov.shape[1])])
        for t, row in zip(treat, cov):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def cmd_bootstrap(args) -> dict:
    data = read_dataset(args.data)
    summary = exp.bootstrap_eval(
        data,
        _str_list(args.estimators),
        reps=args.reps,
        seed=args.seed,
        truth=args.truth,
        center=args.center,
    )
    if args.out:
        summary.write_csv(args.out)
    return {
        r.estimator: {"mean": r.mean, "variance": r.variance, "mse": r.mse,
                      "reps_used": r.reps_used, "failures": r.failures}
        for r in summary.rows
    }


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "compare": cmd_compare,
    "mc-validate": cmd_mc_validate,
    "cramer-rao": cmd_cramer_rao,
    "mle-partial": cmd_mle_partial,
    "if-estimate": cmd_if_estimate,
    "ihdp-gen": cmd_ihdp_gen,
    "bootstrap": cmd_bootstrap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="name = value file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--report", help="write a JSON report here")
        p.add_argument("--dry-run", action="store_true")
        p.add_argument("--out", help="output CSV path")
        return p

    p = command("simulate", "draw a dataset from the linear SCM")
    p.add_argument("--params", default="default")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--schema", default="full", choices=["full", "confounder", "mediator"])
    p.add_argument("--binary-treatment", action="store_true")

    p = command("estimate", "point estimate (and theory, given --params)")
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="all",
                   choices=["all", "backdoor", "frontdoor", "combined"])
    p.add_argument("--params", default=None)
    p.add_argument("--center", action="store_true")

    p = command("compare", "closed-form variance comparison")
    p.add_argument("--params", default="default")
    p.add_argument("--n", type=int, default=100)

    p = command("mc-validate", "Monte Carlo validation of the variance theory")
    p.add_argument("--params", default="prior")
    p.add_argument("--experiment", default="mape", choices=["mape", "mse", "partial"])
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n-values", default="50,100,200")
    p.add_argument("--draws", type=int, default=50)

    p = command("cramer-rao", "V_e curve over the confounder fraction k")
    p.add_argument("--params", default="default")
    p.add_argument("--grid", type=float, default=0.005)

    p = command("mle-partial", "joint MLE from a confounder and a mediator dataset")
    p.add_argument("--confounder")
    p.add_argument("--mediator")
    p.add_argument("--data", help="full dataset to split at random instead")
    p.add_argument("--split", type=int, default=0, help="confounder rows when splitting")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--bootstrap-reps", type=int, default=100)
    p.add_argument("--multi-start", type=int, default=0)

    p = command("if-estimate", "influence-function ATE for a binary treatment")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="all",
                   choices=["all", "restricted", "fulcher", "frontdoor"])
    p.add_argument("--keep-x-in-outcome", action="store_true",
                   help="restricted variant: restrict only the mediator density")

    p = command("ihdp-gen", "semi-synthetic covariates, datasets and protocol runs")
    p.add_argument("--covariates", help="CSV with x and w1..wk; synthetic if omitted")
    p.add_argument("--rows", type=int, default=747)
    p.add_argument("--treated-rate", type=float, default=0.19)
    p.add_argument("--setting", default="S1", choices=["S1", "S2", "s1", "s2"])
    p.add_argument("--setting-sample", action="store_true",
                   help="write one simulated dataset for --setting")
    p.add_argument("--reps", type=int, default=0, help="run the protocol with this many reps")

    p = command("bootstrap", "pairs-bootstrap variance and MSE of estimators")
    p.add_argument("--data", required=True)
    p.add_argument("--estimators", default="backdoor,frontdoor,combined")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--truth", type=float, default=None)
    p.add_argument("--center", action="store_true")
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser, argv, args):
    """Re-parse with defaults taken from the ``--config`` file."""
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        cp.read_string("[run]\n" + path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cp["run"].items():
        dest = key.strip().replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                value = action.type(raw.strip())
            except ValueError:
                raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from None
        else:
            value = raw.strip()
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key!r} must be one of {list(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _fail(exc: OverIdError) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return exc.exit_code


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    collector = _WarningCollector()
    root = logging.getLogger("overid")
    root.addHandler(collector)
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, argv, args)
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "dry_run"}
        if args.dry_run:
            print(json.dumps(_clean(resolved), indent=2, sort_keys=True))
            return 0
        results = COMMANDS[args.command](args)
        params = getattr(args, "params", None)
        if params not in (None, "prior"):
            params = parse_params(params).as_dict()
        report = {
            "command": args.command,
            "seed": args.seed,
            "params": params,
            "results": results,
            "warnings": collector.messages,
        }
        text = json.dumps(_clean(report), indent=2, sort_keys=True)
        if args.report:
            Path(args.report).write_text(text + "\n")
        print(text)
        return 0
    except OSError as exc:
        return _fail(ConfigError(str(exc)))
    except OverIdError as exc:
        return _fail(exc)
    finally:
        root.removeHandler(collector)


def main() -> None:
    sys.exit(run())
