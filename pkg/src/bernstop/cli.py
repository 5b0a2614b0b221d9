"""Command-line interface: ``bernstop <command> [options]``.

Every artifact embeds the normalized options that produced it (output paths
excluded), so ``bernstop replay`` can regenerate it byte for byte.

Exit status: 0 success, 1 replay mismatch, 2 invalid options or input,
3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import designers, evaluation, imaging, oracle, trellis
from .beta_core import BetaParams

SCHEMA_VERSION = 1
OUTPUT_KEYS = ("out", "json_out", "csv_out", "svg", "func", "verify")
THREADS_ENV = "BERNSTOP_THREADS"
CSV_COLUMNS = ("method", "x", "expected_trials", "mse")


class SpecError(ValueError):
    """Invalid experiment specification."""


class NonConvergence(RuntimeError):
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


# --- schemas ---------------------------------------------------------------

_NUM = {"type": "number"}
_SPEC = {"type": "object", "required": ["command"], "properties": {"command": {"type": "string"}}}

SCHEMAS = {
    "design": {
        "type": "object",
        "required": ["schema", "spec", "result"],
        "properties": {
            "spec": _SPEC,
            "result": {
                "type": "object",
                "required": ["depth", "expected_trials", "expected_bayes_risk", "continuing", "fractional"],
                "properties": {"depth": {"type": "integer", "minimum": 0},
                               "expected_trials": {"type": "number", "minimum": 0},
                               "expected_bayes_risk": {"type": "number", "minimum": 0},
                               "continuing": {"type": "integer", "minimum": 0},
                               "fractional": {"type": "array"}},
            },
        },
    },
    "gain": {
        "type": "object",
        "required": ["schema", "spec", "result"],
        "properties": {
            "spec": _SPEC,
            "result": {"type": "object", "required": ["gain_linear", "gain_db"],
                       "properties": {"gain_linear": {"type": "number", "minimum": 1 - 1e-12},
                                      "gain_db": _NUM}},
        },
    },
    "image": {
        "type": "object",
        "required": ["schema", "spec", "result"],
        "properties": {
            "spec": _SPEC,
            "result": {"type": "object", "required": ["summary", "rows"],
                       "properties": {"summary": {"type": "object"},
                                      "rows": {"type": "array", "items": {
                                          "type": "object", "required": ["run", "method", "mse"],
                                          "properties": {"mse": {"type": "number", "minimum": 0}}}}}},
        },
    },
    "table": {
        "type": "object",
        "required": ["schema", "spec", "result"],
        "properties": {
            "spec": _SPEC,
            "result": {"type": "object", "required": ["rows"],
                       "properties": {"rows": {"type": "array", "items": {
                           "type": "object", "required": list(CSV_COLUMNS)}}}},
        },
    },
}


# --- helpers ---------------------------------------------------------------

def _prior(values) -> BetaParams:
    try:
        return BetaParams(*values)
    except ValueError as exc:
        raise SpecError(str(exc)) from None


def _spec(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in OUTPUT_KEYS}


def _clean(obj):
    """Make a payload JSON-safe: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (trellis.Estimand, imaging.ReconMethod, evaluation.Estimator)):
        return obj.value
    return obj


def dumps_json(payload: dict) -> str:
    return json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n"


def _artifact(kind: str, args, result: dict) -> dict:
    return {"schema": f"bernstop/{kind}/{SCHEMA_VERSION}", "spec": _spec(args), "result": result}


def _write(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(args, payload: dict):
    text = dumps_json(payload)
    target = getattr(args, "json_out", None)
    if target:
        _write(target, text)
    else:
        sys.stdout.write(text)


def table_csv(rows, spec: dict) -> str:
    buf = io.StringIO()
    buf.write("# spec " + json.dumps(_clean(spec), sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r["method"]] + [repr(float(r[c])) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def _svg_plot(path, series: dict, xlabel: str, ylabel: str, logy: bool = True):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise SpecError("--svg needs matplotlib installed") from None
    matplotlib.rcParams["svg.hashsalt"] = "bernstop"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        xs, ys = series[label]
        ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _series(rows):
    out = {}
    for r in rows:
        xs, ys = out.setdefault(r["method"], ([], []))
        xs.append(r["x"])
        ys.append(r["mse"])
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SpecError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


# --- rule construction -----------------------------------------------------

def _build_rule(args) -> trellis.StoppingRule:
    prior = _prior(args.prior)
    est = trellis.Estimand.parse(args.estimand)
    method = args.method
    if method == "binomial":
        if args.n is None:
            raise SpecError("binomial design needs --n")
        return designers.binomial_rule(args.n, args.depth or args.n, prior=prior, estimand=est)
    if method == "negbinomial":
        if args.l is None or args.depth is None and args.eta is None:
            raise SpecError("negbinomial design needs --l and either --depth or --eta")
        depth = args.depth or designers.negbinomial_depth_for_budget(args.l, args.eta, prior)
        return designers.negbinomial_rule(args.l, depth, prior=prior, estimand=est)
    try:
        cfg = designers.DesignConfig(prior, est, args.depth, args.lam, args.eta, args.dmin)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    return designers.design(cfg, method)


def _rule_from_args(args) -> trellis.StoppingRule:
    if getattr(args, "rule", None):
        try:
            return trellis.load_rule(args.rule)
        except (OSError, ValueError) as exc:
            raise SpecError(f"cannot read rule file: {exc}") from None
    return _build_rule(args)


def _leaves(rule, prior):
    u = trellis.reach_probabilities(rule, prior)
    out = []
    for m in range(rule.depth + 1):
        start = m * (m + 1) // 2
        for k in np.flatnonzero(u[start:start + m + 1] > 0.0):
            if rule.get(int(k), m) < 1.0:
                out.append([int(k), m])
    return out


# --- commands ----------------------------------------------------------------

def cmd_design(args):
    rule = _rule_from_args(args)
    prior = _prior(args.prior)
    problem = trellis.validate(rule)
    if problem:
        raise SpecError(f"designed rule is invalid: {problem}")
    metrics = trellis.evaluate(rule, prior, args.estimand)
    result = {
        "name": rule.name,
        "depth": rule.depth,
        "expected_trials": metrics.expected_trials,
        "expected_bayes_risk": metrics.expected_bayes_risk,
        "continuing": len(rule.continuing_nodes()),
        "fractional": [[v.k, v.m, rule.get(*v)] for v in rule.fractional_nodes()],
        "meta": dict(rule.meta),
    }
    leaves = _leaves(rule, prior)
    result["leaf_count"] = len(leaves)
    if len(leaves) <= 2000:
        result["leaves"] = leaves
    if args.out:
        trellis.save_rule(rule, args.out)
    _emit(args, _artifact("design", args, result))
    return 0


def cmd_eval(args):
    rule = _rule_from_args(args)
    prior = rule.prior or _prior(args.prior)
    est = trellis.Estimand.parse(args.estimand)
    ps = (np.arange(args.points) + 0.5) / args.points
    h = evaluation.conditional_expected_trials(rule, ps)
    try:
        mse = evaluation.conditional_mse(rule, ps, args.estimator, est, prior)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    label = rule.name or args.method or "rule"
    rows = [{"method": label, "x": float(p), "expected_trials": float(a), "mse": float(b)}
            for p, a, b in zip(ps, h, mse)]
    metrics = trellis.evaluate(rule, prior, est)
    result = {"rows": rows, "prior_expected_trials": metrics.expected_trials,
              "prior_bayes_risk": metrics.expected_bayes_risk}
    if args.csv_out:
        _write(args.csv_out, table_csv(rows, _spec(args)))
    if args.svg:
        _svg_plot(args.svg, _series(rows), "p", "conditional MSE")
    _emit(args, _artifact("table", args, result))
    return 0


def _scene_from_args(args):
    if args.phantom is not None and args.scene is not None:
        raise SpecError("give either --phantom or --scene, not both")
    lo, hi = args.range
    if args.phantom is not None:
        try:
            return imaging.rescale(imaging.shepp_logan(args.phantom), lo, hi)
        except ValueError as exc:
            raise SpecError(str(exc)) from None
    if args.scene is not None:
        try:
            return imaging.load_scene(args.scene, lo, hi)
        except (OSError, ValueError) as exc:
            raise SpecError(f"cannot load scene: {exc}") from None
    return None


def cmd_gain(args):
    sources = [args.phantom is not None or args.scene is not None, args.values is not None, args.beta is not None]
    if sum(sources) != 1:
        raise SpecError("give exactly one of --phantom/--scene, --values, --beta")
    if args.beta is not None:
        report = oracle.allocation_gain_beta(_prior(args.beta))
        result = {"gain_linear": report.gain_linear, "gain_db": report.gain_db, **report.details}
    else:
        if args.values is not None:
            try:
                values = [float(v) for v in args.values.split(",")]
                params = oracle.ParamSet(values)
            except ValueError as exc:
                raise SpecError(f"bad --values: {exc}") from None
        else:
            params = oracle.ParamSet(_scene_from_args(args).p)
        report = oracle.allocation_gain_discrete(params)
        result = {"gain_linear": report.gain_linear, "gain_db": report.gain_db, "r": params.r,
                  "empirical_variance_form": oracle.allocation_gain_empirical(params).gain_linear}
        if args.phantom == 100 and tuple(args.range) == (0.001, 0.101):
            result["reported_comparison"] = oracle.closest_reported_gain(report.gain_linear)
    _emit(args, _artifact("gain", args, result))
    return 0


def cmd_sweep(args):
    prior = _prior(args.prior)
    scene = _scene_from_args(args)
    if scene is not None:
        population = evaluation.Population.from_values(scene.p)
    elif args.population_beta is not None:
        population = evaluation.Population.from_prior(_prior(args.population_beta))
    else:
        population = evaluation.Population.from_prior(prior)
    try:
        budgets = [float(b) for b in args.budgets.split(",")]
    except ValueError:
        raise SpecError("--budgets must be a comma-separated list of numbers") from None
    methods = [m.strip() for m in args.methods.split(",")]
    raw = evaluation.mse_vs_budget_sweep(population, prior, budgets, methods, args.estimator)
    rows = [{"method": r["method"], "x": r["eta"], "expected_trials": r["expected_trials"], "mse": r["mse"]}
            for r in raw]
    if args.csv_out:
        _write(args.csv_out, table_csv(rows, _spec(args)))
    if args.svg:
        _svg_plot(args.svg, _series(rows), "mean trials per pixel", "MSE")
    _emit(args, _artifact("table", args, {"rows": rows, "population": population.label}))
    return 0


def cmd_image(args):
    scene = _scene_from_args(args)
    if scene is None:
        raise SpecError("image needs --phantom or --scene")
    prior = _prior(args.prior)
    methods = [m.strip() for m in args.methods.split(",")]
    weights = imaging.tv_weight_grid(args.tv_base, *args.tv_exp)
    try:
        res = imaging.run_image_experiment(scene, prior, args.eta, methods, args.recon, args.runs,
                                           args.seed, _threads(args), weights)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    rows = [{k: v for k, v in r.items() if k != "tv_mse"} for r in res.rows]
    result = {"summary": res.summary, "rows": rows, "tv_sweep": res.tv_sweep,
              "allocation_gain_db": oracle.allocation_gain_discrete(oracle.ParamSet(scene.p)).gain_db}
    unconverged = [r for r in res.rows if not r.get("converged", True)]
    _emit(args, _artifact("image", args, result))
    if unconverged:
        raise NonConvergence(f"{len(unconverged)} TV solves did not converge",
                             {"runs": [(r["run"], r["method"]) for r in unconverged]})
    return 0


def check_artifact(path) -> list[str]:
    """Validate a JSON or CSV artifact; return a list of problems (empty if valid)."""
    import jsonschema

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    problems = []
    if path.suffix.lower() == ".csv":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# spec "):
            return ["missing '# spec' header line"]
        try:
            json.loads(lines[0][len("# spec "):])
        except json.JSONDecodeError:
            problems.append("spec line is not valid JSON")
        reader = csv.reader(lines[1:])
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            return problems + [f"unexpected columns {header}"]
        for i, row in enumerate(reader, start=3):
            if len(row) != len(CSV_COLUMNS):
                problems.append(f"line {i}: expected {len(CSV_COLUMNS)} fields")
                continue
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                problems.append(f"line {i}: non-numeric value")
                continue
            if vals[1] < 0 or vals[2] < 0:
                problems.append(f"line {i}: negative trials or MSE")
        return problems
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        return [f"invalid JSON: {exc}"]
    tag = str(doc.get("schema", ""))
    parts = tag.split("/")
    if len(parts) != 3 or parts[0] != "bernstop" or parts[1] not in SCHEMAS:
        return [f"unknown schema tag {tag!r}"]
    validator = jsonschema.Draft202012Validator(SCHEMAS[parts[1]])
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.path)):
        loc = "/".join(str(p) for p in err.path) or "<root>"
        problems.append(f"{loc}: {err.message}")
    return problems


def cmd_check(args):
    bad = 0
    for path in args.paths:
        try:
            problems = check_artifact(path)
        except OSError as exc:
            problems = [str(exc)]
        status = "ok" if not problems else "invalid"
        sys.stdout.write(f"{path}: {status}\n")
        for p in problems:
            sys.stdout.write(f"  {p}\n")
        bad += bool(problems)
    return 2 if bad else 0


def cmd_replay(args):
    try:
        original = json.loads(Path(args.artifact).read_text(encoding="utf-8"))
        spec = dict(original["spec"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SpecError(f"cannot read artifact spec: {exc}") from None
    command = spec.get("command")
    if command not in _COMMANDS or command in ("check", "replay"):
        raise SpecError(f"artifact spec has no replayable command ({command!r})")
    ns = _parser().parse_args([command])
    for key, value in spec.items():
        setattr(ns, key, value)
    for key in OUTPUT_KEYS:
        if key != "func":
            setattr(ns, key, None)
    ns.json_out = args.json_out
    buf = io.StringIO()
    if ns.json_out is None:
        real, sys.stdout = sys.stdout, buf
        try:
            status = _COMMANDS[command](ns)
        finally:
            sys.stdout = real
        text = buf.getvalue()
        sys.stdout.write(text)
    else:
        status = _COMMANDS[command](ns)
        text = Path(ns.json_out).read_text(encoding="utf-8")
    if args.verify:
        same = json.loads(text)["result"] == original["result"]
        sys.stderr.write("replay matches\n" if same else "replay differs\n")
        return status if same else 1
    return status


_COMMANDS = {"design": cmd_design, "eval": cmd_eval, "gain": cmd_gain, "sweep": cmd_sweep,
             "image": cmd_image, "check": cmd_check, "replay": cmd_replay}


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SpecError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _add_rule_options(p):
    p.add_argument("--prior", nargs=2, type=float, default=[1.0, 1.0], metavar=("ALPHA", "BETA"))
    p.add_argument("--estimand", choices=["p", "logp"], default="p")
    p.add_argument("--method", choices=list(designers.DESIGNERS), default=None)
    p.add_argument("--lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--dmin", type=float)
    p.add_argument("--n", type=int, help="sample size for the binomial rule")
    p.add_argument("--l", type=int, help="success count for the negative binomial rule")
    p.add_argument("--depth", type=_positive_int)


def _add_scene_options(p, default_range=(0.001, 0.101)):
    p.add_argument("--phantom", type=_positive_int, help="Shepp-Logan phantom size")
    p.add_argument("--scene", help="PGM or CSV image")
    p.add_argument("--range", nargs=2, type=float, default=list(default_range), metavar=("LO", "HI"))


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bernstop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("design", help="design a stopping rule")
    _add_rule_options(p)
    p.add_argument("--out", help="rule file to write")
    p.add_argument("--json", dest="json_out", help="summary JSON path (default stdout)")

    p = sub.add_parser("eval", help="conditional E[N|p] and MSE of a rule on a p grid")
    _add_rule_options(p)
    p.add_argument("--rule", help="rule file (instead of design options)")
    p.add_argument("--points", type=_positive_int, default=99)
    p.add_argument("--estimator", choices=["mmse", "ml"], default="mmse")
    p.add_argument("--csv", dest="csv_out")
    p.add_argument("--json", dest="json_out")
    p.add_argument("--svg")

    p = sub.add_parser("gain", help="trial allocation gain")
    _add_scene_options(p)
    p.add_argument("--values", help="comma-separated probabilities")
    p.add_argument("--beta", nargs=2, type=float, metavar=("ALPHA", "BETA"))
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("sweep", help="MSE against trial budget")
    _add_scene_options(p)
    p.add_argument("--prior", nargs=2, type=float, default=[1.0, 1.0], metavar=("ALPHA", "BETA"))
    p.add_argument("--population-beta", nargs=2, type=float, metavar=("ALPHA", "BETA"),
                   help="average over a Beta population instead of a scene")
    p.add_argument("--budgets", default="50,100,200,400,800")
    p.add_argument("--methods", default="binomial,threshold,oracle")
    p.add_argument("--estimator", choices=["mmse", "ml"], default="mmse")
    p.add_argument("--csv", dest="csv_out")
    p.add_argument("--json", dest="json_out")
    p.add_argument("--svg")

    p = sub.add_parser("image", help="Monte-Carlo imaging experiment")
    _add_scene_options(p)
    p.add_argument("--prior", nargs=2, type=float, default=[2.0, 152.0], metavar=("ALPHA", "BETA"))
    p.add_argument("--eta", type=float, default=200.0)
    p.add_argument("--methods", default="binomial,threshold")
    p.add_argument("--recon", choices=["mmse", "ml", "tv"], default="mmse")
    p.add_argument("--runs", type=_positive_int, default=20)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--tv-base", type=float, default=1.0)
    p.add_argument("--tv-exp", nargs=2, type=int, default=[0, 9], metavar=("LO", "HI"))
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("check", help="validate artifacts against their schemas")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("replay", help="re-run the spec embedded in a JSON artifact")
    p.add_argument("artifact")
    p.add_argument("--json", dest="json_out")
    p.add_argument("--verify", action="store_true", help="exit 1 if results differ from the artifact")
    return parser


def _error(kind: str, message: str, status: int, details=None) -> int:
    payload = {"error": {"kind": kind, "message": message, "status": status}}
    if details:
        payload["error"]["details"] = details
    sys.stderr.write(dumps_json(payload))
    return status


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command == "design" and args.method is None and getattr(args, "rule", None) is None:
            raise SpecError("design needs --method")
        return _COMMANDS[args.command](args)
    except SpecError as exc:
        return _error("spec", str(exc), 2)
    except NonConvergence as exc:
        return _error("non-convergence", str(exc), 3, exc.details)
    except OSError as exc:
        return _error("io", str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
