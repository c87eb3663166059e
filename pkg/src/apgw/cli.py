"""Command-line workflow: ``apgw fit | compare | simulate | curves | replicate-paper``.

Exit codes: 0 success, 2 invalid input or configuration, 3 a fit failed to
converge (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

from . import __version__
from . import inference, simulate
from .errors import ApgwError, ConfigError, NoFiniteStartError
from .io import (
    RunManifest,
    Stopwatch,
    atomic_write,
    config_hash,
    default_out_dir,
    file_digest,
    load_config,
    load_dataset,
    parse_assignments,
    parse_grid,
    parse_profile,
    to_json,
    write_dataset,
    write_table,
)
from .model import ModelSpec, RegressionCoefficients, TwoScalesWarning
from .optimizer import FitResult, OptimizerConfig, fit

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3
COMPARE_DEFAULT = ("M(beta)", "M(tau)", "M(beta,alpha)", "M(tau,alpha)", "M(beta,nu)", "M(tau,nu)")


class _Run:
    """Collects settings, inputs and outputs of one invocation for the manifest."""

    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config) if getattr(args, "config", None) else {}
        self.inputs = {}
        if getattr(args, "config", None):
            self.inputs[str(args.config)] = file_digest(args.config)
        self.outputs = []
        self.clock = Stopwatch()
        self.out_dir = default_out_dir(getattr(args, "out_dir", None) or self.get("output", "out_dir"))

    def get(self, section, key, flag=None, default=None):
        """Flag value if given, else config value, else default."""
        if flag is not None:
            return flag
        return self.config.get(section, {}).get(key, default)

    def require(self, section, key, flag, name):
        value = self.get(section, key, flag)
        if value is None:
            raise ConfigError(f"missing {name} (flag {name} or config key {section}.{key})")
        return value

    def write(self, name, content) -> Path:
        path = atomic_write(self.out_dir / name, content)
        self.outputs.append(str(path))
        return path

    def table(self, name, rows, header_lines=()) -> Path:
        path = write_table(self.out_dir / name, rows, header_lines)
        self.outputs.append(str(path))
        return path

    def finish(self, settings, seed, status="ok"):
        manifest = RunManifest(
            command=self.args.command,
            config_hash=config_hash(settings),
            seed=seed,
            input_digests=self.inputs,
            version=__version__,
            wall_clock=self.clock.elapsed(),
            outputs=list(self.outputs),
            argv=list(sys.argv[1:]),
            status=status,
        )
        manifest.write(self.out_dir)


# ---------------------------------------------------------------------------
# shared pieces


def _optimizer(run: _Run) -> OptimizerConfig:
    cfg = dict(run.config.get("optimizer", {}))
    if run.args.seed is not None:
        cfg["seed"] = run.args.seed
    if getattr(run.args, "n_starts", None) is not None:
        cfg["n_starts"] = run.args.n_starts
    try:
        return OptimizerConfig(**cfg)
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}") from exc


def _dataset(run: _Run):
    a = run.args
    path = run.require("data", "path", a.data, "--data")
    time_col = run.get("data", "time", a.time, "time")
    status_col = run.get("data", "status", a.status, "status")
    cov_text = run.get("data", "covariates", a.covariates, "")
    covariates = [c.strip() for c in cov_text.split(",") if c.strip()]
    data = load_dataset(path, time_col, status_col, covariates)
    run.inputs[str(path)] = file_digest(path)
    return data, {"path": str(path), "time": time_col, "status": status_col, "covariates": covariates}


def _fixed(run: _Run) -> dict:
    fixed = parse_assignments(run.config.get("model", {}).get("fix", ""), "model.fix")
    for item in run.args.fix or ():
        fixed.update(parse_assignments(item, "--fix"))
    return fixed


def _allow_two(run: _Run) -> bool:
    return bool(run.args.allow_two_scales or run.config.get("model", {}).get("allow_two_scales", False))


def _spec(run: _Run, text: str, names) -> ModelSpec:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TwoScalesWarning)
        return ModelSpec.parse(text, names, _fixed(run), _allow_two(run))


def _fmt(v, width=10, digits=4):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return f"{'-':>{width}}"
    return f"{v:>{width}.{digits}f}"


def fit_report(res: FitResult, data=None) -> str:
    lines = [f"model            {res.spec.label}"]
    if res.spec.fixed_values:
        lines.append("fixed            " + ", ".join(f"{b}{i}={v:g}" for (b, i), v in sorted(res.spec.fixed_values.items())))
    if data is not None:
        lines.append(f"observations     {data.n} ({data.n_events} events)")
    lines += [
        f"log-likelihood   {res.loglik:.6f}",
        f"parameters       {res.n_params}",
        f"AIC              {res.aic:.4f}",
        f"BIC              {res.bic:.4f}",
        f"converged        {'yes' if res.converged else 'no'} ({res.n_iter} iterations, max |score| {res.gradient_norm:.2e})",
    ]
    if res.condition_warning:
        lines.append(f"warning          {res.condition_warning}")
    if res.flags:
        lines.append("flags            " + ", ".join(res.flags))
    lines.append("")
    lines.append(f"{'coefficient':<14}{'term':<18}{'estimate':>10}{'se':>10}{'lower95':>10}{'upper95':>10}")
    for row in inference.coefficient_table(res):
        if not row["estimated"]:
            continue
        se = row["se"]
        lo = hi = None
        if se is not None:
            lo, hi = row["estimate"] - 1.959963984540054 * se, row["estimate"] + 1.959963984540054 * se
        lines.append(
            f"{row['key']:<14}{row['term'][:17]:<18}{_fmt(row['estimate'])}{_fmt(se)}{_fmt(lo)}{_fmt(hi)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_fit(run: _Run) -> int:
    data, data_settings = _dataset(run)
    model = run.require("model", "model", run.args.model, "--model")
    spec = _spec(run, model, data.names)
    opt = _optimizer(run)
    settings = {"data": data_settings, "model": model, "fixed": _fixed(run), "optimizer": opt.__dict__}
    res = fit(data, spec, opt)
    run.write("fit.json", to_json(res.to_dict()))
    run.write("fit_report.txt", fit_report(res, data))
    run.table("coefficients.csv", inference.coefficient_table(res))
    sys.stdout.write(fit_report(res, data))
    status = "ok" if res.converged else "not-converged"
    run.finish(settings, opt.seed, status)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_compare(run: _Run) -> int:
    data, data_settings = _dataset(run)
    models = run.args.models or None
    if models is None:
        # models are separated by ';' in config files since M() lists contain commas
        text = run.config.get("model", {}).get("models")
        models = [m.strip() for m in text.split(";") if m.strip()] if text else list(COMPARE_DEFAULT)
    opt = _optimizer(run)
    fits, failed = [], []
    for m in models:
        spec = _spec(run, m, data.names)
        try:
            fits.append(fit(data, spec, opt))
        except NoFiniteStartError as exc:
            failed.append((m, str(exc)))
    table = inference.model_table(fits)
    run.table("comparison.csv", table)
    run.write("fits.json", to_json([f.to_dict() for f in fits]))
    text = _comparison_text(table, failed)
    run.write("comparison.txt", text)
    sys.stdout.write(text)
    ok = not failed and all(f.converged for f in fits)
    settings = {"data": data_settings, "models": models, "fixed": _fixed(run), "optimizer": opt.__dict__}
    run.finish(settings, opt.seed, "ok" if ok else "not-converged")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def _comparison_text(table, failed) -> str:
    lines = [f"{'model':<22}{'dim':>5}{'loglik':>14}{'AIC':>12}{'BIC':>12}{'dAIC':>10}{'dBIC':>10}  conv"]
    for r in table:
        lines.append(
            f"{r['model']:<22}{r['dim']:>5}{r['loglik']:>14.4f}{r['aic']:>12.3f}{r['bic']:>12.3f}"
            f"{r['delta_aic']:>10.3f}{r['delta_bic']:>10.3f}  {'yes' if r['converged'] else 'no'}"
        )
    for m, msg in failed:
        lines.append(f"{m:<22}  failed: {msg}")
    return "\n".join(lines) + "\n"


def cmd_simulate(run: _Run) -> int:
    a = run.args
    n = int(run.require("simulate", "n", a.n, "--n"))
    law_text = run.get("simulate", "covariate_law", a.covariate_law, "none")
    try:
        law = simulate.CovariateLaw.parse(law_text)
    except ValueError as exc:
        raise ConfigError(f"covariate law: {exc}") from exc
    coefs = RegressionCoefficients.zeros(len(law.names))
    assigned = parse_assignments(run.get("simulate", "coefs", a.coefs, ""), "--coefs")
    try:
        coefs = coefs.replace(**assigned)
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"--coefs: {exc}") from exc
    target = float(run.get("simulate", "target_censoring", a.censoring, 0.3))
    seed = int(run.get("simulate", "seed", a.seed, 0))
    if not 0 <= target < 1:
        raise ConfigError("--censoring must lie in [0, 1)")
    rate = simulate.calibrate_censoring_rate(coefs, law, target, simulate.make_rng(seed, 0xCA1))
    data = simulate.simulate_dataset(coefs, n, law, rate, simulate.make_rng(seed, 0))
    path = write_dataset(data, run.out_dir / (a.name or "data.csv"))
    run.outputs.append(str(path))
    settings = {"n": n, "coefs": coefs.to_dict(), "law": law_text, "target": target, "rate": rate}
    run.write("truth.json", to_json({**settings, "seed": seed, "rng": simulate.RNG_ALGORITHM}))
    sys.stdout.write(f"wrote {data.n} rows ({1 - data.status.mean():.3f} censored, rate {rate:.5g}) to {path}\n")
    run.finish(settings, seed)
    return EXIT_OK


def cmd_curves(run: _Run) -> int:
    a = run.args
    fit_path = run.get("curves", "fit", a.fit)
    if fit_path:
        res = FitResult.from_dict(json.loads(Path(fit_path).read_text()))
        run.inputs[str(fit_path)] = file_digest(fit_path)
        settings = {"fit": str(fit_path)}
    else:
        data, data_settings = _dataset(run)
        model = run.require("model", "model", a.model, "--model")
        res = fit(data, _spec(run, model, data.names), _optimizer(run))
        settings = {"data": data_settings, "model": model}
    kind_text = run.require("curves", "kind", a.kind, "--kind")
    try:
        kind = inference.CurveKind(kind_text)
    except ValueError:
        raise ConfigError(f"--kind must be one of {[k.value for k in inference.CurveKind]}") from None
    profile = parse_profile(run.get("curves", "profile", a.profile, ""))
    if not profile and res.spec.p:
        profile = (0.0,) * res.spec.p
    comp_text = run.get("curves", "comparison", a.comparison)
    comparison = parse_profile(comp_text) if comp_text else None
    default_grid = "0.05:0.95:19" if kind is inference.CurveKind.QUANTILE_RATIO else "0.1:5:50"
    grid = parse_grid(run.get("curves", "grid", a.grid, default_grid))
    request = inference.CurveRequest(kind, profile, tuple(grid), comparison)
    values = inference.curve(res, request)
    xname = "u" if kind is inference.CurveKind.QUANTILE_RATIO else "t"
    header = [
        f"kind={kind.value}",
        f"model={res.spec.label}",
        f"covariates={','.join(res.spec.covariate_names)}",
        f"profile={','.join(f'{v:g}' for v in profile)}",
    ]
    if comparison is not None:
        header.append(f"comparison={','.join(f'{v:g}' for v in comparison)}")
    header.append(f"fit_digest={res.data_digest}")
    rows = [{xname: float(x), "value": float(v)} for x, v in zip(grid, values)]
    run.table(f"curve_{kind.value}.csv", rows, header)
    settings = {**settings, "kind": kind.value, "profile": profile, "comparison": comparison, "grid": grid.tolist()}
    run.finish(settings, None)
    sys.stdout.write(f"wrote {len(rows)} points to {run.outputs[-1]}\n")
    return EXIT_OK


def cmd_replicate(run: _Run) -> int:
    a = run.args
    table = str(run.require("study", "table", a.table, "--table"))
    reps = int(run.get("study", "replicates", a.replicates, 1000))
    n = run.get("study", "n", a.n)
    seed = int(run.get("study", "seed", a.seed, 2018))
    jobs = int(run.get("study", "jobs", a.jobs, 1))
    nu_text = run.get("study", "nu", a.nu)
    nu_grid = simulate.STUDY_NU_GRID
    if nu_text:
        try:
            nu_grid = tuple(float(v) for v in nu_text.split(","))
        except ValueError:
            raise ConfigError(f"--nu: cannot parse {nu_text!r}") from None
    try:
        scenario = simulate.study_scenario(table, int(n) if n else None, reps, seed, nu_grid)
    except ValueError as exc:
        raise ConfigError(f"--table: {exc}") from exc
    summary = simulate.run_study(scenario, n_jobs=jobs)
    rows = summary.rows()
    run.table(f"table{table}_summary.csv", rows, [f"table={table}", f"n={scenario.n}", f"replicates={reps}",
                                                   f"seed={seed}", f"rng={simulate.RNG_ALGORITHM}"])
    cens = [{"nu": nu, "rate": summary.censoring_rates[nu], "realized": summary.realized_censoring(nu)}
            for nu in scenario.nu_grid]
    run.table(f"table{table}_censoring.csv", cens)
    probe_rows = []
    for r in summary.records:
        row = {"nu": r.nu, "replicate": r.replicate, "model": r.model, "converged": r.converged}
        for u, v in zip(scenario.probe_u, r.probes):
            row[f"S0_at_Q0({u:g})"] = float(v)
        probe_rows.append(row)
    run.table(f"table{table}_probes.csv", probe_rows)
    sys.stdout.write(_summary_text(rows))
    settings = {"table": table, "replicates": reps, "n": scenario.n, "nu": list(scenario.nu_grid)}
    run.finish(settings, seed)
    return EXIT_OK


def _summary_text(rows) -> str:
    lines = [f"{'nu':>8}  {'model':<20}{'coef':<8}{'median':>10}{'sd':>10}{'conv':>7}"]
    for r in rows:
        if not r["estimated"]:
            continue
        lines.append(f"{r['nu']:>8.3f}  {r['model']:<20}{r['coefficient']:<8}{_fmt(r['median'])}{_fmt(r['sd'])}"
                     f"{r['convergence_rate']:>7.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


def _data_flags(p):
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--time", help="time column (default: time)")
    p.add_argument("--status", help="event indicator column, 1 = event (default: status)")
    p.add_argument("--covariates", help="comma-separated covariate columns")


def _model_flags(p):
    p.add_argument("--fix", action="append", metavar="KEY=VALUE", help="freeze a coefficient, e.g. nu0=0.6931")
    p.add_argument("--allow-two-scales", action="store_true", help="permit estimating tau and beta together")
    p.add_argument("--n-starts", type=int, help="optimizer starts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apgw", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file; flags override its values")
    common.add_argument("--out-dir", help="output directory (default: $APGW_OUT_DIR or .)")
    common.add_argument("--seed", type=int, help="random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit one model")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--model", help='model in M() notation, e.g. "M(beta,alpha)"')

    p = sub.add_parser("compare", parents=[common], help="fit several models and tabulate AIC/BIC")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--models", nargs="+", help="models to compare (default: six single-shape models)")

    p = sub.add_parser("simulate", parents=[common], help="simulate a censored dataset")
    p.add_argument("--n", type=int, help="sample size")
    p.add_argument("--coefs", help='true coefficients, e.g. "tau0=0.8,alpha0=-0.3,nu0=0"')
    p.add_argument("--covariate-law", help="none, bernoulli:P or categorical:K")
    p.add_argument("--censoring", type=float, help="target censored fraction")
    p.add_argument("--name", help="output file name (default: data.csv)")

    p = sub.add_parser("curves", parents=[common], help="evaluate survivor, hazard or ratio curves")
    p.add_argument("--fit", help="fit.json written by the fit command")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--model")
    p.add_argument("--kind", help="survivor, hazard, hazard-ratio or quantile-ratio")
    p.add_argument("--profile", help="covariate values, comma separated")
    p.add_argument("--comparison", help="second profile for ratio curves")
    p.add_argument("--grid", help="start:stop:count or comma list")

    p = sub.add_parser("replicate-paper", parents=[common], help="run a built-in simulation study design")
    p.add_argument("--table", choices=sorted(simulate.STUDY_SIZES), help="study design")
    p.add_argument("--replicates", type=int)
    p.add_argument("--n", type=int, help="override the sample size")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--nu", help="comma-separated nu values (default: full grid)")
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "curves": cmd_curves,
    "replicate-paper": cmd_replicate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _Run(args)
        return COMMANDS[args.command](run)
    except NoFiniteStartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (ApgwError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
