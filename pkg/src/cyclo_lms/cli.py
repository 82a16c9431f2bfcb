"""Command-line front end.

Commands
--------
analyze    theoretical learning curves and steady-state MSE
simulate   Monte Carlo learning curves
stability  step-size thresholds and spectral radii
compare    theory against simulation with agreement statistics

Every output embeds a manifest of the invocation. Passing that manifest back
with ``--manifest`` replays the run and reproduces the output bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

from cyclo_lms import __version__
from cyclo_lms.cyclolinalg import NumericalError
from cyclo_lms.lms_sim import AllDivergedError, compare_curves, monte_carlo_mse
from cyclo_lms.lms_theory import UnstableError, run_theory, stability_report, steady_state
from cyclo_lms.moment_matrices import build_moment_matrices
from cyclo_lms.scenarios import ConfigError, load_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_DIVERGED = 3

SCHEMA_VERSION = 1
COMMANDS = ("analyze", "simulate", "stability", "compare")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_mus(text: str) -> list[float]:
    try:
        mus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid step-size list {text!r}") from exc
    if not mus or any(not mu > 0 for mu in mus):
        raise argparse.ArgumentTypeError("step sizes must be positive")
    return mus


def parse_grid(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step, got {text!r}") from exc
    if start <= 0 or step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("grid needs 0 < start <= stop and step > 0")
    return start, stop, step


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclo-lms", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", help="built-in name or JSON config path")
        p.add_argument("--manifest", type=Path, help="replay the run recorded in a manifest file")
        p.add_argument("--mu", type=parse_mus, help="comma-separated step sizes")
        p.add_argument("--out", type=Path, help="output directory (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        if name in ("analyze", "simulate", "compare"):
            p.add_argument("--horizon", type=int, default=None)
        if name in ("simulate", "compare"):
            p.add_argument("--trials", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
        if name == "stability":
            p.add_argument("--grid", type=parse_grid, default=None)
    return parser


# ------------------------------------------------------------- manifest


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    seconds = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(seconds))


def read_manifest(path: Path) -> dict:
    """Manifest from a manifest JSON file, a JSON report or a CSV output."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc
    first = text.splitlines()[0] if text else ""
    try:
        if first.startswith("# manifest: "):
            return json.loads(first[len("# manifest: ") :])
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} holds no readable manifest: {exc}") from exc
    return data.get("manifest", data)


def resolve(args, scenario_default_mus, default_seed) -> dict:
    """Fill defaults and return the run parameters."""
    params = {"mu": args.mu or list(scenario_default_mus)}
    if not params["mu"]:
        raise UsageError("no step sizes given and the scenario has no defaults")
    if hasattr(args, "horizon"):
        params["horizon"] = args.horizon if args.horizon is not None else 4000
        if params["horizon"] < 1:
            raise UsageError("--horizon must be positive")
    if hasattr(args, "trials"):
        params["trials"] = args.trials if args.trials is not None else 200
        params["seed"] = args.seed if args.seed is not None else default_seed
        if params["trials"] < 1:
            raise UsageError("--trials must be positive")
    if hasattr(args, "grid"):
        params["grid"] = list(args.grid) if args.grid is not None else None
    return params


# --------------------------------------------------------------- output


def render_table(columns, rows, manifest, fmt) -> str:
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "manifest": manifest, "columns": columns, "rows": rows}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if v is None else _fmt(v) for v in row])
    return buf.getvalue()


def render_report(doc, manifest) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "manifest": manifest, **doc}, indent=2) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit(outputs: dict, out_dir: Path | None) -> None:
    if out_dir is None:
        for i, text in enumerate(outputs.values()):
            if i:
                sys.stdout.write("\n")
            sys.stdout.write(text)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in outputs.items():
        (out_dir / name).write_text(text, encoding="utf-8")


def _ext(fmt):
    return "json" if fmt == "json" else "csv"


# ------------------------------------------------------------- commands


def cmd_analyze(scenario, params, manifest, fmt) -> tuple[dict, int]:
    mm = build_moment_matrices(scenario.input, params["mu"][0], scenario.period)
    curve_rows, ss_rows = [], []
    for mu in params["mu"]:
        mmu = mm.with_mu(mu)
        try:
            ss = steady_state(mmu, scenario.gt)
        except UnstableError:
            ss = None
        if ss is None:
            ss_rows.append([None, mu, None, None, "unstable"])
        else:
            for k, xi in enumerate(ss.xi):
                ss_rows.append([k, mu, float(xi), ss.ta_mse, "stable"])
        trace = run_theory(scenario.input, scenario.gt, mu, params["horizon"], h0=scenario.h0, mm=mmu)
        curve_rows.extend([n, mu, float(v)] for n, v in enumerate(trace.mse))
    ext = _ext(fmt)
    return {
        f"theory.{ext}": render_table(["n", "mu", "theory_mse"], curve_rows, manifest, fmt),
        f"steady_state.{ext}": render_table(["k", "mu", "xi_k", "ta_mse", "status"], ss_rows, manifest, fmt),
    }, EXIT_OK


def cmd_simulate(scenario, params, manifest, fmt) -> tuple[dict, int]:
    rows = []
    for mu in params["mu"]:
        curve = monte_carlo_mse(scenario, mu, params["horizon"], params["trials"], params["seed"])
        rows.extend(
            [n, mu, float(m), float(s), curve.n_diverged]
            for n, (m, s) in enumerate(zip(curve.mse, curve.stderr))
        )
    columns = ["n", "mu", "emp_mse", "stderr", "n_diverged"]
    return {f"empirical.{_ext(fmt)}": render_table(columns, rows, manifest, fmt)}, EXIT_OK


def cmd_stability(scenario, params, manifest, fmt) -> tuple[dict, int]:
    grid = tuple(params["grid"]) if params.get("grid") else None
    mm = build_moment_matrices(scenario.input, params["mu"][0], scenario.period)
    base = stability_report(mm, grid)
    thresholds = {
        "mu_mean_product_bound": base.mu_mean_product_bound,
        "mu_mean_eig_bound": base.mu_mean_eig_bound,
        "mu_mean_threshold": base.mu_mean_threshold,
        "mu_ms_sufficient": base.mu_ms_sufficient,
        "mu_ms_threshold": base.mu_ms_threshold,
    }
    ms_gap = None
    if base.mu_ms_sufficient is not None and base.mu_ms_threshold:
        ms_gap = (base.mu_ms_threshold - base.mu_ms_sufficient) / base.mu_ms_threshold
    # Grid thresholds are the largest passing point found, so a sufficient
    # bound that meets the exact boundary may exceed them by one resolution.
    tol = base.grid_resolution

    def below(a, b):
        return a <= b + tol * (1.0 + 1e-9)

    ordering = {
        "eig_bound_le_product_bound": below(base.mu_mean_eig_bound, base.mu_mean_product_bound),
        "product_bound_le_mean_threshold": below(base.mu_mean_product_bound, base.mu_mean_threshold),
        "ms_sufficient_le_threshold": None
        if base.mu_ms_sufficient is None
        else below(base.mu_ms_sufficient, base.mu_ms_threshold),
    }
    per_mu = []
    for mu in params["mu"]:
        r = stability_report(mm.with_mu(mu), thresholds=False)
        per_mu.append(
            {
                "mu": mu,
                "rho_phi": [float(v) for v in r.rho_phi],
                "rho_psi": [float(v) for v in r.rho_psi],
                "mean_convergent": r.mean_convergent,
                "ms_stable": r.ms_stable,
            }
        )
    doc = {
        "scenario": scenario.name,
        "thresholds": thresholds,
        "ms_threshold_gap": ms_gap,
        "grid_resolution": tol,
        "ordering": ordering,
        "precondition_flags": base.precondition_flags,
        "per_mu": per_mu,
    }
    return {"stability.json": render_report(doc, manifest)}, EXIT_OK


def cmd_compare(scenario, params, manifest, fmt) -> tuple[dict, int]:
    mm = build_moment_matrices(scenario.input, params["mu"][0], scenario.period)
    rows, summary = [], {}
    code = EXIT_OK
    for mu in params["mu"]:
        mmu = mm.with_mu(mu)
        report = stability_report(mmu, thresholds=False)
        if not report.ms_stable:
            raise UnstableError(report)
        trace = run_theory(scenario.input, scenario.gt, mu, params["horizon"], h0=scenario.h0, mm=mmu)
        curve = monte_carlo_mse(scenario, mu, params["horizon"], params["trials"], params["seed"])
        stats = compare_curves(trace.mse, curve)
        summary[repr(mu)] = stats
        if curve.n_diverged:
            code = EXIT_DIVERGED
        rows.extend(
            [n, mu, float(t), float(m), float(s)]
            for n, (t, m, s) in enumerate(zip(trace.mse, curve.mse, curve.stderr))
        )
    columns = ["n", "mu", "theory_mse", "emp_mse", "stderr"]
    return {
        f"compare.{_ext(fmt)}": render_table(columns, rows, manifest, fmt),
        "summary.json": render_report({"scenario": scenario.name, "agreement": summary}, manifest),
    }, code


HANDLERS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "stability": cmd_stability,
    "compare": cmd_compare,
}


def run(args) -> int:
    replay = read_manifest(args.manifest) if args.manifest else None
    if replay is not None:
        if replay.get("command") != args.command:
            raise UsageError(
                f"manifest records command {replay.get('command')!r}, not {args.command!r}"
            )
        scenario_ref = replay["scenario"]
    else:
        scenario_ref = args.scenario
    if not scenario_ref:
        raise UsageError("--scenario or --manifest is required")
    scenario = load_scenario(scenario_ref)
    if replay is not None:
        params = replay["parameters"]
        timestamp = replay["timestamp"]
        fmt = replay.get("format", args.format)
    else:
        params = resolve(args, scenario.default_mus, scenario.default_seed)
        timestamp = _timestamp()
        fmt = args.format
    manifest = {
        "tool": "cyclo-lms",
        "version": __version__,
        "command": args.command,
        "scenario": scenario_ref,
        "parameters": params,
        "format": fmt,
        "timestamp": timestamp,
    }
    outputs, code = HANDLERS[args.command](scenario, params, manifest, fmt)
    emit(outputs, args.out)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (UsageError, ConfigError) as exc:
        print(f"cyclo-lms: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AllDivergedError as exc:
        print(f"cyclo-lms: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericalError as exc:
        print(f"cyclo-lms: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"cyclo-lms: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
