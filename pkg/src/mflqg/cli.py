"""Command-line front end.

``mflqg <solve|simulate|verify|al-example> [--scenario FILE] [--dt REAL]
[--paths INT] [--seed INT] [--out DIR] [--format csv|json]``

Exit codes: 0 success, 1 validation or gate failure, 2 numerical blow-up,
3 verification failure, 64 usage error, 74 output error.
"""
from __future__ import annotations

import argparse
import gzip
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MFLQProblem, ScenarioError, ValidationError, al_problem, load_scenario_file, validate
from .riccati import BlowUpError
from .simulate import SimulationError, innovation_diagnostics, simulate_closed_loop
from .synthesis import Synthesis, analytic_cost, synthesize_all
from .verify import al_comparison, mc_cost, run_verification

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_BLOWUP = 2
EXIT_VERIFY = 3
EXIT_USAGE = 64
EXIT_IO = 74

COMMANDS = ("solve", "simulate", "verify", "al-example")
FLOAT_FMT = "%.17g"
DT_TOL = 1e-12

TABLE_SCHEMA = {
    "type": "object",
    "required": ["columns", "rows"],
    "properties": {
        "columns": {"type": "array", "items": {"type": "string"}},
        "rows": {"type": "array", "items": {"type": "array", "items": {"type": ["number", "string"]}}},
    },
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["passed", "checks"],
    "properties": {
        "passed": {"type": "boolean"},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "status", "statistic", "threshold"],
                "properties": {
                    "name": {"type": "string"},
                    "status": {"enum": ["pass", "fail"]},
                    "statistic": {"type": "number"},
                    "threshold": {"type": "number"},
                    "detail": {"type": "string"},
                },
            },
        },
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["files"],
    "properties": {
        "files": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "size", "sha256"],
                "properties": {
                    "name": {"type": "string"},
                    "size": {"type": "integer", "minimum": 0},
                    "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                },
            },
        }
    },
}

ERRATA = """\
# Errata

Discrepancies between the printed closed forms of the asset-liability
example and the solutions of the governing equations.  Each entry was
settled by an independent numerical solve.

1. Filter variance.  The printed denominator `e^{0.1t} - 4` makes the
   variance negative and singular near t = 1.386.  The Riccati equation
   gives `Sigma(t) = 0.08 (e^{0.1t} - 1) / (e^{0.1t} + 4)`, with
   `Sigma(1) = 1.6481e-3`.
2. Control offset exponent.  The printed factor `e^{0.03t}` should be
   `e^{0.06t}`.  The backward equation with beta = 0.06 gives
   `chi_0^t = e^{0.06t}`, so the offset is `-Lambda(t) + e^{0.06t}`.
3. Trace term in the optimal cost.  The terminal filter-variance term is
   `(1/2) tr(H Sigma_T)`, not `tr(H Sigma_T)`.  Monte Carlo cost estimates
   agree with kappa = 1/2 and reject kappa = 1 on a scenario with H = 1 and
   sigma0 = 0.25.
4. Gain equation.  The quadratic term of the Gamma equation uses
   `Gamma b B^{-1} b^T Gamma`, not `Gamma b B b^T Gamma`.  The two coincide
   in the scalar example since B = 1.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    command: str
    scenario_path: Path | None
    dt_override: float | None
    paths: int
    seed: int
    out_dir: Path
    format: str
    csv_paths: int = 100
    gzip: bool = False


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mflqg", description="Partially observed mean-field LQ solver.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", type=Path, help="scenario TOML file (not needed for al-example)")
    p.add_argument("--dt", type=_positive_float, help="time step; must divide the horizon")
    p.add_argument("--paths", type=_positive_int, default=20000, help="Monte Carlo paths (default 20000)")
    p.add_argument("--seed", type=_seed, default=42, help="noise seed (default 42)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--csv-paths", type=int, default=100, help="paths written to the path table (default 100)")
    p.add_argument("--gzip", action="store_true", help="gzip the path table")
    return p


def parse_args(argv) -> RunConfig:
    """Map command-line tokens to a :class:`RunConfig`.

    Raises
    ------
    UsageError
        On unknown flags, bad values or a missing scenario.
    """
    try:
        ns = build_parser().parse_args(list(argv))
    except argparse.ArgumentTypeError as exc:  # pragma: no cover - argparse wraps these
        raise UsageError(str(exc)) from exc
    if ns.command != "al-example" and ns.scenario is None:
        raise UsageError(f"{ns.command} requires --scenario")
    if ns.csv_paths < 0:
        raise UsageError("--csv-paths must be non-negative")
    return RunConfig(ns.command, ns.scenario, ns.dt, ns.paths, ns.seed, ns.out, ns.format, ns.csv_paths, ns.gzip)


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return FLOAT_FMT % float(v)


def _json_value(v):
    return v if isinstance(v, str) else float(v)


class OutputWriter:
    """Writes artifacts into ``out_dir`` and records them for the manifest."""

    def __init__(self, out_dir: Path, fmt: str = "csv", compress_paths: bool = False):
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.compress_paths = compress_paths
        self.files: dict[str, bytes] = {}
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"{self.out_dir}: {exc.strerror or exc}") from exc

    def _write(self, name: str, data: bytes) -> None:
        path = self.out_dir / name
        try:
            path.write_bytes(data)
        except OSError as exc:
            raise OSError(f"{path}: {exc.strerror or exc}") from exc
        self.files[name] = data

    def table(self, stem: str, header, rows, *, compress: bool = False) -> str:
        if self.fmt == "json":
            doc = {"columns": list(header), "rows": [[_json_value(v) for v in row] for row in rows]}
            data = (json.dumps(doc, separators=(",", ":")) + "\n").encode()
            name = f"{stem}.json"
        else:
            lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
            data = ("\n".join(lines) + "\n").encode()
            name = f"{stem}.csv"
        if compress:
            data = gzip.compress(data, mtime=0)
            name += ".gz"
        self._write(name, data)
        return name

    def text(self, name: str, text: str) -> None:
        self._write(name, text.encode())

    def json(self, name: str, doc) -> None:
        self._write(name, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())

    def manifest(self) -> dict:
        files = [
            {"name": n, "size": len(d), "sha256": hashlib.sha256(d).hexdigest()}
            for n, d in sorted(self.files.items())
        ]
        doc = {"files": files}
        self.json("manifest.json", doc)
        return doc


# --------------------------------------------------------------- pipeline


def _load(config: RunConfig) -> MFLQProblem:
    if config.command == "al-example" and config.scenario_path is None:
        problem = al_problem()
    else:
        try:
            problem = load_scenario_file(config.scenario_path)
        except FileNotFoundError as exc:
            raise ScenarioError(f"{config.scenario_path}: no such scenario file") from exc
    if config.dt_override is not None:
        T = problem.grid.horizon
        steps = round(T / config.dt_override)
        if steps < 1 or abs(steps * config.dt_override - T) > DT_TOL:
            raise UsageError(f"--dt {config.dt_override!r} does not divide the horizon {T!r}")
        problem = problem.regrid(steps)
    return problem


def _solve(problem: MFLQProblem, out: OutputWriter, log) -> Synthesis:
    report = validate(problem)
    for msg in report.messages:
        log(msg)
    if report.errors:
        raise ValidationError("; ".join(report.errors))
    s = synthesize_all(problem)
    header, table = s.bundle.columns()
    out.table("riccati", header, table)
    ac = analytic_cost(problem, s.reduced, s.bundle)
    rows = ac.as_rows() + [("a1_margin", report.a1_margin), ("a2_constant", report.a2_constant), ("kappa", ac.kappa)]
    out.table("cost", ["term", "value"], rows)
    out.text("errata.md", ERRATA)
    log(f"J_analytic = {FLOAT_FMT % ac.J}")
    return s


def _simulate(problem: MFLQProblem, s: Synthesis, config: RunConfig, out: OutputWriter, log) -> None:
    ens = simulate_closed_loop(problem, s.law, s.bundle, seed=config.seed, paths=config.paths)
    header, table = ens.columns(limit=config.csv_paths)
    out.table("paths", header, table, compress=config.gzip)
    mc = mc_cost(problem, s.reduced, ens)
    diag = innovation_diagnostics(ens)
    rows = [("paths", mc.path_count), ("seed", config.seed), ("J_mc", mc.J_mc), ("J_mc_stderr", mc.stderr)]
    grid = problem.grid
    for frac in (0.25, 0.5, 1.0):
        i = grid.index_of(frac * grid.horizon)
        err = ens.x[:, i] - ens.xhat[:, i]
        rows.append((f"filter_mse_t{frac:g}", float(np.mean(np.sum(err**2, axis=1)))))
        rows.append((f"trace_sigma_t{frac:g}", float(np.trace(s.bundle.Sigma[i]))))
    for j in range(problem.rt):
        for key in ("mean", "mean_stderr", "variance", "variance_stderr", "qv", "qv_stderr"):
            rows.append((f"innovation_{key}_{j}", float(diag[key][j])))
    out.table("summary", ["statistic", "value"], rows)
    log(f"J_mc = {FLOAT_FMT % mc.J_mc} +/- {FLOAT_FMT % mc.stderr}")


def _verify(problem: MFLQProblem, config: RunConfig, out: OutputWriter, log) -> bool:
    rep = run_verification(problem, paths=config.paths, seed=config.seed)
    out.text("verify_report.json", rep.to_json() + "\n")
    for c in rep.checks:
        log(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.statistic:.3e} (threshold {c.threshold:.3e})")
    return rep.passed


def _al_table(s: Synthesis, out: OutputWriter, log) -> float:
    rows = al_comparison(s.bundle, s.law)
    header = list(rows[0])
    out.table("al_comparison", header, [[r[h] for h in header] for r in rows])
    gap = max(abs(r["Gamma_num"] - r["Gamma_ref"]) for r in rows)
    log(f"max |Gamma_num - Gamma_ref| = {gap:.3e}")
    return gap


def execute(config: RunConfig, log=None) -> int:
    """Run a configured command and return its exit code."""
    log = log or (lambda msg: print(msg, file=sys.stderr))
    try:
        problem = _load(config)
        out = OutputWriter(config.out_dir, config.format, config.gzip)
        s = _solve(problem, out, log)
        ok = True
        if config.command in ("simulate", "al-example"):
            _simulate(problem, s, config, out, log)
        if config.command == "al-example":
            ok = _al_table(s, out, log) <= 1e-8
        if config.command in ("verify", "al-example"):
            ok = _verify(problem, config, out, log) and ok
        out.manifest()
    except UsageError as exc:
        log(f"usage error: {exc}")
        return EXIT_USAGE
    except (ScenarioError, ValidationError) as exc:
        log(f"error: {exc}")
        return EXIT_INVALID
    except (BlowUpError, SimulationError) as exc:
        log(f"numerical failure: {exc}")
        return EXIT_BLOWUP
    except OSError as exc:
        log(f"output error: {exc}")
        return EXIT_IO
    return EXIT_OK if ok else EXIT_VERIFY


def main(argv=None) -> int:
    try:
        config = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"mflqg: usage error: {exc}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    return execute(config)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
