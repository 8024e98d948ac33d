"""Command line front end: ``foliation {analyze,chart,fiber,foliate,decompose,verify}``.

Configuration is an INI file; every key is optional. Exit codes: 0 success,
1 classification ``Fails`` or a failed solve/verification, 2 configuration
error, 3 precondition violation (for instance a request outside the radius).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .chart import ChartError, verify_chart
from .flow import integrate, verify_fiber
from .lpsolver import (
    DecompositionError,
    FiberError,
    PreconditionError,
    decompose_initial_value,
    setup_foliation,
)
from .model import DomainError, UnknownProblemError, get_problem
from .spectral import SpectralError, check_normally_hyperbolic, linearize, split_spectrum

SCHEMA = "foliation.v1"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3

# section -> key -> (type, default)
_SCHEMA = {
    "problem": {"name": ("str", "line-stable"), "equilibrium": ("vector", None)},
    "params": {},  # free table of named reals, validated by the registry
    "spectral": {"eps_center": ("float", None)},
    "chart": {"rho_0": ("float", None), "use_psi": ("bool", True), "samples": ("int", 20)},
    "solver": {
        "sigma": ("float", None),
        "tol_residual": ("float", 1e-9),
        "N": ("int", 128),
        "T": ("float", None),
        "max_iters": ("int", 40),
        "radius": ("float", None),
    },
    "fiber": {"kind": ("str", "stable"), "boundary": ("vector", [0.1]), "xi": ("vector", [0.0]),
              "verify": ("bool", True), "horizon": ("float", None)},
    "foliate": {
        "kind": ("str", "stable"),
        "boundary_min": ("float", -0.1),
        "boundary_max": ("float", 0.1),
        "boundary_count": ("int", 11),
        "xi_min": ("float", -0.1),
        "xi_max": ("float", 0.1),
        "xi_count": ("int", 11),
        "workers": ("int", 1),
        "verify": ("bool", False),
    },
    "decompose": {"u0": ("vector", None), "tol": ("float", 1e-8)},
    "verify": {
        "kind": ("str", "stable"),
        "samples": ("int", 10),
        "boundary_max": ("float", 0.1),
        "xi_max": ("float", 0.1),
        "horizon": ("float", None),
        "flow_tol": ("float", 1e-12),
        "sample_every": ("int", 1),
    },
    "run": {"output_dir": ("str", "out"), "seed": ("int", 0)},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict
    params: dict
    echo: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if raw.lower() in ("", "none") and kind != "str":
            return None
        if kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError("not finite")
            return v
        if kind == "int":
            return int(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true/false")
        if kind == "vector":
            vals = [float(p) for p in raw.replace(";", ",").split(",") if p.strip()]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("not finite")
            return vals
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind} ({exc})") from None


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (N, T)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if section == "params":
            continue
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
    values, echo = {}, {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            raw = parser.get(section, key, fallback=None)
            values[section][key] = default if raw is None else _parse_value(kind, raw, f"{section}.{key}")
    params = {}
    if parser.has_section("params"):
        for key, raw in parser["params"].items():
            params[key] = _parse_value("float", raw, f"params.{key}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            values[section][key] = value
    _validate(values)
    for section in values:
        echo[section] = {k: v for k, v in values[section].items()}
    echo["params"] = dict(params)
    return RunConfig(values, params, echo)


def _validate(values):
    def need(cond, where, msg):
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    for section in ("fiber", "foliate", "verify"):
        kind = values[section]["kind"]
        need(kind in ("stable", "unstable"), f"{section}.kind", "must be 'stable' or 'unstable'")
    s = values["solver"]
    need(s["tol_residual"] is not None and s["tol_residual"] > 0, "solver.tol_residual", "must be positive")
    need(s["N"] is not None and s["N"] >= 32, "solver.N", "must be >= 32")
    need(s["max_iters"] is not None and s["max_iters"] >= 1, "solver.max_iters", "must be >= 1")
    for key in ("sigma", "T", "radius"):
        need(s[key] is None or s[key] > 0, f"solver.{key}", "must be positive")
    need(values["chart"]["rho_0"] is None or values["chart"]["rho_0"] > 0, "chart.rho_0", "must be positive")
    need(values["chart"]["samples"] >= 0, "chart.samples", "must be >= 0")
    f = values["foliate"]
    need(f["boundary_count"] >= 0 and f["xi_count"] >= 0, "foliate.*_count", "must be >= 0")
    need(f["workers"] >= 1, "foliate.workers", "must be >= 1")
    need(values["verify"]["samples"] >= 0, "verify.samples", "must be >= 0")
    need(values["verify"]["sample_every"] >= 1, "verify.sample_every", "must be >= 1")


# -- serialization -------------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.17g" % x


def _json(obj, indent: int = 0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{_json(str(k))}: {_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_json(v, indent + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + _json(v, indent + 1) for v in seq) + "\n" + pad + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return _fmt(x) if math.isfinite(x) else "null"
    if isinstance(obj, complex):
        return _json({"re": obj.real, "im": obj.imag}, indent)
    s = str(obj)
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def _record(cfg: RunConfig, command: str, body: dict) -> dict:
    return {"schema": SCHEMA, "version": __version__, "command": command, "config": cfg.echo, **body}


def _write_json(path: Path, obj) -> None:
    path.write_text(_json(obj) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


# -- shared set-up ---------------------------------------------------------------


def _entry(cfg: RunConfig):
    try:
        return get_problem(cfg.get("problem", "name"), cfg.params)
    except UnknownProblemError as exc:
        raise ConfigError(f"problem.name: {exc.args[0]}") from None
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from None


def _u_star(cfg: RunConfig, entry) -> np.ndarray:
    eq = cfg.get("problem", "equilibrium")
    if eq is None:
        return np.asarray(entry.u_star, dtype=float)
    if len(eq) != entry.model.n:
        raise ConfigError(f"problem.equilibrium: expected {entry.model.n} components, got {len(eq)}")
    return np.asarray(eq, dtype=float)


def _setup(cfg: RunConfig, entry):
    s = cfg.values["solver"]
    # with an equilibrium override the parametrization no longer starts at u*, so use Newton
    use_psi = cfg.get("chart", "use_psi") and cfg.get("problem", "equilibrium") is None
    return setup_foliation(
        entry.model,
        _u_star(cfg, entry),
        eps_center=cfg.get("spectral", "eps_center"),
        rho_0=cfg.get("chart", "rho_0"),
        sigma=s["sigma"],
        radius=s["radius"],
        N=s["N"],
        T=s["T"],
        tol_residual=s["tol_residual"],
        max_iters=s["max_iters"],
        use_psi=use_psi,
    )


def _coords(setup, part: str, values, where: str) -> np.ndarray:
    d = setup.split.dim(part)
    if len(values) != d:
        raise ConfigError(f"{where}: expected {d} coordinate(s), got {len(values)}")
    return setup.embed(part, values) if d else np.zeros(setup.split.n)


def _solution_body(setup, sol) -> dict:
    split = setup.split
    body = {
        "kind": sol.request.kind,
        "boundary": sol.request.boundary,
        "xi": sol.request.xi,
        "sigma": sol.request.sigma,
        "tol_residual": sol.request.tol_residual,
        "grid": {"N": sol.request.N, "T": sol.request.T},
        "u0": sol.u0,
        "u_infty": sol.u_infty,
        "x0": sol.x0,
        "x0_coords": split.coords("c", sol.x0),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "decay_rate_est": sol.decay_rate_est,
        "tail_budget": sol.tail_budget,
    }
    if sol.z0_rec is not None:
        body["z0_rec"] = sol.z0_rec
    if sol.y0_rec is not None:
        body["y0_rec"] = sol.y0_rec
    return body


def _trajectory_rows(sol):
    tr = sol.trajectory
    for j, t in enumerate(tr.nodes):
        u = sol.u_infty + tr.x[j] + tr.y[j] + tr.z[j]
        yield [float(t), *map(float, u), *map(float, tr.x[j]), *map(float, tr.y[j]), *map(float, tr.z[j])]


def _trajectory_header(n):
    return ["t"] + [f"u{k + 1}" for k in range(n)] + [f"{c}{k + 1}" for c in "xyz" for k in range(n)]


# -- subcommands -------------------------------------------------------------------


def run_analyze(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    u_star = _u_star(cfg, entry)
    A0 = linearize(entry.model, u_star)
    try:
        split = split_spectrum(A0, None, cfg.get("spectral", "eps_center"))
        report = check_normally_hyperbolic(split, entry.model.m)
        eigs, omega, dims = report.eigenvalues, report.omega, report.dims
        classification, reason = report.classification, report.reason
    except SpectralError as exc:
        eigs = tuple(complex(z) for z in np.linalg.eigvals(A0))
        omega, dims, classification, reason = float("nan"), None, "Fails", str(exc)
    lines = [
        f"problem = {entry.name}",
        f"u_star = {', '.join(_fmt(v) for v in u_star)}",
        f"classification = {classification}",
        f"reason = {reason}",
        f"dims (center, stable, unstable) = {dims}",
        f"omega = {_fmt(omega)}",
        "eigenvalues = " + ", ".join(f"{_fmt(z.real)}{'+' if z.imag >= 0 else '-'}{_fmt(abs(z.imag))}j" for z in eigs),
    ]
    (out / "analyze.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "analyze.json", _record(cfg, "analyze", {
        "problem": entry.name,
        "u_star": u_star,
        "classification": classification,
        "reason": reason,
        "dims": list(dims) if dims is not None else None,
        "omega": omega,
        "eigenvalues": [{"re": z.real, "im": z.imag} for z in eigs],
    }))
    print("\n".join(lines))
    return EXIT_OK if classification != "Fails" else EXIT_FAIL


def run_chart(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    setup = _setup(cfg, entry)
    chart, split = setup.chart, setup.split
    count = cfg.get("chart", "samples")
    n = split.n
    rows = []
    if split.dim("c") == 1:
        xs = np.linspace(-chart.rho_0, chart.rho_0, max(count, 0))
        pts = [np.array([a]) for a in xs]
    else:
        rng = np.random.default_rng(cfg.get("run", "seed"))
        pts = []
        for _ in range(count):
            d = rng.standard_normal(split.dim("c"))
            pts.append(d / np.linalg.norm(d) * chart.rho_0 * rng.uniform() ** (1 / split.dim("c")))
    for a in pts:
        x = split.embed("c", a)
        ps, pu = chart.phi(x)
        rows.append([*map(float, a), *map(float, x), *map(float, ps), *map(float, pu)])
    header = [f"a{k + 1}" for k in range(split.dim("c"))] + [
        f"{c}{k + 1}" for c in ("x", "phi_s", "phi_u") for k in range(n)
    ]
    _write_csv(out / "chart.csv", header, rows)
    report = verify_chart(chart, count, seed=cfg.get("run", "seed"))
    _write_json(out / "chart.json", _record(cfg, "chart", {
        "method": chart.method,
        "rho_0": chart.rho_0,
        "samples": report.samples,
        "max_center_residual": report.max_center_residual,
        "max_normal_residual": report.max_normal_residual,
        "max_equilibrium_residual": report.max_equilibrium_residual,
        "passed": report.passed,
    }))
    print(f"chart ({chart.method}): {len(rows)} rows, residuals "
          f"{report.max_center_residual:.3e} / {report.max_normal_residual:.3e}, passed = {report.passed}")
    return EXIT_OK if report.passed else EXIT_FAIL


def run_fiber(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    setup = _setup(cfg, entry)
    kind = cfg.get("fiber", "kind")
    part = "s" if kind == "stable" else "u"
    boundary = _coords(setup, part, cfg.get("fiber", "boundary"), "fiber.boundary")
    xi = _coords(setup, "c", cfg.get("fiber", "xi"), "fiber.xi")
    sol = setup.solve(kind, boundary, xi)
    body = _solution_body(setup, sol)
    status = EXIT_OK
    if cfg.get("fiber", "verify"):
        v = verify_fiber(setup.model, sol, cfg.get("fiber", "horizon"), split=setup.split)
        body["verification"] = {
            "passed": v.passed,
            "terminal_distance": v.terminal_distance,
            "decay_rate": v.decay_rate,
            "limit_equilibrium": v.limit_equilibrium,
            "base_point_mismatch": v.base_point_mismatch,
            "reason": v.reason,
        }
        status = EXIT_OK if v.passed else EXIT_FAIL
    _write_json(out / "fiber.json", _record(cfg, "fiber", body))
    _write_csv(out / "fiber_trajectory.csv", _trajectory_header(setup.split.n), _trajectory_rows(sol))
    print(f"{kind} fiber: u0 = [{', '.join(_fmt(v) for v in sol.u0)}], residual {sol.residual:.3e}, "
          f"iterations {sol.iterations}")
    return status


def run_foliate(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    setup = _setup(cfg, entry)
    f = cfg.values["foliate"]
    kind = f["kind"]
    part = "s" if kind == "stable" else "u"
    if setup.split.dim(part) != 1 or setup.split.dim("c") != 1:
        raise ConfigError("foliate: rectangular grids need one boundary and one center coordinate")
    bs = np.linspace(f["boundary_min"], f["boundary_max"], f["boundary_count"])
    xs = np.linspace(f["xi_min"], f["xi_max"], f["xi_count"])
    points = [(float(b), float(x)) for x in xs for b in bs]
    oracle = entry.known_fiber_oracle.get(kind) if cfg.get("problem", "equilibrium") is None else None
    n = setup.split.n

    def one(point):
        b, x = point
        try:
            sol = setup.solve_coords(kind, [b], [x])
        except (FiberError, PreconditionError, DomainError, ChartError) as exc:
            return [b, x, *([float("nan")] * n), float("nan"), 0, float("nan"), "failed", type(exc).__name__]
        err = float("nan")
        if oracle is not None:
            err = float(np.max(np.abs(sol.u0 - oracle(np.array([b]), np.array([x])))))
        status, note = "ok", ""
        if f["verify"]:
            v = verify_fiber(setup.model, sol, split=setup.split)
            if not v.passed:
                status, note = "unverified", v.reason
        return [b, x, *map(float, sol.u0), sol.residual, sol.iterations, err, status, note]

    if f["workers"] > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=f["workers"]) as pool:
            rows = list(pool.map(one, points))
    else:
        rows = [one(p) for p in points]
    header = ["boundary", "xi", *[f"u0_{k + 1}" for k in range(n)], "residual", "iterations",
              "oracle_error", "status", "note"]
    _write_csv(out / "foliate.csv", header, rows)
    failed = sum(r[-2] != "ok" for r in rows)
    _write_json(out / "foliate.json", _record(cfg, "foliate", {
        "kind": kind, "rows": len(rows), "failed": failed,
    }))
    print(f"foliate: {len(rows)} rows, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def run_decompose(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    setup = _setup(cfg, entry)
    u0 = cfg.get("decompose", "u0")
    if u0 is None:
        raise ConfigError("decompose.u0: required")
    if len(u0) != setup.split.n:
        raise ConfigError(f"decompose.u0: expected {setup.split.n} components, got {len(u0)}")
    dec = decompose_initial_value(setup, np.asarray(u0), tol=cfg.get("decompose", "tol"))
    split = setup.split
    body = {
        "u0": u0,
        "y0": dec.y0,
        "y0_coords": split.coords("s", dec.y0),
        "y_offset": dec.y_offset,
        "y_offset_coords": split.coords("s", dec.y_offset),
        "xi": dec.xi,
        "xi_coords": split.coords("c", dec.xi),
        "residual": dec.residual,
        "iterations": dec.iterations,
        "u_infty": dec.solution.u_infty,
    }
    _write_json(out / "decompose.json", _record(cfg, "decompose", body))
    print(f"decompose: y0 = {list(map(_fmt, split.coords('s', dec.y0)))}, "
          f"xi = {list(map(_fmt, split.coords('c', dec.xi)))}, residual {dec.residual:.3e}")
    return EXIT_OK


def run_verify(cfg: RunConfig, out: Path) -> int:
    entry = _entry(cfg)
    setup = _setup(cfg, entry)
    v = cfg.values["verify"]
    kind = v["kind"]
    part = "s" if kind == "stable" else "u"
    rng = np.random.default_rng(cfg.get("run", "seed"))
    n = setup.split.n
    rows, samples = [], []
    for i in range(v["samples"]):
        b = rng.uniform(-v["boundary_max"], v["boundary_max"], setup.split.dim(part))
        x = rng.uniform(-v["xi_max"], v["xi_max"], setup.split.dim("c"))
        try:
            sol = setup.solve_coords(kind, b, x)
        except (FiberError, PreconditionError, DomainError, ChartError) as exc:
            rows.append([i, *map(float, b), *map(float, x), float("nan"), float("nan"), float("nan"),
                         False, f"solve failed: {exc}"])
            continue
        rep = verify_fiber(setup.model, sol, v["horizon"], v["flow_tol"], split=setup.split)
        rows.append([i, *map(float, b), *map(float, x), rep.terminal_distance, rep.decay_rate,
                     rep.base_point_mismatch, rep.passed, rep.reason])
        for t, u in list(zip(rep.flow.times, rep.flow.states))[:: v["sample_every"]]:
            samples.append([i, float(t), *map(float, u)])
    header = (["sample"] + [f"boundary_{k + 1}" for k in range(setup.split.dim(part))]
              + [f"xi_{k + 1}" for k in range(setup.split.dim("c"))]
              + ["terminal_distance", "decay_rate", "base_point_mismatch", "passed", "reason"])
    _write_csv(out / "verify.csv", header, rows)
    _write_csv(out / "verify_states.csv", ["sample", "t", *[f"u{k + 1}" for k in range(n)]], samples)
    failed = sum(not r[-2] for r in rows)
    _write_json(out / "verify.json", _record(cfg, "verify", {"kind": kind, "samples": len(rows), "failed": failed}))
    print(f"verify: {len(rows)} fibers, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


COMMANDS = {
    "analyze": run_analyze,
    "chart": run_chart,
    "fiber": run_fiber,
    "foliate": run_foliate,
    "decompose": run_decompose,
    "verify": run_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foliation", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")
        p.add_argument("--problem", help="registry name (overrides problem.name)")
        p.add_argument("--kind", choices=("stable", "unstable"), help="fiber kind")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {("problem", "name"): args.problem, ("run", "output_dir"): args.out}
    if args.kind is not None:
        for section in ("fiber", "foliate", "verify"):
            overrides[(section, "kind")] = args.kind
    try:
        cfg = load_config(args.config, overrides)
        out = Path(cfg.get("run", "output_dir"))
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, DomainError, ChartError) as exc:
        print(f"precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (FiberError, DecompositionError, SpectralError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
