"""Command line front end: ``evanskit verify|scan|count|jost``.

Exit codes: 0 success, 1 verify residual at or above the threshold,
2 configuration error, 3 solver failure, 4 contour too close to a zero.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import evans
from .fredholm import HatIterationError
from .jost import (SolverError, SolverSettings, solve_jost_mixed, solve_jost_volterra,
                   solve_jost_weighted, truncate_perturbation)
from .numerics import StepSizeUnderflow
from .system import (NoDichotomy, ProblemDefinition, Support, dichotomy_projection,
                     problem_splitting)

EXIT_OK, EXIT_RESIDUAL, EXIT_CONFIG, EXIT_SOLVER, EXIT_CONTOUR = 0, 1, 2, 3, 4
SCAN_COLUMNS = ["re_z", "im_z", "re_D", "im_D", "re_det2", "im_det2", "re_theta", "im_theta",
                "residual", "status"]


class ConfigError(ValueError):
    """Malformed problem file or command line value."""


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        self.stage = stage
        self.condition = getattr(exc, "condition", type(exc).__name__)
        super().__init__(f"{stage}: {self.condition}: {exc}")


SOLVER_ERRORS = (SolverError, evans.CoverageError, evans.ShootingError, HatIterationError,
                 StepSizeUnderflow, NoDichotomy, np.linalg.LinAlgError)


# ------------------------------------------------------------ config parsing

def _number(v, what):
    if isinstance(v, bool):
        raise ConfigError(f"{what}: expected a number")
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(
            isinstance(p, (int, float)) and not isinstance(p, bool) for p in v):
        return complex(v[0], v[1])
    raise ConfigError(f"{what}: expected a number or an [re, im] pair, got {v!r}")


def _matrix(rows, d, what):
    if not isinstance(rows, list) or len(rows) != d:
        raise ConfigError(f"{what}: expected {d} rows")
    M = np.empty((d, d), dtype=complex)
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != d:
            raise ConfigError(f"{what}: row {i} must have {d} entries")
        for j, v in enumerate(row):
            M[i, j] = _number(v, f"{what}[{i}][{j}]")
    return M


def _positive(cfg, key, default, what):
    v = cfg.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{what}.{key} must be a positive number")
    return float(v)


def _support(cfg, default):
    if not cfg:
        return default
    if "support" in cfg:
        if cfg["support"] != "compact":
            raise ConfigError("perturbation.support must be 'compact'")
        return Support("compact", halfwidth=_positive(cfg, "halfwidth", None, "perturbation"))
    if "decay" in cfg:
        if cfg["decay"] == "exponential":
            return Support("exponential", beta=_positive(cfg, "beta", None, "perturbation"))
        if cfg["decay"] == "polynomial":
            deg = _positive(cfg, "degree", None, "perturbation")
            if deg <= 1:
                raise ConfigError("perturbation.degree must exceed 1")
            return Support("polynomial", degree=deg)
        if cfg["decay"] == "zero":
            return Support("zero")
        raise ConfigError(f"unknown decay {cfg['decay']!r}")
    return default


def _potential(cfg):
    if not isinstance(cfg, dict) or "name" not in cfg:
        raise ConfigError("coefficient.potential needs a name")
    name = cfg["name"]
    if name == "zero":
        return evans.zero_potential()
    if name == "poschl_teller":
        return evans.poschl_teller(_positive(cfg, "depth", 2.0, "potential"))
    if name == "square_well":
        V0 = cfg.get("V0", 1.0)
        if not isinstance(V0, (int, float)) or isinstance(V0, bool):
            raise ConfigError("potential.V0 must be a number")
        return evans.square_well(float(V0), _positive(cfg, "a", 1.0, "potential"))
    if name == "gaussian":
        amp = cfg.get("amplitude", 1.0)
        if not isinstance(amp, (int, float)) or isinstance(amp, bool):
            raise ConfigError("potential.amplitude must be a number")
        return evans.gaussian_potential(float(amp), _positive(cfg, "width", 1.0, "potential"))
    if name == "samples":
        try:
            return evans.sampled_potential(cfg["x"], cfg["V"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"samples potential: {exc}") from None
    raise ConfigError(f"unknown potential {name!r}")


def _three_mode(xs):
    xs = np.asarray(xs, dtype=float)
    out = np.zeros((xs.size, 3, 3), dtype=complex)
    out[:, 0, 1] = np.where(xs >= 0, np.exp(-xs) * np.cos(xs), 0.0)
    return out


def _profile(cfg, d):
    """Perturbation profile: callable, default support and breakpoints."""
    name = cfg.get("profile", "zero")
    if name == "zero":
        return None, Support("zero"), ()
    if name == "three_mode":
        if d != 3:
            raise ConfigError("profile three_mode needs dimension 3")
        return _three_mode, Support("exponential", beta=1.0), (0.0,)
    if "matrix" not in cfg:
        raise ConfigError(f"profile {name!r} needs a matrix")
    C = _matrix(cfg["matrix"], d, "perturbation.matrix")
    if name == "bump":
        a = _positive(cfg, "halfwidth", 1.0, "perturbation")
        f = lambda xs: np.where(np.abs(xs) < a, (1 - (xs / a) ** 2) ** 2, 0.0)
        return _scaled(f, C), Support("compact", halfwidth=a), (-a, a)
    if name == "gaussian":
        w = _positive(cfg, "width", 1.0, "perturbation")
        return _scaled(lambda xs: np.exp(-(xs / w) ** 2), C), Support("exponential", beta=1 / w), ()
    if name == "exponential":
        b = _positive(cfg, "rate", 1.0, "perturbation")
        return _scaled(lambda xs: np.exp(-b * np.abs(xs)), C), Support("exponential", beta=b), (0.0,)
    if name == "rational":
        p = _positive(cfg, "power", 4.0, "perturbation")
        return _scaled(lambda xs: (1 + xs ** 2) ** (-p / 2), C), Support("polynomial", degree=p), ()
    raise ConfigError(f"unknown perturbation profile {name!r}")


def _scaled(f, C):
    return lambda xs: f(np.asarray(xs, dtype=float))[:, None, None] * C


@dataclass(frozen=True)
class ProblemSpec:
    """A parsed problem file: a family over the spectral parameter."""

    kind: str
    base: object
    parameter: complex
    truncate: Optional[float] = None
    jost: dict = None
    settings: dict = None

    def family(self, continuity=False):
        if self.kind == "schrodinger":
            pot = self.base
            return lambda k: evans.SchrodingerCase(pot, k, continuity)
        base = self.base

        def shifted(z):
            return base if z == 0 else base.shifted(z)

        return shifted

    def at(self, value=None, continuity=False):
        return self.family(continuity)(self.parameter if value is None else value)


def parse_problem(doc):
    """ProblemSpec from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("problem file must hold a JSON object")
    coef = doc.get("coefficient")
    if not isinstance(coef, dict) or "type" not in coef:
        raise ConfigError("coefficient must be an object with a type")
    pert = doc.get("perturbation") or {}
    if not isinstance(pert, dict):
        raise ConfigError("perturbation must be an object")
    truncate = pert.get("truncate")
    if truncate is not None and (isinstance(truncate, bool) or not isinstance(truncate, (int, float))
                                 or not truncate > 0):
        raise ConfigError("perturbation.truncate must be positive")
    extra = dict(jost=doc.get("jost") or {}, settings=doc.get("settings") or {})
    if coef["type"] == "schrodinger":
        pot = _potential(coef.get("potential"))
        if doc.get("dimension", 2) != 2:
            raise ConfigError("Schrodinger problems have dimension 2")
        support = _support({k: v for k, v in pert.items() if k != "truncate"}, pot.support)
        if truncate is not None:
            T = float(truncate)
            V = pot.V
            pot = replace(pot, V=lambda x, T=T, V=V: np.where(np.abs(x) <= T, V(x), 0.0),
                          breakpoints=tuple(pot.breakpoints) + (-T, T))
            support = Support("compact", halfwidth=T) if support.kind != "compact" else \
                Support("compact", halfwidth=min(T, support.halfwidth))
        pot = replace(pot, support=support)
        return ProblemSpec("schrodinger", pot, _number(coef.get("k", [0, 1]), "coefficient.k"),
                           truncate, **extra)
    if coef["type"] == "autonomous":
        d = doc.get("dimension")
        if not isinstance(d, int) or isinstance(d, bool) or d < 1:
            raise ConfigError("dimension must be a positive integer")
        A = _matrix(coef.get("matrix"), d, "coefficient.matrix")
        fn, default_support, bps = _profile(pert, d)
        support = _support({k: v for k, v in pert.items()
                            if k in ("support", "halfwidth", "decay", "beta", "degree")},
                           default_support)
        problem = ProblemDefinition(d, A, fn, support, doc.get("name", "problem"), bps)
        if truncate is not None:
            problem = truncate_perturbation(problem, float(truncate))
        return ProblemSpec("autonomous", problem, 0j, truncate, **extra)
    raise ConfigError(f"unknown coefficient type {coef['type']!r}")


def load_problem(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return parse_problem(doc)


# ---------------------------------------------------------- argument parsing

def parse_complex(text):
    """'2i', '0+2i', '1.5-0.3i', '3' -> complex."""
    t = text.strip().replace(" ", "").replace("I", "i")
    if not t:
        raise ConfigError("empty complex number")
    try:
        return complex(t.replace("i", "j"))
    except ValueError:
        raise ConfigError(f"cannot parse complex number {text!r}") from None


def parse_grid(spec):
    """'start:stop:n' (complex endpoints, n points) or a comma list; '' is empty."""
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError("grid spec must be start:stop:n")
        a, b = parse_complex(parts[0]), parse_complex(parts[1])
        try:
            n = int(parts[2])
        except ValueError:
            raise ConfigError("grid point count must be an integer") from None
        if n < 1:
            raise ConfigError("grid point count must be positive")
        return [complex(z) for z in np.linspace(a, b, n)]
    return [parse_complex(p) for p in spec.split(",")]


def parse_contour(spec):
    parts = spec.split(",")
    if len(parts) != 4:
        raise ConfigError("contour spec must be cx,cy,r,n")
    try:
        cx, cy, r = (float(p) for p in parts[:3])
        n = int(parts[3])
    except ValueError:
        raise ConfigError(f"cannot parse contour {spec!r}") from None
    if not r > 0 or n < 8:
        raise ConfigError("contour needs r > 0 and at least 8 points")
    return complex(cx, cy), r, n


def build_parser():
    p = argparse.ArgumentParser(prog="evanskit",
                                description="Evans determinants, Jost solutions and det2 identities.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", required=True, help="problem JSON file")
    common.add_argument("--X", type=float, help="truncation half-width")
    common.add_argument("--nodes", type=int, help="Nystrom nodes (0 skips the oracle)")
    common.add_argument("--tol", type=float, help="threshold (verify) or Picard tolerance")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for scans")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), help="output format")
    common.add_argument("--continuity-flag", action="store_true",
                        help="admit Im k = 0 by evaluating at Im k = 1e-6")
    common.add_argument("--k", help="spectral parameter, e.g. 0+2i")
    common.add_argument("--route", choices=("auto", "volterra", "weighted", "mixed"))
    sub.add_parser("verify", parents=[common], help="check det2 = e^Theta D at one point")
    s = sub.add_parser("scan", parents=[common], help="pipeline over a grid of parameters")
    s.add_argument("--grid", required=True, help="start:stop:n or comma list of complex values")
    c = sub.add_parser("count", parents=[common], help="winding number of D on a circle")
    c.add_argument("--contour", required=True, help="cx,cy,r,n")
    j = sub.add_parser("jost", parents=[common], help="one Jost solution")
    j.add_argument("--side", choices=("plus", "minus"))
    j.add_argument("--j", type=int, dest="index", help="1-based group index (mixed route)")
    return p


def _settings(args, spec, nodes_default):
    cfg = dict(spec.settings or {})
    if args.tol is not None and not args.tol > 0:
        raise ConfigError("--tol must be positive")
    if args.X is not None and not args.X > 0:
        raise ConfigError("--X must be positive")
    nodes = args.nodes if args.nodes is not None else cfg.get("nodes", nodes_default)
    if not isinstance(nodes, int) or (nodes != 0 and nodes < 8):
        raise ConfigError("--nodes must be 0 or at least 8")
    X = args.X if args.X is not None else cfg.get("X")
    route = args.route or cfg.get("route", "auto")
    jost = SolverSettings(X=X) if X is not None else SolverSettings()
    if args.command != "verify" and args.tol is not None:
        jost = replace(jost, picard_tol=args.tol)
    try:
        return evans.AnalysisSettings(X=X, route=route, jost=jost, nystrom_nodes=nodes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------------ output

def _cx(z):
    z = complex(z)
    return [z.real, z.imag]


def _jsonable(v):
    if isinstance(v, (complex, np.complexfloating)):
        return _cx(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_output(text, path):
    """Write text to stdout or atomically to a file."""
    if path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".evanskit-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_dict(report):
    d = report.diagnostics
    out = {
        "theta": _cx(report.theta),
        "evans_det": _cx(report.evans_det),
        "det2_semiseparable": _cx(report.det2_semiseparable),
        "det2_nystrom": None if report.det2_nystrom is None else _cx(report.det2_nystrom),
        "identity_residual": report.identity_residual,
        "jost_defects": _jsonable(d.get("jost_defects", [])),
        "iterations": _jsonable(d.get("iterations", [])),
    }
    for key in ("nystrom_residual", "route", "X", "nystrom_nodes", "jost_function",
                "det2_scalar_nystrom", "boundary", "seconds"):
        if key in d:
            out[key] = _jsonable(d[key])
    return out


def _dump(obj):
    return json.dumps(_jsonable(obj), indent=2) + "\n"


def scan_csv(scan):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCAN_COLUMNS)
    for z, v in zip(scan.points, scan.values):
        if isinstance(v, str):
            w.writerow([repr(z.real), repr(z.imag)] + [""] * 7 + ["fail"])
            continue
        D, det2, th = complex(v.evans_det), complex(v.det2_semiseparable), complex(v.theta)
        w.writerow([repr(float(x)) for x in (z.real, z.imag, D.real, D.imag, det2.real,
                                             det2.imag, th.real, th.imag, v.identity_residual)]
                   + ["ok"])
    return buf.getvalue()


def scan_json(scan):
    rows = []
    for z, v in zip(scan.points, scan.values):
        row = {"z": _cx(z)}
        if isinstance(v, str):
            row.update(status="fail", error=v)
        else:
            row.update(report_dict(v), status="ok")
        rows.append(row)
    out = {"points": rows}
    if scan.closed:
        out["winding"] = scan.winding
    return _dump(out)


# ---------------------------------------------------------------- commands

def _analyze(spec, settings, value, continuity):
    try:
        target = spec.at(value, continuity)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        if spec.kind == "schrodinger":
            return evans.analyze_schrodinger(target, settings)
        return evans.analyze(target, settings)
    except SOLVER_ERRORS as exc:
        raise StageError("pipeline", exc) from None


def cmd_verify(args, spec):
    settings = _settings(args, spec, 2000)
    threshold = 1e-4 if args.tol is None else args.tol
    report = _analyze(spec, settings, _k(args), args.continuity_flag)
    out = report_dict(report)
    out["threshold"] = threshold
    write_output(_dump(out), args.out)
    return EXIT_OK if report.identity_residual < threshold else EXIT_RESIDUAL


def _k(args):
    return None if args.k is None else parse_complex(args.k)


def cmd_scan(args, spec):
    points = parse_grid(args.grid)
    if args.jobs < 1:
        raise ConfigError("--jobs must be positive")
    settings = _settings(args, spec, 0)
    scan = evans.evans_scan(spec.family(args.continuity_flag), points, settings, args.jobs)
    fmt = args.format or "csv"
    write_output(scan_csv(scan) if fmt == "csv" else scan_json(scan), args.out)
    return EXIT_OK


def cmd_count(args, spec):
    center, radius, n = parse_contour(args.contour)
    if args.jobs < 1:
        raise ConfigError("--jobs must be positive")
    settings = _settings(args, spec, 0)
    try:
        scan = evans.count_zeros(spec.family(args.continuity_flag), center, radius, n,
                                 settings, args.jobs)
    except evans.ContourTooClose as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTOUR
    except (evans.PhaseResolutionError, RuntimeError) as exc:
        raise StageError("count", exc) from None
    print(scan.winding)
    if args.out is not None:
        write_output(scan_json(scan) if (args.format or "json") == "json" else scan_csv(scan),
                     args.out)
    return EXIT_OK


def cmd_jost(args, spec):
    cfg = dict(spec.jost or {})
    route = args.route or cfg.get("route", "auto")
    side = args.side or cfg.get("side", "plus")
    index = args.index if args.index is not None else cfg.get("j")
    if side not in ("plus", "minus"):
        raise ConfigError("side must be plus or minus")
    settings = _settings(args, spec, 0)
    try:
        target = spec.at(_k(args), args.continuity_flag)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    problem = target.problem if spec.kind == "schrodinger" else target
    try:
        split = problem_splitting(problem)
        Q = dichotomy_projection(split)
        js = settings.jost
        if route == "auto":
            route = "volterra" if problem.support.kind in ("zero", "compact") else "mixed"
        if route == "volterra":
            sol = solve_jost_volterra(problem, Q, side, js)
        elif route == "weighted":
            sol = solve_jost_weighted(problem, Q, side=side, settings=js)
        elif route == "mixed":
            if index is None:
                index = 1 if side == "plus" else split.count
            if not isinstance(index, int) or isinstance(index, bool):
                raise ConfigError("j must be an integer")
            try:
                sol = solve_jost_mixed(problem, split, index, side, js)
            except (ValueError, TypeError) as exc:
                if isinstance(exc, SOLVER_ERRORS):
                    raise
                raise ConfigError(str(exc)) from None
        else:
            raise ConfigError(f"unknown route {route!r}")
    except SOLVER_ERRORS as exc:
        raise StageError(f"jost ({route})", exc) from None
    Y0 = sol.initial
    xs, vals = sol.defect
    step = max(1, len(xs) // 50)
    out = {
        "route": sol.route,
        "side": sol.side,
        "j": sol.j,
        "Y0": _jsonable(Y0),
        "projection": _jsonable(sol.projection),
        "range_check": float(np.max(np.abs(Y0 @ sol.projection - Y0))),
        "converged": bool(sol.converged),
        "iterations": int(sol.iterations),
        "X": float(sol.X),
        "tau": float(sol.tau),
        "contraction": float(sol.contraction),
        "defect_ratio": sol.defect_ratio(),
        "defect_samples": {"x": _jsonable(np.asarray(xs)[::step]),
                           "value": _jsonable(np.asarray(vals)[::step])},
    }
    write_output(_dump(out), args.out)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "scan": cmd_scan, "count": cmd_count, "jost": cmd_jost}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = load_problem(args.problem)
        return COMMANDS[args.command](args, spec)
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: solver failed in {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
