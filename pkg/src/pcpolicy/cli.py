"""Command line experiment runner.

    pcpolicy solve --benchmark sine_heat --h 0.05 --out runs/solve
    pcpolicy rates --benchmark sine_heat --solver sl --h 0.1,0.05,0.025,0.0125
    pcpolicy optimize-rate --terms "1,0;0,1/2;-3,1"
    pcpolicy run experiment.yaml

Every pipeline command also accepts ``--config FILE`` (YAML); flags given on
the command line win over the file.  Exit codes: 0 success, 1 numerical
failure (partial outputs plus manifest), 2 configuration error (no outputs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .lattice import GridError, build_grid, interpolate, write_field_csv, write_surface
from .model import BENCHMARK_NAMES, BenchmarkSpec, ProblemError, make_benchmark
from .mollify import Mollifier, MollifierError, derivative_bound_report, kernel_mass, mollify_surface
from .rates import BOUND_TERMS, LadderConfig, RateError, error_ladder, optimize_rate, parse_terms
from .sde import PathError, PiecewisePolicy, mc_cost
from .sl import ConfigError, SchemeConfig, SchemeError, moment_report, pcp_solve, sl_solve, zeta_support

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("solve", "pcp", "mc", "rates")


class ConfigFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration

def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigFileError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigFileError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class BenchmarkSection:
    name: str = "sine_heat"
    parameters: dict = field(default_factory=dict)


@dataclass
class SchemeSection:
    h: float = 0.05
    h_list: list = field(default_factory=lambda: [0.1, 0.05, 0.025, 0.0125])
    solver: str = "sl"
    reference: str = "closed_form"
    coupling: str = "linear"
    scale: float = 1.0
    substeps: int = 1
    substep: float | None = None
    domain: list = field(default_factory=lambda: [-2 * math.pi, 2 * math.pi])
    interior: list = field(default_factory=lambda: [-math.pi, math.pi])


@dataclass
class MCSection:
    path_count: int = 10000
    steps_per_interval: int = 20
    seed: int = 0
    start_time: float = 0.0
    start_state: list = field(default_factory=lambda: [0.0])
    policy_interval: float = 0.1
    control: int | None = 0


@dataclass
class OutputSection:
    directory: str = "pcpolicy-out"
    dump_surface: bool = False


@dataclass
class ExperimentConfig:
    command: str = "solve"
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    mc: MCSection = field(default_factory=MCSection)
    output: OutputSection = field(default_factory=OutputSection)
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigFileError("config must be a mapping")
        sections = {"benchmark": BenchmarkSection, "scheme": SchemeSection, "mc": MCSection,
                    "output": OutputSection}
        unknown = set(data) - set(sections) - {"command", "workers"}
        if unknown:
            raise ConfigFileError(f"unknown top-level keys {sorted(unknown)}")
        cfg = cls(command=data.get("command", "solve"), workers=data.get("workers", 1),
                  **{k: _strict(c, data.get(k), k) for k, c in sections.items()})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigFileError(f"command must be one of {COMMANDS}")
        try:
            params = BenchmarkSpec(self.benchmark.name, self.benchmark.parameters).resolved()
        except ProblemError as exc:
            raise ConfigFileError(str(exc)) from exc
        s = self.scheme
        if s.solver not in ("sl", "pcp"):
            raise ConfigFileError("scheme.solver must be 'sl' or 'pcp'")
        if s.reference not in ("closed_form", "fine_grid"):
            raise ConfigFileError("scheme.reference must be 'closed_form' or 'fine_grid'")
        if s.coupling not in ("linear", "sqrt"):
            raise ConfigFileError("scheme.coupling must be 'linear' or 'sqrt'")
        if not (_positive(s.h) and _positive(s.scale)):
            raise ConfigFileError("scheme.h and scheme.scale must be positive")
        if not isinstance(s.substeps, int) or s.substeps < 1:
            raise ConfigFileError("scheme.substeps must be a positive integer")
        if s.substep is not None and not _positive(s.substep):
            raise ConfigFileError("scheme.substep must be positive")
        if self.command in ("solve", "pcp"):
            m = s.substeps if self.command == "pcp" else 1
            n = params["T"] / (s.h * m)
            if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
                raise ConfigFileError(f"horizon {params['T']} is not a multiple of h * substeps")
        hl = s.h_list
        if (not isinstance(hl, list) or len(hl) < 3 or not all(_positive(h) for h in hl)
                or any(b >= a for a, b in zip(hl, hl[1:]))):
            raise ConfigFileError("scheme.h_list needs >= 3 strictly decreasing positive steps")
        for key in ("domain", "interior"):
            box = getattr(s, key)
            if not (isinstance(box, list) and len(box) == 2 and all(_finite(v) for v in box)
                    and box[0] < box[1]):
                raise ConfigFileError(f"scheme.{key} must be [lower, upper] with lower < upper")
        m = self.mc
        if not isinstance(m.path_count, int) or m.path_count < 2:
            raise ConfigFileError("mc.path_count must be an integer >= 2")
        if not isinstance(m.steps_per_interval, int) or m.steps_per_interval < 1:
            raise ConfigFileError("mc.steps_per_interval must be a positive integer")
        if not isinstance(m.seed, int) or m.seed < 0:
            raise ConfigFileError("mc.seed must be a nonnegative integer")
        if not _positive(m.policy_interval):
            raise ConfigFileError("mc.policy_interval must be positive")
        if not (isinstance(m.start_state, list) and all(_finite(v) for v in m.start_state)):
            raise ConfigFileError("mc.start_state must be a list of numbers")
        if m.control is not None and (not isinstance(m.control, int) or m.control < 0):
            raise ConfigFileError("mc.control must be a nonnegative integer or null")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigFileError("workers must be a positive integer")
        if not isinstance(self.output.dump_surface, bool):
            raise ConfigFileError("output.dump_surface must be true or false")


def _finite(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive(v):
    return _finite(v) and v > 0


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"cannot parse config {path}: {exc}") from exc
    return data or {}


def _set(data, dotted, value):
    node = data
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


# ---------------------------------------------------------------------------
# Pipelines

def _spec(cfg):
    return BenchmarkSpec(cfg.benchmark.name, cfg.benchmark.parameters)


def _grid(cfg, h):
    s = cfg.scheme
    dx = s.scale * (h if s.coupling == "linear" else math.sqrt(h))
    return build_grid(([s.domain[0]], [s.domain[1]]), dx)


def _versions():
    return {"pcpolicy": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _run_solve(cfg, out, artifacts):
    problem = make_benchmark(_spec(cfg))
    s = cfg.scheme
    substeps = s.substeps if cfg.command == "pcp" else 1
    config = SchemeConfig(s.h, _grid(cfg, s.h), substeps, cfg.workers)
    surface = (pcp_solve if cfg.command == "pcp" else sl_solve)(problem, config)
    path = out / "value_t0.csv"
    write_field_csv(surface.initial, path)
    artifacts.append(path.name)
    if cfg.output.dump_surface:
        artifacts.extend(str(p.relative_to(out)) for p in write_surface(surface, out / "surface"))
    return {"levels": len(surface), "nodes": surface.grid.size}


def _run_mc(cfg, out, artifacts):
    problem = make_benchmark(_spec(cfg))
    m = cfg.mc
    n = round((problem.horizon - m.start_time) / m.policy_interval)
    if m.control is None:
        s = cfg.scheme
        config = SchemeConfig(s.h, _grid(cfg, s.h), max(1, round(m.policy_interval / s.h)), cfg.workers)
        surface = pcp_solve(problem, config)
        policy = PiecewisePolicy.from_surface(surface, m.start_time, m.policy_interval)
        lattice_value = interpolate(surface.at(m.start_time), m.start_state)
    else:
        policy = PiecewisePolicy.constant(m.policy_interval, m.control, n)
        lattice_value = None
    est = mc_cost(problem, policy, (m.start_time, m.start_state), m.path_count,
                  m.steps_per_interval, m.seed, cfg.workers)
    result = dataclasses.asdict(est)
    if lattice_value is not None:
        result["lattice_value"] = lattice_value
    path = out / "mc.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    artifacts.append(path.name)
    return result


def _run_rates(cfg, out, artifacts):
    s = cfg.scheme
    ladder = LadderConfig(domain=tuple(s.domain), interior=tuple(s.interior), coupling=s.coupling,
                          scale=s.scale, substeps=s.substeps, substep=s.substep,
                          workers=cfg.workers)
    table = error_ladder(_spec(cfg), s.solver, s.h_list, s.reference, ladder)
    path = out / "rates.csv"
    table.write_csv(path)
    artifacts.append(path.name)
    failed = [r.meta["failed"] for r in table.rows if "failed" in r.meta]
    if failed:
        raise SchemeError(f"ladder rung failed: {failed[0]}")
    return {"fitted_slope": str(table.fitted_slope), "rows": len(table.rows)}


PIPELINES = {"solve": _run_solve, "pcp": _run_solve, "mc": _run_mc, "rates": _run_rates}
NUMERICAL_ERRORS = (SchemeError, PathError, GridError, ProblemError, RateError, ConfigError,
                    FloatingPointError)


def execute(cfg: ExperimentConfig, argv=None) -> int:
    """Run a validated configuration; writes outputs and ``manifest.json``."""
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list = []
    manifest = {"config": cfg.to_dict(), "seed": cfg.mc.seed, "versions": _versions(),
                "argv": list(argv) if argv is not None else None}
    start = time.perf_counter()
    status = EXIT_OK
    try:
        summary = PIPELINES[cfg.command](cfg, out, artifacts)
        manifest["status"] = "ok"
        manifest["summary"] = summary
        print(json.dumps(summary, sort_keys=True))
    except NUMERICAL_ERRORS as exc:
        status = EXIT_NUMERICAL
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
    manifest["artifacts"] = sorted(artifacts)
    manifest["wall_time_s"] = time.perf_counter() - start
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status


def run_experiment(config_path, overrides: dict | None = None, argv=None) -> int:
    """Load, validate and execute a config file.  Returns the exit status."""
    try:
        data = load_config(config_path)
        for key, value in (overrides or {}).items():
            _set(data, key, value)
        cfg = ExperimentConfig.from_dict(data)
    except (ConfigFileError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(cfg, argv)


# ---------------------------------------------------------------------------
# Argument parsing

def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _param(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("parameters look like name=value")
    try:
        return key.strip(), float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value in {text!r}") from exc


def _pipeline_flags(p, command):
    p.add_argument("--config", help="YAML experiment file; flags override it")
    p.add_argument("--benchmark", choices=BENCHMARK_NAMES)
    p.add_argument("--param", type=_param, action="append", metavar="NAME=VALUE",
                   help="benchmark parameter override (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("--domain", type=_floats, metavar="LO,HI")
    p.add_argument("--coupling", choices=("linear", "sqrt"))
    p.add_argument("--scale", type=float, help="grid spacing multiplier")
    if command == "rates":
        p.add_argument("--h", type=_floats, dest="h_list", metavar="H1,H2,...")
        p.add_argument("--solver", choices=("sl", "pcp"))
        p.add_argument("--reference", choices=("closed_form", "fine_grid"))
        p.add_argument("--interior", type=_floats, metavar="LO,HI")
        p.add_argument("--substep", type=float, help="fixed time step; h values become policy intervals")
        p.add_argument("--substeps", type=int)
    else:
        p.add_argument("--h", type=float)
    if command == "pcp":
        p.add_argument("--substeps", type=int, help="policy interval / time step")
    if command in ("solve", "pcp"):
        p.add_argument("--dump-surface", action="store_true", default=None)
    if command == "mc":
        p.add_argument("--paths", type=int)
        p.add_argument("--steps-per-interval", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--t", type=float, dest="start_time")
        p.add_argument("--x", type=_floats, dest="start_state")
        p.add_argument("--policy-interval", type=float)
        p.add_argument("--control", type=int, help="constant control index")
        p.add_argument("--feedback", action="store_true",
                       help="use the lattice argmax policy instead of a constant control")


FLAG_KEYS = {
    "benchmark": "benchmark.name", "out": "output.directory", "workers": "workers",
    "domain": "scheme.domain", "coupling": "scheme.coupling", "scale": "scheme.scale",
    "h": "scheme.h", "h_list": "scheme.h_list", "solver": "scheme.solver",
    "reference": "scheme.reference", "interior": "scheme.interior", "substep": "scheme.substep",
    "substeps": "scheme.substeps", "dump_surface": "output.dump_surface",
    "paths": "mc.path_count", "steps_per_interval": "mc.steps_per_interval", "seed": "mc.seed",
    "start_time": "mc.start_time", "start_state": "mc.start_state",
    "policy_interval": "mc.policy_interval", "control": "mc.control",
}


def _overrides(args) -> dict:
    out = {"command": args.command}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "feedback", False):
        out["mc.control"] = None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcpolicy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("solve", "semi-Lagrangian solve"),
                        ("pcp", "piecewise constant policy solve"),
                        ("mc", "Monte Carlo cost of a policy"),
                        ("rates", "refinement study with fitted order")):
        _pipeline_flags(sub.add_parser(name, help=help_), name)

    run = sub.add_parser("run", help="execute a YAML experiment file")
    run.add_argument("config")

    mom = sub.add_parser("moments", help="moment report of the +-sqrt(h) displacement")
    mom.add_argument("--p", type=int, default=1)
    mom.add_argument("--h", type=float, required=True)
    mom.add_argument("--k-max", type=int, default=4)

    mol = sub.add_parser("mollify-report", help="derivative scaling of mollified test functions")
    mol.add_argument("--function", choices=("abs", "sin", "butterfly"), default="abs")
    mol.add_argument("--epsilon", type=_floats, default=[0.2, 0.1, 0.05])
    mol.add_argument("--probes", type=int, default=41)
    mol.add_argument("--space-order", type=int, default=2)
    mol.add_argument("--time-order", type=int, default=0)

    opt = sub.add_parser("optimize-rate", help="exact order from bound exponents")
    grp = opt.add_mutually_exclusive_group(required=True)
    grp.add_argument("--terms", help='"p,q;p,q;..." meaning sum of h^(p a + q)')
    grp.add_argument("--preset", choices=sorted(BOUND_TERMS))
    return parser


def _mollify_report(args) -> int:
    from .model import butterfly_payoff

    fns = {"abs": lambda x: np.abs(x[:, 0]), "sin": lambda x: np.sin(x[:, 0]),
           "butterfly": lambda x: butterfly_payoff(x[:, 0])}
    fn = fns[args.function]
    xs = np.linspace(-1.0, 1.0, args.probes)
    print("epsilon,mass,sup_gap," + ",".join(
        f"m{mt}k{k}" for mt in range(args.time_order + 1) for k in range(args.space_order + 1)
        if mt + k >= 1 and 2 * mt + k <= 4))
    for eps in args.epsilon:
        m = Mollifier(eps)
        smooth = mollify_surface(lambda t, x: fn(x), m)
        gap = float(np.max(np.abs(smooth(1.0, xs[:, None]) - fn(xs[:, None]))))
        rep = derivative_bound_report(lambda t, x: fn(x), m, args.space_order, args.time_order,
                                      [(1.0, [x]) for x in xs])
        print(",".join([repr(eps), f"{kernel_mass(m):.12f}", f"{gap:.6e}"]
                       + [f"{v:.6e}" for v in rep.values()]))
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "optimize-rate":
            terms = BOUND_TERMS[args.preset] if args.preset else parse_terms(args.terms)
            print(optimize_rate(terms))
            return EXIT_OK
        if args.command == "moments":
            rep = moment_report(zeta_support(args.p, args.h), args.k_max)
            for k, v in dataclasses.asdict(rep).items():
                print(f"{k}={v!r}")
            return EXIT_OK
        if args.command == "mollify-report":
            return _mollify_report(args)
    except (RateError, ConfigError, MollifierError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return run_experiment(args.config, argv=argv)

    overrides = _overrides(args)
    if args.param:
        for k, v in args.param:
            overrides[f"benchmark.parameters.{k}"] = v
    if args.config:
        return run_experiment(args.config, overrides, argv)
    data: dict = {}
    for key, value in overrides.items():
        _set(data, key, value)
    try:
        cfg = ExperimentConfig.from_dict(data)
    except (ConfigFileError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(cfg, argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
