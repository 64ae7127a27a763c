"""``spde-wave`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import platform
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, NumericalInstability
from .harness import ExperimentConfig, SampleFailure, cost_study, spatial_sweep, temporal_sweep
from .integrators import SchemeKind, simulate_path
from .noise import SeedSpec, iter_blocks, increment_covariance
from .oracle import QuadratureSpec, quadrature_covariance
from .spectral import DriftKind, InitialData, build_basis, dst_inverse, get_problem, grid, project_initial

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SIMULATE_FIELDS = {"problem", "T", "scheme", "N", "M", "master_seed", "sample_index", "fine_M",
                   "zero_noise", "dealias", "u0", "v0", "experiment"}


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        sha = rev.stdout.strip() if rev.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"spde_wave-{__version__}" + (f"+g{sha}" if sha else "")


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", str(path))
    return data


class SimulateConfig:
    """One-path run: problem, scheme, resolution and the noise level it draws from."""

    def __init__(self, d: dict):
        for k in d:
            if k not in SIMULATE_FIELDS:
                raise ConfigError("unknown field", k)
        try:
            self.problem = str(d.get("problem", "sine-gordon"))
            DriftKind(self.problem)
        except ValueError:
            raise ConfigError(f"unknown problem {d.get('problem')!r}", "problem") from None
        try:
            self.scheme = SchemeKind(str(d.get("scheme", "exp1"))).value
        except ValueError:
            raise ConfigError(f"unknown scheme {d.get('scheme')!r}", "scheme") from None
        self.T = self._num(d, "T", 1.0, float)
        self.N = self._num(d, "N", 64, int)
        self.M = self._num(d, "M", 64, int)
        self.fine_M = self._num(d, "fine_M", self.M, int)
        if self.fine_M % self.M:
            raise ConfigError(f"fine_M = {self.fine_M} is not a multiple of M = {self.M}", "fine_M")
        self.master_seed = int(d.get("master_seed", 0))
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "master_seed")
        self.sample_index = int(d.get("sample_index", 0))
        self.zero_noise = bool(d.get("zero_noise", False))
        self.dealias = bool(d.get("dealias", False))
        try:
            self.u0 = InitialData.from_json(d["u0"]) if "u0" in d else None
            self.v0 = InitialData.from_json(d["v0"]) if "v0" in d else None
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed initial data ({exc})", "u0/v0") from None
        for name, data in (("u0", self.u0), ("v0", self.v0)):
            if data is not None and data.kind not in ("zero", "constant", "coefficients"):
                raise ConfigError(f"unsupported initial-data kind {data.kind!r}", name)

    @staticmethod
    def _num(d, key, default, cast):
        val = d.get(key, default)
        try:
            out = cast(val)
        except (TypeError, ValueError):
            raise ConfigError(f"expected a number, got {val!r}", key) from None
        if cast is int and out != val and key in d and not isinstance(val, int):
            raise ConfigError(f"expected an integer, got {val!r}", key)
        if out <= 0:
            raise ConfigError("must be positive", key)
        return out

    def to_json(self) -> dict:
        d = {"problem": self.problem, "scheme": self.scheme, "T": self.T, "N": self.N, "M": self.M,
             "fine_M": self.fine_M, "master_seed": self.master_seed, "sample_index": self.sample_index,
             "zero_noise": self.zero_noise, "dealias": self.dealias}
        if self.u0 is not None:
            d["u0"] = self.u0.to_json()
        if self.v0 is not None:
            d["v0"] = self.v0.to_json()
        return d


def simulate(cfg: SimulateConfig) -> tuple[np.ndarray, np.ndarray]:
    """Final displacement on the grid ``j / (N + 1)``, ``j = 0..N+1``, boundary zeros included."""
    basis = build_basis(cfg.N)
    problem = get_problem(cfg.problem, cfg.u0, cfg.v0)
    initial = project_initial(problem, basis)
    if cfg.zero_noise:
        noise = None
    else:
        seed = SeedSpec(cfg.master_seed, cfg.sample_index, cfg.fine_M)
        noise = iter_blocks(seed, basis, cfg.T / cfg.fine_M, cfg.fine_M, cfg.fine_M // cfg.M)
    final = simulate_path(cfg.scheme, basis, cfg.T / cfg.M, cfg.M, problem.drift, initial, noise,
                          dealias=cfg.dealias)
    x = np.concatenate([[0.0], grid(cfg.N), [1.0]])
    u = np.concatenate([[0.0], dst_inverse(final.u_hat), [0.0]])
    return x, u


def write_profile(path, x, u) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("x,u\n")
        for xi, ui in zip(x, u):
            fh.write(f"{xi:.17g},{ui:.17g}\n")


def write_manifest(out_path, command, config_echo, master_seed, timings, started) -> Path:
    manifest = {
        "command": command,
        "config": config_echo,
        "build": build_id(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "master_seed": master_seed,
        "started_utc": started.isoformat(),
        "wall_clock_s": sum(timings.values()),
        "timings_s": timings,
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _relative(a, b, scale):
    return abs(a - b) / max(abs(b), scale) if max(abs(b), scale) > 0 else abs(a - b)


def covariance_table(lam: float, tau: float, nodes: int, rule: str = "trapezoid") -> list[tuple]:
    """Rows ``(name, closed_form, quadrature, rel_delta)``.

    Cross-covariances are compared relative to the geometric mean of the two
    variances, since they can vanish while the variances do not.
    """
    cf = increment_covariance(lam, tau)
    qd = quadrature_covariance(lam, tau, QuadratureSpec(nodes, rule))
    var = {"b": float(cf.var_dbeta), "z": float(cf.var_zeta), "zh": float(cf.var_zeta_hat)}
    pairs = [("var_dbeta", "b", "b"), ("cov_bz", "b", "z"), ("cov_bzh", "b", "zh"),
             ("var_zeta", "z", "z"), ("cov_zz", "z", "zh"), ("var_zeta_hat", "zh", "zh")]
    rows = []
    for name, p, q in pairs:
        a, b = float(getattr(cf, name)), float(getattr(qd, name))
        rows.append((name, a, b, _relative(a, b, np.sqrt(var[p] * var[q]))))
    return rows


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spde-wave", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="one path, final displacement profile as CSV")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--zero-noise", action="store_true")
    sim.add_argument("--out", required=True)

    for name, helptext in (("spatial", "vary N at fixed M"), ("temporal", "vary M at fixed N"),
                           ("cost", "balanced (N, M) cells per scheme")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--config", required=True)
        e.add_argument("--seed", type=int)
        e.add_argument("--samples", type=int)
        e.add_argument("--workers", type=int)
        e.add_argument("--out", required=True)

    cov = sub.add_parser("covariance-check", help="closed-form vs quadrature increment covariances")
    cov.add_argument("--config")
    cov.add_argument("--lam", type=float)
    cov.add_argument("--tau", type=float)
    cov.add_argument("--nodes", type=int)
    cov.add_argument("--rule", choices=("trapezoid", "simpson"))
    return p


def _cmd_simulate(args) -> int:
    started = datetime.now(timezone.utc)
    d = load_json(args.config)
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.zero_noise:
        d["zero_noise"] = True
    cfg = SimulateConfig(d)
    t0 = time.perf_counter()
    x, u = simulate(cfg)
    t1 = time.perf_counter()
    write_profile(args.out, x, u)
    write_manifest(args.out, "simulate", cfg.to_json(), cfg.master_seed,
                   {"simulate": t1 - t0, "write": time.perf_counter() - t1}, started)
    return EXIT_OK


_EXPERIMENTS = {"spatial": spatial_sweep, "temporal": temporal_sweep, "cost": cost_study}


def _cmd_experiment(args) -> int:
    started = datetime.now(timezone.utc)
    d = load_json(args.config)
    workers = d.get("workers")
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.samples is not None:
        d["samples"] = args.samples
    if args.workers is not None:
        workers = args.workers
    cfg = ExperimentConfig.from_json(d).validate()
    t0 = time.perf_counter()
    report = _EXPERIMENTS[args.command](cfg, workers)
    t1 = time.perf_counter()
    report.write_csv(args.out)
    write_manifest(args.out, args.command, cfg.to_json(), cfg.master_seed,
                   {args.command: t1 - t0, "write": time.perf_counter() - t1}, started)
    return EXIT_OK


def _cmd_covariance(args) -> int:
    d = load_json(args.config) if args.config else {}
    lam = args.lam if args.lam is not None else d.get("lam", np.pi**2)
    tau = args.tau if args.tau is not None else d.get("tau", 0.1)
    nodes = args.nodes if args.nodes is not None else d.get("nodes", 100_000)
    rule = args.rule or d.get("rule", "trapezoid")
    if not (isinstance(lam, (int, float)) and lam > 0):
        raise ConfigError("must be positive", "lam")
    if not (isinstance(tau, (int, float)) and tau > 0):
        raise ConfigError("must be positive", "tau")
    if int(nodes) < 1000:
        raise ConfigError("must be >= 1000", "nodes")
    rows = covariance_table(float(lam), float(tau), int(nodes), rule)
    print(f"lambda = {lam:.17g}  tau = {tau:.17g}  nodes = {int(nodes)}  rule = {rule}")
    print(f"{'quantity':<14}{'closed_form':>26}{'quadrature':>26}{'rel_delta':>12}")
    for name, a, b, rel in rows:
        print(f"{name:<14}{a:>26.17g}{b:>26.17g}{rel:>12.3e}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "covariance-check":
            return _cmd_covariance(args)
        return _cmd_experiment(args)
    except ConfigError as exc:
        print(f"spde-wave: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalInstability, FloatingPointError) as exc:
        print(f"spde-wave: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SampleFailure as exc:
        if isinstance(exc.cause, FloatingPointError):
            print(f"spde-wave: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
