"""Monte-Carlo strong-error experiments on coupled noise paths.

One sample draws the fine increment stream once, at the reference
resolution ``(N_ref, M_ref)``.  Every run of the experiment (scheme, N, M)
is advanced in the same pass: runs at step ``T / M`` receive the fine
increments aggregated over ``M_ref / M`` fine steps and truncated to their
first N modes.  The reference solution (``exp2`` at the reference
resolution) rides along, and each run's squared displacement error at ``T``
is recorded.
"""
from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalInstability
from .integrators import SchemeKind, advance, make_propagator, rv_per_step
from .noise import Aggregator, SeedSpec, iter_fine_chunks
from .spectral import DriftKind, InitialData, build_basis, eval_nonlinearity, get_problem, project_initial

__all__ = [
    "ExperimentConfig",
    "ErrorRow",
    "ErrorReport",
    "RateFit",
    "run_sample",
    "run_experiment",
    "spatial_sweep",
    "temporal_sweep",
    "cost_study",
    "cost_ladder",
    "fit_rate",
    "SampleFailure",
]

CSV_HEADER = ["scheme", "N", "M", "tau", "rmse", "stderr", "samples", "rv_count"]


class SampleFailure(RuntimeError):
    def __init__(self, sample_index, cause):
        super().__init__(f"sample {sample_index} failed: {cause}")
        self.sample_index = sample_index
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "sine-gordon"
    T: float = 1.0
    schemes: tuple = ("exp1",)
    ladder: tuple = ()
    reference: tuple = (100, 1024)
    samples: int = 100
    master_seed: int = 0
    # optional per-scheme ladders, overriding ``ladder`` for that scheme
    scheme_ladders: tuple = ()
    reference_scheme: str = "exp2"
    dealias: bool = False
    u0: InitialData | None = None
    v0: InitialData | None = None

    def runs(self) -> list[tuple[str, int, int]]:
        """All (scheme, N, M) cells, in report order."""
        per = dict(self.scheme_ladders)
        out = []
        for s in self.schemes:
            for n, m in per.get(s, self.ladder):
                out.append((s, int(n), int(m)))
        return out

    def validate(self) -> "ExperimentConfig":
        try:
            DriftKind(self.problem)
        except ValueError:
            raise ConfigError(f"unknown problem {self.problem!r}", "problem") from None
        if not (isinstance(self.T, (int, float)) and self.T > 0):
            raise ConfigError("must be a positive number", "T")
        for s in tuple(self.schemes) + (self.reference_scheme,):
            try:
                SchemeKind(s)
            except ValueError:
                raise ConfigError(f"unknown scheme {s!r}", "schemes") from None
        if len(self.reference) != 2:
            raise ConfigError("must be [N_ref, M_ref]", "reference")
        n_ref, m_ref = self.reference
        if n_ref < 1 or m_ref < 1:
            raise ConfigError("N_ref and M_ref must be positive", "reference")
        if int(self.samples) < 1:
            raise ConfigError("must be >= 1", "samples")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "master_seed")
        runs = self.runs()
        if not runs:
            raise ConfigError("empty resolution ladder", "ladder")
        for s, n, m in runs:
            if n < 1 or m < 1:
                raise ConfigError(f"({n}, {m}) for {s}: N and M must be positive", "ladder")
            if n > n_ref:
                raise ConfigError(f"N = {n} for {s} exceeds N_ref = {n_ref}", "ladder")
            if m_ref % m:
                raise ConfigError(f"M = {m} for {s} does not divide M_ref = {m_ref}", "ladder")
        return self

    def replace(self, **kw) -> "ExperimentConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return ExperimentConfig(**d)

    def to_json(self) -> dict:
        d = {
            "problem": self.problem,
            "T": self.T,
            "schemes": list(self.schemes),
            "ladder": [list(x) for x in self.ladder],
            "reference": list(self.reference),
            "samples": self.samples,
            "master_seed": self.master_seed,
            "reference_scheme": self.reference_scheme,
            "dealias": self.dealias,
        }
        if self.scheme_ladders:
            d["scheme_ladders"] = {s: [list(x) for x in lad] for s, lad in self.scheme_ladders}
        if self.u0 is not None:
            d["u0"] = self.u0.to_json()
        if self.v0 is not None:
            d["v0"] = self.v0.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {"problem", "T", "schemes", "ladder", "reference", "samples", "master_seed",
                 "scheme_ladders", "reference_scheme", "dealias", "u0", "v0", "experiment", "workers"}
        for k in d:
            if k not in known:
                raise ConfigError("unknown field", k)
        try:
            kw = {}
            for k in ("problem", "reference_scheme"):
                if k in d:
                    kw[k] = str(d[k])
            if "T" in d:
                kw["T"] = float(d["T"])
            if "schemes" in d:
                kw["schemes"] = tuple(str(s) for s in d["schemes"])
            if "ladder" in d:
                kw["ladder"] = tuple((int(n), int(m)) for n, m in d["ladder"])
            if "reference" in d:
                kw["reference"] = tuple(int(x) for x in d["reference"])
            if "samples" in d:
                kw["samples"] = int(d["samples"])
            if "master_seed" in d:
                kw["master_seed"] = int(d["master_seed"])
            if "dealias" in d:
                kw["dealias"] = bool(d["dealias"])
            if "scheme_ladders" in d:
                kw["scheme_ladders"] = tuple(
                    (str(s), tuple((int(n), int(m)) for n, m in lad)) for s, lad in d["scheme_ladders"].items()
                )
            for k in ("u0", "v0"):
                if k in d:
                    kw[k] = InitialData.from_json(d[k])
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            raise ConfigError(f"malformed value ({exc})") from None
        return cls(**kw)

    def problem_spec(self):
        return get_problem(self.problem, self.u0, self.v0)


class _Run:
    __slots__ = ("scheme", "n", "m", "prop", "u", "v", "drift", "dealias", "steps")

    def __init__(self, scheme, n, m, T, problem, dealias):
        basis = build_basis(n)
        self.scheme, self.n, self.m = scheme, n, m
        self.prop = make_propagator(scheme, basis, T / m)
        init = project_initial(problem, basis)
        self.u, self.v = init.u_hat.copy(), init.v_hat.copy()
        self.drift = problem.drift
        self.dealias = dealias
        self.steps = 0

    def step(self, blk):
        n = self.n
        f_hat = eval_nonlinearity(self.u, self.drift, dealias=self.dealias)
        u, v = advance(self.prop, self.u, self.v, f_hat, blk.dbeta[:n], blk.zeta[:n], blk.zeta_hat[:n])
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            bad = int(np.flatnonzero(~(np.isfinite(u) & np.isfinite(v)))[0]) + 1
            raise NumericalInstability(
                f"{self.scheme} (N={n}, M={self.m}) non-finite after step {self.steps} in mode {bad}",
                step=self.steps, mode=bad,
            )
        self.u, self.v = u, v
        self.steps += 1


def _sample_errors(config: ExperimentConfig, sample_index: int) -> dict:
    """Squared displacement errors of every run for one sample."""
    n_ref, m_ref = config.reference
    problem = config.problem_spec()
    runs = {key: _Run(*key, config.T, problem, config.dealias) for key in config.runs()}
    ref_key = (config.reference_scheme, n_ref, m_ref)
    ref = runs.get(ref_key)
    if ref is None:
        ref = _Run(*ref_key, config.T, problem, config.dealias)
    groups = defaultdict(list)
    for r in list(runs.values()) + ([ref] if ref_key not in runs else []):
        groups[m_ref // r.m].append(r)
    basis_ref = build_basis(n_ref)
    tau_f = config.T / m_ref
    aggs = {ratio: Aggregator(basis_ref.lam[: max(r.n for r in rs)], tau_f, ratio) for ratio, rs in groups.items()}
    seed = SeedSpec(config.master_seed, sample_index, m_ref)
    for _, chunk in iter_fine_chunks(seed, basis_ref, tau_f, m_ref):
        for ratio in sorted(groups):
            for blk in aggs[ratio].push(*chunk):
                for r in groups[ratio]:
                    r.step(blk)
    out = {}
    for key, r in runs.items():
        assert r.steps == r.m
        d = np.zeros(n_ref)
        d[: r.n] = r.u
        d -= ref.u
        out[key] = float(d @ d)
    return out


def _guarded(config, sample_index):
    try:
        return _sample_errors(config, sample_index)
    except Exception as exc:  # reported with its sample index, never dropped
        raise SampleFailure(sample_index, exc) from exc


def run_sample(config: ExperimentConfig, scheme, resolution, sample_index: int) -> float:
    """Squared L2 error of one (scheme, N, M) cell against the reference, for one sample."""
    n, m = resolution
    cfg = config.replace(schemes=(str(SchemeKind(scheme).value),), ladder=((n, m),), scheme_ladders=()).validate()
    return _guarded(cfg, sample_index)[(SchemeKind(scheme).value, n, m)]


@dataclass(frozen=True)
class ErrorRow:
    scheme: str
    N: int
    M: int
    tau: float
    rmse: float
    stderr: float
    samples: int
    rv_count: int


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)
    sq_errors: dict = field(default_factory=dict, repr=False)

    def for_scheme(self, scheme) -> list:
        return [r for r in self.rows if r.scheme == scheme]

    def row(self, scheme, n, m) -> ErrorRow:
        for r in self.rows:
            if (r.scheme, r.N, r.M) == (scheme, n, m):
                return r
        raise KeyError((scheme, n, m))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.scheme, r.N, r.M, f"{r.tau:.17g}", f"{r.rmse:.17g}", f"{r.stderr:.17g}",
                        r.samples, r.rv_count])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ErrorReport":
        reader = csv.DictReader(io.StringIO(text))
        rows = [ErrorRow(d["scheme"], int(d["N"]), int(d["M"]), float(d["tau"]), float(d["rmse"]),
                         float(d["stderr"]), int(d["samples"]), int(d["rv_count"])) for d in reader]
        return cls(rows)


def _summarize(config: ExperimentConfig, per_sample: Sequence[dict]) -> ErrorReport:
    report = ErrorReport()
    s = len(per_sample)
    for key in config.runs():
        scheme, n, m = key
        e2 = np.array([d[key] for d in per_sample])
        mean = float(np.mean(e2))
        rmse = float(np.sqrt(mean))
        if s > 1 and rmse > 0:
            # delta method: se(sqrt(m)) = se(m) / (2 sqrt(m))
            stderr = float(np.std(e2, ddof=1) / np.sqrt(s) / (2.0 * rmse))
        else:
            stderr = 0.0
        report.rows.append(ErrorRow(scheme, n, m, config.T / m, rmse, stderr, s, rv_per_step(scheme) * n * m))
        report.sq_errors[key] = e2
    return report


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> ErrorReport:
    """All cells of ``config`` over ``config.samples`` coupled samples.

    Samples are independent work units keyed by their index; results are
    reduced in sample order, so the report does not depend on ``workers``.
    """
    config.validate()
    workers = default_workers() if workers is None else max(1, int(workers))
    indices = range(config.samples)
    if workers == 1:
        per_sample = [_guarded(config, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_sample = list(pool.map(partial(_guarded, config), indices,
                                       chunksize=max(1, config.samples // (4 * workers))))
    return _summarize(config, per_sample)


def spatial_sweep(config: ExperimentConfig, workers: int | None = None) -> ErrorReport:
    """Vary N at the reference step size."""
    m_ref = config.reference[1]
    for s, n, m in config.validate().runs():
        if m != m_ref:
            raise ConfigError(f"spatial sweep needs M = M_ref = {m_ref}, got {m} for {s}", "ladder")
    return run_experiment(config, workers)


def temporal_sweep(config: ExperimentConfig, workers: int | None = None) -> ErrorReport:
    """Vary M at N = N_ref."""
    n_ref = config.reference[0]
    for s, n, m in config.validate().runs():
        if n != n_ref:
            raise ConfigError(f"temporal sweep needs N = N_ref = {n_ref}, got {n} for {s}", "ladder")
    return run_experiment(config, workers)


def cost_ladder(scheme, log2_n: Sequence[int]) -> tuple:
    """(N, M) cells with M = N^p, p chosen so that N^(-1/2) matches tau^order.

    p = 1/2 for exp1/exp2, 1 for stm, 3/2 for cnm and 2 for lie.
    """
    num, den = {"exp1": (1, 2), "exp2": (1, 2), "stm": (1, 1), "cnm": (3, 2), "lie": (2, 1)}[SchemeKind(scheme).value]
    cells = []
    for k in log2_n:
        if (num * k) % den:
            raise ValueError(f"N = 2^{k} gives a non-integer M for {scheme}")
        cells.append((2**k, 2 ** (num * k // den)))
    return tuple(cells)


def cost_study(config: ExperimentConfig, workers: int | None = None) -> ErrorReport:
    """Balanced (N, M) cells per scheme; rows carry ``rv_count`` for cost comparisons."""
    if not config.scheme_ladders and not config.ladder:
        raise ConfigError("cost study needs per-scheme ladders", "scheme_ladders")
    return run_experiment(config, workers)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def fit_rate(rows: Sequence[ErrorRow], key: str = "tau") -> RateFit:
    """Least squares of log2(rmse) against log2(h), h = tau or 1/N."""
    if len(rows) < 2:
        raise ValueError("need at least two rows to fit a rate")
    if key == "tau":
        h = np.array([r.tau for r in rows], dtype=float)
    elif key == "N":
        h = 1.0 / np.array([r.N for r in rows], dtype=float)
    else:
        raise ValueError(f"key must be 'tau' or 'N', got {key!r}")
    e = np.array([r.rmse for r in rows], dtype=float)
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("errors and refinement parameters must be positive")
    return _ols(np.log2(h), np.log2(e))


def _ols(x, y) -> RateFit:
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("refinement parameter does not vary")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - intercept - slope * x) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))
    return RateFit(float(slope), float(intercept), r2)
