"""Sine eigenbasis of the Dirichlet Laplacian on (0, 1) and the DST plumbing.

Grid and normalization conventions
----------------------------------
Physical fields live on the N interior points ``x_j = j / (N + 1)``,
``j = 1..N``.  Coefficients are taken against the orthonormal basis
``e_i(x) = sqrt(2) sin(i pi x)``:

    dst_inverse(c)[j] = sum_i c_i sqrt(2) sin(i pi x_j)
    dst_forward(f)[i] = 1/(N + 1) * sum_j f_j sqrt(2) sin(i pi x_j)

so ``dst_inverse(dst_forward(f)) == f`` and the discrete Parseval identity
reads ``sum_j f_j**2 / (N + 1) == sum_i c_i**2``.  Both directions are the
same DST-I matrix up to the scalar factors above.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from .errors import NumericalInstability

__all__ = [
    "Basis",
    "ModalState",
    "DriftKind",
    "Drift",
    "InitialData",
    "Problem",
    "build_basis",
    "grid",
    "dst_forward",
    "dst_inverse",
    "eval_nonlinearity",
    "constant_coefficients",
    "project_initial",
    "l2_error",
    "energy_error",
    "get_drift",
    "get_problem",
]


@dataclass(frozen=True)
class Basis:
    n_modes: int
    lam: np.ndarray
    sqrt_lam: np.ndarray

    def __post_init__(self):
        self.lam.setflags(write=False)
        self.sqrt_lam.setflags(write=False)


def build_basis(n_modes: int) -> Basis:
    """First ``n_modes`` eigenpairs, ``lambda_i = pi**2 i**2``."""
    n_modes = int(n_modes)
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    i = np.arange(1, n_modes + 1, dtype=np.float64)
    sqrt_lam = np.pi * i
    # pi**2 * i**2 keeps lam exact to a couple of ulp; sqrt_lam**2 would drift
    lam = np.pi**2 * i**2
    return Basis(n_modes, lam, sqrt_lam)


@dataclass(frozen=True)
class ModalState:
    """Sine coefficients of displacement ``u`` and velocity ``v``."""

    u_hat: np.ndarray
    v_hat: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u_hat, dtype=np.float64)
        v = np.asarray(self.v_hat, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError(f"u_hat and v_hat must be 1-D of equal length, got {u.shape} and {v.shape}")
        object.__setattr__(self, "u_hat", u)
        object.__setattr__(self, "v_hat", v)

    @property
    def n_modes(self) -> int:
        return self.u_hat.shape[0]

    @classmethod
    def zeros(cls, n_modes: int) -> "ModalState":
        return cls(np.zeros(n_modes), np.zeros(n_modes))

    def truncate(self, n_modes: int) -> "ModalState":
        return ModalState(self.u_hat[:n_modes].copy(), self.v_hat[:n_modes].copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.u_hat).all() and np.isfinite(self.v_hat).all())


def grid(n: int) -> np.ndarray:
    """Interior collocation points ``j / (n + 1)``, ``j = 1..n``."""
    return np.arange(1, n + 1) / (n + 1)


def dst_forward(values: np.ndarray) -> np.ndarray:
    """Grid values -> sine coefficients (acts on the last axis)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    if n < 1:
        raise ValueError("empty field")
    return scipy.fft.dst(values, type=1, axis=-1) / (np.sqrt(2.0) * (n + 1))


def dst_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Sine coefficients -> grid values (acts on the last axis)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] < 1:
        raise ValueError("empty coefficient array")
    return scipy.fft.dst(coeffs, type=1, axis=-1) / np.sqrt(2.0)


class DriftKind(str, enum.Enum):
    LINEAR = "linear"
    SINE_GORDON = "sine-gordon"
    RATIONAL = "rational"


def _zero(z):
    return np.zeros_like(z)


def _sine_gordon(z):
    return -np.sin(z)


def _sine_gordon_prime(z):
    return -np.cos(z)


def _rational(z):
    return (1.0 + z) / (1.0 + z * z)


def _rational_prime(z):
    zz = 1.0 + z * z
    return (1.0 - 2.0 * z - z * z) / (zz * zz)


@dataclass(frozen=True)
class Drift:
    """Pointwise nonlinearity ``f(u)`` together with its Lipschitz constant."""

    kind: DriftKind
    lipschitz_bound: float
    f: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    df: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    @property
    def is_linear(self) -> bool:
        return self.kind is DriftKind.LINEAR


_DRIFTS = {
    DriftKind.LINEAR: Drift(DriftKind.LINEAR, 1.0, _zero, _zero),
    DriftKind.SINE_GORDON: Drift(DriftKind.SINE_GORDON, 1.0, _sine_gordon, _sine_gordon_prime),
    DriftKind.RATIONAL: Drift(DriftKind.RATIONAL, 2.0, _rational, _rational_prime),
}


def get_drift(kind) -> Drift:
    return _DRIFTS[DriftKind(kind)]


def eval_nonlinearity(state, drift: Drift, basis: Basis | None = None, dealias: bool = False) -> np.ndarray:
    """Collocation approximation of ``<F(u), e_i>``, ``i = 1..N``.

    ``state`` may be a :class:`ModalState` or a bare ``u_hat`` array.  With
    ``dealias`` the field is synthesized on a ``2N + 1`` point grid and the
    result truncated back to N modes; otherwise aliasing is ignored.
    """
    u_hat = state.u_hat if isinstance(state, ModalState) else np.asarray(state)
    n = u_hat.shape[-1]
    if basis is not None and basis.n_modes != n:
        raise ValueError(f"state has {n} modes, basis has {basis.n_modes}")
    if drift.is_linear:
        return np.zeros_like(u_hat, dtype=np.float64)
    # non-finite values are detected below and raised with context
    with np.errstate(invalid="ignore", over="ignore"):
        if dealias:
            padded = np.zeros(u_hat.shape[:-1] + (2 * n + 1,))
            padded[..., :n] = u_hat
            f_hat = dst_forward(drift.f(dst_inverse(padded)))[..., :n]
        else:
            f_hat = dst_forward(drift.f(dst_inverse(u_hat)))
    if not np.isfinite(f_hat).all():
        bad = int(np.flatnonzero(~np.isfinite(f_hat.reshape(-1)))[0]) % n
        raise NumericalInstability("non-finite value in nonlinearity evaluation", mode=bad + 1)
    return f_hat


@dataclass(frozen=True)
class InitialData:
    """One of: ``zero``, ``constant`` (value ``c``), ``coefficients`` (explicit list)."""

    kind: str = "zero"
    value: float = 0.0
    coefficients: tuple = ()

    def to_json(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "coefficients":
            return {"kind": "coefficients", "values": list(self.coefficients)}
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, obj) -> "InitialData":
        if isinstance(obj, (int, float)):
            return cls("constant", float(obj)) if obj else cls()
        kind = obj.get("kind", "zero")
        if kind == "constant":
            return cls("constant", float(obj["value"]))
        if kind == "coefficients":
            return cls("coefficients", coefficients=tuple(float(c) for c in obj["values"]))
        return cls(kind)


def constant_coefficients(c: float, n_modes: int) -> np.ndarray:
    """Exact sine coefficients of the constant ``c``: ``2 sqrt(2) c / (i pi)`` for odd i."""
    i = np.arange(1, n_modes + 1)
    out = np.zeros(n_modes)
    odd = i % 2 == 1
    out[odd] = 2.0 * np.sqrt(2.0) * c / (i[odd] * np.pi)
    return out


def _project(data: InitialData, n_modes: int) -> np.ndarray:
    if data.kind == "zero":
        return np.zeros(n_modes)
    if data.kind == "constant":
        return constant_coefficients(data.value, n_modes)
    if data.kind == "coefficients":
        out = np.zeros(n_modes)
        c = np.asarray(data.coefficients, dtype=np.float64)[:n_modes]
        out[: c.shape[0]] = c
        return out
    raise ValueError(f"unsupported initial-data kind {data.kind!r}")


@dataclass(frozen=True)
class Problem:
    drift: Drift
    u0: InitialData = InitialData()
    v0: InitialData = InitialData()

    @property
    def name(self) -> str:
        return self.drift.kind.value


def get_problem(name, u0: InitialData | None = None, v0: InitialData | None = None) -> Problem:
    """Built-in test problems.

    ``sine-gordon``: f = -sin u, u0 = v0 = 0.
    ``rational``: f = (1 + u) / (1 + u**2), u0 = 0, v0 = 1.
    ``linear``: f = 0, u0 = v0 = 0.
    """
    kind = DriftKind(name)
    default_v0 = InitialData("constant", 1.0) if kind is DriftKind.RATIONAL else InitialData()
    return Problem(get_drift(kind), u0 or InitialData(), v0 or default_v0)


def project_initial(problem: Problem, basis: Basis) -> ModalState:
    """Exact projection of the initial data onto the first N modes."""
    n = basis.n_modes
    return ModalState(_project(problem.u0, n), _project(problem.v0, n))


def _padded_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = max(a.shape[0], b.shape[0])
    d = np.zeros(n)
    d[: a.shape[0]] += a
    d[: b.shape[0]] -= b
    return d


def l2_error(a: ModalState, b: ModalState) -> float:
    """Displacement L2 distance; the shorter coefficient vector is zero-padded."""
    return float(np.linalg.norm(_padded_diff(a.u_hat, b.u_hat)))


def energy_error(a: ModalState, b: ModalState, basis: Basis) -> float:
    """Distance in the ``U x H^-1`` product norm (velocity weighted by 1/lambda)."""
    du = _padded_diff(a.u_hat, b.u_hat)
    dv = _padded_diff(a.v_hat, b.v_hat)
    if basis.n_modes < dv.shape[0]:
        basis = build_basis(dv.shape[0])
    return float(np.sqrt(np.sum(du**2) + np.sum(dv**2 / basis.lam[: dv.shape[0]])))

