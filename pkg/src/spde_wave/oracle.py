"""Brute-force reference computations used to cross-check the fast paths.

Nothing here shares code with the closed forms or the DST pipeline it
validates: covariances come from direct quadrature of the Ito-isometry
integrals, and the Euler-Maruyama reference evaluates the nonlinearity with
a dense sine matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numba
import numpy as np

from .errors import NumericalInstability
from .noise import IncrementCovariance, NoiseBlock
from .spectral import Basis, Drift, DriftKind, ModalState

__all__ = [
    "QuadratureSpec",
    "quadrature_covariance",
    "exact_linear_state",
    "em_reference",
    "sine_matrix",
]


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 100_000
    # "trapezoid", or "simpson" (composite Simpson; an even node count is bumped by one)
    rule: str = "trapezoid"

    def __post_init__(self):
        if self.nodes < 1000:
            raise ValueError("at least 1000 quadrature nodes required")
        if self.rule not in ("trapezoid", "simpson"):
            raise ValueError(f"unknown rule {self.rule!r}")


@lru_cache(maxsize=8)
def _unit_weights(nodes: int, rule: str) -> np.ndarray:
    """Weights of the composite rule on ``nodes`` equispaced points of [0, 1]."""
    h = 1.0 / (nodes - 1)
    if rule == "trapezoid":
        w = np.full(nodes, h)
        w[[0, -1]] = 0.5 * h
    else:
        w = np.full(nodes, 2.0 * h / 3.0)
        w[1::2] = 4.0 * h / 3.0
        w[[0, -1]] = h / 3.0
    w.setflags(write=False)
    return w


def quadrature_covariance(lam: float, tau: float, spec: QuadratureSpec = QuadratureSpec()) -> IncrementCovariance:
    """Covariances of the increment triple by quadrature over ``s in [0, tau]``."""
    if tau == 0:
        z = np.float64(0.0)
        return IncrementCovariance(z, z, z, z, z, z)
    nodes = spec.nodes + (spec.rule == "simpson" and spec.nodes % 2 == 0)
    w = tau * _unit_weights(nodes, spec.rule)
    rl = np.sqrt(lam)
    r = np.linspace(0.0, tau, nodes)[::-1] * rl  # (tau - s) sqrt(lam)
    k_sin = np.sin(r) / rl
    k_cos = np.cos(r)
    return IncrementCovariance(
        var_dbeta=np.float64(tau),
        cov_bz=w @ k_sin,
        cov_bzh=w @ k_cos,
        var_zeta=w @ (k_sin * k_sin),
        cov_zz=w @ (k_sin * k_cos),
        var_zeta_hat=w @ (k_cos * k_cos),
    )


def exact_linear_state(basis: Basis, T: float, initial: ModalState, noise: NoiseBlock) -> ModalState:
    """Mild solution with ``f = 0``: rotate the initial data and add the convolution over [0, T]."""
    if not np.isclose(noise.tau, T, rtol=1e-12, atol=0):
        raise ValueError(f"noise block covers {noise.tau}, expected {T}")
    n = basis.n_modes
    th = T * basis.sqrt_lam
    c, s = np.cos(th), np.sin(th)
    u0, v0 = initial.u_hat, initial.v_hat
    u = c * u0 + s / basis.sqrt_lam * v0 + noise.zeta[:n]
    v = -basis.sqrt_lam * s * u0 + c * v0 + noise.zeta_hat[:n]
    return ModalState(u, v)


def sine_matrix(n: int) -> np.ndarray:
    """``S[j, i] = e_{i+1}(x_{j+1})`` on the interior grid."""
    x = np.arange(1, n + 1) / (n + 1)
    i = np.arange(1, n + 1)
    return np.sqrt(2.0) * np.sin(np.pi * np.outer(x, i))


_DRIFT_CODES = {DriftKind.LINEAR: 0, DriftKind.SINE_GORDON: 1, DriftKind.RATIONAL: 2}


@numba.njit(cache=True)
def _em_kernel(u, v, dbeta, h, c, s, rl, smat, code):
    n = u.shape[0]
    vals = np.empty(n)
    f_hat = np.empty(n)
    scale = 1.0 / (n + 1)
    for m in range(dbeta.shape[0]):
        if code != 0:
            for j in range(n):
                acc = 0.0
                for i in range(n):
                    acc += smat[j, i] * u[i]
                if code == 1:
                    vals[j] = -np.sin(acc)
                else:
                    vals[j] = (1.0 + acc) / (1.0 + acc * acc)
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += smat[j, i] * vals[j]
                f_hat[i] = acc * scale
        else:
            for i in range(n):
                f_hat[i] = 0.0
        norm = 0.0
        for i in range(n):
            vi = v[i] + h * f_hat[i] + dbeta[m, i]
            ui = u[i]
            u[i] = c[i] * ui + s[i] / rl[i] * vi
            v[i] = -rl[i] * s[i] * ui + c[i] * vi
            norm += u[i] * u[i] + v[i] * v[i]
        if not norm < 1e12:
            return m
    return -1


def em_reference(basis: Basis, drift: Drift, T: float, n_fine: int,
                 dbeta: np.ndarray | Iterable[np.ndarray], initial: ModalState | None = None) -> ModalState:
    """Exponential Euler-Maruyama on ``n_fine`` steps driven by Brownian increments.

    Per step: ``X <- E(h) (X + [0, h F(u) + dbeta])``, i.e. the stochastic
    and drift integrals are frozen at the left endpoint and the linear part
    is rotated exactly.  ``dbeta`` is an ``(n_fine, N)`` array or an iterable
    of such chunks (consumed in order).
    """
    n = basis.n_modes
    if n > 8:
        raise ValueError("the Euler-Maruyama oracle is meant for N <= 8")
    h = T / n_fine
    th = h * basis.sqrt_lam
    c, s, rl = np.cos(th), np.sin(th), np.array(basis.sqrt_lam)
    smat = sine_matrix(n)
    code = _DRIFT_CODES[drift.kind]
    if initial is None:
        initial = ModalState.zeros(n)
    u, v = initial.u_hat.copy(), initial.v_hat.copy()
    chunks = [dbeta] if isinstance(dbeta, np.ndarray) else dbeta
    done = 0
    for chunk in chunks:
        chunk = np.ascontiguousarray(chunk[:, :n], dtype=np.float64)
        bad = _em_kernel(u, v, chunk, h, c, s, rl, smat, code)
        if bad >= 0:
            raise NumericalInstability(f"Euler-Maruyama blow-up at fine step {done + bad}", step=done + bad)
        done += chunk.shape[0]
    if done != n_fine:
        raise ValueError(f"got {done} increments, expected {n_fine}")
    return ModalState(u, v)
