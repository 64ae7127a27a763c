"""Time steppers for the Galerkin system, written as per-mode 2x2 affine maps.

Every scheme advances the pair (u_i, v_i) of one mode as

    [u+]   [a_uu a_uv] [u]   [w_u]         noise
    [v+] = [a_vu a_vv] [v] + [w_v] F_i  +  term

with ``F_i`` the collocated nonlinearity at the current state.

``exp1``/``exp2`` use the exact rotation and the exact increments
``(zeta, zeta_hat)``; they differ only in the drift quadrature.  ``stm``
keeps the rotation and the ``exp2`` drift but feeds the rotated Brownian
increment ``dbeta``.  ``cnm`` (Cayley / Crank-Nicolson) and ``lie``
(backward Euler) replace the rotation by a rational approximation and feed
``dbeta`` through the resolvent; the drift is explicit in all five.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import NumericalInstability
from .noise import NoiseBlock
from .spectral import Basis, Drift, ModalState, eval_nonlinearity

__all__ = ["SchemeKind", "Propagator", "make_propagator", "step", "simulate_path", "rv_per_step"]


class SchemeKind(str, enum.Enum):
    EXP1 = "exp1"
    EXP2 = "exp2"
    STM = "stm"
    CNM = "cnm"
    LIE = "lie"

    @property
    def uses_convolution(self) -> bool:
        return self in (SchemeKind.EXP1, SchemeKind.EXP2)


def rv_per_step(kind) -> int:
    """Independent normals consumed per mode and step."""
    return 2 if SchemeKind(kind).uses_convolution else 1


@dataclass(frozen=True)
class Propagator:
    kind: SchemeKind
    tau: float
    a_uu: np.ndarray
    a_uv: np.ndarray
    a_vu: np.ndarray
    a_vv: np.ndarray
    w_u: np.ndarray
    w_v: np.ndarray
    # weights of dbeta; zero for the exponential schemes
    n_u: np.ndarray
    n_v: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.a_uu.shape[0]

    def homogeneous(self) -> np.ndarray:
        """Per-mode homogeneous maps, shape ``(N, 2, 2)``."""
        return np.stack([np.stack([self.a_uu, self.a_uv], -1), np.stack([self.a_vu, self.a_vv], -1)], -2)


def make_propagator(kind, basis: Basis, tau: float) -> Propagator:
    kind = SchemeKind(kind)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    lam, rl = basis.lam, basis.sqrt_lam
    zero = np.zeros_like(lam)

    if kind in (SchemeKind.EXP1, SchemeKind.EXP2, SchemeKind.STM):
        th = tau * rl
        c, s = np.cos(th), np.sin(th)
        a = (c, s / rl, -rl * s, c)
        if kind is SchemeKind.EXP1:
            # 1 - cos(th) written as 2 sin^2(th/2) to avoid cancellation
            w = (2.0 * np.sin(0.5 * th) ** 2 / lam, s / rl)
        else:
            w = (tau * s / rl, tau * c)
        nz = (s / rl, c) if kind is SchemeKind.STM else (zero, zero)
        return Propagator(kind, float(tau), *a, *w, *nz)

    if kind is SchemeKind.CNM:
        q = 0.25 * tau * tau * lam
        d = 1.0 + q
        a = ((1.0 - q) / d, tau / d, -tau * lam / d, (1.0 - q) / d)
        col = (0.5 * tau / d, 1.0 / d)  # second column of (I - tau A / 2)^-1
    else:
        d = 1.0 + tau * tau * lam
        a = (1.0 / d, tau / d, -tau * lam / d, 1.0 / d)
        col = (tau / d, 1.0 / d)  # second column of (I - tau A)^-1
    return Propagator(kind, float(tau), *a, tau * col[0], tau * col[1], col[0], col[1])


def advance(prop: Propagator, u, v, f_hat, dbeta, zeta, zeta_hat):
    """Array-level step; also accepts leading batch axes."""
    if prop.kind.uses_convolution:
        nu, nv = zeta, zeta_hat
    else:
        nu, nv = prop.n_u * dbeta, prop.n_v * dbeta
    u_new = prop.a_uu * u + prop.a_uv * v + prop.w_u * f_hat + nu
    v_new = prop.a_vu * u + prop.a_vv * v + prop.w_v * f_hat + nv
    return u_new, v_new


def _check_finite(u, v, step_index):
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        bad = np.flatnonzero(~(np.isfinite(u) & np.isfinite(v)))[0]
        raise NumericalInstability(
            f"non-finite state after step {step_index} in mode {bad + 1}", step=step_index, mode=int(bad) + 1
        )


def step(prop: Propagator, state: ModalState, f_hat: np.ndarray, noise: NoiseBlock) -> ModalState:
    n = prop.n_modes
    if state.n_modes != n or f_hat.shape[-1] != n or noise.n_modes != n:
        raise ValueError(
            f"mode mismatch: propagator {n}, state {state.n_modes}, f_hat {f_hat.shape[-1]}, noise {noise.n_modes}"
        )
    u, v = advance(prop, state.u_hat, state.v_hat, f_hat, noise.dbeta, noise.zeta, noise.zeta_hat)
    _check_finite(u, v, noise.step_index)
    return ModalState(u, v)


def simulate_path(kind, basis: Basis, tau: float, n_steps: int, drift: Drift, initial: ModalState,
                  noise_source: Iterable[NoiseBlock] | None = None, trajectory: bool = False,
                  dealias: bool = False):
    """Run ``n_steps`` steps from ``initial``.

    ``noise_source`` yields one block per step (``None`` means no noise).
    Returns the final state, or the list of all ``n_steps + 1`` states when
    ``trajectory`` is set.
    """
    prop = make_propagator(kind, basis, tau)
    if initial.n_modes != basis.n_modes:
        raise ValueError(f"initial state has {initial.n_modes} modes, basis has {basis.n_modes}")
    u, v = initial.u_hat.copy(), initial.v_hat.copy()
    n = basis.n_modes
    blocks = iter(noise_source) if noise_source is not None else None
    zero = np.zeros(n)
    states = [initial] if trajectory else None
    for m in range(n_steps):
        if blocks is None:
            db = z = zh = zero
        else:
            try:
                blk = next(blocks)
            except StopIteration:
                raise ValueError(f"noise source exhausted after {m} of {n_steps} steps") from None
            db, z, zh = blk.dbeta[:n], blk.zeta[:n], blk.zeta_hat[:n]
        f_hat = eval_nonlinearity(u, drift, dealias=dealias)
        u, v = advance(prop, u, v, f_hat, db, z, zh)
        _check_finite(u, v, m)
        if trajectory:
            states.append(ModalState(u, v))
    return states if trajectory else ModalState(u, v)
