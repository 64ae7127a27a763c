"""Exact per-step sampling of the stochastic-convolution increments.

For one mode with eigenvalue ``lam`` and a step of length ``tau`` the triple

    dbeta    = int_0^tau dbeta(s)
    zeta     = int_0^tau sin((tau - s) sqrt(lam)) / sqrt(lam) dbeta(s)
    zeta_hat = int_0^tau cos((tau - s) sqrt(lam)) dbeta(s)

is jointly Gaussian with the closed-form covariance computed by
:func:`increment_covariance`.  Raw standard normals come from a
counter-based stream: the three normals for ``(sample, level, step, mode)``
are a pure function of those integers and the master seed, so blocks can be
produced in any order, in bulk or one at a time, with identical bits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import factorial
from typing import BinaryIO, Iterator

import numpy as np

from .errors import IndefiniteCovariance
from .spectral import Basis

__all__ = [
    "IncrementCovariance",
    "NoiseBlock",
    "SeedSpec",
    "increment_covariance",
    "aggregate_covariance",
    "cholesky3",
    "standard_normals",
    "sample_blocks",
    "sample_block",
    "aggregate",
    "Aggregator",
    "write_blocks",
    "read_blocks",
]

# x - sin(x) loses ~log10(6 / x**2) digits in closed form; below this angle
# the Taylor series is used instead.
SMALL_ANGLE = 0.5
_SERIES_COEFFS = np.array([(-1) ** (k + 1) / factorial(2 * k + 1) for k in range(1, 12)])

CLAMP_TOL = 1e-14
# steps per independently seeded page of raw normals
PAGE_STEPS = 256


@dataclass(frozen=True)
class IncrementCovariance:
    """Covariance of ``(dbeta, zeta, zeta_hat)``; fields are scalars or per-mode arrays."""

    var_dbeta: np.ndarray
    cov_bz: np.ndarray
    cov_bzh: np.ndarray
    var_zeta: np.ndarray
    cov_zz: np.ndarray
    var_zeta_hat: np.ndarray

    def matrix(self) -> np.ndarray:
        """Stacked 3x3 covariance matrices, shape ``(..., 3, 3)``."""
        b = np.broadcast_arrays(self.var_dbeta, self.cov_bz, self.cov_bzh,
                                self.var_zeta, self.cov_zz, self.var_zeta_hat)
        tt, bz, bzh, zz, zzh, zhzh = b
        return np.stack([
            np.stack([tt, bz, bzh], axis=-1),
            np.stack([bz, zz, zzh], axis=-1),
            np.stack([bzh, zzh, zhzh], axis=-1),
        ], axis=-2)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "IncrementCovariance":
        return cls(m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 1, 1], m[..., 1, 2], m[..., 2, 2])


def _x_minus_sin(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x = np.atleast_1d(x)
    out = x - np.sin(x)
    small = np.abs(x) < 2.0 * SMALL_ANGLE
    if np.any(small):
        xs = x[small]
        x2 = xs * xs
        acc = np.zeros_like(xs)
        for c in _SERIES_COEFFS[::-1]:
            acc = acc * x2 + c
        out[small] = acc * xs**3
    return out.reshape(shape)


def increment_covariance(lam, tau) -> IncrementCovariance:
    """Closed-form covariance of the increment triple for eigenvalue(s) ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(lam <= 0) or np.any(tau <= 0):
        raise ValueError("lambda and tau must be positive")
    rl = np.sqrt(lam)
    theta = tau * rl
    s = np.sin(theta)
    half = np.sin(0.5 * theta)
    var_zeta = _x_minus_sin(2.0 * theta) / (4.0 * lam * rl)
    var_zeta_hat = (2.0 * theta + np.sin(2.0 * theta)) / (4.0 * rl)
    cov_zz = s * s / (2.0 * lam)
    cov_bz = 2.0 * half * half / lam
    cov_bzh = s / rl
    return IncrementCovariance(np.broadcast_to(tau, theta.shape).copy(), cov_bz, cov_bzh,
                               var_zeta, cov_zz, var_zeta_hat)


def _rotation(lam, tau):
    """Map taking increments over [a, b] to their contribution over [a, b + tau]."""
    rl = np.sqrt(np.asarray(lam, dtype=np.float64))
    th = tau * rl
    c, s = np.cos(th), np.sin(th)
    return c, s / rl, -rl * s


def aggregate_covariance(first: IncrementCovariance, second: IncrementCovariance, lam) -> IncrementCovariance:
    """Second moments of :func:`aggregate` applied to two independent blocks."""
    c, s_over, s_times = _rotation(lam, second.var_dbeta)
    one, zero = np.ones_like(c), np.zeros_like(c)
    g = np.stack([
        np.stack([one, zero, zero], axis=-1),
        np.stack([zero, c, s_over], axis=-1),
        np.stack([zero, s_times, c], axis=-1),
    ], axis=-2)
    m = g @ first.matrix() @ np.swapaxes(g, -1, -2) + second.matrix()
    return IncrementCovariance.from_matrix(m)


def cholesky3(cov: IncrementCovariance, tol: float = CLAMP_TOL) -> np.ndarray:
    """Lower-triangular factors of the (per-mode) 3x3 covariance.

    Pivots whose residual lies in ``[-tol, 0]`` are clamped to zero, which
    happens in the rank-deficient limit ``tau sqrt(lam) -> 0``.
    """
    a = cov.matrix()
    out = np.zeros_like(a)

    def pivot(r, which):
        r = np.asarray(r, dtype=np.float64)
        if np.any(r < -tol):
            raise IndefiniteCovariance(f"covariance not positive semidefinite at pivot {which} (residual {r.min():.3e})")
        return np.sqrt(np.maximum(r, 0.0))

    def safe_div(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    l11 = pivot(a[..., 0, 0], 1)
    l21 = safe_div(a[..., 1, 0], l11)
    l31 = safe_div(a[..., 2, 0], l11)
    l22 = pivot(a[..., 1, 1] - l21 * l21, 2)
    l32 = safe_div(a[..., 2, 1] - l31 * l21, l22)
    l33 = pivot(a[..., 2, 2] - l31 * l31 - l32 * l32, 3)
    out[..., 0, 0] = l11
    out[..., 1, 0], out[..., 1, 1] = l21, l22
    out[..., 2, 0], out[..., 2, 1], out[..., 2, 2] = l31, l32, l33
    return out


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    sample_index: int = 0
    level: int = 0

    def key(self) -> np.ndarray:
        ss = np.random.SeedSequence([int(self.master_seed), int(self.sample_index), int(self.level)])
        return ss.generate_state(2, np.uint64)


def standard_normals(seed: SeedSpec, n_modes: int, start: int, count: int) -> np.ndarray:
    """Raw N(0, 1) draws for steps ``start..start+count-1``, shape ``(count, n_modes, 3)``.

    Steps are grouped in pages of ``PAGE_STEPS``.  Page ``p`` of mode ``i``
    (0-based) is filled by a ziggurat draw from the Philox stream keyed by
    ``seed`` with counter ``(i << 64) + (p << 32)``, so any step can be
    regenerated on its own by redrawing its page.
    """
    if start < 0 or count < 0:
        raise ValueError("start and count must be non-negative")
    key = seed.key()
    p0, p1 = start // PAGE_STEPS, -(-(start + count) // PAGE_STEPS)
    buf = np.empty((n_modes, (p1 - p0) * PAGE_STEPS, 3))
    bitgen = np.random.Philox(key=key)
    gen = np.random.Generator(bitgen)
    # resetting the state is much cheaper than building a Philox per page
    state = {"bit_generator": "Philox", "state": {"counter": None, "key": key},
             "buffer": np.zeros(4, dtype=np.uint64), "buffer_pos": 4, "has_uint32": 0, "uinteger": 0}
    for i in range(n_modes):
        for p in range(p0, p1):
            state["state"]["counter"] = np.array([p << 32, i, 0, 0], dtype=np.uint64)
            bitgen.state = state
            a = (p - p0) * PAGE_STEPS
            gen.standard_normal(out=buf[i, a:a + PAGE_STEPS])
    off = start - p0 * PAGE_STEPS
    return buf[:, off:off + count].transpose(1, 0, 2)


def sample_blocks(seed: SeedSpec, basis: Basis, tau: float, start: int, count: int,
                  factor: np.ndarray | None = None):
    """``count`` consecutive increment triples; returns ``(dbeta, zeta, zeta_hat)``, each ``(count, N)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if factor is None:
        factor = cholesky3(increment_covariance(basis.lam, tau))
    z = standard_normals(seed, basis.n_modes, start, count)
    z0, z1, z2 = z[..., 0], z[..., 1], z[..., 2]
    dbeta = factor[:, 0, 0] * z0
    zeta = factor[:, 1, 0] * z0 + factor[:, 1, 1] * z1
    zeta_hat = factor[:, 2, 0] * z0 + factor[:, 2, 1] * z1 + factor[:, 2, 2] * z2
    return dbeta, zeta, zeta_hat


@dataclass(frozen=True)
class NoiseBlock:
    dbeta: np.ndarray
    zeta: np.ndarray
    zeta_hat: np.ndarray
    step_index: int = 0
    tau: float = 0.0
    level: int = 0

    @property
    def n_modes(self) -> int:
        return self.dbeta.shape[0]

    @classmethod
    def zeros(cls, n_modes: int, tau: float, step_index: int = 0) -> "NoiseBlock":
        z = np.zeros(n_modes)
        return cls(z, z.copy(), z.copy(), step_index, tau)

    def truncate(self, n_modes: int) -> "NoiseBlock":
        return NoiseBlock(self.dbeta[:n_modes], self.zeta[:n_modes], self.zeta_hat[:n_modes],
                          self.step_index, self.tau, self.level)


def sample_block(seed: SeedSpec, basis: Basis, tau: float, step_index: int) -> NoiseBlock:
    db, z, zh = sample_blocks(seed, basis, tau, step_index, 1)
    return NoiseBlock(db[0], z[0], zh[0], step_index, float(tau), seed.level)


def aggregate(first: NoiseBlock, second: NoiseBlock, basis: Basis) -> NoiseBlock:
    """Combine increments over ``[a, b]`` and ``[b, c]`` into the increment over ``[a, c]``."""
    n = first.n_modes
    if second.n_modes != n or basis.n_modes < n:
        raise ValueError(f"mode mismatch: {first.n_modes}, {second.n_modes}, basis {basis.n_modes}")
    if first.tau <= 0 or second.tau <= 0:
        raise ValueError("blocks must have positive length")
    c, s_over, s_times = _rotation(basis.lam[:n], second.tau)
    return NoiseBlock(
        first.dbeta + second.dbeta,
        c * first.zeta + s_over * first.zeta_hat + second.zeta,
        s_times * first.zeta + c * first.zeta_hat + second.zeta_hat,
        first.step_index,
        first.tau + second.tau,
        first.level,
    )


class Aggregator:
    """Streaming aggregation of fine increments into blocks of ``ratio`` fine steps.

    Feed consecutive fine chunks with :meth:`push`; completed coarse blocks
    are returned in order.  Each fine increment is rotated to the end of the
    coarse block it belongs to, which equals folding :func:`aggregate` over
    the block.
    """

    def __init__(self, lam: np.ndarray, tau_fine: float, ratio: int):
        if ratio < 1:
            raise ValueError("ratio must be >= 1")
        self.ratio = int(ratio)
        self.n = lam.shape[0]
        self.tau_fine = tau_fine
        rl = np.sqrt(lam)
        j = np.arange(self.ratio - 1, -1, -1)[:, None]  # rotation exponent by position in block
        th = j * tau_fine * rl
        self._c = np.cos(th)
        self._s_over = np.sin(th) / rl
        self._s_times = -np.sin(th) * rl
        self._carry = None
        self._pos = 0
        self._emitted = 0

    def push(self, dbeta, zeta, zeta_hat) -> list[NoiseBlock]:
        count = dbeta.shape[0]
        n = self.n
        dbeta, zeta, zeta_hat = dbeta[:, :n], zeta[:, :n], zeta_hat[:, :n]
        if self.ratio == 1:
            out = []
            for k in range(count):
                out.append(NoiseBlock(dbeta[k], zeta[k], zeta_hat[k], self._emitted, self.tau_fine))
                self._emitted += 1
            return out
        pos = (self._pos + np.arange(count)) % self.ratio
        c, so, st = self._c[pos], self._s_over[pos], self._s_times[pos]
        cz = c * zeta + so * zeta_hat
        czh = st * zeta + c * zeta_hat
        starts = np.flatnonzero(pos == 0)
        if starts.size == 0 or starts[0] != 0:
            starts = np.concatenate([[0], starts])
        sums = [np.add.reduceat(a, starts, axis=0) for a in (dbeta, cz, czh)]
        out = []
        for g, st_idx in enumerate(starts):
            block = [s[g] for s in sums]
            if pos[st_idx] != 0:
                block = [b + cb for b, cb in zip(block, self._carry)]
            end = starts[g + 1] if g + 1 < len(starts) else count
            if pos[end - 1] == self.ratio - 1:
                out.append(NoiseBlock(block[0], block[1], block[2], self._emitted, self.tau_fine * self.ratio))
                self._emitted += 1
                self._carry = None
            else:
                self._carry = block
        self._pos = (self._pos + count) % self.ratio
        return out


def iter_fine_chunks(seed: SeedSpec, basis: Basis, tau: float, n_steps: int,
                     max_bytes: int = 1 << 27) -> Iterator[tuple[int, tuple]]:
    """Yield ``(start, (dbeta, zeta, zeta_hat))`` chunks covering ``n_steps`` fine steps."""
    factor = cholesky3(increment_covariance(basis.lam, tau))
    chunk = max(1, min(n_steps, max_bytes // (basis.n_modes * 64)))
    if chunk > PAGE_STEPS:
        chunk -= chunk % PAGE_STEPS  # page-aligned chunks never redraw a page
    for start in range(0, n_steps, chunk):
        count = min(chunk, n_steps - start)
        yield start, sample_blocks(seed, basis, tau, start, count, factor)


def iter_blocks(seed: SeedSpec, basis: Basis, tau_fine: float, n_fine: int, ratio: int = 1) -> Iterator[NoiseBlock]:
    """Blocks of ``ratio`` fine steps each, aggregated from the fine stream."""
    if n_fine % ratio:
        raise ValueError(f"{n_fine} fine steps not divisible by ratio {ratio}")
    agg = Aggregator(basis.lam, tau_fine, ratio)
    for _, chunk in iter_fine_chunks(seed, basis, tau_fine, n_fine):
        yield from agg.push(*chunk)


# Binary dump: little-endian header then per-step float64 [dbeta | zeta | zeta_hat].
_MAGIC = b"SPDEWNB1"
_HEADER = struct.Struct("<8sQdQQQQ")  # magic, N, tau, master_seed, sample_index, level, n_steps


def write_blocks(fh: BinaryIO, blocks: list[NoiseBlock], seed: SeedSpec) -> None:
    if not blocks:
        raise ValueError("nothing to write")
    n, tau = blocks[0].n_modes, blocks[0].tau
    fh.write(_HEADER.pack(_MAGIC, n, tau, seed.master_seed, seed.sample_index, seed.level, len(blocks)))
    for b in blocks:
        fh.write(np.concatenate([b.dbeta, b.zeta, b.zeta_hat]).astype("<f8").tobytes())


def read_blocks(fh: BinaryIO) -> tuple[SeedSpec, list[NoiseBlock]]:
    magic, n, tau, master, sample, level, n_steps = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != _MAGIC:
        raise ValueError("not a noise dump")
    data = np.frombuffer(fh.read(n_steps * 3 * n * 8), dtype="<f8").reshape(n_steps, 3, n)
    blocks = [NoiseBlock(d[0].copy(), d[1].copy(), d[2].copy(), k, tau, level) for k, d in enumerate(data)]
    return SeedSpec(master, sample, level), blocks
