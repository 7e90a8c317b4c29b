"""Time-domain solver for ``L u = 0`` with Dirichlet control on the bottom face.

Physics
-------
The expanded operator gives ``u_tt + 2 i A_0 u_t + (i A_0' - A_0^2 + V) u + S u = 0`` where ``S`` is
the magnetic Laplacian described in :mod:`dtnlab.kernels`. Data ``f`` is imposed on ``Gamma_0``
(bottom face), zero on the rest of the boundary, and the solution starts from rest.

Stability
---------
Leapfrog is stable for ``dt <= 1/sqrt(max rho)`` with
``rho = sum_d g^{dd}/h_d^2 + sum_{d<e} |g^{de}| / (2 h_d h_e)``; ``dt = cfl / sqrt(max rho)``,
``cfl = 0.5`` by default. In 1D this is ``dt = cfl * h / sqrt(g^{11})``.

The 2D ``scheme="averaged"`` variant (see :mod:`dtnlab.kernels`) replaces ``rho`` by
``max(g^{11}/h_1^2, g^{22}/h_2^2)``; it needs ``g^{12} = 0``. On a grid with ``h_n < h_t``
and ``cfl = 1`` the normal Courant number is exactly one, as in 1D.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .fields import Coefficients, ReducedCoefficients
from .geometry import Grid

__all__ = [
    "SolverError",
    "CFLError",
    "InstabilityError",
    "CompatibilityError",
    "BoundaryData",
    "Stencil",
    "WaveField",
    "TraceRecorder",
    "neumann_trace",
    "CONVENTIONS",
    "Recorder",
    "FullRecorder",
    "SurfaceRecorder",
    "SurfaceTrace",
    "CharacteristicSlab",
    "SCHEMES",
    "stable_dt",
    "march",
    "solve_forward",
    "solve_adjoint",
    "trace_characteristic",
    "surface_h1_norm",
    "energy_ratio_check",
    "random_band_limited",
]


class SolverError(RuntimeError):
    """Base class of numerical failures in the time march."""


class CFLError(SolverError):
    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"time step {dt:.3e} violates the CFL bound; use dt <= {dt_max:.6e}")
        self.suggested = dt_max


class InstabilityError(SolverError):
    def __init__(self, step: int):
        super().__init__(f"non-finite values during the march at step {step}")
        self.step = step


class CompatibilityError(ValueError):
    """Boundary data does not vanish at the initial time."""


def _as_coefficients(coeffs) -> Coefficients:
    if isinstance(coeffs, ReducedCoefficients):
        return coeffs.coefficients()
    if not isinstance(coeffs, Coefficients):
        raise TypeError("expected Coefficients or ReducedCoefficients")
    return coeffs


# ------------------------------------------------------------------------------ boundary data


class BoundaryData:
    """Batched Dirichlet data on the bottom-face nodes.

    ``fn(t)`` must return an array of shape ``(batch, nb)`` with ``nb`` the number of bottom nodes
    (1 in 1D). Use :meth:`from_function` for the usual ``f(x', t)`` / ``f(t)`` callables.
    """

    def __init__(self, fn: Callable[[float], np.ndarray], batch: int, nb: int):
        self._fn = fn
        self.batch = int(batch)
        self.nb = int(nb)

    def values(self, t: float) -> np.ndarray:
        v = np.asarray(self._fn(t), dtype=complex)
        return np.broadcast_to(v, (self.batch, self.nb))

    @staticmethod
    def zero(grid: Grid, batch: int = 1) -> "BoundaryData":
        nb = grid.shape[0] if grid.n == 2 else 1
        return BoundaryData(lambda t: np.zeros((batch, nb), complex), batch, nb)

    @staticmethod
    def from_function(fn: Callable, grid: Grid, batch: int = 1) -> "BoundaryData":
        """Wrap ``fn(x', t)`` (n = 2) or ``fn(t)`` (n = 1); values may carry a leading batch axis."""
        if grid.n == 2:
            xb = grid.axes()[0]
            nb = xb.size
            return BoundaryData(lambda t: np.reshape(fn(xb, t), (batch, nb)), batch, nb)
        return BoundaryData(lambda t: np.reshape(fn(t), (batch, 1)), batch, 1)

    @staticmethod
    def stack(items: Sequence["BoundaryData"]) -> "BoundaryData":
        nb = items[0].nb
        return BoundaryData(lambda t: np.concatenate([it.values(t) for it in items], axis=0),
                            sum(it.batch for it in items), nb)


# ------------------------------------------------------------------------------- discretisation


SCHEMES = ("standard", "averaged")


def _rho(coeffs: Coefficients, grid: Grid, scheme: str = "standard") -> float:
    G = coeffs.metric.ginv(grid.mesh())
    h = grid.h
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "averaged":
        if grid.n != 2:
            raise ValueError("the averaged scheme is two-dimensional")
        if np.abs(G[..., 0, 1]).max() > 0:
            raise ValueError("the averaged scheme needs a metric without cross terms")
        return float(np.max(np.maximum(G[..., 0, 0] / h[0] ** 2, G[..., 1, 1] / h[1] ** 2)))
    rho = sum(G[..., d, d] / h[d] ** 2 for d in range(grid.n))
    if grid.n == 2:
        rho = rho + np.abs(G[..., 0, 1]) / (2 * h[0] * h[1])
    return float(np.max(rho))


def stable_dt(coeffs, grid: Grid, cfl: float = 0.5, scheme: str = "standard") -> float:
    """``cfl / sqrt(max rho)`` (see module docstring)."""
    return cfl / math.sqrt(_rho(_as_coefficients(coeffs), grid, scheme))


class Stencil:
    """Coefficient arrays for the update kernels; time-independent pieces are sampled once."""

    def __init__(self, coeffs: Coefficients, grid: Grid, dt: float, scheme: str = "standard"):
        self.coeffs = coeffs
        self.avg = scheme == "averaged"
        self.grid = grid
        self.dt = dt
        m = coeffs.metric
        p = coeffs.potentials
        self.x = grid.mesh()
        self.faces = [grid.face_mesh(d) for d in range(grid.n)]
        w = coeffs.weight(self.x)
        self.inv_w = np.ascontiguousarray(1.0 / w, dtype=float)
        self.fw = []
        for d in range(grid.n):
            xf = self.faces[d]
            self.fw.append(np.ascontiguousarray(coeffs.weight(xf) * m.ginv(xf)[..., d, d], dtype=float))
        self.cross = False
        if grid.n == 2:
            self.wg12 = np.ascontiguousarray(w * m.ginv(self.x)[..., 0, 1], dtype=float)
            self.cross = bool(np.abs(self.wg12).max() > 0)
        self.static = all(s.static for s in p.all())
        self._cache = None
        self._block = None
        # time-dependent coefficients are sampled for blocks of levels in one vectorised call
        self.block_len = int(max(1, min(64, 200_000 // self.inv_w.size)))
        self._A0t = p.A0.derivative("t")

    def _c(self, s, x, t):
        return np.ascontiguousarray(s(x, t), dtype=complex)

    def potentials_at(self, t) -> dict:
        """Potential arrays at time ``t`` (scalar) or at a block of times (leading axis)."""
        p = self.coeffs.potentials
        if np.ndim(t):
            nd = self.grid.n
            tt = np.asarray(t, float).reshape((-1,) + (1,) * nd)
            lift = lambda xs: tuple(c[None] for c in xs)  # noqa: E731
        else:
            tt = t
            lift = lambda xs: xs  # noqa: E731
        x = lift(self.x)
        out = {"a0": self._c(p.A0, x, tt), "V": self._c(p.V, x, tt), "a0t": self._c(self._A0t, x, tt)}
        out["fa"] = [self._c(p.A[d], lift(self.faces[d]), tt) for d in range(self.grid.n)]
        if self.cross:
            out["an"] = [self._c(p.A[d], x, tt) for d in range(2)]
        return out

    def _args(self, P: dict, i=None) -> tuple:
        pick = (lambda a: a) if i is None else (lambda a: np.ascontiguousarray(a[i]))
        a0 = pick(P["a0"])
        c = 1j * a0 * self.dt
        pa = 1.0 / (1.0 + c)
        pb = (1.0 - c) * pa
        q = 1j * pick(P["a0t"]) - a0**2 + pick(P["V"])
        fa = [pick(f) for f in P["fa"]]
        if self.grid.n == 1:
            return (pa, pb, q, self.inv_w, self.fw[0], fa[0])
        if self.cross:
            a1n, a2n = (pick(a) for a in P["an"])
            wg = self.wg12
        else:
            a1n = a2n = np.zeros((1, 1), complex)
            wg = np.zeros((1, 1))
        return (pa, pb, q, self.inv_w, self.fw[0], fa[0], self.fw[1], fa[1], wg, a1n, a2n, self.cross, self.avg)

    def at(self, t: float) -> tuple:
        if self.static:
            if self._cache is None:
                self._cache = self._args(self.potentials_at(t))
            return self._cache
        blk = self._block
        if blk is not None:
            i = int(round((t - blk[0]) / self.dt))
            if 0 <= i < blk[1] and abs(blk[0] + i * self.dt - t) < 1e-9 * max(1.0, abs(t)):
                return self._args(blk[2], i)
        ts = t + self.dt * np.arange(self.block_len)
        self._block = (t, self.block_len, self.potentials_at(ts))
        return self._args(self._block[2], 0)

    def step(self, up, uc, un, t):
        args = self.at(t)
        if self.grid.n == 1:
            kernels.step_1d(up, uc, un, *args, self.dt, self.grid.h[0])
        else:
            kernels.step_2d(up, uc, un, *args, self.dt, self.grid.h[0], self.grid.h[1])


# ------------------------------------------------------------------------------------- recorders


class Recorder:
    """Observer of the march. ``start`` receives the run context, ``record`` every time level."""

    def start(self, ctx: "MarchContext"):
        self.ctx = ctx

    def record(self, n: int, u: np.ndarray):  # pragma: no cover - interface
        raise NotImplementedError

    def finish(self):
        pass


@dataclass
class MarchContext:
    grid: Grid
    coeffs: Coefficients
    stencil: Stencil
    t0: float
    dt: float
    nt: int
    batch: int

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt + 1)


class FullRecorder(Recorder):
    """Keeps every time level: array ``(batch, nt + 1, *grid.shape)``."""

    def start(self, ctx):
        super().start(ctx)
        self.u = np.zeros((ctx.batch, ctx.nt + 1) + ctx.grid.shape, complex)

    def record(self, n, u):
        self.u[:, n] = u


class _BoundaryRows(Recorder):
    """First three normal rows at every level (for D-to-N traces)."""

    def start(self, ctx):
        super().start(ctx)
        nb = ctx.grid.shape[0] if ctx.grid.n == 2 else 1
        self.rows = np.zeros((ctx.batch, ctx.nt + 1, nb, 3), complex)

    def record(self, n, u):
        if self.ctx.grid.n == 1:
            self.rows[:, n, 0, :] = u[:, :3]
        else:
            self.rows[:, n, :, :] = u[:, :, :3]


def _lagrange4(theta: np.ndarray):
    """Cubic Lagrange weights (value, derivative) on nodes -1, 0, 1, 2 at fractional offset theta."""
    th = theta[..., None]
    nodes = np.array([-1.0, 0.0, 1.0, 2.0])
    w = np.ones(theta.shape + (4,))
    dw = np.zeros(theta.shape + (4,))
    for a in range(4):
        others = [b for b in range(4) if b != a]
        den = np.prod([nodes[a] - nodes[b] for b in others])
        num = np.ones_like(theta)
        for b in others:
            num = num * (theta - nodes[b])
        w[..., a] = num / den
        d = np.zeros_like(theta)
        for b in others:
            term = np.ones_like(theta)
            for c in others:
                if c != b:
                    term = term * (theta - nodes[c])
            d = d + term
        dw[..., a] = d / den
    del th
    return w, dw


@dataclass
class SurfaceTrace:
    """Samples of ``u``, ``u_t`` and ``u_{y_n}`` on a characteristic or time surface.

    Arrays have shape ``(batch, R)`` in 1D or ``(batch, R, N_tan)`` in 2D, with ``R`` the number of
    normal rows crossed. ``carrier`` (if set) means ``u`` is stored as the envelope
    ``exp(-i k (s - s_ref)) u`` and ``u_t``/``u_n`` are its derivatives.
    """

    kind: str
    level: float
    yn: np.ndarray
    t: np.ndarray
    tangential: np.ndarray | None
    u: np.ndarray
    u_t: np.ndarray
    u_n: np.ndarray
    carrier: tuple | None = None

    @property
    def s(self) -> np.ndarray:
        return self.t - self.yn

    def tau(self, T: float) -> np.ndarray:
        return T - self.t - self.yn

    @property
    def u_s(self) -> np.ndarray:
        return 0.5 * (self.u_t - self.u_n)

    @property
    def u_tau(self) -> np.ndarray:
        return -0.5 * (self.u_t + self.u_n)

    def select(self, b) -> "SurfaceTrace":
        return SurfaceTrace(self.kind, self.level, self.yn, self.t, self.tangential, self.u[b], self.u_t[b],
                            self.u_n[b], self.carrier)


class SurfaceRecorder(Recorder):
    """Streams cubic time interpolation of ``u``, ``u_t``, ``u_{y_n}`` onto surfaces.

    Each surface is ``(kind, level)`` with ``kind`` in ``{"tau", "s", "t"}``: ``t + y_n = level``,
    ``t - y_n = level`` or ``t = level``. ``max_depth`` bounds the rows used. ``carrier = (k, s_ref)``
    demodulates by ``exp(-i k (t - y_n - s_ref))`` before interpolation, which keeps the time
    interpolation accurate for wave packets of known carrier frequency.
    """

    def __init__(self, surfaces: Sequence[tuple], max_depth: float | None = None, carrier: tuple | None = None,
                 strict: bool = True):
        self.surfaces = [(str(k), float(v)) for k, v in surfaces]
        self.max_depth = max_depth
        self.carrier = carrier
        self.strict = strict

    def start(self, ctx):
        super().start(ctx)
        g = ctx.grid
        hn = g.h[-1]
        yn_all = g.axes()[-1] - g.origin[-1]
        jmax = g.shape[-1] - 2
        if self.max_depth is not None:
            jmax = min(jmax, int(math.floor(self.max_depth / hn + 1e-9)))
        self.plans = []
        t_lo, t_hi = ctx.t0, ctx.t0 + ctx.dt * ctx.nt
        ntan = g.shape[0] if g.n == 2 else None
        for kind, level in self.surfaces:
            rows = np.arange(0, jmax + 1)
            yn = yn_all[rows]
            if kind == "tau":
                ts = level - yn
            elif kind == "s":
                ts = level + yn
            elif kind == "t":
                ts = np.full_like(yn, level)
            else:
                raise ValueError(f"unknown surface kind {kind!r}")
            inside = (ts >= t_lo - 1e-9 * ctx.dt) & (ts <= t_hi + 1e-9 * ctx.dt)
            if self.strict and kind == "t" and not inside.all():
                raise ValueError(f"surface t={level} exits the space-time box")
            rows, yn, ts = rows[inside], yn[inside], ts[inside]
            if rows.size == 0:
                if self.strict:
                    raise ValueError(f"surface {kind}={level} lies outside the space-time box")
            f = (ts - ctx.t0) / ctx.dt
            m = np.clip(np.floor(f + 1e-9).astype(int), 1, max(1, ctx.nt - 2))
            theta = f - m
            w, dw = _lagrange4(theta)
            lo = m - 1
            buckets: dict[int, list] = {}
            for l in range(4):
                for r_i, lev in enumerate(lo + l):
                    buckets.setdefault(int(lev), []).append((r_i, l))
            plan = {
                "kind": kind, "level": level, "rows": rows, "yn": yn, "ts": ts, "w": w, "dw": dw / ctx.dt,
                "buckets": {k: (np.array([a for a, _ in v]), np.array([b for _, b in v])) for k, v in buckets.items()},
            }
            shape = (ctx.batch, rows.size) + ((ntan,) if ntan else ())
            plan["u"] = np.zeros(shape, complex)
            plan["ut"] = np.zeros(shape, complex)
            plan["un"] = np.zeros(shape, complex)
            self.plans.append(plan)
        self.hn = hn

    def record(self, n, u):
        g = self.ctx.grid
        t = self.ctx.t0 + n * self.ctx.dt
        # normal axis first: (batch, rows, [tan])
        un = np.moveaxis(u, -1, 1) if g.n == 2 else u
        demod = None
        if self.carrier is not None:
            k, sref = self.carrier
            yn = g.axes()[-1] - g.origin[-1]
            demod = np.exp(-1j * k * (t - yn - sref))
        for plan in self.plans:
            b = plan["buckets"].get(n)
            if b is None:
                continue
            ridx, lidx = b
            rows = plan["rows"][ridx]
            vals = self._rows(un, rows, demod)
            dn = self._dn(un, rows, demod)
            w = plan["w"][ridx, lidx]
            dw = plan["dw"][ridx, lidx]
            shape = (1, -1) + ((1,) if g.n == 2 else ())
            plan["u"][:, ridx] += w.reshape(shape) * vals
            plan["ut"][:, ridx] += dw.reshape(shape) * vals
            plan["un"][:, ridx] += w.reshape(shape) * dn

    def _rows(self, un, rows, demod):
        v = un[:, rows]
        if demod is not None:
            d = demod[rows]
            v = v * (d[None, :, None] if v.ndim == 3 else d[None, :])
        return v

    def _dn(self, un, rows, demod):
        hn = self.hn
        a = self._rows(un, np.maximum(rows - 1, 0), demod)
        b = self._rows(un, rows + 1, demod)
        c = self._rows(un, rows, demod)
        d = (b - a) / (2 * hn)
        first = rows == 0
        if first.any():
            r2 = self._rows(un, rows[first] + 2, demod)
            sel = (slice(None), first)
            d[sel] = (-3 * c[sel] + 4 * b[sel] - r2) / (2 * hn)
        return d

    def traces(self) -> list[SurfaceTrace]:
        g = self.ctx.grid
        out = []
        tan = g.axes()[0] if g.n == 2 else None
        for plan in self.plans:
            out.append(SurfaceTrace(plan["kind"], plan["level"], plan["yn"], plan["ts"], tan,
                                    plan["u"], plan["ut"], plan["un"], self.carrier))
        return out


# --------------------------------------------------------------------------------- wave fields


@dataclass
class WaveField:
    """Result of a march. ``u`` (if stored) has shape ``(batch, nt + 1, *grid.shape)``."""

    grid: Grid
    coeffs: Coefficients
    t0: float
    dt: float
    nt: int
    rows: np.ndarray
    u: np.ndarray | None = None
    surfaces: list = field(default_factory=list)
    data: BoundaryData | None = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt + 1)

    @property
    def batch(self) -> int:
        return self.rows.shape[0]

    def boundary_values(self) -> np.ndarray:
        return self.rows[..., 0]

    def dtn_trace(self, convention: str = "interior_normal") -> np.ndarray:
        """Neumann-type trace on the bottom face at every level, shape ``(batch, nt + 1, nb)``.

        See :func:`neumann_trace` for the conventions.
        """
        return neumann_trace(self.grid, self.coeffs, self.rows, self.times, convention)


CONVENTIONS = ("interior_normal", "exterior_conormal")


def neumann_trace(grid: Grid, coeffs: Coefficients, rows: np.ndarray, times: np.ndarray,
                  convention: str = "interior_normal") -> np.ndarray:
    """Boundary trace from the first three normal rows ``rows[..., level, node, 0:3]``.

    ``interior_normal``: ``du/dy_n + i A_n u``. ``exterior_conormal``: ``sum_jk g^{jk}(d_j u + i A_j u)
    nu_k / |nu|_g`` with the outward Euclidean normal ``nu = -e_n``. The normal derivative is the
    one-sided second-order difference.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    hn = grid.h[-1]
    r = rows
    dn = (-3 * r[..., 0] + 4 * r[..., 1] - r[..., 2]) / (2 * hn)
    u0 = r[..., 0]
    p = coeffs.potentials
    times = np.atleast_1d(np.asarray(times, float))
    if grid.n == 1:
        xb = (np.full((1,), grid.origin[0]),)
    else:
        xb = (grid.axes()[0], np.full(grid.shape[0], grid.origin[1]))
    L = times.size
    xs = tuple(np.broadcast_to(c[None, :], (L, c.size)) for c in xb)
    tt = times[:, None]
    An = p.A[-1](xs, tt)
    if convention == "interior_normal":
        return dn + 1j * An * u0
    G = coeffs.metric.ginv(xb)
    n = grid.n
    gnn = G[:, n - 1, n - 1]
    out = gnn * (dn + 1j * An * u0)
    if n == 2:
        d1 = np.gradient(u0, grid.h[0], axis=-1, edge_order=2)
        A1 = p.A[0](xs, tt)
        out = out + G[:, 0, 1] * (d1 + 1j * A1 * u0)
    return -out / np.sqrt(gnn)


class TraceRecorder(Recorder):
    """Computes the Neumann trace level by level and hands it to ``sink(n, t, trace)``.

    ``trace`` has shape ``(batch, nb)``. Used when storing boundary rows for every level is too
    large (batched operator assembly in 2D).
    """

    def __init__(self, sink: Callable, convention: str = "interior_normal"):
        self.sink = sink
        self.convention = convention

    def record(self, n, u):
        g = self.ctx.grid
        rows = u[:, None, None, :3] if g.n == 1 else u[:, None, :, :3]  # (B, 1, nb, 3)
        t = self.ctx.t0 + n * self.ctx.dt
        tr = neumann_trace(g, self.ctx.coeffs, rows, np.array([t]), self.convention)
        self.sink(n, t, tr[:, 0])


def march(coeffs, grid: Grid, data: BoundaryData, t0: float, t_end: float, *, dt: float | None = None,
          cfl: float = 0.5, initial: tuple | None = None, recorders: Sequence[Recorder] = (),
          store: bool = False, check_every: int = 64, keep_rows: bool = True,
          scheme: str = "standard") -> WaveField:
    """Advance from ``t0`` to ``t_end`` (adjusted down to an integer number of steps).

    ``initial = (u0, v0)`` gives Cauchy data of shape ``(batch, *grid.shape)``; default is rest.
    With rest initial data the boundary data must vanish at ``t0``.
    """
    coeffs = _as_coefficients(coeffs)
    if coeffs.n != grid.n:
        raise ValueError("coefficient and grid dimensions differ")
    dt_max = 1.0 / math.sqrt(_rho(coeffs, grid, scheme))
    if dt is None:
        dt = cfl * dt_max
    elif dt > dt_max * (1 + 1e-12):
        raise CFLError(dt, dt_max)
    nt = int(math.ceil((t_end - t0) / dt - 1e-9))
    nt = max(nt, 3)
    dt = (t_end - t0) / nt
    B = data.batch
    shape = grid.shape
    stencil = Stencil(coeffs, grid, dt, scheme)
    ctx = MarchContext(grid, coeffs, stencil, t0, dt, nt, B)
    rows = _BoundaryRows() if keep_rows else None
    recs = ([rows] if keep_rows else []) + list(recorders)
    full = None
    if store:
        full = FullRecorder()
        recs.append(full)
    for r in recs:
        r.start(ctx)

    def apply_bc(u, t):
        vals = data.values(t)
        if grid.n == 1:
            u[:, 0] = vals[:, 0]
            u[:, -1] = 0.0
        else:
            u[:, :, 0] = vals
            u[:, 0, :] = 0.0
            u[:, -1, :] = 0.0
            u[:, :, -1] = 0.0

    u_prev = np.zeros((B,) + shape, complex)
    u_cur = np.zeros((B,) + shape, complex)
    u_next = np.zeros((B,) + shape, complex)
    if initial is None:
        if np.abs(data.values(t0)).max(initial=0.0) > 1e-12:
            raise CompatibilityError("boundary data must vanish at the initial time")
        apply_bc(u_prev, t0)
        apply_bc(u_cur, t0 + dt)
    else:
        u0, v0 = (np.asarray(a, complex).reshape((B,) + shape) for a in initial)
        u_prev[:] = u0
        apply_bc(u_prev, t0)
        # second-order start: u^1 = u^0 + dt (1 - i A0 dt) v^0 - dt^2/2 R^0
        args = list(stencil.at(t0))
        args[0] = np.ones_like(args[0])
        args[1] = np.zeros_like(args[1])
        tmp = np.zeros_like(u_cur)
        if grid.n == 1:
            kernels.step_1d(u_prev, u_prev, tmp, *args, dt, grid.h[0])
        else:
            kernels.step_2d(u_prev, u_prev, tmp, *args, dt, grid.h[0], grid.h[1])
        R = (2 * u_prev - tmp) / dt**2
        a0 = coeffs.potentials.A0(stencil.x, t0)
        u_cur[:] = u_prev + dt * (1 - 1j * a0 * dt) * v0 - 0.5 * dt**2 * R
        apply_bc(u_cur, t0 + dt)
    for r in recs:
        r.record(0, u_prev)
        r.record(1, u_cur)
    for n in range(1, nt):
        t = t0 + n * dt
        stencil.step(u_prev, u_cur, u_next, t)
        apply_bc(u_next, t + dt)
        if n % check_every == 0 or n == nt - 1:
            if not np.isfinite(u_next).all():
                raise InstabilityError(n + 1)
        for r in recs:
            r.record(n + 1, u_next)
        u_prev, u_cur, u_next = u_cur, u_next, u_prev
    for r in recs:
        r.finish()
    surfaces = []
    for r in recorders:
        if isinstance(r, SurfaceRecorder):
            surfaces.extend(r.traces())
    return WaveField(grid, coeffs, t0, dt, nt, rows.rows if keep_rows else np.zeros((B, 0, 1, 3), complex),
                     full.u if full else None, surfaces, data)


def solve_forward(coeffs, f: BoundaryData | Callable, T0: float, grid: Grid, *, t_start: float = 0.0,
                  **kwargs) -> WaveField:
    """Solve ``L u = 0`` on ``[t_start, T0]`` from rest with Dirichlet data ``f`` on ``Gamma_0``."""
    if not isinstance(f, BoundaryData):
        f = BoundaryData.from_function(f, grid)
    return march(coeffs, grid, f, t_start, T0, **kwargs)


def solve_adjoint(coeffs, g: BoundaryData | Callable, T: float, grid: Grid, *, T1: float = 0.0,
                  **kwargs) -> WaveField:
    """Solve ``L^* v = 0`` (conjugated coefficients) on ``[T1, T]`` from rest at ``T1``."""
    c = _as_coefficients(coeffs)
    return solve_forward(c.conj(), g, T, grid, t_start=T1, **kwargs)


# ------------------------------------------------------------------------- characteristic slab


@dataclass(frozen=True)
class CharacteristicSlab:
    """Null-coordinate geometry ``s = t - y_n``, ``tau = T - t - y_n`` for ``T1 <= s0 < T``.

    ``gamma`` is the tangential patch interval (``None`` in 1D) and ``speed`` an upper bound of the
    tangential propagation speed ``sqrt(max ghat^{11})`` used to grow the patches
    ``Gamma^(2) = Gamma + speed (T - T1)`` and ``Gamma^(3) = Gamma + 2 speed (T - T1)``.
    """

    T1: float
    T: float
    s0: float
    gamma: tuple | None = None
    speed: float = 1.0

    def __post_init__(self):
        if not (self.T1 <= self.s0 < self.T):
            raise ValueError("require T1 <= s0 < T")

    # coordinate maps
    def to_null(self, yn, t):
        return t - yn, self.T - t - yn

    def from_null(self, s, tau):
        return 0.5 * (self.T - s - tau), 0.5 * (self.T + s - tau)

    @property
    def depth(self) -> float:
        """Largest ``y_n`` inside ``X`` (the apex of the slab)."""
        return 0.5 * (self.T - self.T1)

    def patch(self, j: int) -> tuple | None:
        if self.gamma is None:
            return None
        grow = (j - 1) * self.speed * (self.T - self.T1)
        return (self.gamma[0] - grow, self.gamma[1] + grow)

    def _tan_dist(self, y, j):
        a, b = self.patch(j)
        return np.maximum(0.0, np.maximum(a - y, y - b))

    def in_Y(self, j: int, s0: float, s, y=None):
        """Membership of surface points ``(s, y')`` of ``tau = 0`` in ``Y_{j s0}``."""
        s = np.asarray(s, float)
        ok = (s >= s0 - 1e-12) & (s <= self.T + 1e-12)
        if self.gamma is None or y is None:
            return ok
        reach = self.speed * np.sqrt(np.maximum(0.0, (self.T - s0) * (s - s0)))
        return ok & (self._tan_dist(np.asarray(y, float), j) <= reach + 1e-12)

    def in_R(self, j: int, s0: float, s, y=None):
        s = np.asarray(s, float)
        ok = (s >= s0 - 1e-12) & (s <= self.T + 1e-12)
        if self.gamma is None or y is None:
            return ok
        return ok & (self._tan_dist(np.asarray(y, float), j) <= 1e-12)

    def in_Delta(self, j: int, s0: float, t, y=None):
        """Boundary points ``(y', t)`` of ``Delta_{j s0} = Gamma^(j) x [s0, T]``."""
        return self.in_R(j, s0, t, y)

    def in_X0(self, s, tau):
        s = np.asarray(s, float)
        tau = np.asarray(tau, float)
        return (s >= self.T1 - 1e-12) & (tau >= -1e-12) & (s + tau <= self.T + 1e-12)

    def surface(self, tau0: float = 0.0) -> tuple:
        return ("tau", self.T - tau0)


def trace_characteristic(field: WaveField, slab: CharacteristicSlab | None = None, surface=("tau", None),
                         batch: int | None = None) -> SurfaceTrace:
    """Cubic interpolation of ``u``, ``u_t``, ``u_{y_n}`` onto a surface from a stored field.

    ``surface`` is ``(kind, level)``; a ``None`` level on a ``tau`` surface means ``tau = 0`` of ``slab``.
    """
    if field.u is None:
        raise ValueError("trace_characteristic needs a stored field (store=True)")
    kind, level = surface
    if level is None:
        if slab is None:
            raise ValueError("level or slab required")
        level = slab.T
    depth = None
    if slab is not None:
        depth = slab.T - slab.T1 if kind != "tau" else 0.5 * (slab.T - slab.T1) + 1e-12
    rec = SurfaceRecorder([(kind, level)], max_depth=depth)
    ctx = MarchContext(field.grid, field.coeffs, None, field.t0, field.dt, field.nt, field.batch)
    rec.start(ctx)
    for n in range(field.nt + 1):
        rec.record(n, field.u[:, n])
    tr = rec.traces()[0]
    return tr.select(batch) if batch is not None else tr


# ---------------------------------------------------------------------------------- norms/energy


def _trap_weights(x: np.ndarray) -> np.ndarray:
    if x.size < 2:
        return np.ones_like(x)
    d = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return np.abs(w)


def surface_h1_norm(tr: SurfaceTrace, along: np.ndarray, d_along: np.ndarray, tan_h: float | None = None,
                    b: int | None = None) -> tuple[float, float]:
    """``(||u||_1^2, ||u_t||_0^2)`` on a surface parametrised by ``along`` (per-row coordinate) and
    the tangential axis, with ``d_along`` the derivative of ``u`` along the parameter, using
    trapezoid quadrature."""
    u = tr.u if b is None else tr.u[b]
    ut = tr.u_t if b is None else tr.u_t[b]
    w = _trap_weights(along)
    dens = np.abs(u) ** 2 + np.abs(d_along) ** 2
    dens_t = np.abs(ut) ** 2
    if u.ndim >= 2 and tr.tangential is not None:
        du = np.gradient(u, tan_h, axis=-1, edge_order=2)
        dens = dens + np.abs(du) ** 2
        wt = _trap_weights(tr.tangential)
        return float(np.einsum("r,rk,k->", w, dens, wt)), float(np.einsum("r,rk,k->", w, dens_t, wt))
    return float(np.sum(w * dens)), float(np.sum(w * dens_t))


def random_band_limited(rng: np.random.Generator, x: Sequence[np.ndarray], box: Sequence[tuple], modes: int = 4,
                        window: Sequence[tuple] | None = None) -> np.ndarray:
    """Real truncated Fourier series on ``box`` (sine modes), multiplied by a smooth window that
    vanishes outside ``window`` (defaults to ``box``)."""
    window = window or box
    out = np.zeros(np.broadcast_shapes(*[np.shape(c) for c in x]))
    coefs = rng.standard_normal((modes,) * len(x)) / (1 + np.add.outer(*[np.arange(modes)] * 2)
                                                      if len(x) == 2 else 1 + np.arange(modes))
    idx = np.ndindex(*coefs.shape)
    for mode in idx:
        term = coefs[mode]
        for d, (a, b) in enumerate(box):
            term = term * np.sin(np.pi * (mode[d] + 1) * (x[d] - a) / (b - a))
        out = out + term
    win = np.ones_like(out)
    for d, (a, b) in enumerate(window):
        z = np.clip((x[d] - a) / (b - a), 0.0, 1.0)
        win = win * np.where((z > 0) & (z < 1), np.exp(-1.0 / np.maximum(z * (1 - z), 1e-300) * 0.25 + 1.0), 0.0)
    return out * win


def energy_ratio_check(coeffs, grid: Grid, T1: float, T: float, *, members: int = 20, seed: int = 0,
                       cfl: float = 0.5, modes: int = 4) -> dict:
    """Measured constants of the wedge energy estimates.

    The wedge ``Delta_1`` is bounded by ``Gamma_2 = {tau = 0}``, ``Gamma_3 = {s = T1}`` and
    ``Gamma_4 = {t = T}``. Each ensemble member solves ``L u = 0`` on ``[t_start, T]`` from random
    band-limited Cauchy data plus random boundary data. Returns the maxima over the ensemble of

    ``E4 / (E2 + E3)`` (forward) and ``(E2 + E3) / E4`` (reverse), with ``E4 = ||u||_1^2 + ||u_t||_0^2``
    on ``Gamma_4`` and ``E2, E3`` the ``H^1`` norms on the characteristic faces.
    """
    c = _as_coefficients(coeffs)
    a = T - T1
    if grid.origin[-1] + grid.lengths[-1] < a * 1.5:
        raise ValueError("grid too shallow for the wedge")
    rng = np.random.default_rng(seed)
    x = grid.mesh()
    yn = x[-1] - grid.origin[-1]
    depth_box = (0.0, grid.lengths[-1])
    t_start = T1 - 0.25 * a
    u0s, v0s, bnd = [], [], []
    for _ in range(members):
        pts = tuple(x[:-1]) + (yn,)
        box = ([(grid.origin[0], grid.origin[0] + grid.lengths[0])] if grid.n == 2 else []) + [depth_box]
        win = ([(grid.origin[0] + 0.1 * grid.lengths[0], grid.origin[0] + 0.9 * grid.lengths[0])]
               if grid.n == 2 else []) + [(0.05 * grid.lengths[-1], 0.9 * grid.lengths[-1])]
        u0s.append(random_band_limited(rng, pts, box, modes, win))
        v0s.append(random_band_limited(rng, pts, box, modes, win))
        amp, om, ph = rng.standard_normal(3)
        bnd.append((amp, 4 + 2 * abs(om), ph))
    nb = grid.shape[0] if grid.n == 2 else 1
    xb = grid.axes()[0] if grid.n == 2 else None

    def fvals(t):
        z = np.clip((t - t_start) / (0.25 * a), 0.0, 1.0)
        ramp = np.where(z <= 0, 0.0, np.where(z >= 1, 1.0, np.exp(-1 / np.maximum(z, 1e-300)) /
                        (np.exp(-1 / np.maximum(z, 1e-300)) + np.exp(-1 / np.maximum(1 - z, 1e-300)))))
        prof = np.ones(nb)
        if xb is not None:
            L0 = grid.lengths[0]
            zz = np.clip((xb - grid.origin[0]) / L0, 0, 1)
            prof = np.sin(np.pi * zz) ** 4
        return np.stack([am * ramp * np.sin(om * t + ph) * prof for am, om, ph in bnd])

    data = BoundaryData(fvals, members, nb)
    surfaces = [("tau", T), ("s", T1), ("t", T)]
    rec = SurfaceRecorder(surfaces, max_depth=a + grid.h[-1] * 0.5, strict=False)
    march(c, grid, data, t_start, T, cfl=cfl, initial=(np.stack(u0s), np.stack(v0s)), recorders=[rec])
    tr2, tr3, tr4 = rec.traces()
    half = a / 2
    m2 = tr2.yn <= half + 1e-12
    m3 = tr3.yn <= half + 1e-12
    m4 = tr4.yn <= a + 1e-12
    th = grid.h[0] if grid.n == 2 else None
    fwd, rev = [], []
    for b in range(members):
        def sub(tr, m):
            return SurfaceTrace(tr.kind, tr.level, tr.yn[m], tr.t[m], tr.tangential, tr.u[b][m], tr.u_t[b][m],
                                tr.u_n[b][m])
        s2, s3, s4 = sub(tr2, m2), sub(tr3, m3), sub(tr4, m4)
        # derivative along each surface's y_n parametrisation
        e2, _ = surface_h1_norm(s2, s2.yn, s2.u_n - s2.u_t, th)
        e3, _ = surface_h1_norm(s3, s3.yn, s3.u_n + s3.u_t, th)
        e4a, e4b = surface_h1_norm(s4, s4.yn, s4.u_n, th)
        e4 = e4a + e4b
        den = e2 + e3
        if den <= 1e-300 or e4 <= 1e-300:
            warnings.warn(f"ensemble member {b} is degenerate; skipped")
            continue
        fwd.append(e4 / den)
        rev.append(den / e4)
    if not fwd:
        raise SolverError("every ensemble member was degenerate")
    return {"ratio_forward": float(max(fwd)), "ratio_reverse": float(max(rev)), "members": len(fwd),
            "forward": fwd, "reverse": rev}
