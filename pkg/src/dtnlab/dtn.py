"""Discrete D-to-N maps and the boundary/interior functionals built from them.

A :class:`DtNMap` is a Galerkin matrix ``M[i, j] = (Lambda phi_j, phi_i)`` over a tensor basis of
cubic B-splines on ``Gamma_0 x (t_a, t_b)``. Every basis function vanishes (with two continuous
derivatives) at the ends of its window, so the support condition at ``t = 0`` holds. The pairing is
trapezoid quadrature over the solver's time levels and bottom-face nodes.

Sign conventions: :func:`green_gap` uses the convention stored in the maps. On the characteristic
slab, ``green_gap = A0`` with ``exterior_conormal`` traces and ``green_gap = -A0`` with
``interior_normal`` traces.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import Coefficients, ReducedCoefficients, reduce_operator
from .forward import (CONVENTIONS, BoundaryData, CharacteristicSlab, SolverError, SurfaceRecorder,
                      SurfaceTrace, TraceRecorder, WaveField, _as_coefficients, _trap_weights, march,
                      trace_characteristic)
from .geometry import Grid

__all__ = [
    "DtNError",
    "SupportError",
    "SplineBasis",
    "DtNMap",
    "assemble_dtn",
    "adjoint_dtn",
    "green_gap",
    "green_gap_traces",
    "slab_traces",
    "volume_functional_A0",
    "functional_A",
    "localized_functional_A1",
    "LocalizedA1",
    "verify_equivalent_pair",
    "relative_difference",
    "reduced_fields",
]

MAGIC = b"DTN1"


class DtNError(RuntimeError):
    pass


class SupportError(ValueError):
    pass


# ------------------------------------------------------------------------------------ B-splines


def bspline3(z: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline on ``[-2, 2]`` with unit knot spacing."""
    a = np.abs(np.asarray(z, float))
    out = np.where(a < 1, (4 - 6 * a**2 + 3 * a**3) / 6, 0.0)
    return np.where((a >= 1) & (a < 2), (2 - a) ** 3 / 6, out)


def bspline3_d(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    a = np.abs(z)
    sg = np.sign(z)
    out = np.where(a < 1, (-12 * a + 9 * a**2) / 6, 0.0)
    out = np.where((a >= 1) & (a < 2), -3 * (2 - a) ** 2 / 6, out)
    return sg * out


@dataclass(frozen=True)
class SplineBasis:
    """Tensor basis ``T_a(t) X_b(x')`` with ``n_time`` temporal and ``n_space`` tangential splines.

    Splines are interior to ``window`` and (for ``n = 2``) to ``patch``. Flat index ``a * n_space + b``;
    ``n_space = 1`` with ``X = 1`` when ``n = 1``.
    """

    window: tuple
    n_time: int
    patch: tuple | None = None
    n_space: int = 1

    def __post_init__(self):
        ta, tb = (float(v) for v in self.window)
        if not tb > ta:
            raise ValueError("empty time window")
        if self.n_time < 1 or self.n_space < 1:
            raise ValueError("basis needs at least one function per axis")
        object.__setattr__(self, "window", (ta, tb))
        if self.patch is not None:
            object.__setattr__(self, "patch", tuple(float(v) for v in self.patch))

    @property
    def n(self) -> int:
        return 1 if self.patch is None else 2

    @property
    def size(self) -> int:
        return self.n_time * self.n_space

    @property
    def dt(self) -> float:
        ta, tb = self.window
        return (tb - ta) / (self.n_time + 3)

    @property
    def dx(self) -> float:
        a, b = self.patch
        return (b - a) / (self.n_space + 3)

    def time_centers(self) -> np.ndarray:
        return self.window[0] + (np.arange(self.n_time) + 2) * self.dt

    def space_centers(self) -> np.ndarray:
        return self.patch[0] + (np.arange(self.n_space) + 2) * self.dx

    def time_values(self, t, deriv: bool = False) -> np.ndarray:
        z = (np.asarray(t, float)[None, ...] - self.time_centers().reshape((-1,) + (1,) * np.ndim(t))) / self.dt
        return bspline3_d(z) / self.dt if deriv else bspline3(z)

    def space_values(self, x, deriv: bool = False) -> np.ndarray:
        if self.patch is None:
            return np.ones((1,) + np.shape(x)) if not deriv else np.zeros((1,) + np.shape(x))
        z = (np.asarray(x, float)[None, ...] - self.space_centers().reshape((-1,) + (1,) * np.ndim(x))) / self.dx
        return bspline3_d(z) / self.dx if deriv else bspline3(z)

    def evaluate(self, coefs: np.ndarray, x, t) -> np.ndarray:
        """``sum_i c_i phi_i`` at boundary points; ``coefs`` of shape ``(K, size)`` gives ``(K, ...)``."""
        c = np.atleast_2d(np.asarray(coefs)).reshape(-1, self.n_time, self.n_space)
        T = self.time_values(t)
        X = self.space_values(x)
        return np.einsum("kab,a...,b...->k...", c, T, X)

    def boundary_data(self, grid: Grid, coefs: np.ndarray) -> BoundaryData:
        c = np.atleast_2d(np.asarray(coefs, complex))
        K = c.shape[0]
        if grid.n != self.n:
            raise ValueError("basis and grid dimensions differ")
        xb = grid.axes()[0] if grid.n == 2 else np.zeros(1)
        X = self.space_values(xb)  # (ns, nb)
        cc = c.reshape(K, self.n_time, self.n_space)
        CX = np.einsum("kab,bx->kax", cc, X)

        def fn(t):
            return np.einsum("kax,a->kx", CX, self.time_values(t))

        return BoundaryData(fn, K, xb.size)

    def elements(self, grid: Grid, start: int = 0, stop: int | None = None) -> BoundaryData:
        stop = self.size if stop is None else stop
        eye = np.eye(self.size)[start:stop]
        return self.boundary_data(grid, eye)

    def h1_norm(self, coefs: np.ndarray, samples: int = 401) -> np.ndarray:
        """Continuum ``H^1(Gamma_0 x window)`` norm of each coefficient row (trapezoid on fine samples)."""
        c = np.atleast_2d(np.asarray(coefs, complex)).reshape(-1, self.n_time, self.n_space)
        t = np.linspace(*self.window, samples)
        wt = _trap_weights(t)
        T, Tt = self.time_values(t), self.time_values(t, True)
        if self.patch is None:
            f = np.einsum("ka,at->kt", c[:, :, 0], T)
            ft = np.einsum("ka,at->kt", c[:, :, 0], Tt)
            return np.sqrt(np.einsum("kt,t->k", np.abs(f) ** 2 + np.abs(ft) ** 2, wt))
        x = np.linspace(*self.patch, samples)
        wx = _trap_weights(x)
        X, Xx = self.space_values(x), self.space_values(x, True)
        f = np.einsum("kab,at,bx->ktx", c, T, X)
        ft = np.einsum("kab,at,bx->ktx", c, Tt, X)
        fx = np.einsum("kab,at,bx->ktx", c, T, Xx)
        dens = np.abs(f) ** 2 + np.abs(ft) ** 2 + np.abs(fx) ** 2
        return np.sqrt(np.einsum("ktx,t,x->k", dens, wt, wx))

    def describe(self) -> dict:
        return {"window": list(self.window), "n_time": self.n_time, "patch": list(self.patch) if self.patch else None,
                "n_space": self.n_space}


# --------------------------------------------------------------------------------------- DtNMap


@dataclass
class DtNMap:
    """Galerkin matrix of a D-to-N operator plus provenance."""

    matrix: np.ndarray
    basis: SplineBasis
    convention: str
    fingerprint: str
    adjoint: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        if not np.all(np.isfinite(self.matrix)):
            raise DtNError("D-to-N matrix has non-finite entries")

    @property
    def n(self) -> int:
        return self.basis.n

    def apply(self, coefs: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(coefs)

    def norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    def causality_defect(self) -> float:
        """Largest ``|M[i, j]|`` (relative) over pairs whose test spline ends before the source starts."""
        nt, ns = self.basis.n_time, self.basis.n_space
        M = self.matrix.reshape(nt, ns, nt, ns)
        a = np.arange(nt)
        # supp T_i ends before supp T_j starts (adjoint solves also march forward in time)
        mask = a[None, :] - a[:, None] >= 4
        scale = np.abs(M).max() or 1.0
        bad = np.abs(M).transpose(0, 2, 1, 3)[mask]
        return float(bad.max(initial=0.0) / scale)

    # -- persistence
    def to_bytes(self) -> bytes:
        conv = CONVENTIONS.index(self.convention)
        digest = bytes.fromhex(self.fingerprint) if len(self.fingerprint) == 64 else hashlib.sha256(
            self.fingerprint.encode()).digest()
        patch = self.basis.patch or (0.0, 0.0)
        head = struct.pack("<4sBIIB32s", MAGIC, self.n, self.basis.n_space, self.basis.n_time, conv, digest)
        head += struct.pack("<Bdddd", int(self.adjoint), *self.basis.window, *patch)
        scen = self.meta.get("scenario_sha256")
        head += struct.pack("<32s", bytes.fromhex(scen) if scen else bytes(32))
        body = np.ascontiguousarray(self.matrix, dtype="<c16").tobytes()
        return head + body

    @staticmethod
    def from_bytes(buf: bytes) -> "DtNMap":
        fmt = "<4sBIIB32s"
        k = struct.calcsize(fmt)
        magic, n, ns, nt, conv, digest = struct.unpack(fmt, buf[:k])
        if magic != MAGIC:
            raise DtNError("not a DTN1 file")
        fmt2 = "<Bdddd"
        k2 = struct.calcsize(fmt2)
        adj, ta, tb, pa, pb = struct.unpack(fmt2, buf[k:k + k2])
        (scen,) = struct.unpack("<32s", buf[k + k2:k + k2 + 32])
        meta = {"scenario_sha256": scen.hex()} if any(scen) else {}
        size = ns * nt
        mat = np.frombuffer(buf[k + k2 + 32:], dtype="<c16")
        if mat.size != size * size:
            raise DtNError("DTN1 payload has the wrong size")
        basis = SplineBasis((ta, tb), nt, (pa, pb) if n == 2 else None, ns)
        return DtNMap(mat.reshape(size, size).astype(complex), basis, CONVENTIONS[conv], digest.hex(), bool(adj),
                      meta)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "DtNMap":
        with open(path, "rb") as fh:
            return DtNMap.from_bytes(fh.read())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "re", "im"])
        for i, j in np.ndindex(self.matrix.shape):
            z = self.matrix[i, j]
            w.writerow([i, j, f"{z.real:.17g}", f"{z.imag:.17g}"])
        return buf.getvalue()


def _same_provenance(a: DtNMap, b: DtNMap) -> None:
    ha, hb = a.meta.get("scenario_sha256"), b.meta.get("scenario_sha256")
    if ha and hb and ha != hb:
        raise DtNError(f"maps come from different scenarios ({ha[:12]} vs {hb[:12]})")


def relative_difference(a: DtNMap, b: DtNMap) -> float:
    """``||M_a - M_b||_2 / ||M_a||_2`` (same basis and convention required)."""
    if a.basis != b.basis or a.convention != b.convention:
        raise DtNError("maps use different bases or conventions")
    _same_provenance(a, b)
    return float(np.linalg.norm(a.matrix - b.matrix, 2) / np.linalg.norm(a.matrix, 2))


class _Projector:
    def __init__(self, basis: SplineBasis, grid: Grid, batch: int):
        self.basis = basis
        xb = grid.axes()[0] if grid.n == 2 else np.zeros(1)
        wx = _trap_weights(xb) if grid.n == 2 else np.ones(1)
        self.WX = basis.space_values(xb) * wx[None, :]  # (ns, nb)
        self.acc = np.zeros((batch, basis.n_time, basis.n_space), complex)
        self.window = basis.window

    def make_sink(self, dt: float, t_end: float):
        ta, tb = self.window

        def sink(n, t, tr):
            if t < ta - 1e-12 or t > tb + 1e-12:
                return
            w = dt
            if abs(t - ta) < 0.5 * dt or abs(t - tb) < 0.5 * dt or abs(t - t_end) < 0.5 * dt:
                w = 0.5 * dt
            T = self.basis.time_values(np.array([t]))[:, 0]
            self.acc += w * np.einsum("kx,bx,a->kab", tr, self.WX, T)

        return sink


class _ProjectingRecorder(TraceRecorder):
    """Trace recorder whose sink (bound once the time step is known) accumulates the projection."""

    def __init__(self, proj: _Projector, convention: str):
        super().__init__(None, convention)
        self.proj = proj

    def start(self, ctx):
        super().start(ctx)
        self.sink = self.proj.make_sink(ctx.dt, ctx.t0 + ctx.nt * ctx.dt)


def assemble_dtn(coeffs, grid: Grid, basis: SplineBasis, convention: str = "interior_normal", *,
                 t_start: float = 0.0, cfl: float = 0.5, dt: float | None = None, chunk: int = 64,
                 adjoint: bool = False, label: str = "") -> DtNMap:
    """Assemble the Galerkin D-to-N matrix column by column (batched solves).

    Each column solves from rest at ``t_start`` to the end of the basis window. Solver failures are
    re-raised with the affected column range.
    """
    c = _as_coefficients(coeffs)
    if basis.n != grid.n:
        raise ValueError("basis and grid dimensions differ")
    if basis.window[0] < t_start - 1e-12:
        raise SupportError("basis window starts before the initial time")
    tb = basis.window[1]
    cols = []
    for start in range(0, basis.size, chunk):
        stop = min(basis.size, start + chunk)
        data = basis.elements(grid, start, stop)
        proj = _Projector(basis, grid, stop - start)
        rec = _ProjectingRecorder(proj, convention)
        try:
            march(c, grid, data, t_start, tb, cfl=cfl, dt=dt, recorders=[rec], keep_rows=False)
        except SolverError as exc:
            raise DtNError(f"columns {start}..{stop - 1}: {exc}") from exc
        cols.append(proj.acc.reshape(stop - start, -1))
    # acc[k, i] = (Lambda phi_k, phi_i): columns are sources
    M = np.concatenate(cols, axis=0).T.copy()
    times = (t_start, tb)
    fp = c.fingerprint(grid, np.linspace(*times, 5))
    meta = {"grid": grid.describe(), "t_start": t_start, "label": label, "cfl": cfl}
    return DtNMap(M, basis, convention, fp, adjoint, meta)


def adjoint_dtn(coeffs, grid: Grid, basis: SplineBasis, convention: str = "interior_normal", *, T1: float,
                **kwargs) -> DtNMap:
    """D-to-N map of ``L^*`` (conjugated coefficients) with zero data at ``T1``."""
    c = _as_coefficients(coeffs).conj()
    return assemble_dtn(c, grid, basis, convention, t_start=T1, adjoint=True, **kwargs)


# ----------------------------------------------------------------------------- Green identity


def _check_support(basis: SplineBasis, slab: CharacteristicSlab | None):
    if slab is None:
        return
    ta, tb = basis.window
    if ta < slab.T1 - 1e-12 or tb > slab.T + 1e-12:
        raise SupportError("basis window is not inside [T1, T]")
    if basis.patch is not None and slab.gamma is not None:
        a, b = slab.patch(3)
        if basis.patch[0] < a - 1e-12 or basis.patch[1] > b + 1e-12:
            raise SupportError("basis patch is not inside Gamma^(3)")


def green_gap(lam: DtNMap, lam_star: DtNMap, f: np.ndarray, g: np.ndarray,
              slab: CharacteristicSlab | None = None) -> complex:
    """``(Lambda f, g) - (f, Lambda_* g)`` for coefficient vectors ``f``, ``g`` on the common basis."""
    if lam.basis != lam_star.basis or lam.convention != lam_star.convention:
        raise DtNError("maps use different bases or conventions")
    _same_provenance(lam, lam_star)
    _check_support(lam.basis, slab)
    f = np.asarray(f, complex)
    g = np.asarray(g, complex)
    return complex(np.conj(g) @ (lam.matrix @ f) - np.conj(np.conj(f) @ (lam_star.matrix @ g)))


def green_gap_traces(times: np.ndarray, xb: np.ndarray | None, f, lam_f, g, lam_g) -> complex:
    """Same pairing from sampled boundary data and traces (arrays ``(L,)`` or ``(L, nb)``)."""
    wt = _trap_weights(np.asarray(times))
    dens = lam_f * np.conj(g) - f * np.conj(lam_g)
    if xb is None:
        return complex(np.sum(wt * np.reshape(dens, wt.shape)))
    return complex(np.einsum("t,tx,x->", wt, dens, _trap_weights(xb)))


# ------------------------------------------------------------------------- slab functionals


def slab_traces(coeffs, grid: Grid, slab: CharacteristicSlab, f: BoundaryData, g: BoundaryData | None = None,
                *, cfl: float = 0.5, surfaces: Sequence[tuple] | None = None,
                store: bool = False) -> tuple:
    """Forward solve with ``f`` (from rest at 0) and adjoint solve with ``g`` (from rest at ``T1``),
    both traced on ``tau = 0`` (or ``surfaces``). Returns ``(u_traces, v_traces, u_field, v_field)``;
    ``g = None`` skips the adjoint."""
    c = _as_coefficients(coeffs)
    surfaces = list(surfaces or [slab.surface(0.0)])
    depth = slab.depth + 1e-9
    ru = SurfaceRecorder(surfaces, max_depth=depth)
    uf = march(c, grid, f, 0.0, slab.T, cfl=cfl, recorders=[ru], store=store)
    vt, vf = None, None
    if g is not None:
        rv = SurfaceRecorder(surfaces, max_depth=depth)
        # adjoint uses the same time step as the forward run for identical surface sampling
        vf = march(c.conj(), grid, g, slab.T1, slab.T, dt=_matched_dt(uf.dt, slab), recorders=[rv], store=store)
        vt = rv.traces()
    return ru.traces(), vt, uf, vf


def _matched_dt(dt: float, slab: CharacteristicSlab) -> float:
    n = math.ceil((slab.T - slab.T1) / dt - 1e-9)
    return (slab.T - slab.T1) / n


def _as_trace(x, slab: CharacteristicSlab) -> SurfaceTrace:
    if isinstance(x, SurfaceTrace):
        return x
    if isinstance(x, WaveField):
        return trace_characteristic(x, slab, ("tau", slab.T))
    raise TypeError("expected a SurfaceTrace or a stored WaveField")


def _surface_weights(tr: SurfaceTrace, slab: CharacteristicSlab, s_lo: float | None = None,
                     s_hi: float | None = None):
    """Trapezoid weights in ``s`` (and ``y'``) on a ``tau``-surface, restricted to ``[s_lo, s_hi]``."""
    s = tr.s
    lo = slab.T1 if s_lo is None else s_lo
    hi = slab.T if s_hi is None else s_hi
    keep = (s >= lo - 1e-9) & (s <= hi + 1e-9)
    idx = np.nonzero(keep)[0]
    w = np.zeros_like(s)
    if idx.size >= 2:
        w[idx] = _trap_weights(s[idx])
    wx = _trap_weights(tr.tangential) if tr.tangential is not None else None
    return w, wx


def _integrate(dens: np.ndarray, w: np.ndarray, wx: np.ndarray | None) -> np.ndarray:
    """Integrate ``dens`` of shape ``(..., R[, X])`` against the surface weights."""
    if wx is None:
        return np.tensordot(dens, w, axes=([-1], [0]))
    return np.einsum("...rx,r,x->...", dens, w, wx)


def _pair(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``u[a] * conj(v[b])`` for all batch pairs: shape ``(Bu, Bv, R[, X])``."""
    return u[:, None] * np.conj(v)[None, :]


def _maybe_scalar(a: np.ndarray):
    return complex(a.ravel()[0]) if a.size == 1 else a


def volume_functional_A0(u, v, slab: CharacteristicSlab, s_range: tuple | None = None):
    """``A0 = int_Y (u_s conj(v) - u conj(v_s)) dy' ds`` on ``tau = 0`` (batch pairs -> matrix)."""
    tu, tv = _as_trace(u, slab), _as_trace(v, slab)
    w, wx = _surface_weights(tu, slab, *(s_range or (None, None)))
    dens = _pair(tu.u_s, tv.u) - _pair(tu.u, tv.u_s)
    return _maybe_scalar(_integrate(dens, w, wx))


def functional_A(u, v, slab: CharacteristicSlab, *, path: str = "interior", f: BoundaryData | None = None,
                 g: BoundaryData | None = None):
    """``A = 2 int_Y u_s conj(v)``.

    ``path="interior"`` integrates on the surface; ``path="corner"`` evaluates ``A0 + int u conj(v)``
    at ``(y', 0, T)`` from the boundary data ``f(T)``, ``g(T)``; ``path="both"`` returns both.
    """
    tu, tv = _as_trace(u, slab), _as_trace(v, slab)
    w, wx = _surface_weights(tu, slab)
    interior = _maybe_scalar(_integrate(2 * _pair(tu.u_s, tv.u), w, wx))
    if path == "interior":
        return interior
    if f is None or g is None:
        raise ValueError("the corner path needs the boundary data f and g")
    fT, gT = f.values(slab.T), g.values(slab.T)  # (B, nb)
    if tu.tangential is None:
        corner = fT[:, None, 0] * np.conj(gT)[None, :, 0]
    else:
        corner = np.einsum("ax,bx,x->ab", fT, np.conj(gT), _trap_weights(tu.tangential))
    other = _maybe_scalar(np.asarray(volume_functional_A0(tu, tv, slab)) + corner)
    if path == "corner":
        return other
    if path == "both":
        return interior, other
    raise ValueError(f"unknown path {path!r}")


@dataclass
class LocalizedA1:
    direct: complex
    difference: complex

    @property
    def discrepancy(self) -> float:
        return float(abs(self.direct - self.difference))


def localized_functional_A1(u, v, slab: CharacteristicSlab, s0: float) -> LocalizedA1:
    """``A1 = 2 int_{s <= s0} u_s conj(v)`` and the cross-check ``A(u) - A(u0)`` with ``u0 = u - w1``,
    ``w1 = u(s0, y')`` for ``s >= s0`` (so ``w1_s = 0`` there) and ``u0 = 0`` for ``s < s0``."""
    if not (slab.T1 <= s0 < slab.T):
        raise ValueError("s0 must lie in [T1, T)")
    tu, tv = _as_trace(u, slab), _as_trace(v, slab)
    w, wx = _surface_weights(tu, slab, None, s0)
    direct = _integrate(2 * _pair(tu.u_s, tv.u), w, wx)
    # u0 on the surface lattice
    s = tu.s
    u_at = _interp_rows(s, tu.u, s0)
    cut = (s >= s0 - 1e-12).reshape((1, -1) + (1,) * (tu.u.ndim - 2))
    u0 = SurfaceTrace(tu.kind, tu.level, tu.yn, tu.t, tu.tangential, np.where(cut, tu.u - u_at, 0.0),
                      np.where(cut, tu.u_t, 0.0), np.where(cut, tu.u_n, 0.0))
    A_full = _integrate(2 * _pair(tu.u_s, tv.u), *_surface_weights(tu, slab))
    w0, _ = _surface_weights(tu, slab, s0, None)
    A_u0 = _integrate(2 * _pair(u0.u_s, tv.u), w0, wx)
    return LocalizedA1(_maybe_scalar(direct), _maybe_scalar(A_full - A_u0))


def _interp_rows(s: np.ndarray, vals: np.ndarray, s0: float) -> np.ndarray:
    """Cubic interpolation of ``vals[:, row, ...]`` at ``s = s0`` (rows ordered by decreasing ``s``)."""
    order = np.argsort(s)
    ss = s[order]
    i = int(np.clip(np.searchsorted(ss, s0) - 2, 0, ss.size - 4))
    nodes = ss[i:i + 4]
    out = 0
    for a in range(4):
        la = np.prod([(s0 - nodes[b]) / (nodes[a] - nodes[b]) for b in range(4) if b != a])
        out = out + la * vals[:, order[i + a]]
    return out[:, None]


# ------------------------------------------------------------------------ equivalent pairs


def reduced_fields(tr: SurfaceTrace, metric, psi, adjoint: bool = False) -> SurfaceTrace:
    """Map a trace of a solution of ``L`` to the reduced field ``ghat^{1/4} exp(-i psi) u``.

    For adjoint fields the multiplier is ``ghat^{1/4} exp(-i conj(psi))``.
    """
    n = metric.n
    yn = tr.yn
    if tr.tangential is None:
        x = (yn,)
        shape = yn.shape
    else:
        Y, X = np.meshgrid(yn, tr.tangential, indexing="ij")
        x = (X, Y)
        shape = Y.shape
    t = tr.t if tr.tangential is None else np.broadcast_to(tr.t[:, None], shape)
    ps = psi.conj() if adjoint else psi
    ph = ps(x, t)
    ph_t = ps.derivative("t")(x, t)
    ph_n = ps.derivative(n - 1)(x, t)
    q = metric.g_det(x) ** 0.25
    # d/dy_n of ghat^{1/4} by central differences of the sampled weight
    eps = 1e-5
    xp = x[:-1] + (x[-1] + eps,)
    xm = x[:-1] + (x[-1] - eps,)
    q_n = (metric.g_det(xp) ** 0.25 - metric.g_det(xm) ** 0.25) / (2 * eps)
    m = q * np.exp(-1j * ph)
    m_t = m * (-1j * ph_t)
    m_n = q_n * np.exp(-1j * ph) + m * (-1j * ph_n)
    return SurfaceTrace(tr.kind, tr.level, tr.yn, tr.t, tr.tangential, m * tr.u, m_t * tr.u + m * tr.u_t,
                        m_n * tr.u + m * tr.u_n)


def _h1_surface(tr: SurfaceTrace, w, wx) -> np.ndarray:
    dens = np.abs(tr.u) ** 2 + np.abs(tr.u_s) ** 2
    if tr.tangential is not None:
        dens = dens + np.abs(np.gradient(tr.u, tr.tangential, axis=-1, edge_order=2)) ** 2
    return np.sqrt(np.real(_integrate(dens, w, wx)))


def verify_equivalent_pair(pair: Sequence[Coefficients], grid: Grid, slab: CharacteristicSlab, f: BoundaryData,
                           g: BoundaryData, s0: float, *, T0: float | None = None, cfl: float = 0.5) -> dict:
    """Compare the projected functional ``(u_{0s}, v)`` and the ``H^1(Y_{2 s0})`` norms of the reduced
    fields for two equivalent coefficient sets given in boundary-normal coordinates.

    Each operator is solved in its own (unreduced) form; the traces are then mapped to the reduced
    fields through its own null-gauge phase. Returns the relative functional difference and the
    norm ratio for every ``(f, g)`` batch pair.
    """
    funcs, norms = [], []
    for coeffs in pair:
        red: ReducedCoefficients = reduce_operator(coeffs.metric, coeffs.potentials, T0)
        tu, tv, _, _ = slab_traces(coeffs, grid, slab, f, g, cfl=cfl)
        u1 = reduced_fields(tu[0], coeffs.metric, red.psi)
        v1 = reduced_fields(tv[0], coeffs.metric, red.psi, adjoint=True)
        # u0 = u - u(s0) on s >= s0, so (u0_s, v) = int_{s >= s0} u_s conj(v)
        w, wx = _surface_weights(u1, slab, s0, None)
        funcs.append(_integrate(_pair(u1.u_s, v1.u), w, wx))
        norms.append(_h1_surface(u1, w, wx))
    a, b = funcs
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.abs(a - b) / np.where(scale > 0, scale, 1.0)
    ratio = norms[0] / np.where(norms[1] > 0, norms[1], np.inf)
    return {"functional": (a, b), "difference": np.abs(a - b), "relative": rel,
            "norm_ratio": ratio, "norms": norms}
