"""Geometric-optics probes ``u_N = exp(i k (s - s0)) sum_p a_p / (i k)^p`` for the reduced operator.

In null coordinates the reduced operator reads

    L1 u = 4 u_{s tau} - 4 i alpha u_s - V2 u - T u,

with ``alpha = A_n^{(1)}``, ``V2 = V1 + 2 i alpha_s`` and ``T`` the tangential magnetic Laplacian
(empty for ``n = 1``). Substituting the ansatz gives ``4 a_{0,tau} = 4 i alpha a_0`` and

    4 a_{p,tau} - 4 i alpha a_p + L1 a_{p-1} = 0,

solved from ``tau = T - s`` (the boundary) inward. Amplitudes are computed on a lattice in
``(sigma, y[, y'])`` where ``sigma = s`` and ``y = y_n``; along a lattice column ``tau`` decreases
as ``T - sigma - 2 y``, so ``d_tau = -(1/2) d_y`` and ``d_s|_tau = d_sigma - (1/2) d_y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, quad
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erf

from .fields import ReducedCoefficients, Sampler
from .forward import BoundaryData, Recorder, march
from .geometry import Grid

__all__ = [
    "ProbeError",
    "ResolutionError",
    "smooth_step",
    "BumpCutoff",
    "SwitchOn",
    "Mollifier",
    "Phase",
    "build_phase",
    "GOProbe",
    "Amplitudes",
    "transport_recursion",
    "lattice_L1",
    "go_boundary_trace",
    "remainder_decay",
    "max_resolved_k",
]


class ProbeError(ValueError):
    pass


class ResolutionError(ProbeError):
    def __init__(self, k: float, k_max: float):
        super().__init__(f"wavenumber {k:g} is under-resolved; the grid admits k <= {k_max:.6g}")
        self.k_max = k_max


# ------------------------------------------------------------------------------------ cutoffs


def _psi(z):
    z = np.asarray(z, float)
    return np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)


def smooth_step(z):
    """C-infinity step: 0 for ``z <= 0``, 1 for ``z >= 1``."""
    a, b = _psi(z), _psi(1.0 - np.asarray(z, float))
    return a / (a + b)


class BumpCutoff:
    """``chi_1``: equal to 1 on ``|s - s0| <= delta`` and 0 on ``|s - s0| >= 2 delta``."""

    def __init__(self, s0: float, delta: float):
        self.s0, self.delta = float(s0), float(delta)

    def __call__(self, s):
        return smooth_step(2.0 - np.abs(np.asarray(s, float) - self.s0) / self.delta)

    @property
    def support(self) -> tuple:
        return (self.s0 - 2 * self.delta, self.s0 + 2 * self.delta)


class SwitchOn:
    """Rise from 0 to 1 over ``[start, start + width]``, then constant.

    ``kind="erf"`` uses a Gaussian-error rise clipped at 5 standard deviations (``width = 10 sigma``);
    its transform decays like ``exp(-(k sigma)^2 / 4)``. ``kind="smooth"`` uses :func:`smooth_step`.
    """

    def __init__(self, start: float, width: float, kind: str = "erf"):
        if kind not in ("erf", "smooth"):
            raise ValueError("kind must be 'erf' or 'smooth'")
        self.start, self.width, self.kind = float(start), float(width), kind

    def __call__(self, s):
        z = (np.asarray(s, float) - self.start) / self.width
        if self.kind == "smooth":
            return smooth_step(z)
        v = 0.5 * (1.0 + erf((z - 0.5) * 10.0 / math.sqrt(2.0)))
        return np.where(z <= 0, 0.0, np.where(z >= 1, 1.0, v))

    @property
    def support(self) -> tuple:
        return (self.start, math.inf)


_BUMP_MASS = quad(lambda r: math.exp(-1.0 / (1.0 - r * r)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-14)[0]


class Mollifier:
    """``chi_2``: unit-mass C-infinity bump of radius ``radius`` centred at ``y0``."""

    def __init__(self, y0: float, radius: float):
        self.y0, self.radius = float(y0), float(radius)

    def __call__(self, y):
        r = (np.asarray(y, float) - self.y0) / self.radius
        inside = np.abs(r) < 1
        rr = np.where(inside, r, 0.0)
        return np.where(inside, np.exp(-1.0 / (1.0 - rr * rr)), 0.0) / (_BUMP_MASS * self.radius)

    @property
    def support(self) -> tuple:
        return (self.y0 - self.radius, self.y0 + self.radius)


class _One:
    def __call__(self, y):
        return np.ones(np.shape(y))

    support = (-math.inf, math.inf)


# -------------------------------------------------------------------------------------- phase


class Phase:
    """``b(s, tau, y') = int_{T-s}^{tau} alpha dtau'`` (real-space form ``b = -2 int_0^{y_n} alpha``
    along the characteristic ``t - y_n = s``), by composite Gauss-Legendre quadrature."""

    def __init__(self, alpha: Sampler, n: int, T: float, order: int = 8, panel: float = 0.1):
        self.alpha, self.n, self.T = alpha, n, float(T)
        self.xi, self.wq = np.polynomial.legendre.leggauss(order)
        self.panel = panel
        self.zero = alpha.zero

    def at(self, x, t) -> np.ndarray:
        """``b`` at physical points ``(x, t)`` (``x[-1] = y_n``)."""
        shape = np.broadcast_shapes(*[np.shape(c) for c in x], np.shape(t))
        if self.zero:
            return np.zeros(shape, complex)
        x = tuple(np.broadcast_to(np.asarray(c, float), shape) for c in x)
        t = np.broadcast_to(np.asarray(t, float), shape)
        yn = x[-1]
        m = max(1, int(math.ceil(float(np.max(np.abs(yn), initial=0.0)) / self.panel)))
        loc = ((np.arange(m)[:, None] + 0.5 * (self.xi[None, :] + 1.0)) / m).ravel()
        w = np.broadcast_to(0.5 * self.wq[None, :] / m, (m, self.xi.size)).ravel()
        sig = yn[..., None] * loc
        s = (t - yn)[..., None]
        pts = tuple(np.broadcast_to(c[..., None], sig.shape) for c in x[:-1]) + (sig,)
        vals = self.alpha(pts, s + sig)
        return -2.0 * yn * np.sum(vals * w, axis=-1)

    def null(self, s, tau, y=None) -> np.ndarray:
        s = np.asarray(s, float)
        tau = np.asarray(tau, float)
        yn = 0.5 * (self.T - s - tau)
        t = 0.5 * (self.T + s - tau)
        x = (yn,) if self.n == 1 else (np.asarray(y, float), yn)
        return self.at(x, t)


def build_phase(alpha: Sampler, slab_or_T, n: int = 1) -> Phase:
    """Phase ``b`` for ``alpha = A_n^{(1)}`` on the slab ending at ``T`` (``b = 0`` on ``y_n = 0``)."""
    T = getattr(slab_or_T, "T", slab_or_T)
    return Phase(alpha, n, float(T))


# ---------------------------------------------------------------------------------- the probe


@dataclass
class GOProbe:
    """Geometric-optics probe data; ``chi1`` is a :class:`BumpCutoff` or a :class:`SwitchOn`."""

    coeffs: ReducedCoefficients
    k: float
    s0: float
    T: float
    T1: float
    chi1: object
    N: int = 0
    y0: float | None = None
    delta: float | None = None
    eps: float | None = None
    chi2: object = field(default_factory=_One)
    phase: Phase | None = None
    amplitudes: "Amplitudes | None" = None
    s_ref: float | None = None

    def __post_init__(self):
        if self.N > 2:
            raise ProbeError("expansion orders above 2 are not supported")
        if self.phase is None:
            self.phase = build_phase(self.coeffs.alpha, self.T, self.coeffs.n)
        if self.s_ref is None:
            self.s_ref = self.s0

    @staticmethod
    def bump(coeffs: ReducedCoefficients, k: float, s0: float, T: float, T1: float, *, delta: float | None = None,
             y0: float | None = None, eps: float | None = None, N: int = 0, tan_h: float | None = None) -> "GOProbe":
        """Probe with ``chi1`` a bump of half-width ``2 delta`` (default ``(T - T1)/10``).

        In 2D ``eps`` defaults to the value making ``eps * delta`` span 6 cells of ``tan_h``.
        """
        delta = (T - T1) / 10 if delta is None else delta
        chi2: object = _One()
        if coeffs.n == 2:
            if y0 is None:
                raise ProbeError("2D probes need a tangential centre y0")
            if eps is None:
                if tan_h is None:
                    raise ProbeError("give eps or the tangential spacing tan_h")
                eps = 6 * tan_h / delta
            chi2 = Mollifier(y0, eps * delta)
        return GOProbe(coeffs, k, s0, T, T1, BumpCutoff(s0, delta), N, y0, delta, eps, chi2)

    def with_k(self, k: float) -> "GOProbe":
        return replace(self, k=float(k))

    # -- evaluation
    def a0(self, x, t) -> np.ndarray:
        s = np.asarray(t) - np.asarray(x[-1])
        tan = self.chi2(x[0]) if self.coeffs.n == 2 else 1.0
        return self.chi1(s) * tan * np.exp(1j * self.phase.at(x, t))

    def envelope(self, x, t) -> np.ndarray:
        """``sum_p a_p / (i k)^p`` at physical points."""
        out = self.a0(x, t)
        if self.N and self.amplitudes is None:
            raise ProbeError("run transport_recursion first")
        for p in range(1, self.N + 1):
            out = out + self.amplitudes.evaluate(p, x, t) / (1j * self.k) ** p
        return out

    def u_N(self, x, t) -> np.ndarray:
        s = np.asarray(t) - np.asarray(x[-1])
        return np.exp(1j * self.k * (s - self.s0)) * self.envelope(x, t)

    @property
    def s_support(self) -> tuple:
        return self.chi1.support


# -------------------------------------------------------------------------- lattice transport


def _d(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order central first derivative; the two edge layers are left as NaN."""
    out = np.full_like(a, np.nan)
    sl = lambda i, j: tuple(slice(i, j) if d == axis else slice(None) for d in range(a.ndim))  # noqa: E731
    n = a.shape[axis]
    out[sl(2, n - 2)] = (8 * (a[sl(3, n - 1)] - a[sl(1, n - 3)]) - (a[sl(4, n)] - a[sl(0, n - 4)])) / (12 * h)
    return out


def _d2(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full_like(a, np.nan)
    sl = lambda i, j: tuple(slice(i, j) if d == axis else slice(None) for d in range(a.ndim))  # noqa: E731
    n = a.shape[axis]
    out[sl(2, n - 2)] = (-(a[sl(4, n)] + a[sl(0, n - 4)]) + 16 * (a[sl(3, n - 1)] + a[sl(1, n - 3)])
                         - 30 * a[sl(2, n - 2)]) / (12 * h * h)
    return out


@dataclass
class Lattice:
    """Rectangular lattice in ``(sigma, y[, y'])`` with physical points ``y_n = y``, ``t = sigma + y``."""

    sigma: np.ndarray
    y: np.ndarray
    ytan: np.ndarray | None = None

    @property
    def shape(self):
        return (self.sigma.size, self.y.size) + ((self.ytan.size,) if self.ytan is not None else ())

    def physical(self):
        if self.ytan is None:
            S, Y = np.meshgrid(self.sigma, self.y, indexing="ij")
            return (Y,), S + Y
        S, Y, X = np.meshgrid(self.sigma, self.y, self.ytan, indexing="ij")
        return (X, Y), S + Y

    @property
    def hs(self):
        return self.sigma[1] - self.sigma[0]

    @property
    def hy(self):
        return self.y[1] - self.y[0]

    @property
    def hx(self):
        return self.ytan[1] - self.ytan[0]


def lattice_L1(a: np.ndarray, lat: Lattice, coeffs: ReducedCoefficients) -> np.ndarray:
    """``L1 a`` on the lattice with fourth-order differences (NaN on the two edge layers)."""
    x, t = lat.physical()
    alpha = coeffs.alpha(x, t)
    V2 = coeffs.V2(x, t)
    a_sig = _d(a, 0, lat.hs)
    a_y = _d(a, 1, lat.hy)
    a_yy = _d2(a, 1, lat.hy)
    a_sy = _d(_d(a, 1, lat.hy), 0, lat.hs)
    out = -2 * a_sy + a_yy - 4j * alpha * (a_sig - 0.5 * a_y) - V2 * a
    if lat.ytan is not None:
        G = coeffs.metric.ginv(x)[..., 0, 0]
        A1 = coeffs.A_tan[0](x, t)
        # T a = (-i d + A1) G (-i d + A1) a
        Da = -1j * _d(a, 2, lat.hx) + A1 * a
        flux = G * Da
        Ta = -1j * _d(flux, 2, lat.hx) + A1 * flux
        out = out - Ta
    return out


def _cumulative_from_zero(f: np.ndarray, y: np.ndarray, axis: int = 1) -> np.ndarray:
    """``int_0^y f dy'`` along ``axis``; ``y`` must contain 0 as a node (Simpson, fourth order)."""
    j0 = int(np.argmin(np.abs(y)))
    if abs(y[j0]) > 1e-12 * max(1.0, np.abs(y).max()):
        raise ProbeError("lattice must contain y = 0")
    f = np.moveaxis(f, axis, -1)
    out = np.zeros(f.shape, complex)

    def cum(v, xs):
        return (cumulative_simpson(v.real, x=xs, axis=-1, initial=0.0)
                + 1j * cumulative_simpson(v.imag, x=xs, axis=-1, initial=0.0))

    if f.shape[-1] - j0 > 1:
        out[..., j0:] = cum(f[..., j0:], y[j0:])
    if j0 > 0:
        # integrate towards negative y: int_0^{y} = -int_{y}^0
        out[..., : j0 + 1] = -cum(f[..., : j0 + 1][..., ::-1], -y[: j0 + 1][::-1])[..., ::-1]
    return np.moveaxis(out, -1, axis)


@dataclass
class Amplitudes:
    """Lattice samples of ``a_0 ... a_N`` with quintic interpolation to physical points."""

    lattice: Lattice
    values: list
    interior: list
    _interp: dict = field(default_factory=dict)

    def evaluate(self, p: int, x, t) -> np.ndarray:
        lat = self.lattice
        if p not in self._interp:
            arr = self.values[p]
            axes = (lat.sigma, lat.y) + ((lat.ytan,) if lat.ytan is not None else ())
            self._interp[p] = (RegularGridInterpolator(axes, arr.real, method="quintic", bounds_error=False,
                                                       fill_value=0.0),
                               RegularGridInterpolator(axes, arr.imag, method="quintic", bounds_error=False,
                                                       fill_value=0.0))
        re, im = self._interp[p]
        yn = np.asarray(x[-1], float)
        shape = np.broadcast_shapes(*[np.shape(c) for c in x], np.shape(t))
        s = np.broadcast_to(np.asarray(t, float) - yn, shape)
        pts = [s, np.broadcast_to(yn, shape)]
        if lat.ytan is not None:
            pts.append(np.broadcast_to(np.asarray(x[0], float), shape))
        P = np.stack([p_.ravel() for p_ in pts], axis=-1)
        return (re(P) + 1j * im(P)).reshape(shape)


def transport_recursion(probe: GOProbe, N: int | None = None, *, y_max: float | None = None,
                        h: float | None = None, pad: int | None = None) -> Amplitudes:
    """Amplitudes ``a_1 ... a_N`` from the printed integral formula.

    The lattice covers the ``s``-support of ``chi1`` and ``0 <= y_n <= y_max`` (default half the
    slab depth ``T - T1``), padded by ``pad`` nodes on every side so that each recursion level
    keeps valid fourth-order differences on the region of interest.
    """
    N = probe.N if N is None else N
    if N > 2:
        raise ProbeError("expansion orders above 2 are not supported")
    coeffs = probe.coeffs
    lo, hi = probe.s_support
    hi = min(hi, probe.T)
    y_max = (probe.T - probe.T1) if y_max is None else y_max
    h = h if h is not None else min((hi - lo), y_max) / 200
    pad = pad if pad is not None else 2 * 2 * (N + 1) + 2
    sig = np.arange(lo - pad * h, hi + pad * h + 0.5 * h, h)
    y = h * np.arange(-pad, int(math.ceil(y_max / h)) + pad + 1)
    ytan = None
    if coeffs.n == 2:
        a, b = probe.chi2.support
        hx = (b - a) / 40
        ytan = np.arange(a - pad * hx, b + pad * hx + 0.5 * hx, hx)
    lat = Lattice(sig, y, ytan)
    x, t = lat.physical()
    a0 = probe.a0(x, t)
    vals = [a0]
    interior = [np.ones(lat.shape, bool)]
    eib = np.exp(1j * probe.phase.at(x, t))
    for p in range(1, N + 1):
        La = lattice_L1(vals[-1], lat, coeffs)
        ok = np.isfinite(La)
        La = np.where(ok, La, 0.0)
        ap = 0.5 * eib * _cumulative_from_zero(La / eib, y, axis=1)
        vals.append(ap)
        # invalid edge layers propagate along y through the integral only via sigma/ytan edges
        interior.append(interior[-1] & ok)
    amps = Amplitudes(lat, vals, interior)
    probe.amplitudes = amps
    probe.N = max(probe.N, N)
    return amps


# ---------------------------------------------------------------------------- boundary trace


def max_resolved_k(grid: Grid, dt: float | None = None, points: float = 10.0) -> float:
    """Largest ``k`` with at least ``points`` nodes per wavelength in ``y_n`` (and in time when given)."""
    h = grid.h[-1]
    if dt is not None:
        h = max(h, dt)
    return 2 * math.pi / (points * h)


def go_boundary_trace(probe: GOProbe, grid: Grid, *, check_support: bool = True) -> BoundaryData:
    """``f = u_N`` on ``y_n = 0``: ``exp(i k (t - s0)) chi1(t) chi2(y')`` (the higher amplitudes vanish there).

    The support check requires ``supp f`` inside ``Gamma x [T1, T]``.
    """
    if check_support:
        lo, hi = probe.s_support
        if lo < probe.T1 - 1e-12 or hi > probe.T + 1e-12:
            raise ProbeError(f"probe support [{lo:.4g}, {hi:.4g}] leaks outside [T1, T] = "
                             f"[{probe.T1:.4g}, {probe.T:.4g}]; reduce delta")
        if grid.n == 2 and grid.gamma is not None:
            a, b = probe.chi2.support
            if a < grid.gamma[0] - 1e-12 or b > grid.gamma[1] + 1e-12:
                raise ProbeError("tangential support leaks outside Gamma")
    k_max = max_resolved_k(grid)
    if probe.k > k_max:
        raise ResolutionError(probe.k, k_max)
    k, s0 = probe.k, probe.s0
    if grid.n == 1:
        return BoundaryData(lambda t: np.reshape(np.exp(1j * k * (t - s0)) * probe.chi1(t), (1, 1)), 1, 1)
    xb = grid.axes()[0]
    prof = probe.chi2(xb)
    return BoundaryData(lambda t: (np.exp(1j * k * (t - s0)) * probe.chi1(t) * prof)[None, :], 1, xb.size)


# --------------------------------------------------------------------------- remainder decay


class _RemainderRecorder(Recorder):
    """Accumulates ``int |u - u_N|^2`` over ``{tau >= 0, t <= T}`` with trapezoid weights."""

    def __init__(self, probe: GOProbe, T: float):
        self.probe = probe
        self.T = T
        self.total = 0.0
        self.ref = 0.0

    def start(self, ctx):
        super().start(ctx)
        g = ctx.grid
        self.x = g.mesh()
        self.yn = self.x[-1] - g.origin[-1]
        self.w = np.ones(g.shape) * np.prod(g.h)
        lo, hi = self.probe.s_support
        self.slo, self.shi = lo, hi

    def record(self, n, u):
        t = self.ctx.t0 + n * self.ctx.dt
        if t > self.T + 1e-12:
            return
        wt = self.ctx.dt * (0.5 if n in (0, self.ctx.nt) else 1.0)
        region = (self.T - t - self.yn) >= -1e-12
        s = t - self.yn
        near = region & (s >= self.slo - 1e-12) & (s <= self.shi + 1e-12)
        uN = np.zeros(self.yn.shape, complex)
        if near.any():
            pts = tuple(c[near] for c in self.x)
            uN[near] = self.probe.u_N(pts, t)
        r = np.where(region, u[0] - uN, 0.0)
        self.total += wt * float(np.sum(self.w * np.abs(r) ** 2))
        self.ref += wt * float(np.sum(self.w * np.abs(np.where(region, uN, 0.0)) ** 2))


def remainder_decay(probe: GOProbe, ks: Sequence[float], grid: Grid, *, cfl: float = 0.5,
                    grid_for: Callable[[float], Grid] | None = None) -> dict:
    """Least-squares slope of ``log ||u - u_N||_{L2}`` versus ``log k``.

    ``u`` solves ``L1 u = 0`` with data :func:`go_boundary_trace`; the norm is taken over
    ``{tau >= 0, t <= T}``. ``grid_for(k)`` may supply a k-dependent grid.
    """
    ks = [float(k) for k in ks]
    if len(ks) < 2:
        raise ProbeError("need at least two wavenumbers")
    if probe.N and probe.amplitudes is None:
        transport_recursion(probe)
    norms, refs = [], []
    for k in ks:
        g = grid_for(k) if grid_for else grid
        pk = probe.with_k(k)
        f = go_boundary_trace(pk, g)
        rec = _RemainderRecorder(pk, probe.T)
        march(pk.coeffs, g, f, 0.0, probe.T, cfl=cfl, recorders=[rec], keep_rows=False)
        norms.append(math.sqrt(rec.total))
        refs.append(math.sqrt(rec.ref))
    slope = float(np.polyfit(np.log(ks), np.log(norms), 1)[0])
    return {"k": ks, "norm": norms, "reference": refs, "slope": slope, "N": probe.N}
