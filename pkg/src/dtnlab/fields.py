"""Space-time coefficient samplers, gauge transformations and the boundary-layer reduction.

The operator is

    L u = (-i d_t + A_0)^2 u - sum_{j,k} w^{-1} (-i d_j + A_j) w g^{jk} (-i d_k + A_k) u - V u

with weight ``w = sqrt(g)`` for the original form and ``w = 1`` for the reduced form used in
boundary-normal coordinates. Samplers are callables ``f(x, t)`` (``x`` a tuple of coordinate
arrays) that know their own partial derivatives, analytically where possible; otherwise a
fourth-order central difference is used.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import Diffeomorphism, Grid, MetricField, verify_semigeodesic

__all__ = [
    "Sampler",
    "PotentialSet",
    "GaugeFunction",
    "Coefficients",
    "ReducedCoefficients",
    "FieldError",
    "WindowError",
    "sampler_from_spec",
    "gauge_from_spec",
    "gauge_apply",
    "pullback_coefficients",
    "sqrtg_connection",
    "sqrtg_connection_at",
    "reduced_potential",
    "null_gauge",
    "direct_reduced",
    "reduce_operator",
    "apply_operator",
    "C_MIN",
]

C_MIN = 1e-6


class FieldError(ValueError):
    """Invalid coefficient or gauge input."""


class WindowError(FieldError):
    """A characteristic leaves the time window before reaching the requested point."""


def _shape_of(x, t):
    return np.broadcast_shapes(*[np.shape(c) for c in x], np.shape(t))


# ------------------------------------------------------------------------------------ samplers


class Sampler:
    """Complex space-time field with partial derivatives.

    ``derivs`` maps an axis key (``"t"`` or a spatial index ``0..n-1``) to a Sampler or a plain
    callable for that partial derivative. Missing keys fall back to finite differences.
    """

    def __init__(self, fn: Callable, *, derivs: dict | None = None, static: bool = False,
                 zero: bool = False, label: str = "sampler", fd_step: float = 1e-3):
        self._fn = fn
        self._derivs = dict(derivs or {})
        self.static = bool(static)
        self.zero = bool(zero)
        self.label = label
        self.fd_step = fd_step

    def __repr__(self) -> str:
        return f"Sampler({self.label})"

    def __call__(self, x: Sequence, t) -> np.ndarray:
        shape = _shape_of(x, t)
        if self.zero:
            return np.zeros(shape, dtype=complex)
        return np.broadcast_to(np.asarray(self._fn(tuple(x), t), dtype=complex), shape)

    # -- constructors
    @staticmethod
    def const(value: complex) -> "Sampler":
        value = complex(value)
        z = _ZERO_CACHE
        return Sampler(lambda x, t: value, derivs={"t": z, 0: z, 1: z, 2: z}, static=True,
                       zero=(value == 0), label=f"const({value})")

    @staticmethod
    def zeros() -> "Sampler":
        return _ZERO_CACHE

    # -- derivatives
    def derivative(self, axis) -> "Sampler":
        """Sampler of the partial derivative along ``axis`` (``"t"`` or spatial index)."""
        if self.zero or (axis == "t" and self.static):
            return _ZERO_CACHE
        d = self._derivs.get(axis)
        if isinstance(d, Sampler):
            return d
        if d is not None:
            return Sampler(d, static=self.static, label=f"d{axis}({self.label})")
        h = self.fd_step
        f = self

        def fd(x, t):
            if axis == "t":
                g = lambda k: f(x, t + k * h)
            else:
                def g(k):
                    xs = list(x)
                    xs[axis] = x[axis] + k * h
                    return f(xs, t)
            return (8.0 * (g(1) - g(-1)) - (g(2) - g(-2))) / (12.0 * h)

        out = Sampler(fd, static=self.static, label=f"d{axis}({self.label})", fd_step=h)
        self._derivs[axis] = out
        return out

    def dt(self, x, t):
        return self.derivative("t")(x, t)

    def dx(self, j: int, x, t):
        return self.derivative(j)(x, t)

    # -- algebra
    def conj(self) -> "Sampler":
        if self.zero:
            return self
        f = self
        derivs = {k: (lambda kk: (lambda: f.derivative(kk).conj()))(k) for k in ("t", 0, 1, 2)}
        return _LazySampler(lambda x, t: np.conj(f(x, t)), derivs, self.static, f"conj({self.label})")

    def __add__(self, other) -> "Sampler":
        other = _as_sampler(other)
        if other.zero:
            return self
        if self.zero:
            return other
        a, b = self, other
        derivs = {k: (lambda kk: (lambda: a.derivative(kk) + b.derivative(kk)))(k) for k in ("t", 0, 1, 2)}
        return _LazySampler(lambda x, t: a(x, t) + b(x, t), derivs, a.static and b.static,
                            f"({a.label}+{b.label})")

    __radd__ = __add__

    def __neg__(self) -> "Sampler":
        return self * (-1.0)

    def __sub__(self, other) -> "Sampler":
        return self + (-_as_sampler(other))

    def __rsub__(self, other) -> "Sampler":
        return _as_sampler(other) + (-self)

    def __mul__(self, other) -> "Sampler":
        if np.isscalar(other):
            c = complex(other)
            if c == 0 or self.zero:
                return _ZERO_CACHE
            f = self
            derivs = {k: (lambda kk: (lambda: f.derivative(kk) * c))(k) for k in ("t", 0, 1, 2)}
            return _LazySampler(lambda x, t: c * f(x, t), derivs, f.static, f"{c}*{f.label}")
        other = _as_sampler(other)
        if self.zero or other.zero:
            return _ZERO_CACHE
        a, b = self, other
        derivs = {k: (lambda kk: (lambda: a.derivative(kk) * b + a * b.derivative(kk)))(k)
                  for k in ("t", 0, 1, 2)}
        return _LazySampler(lambda x, t: a(x, t) * b(x, t), derivs, a.static and b.static,
                            f"({a.label}*{b.label})")

    __rmul__ = __mul__

    def is_real(self, x, times, tol: float = 1e-12) -> bool:
        return all(np.abs(np.imag(self(x, t))).max(initial=0.0) <= tol for t in times)


class _LazySampler(Sampler):
    """Sampler whose derivative Samplers are built on first use (keeps algebra cheap)."""

    def __init__(self, fn, lazy: dict, static: bool, label: str):
        super().__init__(fn, static=static, label=label)
        self._lazy = lazy

    def derivative(self, axis) -> Sampler:
        if axis == "t" and self.static:
            return _ZERO_CACHE
        if axis not in self._derivs and axis in self._lazy:
            self._derivs[axis] = self._lazy[axis]()
        return super().derivative(axis)


_ZERO_CACHE = Sampler(lambda x, t: 0.0, static=True, zero=True, label="0")


def _as_sampler(v) -> Sampler:
    if isinstance(v, Sampler):
        return v
    if np.isscalar(v):
        return Sampler.const(v)
    raise TypeError(f"cannot interpret {type(v).__name__} as a sampler")


# ---------------------------------------------------------------------- analytic spec samplers


def _complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(float(v[0]), float(v[1]))
    return complex(v)


class _Factor:
    """One analytic factor of a product term. ``derivative(axis)`` returns a list of
    ``(coefficient, factor)`` pairs so products stay closed under differentiation."""

    def value(self, x, t):  # pragma: no cover - interface
        raise NotImplementedError

    def derivative(self, axis) -> list:
        raise NotImplementedError


class _XPow(_Factor):
    def __init__(self, axis, power):
        self.axis, self.power = axis, int(power)

    def value(self, x, t):
        return x[self.axis] ** self.power if self.power else 1.0

    def derivative(self, axis):
        if axis == "t" or axis != self.axis or self.power == 0:
            return []
        return [(float(self.power), _XPow(self.axis, self.power - 1))]


class _TPoly(_Factor):
    def __init__(self, coeffs):
        self.coeffs = [complex(_complex(c)) for c in coeffs]

    def value(self, x, t):
        return np.polynomial.polynomial.polyval(t, self.coeffs)

    def derivative(self, axis):
        if axis != "t" or len(self.coeffs) <= 1:
            return []
        return [(1.0, _TPoly([k * c for k, c in enumerate(self.coeffs)][1:]))]


class _Gauss(_Factor):
    """``exp(-|x - c|^2 / (2 w^2))`` times a polynomial factor (closed under differentiation)."""

    def __init__(self, center, width, poly=None):
        self.center = [float(c) for c in center]
        self.width = float(width)
        self.poly = poly or {}  # {axis: power} multiplying monomials in (x - c)

    def value(self, x, t):
        r2 = sum((x[d] - c) ** 2 for d, c in enumerate(self.center))
        v = np.exp(-0.5 * r2 / self.width**2)
        for d, p in self.poly.items():
            v = v * (x[d] - self.center[d]) ** p
        return v

    def derivative(self, axis):
        if axis == "t" or axis >= len(self.center):
            return []
        out = []
        p = self.poly.get(axis, 0)
        if p:
            q = dict(self.poly)
            q[axis] = p - 1
            out.append((float(p), _Gauss(self.center, self.width, q)))
        q = dict(self.poly)
        q[axis] = p + 1
        out.append((-1.0 / self.width**2, _Gauss(self.center, self.width, q)))
        return out


class _Trig(_Factor):
    """``cos`` (``mode`` 0) or ``sin`` (``mode`` 1) of ``k . x + omega t + phase``."""

    def __init__(self, k, omega, phase, mode):
        self.k = [float(v) for v in k]
        self.omega = float(omega)
        self.phase = float(phase)
        self.mode = mode

    def _arg(self, x, t):
        return sum(kk * x[d] for d, kk in enumerate(self.k)) + self.omega * t + self.phase

    def value(self, x, t):
        a = self._arg(x, t)
        return np.cos(a) if self.mode == 0 else np.sin(a)

    def derivative(self, axis):
        c = self.omega if axis == "t" else (self.k[axis] if axis < len(self.k) else 0.0)
        if c == 0:
            return []
        if self.mode == 0:
            return [(-c, _Trig(self.k, self.omega, self.phase, 1))]
        return [(c, _Trig(self.k, self.omega, self.phase, 0))]


class _Term:
    def __init__(self, amp: complex, factors: list):
        self.amp = amp
        self.factors = factors

    def value(self, x, t):
        v = self.amp
        for f in self.factors:
            v = v * f.value(x, t)
        return v

    def derivative(self, axis) -> list:
        out = []
        for i, f in enumerate(self.factors):
            for c, df in f.derivative(axis):
                out.append(_Term(self.amp * c, self.factors[:i] + [df] + self.factors[i + 1:]))
        return out


class _TermSum:
    def __init__(self, terms: list, static: bool):
        self.terms = terms
        self.static = static

    def __call__(self, x, t):
        shape = _shape_of(x, t)
        out = np.zeros(shape, dtype=complex)
        for term in self.terms:
            out = out + term.value(x, t)
        return out

    def sampler(self, label: str, depth: int = 0) -> Sampler:
        if not self.terms:
            return _ZERO_CACHE
        me = self
        lazy = {}
        for axis in ("t", 0, 1, 2):
            def make(ax=axis):
                d = [dt for term in me.terms for dt in term.derivative(ax)]
                return _TermSum(d, me.static).sampler(f"d{ax}({label})", depth + 1)
            lazy[axis] = make
        return _LazySampler(self, lazy, self.static, label)


def _factor_from_spec(spec: dict, n: int) -> _Factor:
    kind = spec.get("type")
    if kind == "xpow":
        axis = int(spec.get("axis", -1)) % n
        return _XPow(axis, spec["power"])
    if kind == "tpoly":
        return _TPoly(spec["coeffs"])
    if kind == "gauss":
        c = spec["center"]
        if len(c) != n:
            raise FieldError("gauss centre has the wrong dimension")
        return _Gauss(c, spec["width"])
    if kind in ("cos", "sin"):
        k = list(spec.get("k", [0.0] * n))
        if len(k) != n:
            raise FieldError("wavevector has the wrong dimension")
        return _Trig(k, spec.get("omega", 0.0), spec.get("phase", 0.0), 0 if kind == "cos" else 1)
    raise FieldError(f"unknown factor type {kind!r}")


def sampler_from_spec(spec, n: int, label: str = "field") -> Sampler:
    """Build an analytic sampler from a JSON-style description.

    Accepted forms: a number or ``[re, im]`` (constant); ``{"terms": [term, ...]}`` where each term is
    ``{"amplitude": a, "factors": [...]}`` and factors are ``xpow`` (``axis``, ``power``), ``tpoly``
    (``coeffs`` in ascending powers of ``t``), ``gauss`` (``center``, ``width``) and ``cos``/``sin``
    (``k``, ``omega``, ``phase``).
    """
    if spec is None:
        return Sampler.zeros()
    if isinstance(spec, (int, float, complex)) or (isinstance(spec, (list, tuple)) and len(spec) == 2
                                                   and all(isinstance(v, (int, float)) for v in spec)):
        return Sampler.const(_complex(spec))
    if not isinstance(spec, dict) or "terms" not in spec:
        raise FieldError(f"bad sampler spec for {label}: {spec!r}")
    terms = []
    static = True
    for t in spec["terms"]:
        factors = [_factor_from_spec(f, n) for f in t.get("factors", [])]
        for f in factors:
            if isinstance(f, _TPoly) and len(f.coeffs) > 1:
                static = False
            if isinstance(f, _Trig) and f.omega != 0:
                static = False
        terms.append(_Term(_complex(t.get("amplitude", 1.0)), factors))
    return _TermSum(terms, static).sampler(label)


# ------------------------------------------------------------------------------ potentials/gauge


@dataclass(frozen=True)
class PotentialSet:
    """Potentials ``A_0`` (scalar), ``A = (A_1, ..., A_n)`` and ``V``."""

    A0: Sampler
    A: tuple
    V: Sampler
    self_adjoint: bool = False

    @property
    def n(self) -> int:
        return len(self.A)

    def conj(self) -> "PotentialSet":
        return PotentialSet(self.A0.conj(), tuple(a.conj() for a in self.A), self.V.conj(), self.self_adjoint)

    def all(self) -> tuple:
        return (self.A0, *self.A, self.V)

    def validate(self, grid: Grid, times: Sequence[float]):
        if len(self.A) != grid.n:
            raise FieldError("number of vector potential components differs from the dimension")
        x = grid.mesh()
        for s in self.all():
            for t in times:
                if not np.all(np.isfinite(s(x, t))):
                    raise FieldError(f"{s.label} has non-finite samples")
        if self.self_adjoint:
            for s in self.all():
                if not s.is_real(x, times):
                    raise FieldError(f"self-adjoint flag set but {s.label} is complex")

    @staticmethod
    def zero(n: int) -> "PotentialSet":
        z = Sampler.zeros()
        return PotentialSet(z, (z,) * n, z, True)


@dataclass(frozen=True)
class GaugeFunction:
    """Gauge factor ``c = exp(i psi)`` (preferred) or a general nonvanishing ``c``."""

    psi: Sampler | None = None
    c: Sampler | None = None
    label: str = "gauge"

    def __post_init__(self):
        if (self.psi is None) == (self.c is None):
            raise FieldError("give exactly one of psi or c")

    def value(self, x, t):
        if self.psi is not None:
            return np.exp(1j * self.psi(x, t))
        return self.c(x, t)

    def log_derivative(self, axis) -> Sampler:
        """Sampler of ``-i c^{-1} dc`` along ``axis``."""
        if self.psi is not None:
            return self.psi.derivative(axis)
        c = self.c
        dc = c.derivative(axis)
        return Sampler(lambda x, t: -1j * dc(x, t) / c(x, t), static=c.static, label=f"dlog{axis}")

    def inverse(self) -> "GaugeFunction":
        if self.psi is not None:
            return GaugeFunction(psi=-self.psi, label=f"inv({self.label})")
        c = self.c
        return GaugeFunction(c=Sampler(lambda x, t: 1.0 / c(x, t), static=c.static), label=f"inv({self.label})")

    def __mul__(self, other: "GaugeFunction") -> "GaugeFunction":
        if self.psi is not None and other.psi is not None:
            return GaugeFunction(psi=self.psi + other.psi, label=f"{self.label}*{other.label}")
        a, b = self, other
        return GaugeFunction(c=Sampler(lambda x, t: a.value(x, t) * b.value(x, t)), label=f"{a.label}*{b.label}")

    def check(self, grid: Grid, times: Sequence[float], tol: float = 1e-12):
        x = grid.mesh()
        bottom = grid.boundary_patches["gamma0"]
        for t in times:
            v = self.value(x, t)
            if np.abs(v).min() < C_MIN:
                raise FieldError(f"|c| below {C_MIN} at t={t}")
            if np.abs(v[bottom] - 1.0).max() > tol:
                raise FieldError(f"gauge factor differs from 1 on Gamma_0 at t={t}")


def gauge_from_spec(spec: dict, n: int) -> GaugeFunction:
    """``{"psi": sampler spec}`` -> gauge ``exp(i psi)``."""
    if "psi" not in spec:
        raise FieldError("gauge spec requires a 'psi' entry")
    return GaugeFunction(psi=sampler_from_spec(spec["psi"], n, "psi"), label=spec.get("label", "gauge"))


def gauge_apply(p: PotentialSet, c: GaugeFunction, grid: Grid | None = None,
                times: Sequence[float] = ()) -> PotentialSet:
    """Potentials of ``c^{-1} L c``: ``A_0 - i c^{-1} c_t``, ``A_j - i c^{-1} c_{x_j}``, same ``V``.

    With ``grid`` the gauge-group conditions (``|c| >= C_MIN``, ``c = 1`` on ``Gamma_0``) are checked
    at ``times``.
    """
    if grid is not None:
        c.check(grid, times)
    A0 = p.A0 + c.log_derivative("t")
    A = tuple(a + c.log_derivative(j) for j, a in enumerate(p.A))
    return PotentialSet(A0, A, p.V, p.self_adjoint)


# --------------------------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class Coefficients:
    """Operator data: metric, potentials and the divergence weight (``original``: sqrt g, ``reduced``: 1)."""

    metric: MetricField
    potentials: PotentialSet
    form: str = "original"
    label: str = ""

    def __post_init__(self):
        if self.form not in ("original", "reduced"):
            raise FieldError("form must be 'original' or 'reduced'")
        if self.metric.n != self.potentials.n:
            raise FieldError("metric and potential dimensions differ")

    @property
    def n(self) -> int:
        return self.metric.n

    def weight(self, x) -> np.ndarray:
        if self.form == "original":
            return self.metric.sqrt_g(x)
        return np.ones(np.shape(x[0]))

    def conj(self) -> "Coefficients":
        return replace(self, potentials=self.potentials.conj(), label=f"conj({self.label})")

    def fingerprint(self, grid: Grid, times: Sequence[float]) -> str:
        """SHA-256 of the coefficients sampled on ``grid`` at ``times`` (content-based provenance)."""
        x = grid.mesh()
        hsh = hashlib.sha256()
        hsh.update(json.dumps({"form": self.form, "grid": grid.describe()}, sort_keys=True).encode())
        hsh.update(np.ascontiguousarray(np.round(self.metric.ginv(x), 12)).tobytes())
        for t in times:
            for s in self.potentials.all():
                hsh.update(np.ascontiguousarray(np.round(s(x, t), 12)).tobytes())
        return hsh.hexdigest()


class _InverseCache:
    """Memoises ``phi.inverse`` on the few coordinate arrays a solver evaluates repeatedly."""

    def __init__(self, phi: Diffeomorphism, size: int = 16):
        self.phi = phi
        self.size = size
        self.store: dict = {}

    def __call__(self, y):
        key = tuple((c.shape, hashlib.blake2b(np.ascontiguousarray(c).tobytes(), digest_size=16).digest())
                    for c in (np.asarray(v, float) for v in y))
        hit = self.store.get(key)
        if hit is None:
            x = self.phi.inverse(y)
            hit = (x, self.phi.jacobian(x))
            if len(self.store) >= self.size:
                self.store.pop(next(iter(self.store)))
            self.store[key] = hit
        return hit


def pullback_coefficients(coeffs: Coefficients, phi: Diffeomorphism, grid: Grid | None = None) -> Coefficients:
    """Coefficients of the same operator written in ``y = phi(x)``.

    Scalars are composed with ``x(y)``; the vector potential transforms as a covector,
    ``A^{(0)}(y) = J^{-T} A(x(y))`` with ``J = dy/dx``. The metric becomes ``J g J^T``.
    """
    from .geometry import pullback_metric

    if coeffs.form != "original":
        raise FieldError("pullback is defined for the original (sqrt g weighted) form")
    inv = _InverseCache(phi)
    p = coeffs.potentials
    n = coeffs.n

    def scalar(s: Sampler) -> Sampler:
        if s.zero:
            return s
        return Sampler(lambda y, t: s(inv(y)[0], t), static=s.static, label=f"pb({s.label})")

    def covector(k: int) -> Sampler:
        if all(a.zero for a in p.A):
            return Sampler.zeros()

        def fn(y, t):
            x, J = inv(y)
            Jinv = np.linalg.inv(J)
            return sum(Jinv[..., j, k] * p.A[j](x, t) for j in range(n))

        return Sampler(fn, static=all(a.static for a in p.A), label=f"pbA{k}")

    pot = PotentialSet(scalar(p.A0), tuple(covector(k) for k in range(n)), scalar(p.V), p.self_adjoint)
    return Coefficients(pullback_metric(coeffs.metric, phi, grid), pot, "original", f"pullback({coeffs.label})")


# ----------------------------------------------------------------------------- reduction chain


def sqrtg_connection_at(metric: MetricField, x) -> np.ndarray:
    """Pointwise ``A'_j = -i d_j ghat / (4 ghat)`` from the metric gradient, shape ``(..., n)``."""
    G = metric.ginv(x)
    dG = metric.grad(x)
    # d_j log ghat = -d_j log det(G) = -tr(G^{-1} d_j G)
    dlog = -np.einsum("...ab,...bad->...d", np.linalg.inv(G), dG)
    return -0.25j * dlog


def sqrtg_connection(metric: MetricField, grid: Grid) -> np.ndarray:
    """``A'_j`` on the nodes of ``grid`` by centred differences of ``ghat`` (one-sided at edges).

    Returns an array of shape ``grid.shape + (n,)``.
    """
    g = metric.on(grid).g_det
    out = np.empty(grid.shape + (grid.n,), dtype=complex)
    for d in range(grid.n):
        dg = np.gradient(g, grid.h[d], axis=d, edge_order=2)
        out[..., d] = -0.25j * dg / g
    return out


def _connection_correction(metric: MetricField, fd: float = 1e-3) -> Callable:
    """``W(x) = sum_{j,k} [ i d_j (ghat^{jk} A'_k) - ghat^{jk} A'_j A'_k ]`` as a pointwise function."""
    n = metric.n

    def flux(x, j):
        G = metric.ginv(x)
        Ap = sqrtg_connection_at(metric, x)
        return np.einsum("...k,...k->...", G[..., j, :], Ap)

    def W(x):
        x = tuple(np.asarray(c, float) for c in x)
        G = metric.ginv(x)
        Ap = sqrtg_connection_at(metric, x)
        out = -np.einsum("...j,...jk,...k->...", Ap, G, Ap)
        for j in range(n):
            def sh(k):
                xs = list(x)
                xs[j] = x[j] + k * fd
                return flux(xs, j)
            out = out + 1j * (8 * (sh(1) - sh(-1)) - (sh(2) - sh(-2))) / (12 * fd)
        return out

    return W


def reduced_potential(metric: MetricField, p: PotentialSet) -> Sampler:
    """``V1 = V + sum_{j,k} [ i d_j (ghat^{jk} A'_k) - ghat^{jk} A'_j A'_k ]``.

    This is the zeroth-order coefficient left over when the ``sqrt(ghat)``-weighted operator is
    rewritten in unweighted form and conjugated by ``ghat^{1/4}``; the quadratic term enters with a
    minus sign (checked by direct operator application in the test suite).
    """
    W = _connection_correction(metric)
    if metric.name == "flat":
        return p.V
    corr = Sampler(lambda x, t: W(x), static=True, label="W")
    return p.V + corr


class _NullGaugePhase:
    """``psi(y, t) = int_0^{y_n} F(y', sigma, t + y_n - sigma) dsigma`` with ``F = A_0 - A_n``.

    Composite Gauss-Legendre quadrature (``order`` nodes per panel of length <= ``panel``).
    Derivatives are integrals of differentiated integrands (``d_n I(G) = G + I(G_t)``), so
    ``psi_t - psi_{y_n} = -F`` holds to quadrature accuracy.
    """

    def __init__(self, F: Sampler, n: int, T0: float | None, order: int = 8, panel: float = 0.5):
        self.F = F
        self.n = n
        self.T0 = T0
        self.xi, self.wq = np.polynomial.legendre.leggauss(order)
        self.panel = panel

    def _nodes(self, yn: np.ndarray):
        m = max(1, int(np.ceil(float(np.max(np.abs(yn), initial=0.0)) / self.panel)))
        k = np.arange(m)[:, None]
        loc = (k + 0.5 * (self.xi[None, :] + 1.0)) / m  # (m, q) in [0, 1]
        w = np.broadcast_to(0.5 * self.wq[None, :] / m, loc.shape)
        return loc.ravel(), w.ravel()

    def _check(self, x, t):
        if self.T0 is None:
            return
        top = np.asarray(t + x[-1])
        if top.size and top.max() > self.T0 + 1e-12:
            i = np.unravel_index(int(np.argmax(top)), top.shape)
            pt = tuple(float(np.broadcast_to(c, top.shape)[i]) for c in x)
            tt = float(np.broadcast_to(t, top.shape)[i])
            raise WindowError(f"characteristic through y={pt}, t={tt} leaves the window [0, {self.T0}]")

    def integral(self, G: Sampler, x, t):
        shape = _shape_of(x, t)
        x = tuple(np.broadcast_to(c, shape) for c in x)
        t = np.broadcast_to(t, shape)
        self._check(x, t)
        yn = x[-1]
        loc, w = self._nodes(yn)
        sig = yn[..., None] * loc
        pts = tuple(np.broadcast_to(c[..., None], sig.shape) for c in x[:-1]) + (sig,)
        vals = G(pts, t[..., None] + yn[..., None] - sig)
        return yn * np.sum(vals * w, axis=-1)

    def isampler(self, G: Sampler, label: str = "psi_null") -> Sampler:
        """Sampler of ``I(G)`` with lazily built derivative samplers."""
        if G.zero:
            return Sampler.zeros()
        me = self
        n = self.n

        def fn(x, t):
            return me.integral(G, x, t)

        lazy = {"t": lambda: me.isampler(G.derivative("t"), f"d_t {label}"),
                n - 1: lambda: G + me.isampler(G.derivative("t"), f"d_n {label}")}
        for j in range(n - 1):
            lazy[j] = (lambda jj: (lambda: me.isampler(G.derivative(jj), f"d_{jj} {label}")))(j)
        return _LazySampler(fn, lazy, False, label)

    def sampler(self) -> Sampler:
        return self.isampler(self.F)


def null_gauge(A0: Sampler, An: Sampler, n: int, T0: float | None = None, probe_grid: Grid | None = None) -> Sampler:
    """Phase ``psi`` with ``psi_t - psi_{y_n} = A_n - A_0`` and ``psi = 0`` on ``y_n = 0``.

    Integrates along the characteristics ``t + y_n = const`` from the boundary face. When the two
    potentials coincide (on ``probe_grid`` samples, if given) the zero sampler is returned.
    """
    F = A0 - An
    if F.zero:
        return Sampler.zeros()
    if probe_grid is not None:
        x = probe_grid.mesh()
        ts = np.linspace(0.0, T0 if T0 else 1.0, 7)
        if all(np.abs(F(x, t)).max() == 0 for t in ts):
            return Sampler.zeros()
    return _NullGaugePhase(F, n, T0).sampler()


@dataclass(frozen=True)
class ReducedCoefficients:
    """Coefficients of the boundary-layer operator ``L_1`` in null gauge.

    ``alpha`` is the common value ``A_0^{(1)} = A_n^{(1)}``; ``A_tan`` holds ``A_j^{(1)}`` for ``j < n``.
    """

    metric: MetricField
    alpha: Sampler
    A_tan: tuple
    V1: Sampler
    V2: Sampler
    psi: Sampler
    self_adjoint: bool = False
    T0: float | None = None

    @property
    def n(self) -> int:
        return self.metric.n

    def coefficients(self) -> Coefficients:
        pot = PotentialSet(self.alpha, (*self.A_tan, self.alpha), self.V1, self.self_adjoint)
        return Coefficients(self.metric, pot, "reduced", "L1")

    def conj(self) -> "ReducedCoefficients":
        return ReducedCoefficients(self.metric, self.alpha.conj(), tuple(a.conj() for a in self.A_tan),
                                   self.V1.conj(), self.V2.conj(), self.psi.conj(), self.self_adjoint, self.T0)

    def A_prime(self, x) -> np.ndarray:
        return sqrtg_connection_at(self.metric, x)

    def tangential_ginv(self, x) -> np.ndarray:
        n = self.n
        return self.metric.ginv(x)[..., : n - 1, : n - 1]


def reduce_operator(metric: MetricField, p: PotentialSet, T0: float | None = None,
                    grid: Grid | None = None, tol: float = 1e-8) -> ReducedCoefficients:
    """Reduce an operator given in boundary-normal coordinates to null-gauge form ``L_1``.

    Steps: ``V1`` from the ``ghat^{1/4}`` conjugation; ``psi`` from :func:`null_gauge`; the gauge
    ``exp(i psi)`` applied to all potentials; ``V2 = V1 + 2 i d_s alpha`` with ``d_s = (d_t - d_{y_n})/2``.
    ``grid`` (if given) is used to check the semi-geodesic form of ``metric``.
    """
    n = metric.n
    if grid is not None:
        res = verify_semigeodesic(metric, grid)
        if res > tol:
            raise FieldError(f"metric is not in semi-geodesic form (residual {res:.3e})")
    V1 = reduced_potential(metric, p)
    psi = null_gauge(p.A0, p.A[-1], n, T0, grid)
    alpha = p.A[-1] + psi.derivative(n - 1)
    A_tan = tuple(p.A[j] + psi.derivative(j) for j in range(n - 1))
    ds_alpha = (alpha.derivative("t") - alpha.derivative(n - 1)) * 0.5
    V2 = V1 + ds_alpha * 2j
    return ReducedCoefficients(metric, alpha, A_tan, V1, V2, psi, p.self_adjoint, T0)


def direct_reduced(metric: MetricField, alpha: Sampler, A_tan: Sequence[Sampler] = (), V1: Sampler | None = None,
                   self_adjoint: bool = False) -> ReducedCoefficients:
    """Reduced coefficients given directly in null gauge (``A_0 = A_n = alpha``); ``psi = 0``."""
    n = metric.n
    if len(A_tan) != n - 1:
        raise FieldError("need one tangential potential per tangential axis")
    V1 = Sampler.zeros() if V1 is None else V1
    ds_alpha = (alpha.derivative("t") - alpha.derivative(n - 1)) * 0.5
    return ReducedCoefficients(metric, alpha, tuple(A_tan), V1, V1 + ds_alpha * 2j, Sampler.zeros(), self_adjoint)


# ------------------------------------------------------------------------- pointwise operator


def apply_operator(coeffs: Coefficients, u: Callable, x, t, h: float = 2e-3) -> np.ndarray:
    """Continuum ``L u`` at points ``(x, t)`` for a callable ``u(x, t)`` by nested central differences.

    Intended as an independent oracle for discretisations and reductions (fourth-order stencils).
    """
    x = tuple(np.asarray(c, float) for c in x)
    p = coeffs.potentials
    n = coeffs.n

    def d(f, axis):
        def g(xx, tt):
            def sh(k):
                if axis == "t":
                    return f(xx, tt + k * h)
                xs = list(xx)
                xs[axis] = xx[axis] + k * h
                return f(tuple(xs), tt)
            return (8 * (sh(1) - sh(-1)) - (sh(2) - sh(-2))) / (12 * h)
        return g

    def D(f, j):
        dj = d(f, j)
        return lambda xx, tt: -1j * dj(xx, tt) + p.A[j](xx, tt) * f(xx, tt)

    Dk = [D(u, k) for k in range(n)]

    def flux(j):
        def F(xx, tt):
            G = coeffs.metric.ginv(xx)
            w = coeffs.weight(xx)
            return w * sum(G[..., j, k] * Dk[k](xx, tt) for k in range(n))
        return F

    spatial = 0
    w = coeffs.weight(x)
    for j in range(n):
        Fj = flux(j)
        spatial = spatial + (-1j * d(Fj, j)(x, t) + p.A[j](x, t) * Fj(x, t)) / w

    def D0(f):
        dt_ = d(f, "t")
        return lambda xx, tt: -1j * dt_(xx, tt) + p.A0(xx, tt) * f(xx, tt)

    time_part = D0(D0(u))(x, t)
    return time_part - spatial - p.V(x, t) * u(x, t)
