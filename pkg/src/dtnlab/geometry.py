"""Grids, inverse metrics, diffeomorphisms, boundary distance and the boundary-normal chart.

Conventions
-----------
Points are tuples of coordinate arrays ``x = (x_1, ..., x_n)`` that broadcast against each other.
The last axis is the boundary-normal one: the measured face ``Gamma_0`` is the bottom face
``x_n = origin_n`` of an axis-aligned box. Matrix-valued grid functions carry their two tensor
indices last, ``ginv(x)[..., j, k] = g^{jk}(x)``; gradients carry the derivative index last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

__all__ = [
    "Grid",
    "MetricField",
    "SampledMetric",
    "Diffeomorphism",
    "SemigeodesicChart",
    "GeometryError",
    "CausticError",
    "pullback_metric",
    "boundary_distance",
    "semigeodesic_chart",
    "verify_semigeodesic",
    "flat_metric",
    "constant_metric",
    "conformal_metric",
    "tangential_metric",
    "identity_map",
    "scaling_map",
    "rotation_map",
    "bump_map",
    "compose",
    "METRIC_PRESETS",
    "DIFFEO_PRESETS",
]

Point = tuple  # tuple of broadcastable coordinate arrays


class GeometryError(ValueError):
    """Invalid geometric input (non-SPD metric, singular Jacobian, disconnected grid, ...)."""


class CausticError(GeometryError):
    """Boundary-normal geodesics focus before the requested depth."""

    def __init__(self, message: str, max_depth: float):
        super().__init__(message)
        self.max_depth = max_depth


def _as_point(x: Sequence) -> Point:
    arrs = tuple(np.asarray(c, dtype=float) for c in x)
    return tuple(np.broadcast_arrays(*arrs)) if len(arrs) > 1 else arrs


# --------------------------------------------------------------------------------------- grids


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on ``prod_d [origin_d, origin_d + lengths_d]``.

    ``cells[d]`` is the number of intervals on axis ``d``; node counts are ``cells + 1``.
    ``gamma`` optionally restricts the sub-patch ``Gamma`` of the bottom face (tangential
    interval, only meaningful for ``n = 2``).
    """

    lengths: tuple[float, ...]
    cells: tuple[int, ...]
    origin: tuple[float, ...] | None = None
    gamma: tuple[float, float] | None = None

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        cells = tuple(int(v) for v in self.cells)
        if len(lengths) != len(cells) or len(lengths) not in (1, 2):
            raise GeometryError("grid dimension must be 1 or 2 with matching lengths/cells")
        if any(v <= 0 for v in lengths):
            raise GeometryError("grid spacing must be positive on every axis")
        if any(c < 2 for c in cells):
            raise GeometryError("at least 3 nodes per axis are required")
        origin = tuple(float(v) for v in (self.origin or (0.0,) * len(lengths)))
        if len(origin) != len(lengths):
            raise GeometryError("origin has the wrong dimension")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", origin)
        if self.gamma is not None:
            a, b = (float(v) for v in self.gamma)
            if not a < b:
                raise GeometryError("patch Gamma must be a nonempty interval")
            object.__setattr__(self, "gamma", (a, b))

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(L / c for L, c in zip(self.lengths, self.cells))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cells)

    def axes(self) -> list[np.ndarray]:
        return [o + h * np.arange(c + 1) for o, h, c in zip(self.origin, self.h, self.cells)]

    def mesh(self) -> Point:
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def face_mesh(self, axis: int) -> Point:
        """Coordinates of the face midpoints normal to ``axis``."""
        ax = self.axes()
        ax[axis] = 0.5 * (ax[axis][1:] + ax[axis][:-1])
        return tuple(np.meshgrid(*ax, indexing="ij"))

    def bottom_axis(self) -> np.ndarray | None:
        """Tangential node coordinates of the bottom face (``None`` when ``n = 1``)."""
        return self.axes()[0] if self.n == 2 else None

    @property
    def boundary_patches(self) -> dict[str, np.ndarray]:
        shape = self.shape
        bnd = np.zeros(shape, dtype=bool)
        for d in range(self.n):
            idx = [slice(None)] * self.n
            idx[d] = 0
            bnd[tuple(idx)] = True
            idx[d] = -1
            bnd[tuple(idx)] = True
        g0 = np.zeros(shape, dtype=bool)
        g0[(Ellipsis, 0)] = True
        patches = {"boundary": bnd, "gamma0": g0}
        if self.gamma is not None and self.n == 2:
            x = self.axes()[0]
            g = np.zeros(shape, dtype=bool)
            g[:, 0] = (x >= self.gamma[0] - 1e-12) & (x <= self.gamma[1] + 1e-12)
            patches["gamma"] = g
        return patches

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.lengths, tuple(c * factor for c in self.cells), self.origin, self.gamma)

    def describe(self) -> dict:
        return {"lengths": list(self.lengths), "cells": list(self.cells), "origin": list(self.origin),
                "gamma": list(self.gamma) if self.gamma else None}


# ------------------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class SampledMetric:
    """Inverse metric sampled on the nodes of ``grid`` together with ``g = det(g^{jk})^{-1}``."""

    grid: Grid
    ginv: np.ndarray
    g_det: np.ndarray
    sqrt_g: np.ndarray

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.ginv).min())


class MetricField:
    """Smooth inverse metric ``g^{jk}(x)`` given by a callable.

    Parameters
    ----------
    n:
        Space dimension.
    ginv:
        ``ginv(x) -> array (..., n, n)``.
    grad:
        Optional analytic gradient ``grad(x) -> (..., n, n, n)`` (derivative index last).
        Fourth-order central differences are used when omitted.
    """

    def __init__(self, n: int, ginv: Callable[[Point], np.ndarray], grad: Callable | None = None,
                 name: str = "custom", params: dict | None = None, fd_step: float = 1e-4):
        self.n = int(n)
        self._ginv = ginv
        self._grad = grad
        self.name = name
        self.params = dict(params or {})
        self.fd_step = fd_step

    def __repr__(self) -> str:
        return f"MetricField({self.name}, n={self.n}, params={self.params})"

    def ginv(self, x: Sequence) -> np.ndarray:
        x = _as_point(x)
        out = np.asarray(self._ginv(x), dtype=float)
        return np.broadcast_to(out, x[0].shape + (self.n, self.n))

    __call__ = ginv

    def grad(self, x: Sequence) -> np.ndarray:
        x = _as_point(x)
        if self._grad is not None:
            return np.broadcast_to(np.asarray(self._grad(x), dtype=float), x[0].shape + (self.n,) * 3)
        h = self.fd_step
        out = np.empty(x[0].shape + (self.n,) * 3)
        for d in range(self.n):
            def shifted(k):
                xs = list(x)
                xs[d] = x[d] + k * h
                return self.ginv(xs)
            out[..., d] = (8 * (shifted(1) - shifted(-1)) - (shifted(2) - shifted(-2))) / (12 * h)
        return out

    def g_det(self, x: Sequence) -> np.ndarray:
        return 1.0 / np.linalg.det(self.ginv(x))

    def sqrt_g(self, x: Sequence) -> np.ndarray:
        return np.sqrt(self.g_det(x))

    def lower(self, x: Sequence) -> np.ndarray:
        return np.linalg.inv(self.ginv(x))

    def on(self, grid: Grid) -> SampledMetric:
        if grid.n != self.n:
            raise GeometryError("metric and grid dimensions differ")
        G = np.ascontiguousarray(self.ginv(grid.mesh()))
        if not np.all(np.isfinite(G)):
            raise GeometryError("metric has non-finite samples")
        if np.abs(G - np.swapaxes(G, -1, -2)).max() > 1e-12 * max(1.0, np.abs(G).max()):
            raise GeometryError("metric is not symmetric")
        lam = np.linalg.eigvalsh(G).min(axis=-1)
        if lam.min() <= 0:
            bad = np.unravel_index(int(np.argmin(lam)), lam.shape)
            raise GeometryError(f"metric not positive definite at node {tuple(int(i) for i in bad)}")
        gd = 1.0 / np.linalg.det(G)
        return SampledMetric(grid, G, gd, np.sqrt(gd))

    def describe(self) -> dict:
        return {"name": self.name, "params": self.params}


def flat_metric(n: int) -> MetricField:
    eye = np.eye(n)
    return MetricField(n, lambda x: eye, lambda x: np.zeros((n, n, n)), "flat", {})


def constant_metric(matrix) -> MetricField:
    M = np.array(matrix, dtype=float)
    n = M.shape[0]
    return MetricField(n, lambda x: M, lambda x: np.zeros((n, n, n)), "constant", {"matrix": M.tolist()})


def _gauss_bump(x: Point, center, width):
    r2 = sum((xi - ci) ** 2 for xi, ci in zip(x, center))
    return np.exp(-0.5 * r2 / width**2)


def conformal_metric(n: int, amplitude: float = 0.2, center=None, width: float = 0.25) -> MetricField:
    """``g^{jk} = c(x)^2 delta^{jk}`` with ``c = 1 + amplitude * exp(-|x - center|^2 / (2 width^2))``."""
    center = tuple(float(v) for v in (center if center is not None else (0.5,) * n))
    eye = np.eye(n)

    def c_and_grad(x):
        e = _gauss_bump(x, center, width)
        c = 1.0 + amplitude * e
        dc = [-amplitude * e * (xi - ci) / width**2 for xi, ci in zip(x, center)]
        return c, dc

    def ginv(x):
        c, _ = c_and_grad(x)
        return (c**2)[..., None, None] * eye

    def grad(x):
        c, dc = c_and_grad(x)
        out = np.zeros(c.shape + (n, n, n))
        for d in range(n):
            out[..., d] = (2 * c * dc[d])[..., None, None] * eye
        return out

    return MetricField(n, ginv, grad, "conformal",
                       {"amplitude": amplitude, "center": list(center), "width": width})


def tangential_metric(amplitude: float = 0.2, center=(0.0, 0.0), width: float = 0.3) -> MetricField:
    """Semi-geodesic 2D metric ``diag(G(x), 1)`` with ``G = 1 + amplitude * gaussian bump``."""
    center = tuple(float(v) for v in center)

    def ginv(x):
        G = 1.0 + amplitude * _gauss_bump(x, center, width)
        out = np.zeros(G.shape + (2, 2))
        out[..., 0, 0] = G
        out[..., 1, 1] = 1.0
        return out

    def grad(x):
        e = amplitude * _gauss_bump(x, center, width)
        out = np.zeros(e.shape + (2, 2, 2))
        for d in range(2):
            out[..., 0, 0, d] = -e * (x[d] - center[d]) / width**2
        return out

    return MetricField(2, ginv, grad, "tangential", {"amplitude": amplitude, "center": list(center), "width": width})


METRIC_PRESETS: dict[str, Callable[..., MetricField]] = {
    "flat": lambda n, **kw: flat_metric(n),
    "constant": lambda n, matrix: constant_metric(matrix),
    "conformal": lambda n, **kw: conformal_metric(n, **kw),
    "tangential": lambda n, **kw: tangential_metric(**kw),
}


# ------------------------------------------------------------------------------ diffeomorphisms


class Diffeomorphism:
    """Smooth invertible map ``y = y(x)`` with Jacobian ``J = dy/dx`` (``J[..., i, j] = dy_i/dx_j``).

    When no inverse is supplied it is computed by damped Newton iteration from ``x = y``.
    """

    def __init__(self, n: int, forward: Callable, jacobian: Callable, inverse: Callable | None = None,
                 name: str = "custom", params: dict | None = None):
        self.n = n
        self._forward = forward
        self._jacobian = jacobian
        self._inverse = inverse
        self.name = name
        self.params = dict(params or {})

    def __repr__(self) -> str:
        return f"Diffeomorphism({self.name}, params={self.params})"

    def forward(self, x: Sequence) -> Point:
        x = _as_point(x)
        return tuple(np.broadcast_to(np.asarray(c, float), x[0].shape) for c in self._forward(x))

    def jacobian(self, x: Sequence) -> np.ndarray:
        x = _as_point(x)
        return np.broadcast_to(np.asarray(self._jacobian(x), float), x[0].shape + (self.n, self.n))

    def inverse(self, y: Sequence, tol: float = 1e-13, maxiter: int = 60) -> Point:
        y = _as_point(y)
        if self._inverse is not None:
            return tuple(np.broadcast_to(np.asarray(c, float), y[0].shape) for c in self._inverse(y))
        x = [c.copy() for c in y]
        Y = np.stack(y, axis=-1)
        for _ in range(maxiter):
            r = np.stack(self.forward(x), axis=-1) - Y
            if np.abs(r).max() <= tol * (1.0 + np.abs(Y).max()):
                break
            dx = np.linalg.solve(self.jacobian(x), r[..., None])[..., 0]
            x = [x[d] - dx[..., d] for d in range(self.n)]
        else:
            raise GeometryError("Newton inversion of the diffeomorphism did not converge")
        return tuple(x)


def identity_map(n: int) -> Diffeomorphism:
    return Diffeomorphism(n, lambda x: x, lambda x: np.eye(n), lambda y: y, "identity", {})


def scaling_map(n: int, factor: float) -> Diffeomorphism:
    a = float(factor)
    return Diffeomorphism(n, lambda x: tuple(a * c for c in x), lambda x: a * np.eye(n),
                          lambda y: tuple(c / a for c in y), "scaling", {"factor": a})


def rotation_map(theta: float, center=(0.0, 0.0)) -> Diffeomorphism:
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    cx, cy = center

    def fwd(x):
        u, v = x[0] - cx, x[1] - cy
        return (cx + c * u - s * v, cy + s * u + c * v)

    def inv(y):
        u, v = y[0] - cx, y[1] - cy
        return (cx + c * u + s * v, cy - s * u + c * v)

    return Diffeomorphism(2, fwd, lambda x: R, inv, "rotation", {"theta": theta, "center": list(center)})


def bump_map(lengths, eps=(0.08, 0.06), origin=(0.0, 0.0)) -> Diffeomorphism:
    """Box-preserving map ``y = x + eps * sin(pi xi_1) sin(pi xi_2)`` with ``xi`` the normalised
    coordinates. It is the identity on the whole boundary of the box (in particular on ``Gamma_0``)."""
    L = tuple(float(v) for v in lengths)
    o = tuple(float(v) for v in origin)
    e = tuple(float(v) for v in eps)

    def parts(x):
        a = np.pi * (x[0] - o[0]) / L[0]
        b = np.pi * (x[1] - o[1]) / L[1]
        return np.sin(a), np.cos(a), np.sin(b), np.cos(b)

    def fwd(x):
        sa, _, sb, _ = parts(x)
        return (x[0] + e[0] * sa * sb, x[1] + e[1] * sa * sb)

    def jac(x):
        sa, ca, sb, cb = parts(x)
        J = np.zeros(np.shape(sa) + (2, 2))
        J[..., 0, 0] = 1 + e[0] * np.pi / L[0] * ca * sb
        J[..., 0, 1] = e[0] * np.pi / L[1] * sa * cb
        J[..., 1, 0] = e[1] * np.pi / L[0] * ca * sb
        J[..., 1, 1] = 1 + e[1] * np.pi / L[1] * sa * cb
        return J

    return Diffeomorphism(2, fwd, jac, None, "bump", {"lengths": list(L), "eps": list(e), "origin": list(o)})


def compose(phi2: Diffeomorphism, phi1: Diffeomorphism) -> Diffeomorphism:
    """``phi2 o phi1``."""
    return Diffeomorphism(
        phi1.n,
        lambda x: phi2.forward(phi1.forward(x)),
        lambda x: phi2.jacobian(phi1.forward(x)) @ phi1.jacobian(x),
        lambda y: phi1.inverse(phi2.inverse(y)),
        f"{phi2.name}o{phi1.name}",
        {"outer": phi2.params, "inner": phi1.params},
    )


DIFFEO_PRESETS: dict[str, Callable[..., Diffeomorphism]] = {
    "identity": lambda n, **kw: identity_map(n),
    "scaling": lambda n, factor: scaling_map(n, factor),
    "rotation": lambda n, **kw: rotation_map(**kw),
    "bump": lambda n, **kw: bump_map(**kw),
}


def _check_jacobian(phi: Diffeomorphism, x: Point, tol: float = 1e-10):
    det = np.linalg.det(phi.jacobian(x))
    bad = np.abs(det) <= tol
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad))
        raise GeometryError(f"singular Jacobian at node {idx}")
    return det


def pullback_metric(metric: MetricField, phi: Diffeomorphism, grid: Grid | None = None) -> MetricField:
    """Metric in the coordinates ``y = phi(x)``: ``g0^{jk}(y) = (J g J^T)(x(y))``.

    When ``grid`` (the image grid in ``y``) is given, the Jacobian is checked at every node.
    """
    if metric.n != phi.n:
        raise GeometryError("dimension mismatch")
    if grid is not None:
        _check_jacobian(phi, phi.inverse(grid.mesh()))

    def ginv(y):
        x = phi.inverse(y)
        J = phi.jacobian(x)
        return J @ metric.ginv(x) @ np.swapaxes(J, -1, -2)

    return MetricField(metric.n, ginv, None, f"pullback({metric.name})",
                       {"metric": metric.describe(), "map": {"name": phi.name, "params": phi.params}})


# ---------------------------------------------------------------------------- boundary distance


def boundary_distance(metric: MetricField, grid: Grid, patch: str = "gamma0") -> tuple[np.ndarray, float]:
    """Graph-geodesic distance to a boundary patch and its maximum ``T*``.

    Edges join each node to its 8 neighbours (2 in 1D); an edge of displacement ``dx`` costs
    ``sqrt(dx^T G dx)`` with the lower metric ``G`` averaged over the two end nodes.
    """
    mask = grid.boundary_patches.get(patch)
    if mask is None or not mask.any():
        raise GeometryError(f"patch {patch!r} is empty or unknown")
    shape = grid.shape
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    Glow = np.linalg.inv(metric.on(grid).ginv)
    h = np.array(grid.h)
    offsets = [(1,)] if grid.n == 1 else [(1, 0), (0, 1), (1, 1), (1, -1)]
    rows, cols, wts = [], [], []
    for off in offsets:
        src = [slice(None)] * grid.n
        dst = [slice(None)] * grid.n
        for d, o in enumerate(off):
            if o > 0:
                src[d], dst[d] = slice(0, -o), slice(o, None)
            elif o < 0:
                src[d], dst[d] = slice(-o, None), slice(0, o)
        src, dst = tuple(src), tuple(dst)
        dx = np.array(off, dtype=float) * h
        Gm = 0.5 * (Glow[src] + Glow[dst])
        w = np.sqrt(np.einsum("...i,...ij,...j->...", np.broadcast_to(dx, Gm.shape[:-1]), Gm,
                              np.broadcast_to(dx, Gm.shape[:-1])))
        rows.append(idx[src].ravel())
        cols.append(idx[dst].ravel())
        wts.append(w.ravel())
    r, c, w = (np.concatenate(v) for v in (rows, cols, wts))
    A = coo_matrix((np.r_[w, w], (np.r_[r, c], np.r_[c, r])), shape=(N, N)).tocsr()
    dist = dijkstra(A, directed=False, indices=idx[mask], min_only=True)
    if not np.all(np.isfinite(dist)):
        raise GeometryError("grid graph is disconnected from the patch")
    d = dist.reshape(shape)
    return d, float(d.max())


# ------------------------------------------------------------------------- semi-geodesic chart


class SemigeodesicChart(Diffeomorphism):
    """Boundary-normal coordinates ``y = (y', y_n)`` of a metric near the bottom face.

    ``inverse(y)`` follows the unit-speed geodesic leaving ``(y', 0)`` in the inward co-normal
    direction for arclength ``y_n`` (Hamiltonian form ``x' = G xi``, ``xi' = -1/2 dG xi xi``,
    classical RK4 with step at most ``step``). ``forward`` inverts it by Newton iteration.
    """

    def __init__(self, metric: MetricField, base: float, step: float, fd: float = 1e-6):
        self.metric = metric
        self.base = float(base)
        self.step = float(step)
        self.fd = fd
        super().__init__(metric.n, self._fwd, self._jac, self._inv, "semigeodesic",
                         {"metric": metric.describe(), "step": step})

    # state layout: (..., 2n) = (x, xi)
    def _rhs(self, z):
        n = self.n
        x = tuple(z[..., d] for d in range(n))
        xi = z[..., n:]
        G = self.metric.ginv(x)
        dG = self.metric.grad(x)
        dx = np.einsum("...jk,...k->...j", G, xi)
        dxi = -0.5 * np.einsum("...ijd,...i,...j->...d", dG, xi, xi)
        return np.concatenate([dx, dxi], axis=-1)

    def _shoot(self, tang: np.ndarray | None, depth: np.ndarray) -> np.ndarray:
        n = self.n
        depth = np.asarray(depth, float)
        shape = depth.shape
        z = np.zeros(shape + (2 * n,))
        if n == 2:
            z[..., 0] = tang
        z[..., n - 1] = self.base
        x0 = tuple(z[..., d] for d in range(n))
        gnn = self.metric.ginv(x0)[..., n - 1, n - 1]
        z[..., 2 * n - 1] = 1.0 / np.sqrt(gnn)
        m = max(1, int(np.ceil(float(np.abs(depth).max(initial=0.0)) / self.step)))
        ds = (depth / m)[..., None]
        for _ in range(m):
            k1 = self._rhs(z)
            k2 = self._rhs(z + 0.5 * ds * k1)
            k3 = self._rhs(z + 0.5 * ds * k2)
            k4 = self._rhs(z + ds * k3)
            z = z + ds * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return z

    def _inv(self, y):
        z = self._shoot(y[0] if self.n == 2 else None, y[-1])
        return tuple(z[..., d] for d in range(self.n))

    def inverse_jacobian(self, y: Sequence) -> np.ndarray:
        """``dx/dy`` at ``y``."""
        y = _as_point(y)
        n = self.n
        z = self._shoot(y[0] if n == 2 else None, y[-1])
        J = np.zeros(y[0].shape + (n, n))
        vel = self._rhs(z)[..., :n]
        J[..., :, n - 1] = vel
        if n == 2:
            zp = self._shoot(y[0] + self.fd, y[-1])
            zm = self._shoot(y[0] - self.fd, y[-1])
            J[..., :, 0] = (zp[..., :n] - zm[..., :n]) / (2 * self.fd)
        return J

    def _jac(self, x):
        y = self.forward(x)
        return np.linalg.inv(self.inverse_jacobian(y))

    def _fwd(self, x):
        # Newton on inverse(y) = x; start from y = (x', x_n - base)
        x = _as_point(x)
        n = self.n
        y = [x[d].copy() for d in range(n)]
        y[-1] = x[-1] - self.base
        X = np.stack(x, axis=-1)
        for _ in range(50):
            r = np.stack(self._inv(tuple(y)), axis=-1) - X
            if np.abs(r).max() < 1e-12:
                break
            dy = np.linalg.solve(self.inverse_jacobian(tuple(y)), r[..., None])[..., 0]
            y = [y[d] - dy[..., d] for d in range(n)]
        else:
            raise GeometryError("semi-geodesic chart: Newton inversion did not converge")
        return tuple(y)


def semigeodesic_chart(metric: MetricField, grid: Grid, depth: float, patch: tuple[float, float] | None = None,
                       threshold: float = 1e-3) -> SemigeodesicChart:
    """Boundary-normal chart of ``metric`` over ``patch`` (defaults to the whole bottom face).

    Rays are integrated with step ``min(h)/2``. Raises :class:`CausticError` when the flow Jacobian
    determinant drops below ``threshold`` before ``depth``; the error carries the largest valid depth.
    """
    chart = SemigeodesicChart(metric, grid.origin[-1], 0.5 * min(grid.h))
    ys = np.linspace(0.0, depth, max(3, int(np.ceil(depth / grid.h[-1])) + 1))
    if grid.n == 2:
        a, b = patch if patch is not None else (grid.origin[0], grid.origin[0] + grid.lengths[0])
        yt = np.linspace(a, b, max(3, int(np.ceil((b - a) / grid.h[0])) + 1))
        Yt, Yn = np.meshgrid(yt, ys, indexing="ij")
        det = np.linalg.det(chart.inverse_jacobian((Yt, Yn)))
        worst = det.min(axis=0)
    else:
        worst = np.linalg.det(chart.inverse_jacobian((ys,)))
    bad = np.nonzero(worst < threshold)[0]
    if bad.size:
        maxd = float(ys[bad[0] - 1]) if bad[0] > 0 else 0.0
        raise CausticError(f"caustic before depth {depth}: valid up to {maxd}", maxd)
    return chart


def verify_semigeodesic(metric: MetricField | SampledMetric, grid: Grid | None = None) -> float:
    """``max |g^{nn} - 1| + sum_{j<n} |g^{nj}|`` over the nodes."""
    if isinstance(metric, SampledMetric):
        G = metric.ginv
    else:
        if grid is None:
            raise GeometryError("a grid is required to sample a MetricField")
        G = metric.ginv(grid.mesh())
    n = G.shape[-1]
    res = np.abs(G[..., n - 1, n - 1] - 1.0)
    for j in range(n - 1):
        res = res + np.abs(G[..., n - 1, j])
    return float(res.max())
