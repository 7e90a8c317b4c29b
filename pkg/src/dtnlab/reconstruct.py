"""Near-boundary recovery of the reduced coefficients on the slab ``X0``.

Pipeline per tau-slice ``t + y_n = T - tau``:

1. adjoint fields ``v^g`` (from rest at ``T1``) and geometric-optics probes ``u^f`` are traced on the slice;
2. the localized functional and its ``v_s`` companion give ``E_k = e^{ib} conj(v)`` and ``E_{s,k}`` up to
   ``O(1/k)``; both are Richardson-extrapolated in ``1/k`` (and in the mollifier width for ``n = 2``);
3. ``b_s = (d_s E - E_s) / (i E)`` on ``{|E| > threshold}``, merged over the adjoint family;
4. ``b`` follows by integrating ``b_s`` from ``y_n = 0`` where ``b = 0``, and ``A_n = d_tau b``;
5. for ``n = 2`` the recovered ``v = conj(e^{-ib} E)`` feed the pointwise system
   ``-G v'' + B v' + C v = 4 v_{s tau} - 4 i conj(alpha) v_s`` for ``(G, B, C)``.

Probes use a switch-on cutoff in ``s``: the rise happens before ``T1``, where every adjoint field
vanishes, so the functional only sees the band ``s >= T1``. One forward solve per ``(k, width)``
serves all ``s0`` and all slices.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .fields import ReducedCoefficients
from .forward import BoundaryData, SurfaceRecorder, SurfaceTrace, march
from .geometry import Grid
from .probes import Mollifier, ResolutionError, SwitchOn, _d, _d2, max_resolved_k

__all__ = [
    "ExtractionError",
    "CoverageError",
    "ReconstructionConfig",
    "SliceData",
    "RecoveredLayer",
    "filon_cumulative",
    "remove_endpoint_tone",
    "slice_functionals",
    "richardson_k",
    "richardson_eps",
    "extract_eib_v",
    "extract_eib_vs",
    "recover_bs",
    "integrate_b_and_An",
    "assemble_tangential_system",
    "unpack_lower_order",
    "forward_composites",
    "interior_mask",
    "SliceBundle",
    "collect_slices",
    "reconstruct",
]


class ExtractionError(RuntimeError):
    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class CoverageError(ExtractionError):
    pass


# ------------------------------------------------------------------------------- configuration


@dataclass
class ReconstructionConfig:
    """Knobs of the recovery pipeline (all lengths and times in scenario units).

    ``k`` is the base wavenumber of the geometric sequence ``k, 2k, 4k``; ``widths`` are the
    mollifier radii (``n = 2`` only, halved once for the extrapolation). ``probe_rise`` is the
    probe switch-on interval ``(start, width)`` which must end by ``T1``; ``adjoint_rise`` the
    switch-on width of the adjoint sources starting at ``T1``. ``scheme`` picks the 2D stencil
    (``"averaged"`` keeps the normal Courant number at one; see :mod:`dtnlab.forward`).
    """

    T1: float
    T: float
    k: float
    levels: int = 3
    widths: tuple | None = None
    probe_rise: tuple | None = None
    adjoint_rise: float | None = None
    adjoint_omegas: tuple = (0.0, 3.0, -4.0)
    tau_fractions: tuple = (0.0, 0.16, 0.32, 0.48, 0.64)
    dtau_fraction: float = 1.0 / 40.0
    threshold: float = 1e-2
    cfl: float = 1.0
    scheme: str = "standard"
    probe_centres: tuple | None = None
    s_margin: float | None = None
    det_threshold: float = 1e-3
    interior: float = 0.8
    tone_filter: bool = True
    check_tableau: bool = True

    @property
    def a(self) -> float:
        return self.T - self.T1

    def ks(self) -> list:
        return [self.k * 2 ** j for j in range(self.levels)]

    def rise(self) -> SwitchOn:
        if self.probe_rise is None:
            w = min(self.T1, 0.3 * self.a)
            return SwitchOn(self.T1 - w, w)
        start, width = self.probe_rise
        if start + width > self.T1 + 1e-12 or start < 0:
            raise ValueError("the probe rise must lie inside [0, T1]")
        return SwitchOn(start, width)

    def adjoint_switch(self) -> SwitchOn:
        w = self.adjoint_rise if self.adjoint_rise is not None else 0.1 * self.a
        return SwitchOn(self.T1, w)

    def margin(self) -> float:
        return self.s_margin if self.s_margin is not None else self.adjoint_switch().width

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# ---------------------------------------------------------------------------- oscillatory sums


def filon_cumulative(phi: np.ndarray, s: np.ndarray, k: float, s_ref: float = 0.0) -> np.ndarray:
    """``exp(-i k (s_j - s_ref)) int_{s_0}^{s_j} exp(i k (s - s_ref)) phi(s) ds`` along the last axis.

    ``phi`` is taken piecewise linear on the ascending nodes ``s``; the oscillatory factor is
    integrated exactly, so the error does not grow with ``k h``.
    """
    s = np.asarray(s, float)
    h = np.diff(s)
    z = 1j * k * h
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    ez = np.exp(z)
    I0 = np.where(small, 1 + z / 2 + z * z / 6, (ez - 1) / zs)
    I1 = np.where(small, 0.5 + z / 3 + z * z / 8, (ez * (z - 1) + 1) / zs ** 2)
    # int over [s_a, s_b] of exp(i k (s - s_a)) phi  =  h [(I0 - I1) phi_a + I1 phi_b]
    seg = h * ((I0 - I1) * phi[..., :-1] + I1 * phi[..., 1:])
    # accumulate with phase relative to the right node of each segment
    out = np.zeros(phi.shape, complex)
    step = np.exp(-1j * k * h)
    acc = np.zeros(phi.shape[:-1], complex)
    for j in range(h.size):
        acc = (acc + seg[..., j]) * step[j]
        out[..., j + 1] = acc
    return out


def remove_endpoint_tone(f: np.ndarray, s: np.ndarray, k: float, s_ref: float, s_cut: float,
                         max_degree: int = 14) -> np.ndarray:
    """Subtract the tone ``c exp(-i k (s0 - s_ref))`` left in a cumulative oscillatory integral by the
    lower-endpoint region ``s < s_cut`` (the adjoint switch-on band).

    Beyond ``s_cut`` that contribution is exactly a constant times the tone. ``c`` is fitted jointly
    with a Chebyshev polynomial for the smooth part, by least squares on ``[s_cut, s_max]``; the
    degree grows with ``k (s_max - s_cut)`` so the tone stays well separated from the polynomials.
    Values below ``s_cut`` are returned unchanged.
    """
    s = np.asarray(s, float)
    sel = s >= s_cut - 1e-12
    n = int(sel.sum())
    if n < 8:
        return f
    ss = s[sel]
    L = ss[-1] - ss[0]
    deg = int(max(2, min(max_degree, k * L / 6.0, n // 4)))
    z = 2.0 * (ss - ss[0]) / L - 1.0
    tone = np.exp(-1j * k * (ss - s_ref))
    basis = np.concatenate([np.polynomial.chebyshev.chebvander(z, deg).astype(complex), tone[:, None]], axis=1)
    fs = f[..., sel]
    flat = fs.reshape(-1, n).T
    coef = np.linalg.lstsq(basis, flat, rcond=None)[0]
    c = coef[-1].reshape(fs.shape[:-1])
    out = f.copy()
    out[..., sel] = fs - c[..., None] * tone
    return out


# --------------------------------------------------------------------------------- slice data


@dataclass
class SliceData:
    """Functionals on one tau-slice: arrays over ``(probe, adjoint, s)`` on ascending ``s``."""

    tau: float
    s: np.ndarray
    Q: np.ndarray
    B: np.ndarray

    def select(self, keep: np.ndarray) -> "SliceData":
        return SliceData(self.tau, self.s[keep], self.Q[..., keep], self.B[..., keep])


def _ascending(tr: SurfaceTrace):
    order = np.argsort(tr.s)
    return order, tr.s[order]


def slice_functionals(ut: SurfaceTrace, vt: SurfaceTrace, k: float, s_ref: float, tau: float) -> SliceData:
    """``Q = e^{-ik(s0-s_ref)} [u conj(v)(s0) - int_{s<=s0} u conj(v_s)]`` and ``B = i k e^{-ik(s0-s_ref)} int u conj(v_s)``.

    ``Q`` equals half the localized functional ``int_{s<=s0} u_s conj(v)`` after demodulation
    (integration by parts, ``v = 0`` below ``T1``). ``ut`` carries the probe carrier ``(k, s_ref)``.
    """
    if ut.carrier is None or abs(ut.carrier[0] - k) > 1e-12 * k:
        raise ValueError("probe traces must be demodulated with the probe carrier")
    order, s = _ascending(ut)
    U = ut.u[:, order]
    V, Vs = _rows_like(vt, ut.yn[order])
    if U.ndim == 2:
        prod_uv = U[:, None, :] * np.conj(V)[None, :, :]
        prod_us = U[:, None, :] * np.conj(Vs)[None, :, :]
    else:
        wx = _trap(ut.tangential)
        prod_uv = np.einsum("prx,grx,x->pgr", U, np.conj(V), wx)
        prod_us = np.einsum("prx,grx,x->pgr", U, np.conj(Vs), wx)
    J = filon_cumulative(prod_us, s, k, s_ref)
    return SliceData(tau, s, prod_uv - J, 1j * k * J)


def _rows_like(vt: SurfaceTrace, yn: np.ndarray) -> tuple:
    """Adjoint trace values on the rows ``yn``; rows absent from ``vt`` (before ``T1``) are zero."""
    shape = (vt.u.shape[0], yn.size) + vt.u.shape[2:]
    V = np.zeros(shape, complex)
    Vs = np.zeros(shape, complex)
    pos = {round(float(y), 9): i for i, y in enumerate(vt.yn)}
    src = [pos.get(round(float(y), 9), -1) for y in yn]
    dst = np.array([j for j, i in enumerate(src) if i >= 0], int)
    src = np.array([i for i in src if i >= 0], int)
    if src.size:
        V[:, dst] = vt.u[:, src]
        Vs[:, dst] = vt.u_s[:, src]
    return V, Vs


def _trap(x: np.ndarray) -> np.ndarray:
    w = np.zeros(x.size)
    d = np.diff(x)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


# -------------------------------------------------------------------------------- extrapolation


def richardson_k(values: Sequence[np.ndarray]) -> tuple:
    """Tableau for ``A(k) = A + c1/k + c2/k^2 + ...`` with ``k`` doubling; returns (limit, error estimate, tableau)."""
    cols = [np.asarray(v) for v in values]
    table = [cols]
    order = 1
    while len(table[-1]) > 1:
        prev = table[-1]
        f = 2.0 ** order
        table.append([(f * prev[i + 1] - prev[i]) / (f - 1) for i in range(len(prev) - 1)])
        order += 1
    limit = table[-1][0]
    err = np.abs(table[-1][0] - table[-2][-1]) if len(table) > 1 else np.full(np.shape(limit), np.inf)
    return limit, err, table


def richardson_eps(coarse: np.ndarray, fine: np.ndarray) -> tuple:
    """Symmetric-mollifier extrapolation ``(4 E(eps/2) - E(eps)) / 3`` (error ``O(eps^2)`` removed)."""
    lim = (4 * fine - coarse) / 3
    return lim, np.abs(lim - fine)


def _check_tableau(table: list, scale: float, what: str, tol: float = 0.5):
    """Successive corrections in the tableau must shrink (sup norms over the slice)."""
    if len(table[0]) < 3:
        return
    d1 = float(np.max(np.abs(table[0][-1] - table[0][-2])))
    d2 = float(np.max(np.abs(table[1][-1] - table[1][-2]))) if len(table[1]) > 1 else 0.0
    floor = 1e-8 * max(scale, 1e-300)
    if d2 > max(tol * 4 * d1, floor) and d1 > floor:
        raise ExtractionError(f"{what}: Richardson tableau does not converge", {"delta_first": d1,
                              "delta_second": d2, "scale": scale})


def _extract(values_by_width: Sequence[Sequence[np.ndarray]], what: str, check: bool = True) -> tuple:
    limits, errs = [], []
    for vals in values_by_width:
        lim, err, table = richardson_k(vals)
        if check:
            _check_tableau(table, float(np.max(np.abs(lim), initial=0.0)), what)
        limits.append(lim)
        errs.append(err)
    if len(limits) == 1:
        return limits[0], errs[0]
    lim, e = richardson_eps(limits[0], limits[1])
    return lim, np.maximum(e, errs[1])


def extract_eib_v(per_width: Sequence[Sequence[SliceData]], check: bool = True) -> tuple:
    """``e^{ib} conj(v^g)`` on the slice from ``Q`` over the k-sequence (outer list: mollifier widths)."""
    return _extract([[d.Q for d in seq] for seq in per_width], "e^{ib} conj(v)", check)


def extract_eib_vs(per_width: Sequence[Sequence[SliceData]], check: bool = True) -> tuple:
    """``e^{ib} conj(v^g_s)`` from ``B`` over the k-sequence."""
    return _extract([[d.B for d in seq] for seq in per_width], "e^{ib} conj(v_s)", check)


# --------------------------------------------------------------------------------- b and A_n


def recover_bs(E: np.ndarray, Es: np.ndarray, s: np.ndarray, threshold: float = 1e-2,
               require: np.ndarray | None = None) -> tuple:
    """``b_s = (d_s E - E_s)/(i E)`` merged over the adjoint family (axis 0).

    Each ``g`` contributes where ``|E_g| > threshold * max |E_g|``; contributions are averaged
    with weights ``|E_g|^2``. ``require`` flags lattice points that must be covered.
    Returns ``(b_s, covered)`` with ``b_s`` NaN where uncovered.
    """
    E = np.asarray(E)
    dE = np.gradient(E, s, axis=-1, edge_order=2) if E.ndim == 2 else np.gradient(E, s, axis=1, edge_order=2)
    num = np.zeros(E.shape[1:], complex)
    den = np.zeros(E.shape[1:])
    for g in range(E.shape[0]):
        Eg = E[g]
        ok = np.abs(Eg) > threshold * np.max(np.abs(Eg), initial=0.0)
        if not ok.any():
            continue
        num += np.where(ok, np.conj(Eg) * (dE[g] - Es[g]), 0.0)
        den += np.where(ok, np.abs(Eg) ** 2, 0.0)
    covered = den > 0
    if require is not None:
        miss = require & ~covered
        if miss.any():
            idx = np.argwhere(miss)
            raise CoverageError(f"{len(idx)} lattice points are masked under every adjoint source",
                                {"points": idx[:20].tolist()})
    bs = np.where(covered, num / np.where(covered, 1j * den, 1.0), np.nan)
    return bs, covered


def _integrate_from_boundary(bs: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``b(s) = -int_s^{s_max} b_s`` along axis 0 (``b = 0`` at the largest ``s``, i.e. ``y_n = 0``)."""
    cum = cumulative_trapezoid(bs[::-1], x=s[::-1], axis=0, initial=0.0)
    return cum[::-1]


def integrate_b_and_An(slices: dict, taus: Sequence[float], dtau: float) -> dict:
    """``b`` on every slice and ``A_n = d_tau b`` on the main slices.

    ``slices`` maps ``tau -> (s, b_s)`` with ``b_s`` over ascending ``s`` whose last node is the
    boundary point ``s = T - tau``. Main slices use centred differences with ``tau +- dtau``; a
    slice at ``tau = 0`` uses the one-sided second-order formula with ``dtau, 2 dtau``.
    """
    if len(taus) < 3:
        raise ValueError("at least three tau-slices are required")
    b = {tau: (s, _integrate_from_boundary(bs, s)) for tau, (s, bs) in slices.items()}
    out = {}
    for tau in taus:
        s0, b0 = b[_key(b, tau)]
        neigh = _neighbours(tau, dtau)
        if len(neigh) == 2 and neigh[0] < tau:
            (sm, bm), (sp, bp) = b[_key(b, neigh[0])], b[_key(b, neigh[1])]
            m, p = _on(s0, sm, bm), _on(s0, sp, bp)
            An = (p - m) / (2 * dtau)
        else:
            (s1, b1), (s2, b2) = b[_key(b, neigh[0])], b[_key(b, neigh[1])]
            An = (-3 * b0 + 4 * _on(s0, s1, b1) - _on(s0, s2, b2)) / (2 * dtau)
        out[tau] = {"s": s0, "b": b0, "A_n": An}
    return {"b": b, "slices": out}


def _neighbours(tau: float, dtau: float) -> tuple:
    if tau - dtau >= -1e-12:
        return (tau - dtau, tau + dtau)
    return (tau + dtau, tau + 2 * dtau)


def _key(d: dict, tau: float) -> float:
    for k in d:
        if abs(k - tau) < 1e-9:
            return k
    raise KeyError(f"no slice at tau = {tau}")


def _on(s_target: np.ndarray, s: np.ndarray, vals: np.ndarray, axis: int = 0) -> np.ndarray:
    """Values on ``s_target`` along ``axis`` (nodes shared up to rounding; NaN where absent)."""
    vals = np.moveaxis(vals, axis, 0)
    out = np.full((s_target.size,) + vals.shape[1:], np.nan, dtype=complex)
    idx = np.searchsorted(s, s_target)
    for j, (i, st) in enumerate(zip(idx, s_target)):
        for c in (i - 1, i):
            if 0 <= c < s.size and abs(s[c] - st) < 1e-9:
                out[j] = vals[c]
                break
    return np.moveaxis(out, 0, axis)


# --------------------------------------------------------------------------- tangential system


def assemble_tangential_system(v: np.ndarray, v_y: np.ndarray, v_yy: np.ndarray, rhs: np.ndarray,
                               M: int = 3, det_threshold: float = 1e-3, method: str = "lstsq") -> dict:
    """Pointwise solve of ``(-v_yy, v_y, v) . (G, B, C) = rhs`` over a family of fields (axis 0).

    ``det`` is the largest normalised determinant (row-space volume) over ``M``-subsets of the
    family; points below ``det_threshold`` are flagged. ``method="subset"`` solves with that best
    subset, ``"lstsq"`` uses every member in one least-squares solve, which keeps the solution
    smooth where the best subset changes from point to point.
    """
    if method not in ("lstsq", "subset"):
        raise ValueError(f"unknown method {method!r}")
    K = v.shape[0]
    rows = np.stack([-v_yy, v_y, v], axis=-1)  # (K, ..., 3)
    rows = np.moveaxis(rows, 0, -2)  # (..., K, 3)
    rhs = np.moveaxis(rhs, 0, -1)  # (..., K)
    shape = rows.shape[:-2]
    finite = np.isfinite(rows).all(axis=(-1, -2)) & np.isfinite(rhs).all(axis=-1)
    rows = np.where(finite[..., None, None], rows, 0.0)
    rhs = np.where(finite[..., None], rhs, 0.0)
    best = np.zeros(shape)
    sol = np.full(shape + (M,), np.nan, complex)
    for sub in itertools.combinations(range(K), M):
        A = rows[..., sub, :]
        norms = np.prod(np.linalg.norm(A, axis=-1), axis=-1)
        det = np.abs(np.linalg.det(A)) / np.where(norms > 0, norms, np.inf)
        det = np.where(np.isfinite(det), det, 0.0)
        better = det > best
        if method == "subset" and better.any():
            f = rhs[..., sub]
            x = np.linalg.solve(np.where(better[..., None, None], A, np.eye(M)),
                                np.where(better[..., None], f, 0.0)[..., None])[..., 0]
            sol = np.where(better[..., None], x, sol)
        best = np.maximum(best, det)
    flagged = (best < det_threshold) | ~finite
    if method == "lstsq":
        AH = np.conj(np.swapaxes(rows, -1, -2))
        N = AH @ rows
        N = np.where(flagged[..., None, None], np.eye(M), N)
        sol = np.linalg.solve(N, (AH @ rhs[..., None]))[..., 0]
    sol[flagged] = np.nan
    cond = np.where(best > 0, 1.0 / np.where(best > 0, best, 1.0), np.inf)
    return {"G": sol[..., 0], "B": sol[..., 1], "C": sol[..., 2], "det": best, "cond": cond, "flagged": flagged}


def unpack_lower_order(G: np.ndarray, G_y: np.ndarray, B: np.ndarray, C: np.ndarray, y: np.ndarray,
                       alpha_s: np.ndarray) -> dict:
    """Invert ``B = -G' - 2 i G conj(A1)`` and ``C = -i (G conj(A1))' + G conj(A1)^2 + conj(V1) + 2 i conj(alpha_s)``.

    ``y`` is the tangential lattice (last axis); ``alpha_s`` the recovered ``d_s A_n``.
    Returns ``A1`` and ``V1`` (unconjugated).
    """
    if np.any(np.abs(G) < 1e-12):
        raise ValueError("tangential metric block is singular")
    A1c = 1j * (B + G_y) / (2 * G)
    GA = G * A1c
    GA_y = _diff_y(GA, y, 1)
    V1c = C + 1j * GA_y - G * A1c ** 2 - 2j * np.conj(alpha_s)
    return {"A1": np.conj(A1c), "V1": np.conj(V1c)}


def _diff_y(a: np.ndarray, y: np.ndarray, order: int) -> np.ndarray:
    """Derivative along the last axis: fourth-order stencils on uniform lattices (NaN on two edge layers)."""
    y = np.asarray(y, float)
    dy = np.diff(y)
    if y.size >= 5 and np.allclose(dy, dy[0], rtol=1e-9, atol=0.0):
        return (_d if order == 1 else _d2)(np.asarray(a), a.ndim - 1, float(dy[0]))
    out = np.gradient(a, y, axis=-1, edge_order=2)
    return out if order == 1 else np.gradient(out, y, axis=-1, edge_order=2)


def forward_composites(coeffs: ReducedCoefficients, x, t) -> dict:
    """Ground-truth ``(G, B, C)`` of the adjoint tangential system at physical points (``n = 2``)."""
    if coeffs.n != 2:
        raise ValueError("composites are defined for n = 2")
    G = coeffs.metric.ginv(x)[..., 0, 0].astype(complex)
    Gy = _dG(coeffs, x)
    A1c = np.conj(coeffs.A_tan[0](x, t))
    A1c_y = np.conj(coeffs.A_tan[0].derivative(0)(x, t))
    V1c = np.conj(coeffs.V1(x, t))
    al = coeffs.alpha
    alpha_s = 0.5 * (al.derivative("t")(x, t) - al.derivative(1)(x, t))
    B = -Gy - 2j * G * A1c
    C = -1j * (Gy * A1c + G * A1c_y) + G * A1c ** 2 + V1c + 2j * np.conj(alpha_s)
    return {"G": G, "B": B, "C": C, "A1": coeffs.A_tan[0](x, t), "V1": coeffs.V1(x, t), "alpha_s": alpha_s}


def _dG(coeffs: ReducedCoefficients, x, h: float = 1e-5) -> np.ndarray:
    xp = (np.asarray(x[0]) + h, x[1])
    xm = (np.asarray(x[0]) - h, x[1])
    return (coeffs.metric.ginv(xp)[..., 0, 0] - coeffs.metric.ginv(xm)[..., 0, 0]) / (2 * h)


# ----------------------------------------------------------------------------------- geometry


def interior_mask(s: np.ndarray, tau: np.ndarray, T1: float, T: float, fraction: float = 0.8) -> np.ndarray:
    """Points of the triangle ``{s >= T1, tau >= 0, s + tau <= T}`` inside its copy scaled by ``fraction``
    about the incentre (the ``interior 80%`` used for error statistics)."""
    a = T - T1
    r = a * (2 - math.sqrt(2)) / 2
    d = (1 - fraction) * r
    s = np.asarray(s)
    tau = np.asarray(tau)
    return (s >= T1 + d - 1e-12) & (tau >= d - 1e-12) & (s + tau <= T - d * math.sqrt(2) + 1e-12)


# -------------------------------------------------------------------------------- the layer


@dataclass
class RecoveredLayer:
    """Recovered fields on the slice lattice with ground truth and per-point diagnostics.

    ``records`` holds one dict per lattice point: ``tau, s, y (n = 2), b, A_n``, the truth values,
    relative errors, ``cond`` and flag columns.
    """

    n: int
    records: list
    summary: dict
    config: dict = field(default_factory=dict)

    COLUMNS = ("tau", "s", "y", "interior", "covered", "b_re", "b_im", "An_re", "An_im", "An_true_re",
               "An_true_im", "An_relerr", "G_re", "G_true", "G_relerr", "B_re", "B_im", "B_true_re", "B_true_im",
               "B_relerr", "C_re", "C_im", "C_true_re", "C_true_im", "C_relerr", "A1_re", "A1_im", "A1_true_re",
               "A1_true_im", "A1_relerr", "cond", "flagged")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.get(c)) for c in self.COLUMNS])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=2)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.10e}"


def _quantiles(e: np.ndarray) -> dict:
    e = np.asarray(e, float)
    e = e[np.isfinite(e)]
    if e.size == 0:
        return {"count": 0}
    return {"count": int(e.size), "max": float(e.max()), "median": float(np.median(e)),
            "q90": float(np.quantile(e, 0.9)), "mean": float(e.mean())}


# --------------------------------------------------------------------------------- orchestration


def _adjoint_sources(cfg: ReconstructionConfig, grid: Grid, family: int) -> BoundaryData:
    sw = cfg.adjoint_switch()
    a = cfg.a
    om = list(cfg.adjoint_omegas)
    if grid.n == 1:
        k = len(om)

        def fn(t):
            base = sw(t)
            return np.array([[base * np.exp(1j * w * (t - cfg.T1) / a)] for w in om]).reshape(k, 1)

        return BoundaryData(fn, k, 1)
    x = grid.axes()[0]
    lo, hi = grid.gamma if grid.gamma is not None else (x[0], x[-1])
    c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    z = (x - c) / half
    # smooth window on the extended patch, zero at the tangential walls
    ext = (x - x[0]) / (x[-1] - x[0])
    window = np.sin(np.pi * np.clip(ext, 0, 1)) ** 2
    polys = [np.ones_like(z), z, z * z - 1.0 / 3.0]
    profiles = []
    for j in range(family):
        P = polys[j % 3]
        w = om[(j // 3) % len(om)] if j >= 3 else 0.0
        profiles.append((P * window, w))

    def fn2(t):
        base = sw(t)
        return np.stack([base * np.exp(1j * w * (t - cfg.T1) / a) * P for P, w in profiles])

    return BoundaryData(fn2, family, x.size)


def _probe_sources(cfg: ReconstructionConfig, grid: Grid, k: float, s_ref: float, width: float | None) -> BoundaryData:
    rise = cfg.rise()
    if grid.n == 1:
        return BoundaryData(lambda t: np.reshape(np.exp(1j * k * (t - s_ref)) * rise(t), (1, 1)), 1, 1)
    x = grid.axes()[0]
    prof = np.stack([Mollifier(c, width)(x) for c in cfg.probe_centres])
    # unit discrete mass under the trapezoid weights used for the pairings
    prof /= (prof * _trap(x)).sum(axis=1, keepdims=True)

    def fn(t):
        return np.exp(1j * k * (t - s_ref)) * rise(t) * prof

    return BoundaryData(fn, prof.shape[0], x.size)


def _surfaces(cfg: ReconstructionConfig, grid: Grid) -> tuple:
    hn = grid.h[-1]
    a = cfg.a
    dtau = max(1, round(cfg.dtau_fraction * a / (2 * hn))) * 2 * hn
    taus = [round(f * a / (2 * hn)) * 2 * hn for f in cfg.tau_fractions]
    allt = set()
    for tau in taus:
        allt.add(tau)
        allt.update(_neighbours(tau, dtau))
    allt = sorted(round(t, 12) for t in allt)
    return taus, dtau, allt


@dataclass
class SliceBundle:
    """Raw functionals from the forward and adjoint solves (the expensive part of the pipeline)."""

    per_slice: dict
    surf_taus: list
    taus: list
    dtau: float
    ks: list
    widths: list
    s_ref: float


def collect_slices(coeffs: ReducedCoefficients, grid: Grid, cfg: ReconstructionConfig, *,
                   family: int | None = None) -> SliceBundle:
    """Adjoint family and probe solves traced on all tau-surfaces; returns the per-slice ``Q, B``."""
    n = coeffs.n
    if n != grid.n:
        raise ValueError("coefficients and grid differ in dimension")
    ks = cfg.ks()
    k_max = max_resolved_k(grid)
    if ks[-1] > k_max:
        raise ResolutionError(ks[-1], k_max)
    taus, dtau, surf_taus = _surfaces(cfg, grid)
    surfaces = [("tau", cfg.T - tau) for tau in surf_taus]
    depth = 0.5 * cfg.a + 2 * grid.h[-1]
    s_ref = cfg.T1
    widths = list(cfg.widths) if (n == 2 and cfg.widths) else [None]
    if n == 2 and cfg.probe_centres is None:
        raise ValueError("2D reconstruction needs probe centres")
    fam = family if family is not None else (len(cfg.adjoint_omegas) if n == 1 else 6)
    # probe energy reflected by the far wall must not come back to the traced surfaces
    t_on = cfg.rise().start
    if grid.lengths[-1] <= 0.5 * (cfg.T - t_on) + grid.h[-1]:
        raise ValueError(f"grid depth {grid.lengths[-1]} must exceed (T - probe start)/2 = {0.5 * (cfg.T - t_on)}")

    c = coeffs.coefficients()
    gdata = _adjoint_sources(cfg, grid, fam)
    rv = SurfaceRecorder(surfaces, max_depth=depth)
    vf = march(c.conj(), grid, gdata, cfg.T1, cfg.T, cfl=cfg.cfl, recorders=[rv], keep_rows=False,
               scheme=cfg.scheme)
    vtr = {tau: tr for tau, tr in zip(surf_taus, rv.traces())}
    dt = min(vf.dt, cfg.cfl * _dt_max(c, grid, cfg.scheme))

    per_slice: dict = {tau: [[None] * len(ks) for _ in widths] for tau in surf_taus}
    for wi, width in enumerate(widths):
        for ki, k in enumerate(ks):
            f = _probe_sources(cfg, grid, k, s_ref, width)
            ru = SurfaceRecorder(surfaces, max_depth=depth, carrier=(k, s_ref))
            march(c, grid, f, 0.0, cfg.T, dt=dt, recorders=[ru], keep_rows=False, scheme=cfg.scheme)
            for tau, ut in zip(surf_taus, ru.traces()):
                per_slice[tau][wi][ki] = slice_functionals(ut, vtr[tau], k, s_ref, tau)
    return SliceBundle(per_slice, surf_taus, taus, dtau, ks, widths, s_ref)


def reconstruct(coeffs: ReducedCoefficients, grid: Grid, cfg: ReconstructionConfig, *, truth: bool = True,
                family: int | None = None, bundle: SliceBundle | None = None) -> RecoveredLayer:
    """Run the recovery pipeline on ``X0`` and compare with the ground-truth coefficients.

    A precomputed ``bundle`` (from :func:`collect_slices`) skips the solves.
    """
    bundle = bundle or collect_slices(coeffs, grid, cfg, family=family)
    per_slice = bundle.per_slice
    if cfg.tone_filter:
        cut = cfg.T1 + cfg.adjoint_switch().width
        per_slice = {tau: [[SliceData(tau, d.s, remove_endpoint_tone(d.Q, d.s, k, bundle.s_ref, cut),
                                      remove_endpoint_tone(d.B, d.s, k, bundle.s_ref, cut))
                            for d, k in zip(row, bundle.ks)] for row in rows]
                     for tau, rows in per_slice.items()}
    return _assemble_layer(coeffs, grid, cfg, per_slice, bundle.surf_taus, bundle.taus, bundle.dtau,
                           bundle.ks, bundle.widths, truth)


def _dt_max(c, grid, scheme="standard"):
    from .forward import stable_dt
    return stable_dt(c, grid, cfl=1.0, scheme=scheme)


def _assemble_layer(coeffs, grid, cfg, per_slice, surf_taus, taus, dtau, ks, widths, truth) -> RecoveredLayer:
    n = coeffs.n
    s_lo = cfg.T1 + cfg.margin()
    E_by, Es_by, bs_by, cov_by = {}, {}, {}, {}
    errs = {}
    for tau in surf_taus:
        s = per_slice[tau][0][0].s
        keep = s >= s_lo - 1e-12
        s = s[keep]
        cut = [[d.select(keep) for d in seq] for seq in per_slice[tau]]
        E, eE = extract_eib_v(cut, cfg.check_tableau)
        Es, eEs = extract_eib_vs(cut, cfg.check_tableau)
        # E: (P, G, R) -> family axis first: (G, R, P)
        E = np.moveaxis(E, 0, -1)
        Es = np.moveaxis(Es, 0, -1)
        if n == 1:
            E, Es = E[..., 0], Es[..., 0]
        bs, cov = recover_bs(E, Es, s, cfg.threshold, require=None)
        E_by[tau], Es_by[tau], bs_by[tau], cov_by[tau] = E, Es, bs, cov
        errs[tau] = (float(np.nanmax(eE)), float(np.nanmax(eEs)))
    res = integrate_b_and_An({tau: (_sl(per_slice, tau, s_lo), np.nan_to_num(bs_by[tau])) for tau in surf_taus},
                             taus, dtau)
    ys = np.asarray(cfg.probe_centres, float) if n == 2 else None
    records = []
    stats = {"A_n": [], "G": [], "B": [], "C": [], "A1": []}
    flagged_total, point_total = 0, 0
    for tau in taus:
        sl = res["slices"][tau]
        s = sl["s"]
        An = sl["A_n"]
        bvals = sl["b"]
        cov = cov_by[_key(cov_by, tau)]
        yn = 0.5 * (cfg.T - s - tau)
        t = 0.5 * (cfg.T + s - tau)
        inside = interior_mask(s, np.full_like(s, tau), cfg.T1, cfg.T, cfg.interior)
        if n == 1:
            x = (yn,)
            tt = t
        else:
            Y, X = np.meshgrid(yn, ys, indexing="ij")
            x = (X, Y)
            tt = np.broadcast_to(t[:, None], Y.shape)
            lo, hi = grid.gamma if grid.gamma is not None else (ys[0], ys[-1])
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            inside = inside[:, None] & (np.abs(ys - mid) <= cfg.interior * half + 1e-12)[None, :]
        An_true = coeffs.alpha(x, tt) if truth else np.full(An.shape, np.nan)
        denom = max(float(np.max(np.abs(An_true), initial=0.0)), 0.1)
        An_err = np.abs(An - An_true) / denom
        comp = None
        if n == 2:
            comp = _layer_system(coeffs, cfg, res, E_by, Es_by, tau, dtau, s, ys, x, tt, truth)
            flagged_total += int(np.sum(comp["flagged"] & inside))
            point_total += int(np.sum(inside))
        stats["A_n"].append(An_err[inside])
        it = np.ndindex(An.shape)
        for idx in it:
            r = {"tau": tau, "s": s[idx[0]], "interior": bool(inside[idx]), "covered": bool(np.all(cov[idx[0]]))
                 if np.ndim(cov) else True,
                 "b_re": bvals[idx].real, "b_im": bvals[idx].imag, "An_re": An[idx].real, "An_im": An[idx].imag,
                 "An_true_re": An_true[idx].real, "An_true_im": An_true[idx].imag, "An_relerr": An_err[idx]}
            if n == 2:
                r["y"] = ys[idx[1]]
                for key in ("G", "B", "C", "A1"):
                    val, tru, err = comp[key][idx], comp[key + "_true"][idx], comp[key + "_err"][idx]
                    if key == "G":
                        r["G_re"], r["G_true"] = val.real, tru.real
                    else:
                        r[key + "_re"], r[key + "_im"] = val.real, val.imag
                        r[key + "_true_re"], r[key + "_true_im"] = tru.real, tru.imag
                    r[key + "_relerr"] = err
                r["cond"] = comp["cond"][idx]
                r["flagged"] = bool(comp["flagged"][idx])
            records.append(r)
        if n == 2:
            for key in ("G", "B", "C", "A1"):
                ok = inside & ~comp["flagged"]
                stats[key].append(comp[key + "_err"][ok])
    summary = {
        "n": n,
        "ks": ks,
        "widths": [w for w in widths if w is not None],
        "taus": taus,
        "dtau": dtau,
        "extrapolation_error": {f"{tau:.6f}": errs[tau] for tau in surf_taus},
        "A_n_relerr": _quantiles(np.concatenate(stats["A_n"])) if stats["A_n"] else {},
    }
    if n == 2:
        for key in ("G", "B", "C", "A1"):
            summary[f"{key}_relerr"] = _quantiles(np.concatenate(stats[key]))
        summary["unflagged_fraction"] = 1.0 - flagged_total / max(point_total, 1)
    return RecoveredLayer(n, records, summary, cfg.to_dict())


def _sl(per_slice, tau, s_lo):
    s = per_slice[tau][0][0].s
    return s[s >= s_lo - 1e-12]


def _layer_system(coeffs, cfg, res, E_by, Es_by, tau, dtau, s, ys, x, tt, truth) -> dict:
    """Recovered fields and the tangential system on one main slice (``n = 2``)."""
    bmap = res["b"]

    def fields_on(tau_q):
        sq, bq = bmap[_key(bmap, tau_q)]
        E, Es = E_by[_key(E_by, tau_q)], Es_by[_key(Es_by, tau_q)]
        v = np.conj(np.exp(-1j * bq)[None] * E)
        vs = np.conj(np.exp(-1j * bq)[None] * Es)
        return _on(s, sq, v, axis=1), _on(s, sq, vs, axis=1)

    v, vs = fields_on(tau)  # (G, R, P)
    neigh = _neighbours(tau, dtau)
    (_, vs_a), (_, vs_b) = fields_on(neigh[0]), fields_on(neigh[1])
    if neigh[0] < tau:
        vs_tau = (vs_b - vs_a) / (2 * dtau)
    else:
        vs_tau = (-3 * vs + 4 * vs_a - vs_b) / (2 * dtau)
    v_y = _diff_y(v, ys, 1)
    v_yy = _diff_y(v, ys, 2)
    An = res["slices"][tau]["A_n"]  # (R, P)
    rhs = 4 * vs_tau - 4j * np.conj(An)[None] * vs
    sysres = assemble_tangential_system(v, v_y, v_yy, rhs, 3, cfg.det_threshold)
    Gy = _diff_y(sysres["G"], ys, 1)
    An_s = np.gradient(An, s, axis=0, edge_order=2)
    unpacked = unpack_lower_order(sysres["G"], Gy, sysres["B"], sysres["C"], ys, An_s)
    out = {"G": sysres["G"], "B": sysres["B"], "C": sysres["C"], "A1": unpacked["A1"], "V1": unpacked["V1"],
           "cond": sysres["cond"], "flagged": sysres["flagged"]}
    if truth:
        tr = forward_composites(coeffs, x, tt)
        for key in ("G", "B", "C", "A1"):
            tv = tr[key]
            denom = max(float(np.max(np.abs(tv), initial=0.0)), 0.1)
            out[key + "_true"] = tv
            out[key + "_err"] = np.abs(out[key] - tv) / denom
    else:
        for key in ("G", "B", "C", "A1"):
            out[key + "_true"] = np.full(out[key].shape, np.nan)
            out[key + "_err"] = np.full(out[key].shape, np.nan)
    return out
