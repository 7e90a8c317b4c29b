"""Leapfrog update kernels for the magnetic wave operator.

One step advances ``u^{n+1}`` at interior nodes from ``u^n`` and ``u^{n-1}``::

    u^{n+1} (1 + i a0 dt) = 2 u^n - (1 - i a0 dt) u^{n-1} - dt^2 (q u^n + S u^n)

with ``q = i dA0/dt - A0^2 + V`` and ``S`` the discrete magnetic Laplacian

    S u = (1/w) sum_d Dl_d (w g^{dd} D_d u) + (1/w) [D0_1 (w g^{12} D0_2 u) + D0_2 (w g^{12} D0_1 u)].

``D_d`` maps nodes to faces, ``(D u)_{i+1/2} = -i (u_{i+1}-u_i)/h + A_{i+1/2} (u_i+u_{i+1})/2``; ``Dl_d``
maps faces back to nodes with the same potential (no conjugation), so for real potentials ``S`` is
self-adjoint in the ``w``-weighted inner product. Off-diagonal metric terms use node-centred
differences ``D0``. With ``avg`` set, the tangential (axis 0) part of ``S`` is averaged over the three
normal rows with weights ``(1/4, 1/2, 1/4)``; it then vanishes on the normal Nyquist mode and
``dt = h_n`` stays stable, which makes purely normal propagation free of dispersion.
Boundary nodes are never written; the caller imposes Dirichlet values.
The kernels take ``pa = 1/(1 + i a0 dt)`` and ``pb = (1 - i a0 dt)/(1 + i a0 dt)`` precomputed.

Two implementations share each signature: explicit loops (compiled with numba when enabled)
and vectorised NumPy slicing. ``step_1d``/``step_2d`` point at the active backend.
"""

from __future__ import annotations

import numpy as np

from ._accel import NUMBA_ENABLED, njit

__all__ = ["step_1d", "step_2d", "step_1d_numpy", "step_2d_numpy", "step_1d_loops", "step_2d_loops"]


def _step_1d_loops(up, uc, un, pa, pb, q, inv_w, fw, fa, dt, h):
    nb, m = uc.shape
    dt2 = dt * dt
    ih = 1.0 / h
    for b in range(nb):
        for i in range(1, m - 1):
            um = uc[b, i - 1]
            u0 = uc[b, i]
            upl = uc[b, i + 1]
            fm = fw[i - 1] * (-1j * (u0 - um) * ih + fa[i - 1] * 0.5 * (u0 + um))
            fp = fw[i] * (-1j * (upl - u0) * ih + fa[i] * 0.5 * (upl + u0))
            s = (-1j * (fp - fm) * ih + 0.5 * (fa[i] * fp + fa[i - 1] * fm)) * inv_w[i]
            un[b, i] = pa[i] * (2.0 * u0 - dt2 * (q[i] * u0 + s)) - pb[i] * up[b, i]


def _step_2d_loops(up, uc, un, pa, pb, q, inv_w, fw0, fa0, fw1, fa1, wg12, a1n, a2n, cross, avg, dt, h0, h1):
    nb, m0, m1 = uc.shape
    dt2 = dt * dt
    i0 = 1.0 / h0
    i1 = 1.0 / h1
    tan = np.empty(m1, np.complex128)
    for b in range(nb):
        for i in range(1, m0 - 1):
            # tangential part of (1/w) S on the whole column
            for j in range(m1):
                u0 = uc[b, i, j]
                uw = uc[b, i - 1, j]
                ue = uc[b, i + 1, j]
                fm = fw0[i - 1, j] * (-1j * (u0 - uw) * i0 + fa0[i - 1, j] * 0.5 * (u0 + uw))
                fp = fw0[i, j] * (-1j * (ue - u0) * i0 + fa0[i, j] * 0.5 * (ue + u0))
                tan[j] = (-1j * (fp - fm) * i0 + 0.5 * (fa0[i, j] * fp + fa0[i - 1, j] * fm)) * inv_w[i, j]
            for j in range(1, m1 - 1):
                u0 = uc[b, i, j]
                us = uc[b, i, j - 1]
                un_ = uc[b, i, j + 1]
                if avg:
                    st = 0.25 * tan[j - 1] + 0.5 * tan[j] + 0.25 * tan[j + 1]
                else:
                    st = tan[j]
                gm = fw1[i, j - 1] * (-1j * (u0 - us) * i1 + fa1[i, j - 1] * 0.5 * (u0 + us))
                gp = fw1[i, j] * (-1j * (un_ - u0) * i1 + fa1[i, j] * 0.5 * (un_ + u0))
                s = -1j * (gp - gm) * i1 + 0.5 * (fa1[i, j] * gp + fa1[i, j - 1] * gm)
                if cross:
                    uw = uc[b, i - 1, j]
                    ue = uc[b, i + 1, j]
                    # D0_1 (w g12 D0_2 u)
                    d2w = -0.5j * (uc[b, i - 1, j + 1] - uc[b, i - 1, j - 1]) * i1 + a2n[i - 1, j] * uw
                    d2c = -0.5j * (un_ - us) * i1 + a2n[i, j] * u0
                    d2e = -0.5j * (uc[b, i + 1, j + 1] - uc[b, i + 1, j - 1]) * i1 + a2n[i + 1, j] * ue
                    s += -0.5j * (wg12[i + 1, j] * d2e - wg12[i - 1, j] * d2w) * i0 + a1n[i, j] * wg12[i, j] * d2c
                    # D0_2 (w g12 D0_1 u)
                    d1s = -0.5j * (uc[b, i + 1, j - 1] - uc[b, i - 1, j - 1]) * i0 + a1n[i, j - 1] * us
                    d1c = -0.5j * (ue - uw) * i0 + a1n[i, j] * u0
                    d1n = -0.5j * (uc[b, i + 1, j + 1] - uc[b, i - 1, j + 1]) * i0 + a1n[i, j + 1] * un_
                    s += -0.5j * (wg12[i, j + 1] * d1n - wg12[i, j - 1] * d1s) * i1 + a2n[i, j] * wg12[i, j] * d1c
                s = s * inv_w[i, j] + st
                un[b, i, j] = pa[i, j] * (2.0 * u0 - dt2 * (q[i, j] * u0 + s)) - pb[i, j] * up[b, i, j]


def _face_flux(u, axis, fw, fa, h):
    lo = [slice(None)] * u.ndim
    hi = [slice(None)] * u.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    ul, uh = u[tuple(lo)], u[tuple(hi)]
    return fw * (-1j * (uh - ul) / h + fa * 0.5 * (uh + ul))


def _step_1d_numpy(up, uc, un, pa, pb, q, inv_w, fw, fa, dt, h):
    flux = _face_flux(uc, 1, fw, fa, h)
    s = (-1j * (flux[:, 1:] - flux[:, :-1]) / h + 0.5 * (fa[1:] * flux[:, 1:] + fa[:-1] * flux[:, :-1]))
    s *= inv_w[1:-1]
    u0 = uc[:, 1:-1]
    un[:, 1:-1] = pa[1:-1] * (2.0 * u0 - dt * dt * (q[1:-1] * u0 + s)) - pb[1:-1] * up[:, 1:-1]


def _step_2d_numpy(up, uc, un, pa, pb, q, inv_w, fw0, fa0, fw1, fa1, wg12, a1n, a2n, cross, avg, dt, h0, h1):
    f0 = _face_flux(uc, 1, fw0, fa0, h0)  # (B, m0-1, m1)
    f1 = _face_flux(uc, 2, fw1, fa1, h1)  # (B, m0, m1-1)
    st = -1j * (f0[:, 1:, :] - f0[:, :-1, :]) / h0
    st += 0.5 * (fa0[1:, :] * f0[:, 1:, :] + fa0[:-1, :] * f0[:, :-1, :])  # (B, m0-2, m1)
    if avg:
        wt = inv_w[1:-1, :] * st
        s = (0.25 * wt[:, :, :-2] + 0.5 * wt[:, :, 1:-1] + 0.25 * wt[:, :, 2:]) / inv_w[1:-1, 1:-1]
    else:
        s = st[:, :, 1:-1]
    s += -1j * (f1[:, 1:-1, 1:] - f1[:, 1:-1, :-1]) / h1
    s += 0.5 * (fa1[1:-1, 1:] * f1[:, 1:-1, 1:] + fa1[1:-1, :-1] * f1[:, 1:-1, :-1])
    if cross:
        # node-centred derivatives where both neighbours exist
        d2 = -0.5j * (uc[:, :, 2:] - uc[:, :, :-2]) / h1 + a2n[:, 1:-1] * uc[:, :, 1:-1]  # (B, m0, m1-2)
        g = wg12[:, 1:-1] * d2
        s += -0.5j * (g[:, 2:, :] - g[:, :-2, :]) / h0 + a1n[1:-1, 1:-1] * g[:, 1:-1, :]
        d1 = -0.5j * (uc[:, 2:, :] - uc[:, :-2, :]) / h0 + a1n[1:-1, :] * uc[:, 1:-1, :]  # (B, m0-2, m1)
        g = wg12[1:-1, :] * d1
        s += -0.5j * (g[:, :, 2:] - g[:, :, :-2]) / h1 + a2n[1:-1, 1:-1] * g[:, :, 1:-1]
    s *= inv_w[1:-1, 1:-1]
    u0 = uc[:, 1:-1, 1:-1]
    un[:, 1:-1, 1:-1] = (pa[1:-1, 1:-1] * (2.0 * u0 - dt * dt * (q[1:-1, 1:-1] * u0 + s))
                         - pb[1:-1, 1:-1] * up[:, 1:-1, 1:-1])


step_1d_numpy = _step_1d_numpy
step_2d_numpy = _step_2d_numpy
# fastmath roughly doubles complex throughput; instability is detected by the caller's finiteness check
step_1d_loops = njit(fastmath=True)(_step_1d_loops)
step_2d_loops = njit(fastmath=True)(_step_2d_loops)

if NUMBA_ENABLED:
    step_1d = step_1d_loops
    step_2d = step_2d_loops
else:
    step_1d = step_1d_numpy
    step_2d = step_2d_numpy
