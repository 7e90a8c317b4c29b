import numpy as np
import pytest
import sympy as sp

from dtnlab.fields import (Coefficients, FieldError, GaugeFunction, PotentialSet, Sampler, WindowError,
                           apply_operator, direct_reduced, gauge_apply, gauge_from_spec, null_gauge,
                           pullback_coefficients, reduce_operator, reduced_potential, sampler_from_spec)
from dtnlab.geometry import Grid, bump_map, conformal_metric, flat_metric, tangential_metric

X, Y, T = sp.symbols("x y t", real=True)

SPEC = {"terms": [
    {"amplitude": 0.7, "factors": [{"type": "xpow", "axis": 0, "power": 2},
                                   {"type": "tpoly", "coeffs": [1.0, -0.5, 0.25]}]},
    {"amplitude": [0.0, 0.4], "factors": [{"type": "gauss", "center": [0.3, 0.6], "width": 0.2}]},
    {"amplitude": -1.1, "factors": [{"type": "cos", "k": [2.0, -1.0], "omega": 3.0, "phase": 0.4}]},
    {"amplitude": 0.3, "factors": [{"type": "sin", "k": [0.0, 4.0], "omega": 0.0},
                                   {"type": "xpow", "axis": 1, "power": 1}]},
]}


def _sym(spec):
    e = 0.7 * X**2 * (1 - 0.5 * T + 0.25 * T**2)
    e += 0.4j * sp.exp(-((X - 0.3) ** 2 + (Y - 0.6) ** 2) / (2 * 0.2**2))
    e += -1.1 * sp.cos(2 * X - Y + 3 * T + 0.4)
    e += 0.3 * sp.sin(4 * Y) * Y
    return e


def _points(rng, m=11):
    return (rng.uniform(-0.5, 1.0, m), rng.uniform(0.0, 1.0, m)), rng.uniform(0.0, 2.0, m)


def test_sampler_values_and_derivatives_match_symbolic(rng):
    s = sampler_from_spec(SPEC, 2)
    e = _sym(SPEC)
    x, t = _points(rng)
    for axis, var in (("t", T), (0, X), (1, Y), (None, None)):
        expr = e if axis is None else sp.diff(e, var)
        f = sp.lambdify((X, Y, T), expr, "numpy")
        got = s(x, t) if axis is None else s.derivative(axis)(x, t)
        np.testing.assert_allclose(got, f(x[0], x[1], t), atol=1e-12)
    # a second derivative goes through the same machinery
    f = sp.lambdify((X, Y, T), sp.diff(e, X, T), "numpy")
    np.testing.assert_allclose(s.derivative(0).derivative("t")(x, t), f(x[0], x[1], t), atol=1e-12)


def test_sampler_constants_and_errors():
    assert sampler_from_spec(0.0, 1).zero
    assert sampler_from_spec([1.0, 2.0], 1)((np.zeros(3),), 0.0)[0] == 1 + 2j
    assert sampler_from_spec({"terms": [{"amplitude": 1.0, "factors": [{"type": "gauss", "center": [0],
                                                                        "width": 1}]}]}, 1).static
    with pytest.raises(FieldError):
        sampler_from_spec({"oops": 1}, 1)


def test_fd_derivative_fallback(rng):
    s = Sampler(lambda x, t: np.sin(x[0]) * t**2)
    x, t = (rng.uniform(0, 1, 5),), rng.uniform(0, 1, 5)
    np.testing.assert_allclose(s.derivative(0)(x, t), np.cos(x[0]) * t**2, atol=1e-10)
    np.testing.assert_allclose(s.derivative("t")(x, t), 2 * np.sin(x[0]) * t, atol=1e-10)


def _coeffs_2d(metric, form="original"):
    sp2 = lambda d: sampler_from_spec(d, 2)
    A0 = sp2({"terms": [{"amplitude": 0.3, "factors": [{"type": "gauss", "center": [0.4, 0.3], "width": 0.3},
                                                       {"type": "tpoly", "coeffs": [1, 0.5]}]}]})
    A = (sp2({"terms": [{"amplitude": 0.2, "factors": [{"type": "cos", "k": [3.0, 1.0], "omega": 1.0}]}]}),
         sp2({"terms": [{"amplitude": -0.15, "factors": [{"type": "xpow", "axis": 0, "power": 1}]}]}))
    V = sp2({"terms": [{"amplitude": -0.4, "factors": [{"type": "gauss", "center": [0.5, 0.5], "width": 0.2}]}]})
    return Coefficients(metric, PotentialSet(A0, A, V, True), form)


def _w(x, t):
    return np.exp(1j * (2 * x[0] + x[-1] - t)) * np.exp(-((x[-1] - 0.4) ** 2) / 0.2)


def test_gauge_apply_is_conjugation(rng):
    C = _coeffs_2d(conformal_metric(2, 0.2, (0.5, 0.5), 0.3))
    c = gauge_from_spec({"psi": {"terms": [{"amplitude": 0.5, "factors": [
        {"type": "xpow", "axis": 1, "power": 1}, {"type": "cos", "k": [2.0, 0.0], "omega": 1.5}]}]}}, 2)
    Cg = Coefficients(C.metric, gauge_apply(C.potentials, c), "original")
    x, t = (rng.uniform(0.2, 0.8, 6), rng.uniform(0.2, 0.8, 6)), rng.uniform(0.2, 1.0, 6)
    lhs = apply_operator(Cg, _w, x, t)
    rhs = apply_operator(C, lambda xx, tt: c.value(xx, tt) * _w(xx, tt), x, t) / c.value(x, t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-7 * np.abs(rhs).max())


def test_gauge_shift_is_gradient(rng):
    p = PotentialSet.zero(1)
    c = GaugeFunction(psi=sampler_from_spec({"terms": [{"amplitude": 1.0, "factors": [
        {"type": "xpow", "axis": 0, "power": 2}, {"type": "tpoly", "coeffs": [0, 1]}]}]}, 1))
    q = gauge_apply(p, c)
    x, t = (rng.uniform(0, 1, 5),), rng.uniform(0, 1, 5)
    np.testing.assert_allclose(q.A[0](x, t), 2 * x[0] * t)
    np.testing.assert_allclose(q.A0(x, t), x[0] ** 2)


def test_gauge_must_equal_one_on_bottom():
    g = Grid((1.0,), (10,))
    bad = gauge_from_spec({"psi": 0.3}, 1)
    with pytest.raises(FieldError):
        gauge_apply(PotentialSet.zero(1), bad, g, [0.0])
    with pytest.raises(FieldError):
        GaugeFunction()


def test_conformal_conjugation_gives_reduced_potential(rng):
    for metric in (conformal_metric(1, 0.2, (0.25,), 0.15), tangential_metric(0.2, (0.3, 0.4), 0.3)):
        n = metric.n
        if n == 2:
            C = _coeffs_2d(metric)
        else:
            s1 = lambda d: sampler_from_spec(d, 1)
            C = Coefficients(metric, PotentialSet(s1(0.2), (s1({"terms": [{"amplitude": 0.3, "factors": [
                {"type": "sin", "k": [2.0], "omega": 1.0}]}]}),), s1(-0.3), True))
        p = C.potentials
        Cr = Coefficients(metric, PotentialSet(p.A0, p.A, reduced_potential(metric, p), True), "reduced")
        q = lambda xx: metric.g_det(xx) ** 0.25
        x = tuple(rng.uniform(0.15, 0.6, 6) for _ in range(n))
        t = rng.uniform(0.2, 1.0, 6)
        lhs = q(x) * apply_operator(C, lambda xx, tt: _w(xx, tt) / q(xx), x, t)
        rhs = apply_operator(Cr, _w, x, t)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6 * np.abs(rhs).max())


def test_null_gauge_equation(rng):
    s2 = lambda d: sampler_from_spec(d, 2)
    A0 = s2({"terms": [{"amplitude": 0.4, "factors": [{"type": "gauss", "center": [0.3, 0.2], "width": 0.3},
                                                      {"type": "tpoly", "coeffs": [1, 0.3]}]}]})
    An = s2({"terms": [{"amplitude": 0.2, "factors": [{"type": "cos", "k": [1.0, 2.0], "omega": 0.5}]}]})
    psi = null_gauge(A0, An, 2, T0=3.0)
    x, t = (rng.uniform(0, 1, 8), rng.uniform(0.0, 1.0, 8)), rng.uniform(0, 1.5, 8)
    res = psi.derivative("t")(x, t) - psi.derivative(1)(x, t) - (An(x, t) - A0(x, t))
    assert np.abs(res).max() < 1e-10
    # independent check of the same derivatives by finite differences of psi itself
    e = 1e-5
    fd_t = (psi(x, t + e) - psi(x, t - e)) / (2 * e)
    fd_n = (psi((x[0], x[1] + e), t) - psi((x[0], x[1] - e), t)) / (2 * e)
    assert np.abs(fd_t - fd_n - (An(x, t) - A0(x, t))).max() < 1e-8
    assert np.abs(psi((x[0], np.zeros(8)), t)).max() == 0.0
    with pytest.raises(WindowError):
        psi((np.array([0.5]), np.array([0.9])), np.array([2.5]))


def test_reduction_chain_against_direct_application(rng):
    metric = tangential_metric(0.2, (0.3, 0.4), 0.3)
    C = _coeffs_2d(metric)
    g = Grid((1.0, 1.0), (10, 10))
    red = reduce_operator(metric, C.potentials, T0=3.0, grid=g)
    x, t = (rng.uniform(0.15, 0.8, 6), rng.uniform(0.05, 0.8, 6)), rng.uniform(0.2, 1.2, 6)
    # null gauge: A_0 and A_n coincide after the reduction
    A0_1 = C.potentials.A0(x, t) + red.psi.derivative("t")(x, t)
    np.testing.assert_allclose(A0_1, red.alpha(x, t), atol=1e-10)
    c = lambda xx, tt: np.exp(1j * red.psi(xx, tt))
    q = lambda xx: metric.g_det(xx) ** 0.25
    lhs = apply_operator(red.coefficients(), _w, x, t)
    rhs = q(x) / c(x, t) * apply_operator(C, lambda xx, tt: c(xx, tt) * _w(xx, tt) / q(xx), x, t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6 * np.abs(rhs).max())


def test_reduce_rejects_non_boundary_normal_metric():
    metric = conformal_metric(2, 0.2, (0.5, 0.5), 0.3)
    with pytest.raises(FieldError):
        reduce_operator(metric, PotentialSet.zero(2), grid=Grid((1.0, 1.0), (8, 8)))


def test_direct_reduced_forms():
    s1 = lambda d: sampler_from_spec(d, 1)
    red = direct_reduced(flat_metric(1), s1({"terms": [{"amplitude": 0.2, "factors": [
        {"type": "tpoly", "coeffs": [0, 1]}]}]}), (), s1(-0.5))
    x, t = (np.array([0.3]),), np.array([0.7])
    # V2 = V1 + 2i d_s alpha, d_s = (d_t - d_n)/2
    assert red.V2(x, t)[0] == pytest.approx(-0.5 + 0.2j)
    assert red.coefficients().form == "reduced"
    with pytest.raises(FieldError):
        direct_reduced(flat_metric(2), s1(0.0))


def test_pullback_coefficients_commute_with_operator(rng):
    phi = bump_map((1.0, 1.0), (0.08, 0.06))
    C = _coeffs_2d(conformal_metric(2, 0.2, (0.5, 0.5), 0.3))
    Cy = pullback_coefficients(C, phi)
    y, t = (rng.uniform(0.2, 0.8, 5), rng.uniform(0.2, 0.8, 5)), rng.uniform(0.2, 1.0, 5)
    # w lives in y coordinates; in x it is w(phi(x))
    lhs = apply_operator(Cy, _w, y, t)
    rhs = apply_operator(C, lambda xx, tt: _w(phi.forward(xx), tt), phi.inverse(y), t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * np.abs(rhs).max())
