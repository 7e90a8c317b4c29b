import numpy as np
import pytest
from scipy.integrate import quad

from dtnlab.geometry import (CausticError, GeometryError, Grid, boundary_distance, bump_map, compose,
                             conformal_metric, constant_metric, flat_metric, identity_map, pullback_metric,
                             rotation_map, semigeodesic_chart, tangential_metric, verify_semigeodesic)


def test_grid_basics():
    g = Grid((2.0, 1.0), (20, 10), origin=(-1.0, 0.0))
    assert g.shape == (21, 11)
    assert g.h == pytest.approx((0.1, 0.1))
    assert g.axes()[0][0] == -1.0 and g.axes()[0][-1] == pytest.approx(1.0)
    assert g.refined().cells == (40, 20)
    assert g.boundary_patches["gamma0"].sum() == 21


@pytest.mark.parametrize("kw", [dict(lengths=(1.0,), cells=(1,)), dict(lengths=(-1.0,), cells=(10,)),
                                dict(lengths=(1.0, 1.0), cells=(4,)),
                                dict(lengths=(1.0, 1.0), cells=(4, 4), gamma=(0.5, 0.2))])
def test_grid_rejects_bad_input(kw):
    with pytest.raises(GeometryError):
        Grid(**kw)


def test_metric_gradient_matches_finite_differences(rng):
    x = (rng.uniform(0.2, 0.8, 7), rng.uniform(0.2, 0.8, 7))
    for m in (conformal_metric(2, 0.3, (0.5, 0.4), 0.2), tangential_metric(0.25, (0.4, 0.5), 0.3)):
        G = m.grad(x)
        for d in range(2):
            e = 1e-6
            xp = tuple(c + (e if k == d else 0) for k, c in enumerate(x))
            xm = tuple(c - (e if k == d else 0) for k, c in enumerate(x))
            fd = (m.ginv(xp) - m.ginv(xm)) / (2 * e)
            np.testing.assert_allclose(G[..., d], fd, atol=1e-7)


def test_flat_distance_is_height():
    g = Grid((1.0, 0.7), (20, 14))
    d, tstar = boundary_distance(flat_metric(2), g)
    np.testing.assert_allclose(d, g.mesh()[1], atol=1e-12)
    assert tstar == pytest.approx(0.7)


def test_conformal_distance_matches_travel_time():
    m = conformal_metric(1, 0.4, (0.3,), 0.1)
    g = Grid((1.0,), (800,))
    d, tstar = boundary_distance(m, g)
    c = lambda x: 1 + 0.4 * np.exp(-0.5 * (x - 0.3) ** 2 / 0.01)
    for x in (0.1, 0.3, 0.55, 1.0):
        exact = quad(lambda s: 1 / c(s), 0, x, points=[0.3])[0]
        assert d[int(round(x * 800))] == pytest.approx(exact, abs=2e-5)
    assert tstar == pytest.approx(d[-1])


def test_constant_metric_distance():
    # g^{yy} = 4 makes the vertical travel time half the coordinate height
    g = Grid((1.0, 1.0), (10, 10))
    _, tstar = boundary_distance(constant_metric([[1.0, 0.0], [0.0, 4.0]]), g)
    assert tstar == pytest.approx(0.5)


def test_bump_map_fixes_boundary_and_jacobian(rng):
    L, o = (1.4, 0.8), (-0.7, 0.0)
    phi = bump_map(L, (0.1, 0.07), o)
    s = rng.uniform(-0.7, 0.7, 9)
    for edge in [(s, np.zeros(9)), (s, np.full(9, 0.8)), (np.full(9, -0.7), s * 0.5 + 0.4)]:
        y = phi.forward(edge)
        np.testing.assert_allclose(y[0], edge[0], atol=1e-14)
        np.testing.assert_allclose(y[1], edge[1], atol=1e-14)
    x = (rng.uniform(-0.6, 0.6, 9), rng.uniform(0.1, 0.7, 9))
    J = phi.jacobian(x)
    e = 1e-6
    for j in range(2):
        xp = tuple(c + (e if k == j else 0) for k, c in enumerate(x))
        xm = tuple(c - (e if k == j else 0) for k, c in enumerate(x))
        fp, fm = phi.forward(xp), phi.forward(xm)
        for i in range(2):
            np.testing.assert_allclose(J[..., i, j], (fp[i] - fm[i]) / (2 * e), atol=1e-8)
    back = phi.inverse(phi.forward(x))
    np.testing.assert_allclose(back[0], x[0], atol=1e-12)
    np.testing.assert_allclose(back[1], x[1], atol=1e-12)


def test_pullback_under_rotation_is_conjugation():
    th = 0.3
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    M = np.array([[1.5, 0.2], [0.2, 0.8]])
    pm = pullback_metric(constant_metric(M), rotation_map(th))
    y = (np.array([0.1, 0.4]), np.array([0.3, 0.9]))
    np.testing.assert_allclose(pm.ginv(y), np.broadcast_to(R @ M @ R.T, (2, 2, 2)), atol=1e-12)


def test_compose_with_identity(rng):
    phi = bump_map((1.0, 1.0), (0.05, 0.05))
    both = compose(identity_map(2), phi)
    x = (rng.uniform(0, 1, 5), rng.uniform(0, 1, 5))
    np.testing.assert_allclose(np.stack(both.forward(x)), np.stack(phi.forward(x)))


def test_semigeodesic_chart_flattens_metric(rng):
    m = conformal_metric(2, 0.25, (0.5, 0.3), 0.25)
    g = Grid((1.0, 1.0), (40, 40))
    assert verify_semigeodesic(m, g) > 0.1
    chart = semigeodesic_chart(m, g, depth=0.4, patch=(0.2, 0.8))
    y = (rng.uniform(0.3, 0.7, 6), rng.uniform(0.02, 0.35, 6))
    x = chart.inverse(y)
    J = chart.jacobian(x)
    G = J @ m.ginv(x) @ np.swapaxes(J, -1, -2)
    np.testing.assert_allclose(G[..., 1, 1], 1.0, atol=1e-6)
    np.testing.assert_allclose(G[..., 1, 0], 0.0, atol=1e-6)
    # on the boundary the chart is the identity
    x0 = chart.inverse((y[0], np.zeros(6)))
    np.testing.assert_allclose(x0[0], y[0], atol=1e-12)


def test_semigeodesic_chart_1d_is_travel_time():
    m = conformal_metric(1, 0.3, (0.4,), 0.15)
    chart = semigeodesic_chart(m, Grid((1.0,), (200,)), depth=0.8)
    c = lambda s: 1 + 0.3 * np.exp(-0.5 * (s - 0.4) ** 2 / 0.15**2)
    x = np.array([0.2, 0.5, 0.9])
    y = chart.forward((x,))[0]
    exact = [quad(lambda s: 1 / c(s), 0, xi)[0] for xi in x]
    np.testing.assert_allclose(y, exact, atol=1e-8)


def test_lens_produces_caustic():
    # a strongly focusing slow region
    m = conformal_metric(2, -0.7, (0.5, 0.25), 0.1)
    with pytest.raises(CausticError) as err:
        semigeodesic_chart(m, Grid((1.0, 1.0), (50, 50)), depth=0.9, patch=(0.2, 0.8))
    assert 0.0 < err.value.max_depth < 0.9


def test_flat_is_semigeodesic():
    assert verify_semigeodesic(flat_metric(2), Grid((1.0, 1.0), (4, 4))) == 0.0
    assert verify_semigeodesic(tangential_metric(), Grid((1.0, 1.0), (4, 4), origin=(-0.5, 0.0))) == 0.0
