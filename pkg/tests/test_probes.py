import numpy as np
import pytest
from scipy.integrate import quad

from dtnlab.fields import apply_operator, direct_reduced, sampler_from_spec
from dtnlab.geometry import Grid, flat_metric, tangential_metric
from dtnlab.probes import (BumpCutoff, GOProbe, Lattice, Mollifier, Phase, ProbeError, ResolutionError,
                           SwitchOn, go_boundary_trace, lattice_L1, max_resolved_k, smooth_step,
                           transport_recursion)


def _alpha_t(n):
    return sampler_from_spec({"terms": [{"amplitude": 0.2, "factors": [{"type": "tpoly", "coeffs": [0, 1]}]}]}, n)


def _red_1d():
    s = lambda d: sampler_from_spec(d, 1)
    alpha = s({"terms": [{"amplitude": 0.3, "factors": [{"type": "gauss", "center": [0.3], "width": 0.4},
                                                        {"type": "tpoly", "coeffs": [1, 0.5]}]}]})
    V1 = s({"terms": [{"amplitude": -0.5, "factors": [{"type": "gauss", "center": [0.2], "width": 0.3}]}]})
    return direct_reduced(flat_metric(1), alpha, (), V1, True)


def _red_2d():
    s = lambda d: sampler_from_spec(d, 2)
    alpha = s({"terms": [{"amplitude": 0.3, "factors": [{"type": "gauss", "center": [0.1, 0.2], "width": 0.4}]}]})
    A1 = s({"terms": [{"amplitude": 0.2, "factors": [{"type": "cos", "k": [2.0, 1.0], "omega": 0.5}]}]})
    V1 = s(-0.3)
    return direct_reduced(tangential_metric(0.2, (0.0, 0.2), 0.3), alpha, (A1,), V1, True)


def test_smooth_step_properties():
    z = np.linspace(-0.5, 1.5, 401)
    v = smooth_step(z)
    assert v[z <= 0].max() == 0.0 and v[z >= 1].min() == 1.0
    assert np.all(np.diff(v) >= 0)
    np.testing.assert_allclose(smooth_step(z) + smooth_step(1 - z), 1.0, atol=1e-14)


def test_cutoffs():
    chi = BumpCutoff(1.0, 0.1)
    assert chi(np.array([0.9, 1.0, 1.1])).min() == 1.0
    assert chi(np.array([0.8, 1.2, 0.5])).max() == 0.0
    assert chi.support == pytest.approx((0.8, 1.2))
    for kind in ("erf", "smooth"):
        on = SwitchOn(0.5, 0.1, kind)
        assert on(np.array([0.4, 0.5]))[0] == 0.0 and on(np.array([0.61, 3.0])).min() == 1.0
    with pytest.raises(ValueError):
        SwitchOn(0.0, 1.0, "step")


def test_mollifier_has_unit_mass():
    for r in (0.05, 0.3):
        m = Mollifier(0.2, r)
        assert quad(lambda y: float(m(np.array(y))), 0.2 - r, 0.2 + r, epsabs=1e-13)[0] == pytest.approx(1.0, abs=1e-10)
        assert m(np.array([0.2 + r, 0.2 - 1.01 * r])).max() == 0.0


def test_phase_closed_form(rng):
    ph = Phase(_alpha_t(1), 1, 1.5)
    y, t = rng.uniform(0, 0.5, 7), rng.uniform(0.5, 1.0, 7)
    s = t - y
    np.testing.assert_allclose(ph.at((y,), t), -0.4 * (s * y + 0.5 * y**2), atol=1e-13)


def test_phase_transport_equation(rng):
    red = _red_2d()
    ph = Phase(red.alpha, 2, 1.5)
    x = (rng.uniform(-0.2, 0.2, 6), rng.uniform(0.05, 0.4, 6))
    t = rng.uniform(0.6, 1.0, 6)
    e = 1e-5
    # along t - y_n = const the phase changes at rate -2 alpha
    db = (ph.at((x[0], x[1] + e), t + e) - ph.at((x[0], x[1] - e), t - e)) / (2 * e)
    np.testing.assert_allclose(db, -2 * red.alpha(x, t), atol=1e-8)
    np.testing.assert_allclose(ph.at((x[0], 0 * x[1]), t), 0.0)


@pytest.mark.parametrize("dim", [1, 2])
def test_lattice_operator_matches_direct_application(dim):
    red = _red_1d() if dim == 1 else _red_2d()
    h = 0.01
    lat = Lattice(np.arange(0.5, 0.7 + h / 2, h), np.arange(0.1, 0.3 + h / 2, h),
                  None if dim == 1 else np.arange(-0.1, 0.1 + h / 2, h))
    x, t = lat.physical()

    def a(xx, tt):
        s = tt - xx[-1]
        v = np.exp(1j * (s + 0.5 * xx[-1])) * np.cos(2 * s * xx[-1])
        return v if dim == 1 else v * np.exp(-((xx[0] - 0.05) ** 2) / 0.1)

    got = lattice_L1(a(x, t), lat, red)
    ref = apply_operator(red.coefficients(), a, x, t)
    ok = np.isfinite(got)
    assert ok.sum() > 0.3 * ok.size
    assert np.abs(got[ok] - ref[ok]).max() < 1e-5 * np.abs(ref[ok]).max()


def test_first_transport_equation_holds():
    red = _red_1d()
    probe = GOProbe.bump(red, 50.0, 1.0, 1.5, 0.5, N=1)
    amps = transport_recursion(probe)
    lat = amps.lattice
    a0, a1 = amps.values[0], amps.values[1]
    x, t = lat.physical()
    # along a lattice column d_tau = -(1/2) d_y
    a1_y = np.gradient(a1, lat.hy, axis=1, edge_order=2)
    res = -2 * a1_y - 4j * red.alpha(x, t) * a1 + lattice_L1(a0, lat, red)
    inner = (slice(8, -8), slice(8, -8))
    scale = np.abs(lattice_L1(a0, lat, red)[inner]).max()
    assert np.abs(res[inner]).max() < 1e-3 * scale
    np.testing.assert_allclose(a1[:, np.argmin(np.abs(lat.y))], 0.0, atol=1e-14)


def test_resolution_and_support_errors():
    red = _red_1d()
    g = Grid((1.0,), (100,))
    assert max_resolved_k(g) == pytest.approx(2 * np.pi / (10 * 0.01))
    with pytest.raises(ResolutionError) as err:
        go_boundary_trace(GOProbe.bump(red, 1000.0, 1.0, 1.5, 0.5), g)
    assert err.value.k_max == pytest.approx(max_resolved_k(g))
    with pytest.raises(ProbeError):
        go_boundary_trace(GOProbe.bump(red, 10.0, 0.55, 1.5, 0.5), g)
    with pytest.raises(ProbeError):
        GOProbe.bump(_red_2d(), 10.0, 1.0, 1.5, 0.5)


def test_boundary_trace_values():
    red = _red_1d()
    g = Grid((1.0,), (400,))
    p = GOProbe.bump(red, 20.0, 1.0, 1.5, 0.5)
    f = go_boundary_trace(p, g)
    assert f.values(1.0)[0, 0] == pytest.approx(1.0)
    assert f.values(0.6)[0, 0] == 0.0
