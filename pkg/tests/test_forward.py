import numpy as np
import pytest

from dtnlab import kernels
from dtnlab.fields import Coefficients, PotentialSet, sampler_from_spec
from dtnlab.forward import (BoundaryData, CFLError, CharacteristicSlab, CompatibilityError, Stencil,
                            SurfaceRecorder, energy_ratio_check, march, random_band_limited, solve_forward,
                            stable_dt)
from dtnlab.geometry import Grid, conformal_metric, constant_metric, flat_metric


def pulse(t, c=0.3, w=0.05):
    return np.exp(-0.5 * ((t - c) / w) ** 2) - np.exp(-0.5 * (c / w) ** 2)


def dpulse(t, c=0.3, w=0.05):
    return -(t - c) / w**2 * np.exp(-0.5 * ((t - c) / w) ** 2)


def flat(n):
    return Coefficients(flat_metric(n), PotentialSet.zero(n))


def _err_1d(cells, cfl):
    g = Grid((1.0,), (cells,))
    wf = solve_forward(flat(1), lambda t: pulse(t), 0.9, g, cfl=cfl, store=True)
    x = g.axes()[0]
    exact = np.where(wf.times[-1] - x > 0, pulse(wf.times[-1] - x), 0.0)
    return np.abs(wf.u[0, -1] - exact).max()


def test_dalembert_second_order():
    e1, e2 = _err_1d(200, 0.5), _err_1d(400, 0.5)
    assert 3.4 <= e1 / e2 <= 4.6


def test_unit_cfl_is_exact_in_1d():
    assert _err_1d(200, 1.0) < 1e-11


@pytest.mark.parametrize("scheme", ["standard", "averaged"])
def test_standing_mode_2d(scheme):
    errs = []
    for m in (24, 48):
        g = Grid((1.0, 1.0), (m, m))
        X, Y = g.mesh()
        u0 = np.sin(np.pi * X) * np.sin(np.pi * Y)
        T = 0.6
        wf = march(flat(2), g, BoundaryData.zero(g), 0.0, T, cfl=0.5, initial=(u0[None], 0 * u0[None]),
                   store=True, scheme=scheme)
        exact = u0 * np.cos(np.sqrt(2) * np.pi * wf.times[-1])
        errs.append(np.abs(wf.u[0, -1] - exact).max())
    assert 3.4 <= errs[0] / errs[1] <= 4.6


def test_averaged_scheme_allows_unit_cfl_and_is_exact_for_normal_waves():
    g = Grid((4.0, 1.0), (80, 100))
    dt_std, dt_avg = stable_dt(flat(2), g, 1.0), stable_dt(flat(2), g, 1.0, "averaged")
    assert dt_avg == pytest.approx(g.h[1]) and dt_std < dt_avg
    wf = solve_forward(flat(2), lambda x, t: pulse(t) * np.ones_like(x), 0.8, g, cfl=1.0, store=True,
                       scheme="averaged")
    y = g.axes()[1]
    # the zero side walls have not reached the middle column by t = 0.8
    exact = np.where(wf.times[-1] - y > 0, pulse(wf.times[-1] - y), 0.0)
    assert np.abs(wf.u[0, -1, 40] - exact).max() < 1e-10


def _potentials(n, rng):
    s = lambda d: sampler_from_spec(d, n)
    A0 = s({"terms": [{"amplitude": 0.3, "factors": [{"type": "gauss", "center": [0.5] * n, "width": 0.3},
                                                     {"type": "tpoly", "coeffs": [1, 0.5]}]}]})
    A = tuple(s({"terms": [{"amplitude": 0.2 + 0.1 * j, "factors": [{"type": "cos", "k": [3.0] * n,
                                                                     "omega": 1.0}]}]}) for j in range(n))
    return PotentialSet(A0, A, s([-0.3, 0.1]), False)


@pytest.mark.parametrize("case", ["1d", "2d", "2d-cross", "2d-avg"])
def test_loop_and_numpy_kernels_agree(rng, case):
    n = 1 if case == "1d" else 2
    metric = {"1d": conformal_metric(1, 0.2, (0.5,), 0.2), "2d": conformal_metric(2, 0.2, (0.5, 0.5), 0.2),
              "2d-cross": constant_metric([[1.0, 0.3], [0.3, 0.8]]),
              "2d-avg": conformal_metric(2, 0.2, (0.5, 0.5), 0.2)}[case]
    g = Grid((1.0,) * n, (30,) * n)
    C = Coefficients(metric, _potentials(n, rng))
    scheme = "averaged" if case == "2d-avg" else "standard"
    st = Stencil(C, g, 0.3 * stable_dt(C, g, 1.0, scheme), scheme)
    args = st.at(0.4)
    shp = (3,) + g.shape
    up = rng.standard_normal(shp) + 1j * rng.standard_normal(shp)
    uc = rng.standard_normal(shp) + 1j * rng.standard_normal(shp)
    a, b = np.zeros(shp, complex), np.zeros(shp, complex)
    if n == 1:
        kernels.step_1d_loops(up, uc, a, *args, st.dt, g.h[0])
        kernels.step_1d_numpy(up, uc, b, *args, st.dt, g.h[0])
    else:
        kernels.step_2d_loops(up, uc, a, *args, st.dt, g.h[0], g.h[1])
        kernels.step_2d_numpy(up, uc, b, *args, st.dt, g.h[0], g.h[1])
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_cfl_and_compatibility_errors():
    g = Grid((1.0,), (50,))
    with pytest.raises(CFLError):
        march(flat(1), g, BoundaryData.zero(g), 0.0, 1.0, dt=1.5 * g.h[0])
    with pytest.raises(CompatibilityError):
        solve_forward(flat(1), lambda t: 1.0 + 0 * t, 1.0, g)


def test_dtn_trace_conventions():
    g = Grid((1.0,), (800,))
    wf = solve_forward(flat(1), lambda t: pulse(t), 0.8, g, cfl=0.5)
    t = wf.times
    inner = wf.dtn_trace("interior_normal")[0, :, 0]
    outer = wf.dtn_trace("exterior_conormal")[0, :, 0]
    # u = f(t - x): du/dx = -f'(t) at x = 0
    scale = np.abs(dpulse(t)).max()
    assert np.abs(inner + dpulse(t)).max() < 1e-3 * scale
    np.testing.assert_allclose(outer, -inner)


def test_surface_trace_on_characteristic():
    g = Grid((1.0,), (400,))
    T = 0.9
    rec = SurfaceRecorder([("tau", T)], max_depth=0.4)
    solve_forward(flat(1), lambda t: pulse(t, 0.5, 0.05), T, g, cfl=0.5, recorders=[rec])
    (tr,) = rec.traces()
    # tau = 0 is t = T - y; the right-moving wave there is f(T - 2 y)
    np.testing.assert_allclose(tr.t, T - tr.yn, atol=1e-12)
    assert np.abs(tr.u[0] - pulse(tr.t - tr.yn, 0.5, 0.05)).max() < 5e-3


def test_slab_coordinates_round_trip():
    slab = CharacteristicSlab(0.4, 1.4, 0.9, (0.2, 0.8), 1.0)
    s, tau = slab.to_null(0.1, 0.7)
    assert slab.from_null(s, tau) == pytest.approx((0.1, 0.7))
    assert slab.depth == pytest.approx(0.5)
    assert slab.patch(3) == pytest.approx((0.2 - 2.0, 0.8 + 2.0))
    with pytest.raises(ValueError):
        CharacteristicSlab(0.4, 1.4, 1.5)


def test_random_fields_are_seeded():
    x = (np.linspace(0, 1, 50),)
    a = random_band_limited(np.random.default_rng(3), x, [(0, 1)])
    b = random_band_limited(np.random.default_rng(3), x, [(0, 1)])
    np.testing.assert_array_equal(a, b)
    assert a[0] == 0 and a[-1] == 0


def test_energy_ratios_finite():
    g = Grid((2.0,), (200,))
    out = energy_ratio_check(flat(1), g, 0.4, 1.4, members=4, seed=1)
    vals = [v for v in out.values() if isinstance(v, float)]
    assert vals and all(np.isfinite(v) and v > 0 for v in vals)
