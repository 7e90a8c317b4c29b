import numpy as np
import pytest
from scipy.integrate import quad

from dtnlab import dtn as D
from dtnlab.fields import Coefficients, PotentialSet, gauge_apply, gauge_from_spec, sampler_from_spec
from dtnlab.geometry import Grid, flat_metric


def flat(n):
    return Coefficients(flat_metric(n), PotentialSet.zero(n))


def test_bspline_partition_and_support():
    z = np.linspace(-3, 3, 601)
    # integer translates of the cubic B-spline sum to one
    s = sum(D.bspline3(z - k) for k in range(-6, 7))
    np.testing.assert_allclose(s, 1.0, atol=1e-12)
    assert D.bspline3(np.array([-2.0, 2.0, 2.5])).max() == 0.0
    e = 1e-6
    np.testing.assert_allclose(D.bspline3_d(z), (D.bspline3(z + e) - D.bspline3(z - e)) / (2 * e), atol=1e-8)


def test_basis_vanishes_at_window_ends():
    b = D.SplineBasis((0.5, 2.0), 6, (0.1, 0.9), 4)
    assert b.size == 24
    ends = b.time_values(np.array([0.5, 2.0]))
    assert np.abs(ends).max() < 1e-30
    v = b.evaluate(np.eye(24)[3], np.array([0.3]), np.array([1.0]))
    assert v.shape == (1, 1)


def test_h1_norm_of_single_spline():
    b = D.SplineBasis((0.0, 7.0), 4)
    c = np.eye(4)[1]
    f = lambda t: D.bspline3(np.array([(t - b.time_centers()[1]) / b.dt]))[0]
    fp = lambda t: D.bspline3_d(np.array([(t - b.time_centers()[1]) / b.dt]))[0] / b.dt
    exact = np.sqrt(quad(lambda t: f(t) ** 2 + fp(t) ** 2, 0, 7, limit=200)[0])
    assert b.h1_norm(c)[0] == pytest.approx(exact, rel=1e-4)


def test_flat_1d_map_matches_transport_oracle():
    # without reflections the trace of u = f(t - x) is -f'(t)
    basis = D.SplineBasis((0.0, 1.6), 8)
    g = Grid((1.0,), (800,))
    lam = D.assemble_dtn(flat(1), g, basis, "interior_normal", cfl=0.5)
    tc = basis.time_centers()

    def T(a, t, d=False):
        z = np.array([(t - tc[a]) / basis.dt])
        return (D.bspline3_d(z)[0] / basis.dt) if d else D.bspline3(z)[0]

    M = np.array([[quad(lambda t: -T(j, t, True) * T(i, t), 0, 1.6, limit=200)[0] for j in range(8)]
                  for i in range(8)])
    assert np.linalg.norm(lam.matrix - M, 2) / np.linalg.norm(M, 2) < 2e-3
    assert lam.causality_defect() < 1e-12


def test_gauge_leaves_map_unchanged():
    g = Grid((0.5,), (200,))
    basis = D.SplineBasis((0.1, 0.9), 6)
    s1 = lambda d: sampler_from_spec(d, 1)
    p = PotentialSet(s1(0.2), (s1({"terms": [{"amplitude": 0.3, "factors": [
        {"type": "cos", "k": [4.0], "omega": 0.0}]}]}),), s1(-0.4), True)
    c = gauge_from_spec({"psi": {"terms": [{"amplitude": 0.8, "factors": [
        {"type": "xpow", "axis": 0, "power": 1}, {"type": "tpoly", "coeffs": [1, 0.5]}]}]}}, 1)
    a = D.assemble_dtn(Coefficients(flat_metric(1), p), g, basis)
    b = D.assemble_dtn(Coefficients(flat_metric(1), gauge_apply(p, c, g, [0.0, 0.9])), g, basis)
    assert D.relative_difference(a, b) < 1e-3


def test_binary_round_trip(tmp_path):
    basis = D.SplineBasis((0.0, 1.0), 3, (0.2, 0.8), 2)
    rng = np.random.default_rng(5)
    M = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    lam = D.DtNMap(M, basis, "exterior_conormal", "ab" * 32, True, {"scenario_sha256": "cd" * 32})
    path = tmp_path / "m.bin"
    lam.save(path)
    back = D.DtNMap.load(path)
    np.testing.assert_array_equal(back.matrix, M)
    assert back.basis == basis and back.convention == lam.convention and back.adjoint
    assert back.fingerprint == "ab" * 32 and back.meta["scenario_sha256"] == "cd" * 32
    assert path.read_bytes()[:4] == b"DTN1"
    with pytest.raises(D.DtNError):
        D.DtNMap.from_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(D.DtNError):
        D.DtNMap.from_bytes(path.read_bytes()[:-16])
    rows = lam.to_csv().splitlines()
    assert rows[0] == "row,col,re,im" and len(rows) == 37


def test_mixed_provenance_is_refused():
    basis = D.SplineBasis((0.0, 1.0), 3)
    a = D.DtNMap(np.eye(3, dtype=complex), basis, "interior_normal", "x", meta={"scenario_sha256": "1" * 64})
    b = D.DtNMap(np.eye(3, dtype=complex), basis, "interior_normal", "x", meta={"scenario_sha256": "2" * 64})
    with pytest.raises(D.DtNError):
        D.relative_difference(a, b)
    with pytest.raises(D.DtNError):
        D.green_gap(a, b, np.ones(3), np.ones(3))
    c = D.DtNMap(np.eye(3, dtype=complex), basis, "exterior_conormal", "x")
    with pytest.raises(D.DtNError):
        D.relative_difference(a, c)
    assert D.relative_difference(a, a) == 0.0


def test_green_gap_algebra(rng):
    basis = D.SplineBasis((0.0, 1.0), 4)
    M = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    lam = D.DtNMap(M, basis, "interior_normal", "x")
    star = D.DtNMap(M.conj().T.copy(), basis, "interior_normal", "x", adjoint=True)
    f, g = rng.standard_normal(4) + 1j, rng.standard_normal(4) - 2j
    assert abs(D.green_gap(lam, star, f, g)) < 1e-12
    other = D.DtNMap(np.zeros((4, 4), complex), basis, "interior_normal", "x", adjoint=True)
    assert D.green_gap(lam, other, f, g) == pytest.approx(np.conj(g) @ M @ f)


def test_support_checks():
    g = Grid((1.0,), (50,))
    with pytest.raises(D.SupportError):
        D.assemble_dtn(flat(1), g, D.SplineBasis((0.2, 1.0), 3), t_start=0.5)
    from dtnlab.forward import CharacteristicSlab
    slab = CharacteristicSlab(0.4, 1.4, 0.9)
    lam = D.DtNMap(np.eye(3, dtype=complex), D.SplineBasis((0.0, 1.0), 3), "interior_normal", "x")
    with pytest.raises(D.SupportError):
        D.green_gap(lam, lam, np.ones(3), np.ones(3), slab)
