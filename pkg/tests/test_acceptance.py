"""End-to-end acceptance checks on the shipped scenarios through the CLI.

Each test prints one ``PASS`` or ``FAIL`` line with the measured value and the pinned tolerance;
the lines are repeated in the terminal summary.
"""

import io
import json
import math
import time

import pytest

from conftest import ACCEPTANCE_LINES
from dtnlab import cli

# pinned tolerances
ORDER_RATIO = (3.4, 4.6)
ORDER_RUNTIME_S = 30.0
INVARIANCE_MAX = 1e-2
INVARIANCE_REDUCTION = 1.8
GREEN_MAX = 1e-2
GREEN_PAIRS = 10
SELF_ADJOINT_MAX = 1e-3
WKB_SLOPE = {"0": -0.8, "1": -1.7}
AN_MAX = {1: 0.05, 2: 0.08}
G_MAX, B_MAX, C_MAX, A1_MAX = 0.05, 0.10, 0.10, 0.10
UNFLAGGED_MIN = 0.95
ENERGY_MEMBERS = 20
ENERGY_VARIATION = 0.20
PAIR_REL_MAX = 1e-2
PAIR_RATIO = (1 / 3, 3.0)
VARIANTS = ("zero", "const", "linear_t")

_cache: dict = {}


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def verb(outdir, name, scenario, *extra, tag=""):
    key = (name, scenario, extra, tag)
    if key not in _cache:
        dest = outdir / f"{scenario}_{name}{tag}"
        out, err = io.StringIO(), io.StringIO()
        t0 = time.perf_counter()
        code = cli.run([name, "--scenario", scenario, "--out", str(dest), *extra], stdout=out, stderr=err)
        elapsed = time.perf_counter() - t0
        assert code == 0, err.getvalue()
        report = json.loads((dest / f"{name}.json").read_text())
        _cache[key] = (report["results"], elapsed, dest)
    return _cache[key]


def verdict(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_c01_solver_order(outdir):
    res, elapsed, _ = verb(outdir, "forward", "dalembert_1d", "--refine", "1")
    r = res["ratios"][0]
    ok = ORDER_RATIO[0] <= r <= ORDER_RATIO[1] and elapsed < ORDER_RUNTIME_S
    verdict("1 solver order", ok, f"ratio {r:.4f} in {list(ORDER_RATIO)}, runtime {elapsed:.1f} s < {ORDER_RUNTIME_S:g} s")


def _invariance(outdir, scenario, expect):
    res, _, _ = verb(outdir, "invariance", scenario)
    trs = res["transforms"]
    assert len(trs) == expect
    parts, ok = [], True
    for name, tr in trs.items():
        d0, red = tr["difference"][0], tr["reduction"][0]
        ok &= d0 <= INVARIANCE_MAX and red >= INVARIANCE_REDUCTION
        parts.append(f"{name} {d0:.2e} (x{red:.2f})")
    return ok, ", ".join(parts) + f"; need <= {INVARIANCE_MAX:g} and reduction >= {INVARIANCE_REDUCTION}"


def test_c02_gauge_invariance(outdir):
    ok, detail = _invariance(outdir, "gauge_1d", 3)
    verdict("2 gauge invariance", ok, detail)


def test_c03_diffeomorphism_invariance(outdir):
    ok, detail = _invariance(outdir, "diffeo_2d", 1)
    verdict("3 diffeomorphism invariance", ok, detail)


def test_c04_green_identity(outdir):
    parts, ok = [], True
    for sc in ("dalembert_1d", "complex_1d"):
        res, _, _ = verb(outdir, "green", sc)
        d = res["max_defect"]
        ok &= res["pairs"] == GREEN_PAIRS and d[0] <= GREEN_MAX and d[1] < d[0]
        parts.append(f"{sc} {d[0]:.2e} -> {d[1]:.2e}")
    verdict("4 Green identity", ok, ", ".join(parts) + f" over {GREEN_PAIRS} pairs; need <= {GREEN_MAX:g}, decreasing")


def test_c05_self_adjointness(outdir):
    parts, ok = [], True
    for sc in ("gauge_1d", "diffeo_2d"):
        res, _, _ = verb(outdir, "dtn", sc)
        v = res["levels"][0]["self_adjoint_defect"]
        ok &= v <= SELF_ADJOINT_MAX
        parts.append(f"{sc} {v:.2e}")
    # control: complex potentials must not pass as self-adjoint
    res, _, _ = verb(outdir, "dtn", "complex_1d")
    ctrl = res["levels"][0]["self_adjoint_defect"]
    ok &= ctrl > 10 * SELF_ADJOINT_MAX
    verdict("5 self-adjointness", ok, ", ".join(parts) + f"; need <= {SELF_ADJOINT_MAX:g} "
            f"(control complex_1d {ctrl:.2e} > {10 * SELF_ADJOINT_MAX:g})")


def test_c06_wkb_remainder(outdir):
    res, _, _ = verb(outdir, "wkb", "recon_1d")
    slopes = {N: res["orders"][N]["slope"] for N in WKB_SLOPE}
    ok = all(slopes[N] <= WKB_SLOPE[N] for N in WKB_SLOPE)
    verdict("6 WKB remainder", ok, ", ".join(f"N={N} slope {slopes[N]:.3f} <= {WKB_SLOPE[N]}" for N in WKB_SLOPE))


def _recon(outdir, scenario):
    res, _, _ = verb(outdir, "reconstruct", scenario)
    assert set(res["variants"]) == set(VARIANTS)
    return res["variants"]


def test_c07_normal_potential_recovery(outdir):
    parts, ok = [], True
    for sc, n in (("recon_1d", 1), ("recon_2d", 2)):
        for name, v in _recon(outdir, sc).items():
            e = v["A_n_relerr"]["max"]
            ok &= v["A_n_relerr"]["count"] > 0 and e <= AN_MAX[n]
            parts.append(f"{sc}/{name} {e:.2e}")
    verdict("7 A_n recovery", ok, ", ".join(parts) + f"; need <= {AN_MAX[1]:g} (n=1), {AN_MAX[2]:g} (n=2)")


def test_c08_tangential_recovery(outdir):
    parts, ok = [], True
    for name, v in _recon(outdir, "recon_2d").items():
        vals = {k: v[f"{k}_relerr"]["max"] for k in ("G", "B", "C", "A1")}
        frac = v["unflagged_fraction"]
        ok &= (vals["G"] <= G_MAX and vals["B"] <= B_MAX and vals["C"] <= C_MAX and vals["A1"] <= A1_MAX
               and frac >= UNFLAGGED_MIN)
        parts.append(f"{name} G {vals['G']:.2e} B {vals['B']:.2e} C {vals['C']:.2e} A1 {vals['A1']:.2e} "
                     f"unflagged {frac:.3f}")
    verdict("8 tangential recovery", ok, "; ".join(parts) +
            f"; need G <= {G_MAX:g}, B, C <= {B_MAX:g}, A1 <= {A1_MAX:g}, unflagged >= {UNFLAGGED_MIN}")


def test_c09_energy_estimates(outdir):
    parts, ok = [], True
    for sc in ("dalembert_1d", "gauge_1d", "complex_1d"):
        assert cli.Scenario.from_file(cli.scenario_path(sc)).data["energy"]["members"] == ENERGY_MEMBERS
        res, _, _ = verb(outdir, "energy", sc)
        fwd, rev = res["ratio_forward"], res["ratio_reverse"]
        finite = all(math.isfinite(x) and x > 0 for x in fwd + rev)
        var = max(res["variation_forward"], res["variation_reverse"])
        ok &= finite and var < ENERGY_VARIATION
        parts.append(f"{sc} fwd {fwd[0]:.3f} rev {rev[0]:.3f} var {var:.1e}")
    verdict("9 energy estimates", ok, ", ".join(parts) + f"; need finite, variation < {ENERGY_VARIATION:g}")


def test_c10_equivalent_pair_identities(outdir):
    parts, ok = [], True
    for sc in ("dalembert_1d", "complex_1d"):
        res, _, _ = verb(outdir, "lemma24", sc)
        rel = res["max_relative"][0]
        lo, hi = res["norm_ratio_range"][0]
        ok &= rel <= PAIR_REL_MAX and PAIR_RATIO[0] <= lo and hi <= PAIR_RATIO[1]
        parts.append(f"{sc} rel {rel:.2e} ratio [{lo:.6f}, {hi:.6f}]")
    verdict("10 equivalent-pair identities", ok,
            ", ".join(parts) + f"; need rel <= {PAIR_REL_MAX:g}, ratio in [1/3, 3]")


def test_c11_determinism(outdir):
    runs = [("forward", "dalembert_1d", ("--refine", "1")), ("green", "complex_1d", ()),
            ("energy", "gauge_1d", ()), ("dtn", "complex_1d", ())]
    compared, ok = 0, True
    for name, sc, extra in runs:
        _, _, first = verb(outdir, name, sc, *extra)
        _, _, second = verb(outdir, name, sc, *extra, tag="_again")
        for f in sorted(first.iterdir()):
            if f.suffix in (".csv", ".json"):
                compared += 1
                ok &= f.read_bytes() == (second / f.name).read_bytes()
    verdict("11 determinism", ok, f"{compared} CSV/JSON files byte-identical across repeated runs")
