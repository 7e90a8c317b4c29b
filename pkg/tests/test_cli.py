import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from dtnlab import cli
from dtnlab.dtn import DtNMap

GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def shipped(name):
    return json.loads(cli.scenario_path(name).read_text())


def write(tmp_path, data, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


def test_list_shows_corpus():
    code, out, _ = run("list")
    assert code == 0
    names = out.split()
    assert names == cli.list_scenarios() and len(names) == 6
    assert {"dalembert_1d", "gauge_1d", "diffeo_2d", "recon_1d", "recon_2d", "complex_1d"} == set(names)


@pytest.mark.parametrize("name", cli.list_scenarios())
def test_shipped_scenarios_load_and_round_trip(name):
    sc = cli.Scenario.from_file(cli.scenario_path(name))
    again = cli.Scenario.from_text(sc.to_json())
    assert again.data == sc.data and again.sha256 == sc.sha256
    assert again.to_json() == sc.to_json()
    d = sc.data
    assert d["times"]["T0"] > 2 * sc.t_star + d["blr"]["T_star_star"]
    assert d["blr"]["justification"].strip()


def test_output_key_does_not_change_hash(tmp_path):
    d = shipped("dalembert_1d")
    a = cli.Scenario.from_dict(d)
    d["output"] = str(tmp_path / "elsewhere")
    assert cli.Scenario.from_dict(d).sha256 == a.sha256
    d["seed"] = 8
    assert cli.Scenario.from_dict(d).sha256 != a.sha256


def test_unknown_key_reports_line(tmp_path):
    text = cli.scenario_path("dalembert_1d").read_text()
    lines = text.splitlines()
    at = next(i for i, ln in enumerate(lines) if '"cfl"' in ln)
    lines.insert(at, '    "clf_typo": 1.0,')
    p = tmp_path / "bad.json"
    p.write_text("\n".join(lines))
    code, _, err = run("forward", "--scenario", p, "--out", tmp_path / "o")
    assert code == 2
    assert f"bad.json:{at + 1}:" in err and "clf_typo" in err


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "schema_version": 1,\n  "name": oops\n}\n')
    code, _, err = run("forward", "--scenario", p)
    assert code == 2 and "broken.json:3:" in err


def test_hypothesis_violation_is_config_error(tmp_path):
    d = shipped("dalembert_1d")
    d["times"]["T0"] = 7.5  # 2 T* + T** = 8
    code, _, err = run("forward", "--scenario", write(tmp_path, d), "--out", tmp_path / "o")
    assert code == 2 and "T0 = 7.5 must exceed" in err


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["numerics"].update(cfl=1.5), "cfl"),
    (lambda d: d["metric"].update(preset="hyperbolic"), "preset"),
    (lambda d: d["potentials"].update(alpha=0.3), "does not belong"),
    (lambda d: d["times"].update(s0=0.2), "T1 <= s0"),
    (lambda d: d["metric"].update(preset="constant", params={"matrix": [[-1.0]]}), "positive definite"),
])
def test_semantic_and_schema_errors(tmp_path, mutate, needle):
    d = shipped("dalembert_1d")
    mutate(d)
    code, _, err = run("forward", "--scenario", write(tmp_path, d), "--out", tmp_path / "o")
    assert code == 2 and needle in err


def test_missing_section_is_config_error(tmp_path):
    code, _, err = run("reconstruct", "--scenario", "dalembert_1d", "--out", tmp_path)
    assert code == 2 and "no 'probes' section" in err


def test_zero_signal_gives_zero_slices(tmp_path):
    d = json.loads((GOLDEN / "golden_1d.json").read_text())
    d["forward"] = {"signal": {"type": "zero"}, "T_end": 1.0, "slices": [0.5, 1.0]}
    code, out, _ = run("forward", "--scenario", write(tmp_path, d), "--out", tmp_path / "o", "--check")
    assert code == 0 and "[ok  ] zero signal" in out
    rows = (tmp_path / "o" / "forward_slices.csv").read_text().splitlines()[2:]
    assert rows and all(r.split(",")[-2:] == ["0.0000000000e+00"] * 2 for r in rows)


def test_golden_outputs_are_byte_identical(tmp_path):
    code, out, _ = run("forward", "--scenario", GOLDEN / "golden_1d.json", "--out", tmp_path, "--refine", 1,
                       "--check")
    assert code == 0
    for name in ("forward_slices.csv", "forward_norms.csv", "convergence.csv"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes(), name


def test_every_output_carries_the_scenario_hash(tmp_path):
    sc = cli.Scenario.from_file(cli.scenario_path("complex_1d"))
    code, _, _ = run("dtn", "--scenario", "complex_1d", "--out", tmp_path)
    assert code == 0
    files = sorted(tmp_path.iterdir())
    assert {f.suffix for f in files} == {".csv", ".json", ".bin"}
    for f in files:
        if f.suffix == ".csv":
            assert f.read_text().splitlines()[0] == f"# scenario_sha256={sc.sha256}"
        elif f.suffix == ".json":
            assert json.loads(f.read_text())["scenario_sha256"] == sc.sha256
        else:
            assert DtNMap.load(f).meta["scenario_sha256"] == sc.sha256


def test_baseline_comparison_and_refusal(tmp_path):
    code, _, _ = run("dtn", "--scenario", "complex_1d", "--out", tmp_path / "a")
    assert code == 0
    base = tmp_path / "a" / "dtn_L0.bin"
    code, _, _ = run("dtn", "--scenario", "complex_1d", "--out", tmp_path / "b", "--baseline", base)
    assert code == 0
    report = json.loads((tmp_path / "b" / "dtn.json").read_text())
    assert report["results"]["baseline_difference"] == 0.0
    d = shipped("complex_1d")
    d["seed"] = d["seed"] + 1
    code, _, err = run("dtn", "--scenario", write(tmp_path, d), "--out", tmp_path / "c", "--baseline", base)
    assert code == 2 and "different scenario" in err


def test_unresolved_probe_is_numerical_failure(tmp_path):
    d = shipped("recon_1d")
    d["probes"]["k"] = 4000.0
    code, _, err = run("reconstruct", "--scenario", write(tmp_path, d), "--out", tmp_path / "o")
    assert code == 3 and "ResolutionError" in err


def test_missed_threshold_exits_4_only_with_check(tmp_path):
    # at unit CFL the 1D scheme is exact, so the error ratio is round-off noise
    d = json.loads((GOLDEN / "golden_1d.json").read_text())
    d["numerics"]["cfl"] = 1.0
    p = write(tmp_path, d)
    code, out, _ = run("forward", "--scenario", p, "--out", tmp_path / "o", "--refine", 1, "--check")
    assert code == 4 and "[MISS] error ratio" in out
    code, _, _ = run("forward", "--scenario", p, "--out", tmp_path / "o", "--refine", 1)
    assert code == 0
    assert json.loads((tmp_path / "o" / "forward.json").read_text())["passed"] is False


def test_reports_are_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run("green", "--scenario", "complex_1d", "--out", tmp_path / sub, "--refine", 0)[0] == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_bad_arguments():
    assert run("forward")[0] == 2
    assert run("frobnicate", "--scenario", "x")[0] == 2
    assert run("forward", "--scenario", "dalembert_1d", "--refine", "-1")[0] == 2
    assert run("forward", "--scenario", "no_such_scenario")[0] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dtnlab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dtnlab ")
