"""Scenario runner: ``dtnlab <verb> --scenario FILE --out DIR [--refine L] [--check]``.

A scenario is a strict JSON document validated against ``schema/scenario.v1.json``; unknown keys
are rejected with the offending line. Every artifact carries the SHA-256 of the canonical scenario
text (``# scenario_sha256=...`` as the first CSV line, a ``scenario_sha256`` field in JSON reports,
a 32-byte field in DTN1 files). Nothing time- or host-dependent is written, so reruns are
byte-identical.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 threshold miss with ``--check``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from . import __version__
from . import dtn as D
from . import reconstruct as R
from .fields import (Coefficients, FieldError, PotentialSet, ReducedCoefficients, Sampler, direct_reduced,
                     gauge_apply, gauge_from_spec, pullback_coefficients, reduce_operator, sampler_from_spec)
from .forward import (BoundaryData, CharacteristicSlab, Recorder, SolverError, energy_ratio_check, march)
from .geometry import (GeometryError, Grid, boundary_distance, bump_map, conformal_metric, constant_metric,
                       flat_metric, identity_map, tangential_metric, verify_semigeodesic)
from .probes import GOProbe, ProbeError, remainder_decay

__all__ = ["Scenario", "ScenarioError", "main", "VERBS", "list_scenarios", "scenario_path"]

REPORT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class ScenarioError(ValueError):
    """Invalid scenario (schema, semantics or an unmet hypothesis)."""


# ------------------------------------------------------------------------------- scenario files


def _schema() -> dict:
    return json.loads(resources.files("dtnlab").joinpath("schema/scenario.v1.json").read_text())


def list_scenarios() -> list[str]:
    folder = resources.files("dtnlab").joinpath("scenarios")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def scenario_path(name: str) -> Path:
    """Path of a shipped scenario by name."""
    return Path(str(resources.files("dtnlab").joinpath("scenarios", f"{name}.json")))


def _ws(text: str, i: int) -> int:
    while i < len(text) and text[i] in " \t\r\n":
        i += 1
    return i


def _locate(text: str, path: Sequence) -> int:
    """1-based line of the value at ``path`` (best effort: stops at the deepest resolvable key)."""
    dec = json.JSONDecoder()
    i = _ws(text, 0)
    try:
        for key in path:
            if text[i] == "{":
                i = _ws(text, i + 1)
                while text[i] != "}":
                    k, i = dec.raw_decode(text, i)
                    i = _ws(text, _ws(text, i) + 1)
                    if k == key:
                        break
                    _, i = dec.raw_decode(text, i)
                    i = _ws(text, i)
                    if text[i] == ",":
                        i = _ws(text, i + 1)
                else:
                    break
            elif text[i] == "[":
                i = _ws(text, i + 1)
                for _ in range(int(key)):
                    _, i = dec.raw_decode(text, i)
                    i = _ws(text, i)
                    if text[i] == ",":
                        i = _ws(text, i + 1)
            else:
                break
    except (ValueError, IndexError, TypeError):
        pass
    return text.count("\n", 0, i) + 1


def _fmt_path(path: Sequence) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _schema_errors(data, text: str, source: str) -> list[str]:
    validator = jsonschema.Draft202012Validator(_schema())
    msgs = []
    for err in sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path]):
        path = list(err.absolute_path)
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            allowed = set(err.schema.get("properties", {}))
            for extra in sorted(set(err.instance) - allowed):
                line = _locate(text, path + [extra])
                msgs.append(f"{source}:{line}: {_fmt_path(path + [extra])}: unknown key")
            continue
        line = _locate(text, path)
        msgs.append(f"{source}:{line}: {_fmt_path(path)}: {err.message}")
    return msgs


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class Scenario:
    """A validated scenario document.

    ``data`` is the parsed JSON; ``sha256`` hashes its canonical form without the ``output`` entry,
    so moving the output directory keeps provenance.
    """

    data: dict
    source: str = "<scenario>"
    text: str = ""

    # -- construction
    @classmethod
    def from_text(cls, text: str, source: str = "<scenario>") -> "Scenario":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        errs = _schema_errors(data, text, source)
        if errs:
            raise ScenarioError("\n".join(errs))
        sc = cls(data, source, text)
        sc._semantic_checks()
        return sc

    @classmethod
    def from_file(cls, path) -> "Scenario":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ScenarioError(f"{path}: cannot read scenario ({exc.strerror})") from None
        return cls.from_text(text, str(path))

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "Scenario":
        return cls.from_text(json.dumps(data, indent=2), source)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    @property
    def sha256(self) -> str:
        body = {k: v for k, v in self.data.items() if k != "output"}
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()

    # -- accessors
    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def n(self) -> int:
        return len(self.data["grid"]["lengths"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def section(self, key: str) -> dict:
        if key not in self.data:
            raise ScenarioError(f"{self.source}: scenario has no '{key}' section")
        return self.data[key]

    def times(self, *keys: str) -> tuple:
        t = self.data["times"]
        missing = [k for k in keys if k not in t]
        if missing:
            raise ScenarioError(f"{self.source}: times.{missing[0]} is required here")
        return tuple(float(t[k]) for k in keys)

    @property
    def cfl(self) -> float:
        return float(self.data.get("numerics", {}).get("cfl", 0.5))

    @property
    def scheme(self) -> str:
        return self.data.get("numerics", {}).get("scheme", "standard")

    @property
    def form(self) -> str:
        return self.data["potentials"]["form"]

    def grid(self, level: int = 0) -> Grid:
        g = self.data["grid"]
        gamma = self.data.get("patches", {}).get("gamma")
        base = Grid(tuple(g["lengths"]), tuple(g["cells"]), tuple(g["origin"]) if "origin" in g else None,
                    tuple(gamma) if gamma else None)
        return base.refined(2 ** level) if level else base

    def metric(self):
        m = self.data["metric"]
        p = m.get("params", {})
        n = self.n
        if m["preset"] == "flat":
            return flat_metric(n)
        if m["preset"] == "conformal":
            return conformal_metric(n, p.get("amplitude", 0.2), p.get("center"), p.get("width", 0.25))
        if m["preset"] == "tangential":
            if n != 2:
                raise ScenarioError(f"{self.source}: the 'tangential' metric needs n = 2")
            return tangential_metric(p.get("amplitude", 0.2), tuple(p.get("center", (0.0, 0.0))),
                                     p.get("width", 0.3))
        if "matrix" not in p:
            raise ScenarioError(f"{self.source}: the 'constant' metric needs params.matrix")
        return constant_metric(p["matrix"])

    def _field(self, spec, label: str) -> Sampler:
        try:
            return sampler_from_spec(spec, self.n, label)
        except FieldError as exc:
            raise ScenarioError(f"{self.source}: {label}: {exc}") from None

    def _fields(self, specs, count: int, label: str) -> tuple:
        specs = list(specs) if specs is not None else [0.0] * count
        if len(specs) != count:
            raise ScenarioError(f"{self.source}: {label} needs {count} entries, got {len(specs)}")
        return tuple(self._field(s, f"{label}[{j}]") for j, s in enumerate(specs))

    def potentials(self) -> PotentialSet:
        p = self.data["potentials"]
        if p["form"] != "original":
            raise ScenarioError(f"{self.source}: potentials are given in reduced form")
        return PotentialSet(self._field(p.get("A0", 0.0), "A0"), self._fields(p.get("A"), self.n, "A"),
                            self._field(p.get("V", 0.0), "V"), bool(p["self_adjoint"]))

    def reduced(self, overrides: dict | None = None) -> ReducedCoefficients:
        p = dict(self.data["potentials"])
        if p["form"] != "reduced":
            raise ScenarioError(f"{self.source}: potentials are not in reduced form")
        p.update(overrides or {})
        return direct_reduced(self.metric(), self._field(p.get("alpha", 0.0), "alpha"),
                              self._fields(p.get("A_tan"), self.n - 1, "A_tan"),
                              self._field(p.get("V1", 0.0), "V1"), bool(p["self_adjoint"]))

    def coefficients(self) -> Coefficients:
        if self.form == "reduced":
            return self.reduced().coefficients()
        return Coefficients(self.metric(), self.potentials(), "original", self.name)

    def boundary_distance(self) -> float:
        _, t_star = boundary_distance(self.metric(), self.grid())
        return t_star

    # -- semantics
    def _semantic_checks(self):
        d, src, n = self.data, self.source, self.n
        g = d["grid"]
        if len(g["cells"]) != n or len(g.get("origin", [0.0] * n)) != n:
            raise ScenarioError(f"{src}:{_locate(self.text, ['grid'])}: grid entries disagree on the dimension")
        gamma = d.get("patches", {}).get("gamma")
        if gamma is not None and n != 2:
            raise ScenarioError(f"{src}:{_locate(self.text, ['patches', 'gamma'])}: Gamma needs n = 2")
        pot = d["potentials"]
        wrong = ({"alpha", "A_tan", "V1"} if pot["form"] == "original" else {"A0", "A", "V"}) & set(pot)
        if wrong:
            key = sorted(wrong)[0]
            raise ScenarioError(f"{src}:{_locate(self.text, ['potentials', key])}: '{key}' does not belong to "
                                f"form '{pot['form']}'")
        try:
            grid = self.grid()
            metric = self.metric()
            coeffs = self.coefficients()
            T0 = float(d["times"]["T0"])
            coeffs.potentials.validate(grid, np.linspace(0.0, T0, 5))
            if metric.on(grid).min_eigenvalue <= 0:
                raise ScenarioError(f"{src}: metric is not positive definite on the grid")
        except (FieldError, GeometryError) as exc:
            raise ScenarioError(f"{src}: {exc}") from None
        t = d["times"]
        if "T1" in t and "T" in t and not t["T1"] < t["T"]:
            raise ScenarioError(f"{src}:{_locate(self.text, ['times', 'T'])}: need T1 < T")
        if "s0" in t and not (t.get("T1", 0.0) <= t["s0"] < t.get("T", math.inf)):
            raise ScenarioError(f"{src}:{_locate(self.text, ['times', 's0'])}: need T1 <= s0 < T")
        for tr in d.get("transforms", []):
            if "diffeo" in tr and n != 2:
                raise ScenarioError(f"{src}:{_locate(self.text, ['transforms'])}: diffeomorphisms need n = 2")
        if "dtn" in d and n == 2 and "n_space" not in d["dtn"]:
            raise ScenarioError(f"{src}:{_locate(self.text, ['dtn'])}: dtn.n_space is required for n = 2")
        if "probes" in d and pot["form"] != "reduced":
            raise ScenarioError(f"{src}:{_locate(self.text, ['probes'])}: probes need reduced-form potentials")
        # the uniqueness hypothesis T0 > 2 T* + T**
        t_star = self.boundary_distance()
        tss = float(d["blr"]["T_star_star"])
        if not T0 > 2 * t_star + tss:
            raise ScenarioError(f"{src}:{_locate(self.text, ['times', 'T0'])}: T0 = {T0:g} must exceed "
                                f"2 T* + T** = {2 * t_star + tss:.6g} (T* = {t_star:.6g})")
        object.__setattr__(self, "_t_star", t_star)

    @property
    def t_star(self) -> float:
        return self._t_star  # type: ignore[attr-defined]


# ----------------------------------------------------------------------------- artifact writing


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``None``, complex to ``[re, im]``."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (complex, np.complexfloating)):
        return [_clean(float(v.real)), _clean(float(v.imag))]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _num(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.10e}"


class Writer:
    """Collects artifacts in memory and writes them at the end of a verb (single writer)."""

    def __init__(self, out: Path, scenario: Scenario):
        self.out = out
        self.scenario = scenario
        self.files: dict[str, bytes] = {}

    def csv(self, name: str, header: Sequence[str], rows, raw: str | None = None):
        buf = io.StringIO()
        buf.write(f"# scenario_sha256={self.scenario.sha256}\n")
        if raw is not None:
            buf.write(raw)
        else:
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_num(x) for x in r])
        self.files[name] = buf.getvalue().encode()

    def json(self, name: str, obj: dict):
        self.files[name] = (json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n").encode()

    def binary(self, name: str, payload: bytes):
        self.files[name] = payload

    def flush(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            (self.out / name).write_bytes(self.files[name])


@dataclass
class Check:
    name: str
    value: float | None
    op: str
    threshold: object
    passed: bool

    def as_dict(self):
        return {"name": self.name, "value": self.value, "op": self.op, "threshold": self.threshold,
                "passed": bool(self.passed)}


def _check(name: str, value, op: str, threshold) -> Check:
    v = float(value) if value is not None else float("nan")
    if op == "<=":
        ok = v <= threshold
    elif op == ">=":
        ok = v >= threshold
    elif op == "<":
        ok = v < threshold
    elif op == "in":
        ok = threshold[0] <= v <= threshold[1]
    elif op == "==":
        ok = v == threshold
    else:  # pragma: no cover
        raise ValueError(op)
    return Check(name, v if math.isfinite(v) else None, op, threshold, bool(ok and math.isfinite(v)))


def _report(verb: str, sc: Scenario, refine: int, results: dict, checks: list[Check]) -> dict:
    return {
        "report_version": REPORT_VERSION,
        "verb": verb,
        "scenario": sc.name,
        "scenario_sha256": sc.sha256,
        "dtnlab_version": __version__,
        "refine": refine,
        "T_star": sc.t_star,
        "results": results,
        "checks": [c.as_dict() for c in checks],
        "passed": all(c.passed for c in checks) if checks else None,
    }


# ------------------------------------------------------------------------------------- helpers


def _signal(sc: Scenario, grid: Grid) -> tuple[BoundaryData, Callable | None]:
    spec = sc.section("forward")["signal"]
    if spec["type"] == "zero":
        return BoundaryData.zero(grid), None
    c, w, a = spec["center"], spec["width"], spec.get("amplitude", 1.0)
    if c / w < 5.0:
        raise ScenarioError(f"{sc.source}: pulse centre must be at least 5 widths after t = 0")
    f0 = a * math.exp(-((c / w) ** 2))

    def f(t):
        return a * np.exp(-((np.asarray(t, float) - c) / w) ** 2) - f0

    if grid.n == 1:
        return BoundaryData(lambda t: np.reshape(f(t), (1, 1)), 1, 1), f
    tan = spec.get("tangential")
    xb = grid.axes()[0]
    prof = np.exp(-((xb - tan["center"]) / tan["width"]) ** 2) if tan else np.ones_like(xb)
    return BoundaryData(lambda t: (f(t) * prof)[None, :], 1, xb.size), None


def _dalembert(f: Callable, L: float, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Exact solution on ``[0, L]`` with data ``f`` at ``x = 0`` and ``u = 0`` at ``x = L`` (images)."""
    t = np.asarray(t, float)[..., None]
    out = np.zeros(np.broadcast_shapes(t.shape, x.shape))

    def F(z):
        return np.where(z >= 0, f(np.maximum(z, 0.0)), 0.0)

    m = 0
    while 2 * m * L <= float(t.max()) + 1e-12:
        out += F(t - 2 * m * L - x) - F(t - 2 * (m + 1) * L + x)
        m += 1
    return out


class _SliceRecorder(Recorder):
    """Field snapshots at requested times plus discrete ``L2``/max norms at every level."""

    def __init__(self, times: Sequence[float]):
        self.want = [float(t) for t in times]

    def start(self, ctx):
        super().start(ctx)
        lv = [int(round((t - ctx.t0) / ctx.dt)) for t in self.want]
        self.levels = {min(max(k, 0), ctx.nt): None for k in lv}
        self.norms = np.zeros((ctx.nt + 1, 2))
        self.cell = float(np.prod(ctx.grid.h))

    def record(self, n, u):
        a = np.abs(u[0])
        self.norms[n] = (math.sqrt(float(np.sum(a * a)) * self.cell), float(a.max()))
        if n in self.levels:
            self.levels[n] = u[0].copy()


def _levels(refine: int) -> range:
    return range(refine + 1)


def _dtn_basis(sc: Scenario, section: dict, window: tuple) -> D.SplineBasis:
    patch = None
    if sc.n == 2:
        patch = tuple(section.get("patch") or sc.data.get("patches", {}).get("gamma") or ())
        if len(patch) != 2:
            raise ScenarioError(f"{sc.source}: n = 2 needs a basis patch (dtn.patch or patches.gamma)")
    return D.SplineBasis(window, int(section["n_time"]), patch, int(section.get("n_space", 1)))


def _stamp(lam: D.DtNMap, sc: Scenario) -> D.DtNMap:
    lam.meta["scenario_sha256"] = sc.sha256
    return lam


def _assemble(coeffs, sc: Scenario, grid: Grid, basis: D.SplineBasis, conv: str, label: str) -> D.DtNMap:
    return _stamp(D.assemble_dtn(coeffs, grid, basis, conv, cfl=sc.cfl, label=label), sc)


def _transformed(sc: Scenario, tr: dict, grid: Grid) -> Coefficients:
    base = sc.coefficients()
    T0 = float(sc.data["times"]["T0"])
    out = base
    if "gauge" in tr:
        try:
            c = gauge_from_spec(tr["gauge"], sc.n)
            c.check(grid, np.linspace(0.0, T0, 5))
        except FieldError as exc:
            raise ScenarioError(f"{sc.source}: transform {tr['label']!r}: {exc}") from None
        out = Coefficients(out.metric, gauge_apply(out.potentials, c, grid, np.linspace(0.0, T0, 5)), out.form,
                           out.label)
    if "diffeo" in tr:
        spec = tr["diffeo"]
        g0 = sc.grid()
        if spec["preset"] == "identity":
            phi = identity_map(sc.n)
        else:
            eps = tuple(spec.get("params", {}).get("eps", (0.08, 0.06)))
            phi = bump_map(g0.lengths, eps, g0.origin)
        if out.form != "original":
            raise ScenarioError(f"{sc.source}: diffeomorphism pullbacks need original-form potentials")
        out = pullback_coefficients(out, phi, grid)
    return out


# ---------------------------------------------------------------------------------------- verbs


def cmd_forward(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    sec = sc.section("forward")
    T0 = float(sc.data["times"]["T0"])
    T_end = float(sec.get("T_end", T0))
    exact = sec.get("exact", "none")
    if exact == "dalembert" and (sc.n != 1 or sc.form != "original" or sc.data["metric"]["preset"] != "flat"
                                 or sc.data["potentials"].get("A0", 0.0) != 0.0 or "A" in sc.data["potentials"]
                                 or sc.data["potentials"].get("V", 0.0) != 0.0):
        raise ScenarioError(f"{sc.source}: the d'Alembert oracle needs n = 1, a flat metric and no potentials")
    coeffs = sc.coefficients()
    slices = sec.get("slices", [])
    errs, rows, checks = [], [], []
    res: dict = {"levels": []}
    for lev in _levels(refine):
        g = sc.grid(lev)
        data, f = _signal(sc, g)
        rec = _SliceRecorder(slices)
        recs: list = [rec]
        if exact == "dalembert":
            err_rec = _ErrorRecorder(f, g.lengths[0], g.axes()[0])
            recs.append(err_rec)
        wf = march(coeffs, g, data, 0.0, T_end, cfl=sc.cfl, recorders=recs, keep_rows=False, scheme=sc.scheme)
        entry = {"cells": list(g.cells), "dt": wf.dt, "steps": wf.nt, "max_abs": float(rec.norms[:, 1].max())}
        if exact == "dalembert":
            errs.append(err_rec.err)
            entry["max_error"] = err_rec.err
        res["levels"].append(entry)
        if lev == 0:
            axes = g.axes()
            mesh = np.meshgrid(*axes, indexing="ij")
            for lvl, u in sorted(rec.levels.items()):
                t = lvl * wf.dt
                for idx in np.ndindex(u.shape):
                    rows.append([t, *idx, *(m[idx] for m in mesh), u[idx].real, u[idx].imag])
            norm_rows = [[k * wf.dt, *rec.norms[k]] for k in range(wf.nt + 1)]
            coords = ["x"] if sc.n == 1 else ["x1", "x2"]
            idxs = ["i"] if sc.n == 1 else ["i", "j"]
            out.csv("forward_slices.csv", ["t", *idxs, *coords, "re", "im"], rows)
            out.csv("forward_norms.csv", ["t", "l2", "max"], norm_rows)
    if exact == "dalembert":
        table = [[lev, sc.grid(lev).cells[0], sc.grid(lev).h[0], e, (errs[lev - 1] / e if lev else float("nan"))]
                 for lev, e in enumerate(errs)]
        out.csv("convergence.csv", ["level", "cells", "h", "max_error", "ratio"], table)
        if len(errs) > 1:
            res["ratios"] = [errs[j] / errs[j + 1] for j in range(len(errs) - 1)]
            checks.append(_check("error ratio h -> h/2", res["ratios"][0], "in", [3.4, 4.6]))
    if sec["signal"]["type"] == "zero":
        checks.append(_check("zero signal gives a zero field", max(e["max_abs"] for e in res["levels"]), "==", 0.0))
    return res, checks


class _ErrorRecorder(Recorder):
    def __init__(self, f, L, x):
        self.f, self.L, self.x = f, L, x
        self.err = 0.0

    def record(self, n, u):
        t = self.ctx.t0 + n * self.ctx.dt
        ex = _dalembert(self.f, self.L, self.x, t)
        self.err = max(self.err, float(np.abs(u[0] - ex).max()))


def cmd_dtn(sc: Scenario, out: Writer, refine: int, baseline: str | None = None) -> tuple[dict, list]:
    sec = sc.section("dtn")
    T0 = float(sc.data["times"]["T0"])
    window = tuple(sec.get("window", (0.0, T0)))
    conv = sec.get("convention", "exterior_conormal")
    basis = _dtn_basis(sc, sec, window)
    coeffs = sc.coefficients()
    real = bool(sc.data["potentials"]["self_adjoint"])
    res: dict = {"basis": basis.describe(), "convention": conv, "levels": []}
    checks = []
    maps = []
    for lev in _levels(refine):
        g = sc.grid(lev)
        lam = _assemble(coeffs, sc, g, basis, conv, f"level{lev}")
        maps.append(lam)
        entry = {"cells": list(g.cells), "norm": lam.norm(), "causality_defect": lam.causality_defect()}
        # reported for complex scenarios too, where it must stay visibly nonzero
        lam_s = _stamp(D.adjoint_dtn(coeffs, g, basis, conv, T1=window[0], cfl=sc.cfl), sc)
        entry["self_adjoint_defect"] = float(np.linalg.norm(lam.matrix - lam_s.matrix, 2) / lam.norm())
        res["levels"].append(entry)
        out.binary(f"dtn_L{lev}.bin", lam.to_bytes())
        if lam.matrix.size <= 4096:
            out.csv(f"dtn_L{lev}.csv", [], [], raw=lam.to_csv())
    if len(maps) > 1:
        res["refinement_difference"] = [D.relative_difference(maps[j + 1], maps[j]) for j in range(len(maps) - 1)]
    if real:
        checks.append(_check("self-adjointness defect", res["levels"][0]["self_adjoint_defect"], "<=", 1e-3))
    if baseline is not None:
        try:
            ref = D.DtNMap.load(baseline)
        except (OSError, D.DtNError) as exc:
            raise ScenarioError(f"{baseline}: {exc}") from None
        if ref.meta.get("scenario_sha256") != sc.sha256:
            raise ScenarioError(f"{baseline}: map comes from a different scenario; refusing to compare")
        res["baseline_difference"] = D.relative_difference(ref, maps[0])
    return res, checks


def cmd_invariance(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    trs = sc.section("transforms")
    sec = sc.section("dtn")
    T0 = float(sc.data["times"]["T0"])
    basis = _dtn_basis(sc, sec, tuple(sec.get("window", (0.0, T0))))
    conv = sec.get("convention", "exterior_conormal")
    coeffs = sc.coefficients()
    diffs = {tr["label"]: [] for tr in trs}
    rows = []
    for lev in _levels(refine):
        g = sc.grid(lev)
        lam = _assemble(coeffs, sc, g, basis, conv, "original")
        for tr in trs:
            lam_t = _assemble(_transformed(sc, tr, g), sc, g, basis, conv, tr["label"])
            d = D.relative_difference(lam, lam_t)
            diffs[tr["label"]].append(d)
            rows.append([tr["label"], lev, g.cells[-1], d])
    out.csv("invariance.csv", ["transform", "level", "cells", "relative_difference"], rows)
    checks = []
    res = {"convention": conv, "basis": basis.describe(), "transforms": {}}
    for label, ds in diffs.items():
        entry = {"difference": ds}
        checks.append(_check(f"{label}: difference", ds[0], "<=", 1e-2))
        if len(ds) > 1:
            entry["reduction"] = [ds[j] / ds[j + 1] if ds[j + 1] > 0 else float("inf") for j in range(len(ds) - 1)]
            checks.append(_check(f"{label}: reduction under refinement", entry["reduction"][0], ">=", 1.8))
        res["transforms"][label] = entry
    return res, checks


def _require_boundary_normal(sc: Scenario, coeffs: Coefficients, g: Grid):
    # the slab faces t +- y_n = const are characteristic only when g^{nn} = 1 and g^{nj} = 0
    resid = verify_semigeodesic(coeffs.metric, g)
    if resid > 1e-8:
        raise ScenarioError(f"{sc.source}: metric is not in boundary-normal form (residual {resid:.2e})")


def cmd_green(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    sec = sc.data.get("green", {})
    T1, T = sc.times("T1", "T")
    pairs = int(sec.get("pairs", 10))
    conv = sec.get("convention", "exterior_conormal")
    basis = _dtn_basis(sc, {"n_time": sec.get("n_time", 8), "n_space": sec.get("n_space", 4)}, (T1, T))
    rng = np.random.default_rng(sc.seed)
    F = rng.standard_normal((pairs, basis.size))
    G = rng.standard_normal((pairs, basis.size))
    nf, ng = basis.h1_norm(F), basis.h1_norm(G)
    coeffs = sc.coefficients()
    if sc.form == "original":
        # the slab functional is the null-gauge one; the gauge is 1 on Gamma_0 so the maps agree
        coeffs = reduce_operator(coeffs.metric, coeffs.potentials, float(sc.data["times"]["T0"])).coefficients()
    gamma = sc.data.get("patches", {}).get("gamma")
    slab = CharacteristicSlab(T1, T, T1, tuple(gamma) if gamma else None)
    rows, worst = [], []
    for lev in _levels(refine):
        g = sc.grid(lev)
        _require_boundary_normal(sc, coeffs, g)
        lam = _assemble(coeffs, sc, g, basis, conv, "forward")
        lam_s = _stamp(D.adjoint_dtn(coeffs, g, basis, conv, T1=T1, cfl=sc.cfl), sc)
        tu, tv, _, _ = D.slab_traces(coeffs, g, slab, basis.boundary_data(g, F), basis.boundary_data(g, G),
                                     cfl=sc.cfl)
        A0 = np.atleast_2d(D.volume_functional_A0(tu[0], tv[0], slab))
        defects = []
        for i in range(pairs):
            gap = D.green_gap(lam, lam_s, F[i], G[i], slab)
            a0 = complex(A0[i, i])
            defect = abs(gap - a0) / (nf[i] * ng[i])
            defects.append(defect)
            rows.append([lev, i, gap.real, gap.imag, a0.real, a0.imag, defect])
        worst.append(max(defects))
    out.csv("green.csv", ["level", "pair", "gap_re", "gap_im", "A0_re", "A0_im", "normalised_defect"], rows)
    checks = [_check("normalised Green defect", worst[0], "<=", 1e-2)]
    res = {"convention": conv, "pairs": pairs, "max_defect": worst}
    if len(worst) > 1:
        res["reduction"] = [worst[j] / worst[j + 1] for j in range(len(worst) - 1)]
        checks.append(_check("Green defect decreases under refinement", worst[1] / worst[0], "<", 1.0))
    return res, checks


def cmd_energy(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    sec = sc.data.get("energy", {})
    T1, T = sc.times("T1", "T")
    coeffs = sc.coefficients()
    rows, fw, rv = [], [], []
    for lev in _levels(refine):
        g = sc.grid(lev)
        try:
            r = energy_ratio_check(coeffs, g, T1, T, members=int(sec.get("members", 20)), seed=sc.seed,
                                   cfl=sc.cfl, modes=int(sec.get("modes", 4)))
        except ValueError as exc:
            raise ScenarioError(f"{sc.source}: energy: {exc}") from None
        fw.append(r["ratio_forward"])
        rv.append(r["ratio_reverse"])
        rows.append([lev, g.cells[-1], fw[-1], rv[-1]])
    out.csv("energy.csv", ["level", "cells", "ratio_forward", "ratio_reverse"], rows)
    checks = [_check("forward ratio finite", fw[0] if np.isfinite(fw).all() else float("nan"), ">=", 0.0),
              _check("reverse ratio finite", rv[0] if np.isfinite(rv).all() else float("nan"), ">=", 0.0)]
    res = {"ratio_forward": fw, "ratio_reverse": rv}
    if len(fw) > 1:
        res["variation_forward"] = abs(fw[1] - fw[0]) / fw[0]
        res["variation_reverse"] = abs(rv[1] - rv[0]) / rv[0]
        checks.append(_check("forward ratio variation", res["variation_forward"], "<", 0.2))
        checks.append(_check("reverse ratio variation", res["variation_reverse"], "<", 0.2))
    return res, checks


def cmd_lemma24(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    sec = sc.section("equivalent_pair")
    T1, T, s0 = sc.times("T1", "T", "s0")
    if sc.form != "original":
        raise ScenarioError(f"{sc.source}: the equivalent-pair check needs original-form potentials")
    pairs = int(sec.get("pairs", 3))
    nt = int(sec.get("n_time", 8))
    fb = _dtn_basis(sc, {"n_time": nt + 2, "n_space": 4}, (0.0, T))
    gb = _dtn_basis(sc, {"n_time": nt, "n_space": 4}, (T1, T))
    rng = np.random.default_rng(sc.seed)
    F = rng.standard_normal((pairs, fb.size))
    G = rng.standard_normal((pairs, gb.size))
    coeffs = sc.coefficients()
    gamma = sc.data.get("patches", {}).get("gamma")
    slab = CharacteristicSlab(T1, T, s0, tuple(gamma) if gamma else None)
    rows, rel, ratio = [], [], []
    for lev in _levels(refine):
        g = sc.grid(lev)
        _require_boundary_normal(sc, coeffs, g)
        c2 = _transformed(sc, {"label": "pair", "gauge": sec["gauge"]}, g)
        r = D.verify_equivalent_pair((coeffs, c2), g, slab, fb.boundary_data(g, F), gb.boundary_data(g, G), s0,
                                     cfl=sc.cfl)
        rel_l = np.diag(np.atleast_2d(r["relative"])) if np.ndim(r["relative"]) == 2 else np.ravel(r["relative"])
        rat_l = np.ravel(r["norm_ratio"])
        rel.append(float(rel_l.max()))
        ratio.append((float(rat_l.min()), float(rat_l.max())))
        for i, v in enumerate(rel_l):
            rows.append([lev, i, v])
    out.csv("lemma24.csv", ["level", "pair", "relative_difference"], rows)
    res = {"max_relative": rel, "norm_ratio_range": ratio}
    checks = [_check("functional relative difference", rel[0], "<=", 1e-2),
              _check("norm ratio (min)", ratio[0][0], "in", [1 / 3, 3]),
              _check("norm ratio (max)", ratio[0][1], "in", [1 / 3, 3])]
    return res, checks


def _recon_config(sc: Scenario) -> R.ReconstructionConfig:
    p = sc.section("probes")
    T1, T = sc.times("T1", "T")
    cen = None
    if "centres" in p:
        c = p["centres"]
        cen = tuple(np.round(np.arange(c["start"], c["stop"] + 0.5 * c["step"], c["step"]), 10))
    kw = dict(T1=T1, T=T, k=float(p["k"]), levels=int(p.get("levels", 3)), probe_centres=cen,
              cfl=float(p.get("cfl", 1.0)), scheme=p.get("scheme", "standard"),
              check_tableau=bool(p.get("check_tableau", True)))
    if "widths" in p:
        w = p["widths"]
        kw["widths"] = tuple(w) if len(w) > 1 else (w[0], w[0] / 2)
    elif sc.n == 2:
        raise ScenarioError(f"{sc.source}: probes.widths is required for n = 2")
    if "adjoint_rise" in p:
        kw["adjoint_rise"] = float(p["adjoint_rise"])
    if "probe_rise" in p:
        kw["probe_rise"] = tuple(p["probe_rise"])
    if "tau_fractions" in p:
        kw["tau_fractions"] = tuple(p["tau_fractions"])
    return R.ReconstructionConfig(**kw)


def cmd_reconstruct(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    cfg = _recon_config(sc)
    variants = sc.section("probes").get("variants") or [{"name": "base"}]
    flat = sc.data["metric"]["preset"] == "flat"
    An_tol = 0.05 if sc.n == 1 else 0.08
    res: dict = {"config": cfg.to_dict(), "variants": {}}
    checks = []
    for var in variants:
        name = var["name"]
        over = {k: v for k, v in var.items() if k != "name"}
        red = sc.reduced(over)
        summaries = []
        for lev in _levels(refine):
            g = sc.grid(lev)
            try:
                lay = R.reconstruct(red, g, cfg)
            except (R.ExtractionError, SolverError, ProbeError) as exc:
                raise _Staged(f"reconstruct[{name}, level {lev}]", exc) from exc
            summaries.append(lay.summary)
            suffix = f"_L{lev}" if lev else ""
            out.csv(f"layer_{name}{suffix}.csv", [], [], raw=lay.to_csv())
        s = summaries[0]
        res["variants"][name] = summaries if len(summaries) > 1 else s
        checks.append(_check(f"{name}: A_n max relative error", s["A_n_relerr"].get("max"), "<=", An_tol))
        if sc.n == 2:
            checks.append(_check(f"{name}: G max relative error", s["G_relerr"].get("max"), "<=", 0.05))
            checks.append(_check(f"{name}: B max relative error", s["B_relerr"].get("max"), "<=", 0.10))
            checks.append(_check(f"{name}: C max relative error", s["C_relerr"].get("max"), "<=", 0.10))
            checks.append(_check(f"{name}: unflagged fraction", s["unflagged_fraction"], ">=", 0.95))
            if flat:
                checks.append(_check(f"{name}: A1 max relative error", s["A1_relerr"].get("max"), "<=", 0.10))
    return res, checks


def cmd_wkb(sc: Scenario, out: Writer, refine: int) -> tuple[dict, list]:
    sec = sc.section("wkb")
    if sc.n != 1:
        raise ScenarioError(f"{sc.source}: the remainder study runs in n = 1")
    T1, T = sc.times("T1", "T")
    s0 = float(sec.get("s0", 0.5 * (T1 + T)))
    red = sc.reduced()
    need = {0: -0.8, 1: -1.7}
    rows, res, checks = [], {"orders": {}}, []
    for N in sec["orders"]:
        pr = GOProbe.bump(red, float(sec["k"][0]), s0, T, T1, N=int(N))
        r = remainder_decay(pr, sec["k"], sc.grid(refine), cfl=float(sec.get("cfl", 1.0)))
        res["orders"][str(N)] = {"k": r["k"], "norm": r["norm"], "slope": r["slope"]}
        rows += [[N, k, v, ref] for k, v, ref in zip(r["k"], r["norm"], r["reference"])]
        if N in need:
            checks.append(_check(f"N = {N}: decay slope", r["slope"], "<=", need[N]))
    out.csv("wkb.csv", ["N", "k", "remainder_l2", "reference_l2"], rows)
    return res, checks


class _Staged(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.exc = exc


VERBS = {
    "forward": (cmd_forward, 0, "solve the forward problem; slices, norms and (d'Alembert) convergence"),
    "dtn": (cmd_dtn, 0, "assemble the D-to-N map, its adjoint counterpart and DTN1 files"),
    "invariance": (cmd_invariance, 1, "compare maps under gauge / diffeomorphism transforms"),
    "reconstruct": (cmd_reconstruct, 0, "recover the coefficients near the boundary"),
    "energy": (cmd_energy, 1, "measure the wedge energy constants"),
    "green": (cmd_green, 1, "check the Green identity on the characteristic slab"),
    "lemma24": (cmd_lemma24, 0, "compare projected functionals of a gauge-equivalent pair"),
    "wkb": (cmd_wkb, 0, "geometric-optics remainder decay versus k"),
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtnlab", description="D-to-N laboratory scenario runner")
    ap.add_argument("--version", action="version", version=f"dtnlab {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb, (_, refine, help_) in VERBS.items():
        p = sub.add_parser(verb, help=help_)
        p.add_argument("--scenario", required=True,
                       help="scenario JSON file, or the name of a shipped scenario")
        p.add_argument("--out", help="output directory (default: scenario 'output' or ./out/<name>)")
        p.add_argument("--refine", type=int, default=refine, metavar="LEVELS",
                       help=f"extra refinement levels, each halving h (default {refine})")
        p.add_argument("--check", action="store_true", help="exit 4 if an acceptance threshold is missed")
        if verb == "dtn":
            p.add_argument("--baseline", help="DTN1 file of the same scenario to compare against")
    sub.add_parser("list", help="list the shipped scenarios")
    return ap


def _resolve(arg: str) -> Path:
    p = Path(arg)
    if p.exists() or p.suffix == ".json":
        return p
    return scenario_path(arg)


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    if args.verb == "list":
        for name in list_scenarios():
            print(name, file=stdout)
        return EXIT_OK
    try:
        if args.refine < 0:
            raise ScenarioError("--refine must be non-negative")
        sc = Scenario.from_file(_resolve(args.scenario))
        out_dir = Path(args.out or sc.data.get("output") or Path("out") / sc.name)
        writer = Writer(out_dir, sc)
        fn = VERBS[args.verb][0]
        kwargs = {"baseline": args.baseline} if args.verb == "dtn" else {}
        with np.errstate(invalid="ignore", divide="ignore"):
            results, checks = fn(sc, writer, args.refine, **kwargs)
        report = _report(args.verb, sc, args.refine, results, checks)
        writer.json(f"{args.verb}.json", report)
        writer.flush()
    except ScenarioError as exc:
        print(f"dtnlab: configuration error: {exc}", file=stderr)
        return EXIT_CONFIG
    except _Staged as exc:
        print(f"dtnlab: numerical failure in {exc}", file=stderr)
        return EXIT_NUMERIC
    except (SolverError, D.DtNError, R.ExtractionError, ProbeError, GeometryError, FloatingPointError) as exc:
        kind = EXIT_CONFIG if isinstance(exc, GeometryError) and not type(exc).__name__ == "CausticError" \
            else EXIT_NUMERIC
        label = "configuration error" if kind == EXIT_CONFIG else "numerical failure"
        print(f"dtnlab: {label} in {args.verb}: {type(exc).__name__}: {exc}", file=stderr)
        return kind
    except (ValueError, FieldError) as exc:
        print(f"dtnlab: configuration error in {args.verb}: {exc}", file=stderr)
        return EXIT_CONFIG
    for c in checks:
        mark = "ok  " if c.passed else "MISS"
        print(f"[{mark}] {c.name}: {c.value} {c.op} {c.threshold}", file=stdout)
    print(f"wrote {len(writer.files)} files to {out_dir}", file=stdout)
    if args.check and not all(c.passed for c in checks):
        return EXIT_CHECK
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
