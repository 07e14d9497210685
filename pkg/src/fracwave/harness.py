"""Scenario files, experiment orchestration, noise injection and the command line.

Every command writes under ``<out>/<scenario_hash>/<command>/``; the
normalized scenario is stored next to it as ``scenario.json`` so that
``report`` can run on the directory alone.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import re
import sys
import warnings
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from . import __version__
from .dnmap import DnRecord, ExteriorInput, dn_matrix, measure
from .forward import (NonlinearitySpec, SolverConfig, nemytskii_modulus, solve_linear, solve_nonlinear,
                      solve_viscous, solve_with_exterior, validate_assumption)
from .inverse import (ControlProblem, InitialDataOperator, PipelineError, RungeObjective, SourceOperator,
                      StagnationError, TikhonovObjective, constant_target, linearization_probe, nonlinearity_at,
                      recover_initial_data, recover_nonlinearity, recover_potential, runge_control, runge_probes,
                      runge_sweep, write_history)
from .lattice import (Grid, RegionMask, frac_laplacian, l2_norm, load_mask, save_mask, smooth_bump,
                      spacetime_l2, sup_norm_in_time)

COMMANDS = ("simulate", "dnmap", "probe", "runge", "recover-nonlinearity", "recover-initial",
            "recover-potential", "verify", "report")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_CENTER = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]}
_BOXES = {"type": "array", "minItems": 1,
          "items": {"type": "array", "minItems": 1,
                    "items": {"oneOf": [{"type": "number"},
                                        {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                         "maxItems": 2}]}}}
_NUMLIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_POSLIST = {"type": "array", "items": _POS, "minItems": 1}


def _field_keys(prefix, kind="bump", center=0.0, width=0.5, amp=0.0):
    return {
        f"{prefix}.kind": {"enum": ["zero", "bump"], "default": kind},
        f"{prefix}.center": dict(_CENTER, default=center),
        f"{prefix}.width": dict(_POS, default=width),
        f"{prefix}.amp": dict(_NUM, default=amp),
    }


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fracwave scenario",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1, "default": 0},
        "grid.n": {"enum": [1, 2], "default": 1},
        "grid.N": {"type": "integer", "minimum": 8, "default": 256},
        "grid.L": dict(_POS, default=8.0),
        "grid.s": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.4},
        "grid.dt": dict(_POS, default=1.0 / 512),
        "grid.nt": {"type": "integer", "minimum": 2, "default": 512},
        "mask.omega": dict(_BOXES, default=[[-1.0, 1.0]]),
        "mask.w1": dict(_BOXES, default=[[-3.0, -1.05], [1.05, 1.5]]),
        "mask.w2": dict(_BOXES, default=[[1.7, 3.2]]),
        "mask.import": {"type": ["string", "null"], "default": None},
        "nonlinearity.kind": {"enum": ["zero", "power", "linear_potential"], "default": "zero"},
        "nonlinearity.r": dict(_NONNEG, default=1.0),
        "nonlinearity.p": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": None},
        **_field_keys("nonlinearity.coef", center=0.0, width=0.8, amp=1.0),
        "nonlinearity.damping": dict(_NONNEG, default=0.0),
        **_field_keys("u0"),
        **_field_keys("u1"),
        "input.center": dict(_CENTER, default=-2.0),
        "input.width": dict(_POS, default=0.6),
        "input.amp": dict(_NUM, default=1.0),
        "input.freq": dict(_NONNEG, default=1.0),
        "dnmap.centers": dict(_NUMLIST, default=[-2.5, -2.0, -1.5, 1.25]),
        "dnmap.width": dict(_POS, default=0.4),
        "dnmap.freqs": {"type": "array", "items": _NONNEG, "minItems": 1, "default": [1.0, 2.0]},
        "solver.picard_tol": dict(_POS, default=1e-10),
        "solver.picard_max_iters": {"type": "integer", "minimum": 1, "default": 30},
        "solver.slab_steps": {"type": "integer", "minimum": 1, "default": 64},
        "solver.cg_tol": dict(_POS, default=1e-12),
        "experiment.kind": {"enum": ["any"] + [c for c in COMMANDS if c != "report"], "default": "any"},
        "experiment.noise": dict(_NONNEG, default=0.0),
        "experiment.probe_epsilons": dict(_POSLIST, default=[0.2, 0.1, 0.05, 0.025]),
        "experiment.epsilons": dict(_POSLIST, default=[0.8, 0.4, 0.2, 0.1, 0.05]),
        "experiment.runge_alphas": dict(_POSLIST, default=[1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]),
        "experiment.runge_iters": {"type": "integer", "minimum": 1, "default": 250},
        "experiment.source_alphas": dict(_POSLIST, default=[1e-9, 1e-10, 1e-11, 1e-12]),
        "experiment.control_alpha": dict(_POS, default=1e-8),
        "experiment.control_iters": {"type": "integer", "minimum": 1, "default": 1000},
        "experiment.control_tol": dict(_POS, default=0.15),
        "experiment.r_known": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": None},
        "experiment.homogeneity_taus": {"type": "array", "items": _NUM, "default": []},
        "experiment.initial_alpha": dict(_POS, default=1e-11),
        "experiment.potential_alpha": dict(_POS, default=1e-10),
        "experiment.probe_iters": {"type": "integer", "minimum": 1, "default": 60},
        "experiment.gauss_newton_iters": {"type": "integer", "minimum": 1, "default": 6},
        "experiment.joint_iters": {"type": "integer", "minimum": 0, "default": 5},
        "experiment.gn_cg_iters": {"type": "integer", "minimum": 1, "default": 100},
        "experiment.data_grid": {"enum": ["same", "fine"], "default": "same"},
    },
}

DEFAULTS = {k: v["default"] for k, v in SCHEMA["properties"].items()}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-8`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[0-9][0-9_]*[eE][-+]?[0-9]+|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


class ScenarioError(ValueError):
    """Scenario file is unreadable or violates the schema; ``keys`` lists the offenders."""

    def __init__(self, keys, messages):
        self.keys = sorted(set(keys))
        self.messages = list(messages)
        super().__init__("invalid scenario: " + "; ".join(self.messages))


def canonical_json(mapping) -> str:
    return json.dumps(mapping, sort_keys=True, separators=(",", ":"), allow_nan=False)


def scenario_hash(mapping) -> str:
    """SHA-256 of the canonical JSON of the default-completed mapping."""
    full = dict(DEFAULTS)
    full.update(mapping)
    return hashlib.sha256(canonical_json(_normalize_numbers(full)).encode()).hexdigest()


def _normalize_numbers(obj):
    # 8 and 8.0 are the same value in a typed scenario
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        return int(obj) if float(obj).is_integer() and abs(obj) < 2 ** 63 else float(obj)
    if isinstance(obj, dict):
        return {k: _normalize_numbers(v) for k, v in obj.items()}
    return [_normalize_numbers(v) for v in obj]


def validate(mapping):
    """Check ``mapping`` against :data:`SCHEMA`, collecting every offending key."""
    if not isinstance(mapping, dict):
        raise ScenarioError(["<root>"], ["scenario must be a mapping of flat keys"])
    keys, messages = [], []
    for err in Draft202012Validator(SCHEMA).iter_errors(mapping):
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(SCHEMA["properties"]))
            keys += extra
            messages += [f"{k}: unknown key" for k in extra]
        else:
            key = str(err.path[0]) if err.path else "<root>"
            keys.append(key)
            messages.append(f"{key}: {err.message}")
    if keys:
        raise ScenarioError(keys, messages)


@dataclass(frozen=True)
class Scenario:
    values: dict
    hash: str

    @classmethod
    def from_mapping(cls, mapping):
        validate(mapping)
        full = dict(DEFAULTS)
        full.update(copy.deepcopy(mapping))
        full = _normalize_numbers(full)
        sc = cls(full, scenario_hash(full))
        sc._check_semantics()
        return sc

    @classmethod
    def load(cls, path):
        """Read a scenario file; a bare name refers to a shipped scenario."""
        p = Path(path)
        if not p.exists() and not p.suffix:
            p = resources.files("fracwave") / "scenarios" / f"{path}.yaml"
        try:
            text = p.read_text()
        except OSError as exc:
            raise ScenarioError(["<file>"], [f"cannot read {path}: {exc}"]) from exc
        try:
            data = yaml.load(text, Loader=_Loader)
        except yaml.YAMLError as exc:
            raise ScenarioError(["<file>"], [f"{path}: not valid YAML ({exc})"]) from exc
        return cls.from_mapping(data if data is not None else {})

    def with_overrides(self, **kv):
        raw = {k: v for k, v in self.values.items()}
        raw.update(kv)
        return Scenario.from_mapping(raw)

    def __getitem__(self, key):
        return self.values[key]

    def _check_semantics(self):
        try:
            g = self.grid()
        except ValueError as exc:
            raise ScenarioError([k for k in self.values if k.startswith("grid.")], [f"grid: {exc}"]) from exc
        try:
            self.mask(g)
        except (ValueError, OSError) as exc:
            raise ScenarioError([k for k in self.values if k.startswith("mask.")], [f"mask: {exc}"]) from exc
        if self["nonlinearity.kind"] == "linear_potential" and self["nonlinearity.coef.amp"] < 0:
            raise ScenarioError(["nonlinearity.coef.amp"], ["nonlinearity.coef.amp: potential must be >= 0"])

    # --- builders -------------------------------------------------------------------------

    def grid(self, refine=1) -> Grid:
        v = self.values
        return Grid(v["grid.n"], v["grid.N"] * refine, float(v["grid.L"]), float(v["grid.s"]),
                    float(v["grid.dt"]) / refine, v["grid.nt"] * refine)

    def mask(self, grid) -> RegionMask:
        if self["mask.import"]:
            mask = load_mask(self["mask.import"])
            if mask.grid != grid:
                raise ValueError("imported mask was written for a different grid")
            return mask
        return RegionMask.from_boxes(grid, self._boxes("mask.omega"), self._boxes("mask.w1"),
                                     self._boxes("mask.w2"))

    def _boxes(self, key):
        return [tuple(tuple(c) if isinstance(c, list) else c for c in box) for box in self[key]]

    def field(self, prefix, grid, mask=None):
        if self[f"{prefix}.kind"] == "zero" or self[f"{prefix}.amp"] == 0:
            return np.zeros(grid.shape)
        out = smooth_bump(grid, self[f"{prefix}.center"], self[f"{prefix}.width"], self[f"{prefix}.amp"])
        return out if mask is None else mask.project(out)

    def coefficient(self, grid, mask):
        return self.field("nonlinearity.coef", grid, mask)

    def spec(self, grid, mask, kind=None) -> NonlinearitySpec:
        kind = kind or self["nonlinearity.kind"]
        p = math.inf if self["nonlinearity.p"] is None else float(self["nonlinearity.p"])
        kw = {}
        if self["nonlinearity.damping"] > 0:
            kw["damping"], kw["lipschitz_g"] = NonlinearitySpec.linear_damping(
                self["nonlinearity.damping"] * mask.omega)
        if kind == "zero":
            return NonlinearitySpec("zero", **kw)
        if kind == "power":
            return NonlinearitySpec.power(self.coefficient(grid, mask), self["nonlinearity.r"], p, **kw)
        return NonlinearitySpec.linear_potential(self.coefficient(grid, mask), p, **kw)

    def solver(self) -> SolverConfig:
        v = self.values
        return SolverConfig(picard_tol=float(v["solver.picard_tol"]), picard_max_iters=v["solver.picard_max_iters"],
                            slab_steps=v["solver.slab_steps"], cg_tol=float(v["solver.cg_tol"]))

    def input(self, grid, mask, label="input"):
        freq = float(self["input.freq"])
        T = grid.T
        return ExteriorInput.separable(grid, mask, smooth_bump(grid, self["input.center"], self["input.width"]),
                                       lambda t: np.sin(freq * np.pi * t / T) ** 2, self["input.amp"], label)


# --- noise -------------------------------------------------------------------------------

def add_noise(record: DnRecord, level, seed, mask: RegionMask | None = None) -> DnRecord:
    """Add i.i.d. Gaussian noise with total size about ``level * ||trace||`` on the ``w2`` nodes."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return record.with_trace(record.trace.copy())
    trace = record.trace
    support = mask.w2 if mask is not None else np.any(trace != 0, axis=0)
    m = int(support.sum()) * trace.shape[0]
    if m == 0:
        return record.with_trace(trace.copy())
    rng = np.random.default_rng(seed)
    sigma = level * float(np.linalg.norm(trace[:, support])) / math.sqrt(m)
    noisy = trace.copy()
    noisy[:, support] += sigma * rng.standard_normal((trace.shape[0], int(support.sum())))
    return record.with_trace(noisy)


def _label_seed(seed, label):
    return [int(seed), zlib.crc32(label.encode())]


# --- oracles -------------------------------------------------------------------------------

def _upsample_input(fine, fine_mask, coarse, phi):
    """Linear interpolation of a coarse space-time field onto a grid refined by 2."""
    if coarse.n != 1:
        raise ValueError("the fine-data mode supports n = 1 only")
    xc = np.append(coarse.coords[0], -coarse.coords[0][0])
    xf = fine.coords[0]
    tc, tf = coarse.times, fine.times
    wrap = np.concatenate([phi, phi[:, :1]], axis=1)
    space = np.stack([np.interp(xf, xc, row) for row in wrap])
    out = np.stack([np.interp(tf, tc, space[:, j]) for j in range(fine.N)], axis=1)
    return out * fine_mask.w1


def make_oracle(sc: Scenario, grid, mask, spec_kind=None, u0=None, u1=None, noise=None, seed=None, cfg=None):
    """Black-box DN map for the scenario's ground truth.

    With ``experiment.data_grid = fine`` the measurement runs on a grid
    refined by two in space and time and the trace is sampled back.
    """
    noise = sc["experiment.noise"] if noise is None else noise
    seed = sc["seed"] if seed is None else seed
    cfg = cfg or sc.solver()
    fine = sc["experiment.data_grid"] == "fine"
    if fine:
        dgrid = sc.grid(refine=2)
        dmask = sc.mask(dgrid)
    else:
        dgrid, dmask = grid, mask
    spec = sc.spec(dgrid, dmask, spec_kind)
    d_u0 = dmask.project(sc.field("u0", dgrid)) if u0 is None else u0
    d_u1 = dmask.project(sc.field("u1", dgrid)) if u1 is None else u1

    def oracle(inp: ExteriorInput):
        if fine:
            finp = ExteriorInput(_upsample_input(dgrid, dmask, grid, inp.field()), 1.0, inp.label)
            rec = measure(dgrid, dmask, spec, d_u0, d_u1, finp, cfg, provenance=sc.hash)
            rec = DnRecord(inp, rec.trace[::2, ::2] * mask.w2, mask.hash, {}, sc.hash)
        else:
            rec = measure(grid, mask, spec, d_u0, d_u1, inp, cfg, provenance=sc.hash)
        if noise > 0:
            rec = add_noise(rec, noise, _label_seed(seed, inp.label), mask)
        return rec

    return oracle


# --- command runners -------------------------------------------------------------------------

def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def _rel(grid, approx, exact, fallback=None):
    """Relative L2 error; a zero ``exact`` is measured against ``fallback`` instead."""
    den = l2_norm(grid, exact)
    if den == 0 and fallback is not None:
        den = l2_norm(grid, fallback)
    return l2_norm(grid, approx - exact) / den if den > 0 else l2_norm(grid, approx)


def run_simulate(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    spec = sc.spec(g, m)
    cfg = sc.solver()
    u0, u1 = sc.field("u0", g, m), sc.field("u1", g, m)
    phi = sc.input(g, m).field() if sc["input.amp"] != 0 else np.zeros((g.nt + 1,) + g.shape)
    traj = solve_with_exterior(g, m, spec, None, u0 + phi[0] * m.exterior, u1, phi, cfg)
    traj.save(out / "trajectory")
    ratios = [p["ratio"] for p in traj.picard_log if p["converged"] and p["ratio"] > 0]
    summary = {"energy_residual": traj.energy_residual(), "max_abs_u": float(np.max(np.abs(traj.u))),
               "slabs": len(traj.picard_log), "max_picard_ratio": max(ratios) if ratios else None,
               "median_picard_ratio": float(np.median(ratios)) if ratios else None,
               "assumption": str(validate_assumption(spec, g))}
    return summary


def run_dnmap(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    spec = sc.spec(g, m)
    basis = []
    for c in sc["dnmap.centers"]:
        for f in sc["dnmap.freqs"]:
            inp = ExteriorInput.separable(g, m, smooth_bump(g, c, sc["dnmap.width"]),
                                          lambda t, f=f: np.sin(f * np.pi * t / g.T) ** 2, 1.0,
                                          f"c{c:g}_f{f:g}")
            if not np.any(inp.phi):
                raise ValueError(f"basis input {inp.label} does not meet w1")
            basis.append(inp)
    mat = dn_matrix(g, m, spec, sc.field("u0", g, m), sc.field("u1", g, m), basis, sc.solver(), threads, sc.hash)
    noise = sc["experiment.noise"]
    if noise > 0:
        mat.records = [add_noise(r, noise, _label_seed(sc["seed"], r.input.label), m) for r in mat.records]
    mat.save(out / "matrix", g, m)
    save_mask(out / "mask", m)
    M = mat.matrix(m)
    sv = np.linalg.svd(M, compute_uv=False)
    with open(out / "singular_values.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "singular_value"))
        for i, x in enumerate(sv):
            w.writerow((i, repr(float(x))))
    return {"columns": mat.labels, "rows": int(M.shape[0]), "noise": noise, "column_norms":
            [float(np.linalg.norm(M[:, k])) for k in range(M.shape[1])]}


def _power_spec(sc, g, m):
    if sc["nonlinearity.kind"] == "power":
        return sc.spec(g, m)
    return sc.spec(g, m, "power")


def run_probe(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    spec = sc.spec(g, m)
    res = linearization_probe(g, m, spec, sc.input(g, m), sorted(sc["experiment.probe_epsilons"], reverse=True),
                              sc.solver(), threads)
    res.save(out, g)
    return {"fitted_slope": res.fitted_slope, "fit_residual": res.fit_residual, "r": spec.r,
            "expected_slope": spec.r + 1 if spec.kind == "power" else None,
            "remainder_l2": res.remainder_norms, "epsilons": res.epsilons}


def run_runge(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    q = sc.coefficient(g, m) if sc["nonlinearity.kind"] == "linear_potential" else None
    sweep = runge_sweep(constant_target(g, m), sc["experiment.runge_alphas"], g, m, q, sc.solver(),
                        max_outer_iters=sc["experiment.runge_iters"])
    rows = []
    for a, o in sweep:
        rows.append({"alpha": a, "achieved_error": o.achieved_error, "objective": o.optimization.objective,
                     "iterations": o.optimization.iterations, "status": o.optimization.status})
        write_history(out / f"history_alpha{a:g}.csv", o.optimization.history)
    write_history(out / "sweep.csv", rows, ("alpha", "achieved_error", "objective", "iterations", "status"))
    errs = [r["achieved_error"] for r in rows]
    return {"errors": errs, "alphas": [r["alpha"] for r in rows], "best_error": min(errs),
            "non_increasing": all(b <= a for a, b in zip(errs, errs[1:]))}


def run_recover_nonlinearity(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    cfg = sc.solver()
    oracle = make_oracle(sc, g, m, "power", np.zeros(g.shape), np.zeros(g.shape))
    control = runge_control(ControlProblem(constant_target(g, m), sc["experiment.control_alpha"],
                                           max_outer_iters=sc["experiment.control_iters"], grad_tol=1e-12),
                            g, m, None, cfg)
    noise = sc["experiment.noise"]
    res = recover_nonlinearity(oracle, g, m, sc["experiment.r_known"], cfg, control=control,
                               epsilons=sc["experiment.epsilons"], alphas=sc["experiment.source_alphas"],
                               noise_level=noise or None, control_tol=sc["experiment.control_tol"],
                               threads=threads)
    q = sc.coefficient(g, m)
    res.summary["f_at_one_error"] = _rel(g, res.f_at_one, q)
    res.summary["r_true"] = sc["nonlinearity.r"]
    checks = []
    for tau in sc["experiment.homogeneity_taus"]:
        direct = nonlinearity_at(oracle, g, m, control, tau, res.r_estimate, cfg,
                                 epsilons=sc["experiment.epsilons"], alphas=sc["experiment.source_alphas"],
                                 threads=threads)
        checks.append({"tau": tau, "mismatch": _rel(g, direct, res.f(tau))})
    res.summary["homogeneity_checks"] = checks
    res.save(out, g)
    return {"r_estimate": res.r_estimate, "f_at_one_error": res.summary["f_at_one_error"],
            "alpha": res.regularization_used, "control_error": control.achieved_error,
            "homogeneity_checks": checks, "noise": noise}


def run_recover_initial(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    cfg = sc.solver()
    oracle = make_oracle(sc, g, m)
    passive = oracle(ExteriorInput.zero(g))
    spec = sc.spec(g, m)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = recover_initial_data(passive, g, m, spec, sc["experiment.initial_alpha"], cfg,
                                   gauss_newton_iters=sc["experiment.gauss_newton_iters"])
    u0, u1 = sc.field("u0", g, m), sc.field("u1", g, m)
    res.summary.update(u0_error=_rel(g, res["u0"], u0), u1_error=_rel(g, res["u1"], u1, u0),
                       warnings=[str(w.message) for w in caught])
    res.save(out, g)
    return {k: res.summary[k] for k in ("u0_error", "u1_error", "warnings")}


def run_recover_potential(sc, out, threads):
    g = sc.grid()
    m = sc.mask(g)
    if sc["nonlinearity.kind"] != "linear_potential":
        raise ScenarioError(["nonlinearity.kind"], ["recover-potential needs nonlinearity.kind = linear_potential"])
    oracle = make_oracle(sc, g, m)
    probes = runge_probes(g, m, iters=sc["experiment.probe_iters"], cfg=sc.solver())
    res = recover_potential(oracle, g, m, sc["experiment.potential_alpha"], sc.solver(), probes=probes,
                            alpha_initial=sc["experiment.initial_alpha"],
                            gauss_newton_iters=sc["experiment.gauss_newton_iters"],
                            joint_iters=sc["experiment.joint_iters"], cg_iters=sc["experiment.gn_cg_iters"])
    a, u0, u1 = sc.coefficient(g, m), sc.field("u0", g, m), sc.field("u1", g, m)
    res.summary.update(a_error=_rel(g, res["a"], a), u0_error=_rel(g, res["u0"], u0),
                       u1_error=_rel(g, res["u1"], u1, u0))
    res.save(out, g)
    return {k: res.summary[k] for k in ("a_error", "u0_error", "u1_error")}


# --- invariant suite ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def _fd_check(fun, x, rng, n_dirs=2, h=1e-2):
    """Worst relative mismatch between adjoint and central-difference directional derivatives."""
    _, grad = fun(x)
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        fd = (fun(x + h * d)[0] - fun(x - h * d)[0]) / (2 * h)
        ad = float(grad @ d)
        worst = max(worst, abs(fd - ad) / max(abs(ad), abs(fd), 1e-300))
    return worst


def verify_suite(sc: Scenario, threads=1):
    """Invariant checks on the scenario grid; returns a list of :class:`Check`."""
    g = sc.grid()
    m = sc.mask(g)
    cfg = sc.solver()
    rng = np.random.default_rng(sc["seed"])
    zero = np.zeros(g.shape)
    checks = []

    # spectral multiplier
    x = g.coords[0]
    k = 2 * np.pi * 3 / g.box_length
    mode = np.cos(k * x)
    err = float(np.max(np.abs(frac_laplacian(g, mode) - k ** (2 * g.s) * mode)))
    checks.append(Check("multiplier_eigenfunction", err <= 1e-10, err, 1e-10))
    const = float(np.max(np.abs(frac_laplacian(g, np.ones(g.shape)))))
    checks.append(Check("multiplier_kills_constants", const <= 1e-12, const, 1e-12))

    # single Fourier mode against the closed form, second order in dt
    errs = []
    dts = (4 * g.dt, 2 * g.dt, g.dt)
    k1 = 2 * np.pi / g.box_length
    mode = np.cos(k1 * g.coords[0]) if g.n == 1 else np.cos(k1 * g.coords[0]) * np.ones(g.shape)
    for dt in dts:
        gg = g.with_time(dt=dt, nt=int(round(g.T / dt)))
        tr = solve_linear(gg, None, None, None, mode, zero, cfg, energy=False)
        exact = np.cos(k1 ** g.s * gg.times).reshape((-1,) + (1,) * g.n) * mode
        errs.append(float(np.max(np.abs(tr.u - exact))))
    slopes = np.diff(np.log(errs)) / np.diff(np.log(dts))
    checks.append(Check("single_mode_order", bool(np.all(np.abs(slopes - 2) <= 0.1)), float(slopes[-1]), 2.0,
                        f"errors {errs}"))

    # energy identities
    q = m.project(2.0 * smooth_bump(g, 0.0, 0.7)) if g.n == 1 else None
    u0 = m.project(smooth_bump(g, -0.2, 0.5) * (1 + 0.1 * rng.standard_normal(g.shape)))
    tr = solve_linear(g, m, q, None, u0, m.project(smooth_bump(g, 0.2, 0.4)), cfg)
    tot = tr.energy_log["kinetic"] + tr.energy_log["elastic"] + tr.energy_log["potential"]
    drift = float(np.max(np.abs(np.diff(tot))) / tot[0])
    checks.append(Check("linear_energy_drift_per_step", drift <= 1e-8, drift, 1e-8))
    pspec = _power_spec(sc, g, m)
    tr = solve_nonlinear(g, m, pspec, None, 0.5 * u0, zero, cfg)
    res = tr.energy_residual()
    checks.append(Check("nonlinear_energy_residual", res <= 1e-4, res, 1e-4))
    ratios = [p["ratio"] for p in tr.picard_log if p["converged"] and p["ratio"] > 0]
    worst = max(ratios) if ratios else 0.0
    checks.append(Check("picard_contraction", worst < 1.0, worst, 1.0, f"{len(ratios)} slabs"))

    # viscous regularization converges monotonically
    base = solve_linear(g, m, None, None, u0, zero, cfg, energy=False).u
    gaps = [sup_norm_in_time(g, solve_viscous(g, m, None, None, u0, zero, e, cfg, energy=False).u - base)
            for e in (1e-1, 1e-2, 1e-3)]
    checks.append(Check("viscous_gap_monotone", bool(gaps[0] > gaps[1] > gaps[2]), gaps[-1], gaps[0],
                        f"gaps {gaps}"))

    # DN map: linear in the amplitude for a linear model, passive trace independent of w1
    inp = sc.input(g, m)
    a = measure(g, m, NonlinearitySpec.zero(), zero, zero, inp, cfg)
    b = measure(g, m, NonlinearitySpec.zero(), zero, zero, inp.scaled(0.37), cfg)
    lin = spacetime_l2(g, b.trace - 0.37 * a.trace) / max(spacetime_l2(g, b.trace), 1e-300)
    checks.append(Check("dn_linearity", lin <= 1e-9, lin, 1e-9))

    # adjoint gradients against central differences
    small = g.with_time(nt=min(g.nt, 64))
    sm = RegionMask(small, m.omega, m.w1, m.w2)
    obj = RungeObjective(small, sm, constant_target(small, sm), 1e-3)
    fd = _fd_check(obj.value_and_grad, 0.1 * rng.standard_normal(obj.size), rng)
    checks.append(Check("runge_gradient", fd <= 1e-5, fd, 1e-5))
    op = SourceOperator(small, sm, [np.ones((small.nt + 1,) + small.shape) * sm.omega])
    data = op.forward(rng.standard_normal(op.size))
    tik = TikhonovObjective(op, data, 1e-3, small.cell_volume)
    fd = _fd_check(tik.value_and_grad, rng.standard_normal(op.size), rng)
    checks.append(Check("source_gradient", fd <= 1e-5, fd, 1e-5))
    iop = InitialDataOperator(small, sm)
    idata = iop.forward(rng.standard_normal(iop.size))
    tik = TikhonovObjective(iop, idata, 1e-3, small.cell_volume)
    fd = _fd_check(tik.value_and_grad, rng.standard_normal(iop.size), rng)
    checks.append(Check("initial_data_gradient", fd <= 1e-5, fd, 1e-5))

    # remainder scaling of the small-amplitude expansion
    if pspec.r > 0:
        pr = linearization_probe(g, m, pspec, inp, sorted(sc["experiment.probe_epsilons"], reverse=True), cfg,
                                 threads)
        dev = abs(pr.fitted_slope - (pspec.r + 1))
        checks.append(Check("remainder_slope", dev <= 0.1, pr.fitted_slope, pspec.r + 1))

    # continuity of the superposition operator
    if pspec.r + 1 <= 2:
        field = np.broadcast_to(m.project(smooth_bump(g, 0.0, 0.8)), (8,) + g.shape).copy()
        rows = nemytskii_modulus(g, m, pspec, field, [10.0 ** -k for k in range(1, 9)])
        vals = [r["max"] for r in rows]
        ok = all(b < a for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-6
        checks.append(Check("nemytskii_modulus", ok, vals[-1], 1e-6))

    # scenario hashing ignores key order
    shuffled = dict(reversed(list(sc.values.items())))
    same = scenario_hash(shuffled) == sc.hash
    checks.append(Check("scenario_hash_order", same, float(same), 1.0))
    return checks


def run_verify(sc, out, threads):
    checks = verify_suite(sc, threads)
    rows = [{"name": c.name, "passed": int(c.passed), "value": c.value, "threshold": c.threshold,
             "detail": c.detail} for c in checks]
    write_history(out / "verify.csv", rows, ("name", "passed", "value", "threshold", "detail"))
    failed = [c.name for c in checks if not c.passed]
    summary = {"checks": len(checks), "failed": failed}
    _write_json(out / "summary.json", {"command": "verify", "scenario_hash": sc.hash, **summary})
    if failed:
        raise VerificationError(failed, summary)
    return summary


class VerificationError(RuntimeError):
    def __init__(self, failed, summary):
        super().__init__("invariant checks failed: " + ", ".join(failed))
        self.failed = failed
        self.summary = summary


# --- report ---------------------------------------------------------------------------------

def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and all(not isinstance(v, (dict, list)) for v in obj):
        yield prefix, " ".join("" if v is None else repr(v) for v in obj)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def report(directory):
    """Assemble ``report/summary.csv`` and per-command tables from an output directory."""
    d = Path(directory)
    if not (d / "scenario.json").exists():
        raise FileNotFoundError(f"{d} is not a scenario output directory (no scenario.json)")
    scen = json.loads((d / "scenario.json").read_text())
    rep = d / "report"
    rep.mkdir(exist_ok=True)
    rows = []
    tables = []
    for cmd in COMMANDS:
        sub = d / cmd
        if not sub.is_dir():
            continue
        for path in sorted(sub.rglob("summary.json")):
            for key, value in _flatten(json.loads(path.read_text())):
                rows.append((cmd, str(path.parent.relative_to(sub)), key, value))
        for path in sorted(sub.rglob("*.csv")):
            name = f"{cmd}__{'__'.join(path.relative_to(sub).parts)}"
            (rep / name).write_text(path.read_text())
            tables.append(name)
    with open(rep / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("command", "part", "key", "value"))
        w.writerows(rows)
    index = {"scenario_hash": scen["hash"], "tables": tables, "summary_rows": len(rows)}
    _write_json(rep / "index.json", index)
    return index


# --- command line ----------------------------------------------------------------------------

RUNNERS = {
    "simulate": run_simulate,
    "dnmap": run_dnmap,
    "probe": run_probe,
    "runge": run_runge,
    "recover-nonlinearity": run_recover_nonlinearity,
    "recover-initial": run_recover_initial,
    "recover-potential": run_recover_potential,
    "verify": run_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fracwave", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=name != "report", help="scenario file or shipped scenario name")
        p.add_argument("--out", default="runs", help="output root (for report: a scenario output directory)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--noise", type=float, default=None)
    return parser


def _fail(kind, message, code, **extra):
    sys.stderr.write(json.dumps(_plain({"error": kind, "message": message, **extra}), sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if args.scenario:
                sc = Scenario.load(args.scenario)
                directory = Path(args.out) / sc.hash[:16]
            else:
                directory = Path(args.out)
            index = report(directory)
            print(json.dumps(index, indent=2))
            return 0
        sc = Scenario.load(args.scenario)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.noise is not None:
            over["experiment.noise"] = args.noise
        if over:
            sc = sc.with_overrides(**over)
        kind = sc["experiment.kind"]
        if kind not in ("any", args.command):
            raise ScenarioError(["experiment.kind"], [f"scenario is for {kind!r}, not {args.command!r}"])
        if args.threads < 1:
            raise ScenarioError(["--threads"], ["--threads must be at least 1"])
        root = Path(args.out) / sc.hash[:16]
        out = root / args.command
        out.mkdir(parents=True, exist_ok=True)
        _write_json(root / "scenario.json", {"hash": sc.hash, "version": __version__, "values": sc.values})
        summary = RUNNERS[args.command](sc, out, args.threads)
        summary = {"command": args.command, "scenario_hash": sc.hash, "threads": args.threads, **summary}
        prior = out / "summary.json"
        if prior.exists():
            summary = {**json.loads(prior.read_text()), **_plain(summary)}
        _write_json(prior, summary)
        print(json.dumps(_plain(summary), indent=2, sort_keys=True))
        return 0
    except ScenarioError as exc:
        return _fail("scenario", str(exc), 2, keys=exc.keys, messages=exc.messages)
    except VerificationError as exc:
        return _fail("verify", str(exc), 1, failed=exc.failed)
    except PipelineError as exc:
        return _fail("pipeline", str(exc), 3, stage=exc.stage)
    except StagnationError as exc:
        return _fail("stagnation", str(exc), 3)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
