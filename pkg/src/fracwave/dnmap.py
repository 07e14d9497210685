"""Dirichlet-to-Neumann measurements for exterior inputs.

A measurement drives the wave equation with exterior data ``phi`` on ``w1``
and records ``(-Delta)^s u`` on the observation window ``w2``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import SolverConfig, solve_with_exterior
from .lattice import Grid, RegionMask, dump_field, frac_laplacian, load_field, lowpass, time_weights


class MeasurementError(RuntimeError):
    """A forward solve behind a measurement failed."""

    def __init__(self, label, scenario, cause):
        super().__init__(f"measurement {label!r} (scenario {scenario or '-'}) failed: {cause}")
        self.label = label
        self.scenario = scenario
        self.cause = cause


@dataclass
class ExteriorInput:
    phi: np.ndarray
    amplitude: float = 1.0
    label: str = "phi"

    def field(self):
        return self.amplitude * self.phi

    def check(self, grid: Grid, mask: RegionMask):
        if self.phi.shape != (grid.nt + 1,) + grid.shape:
            raise ValueError(f"input {self.label!r}: phi must have shape {(grid.nt + 1,) + grid.shape}")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError(f"input {self.label!r}: phi is not finite")
        if np.any(self.phi[:, ~mask.w1] != 0.0):
            raise ValueError(f"input {self.label!r}: phi is not supported on w1")

    def scaled(self, eps, label=None):
        return ExteriorInput(self.phi, self.amplitude * eps, label or f"{self.label}*{eps:g}")

    @classmethod
    def zero(cls, grid, label="passive"):
        return cls(np.zeros((grid.nt + 1,) + grid.shape), 1.0, label)

    @classmethod
    def separable(cls, grid, mask, spatial, temporal, amplitude=1.0, label="phi", smooth=True):
        """``phi(t, x) = temporal(t) * spatial(x)``, low-passed and cut back to ``w1``.

        ``temporal`` is an array over time levels or a callable of ``t``.
        """
        spatial = np.asarray(spatial, dtype=float)
        if smooth:
            spatial = lowpass(grid, spatial)
        spatial = mask.project(spatial, "w1")
        prof = temporal(grid.times) if callable(temporal) else np.asarray(temporal, dtype=float)
        if prof.shape != (grid.nt + 1,):
            raise ValueError("temporal profile must have one value per time level")
        phi = prof.reshape((-1,) + (1,) * grid.n) * spatial
        return cls(phi, float(amplitude), label)


def trapezoid_pairing(grid: Grid, a, b):
    """``int_0^T int a b dx dt`` with cell volumes and trapezoid weights."""
    per_t = (a * b).reshape(len(a), -1).sum(axis=1)
    return float(grid.cell_volume * np.dot(time_weights(grid, len(a) - 1), per_t))


def bilinear_pairing(grid: Grid, u, psi):
    """``<Lambda phi, psi>`` in the split form with two half-order operators."""
    half = grid.s / 2
    return trapezoid_pairing(grid, frac_laplacian(grid, u, half), frac_laplacian(grid, psi, half))


@dataclass
class DnRecord:
    input: ExteriorInput
    trace: np.ndarray
    mask_hash: str
    pairing_cache: dict = field(default_factory=dict)
    provenance: str = ""

    def pair(self, grid: Grid, psi):
        """Restriction form of the pairing; ``psi`` must live on ``w2``."""
        return trapezoid_pairing(grid, self.trace, psi)

    def values(self, mask: RegionMask):
        """Trace values on the ``w2`` nodes only, shape ``(nt+1, |w2|)``."""
        self._match(mask)
        return self.trace[:, mask.w2]

    def _match(self, mask):
        if mask.hash != self.mask_hash:
            raise ValueError("record was measured with a different mask")

    def with_trace(self, trace):
        return DnRecord(self.input, trace, self.mask_hash, dict(self.pairing_cache), self.provenance)

    def save(self, directory, grid: Grid, mask: RegionMask):
        self._match(mask)
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        dump_field(d / "input.f64", grid, self.input.field(), role="phi")
        dump_field(d / "trace.f64", grid, self.trace[:, mask.w2], role="trace_w2")
        meta = {"label": self.input.label, "epsilon": self.input.amplitude, "scenario_hash": self.provenance,
                "mask_hash": self.mask_hash, "grid": grid.header(),
                "pairing_cache": {k: float(v) for k, v in self.pairing_cache.items()}}
        (d / "record.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, mask: RegionMask):
        d = Path(directory)
        meta = json.loads((d / "record.json").read_text())
        if meta["mask_hash"] != mask.hash:
            raise ValueError(f"{d}: record mask hash does not match the supplied mask")
        grid, phi, _ = load_field(d / "input.f64")
        _, vals, _ = load_field(d / "trace.f64")
        trace = np.zeros((grid.nt + 1,) + grid.shape)
        trace[:, mask.w2] = vals.reshape(grid.nt + 1, -1)
        inp = ExteriorInput(phi, 1.0, meta["label"])
        if meta["epsilon"] != 0.0:
            inp = ExteriorInput(phi / meta["epsilon"], meta["epsilon"], meta["label"])
        return cls(inp, trace, meta["mask_hash"], meta["pairing_cache"], meta["scenario_hash"])


def measure(grid: Grid, mask: RegionMask, spec, u0, u1, input: ExteriorInput, cfg: SolverConfig | None = None,
            psi_basis: dict | None = None, provenance: str = "", return_solution: bool = False):
    """Run one exterior-driven solve and record the ``w2`` trace.

    ``psi_basis`` maps names to test functions; their bilinear pairings are
    cached on the record. With ``return_solution`` the trajectory is
    returned alongside the record.
    """
    input.check(grid, mask)
    phi = input.field()
    u0 = mask.project(np.asarray(u0, dtype=float)) + phi[0] * mask.exterior
    try:
        traj = solve_with_exterior(grid, mask, spec, None, u0, u1, phi, cfg, energy=False)
    except Exception as exc:
        raise MeasurementError(input.label, provenance, exc) from exc
    trace = frac_laplacian(grid, traj.u) * mask.w2
    cache = {}
    for name, psi in (psi_basis or {}).items():
        cache[name] = bilinear_pairing(grid, traj.u, psi)
    rec = DnRecord(input, trace, mask.hash, cache, provenance)
    return (rec, traj) if return_solution else rec


@dataclass
class DnMatrix:
    records: list

    @property
    def labels(self):
        return [r.input.label for r in self.records]

    def matrix(self, mask: RegionMask):
        """Columns are the flattened ``w2`` traces, one per input."""
        return np.stack([r.values(mask).ravel() for r in self.records], axis=1)

    def save(self, directory, grid, mask):
        d = Path(directory)
        cols = []
        for k, rec in enumerate(self.records):
            sub = f"col{k:04d}"
            rec.save(d / sub, grid, mask)
            cols.append({"index": k, "label": rec.input.label, "dir": sub})
        (d / "index.json").write_text(json.dumps({"mask_hash": mask.hash, "columns": cols}, indent=2))

    @classmethod
    def load(cls, directory, mask):
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        return cls([DnRecord.load(d / c["dir"], mask) for c in index["columns"]])


def dn_matrix(grid, mask, spec, u0, u1, basis, cfg=None, threads=1, provenance=""):
    """Measure every input in ``basis``; columns follow the basis order."""
    if not basis:
        raise ValueError("basis must be nonempty")

    def one(inp):
        return measure(grid, mask, spec, u0, u1, inp, cfg, provenance=provenance)

    if threads <= 1:
        return DnMatrix([one(inp) for inp in basis])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map preserves order and re-raises the first failing column
        return DnMatrix(list(pool.map(one, basis)))
