"""Time-domain solvers for the (semilinear) fractional wave equation on a masked torus.

All solvers advance the interior unknown with the average-acceleration
Newmark scheme (beta = 1/4, gamma = 1/2).  Exterior Dirichlet data enter only
through the lifting ``u = v + phi``; the unknown ``v`` lives on omega.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lattice import (Grid, RegionMask, cg_solve, dump_field, frac_laplacian,
                      time_weights)

BETA = 0.25
GAMMA = 0.5
# omega sizes up to this many nodes use dense restricted matrices instead of CG
DENSE_LIMIT = 1024


class PicardError(RuntimeError):
    """Picard iteration failed even on single-step slabs."""


# --- nonlinearities ------------------------------------------------------------

@dataclass
class NonlinearitySpec:
    """A Caratheodory nonlinearity ``f(x, tau)`` plus optional damping ``g(x, v)``.

    kinds
      ``zero``              f = 0
      ``power``             f = q(x) |tau|^r tau
      ``linear_potential``  f = a(x) tau   (``q`` holds a, r = 0)
      ``custom``            f tabulated on a uniform ``tau_grid``; ``table`` has
                            shape ``(len(tau_grid),)`` or ``(len(tau_grid), *grid.shape)``
    """

    kind: str = "zero"
    q: np.ndarray | None = None
    r: float = 0.0
    p: float = math.inf
    tau_grid: np.ndarray | None = None
    table: np.ndarray | None = None
    damping: Callable | None = None
    lipschitz_g: float | None = None
    _F_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("zero", "power", "linear_potential", "custom"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind in ("power", "linear_potential") and self.q is None:
            raise ValueError(f"{self.kind} nonlinearity needs a coefficient q")
        if self.kind == "linear_potential":
            self.r = 0.0
        if self.kind == "custom":
            if self.tau_grid is None or self.table is None:
                raise ValueError("custom nonlinearity needs tau_grid and table")
            self.tau_grid = np.asarray(self.tau_grid, dtype=float)
            steps = np.diff(self.tau_grid)
            if not np.allclose(steps, steps[0]) or steps[0] <= 0:
                raise ValueError("tau_grid must be uniform and increasing")
            from scipy.integrate import cumulative_simpson
            table = np.asarray(self.table, dtype=float)
            i0 = int(np.argmin(np.abs(self.tau_grid)))
            if abs(self.tau_grid[i0]) > 1e-12:
                raise ValueError("tau_grid must contain 0")
            prim = cumulative_simpson(table, x=self.tau_grid, axis=0, initial=0.0)
            self._F_table = prim - prim[i0]

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def power(cls, q, r, p=math.inf, **kw):
        return cls("power", q=np.asarray(q, dtype=float), r=float(r), p=p, **kw)

    @classmethod
    def linear_potential(cls, a, p=math.inf, **kw):
        return cls("linear_potential", q=np.asarray(a, dtype=float), p=p, **kw)

    @classmethod
    def linear_damping(cls, b):
        """Helper returning ``(g, lipschitz)`` for ``g(x, v) = b(x) v``."""
        b = np.asarray(b, dtype=float)
        return (lambda v: b * v), float(np.max(np.abs(b)))

    @property
    def is_linear(self) -> bool:
        return self.kind in ("zero", "linear_potential") and self.damping is None

    # evaluation; ``u`` may carry leading time axes
    def f(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(u)
        if self.kind == "power":
            return self.q * np.abs(u) ** self.r * u
        if self.kind == "linear_potential":
            return self.q * u
        return self._interp(self.table, u)

    def df(self, u):
        """Partial derivative in tau."""
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(u)
        if self.kind == "power":
            return self.q * (self.r + 1.0) * np.abs(u) ** self.r
        if self.kind == "linear_potential":
            return self.q * np.ones_like(u)
        slope = np.gradient(np.asarray(self.table, dtype=float), self.tau_grid, axis=0)
        return self._interp(slope, u)

    def F(self, u):
        """Primitive ``F(x, tau) = int_0^tau f(x, rho) d rho``."""
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(u)
        if self.kind == "power":
            return self.q * np.abs(u) ** (self.r + 2.0) / (self.r + 2.0)
        if self.kind == "linear_potential":
            return 0.5 * self.q * u * u
        return self._interp(self._F_table, u)

    def g(self, v):
        if self.damping is None:
            return np.zeros_like(v)
        return self.damping(v)

    def _interp(self, table, u):
        tau = self.tau_grid
        lo, hi = tau[0], tau[-1]
        if np.any(u < lo) or np.any(u > hi):
            raise ValueError(f"tau outside the tabulated range [{lo}, {hi}]; extrapolation refused")
        h = tau[1] - tau[0]
        pos = (u - lo) / h
        i = np.clip(np.floor(pos).astype(int), 0, len(tau) - 2)
        w = pos - i
        table = np.asarray(table, dtype=float)
        if table.ndim == 1:
            return (1 - w) * table[i] + w * table[i + 1]
        nsp = table.ndim - 1
        idx = np.indices(u.shape[-nsp:])
        idx = tuple(np.broadcast_to(ix, u.shape) for ix in idx)
        return (1 - w) * table[(i,) + idx] + w * table[(i + 1,) + idx]

    def homogeneity_degree(self, lambdas=(0.5, 2.0, 3.0), taus=(-1.3, -0.4, 0.7, 1.9), rtol=1e-10):
        """Return ``r + 1`` if ``f(x, lam tau) = lam^(r+1) f(x, tau)`` on the samples, else ``None``."""
        if self.kind == "zero":
            return self.r + 1.0
        deg = self.r + 1.0
        for lam in lambdas:
            for tau in taus:
                try:
                    a = self.f(np.full(self._space_shape(), lam * tau))
                    b = lam ** deg * self.f(np.full(self._space_shape(), tau))
                except ValueError:
                    return None
                if np.max(np.abs(a - b)) > rtol * max(np.max(np.abs(b)), 1e-300):
                    return None
        return deg

    def _space_shape(self):
        if self.q is not None:
            return np.shape(self.q)
        if self.table is not None:
            return np.shape(self.table)[1:]
        return ()


@dataclass
class Condition:
    name: str
    passed: bool
    threshold: str
    detail: str = ""


@dataclass
class ValidationReport:
    conditions: list
    homogeneous: bool
    coverage: str = ""

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def failed(self):
        return [c for c in self.conditions if not c.passed]

    def __str__(self):
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.threshold} {c.detail}".rstrip()
                 for c in self.conditions]
        return "\n".join(lines)


def _p_condition(n, s, p):
    two_s = 2.0 * s
    if math.isclose(two_s, n):
        return p > 2, "p>2"
    if two_s < n:
        return n / s <= p, f"p>={n / s:g}"
    return p >= 2, "p>=2"


def _r_condition(n, s, r):
    two_s = 2.0 * s
    if two_s >= n or math.isclose(two_s, n):
        return r >= 0, "r>=0"
    bound = two_s / (n - two_s)
    return 0 <= r <= bound * (1 + 1e-12), f"r<={bound:g}"


def validate_assumption(spec: NonlinearitySpec, grid: Grid, tau_samples=None) -> ValidationReport:
    """Check the structural conditions on ``f`` and ``g``; failures are reported, not raised."""
    conds = []
    if spec.kind == "zero":
        conds.append(Condition("(i) integrability p", True, "f = 0"))
        conds.append(Condition("(i) growth r", True, "f = 0"))
    else:
        ok, thr = _p_condition(grid.n, grid.s, spec.p)
        conds.append(Condition("(i) integrability p", ok, thr, f"(p={spec.p:g})"))
        ok, thr = _r_condition(grid.n, grid.s, spec.r)
        conds.append(Condition("(i) growth r", ok, thr, f"(r={spec.r:g})"))
        if spec.kind == "power":
            nonneg = bool(np.all(spec.q >= 0))
            conds.append(Condition("(i) coefficient q>=0", nonneg, "q>=0", f"(min q={np.min(spec.q):.3g})"))
        f0 = spec.f(np.zeros(spec._space_shape()))
        conds.append(Condition("(i) f(.,0) in L2", bool(np.all(np.isfinite(f0))), "finite"))

    if tau_samples is None:
        if spec.kind == "custom":
            tau_samples = spec.tau_grid
        else:
            tau_samples = np.linspace(-10.0, 10.0, 201)
    coverage = f"tau in [{np.min(tau_samples):g}, {np.max(tau_samples):g}], {len(tau_samples)} samples"
    shape = spec._space_shape()
    Fmin = min(float(np.min(spec.F(np.full(shape, t)))) for t in tau_samples)
    if spec.kind in ("power", "linear_potential") and spec.q is not None and np.all(spec.q >= 0):
        conds.append(Condition("(ii) F>=-C1", True, "F>=0 analytically", f"(sampled min {Fmin:.3g})"))
    else:
        conds.append(Condition("(ii) F>=-C1", Fmin > -math.inf and np.isfinite(Fmin), "F bounded below",
                               f"(sampled min {Fmin:.3g}; {coverage})"))

    if spec.damping is None:
        conds.append(Condition("(iii) g Lipschitz", True, "g = 0"))
    else:
        rng = np.random.default_rng(0)
        v1 = rng.standard_normal((16,) + grid.shape)
        v2 = rng.standard_normal((16,) + grid.shape)
        num = np.abs(spec.g(v1) - spec.g(v2))
        den = np.abs(v1 - v2)
        est = float(np.max(num / np.maximum(den, 1e-300)))
        lip = spec.lipschitz_g
        ok = lip is not None and est <= lip * (1 + 1e-9) and np.all(np.isfinite(spec.g(np.zeros((1,) + grid.shape))))
        conds.append(Condition("(iii) g Lipschitz", bool(ok), f"L<={lip}", f"(sampled {est:.3g})"))
    homog = spec.homogeneity_degree() is not None
    return ValidationReport(conds, homog, coverage)


# --- configuration and results ---------------------------------------------------

@dataclass
class SolverConfig:
    scheme: str = "trapezoidal_newmark"
    picard_tol: float = 1e-10
    picard_max_iters: int = 30
    slab_steps: int = 64
    cg_tol: float = 1e-12
    viscous_eps: float | None = None
    force: bool = False

    def __post_init__(self):
        if self.scheme != "trapezoidal_newmark":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.slab_steps < 1:
            raise ValueError("slab_steps must be at least 1")


ENERGY_COLUMNS = ("step", "t", "kinetic", "elastic", "potential", "work", "dissipation", "residual")


@dataclass
class Trajectory:
    grid: Grid
    u: np.ndarray
    ut: np.ndarray
    utt: np.ndarray
    energy_log: dict = field(default_factory=dict)
    picard_log: list = field(default_factory=list)

    def energy_residual(self) -> float:
        """Largest per-level energy balance residual relative to the energy scale."""
        log = self.energy_log
        if not log:
            return 0.0
        scale = max(np.max(np.abs(log["kinetic"] + log["elastic"] + log["potential"])),
                    np.max(np.abs(log["work"])), 1e-300)
        return float(np.max(np.abs(log["residual"])) / scale)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        dump_field(directory / "u.f64", self.grid, self.u, role="u")
        dump_field(directory / "ut.f64", self.grid, self.ut, role="ut")
        if self.energy_log:
            with open(directory / "energy_log.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(ENERGY_COLUMNS)
                for row in zip(*(self.energy_log[c] for c in ENERGY_COLUMNS)):
                    w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
        with open(directory / "picard_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("slab_start", "slab_steps", "iterations", "converged", "ratio", "ratios"))
            for rec in self.picard_log:
                w.writerow((rec["slab_start"], rec["slab_steps"], rec["iterations"], int(rec["converged"]),
                            repr(rec["ratio"]), " ".join(f"{x:.6g}" for x in rec["ratios"])))


# --- Newmark core ---------------------------------------------------------------

class _Operators:
    """Stiffness ``K_n = P (-Delta)^s P + q + qt[n]``, damping ``C = eps (P (-Delta)^s P + q)``."""

    def __init__(self, grid, mask, q=None, qt=None, eps=0.0):
        self.grid = grid
        self.om = np.ones(grid.shape) if mask is None else mask.omega.astype(float)
        self.mult = grid.multiplier(grid.s)
        self.q = None if q is None else np.asarray(q, dtype=float) * self.om
        self.qt = None if qt is None else np.asarray(qt, dtype=float) * self.om
        self.eps = float(eps)

    def A(self, x):
        g = self.grid
        return self.om * g.ifft(self.mult * g.fft(x))

    def static(self, x):
        y = self.A(x)
        if self.q is not None:
            y = y + self.q * x
        return y

    def K(self, x, n):
        y = self.static(x)
        if self.qt is not None:
            y = y + self.qt[n] * x
        return y

    def C(self, x):
        if self.eps == 0.0:
            return np.zeros_like(x)
        return self.eps * self.static(x)

    def step_operator(self, n):
        dt = self.grid.dt
        c_k = BETA * dt * dt
        c_c = GAMMA * dt * self.eps
        if self.qt is None:
            c = c_k + c_c
            return lambda x: x + c * self.static(x)
        qn = self.qt[n]
        return lambda x: x + (c_k + c_c) * self.static(x) + c_k * qn * x

    def reduced(self):
        """Dense form on the omega nodes, or ``None`` when omega is large.

        ``S`` is the restricted static stiffness; the circulant kernel of the
        multiplier gives its entries directly.
        """
        sel = np.flatnonzero(self.om.ravel())
        if sel.size > DENSE_LIMIT:
            return None
        g = self.grid
        kernel = g.ifft(self.mult)
        idx = np.unravel_index(sel, g.shape)
        diff = tuple((i[:, None] - i[None, :]) % g.N for i in idx)
        S = kernel[diff]
        if self.q is not None:
            S = S + np.diag(self.q.ravel()[sel])
        return _Reduced(self, sel, S)


class _Reduced:
    """Newmark pieces acting on the omega nodes only."""

    def __init__(self, ops, sel, S):
        self.sel = sel
        self.S = S
        self.qt = None if ops.qt is None else ops.qt.reshape(len(ops.qt), -1)[:, sel]
        dt = ops.grid.dt
        self.c_k = BETA * dt * dt
        self.C = ops.eps * S if ops.eps else None
        self.M = np.eye(len(sel)) + (self.c_k + GAMMA * dt * ops.eps) * S
        self._factor = cho_factor(self.M) if self.qt is None else None
        if self.qt is None:
            self._transition(dt)

    def _transition(self, dt):
        # one step maps the state (u, v, a) by T and the new source level by B
        m = len(self.sel)
        eye = np.eye(m)
        Minv = cho_solve(self._factor, eye)
        Pu = np.hstack([eye, dt * eye, (0.5 - BETA) * dt * dt * eye])
        Pv = np.hstack([0 * eye, eye, (1.0 - GAMMA) * dt * eye])
        Ga = -Minv @ (self.S @ Pu + (0.0 if self.C is None else self.C @ Pv))
        self.T = np.vstack([Pu + self.c_k * Ga, Pv + GAMMA * dt * Ga, Ga])
        self.B = np.vstack([self.c_k * Minv, GAMMA * dt * Minv, Minv])

    def K(self, x, n):
        y = self.S @ x
        if self.qt is not None:
            y += self.qt[n] * x
        return y

    def damp(self, x):
        return 0.0 if self.C is None else self.C @ x

    def solve(self, rhs, n):
        if self._factor is not None:
            return cho_solve(self._factor, rhs)
        return np.linalg.solve(self.M + np.diag(self.c_k * self.qt[n]), rhs)

    def take(self, x, series=False):
        x = np.asarray(x, dtype=float)
        return x.reshape(len(x), -1)[:, self.sel] if series else x.ravel()[self.sel]

    def scatter(self, xr, shape):
        out = np.zeros((len(xr), int(np.prod(shape))))
        out[:, self.sel] = xr
        return out.reshape((len(xr),) + tuple(shape))


def newmark(grid, mask, source, u0, v0, *, q=None, qt=None, eps=0.0, cg_tol=1e-12,
            a0=None, steps=None, start=0):
    """Average-acceleration Newmark for ``u'' + C u' + K u = F`` on omega.

    ``source`` is indexed by absolute time level (``start`` .. ``start + steps``)
    and may be ``None``.  Returns ``(u, v, a)`` with ``steps + 1`` levels.
    """
    ops = _Operators(grid, mask, q, qt, eps)
    om = ops.om
    steps = grid.nt - start if steps is None else steps
    red = ops.reduced()
    if red is not None:
        return _newmark_reduced(grid, red, source, u0, v0, a0, steps, start)
    dt = grid.dt
    shape = grid.shape
    u = np.empty((steps + 1,) + shape)
    v = np.empty_like(u)
    a = np.empty_like(u)
    u[0] = om * u0
    v[0] = om * v0
    if a0 is None:
        F0 = np.zeros(shape) if source is None else om * source[start]
        a[0] = F0 - ops.K(u[0], start) - ops.C(v[0])
    else:
        a[0] = om * a0
    for j in range(steps):
        n1 = start + j + 1
        us = u[j] + dt * v[j] + (0.5 - BETA) * dt * dt * a[j]
        vs = v[j] + (1.0 - GAMMA) * dt * a[j]
        rhs = -ops.K(us, n1) - ops.C(vs)
        if source is not None:
            rhs = rhs + om * source[n1]
        a[j + 1] = cg_solve(ops.step_operator(n1), rhs, tol=cg_tol, x0=a[j])
        u[j + 1] = us + BETA * dt * dt * a[j + 1]
        v[j + 1] = vs + GAMMA * dt * a[j + 1]
    return u, v, a


def newmark_adjoint(grid, mask, ubar, vbar=None, abar=None, *, q=None, qt=None, eps=0.0,
                    cg_tol=1e-12):
    """Transpose of :func:`newmark` over the full horizon (consistent initial acceleration).

    For ``J = sum_n <ubar_n, u_n> + <vbar_n, v_n> + <abar_n, a_n>`` (plain sums),
    returns ``(dJ/dF, dJ/du0, dJ/dv0)``.  This is a backward-in-time recursion
    with one symmetric solve per step, i.e. the discrete adjoint wave problem
    with terminal data zero.
    """
    ops = _Operators(grid, mask, q, qt, eps)
    om = ops.om
    nt = len(ubar) - 1
    dt = grid.dt
    zeros = np.zeros(grid.shape)
    vbar = np.zeros_like(ubar) if vbar is None else vbar
    abar = np.zeros_like(ubar) if abar is None else abar
    red = ops.reduced()
    if red is not None:
        return _newmark_adjoint_reduced(grid, red, ubar, vbar, abar)
    Fbar = np.zeros_like(ubar)
    U = om * ubar[nt]
    V = om * vbar[nt]
    Acc = om * abar[nt]
    z = zeros
    for n1 in range(nt, 0, -1):
        Acc = Acc + BETA * dt * dt * U + GAMMA * dt * V
        z = cg_solve(ops.step_operator(n1), Acc, tol=cg_tol, x0=z)
        Fbar[n1] = z
        Us = U - ops.K(z, n1)
        Vs = V - ops.C(z)
        U = om * ubar[n1 - 1] + Us
        V = om * vbar[n1 - 1] + dt * Us + Vs
        Acc = om * abar[n1 - 1] + (0.5 - BETA) * dt * dt * Us + (1.0 - GAMMA) * dt * Vs
    Fbar[0] = Acc
    u0bar = U - ops.K(Acc, 0)
    v0bar = V - ops.C(Acc)
    return Fbar, u0bar, v0bar


def _newmark_reduced(grid, red, source, u0, v0, a0, steps, start):
    dt = grid.dt
    m = len(red.sel)
    u = np.empty((steps + 1, m))
    v = np.empty_like(u)
    a = np.empty_like(u)
    src = None if source is None else red.take(np.stack([source[n] for n in range(start, start + steps + 1)]), series=True)
    u[0] = red.take(u0)
    v[0] = red.take(v0)
    if a0 is None:
        F0 = np.zeros(m) if src is None else src[0]
        a[0] = F0 - red.K(u[0], start) - red.damp(v[0])
    else:
        a[0] = red.take(a0)
    if red.qt is None:
        state = np.empty((steps + 1, 3 * m))
        state[0] = np.concatenate([u[0], v[0], a[0]])
        drive = None if src is None else src[1:] @ red.B.T
        T = red.T
        for j in range(steps):
            state[j + 1] = T @ state[j]
            if drive is not None:
                state[j + 1] += drive[j]
        u, v, a = state[:, :m], state[:, m:2 * m], state[:, 2 * m:]
        return tuple(red.scatter(x, grid.shape) for x in (u, v, a))
    for j in range(steps):
        n1 = start + j + 1
        us = u[j] + dt * v[j] + (0.5 - BETA) * dt * dt * a[j]
        vs = v[j] + (1.0 - GAMMA) * dt * a[j]
        rhs = -red.K(us, n1) - red.damp(vs)
        if src is not None:
            rhs += src[j + 1]
        a[j + 1] = red.solve(rhs, n1)
        u[j + 1] = us + BETA * dt * dt * a[j + 1]
        v[j + 1] = vs + GAMMA * dt * a[j + 1]
    return tuple(red.scatter(x, grid.shape) for x in (u, v, a))


def _newmark_adjoint_reduced(grid, red, ubar, vbar, abar):
    # the reduced matrices are symmetric, so transposes are the matrices themselves
    dt = grid.dt
    nt = len(ubar) - 1
    ub, vb, ab = (red.take(x, series=True) for x in (ubar, vbar, abar))
    if red.qt is None:
        m = ub.shape[1]
        g = np.hstack([ub, vb, ab])
        lam = np.empty_like(g)
        lam[nt] = g[nt]
        TT = red.T.T
        for n in range(nt - 1, -1, -1):
            lam[n] = g[n] + TT @ lam[n + 1]
        Fbar = np.zeros_like(ub)
        Fbar[1:] = lam[1:] @ red.B
        L0 = lam[0]
        Fbar[0] = L0[2 * m:]
        u0bar = L0[:m] - red.K(Fbar[0], 0)
        v0bar = L0[m:2 * m] - red.damp(Fbar[0])
        full = red.scatter(np.stack([u0bar, v0bar]), grid.shape)
        return red.scatter(Fbar, grid.shape), full[0], full[1]
    Fbar = np.zeros_like(ub)
    U, V, Acc = ub[nt].copy(), vb[nt].copy(), ab[nt].copy()
    for n1 in range(nt, 0, -1):
        Acc = Acc + BETA * dt * dt * U + GAMMA * dt * V
        z = red.solve(Acc, n1)
        Fbar[n1] = z
        Us = U - red.K(z, n1)
        Vs = V - red.damp(z)
        U = ub[n1 - 1] + Us
        V = vb[n1 - 1] + dt * Us + Vs
        Acc = ab[n1 - 1] + (0.5 - BETA) * dt * dt * Us + (1.0 - GAMMA) * dt * Vs
    Fbar[0] = Acc
    u0bar = U - red.K(Acc, 0)
    v0bar = V - red.damp(Acc)
    full = red.scatter(np.stack([u0bar, v0bar]), grid.shape)
    return red.scatter(Fbar, grid.shape), full[0], full[1]


# --- energy bookkeeping --------------------------------------------------------

def _project(mask, x):
    return x if mask is None else mask.project(x)


def _energy_log(grid, mask, u, v, *, q=None, spec=None, forcing=None, damping_force=None, eps=0.0):
    """Discrete energy balance of the trapezoidal scheme.

    kinetic + elastic + potential + dissipation - work should stay equal to its
    initial value; ``residual`` records the deviation.
    """
    w = grid.cell_volume
    nt = len(u) - 1
    kin = w * np.sum((v * v).reshape(nt + 1, -1), axis=1)
    half = frac_laplacian(grid, u, grid.s / 2)
    ela = w * np.sum((half * half).reshape(nt + 1, -1), axis=1)
    if spec is not None and spec.kind != "zero":
        pot = 2.0 * w * np.sum(_project(mask, spec.F(u)).reshape(nt + 1, -1), axis=1)
    elif q is not None:
        pot = w * np.sum((_project(mask, q) * u * u).reshape(nt + 1, -1), axis=1)
    else:
        pot = np.zeros(nt + 1)
    du = np.diff(u, axis=0)
    work = np.zeros(nt + 1)
    if forcing is not None:
        fs = _project(mask, forcing[:-1] + forcing[1:])
        work[1:] = np.cumsum(w * np.sum((fs * du).reshape(nt, -1), axis=1))
    diss = np.zeros(nt + 1)
    if damping_force is not None:
        gs = _project(mask, damping_force[:-1] + damping_force[1:])
        diss[1:] = np.cumsum(w * np.sum((gs * du).reshape(nt, -1), axis=1))
    if eps:
        vs = v[:-1] + v[1:]
        ops = _Operators(grid, mask, q, None, eps)
        cv = np.array([np.sum(ops.C(x) * x) for x in vs])
        diss[1:] += np.cumsum(w * 0.5 * grid.dt * cv)
    total = kin + ela + pot + diss - work
    return {
        "step": np.arange(nt + 1),
        "t": grid.dt * np.arange(nt + 1),
        "kinetic": kin,
        "elastic": ela,
        "potential": pot,
        "work": work,
        "dissipation": diss,
        "residual": total - total[0],
    }


def _check_common(grid, mask, u0, u1):
    if not grid.dt > 0:
        raise ValueError("dt must be positive")
    for name, x in (("u0", u0), ("u1", u1)):
        if np.shape(x) != grid.shape:
            raise ValueError(f"{name} has shape {np.shape(x)}, expected {grid.shape}")


def _zeros_st(grid):
    return np.zeros((grid.nt + 1,) + grid.shape)


# --- public solvers -----------------------------------------------------------

def solve_linear(grid: Grid, mask: RegionMask, q, F_src, u0, u1, cfg: SolverConfig | None = None,
                 energy=True) -> Trajectory:
    """``u'' + A u + q u = F_src`` on omega, ``u = 0`` outside, given ``u(0), u'(0)``."""
    cfg = cfg or SolverConfig()
    _check_common(grid, mask, u0, u1)
    u, v, a = newmark(grid, mask, F_src, u0, u1, q=q, cg_tol=cfg.cg_tol)
    log = _energy_log(grid, mask, u, v, q=q, forcing=F_src) if energy else {}
    return Trajectory(grid, u, v, a, log)


def solve_viscous(grid, mask, q, F_src, u0, u1, eps, cfg=None, reverse_time=False, energy=True) -> Trajectory:
    """Viscous regularization ``u'' + eps (A + q) u' + (A + q) u = F_src``.

    With ``reverse_time`` the problem ``w'' - eps (A + q) w' + (A + q) w = F_src``
    is solved backward from terminal data ``w(T) = u0``, ``w'(T) = u1``: after
    ``t -> T - t`` it becomes the forward damped problem.
    """
    cfg = cfg or SolverConfig()
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_common(grid, mask, u0, u1)
    if not reverse_time:
        u, v, a = newmark(grid, mask, F_src, u0, u1, q=q, eps=eps, cg_tol=cfg.cg_tol)
        log = _energy_log(grid, mask, u, v, q=q, forcing=F_src, eps=eps) if energy else {}
        return Trajectory(grid, u, v, a, log)
    src = None if F_src is None else np.asarray(F_src)[::-1]
    u, v, a = newmark(grid, mask, src, u0, -np.asarray(u1), q=q, eps=eps, cg_tol=cfg.cg_tol)
    log = _energy_log(grid, mask, u, v, q=q, forcing=src, eps=eps) if energy else {}
    return Trajectory(grid, u[::-1].copy(), -v[::-1], a[::-1].copy(), log)


def _td_norm(grid, du, dv):
    """max(sup_t ||du||_{H~s}, sup_t ||dv||_{L2})."""
    return max(_sup_hs(grid, du), _sup_l2(grid, dv))


def _sup_hs(grid, x):
    h = frac_laplacian(grid, x, grid.s / 2)
    return float(np.sqrt(grid.cell_volume * np.max(np.sum((h * h).reshape(len(x), -1), axis=1))))


def _sup_l2(grid, x):
    return float(np.sqrt(grid.cell_volume * np.max(np.sum((x * x).reshape(len(x), -1), axis=1))))


def solve_nonlinear(grid: Grid, mask: RegionMask, spec: NonlinearitySpec, h, u0, u1,
                    cfg: SolverConfig | None = None, energy=True) -> Trajectory:
    """``u'' + A u + f(x, u) + g(x, u') = h`` by Picard iteration on time slabs.

    On each slab the map ``w -> S(w)`` solves the linear problem with frozen
    source ``h - f(w) - g(w')``.  A slab that fails to converge within
    ``picard_max_iters`` is halved and retried; the halved length is kept for
    the remaining horizon.
    """
    cfg = cfg or SolverConfig()
    _check_common(grid, mask, u0, u1)
    if not cfg.force:
        report = validate_assumption(spec, grid)
        if not report.passed:
            raise ValueError("nonlinearity fails its assumptions (pass force=True to override):\n"
                             + str(report))
    if spec.is_linear:
        q = spec.q if spec.kind == "linear_potential" else None
        u, v, a = newmark(grid, mask, h, u0, u1, q=q, cg_tol=cfg.cg_tol)
        log = _energy_log(grid, mask, u, v, spec=spec, forcing=h) if energy else {}
        return Trajectory(grid, u, v, a, log)

    nt = grid.nt
    om = np.ones(grid.shape) if mask is None else mask.omega.astype(float)
    hh = _zeros_st(grid) if h is None else np.asarray(h, dtype=float)
    u = _zeros_st(grid)
    v = _zeros_st(grid)
    a = _zeros_st(grid)
    u[0] = om * u0
    v[0] = om * u1
    a[0] = om * (hh[0] - spec.f(u[0]) - spec.g(v[0])) - _Operators(grid, mask).K(u[0], 0)
    picard_log = []
    k = 0
    m = cfg.slab_steps
    while k < nt:
        m_eff = min(m, nt - k)
        U = np.broadcast_to(u[k], (m_eff + 1,) + grid.shape).copy()
        V = np.broadcast_to(v[k], (m_eff + 1,) + grid.shape).copy()
        diffs, ratios = [], []
        converged = False
        it = 0
        for it in range(1, cfg.picard_max_iters + 1):
            slab_src = hh[k:k + m_eff + 1] - spec.f(U) - spec.g(V)
            full_src = _SlabSource(slab_src, k)
            U1, V1, A1 = newmark(grid, mask, full_src, u[k], v[k], a0=a[k], steps=m_eff,
                                 start=k, cg_tol=cfg.cg_tol)
            d = _td_norm(grid, U1 - U, V1 - V)
            scale = max(_td_norm(grid, U1, V1), 1e-300)
            if diffs and diffs[-1] > 0:
                ratios.append(d / diffs[-1])
            diffs.append(d)
            U, V, A = U1, V1, A1
            if not np.all(np.isfinite(U)):
                break
            if d <= cfg.picard_tol * scale:
                converged = True
                break
            if len(ratios) >= 3 and min(ratios[-3:]) > 1.0:
                break
        if not converged:
            picard_log.append(_picard_record(k, m_eff, it, False, ratios))
            if m_eff == 1:
                raise PicardError(f"Picard iteration diverged on a single step at level {k}")
            m = max(1, m_eff // 2)
            continue
        picard_log.append(_picard_record(k, m_eff, it, True, ratios))
        u[k:k + m_eff + 1] = U
        v[k:k + m_eff + 1] = V
        a[k:k + m_eff + 1] = A
        k += m_eff
    traj = Trajectory(grid, u, v, a, {}, picard_log)
    if energy:
        traj.energy_log = _energy_log(grid, mask, u, v, spec=spec, forcing=hh,
                                      damping_force=_project(mask, spec.g(v)) if spec.damping else None)
    return traj


class _SlabSource:
    """Index a slab-local source array with absolute time levels."""

    def __init__(self, arr, start):
        self.arr = arr
        self.start = start

    def __getitem__(self, n):
        return self.arr[n - self.start]


def _picard_record(start, steps, iterations, converged, ratios):
    usable = [r for r in ratios if np.isfinite(r)]
    if usable:
        ratio = float(np.exp(np.mean(np.log(np.maximum(usable, 1e-300)))))
    else:
        ratio = 0.0
    return {"slab_start": start, "slab_steps": steps, "iterations": iterations,
            "converged": converged, "ratio": ratio, "ratios": list(ratios)}


def lifting_source(grid, mask, phi, h=None):
    """Interior source for ``v = u - phi``: ``h - P(-Delta)^s phi - P phi''`` (the last is 0 off omega)."""
    src = -mask.project(frac_laplacian(grid, phi, grid.s))
    if h is not None:
        src = src + mask.project(h)
    return src


def exterior_velocity(grid, phi):
    return np.gradient(phi, grid.dt, axis=0, edge_order=2)


def solve_with_exterior(grid, mask, spec, h, u0, u1, phi, cfg=None, energy=True) -> Trajectory:
    """Solve with exterior Dirichlet data ``u = phi`` off omega via the lifting ``u = v + phi``."""
    cfg = cfg or SolverConfig()
    phi = np.zeros((grid.nt + 1,) + grid.shape) if phi is None else np.asarray(phi, dtype=float)
    if phi.shape != (grid.nt + 1,) + grid.shape:
        raise ValueError("phi must be a space-time field")
    if np.any(phi[:, mask.omega] != 0.0):
        raise ValueError("exterior data phi overlaps omega")
    if np.any(np.abs(np.asarray(u0)[mask.exterior] - phi[0][mask.exterior]) > 1e-12 * (1 + np.abs(phi[0]).max())):
        raise ValueError("incompatible data: u0 - phi(0) must be supported on omega")
    src = lifting_source(grid, mask, phi, h)
    traj = solve_nonlinear(grid, mask, spec, src, mask.project(u0), mask.project(u1), cfg, energy=energy)
    traj.u = traj.u + phi
    traj.ut = traj.ut + exterior_velocity(grid, phi) * mask.exterior
    return traj


# --- Nemytskii operator ------------------------------------------------------

def apply_nemytskii(spec: NonlinearitySpec, u, mask: RegionMask | None = None):
    out = spec.f(u)
    return out if mask is None else mask.project(out)


def lebesgue_norm(grid, x, p, mask=None):
    """L^p(omega_T) norm with cell-volume and trapezoid weights."""
    sel = mask.omega if mask is not None else None
    ax = np.abs(x) ** p
    per_t = ax[:, sel].sum(axis=1) if sel is not None else ax.reshape(len(x), -1).sum(axis=1)
    return float((grid.cell_volume * np.dot(time_weights(grid, len(x) - 1), per_t)) ** (1.0 / p))


def nemytskii_modulus(grid, mask, spec, u, deltas, n_dirs=4, seed=0):
    """Table of ``||f(u + delta eta) - f(u)||_{L^{2/(r+1)}}`` over random unit ``eta``.

    Returns a list of dicts with keys ``delta``, ``mean``, ``max``.
    """
    if spec.r + 1.0 > 2.0:
        raise ValueError("growth exponent r+1 must not exceed 2")
    p = 2.0 / (spec.r + 1.0)
    rng = np.random.default_rng(seed)
    om = mask.omega.astype(float)
    base = apply_nemytskii(spec, u, mask)
    etas = []
    for _ in range(n_dirs):
        eta = rng.standard_normal(u.shape) * om
        eta /= lebesgue_norm(grid, eta, 2.0, mask)
        etas.append(eta)
    rows = []
    for d in deltas:
        vals = [lebesgue_norm(grid, apply_nemytskii(spec, u + d * eta, mask) - base, p, mask) for eta in etas]
        rows.append({"delta": float(d), "mean": float(np.mean(vals)), "max": float(np.max(vals))})
    return rows
