"""Exterior control, linearization probes and the reconstruction pipelines.

Every optimizer-backed operation exposes an objective object with
``value_and_grad(x)`` over a flat parameter vector, so gradients can be
checked against finite differences.  Gradients come from
:func:`fracwave.forward.newmark_adjoint`, the exact transpose of the stepping
scheme.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .dnmap import DnRecord, ExteriorInput
from .forward import (NonlinearitySpec, SolverConfig, newmark, newmark_adjoint, solve_nonlinear,
                      solve_with_exterior)
from .lattice import (Grid, RegionMask, dump_field, frac_laplacian, spacetime_l2, sup_norm_in_time,
                      time_weights)

HISTORY_COLUMNS = ("iteration", "objective", "grad_norm", "step")


class StagnationError(RuntimeError):
    """The objective stopped decreasing; ``history`` holds the iterations so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def write_history(path, history, columns=HISTORY_COLUMNS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in history:
            w.writerow([row.get(c, "") for c in columns])


# --- limited-memory quasi-Newton ------------------------------------------------

@dataclass
class OptimizationResult:
    x: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    history: list
    status: str = ""


def _two_loop(g, S, Y):
    q = g.copy()
    stack = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        stack.append((rho, a, s, y))
    if S:
        q *= np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
    for rho, a, s, y in reversed(stack):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def lbfgs(fun, x0, *, max_iter=200, grad_tol=1e-8, memory=20, c1=1e-4, max_backtracks=40, stall=10):
    """Minimize ``fun`` (returning ``(value, gradient)``) by L-BFGS with Armijo backtracking.

    Stops when ``||g|| <= grad_tol * ||g0||`` or after ``max_iter`` iterations.
    Raises :class:`StagnationError` after ``stall`` successive iterations
    without a decrease of the objective.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    g0 = float(np.linalg.norm(g))
    history = [{"iteration": 0, "objective": f, "grad_norm": g0, "step": 0.0}]
    if g0 == 0.0:
        return OptimizationResult(x, f, 0.0, 0, True, history, "zero gradient")
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    flat = 0
    gnorm = g0
    for k in range(1, max_iter + 1):
        d = -_two_loop(g, S, Y)
        slope = float(np.dot(g, d))
        if slope >= 0.0:
            S.clear()
            Y.clear()
            d = -g
            slope = -gnorm * gnorm
        t = 1.0 if S else 1.0 / gnorm
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            # safeguarded quadratic interpolation
            denom = 2.0 * (f_new - f - t * slope)
            t_q = -slope * t * t / denom if np.isfinite(f_new) and denom > 0 else 0.5 * t
            t = min(max(t_q, 0.1 * t), 0.5 * t)
        if not accepted and gnorm <= 1e-6 * g0:
            # objective differences are at rounding level
            return OptimizationResult(x, f, gnorm, k - 1, False, history, "precision limit")
        if not accepted:
            S.clear()
            Y.clear()
            flat += 1
            history.append({"iteration": k, "objective": f, "grad_norm": gnorm, "step": 0.0})
        else:
            s_vec = x_new - x
            y_vec = g_new - g
            if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
                S.append(s_vec)
                Y.append(y_vec)
            flat = flat + 1 if f_new >= f else 0
            x, f, g = x_new, f_new, g_new
            gnorm = float(np.linalg.norm(g))
            history.append({"iteration": k, "objective": f, "grad_norm": gnorm, "step": t})
        if flat >= stall and gnorm <= 1e-6 * g0:
            return OptimizationResult(x, f, gnorm, k, False, history, "precision limit")
        if flat >= stall:
            raise StagnationError(f"objective did not decrease over {stall} successive iterations", history)
        if gnorm <= grad_tol * g0:
            return OptimizationResult(x, f, gnorm, k, True, history, "gradient tolerance")
    return OptimizationResult(x, f, gnorm, max_iter, False, history, "iteration cap")


def conjugate_gradient_normal(apply_normal, rhs, x0=None, tol=1e-10, max_iter=None, stall=10, warn_cap=True):
    """CG for ``H x = rhs`` with ``H`` symmetric positive (semi)definite.

    The history records the quadratic model ``x.Hx/2 - rhs.x`` (monotone in
    exact arithmetic) and the relative residual.  Reaching ``max_iter``
    (default ``10 * size``) only warns, unless ``warn_cap`` is off for
    deliberately truncated solves; ``stall`` successive iterations
    without a model decrease raise :class:`StagnationError`.
    """
    b = np.asarray(rhs, dtype=float)
    max_iter = max_iter or 10 * b.size
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    history = []
    if bnorm == 0.0:
        return np.zeros_like(b), history
    r = b - apply_normal(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    model = -0.5 * float(b @ x + r @ x)
    flat = 0
    for it in range(1, max_iter + 1):
        if math.sqrt(rr) <= tol * bnorm:
            break
        Hp = apply_normal(p)
        curv = float(p @ Hp)
        if curv <= 0.0:
            break
        step = rr / curv
        x += step * p
        r -= step * Hp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        new_model = -0.5 * float(b @ x + r @ x)
        flat = flat + 1 if new_model >= model else 0
        model = new_model
        history.append({"iteration": it, "objective": model, "grad_norm": math.sqrt(rr) / bnorm, "step": step})
        if flat >= stall:
            raise StagnationError(f"CG model did not decrease over {stall} successive iterations", history)
    else:
        if warn_cap:
            warnings.warn(f"CG stopped at the {max_iter}-iteration cap, relative residual {math.sqrt(rr) / bnorm:.2e}",
                          RuntimeWarning, stacklevel=2)
    return x, history


# --- common pieces ----------------------------------------------------------------

def _dx_weights(grid):
    """Space-time quadrature weights ``w_n * |cell|`` shaped for broadcasting."""
    return (time_weights(grid) * grid.cell_volume).reshape((-1,) + (1,) * grid.n)


def _zeros_st(grid):
    return np.zeros((grid.nt + 1,) + grid.shape)


def _trace(grid, mask, u):
    return frac_laplacian(grid, u) * mask.w2


def _trace_adjoint(grid, mask, r):
    """Transpose of ``u -> P_w2 (-Delta)^s u`` followed by the restriction to omega."""
    return mask.project(frac_laplacian(grid, r * mask.w2))


# --- Runge approximation by exterior control ---------------------------------------

@dataclass
class ControlProblem:
    target: np.ndarray
    alpha: float
    control_support: np.ndarray | None = None
    max_outer_iters: int = 300
    grad_tol: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.target = np.asarray(self.target, dtype=float)
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite")


class RungeObjective:
    """``J(phi) = ||v_phi - target||^2_{L2(omega_T)} + alpha ||phi||^2_{L2((W1)_T)}``.

    ``v_phi`` is the interior part of the exterior-driven linear solution with
    zero initial data.  Parameters are the values of ``phi`` on the support
    nodes at every time level.
    """

    def __init__(self, grid, mask, target, alpha, q=None, support=None, cg_tol=1e-12):
        self.grid = grid
        self.mask = mask
        self.support = mask.w1 if support is None else np.asarray(support, dtype=bool)
        if np.any(self.support & ~mask.w1):
            raise ValueError("control support must lie inside w1")
        self.target = mask.project(np.asarray(target, dtype=float))
        self.alpha = float(alpha)
        self.q = q
        self.cg_tol = cg_tol
        self.wt = _dx_weights(grid)
        self.size = (grid.nt + 1) * int(self.support.sum())

    def phi(self, x):
        out = _zeros_st(self.grid)
        out[:, self.support] = np.reshape(x, (self.grid.nt + 1, -1))
        return out

    def solve(self, x):
        g, m = self.grid, self.mask
        src = -m.project(frac_laplacian(g, self.phi(x)))
        zero = np.zeros(g.shape)
        return newmark(g, m, src, zero, zero, q=self.q, cg_tol=self.cg_tol)[0]

    def value_and_grad(self, x):
        g, m = self.grid, self.mask
        phi = self.phi(x)
        v = self.solve(x)
        res = v - self.target
        J = float(np.sum(self.wt * res * res) + self.alpha * np.sum(self.wt * phi * phi))
        Fbar = newmark_adjoint(g, m, 2.0 * self.wt * res, q=self.q, cg_tol=self.cg_tol)[0]
        grad = -frac_laplacian(g, m.project(Fbar)) + 2.0 * self.alpha * self.wt * phi
        return J, grad[:, self.support].ravel()

    def error(self, v):
        return spacetime_l2(self.grid, v - self.target) / max(spacetime_l2(self.grid, self.target), 1e-300)


class RungeOutcome(NamedTuple):
    phi: ExteriorInput
    v: np.ndarray
    achieved_error: float
    optimization: OptimizationResult


def runge_control(problem: ControlProblem, grid: Grid, mask: RegionMask, q=None, cfg: SolverConfig | None = None,
                  x0=None, label="runge", memory=100) -> RungeOutcome:
    """Exterior control on ``w1`` steering the interior state towards ``problem.target``.

    The objective is quadratic and badly conditioned in time; a long L-BFGS
    memory makes the iteration behave much like conjugate gradients.
    """
    cfg = cfg or SolverConfig()
    if q is not None and np.any(np.asarray(q) < 0):
        raise ValueError("the potential q must be nonnegative")
    obj = RungeObjective(grid, mask, problem.target, problem.alpha, q, problem.control_support, cfg.cg_tol)
    start = np.zeros(obj.size) if x0 is None else np.asarray(x0, dtype=float)
    res = lbfgs(obj.value_and_grad, start, max_iter=problem.max_outer_iters, grad_tol=problem.grad_tol,
                memory=memory)
    v = obj.solve(res.x)
    phi = ExteriorInput(obj.phi(res.x), 1.0, label)
    return RungeOutcome(phi, v, obj.error(v), res)


def runge_sweep(target, alphas, grid, mask, q=None, cfg=None, max_outer_iters=100, grad_tol=1e-10):
    """Controls along a decreasing ``alphas`` sweep, each warm-started from the previous one."""
    alphas = sorted(alphas, reverse=True)
    out = []
    x = None
    for a in alphas:
        prob = ControlProblem(target, a, max_outer_iters=max_outer_iters, grad_tol=grad_tol)
        o = runge_control(prob, grid, mask, q, cfg, x0=x, label=f"runge_alpha{a:g}")
        x = o.optimization.x
        out.append((a, o))
    return out


def constant_target(grid, mask, value=1.0):
    return np.broadcast_to(value * mask.omega, (grid.nt + 1,) + grid.shape).astype(float)


# --- linearization probe ---------------------------------------------------------------

@dataclass
class ProbeResult:
    epsilons: list
    remainder_norms: list
    remainder_sup_hs: list
    fitted_slope: float
    v_ref: np.ndarray
    fit_residual: float = 0.0

    def rows(self):
        return [{"epsilon": e, "remainder_l2": a, "remainder_sup_hs": b}
                for e, a, b in zip(self.epsilons, self.remainder_norms, self.remainder_sup_hs)]

    def save(self, directory, grid):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        dump_field(d / "v_ref.f64", grid, self.v_ref, role="v")
        write_history(d / "remainders.csv", self.rows(), ("epsilon", "remainder_l2", "remainder_sup_hs"))
        summary = {"fitted_slope": _json_float(self.fitted_slope), "fit_residual": _json_float(self.fit_residual),
                   "epsilons": self.epsilons}
        (d / "summary.json").write_text(json.dumps(summary, indent=2))


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def loglog_fit(xs, ys):
    """Least-squares slope of ``log y`` against ``log x`` and the largest residual."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef = np.linalg.lstsq(A, ly, rcond=None)[0]
    return float(coef[0]), float(np.max(np.abs(A @ coef - ly)))


def linearization_probe(grid, mask, spec, phi_base: ExteriorInput, epsilons, cfg=None, threads=1) -> ProbeResult:
    """Remainder ``R_eps = u_eps - eps v`` of the small-amplitude expansion and its log-log slope."""
    if len(epsilons) < 3:
        raise ValueError("at least three epsilons are needed for a slope fit")
    eps = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    if spec.kind != "zero" and (spec.homogeneity_degree() is None or np.any(spec.f(np.zeros(1)) != 0)):
        raise ValueError("the probe needs a homogeneous nonlinearity with f(x, 0) = 0")
    phi_base.check(grid, mask)
    zero = np.zeros(grid.shape)
    phi = phi_base.field()
    v = solve_with_exterior(grid, mask, NonlinearitySpec.zero(), None, phi[0], zero, phi, cfg, energy=False).u

    def remainder(e):
        u = solve_with_exterior(grid, mask, spec, None, e * phi[0], zero, e * phi, cfg, energy=False).u
        return mask.project(u - e * v)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rems = list(pool.map(remainder, eps))
    else:
        rems = [remainder(e) for e in eps]
    l2 = [spacetime_l2(grid, R) for R in rems]
    hs = [sup_norm_in_time(grid, R, "hs") for R in rems]
    scale = spacetime_l2(grid, mask.project(v)) * max(eps)
    if min(l2) <= 1e-13 * max(scale, 1e-300):
        slope, resid = float("nan"), float("nan")
    else:
        slope, resid = loglog_fit(eps, l2)
    return ProbeResult(eps, l2, hs, slope, v, resid)


# --- interior source inversion ------------------------------------------------------

class SourceOperator:
    """``m -> [P_w2 (-Delta)^s u_k]`` where ``u_k'' + A u_k + q u_k = m * weight_k``, zero data.

    ``m`` lives on omega; the parameter vector holds its omega-node values.
    """

    def __init__(self, grid, mask, weights, q=None, cg_tol=1e-12):
        self.grid = grid
        self.mask = mask
        self.weights = [mask.project(np.asarray(w, dtype=float)) for w in weights]
        self.q = q
        self.cg_tol = cg_tol
        self.wt = _dx_weights(grid)
        self.size = int(mask.omega.sum())

    def field(self, x):
        out = np.zeros(self.grid.shape)
        out[self.mask.omega] = x
        return out

    def forward(self, x):
        g, m = self.grid, self.mask
        mx = self.field(x)
        zero = np.zeros(g.shape)
        return [_trace(g, m, newmark(g, m, mx * w, zero, zero, q=self.q, cg_tol=self.cg_tol)[0])
                for w in self.weights]

    def adjoint(self, residuals):
        """Transpose with respect to the weighted data pairing ``sum w_n |cell| r d``."""
        g, m = self.grid, self.mask
        out = np.zeros(g.shape)
        for w, r in zip(self.weights, residuals):
            ubar = _trace_adjoint(g, m, self.wt * r)
            Fbar = newmark_adjoint(g, m, ubar, q=self.q, cg_tol=self.cg_tol)[0]
            out += np.sum(Fbar * w, axis=0)
        return out[m.omega]


class TikhonovObjective:
    """``J(x) = sum_k ||G_k x - d_k||^2 + alpha ||x||^2`` with quadrature-weighted norms."""

    def __init__(self, operator, observed, alpha, model_weight):
        self.op = operator
        self.observed = [np.asarray(d, dtype=float) for d in observed]
        self.alpha = float(alpha)
        self.model_weight = model_weight
        self.wt = _dx_weights(operator.grid)

    def misfit(self, pred):
        return float(sum(np.sum(self.wt * (p - d) ** 2) for p, d in zip(pred, self.observed)))

    def value_and_grad(self, x):
        pred = self.op.forward(x)
        res = [p - d for p, d in zip(pred, self.observed)]
        J = self.misfit(pred) + self.alpha * self.model_weight * float(np.dot(x, x))
        return J, 2.0 * self.op.adjoint(res) + 2.0 * self.alpha * self.model_weight * x

    def value(self, x):
        return self.misfit(self.op.forward(x)) + self.alpha * self.model_weight * float(np.dot(x, x))

    def normal(self, x):
        return self.op.adjoint(self.op.forward(x)) + self.alpha * self.model_weight * x

    def rhs(self):
        return self.op.adjoint(self.observed)

    def solve(self, x0=None, tol=1e-10, max_iter=None):
        """Minimizer via CG on the normal equations."""
        return conjugate_gradient_normal(self.normal, self.rhs(), x0, tol, max_iter)

    def data_norm(self):
        return math.sqrt(sum(float(np.sum(self.wt * d * d)) for d in self.observed))

    def residual_norm(self, x):
        return math.sqrt(self.misfit(self.op.forward(x)))


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def select_alpha(objective_for, alphas, noise_level=None, tau=1.2, tol=1e-10, max_iter=None):
    """Solve along a decreasing ``alphas`` sweep with warm starts and pick one.

    With a declared ``noise_level`` (relative to the data norm) the largest
    alpha whose residual meets the discrepancy ``tau * level * ||d||`` is
    chosen, falling back to the largest alpha; otherwise the smallest alpha
    whose solve converged.  Returns
    ``(x, alpha, history, table)``.
    """
    alphas = sorted(alphas, reverse=True)
    table = []
    best = None
    x = None
    for a in alphas:
        obj = objective_for(a)
        try:
            x, hist = obj.solve(x0=x, tol=tol, max_iter=max_iter)
        except StagnationError:
            table.append({"alpha": a, "residual": float("nan"), "converged": False})
            continue
        resid = obj.residual_norm(x)
        dnorm = obj.data_norm()
        table.append({"alpha": a, "residual": resid, "data_norm": dnorm, "converged": True})
        if noise_level is not None and noise_level > 0:
            if resid <= tau * noise_level * dnorm:
                return x, a, hist, table
            # keep the most regularized solution in case the discrepancy is never met
            best = best or (x, a, hist)
        else:
            best = (x, a, hist)
    if best is None:
        raise StagnationError("no alpha in the sweep converged", [])
    if noise_level:
        warnings.warn("no alpha met the discrepancy principle; using the largest", RuntimeWarning, stacklevel=2)
    return best + (table,)


def source_inversion(observed_trace, grid, mask, alpha, cfg=None, *, weight, q=None, tol=1e-10, max_iter=None,
                     return_history=False):
    """Tikhonov reconstruction of ``m`` on omega from ``w2`` traces driven by ``m * weight``.

    ``observed_trace`` and ``weight`` may be lists to invert several records
    jointly.  The normal equations are solved matrix-free by CG.
    """
    cfg = cfg or SolverConfig()
    weights, observed = _as_list(weight), _as_list(observed_trace)
    if len(weights) != len(observed):
        raise ValueError("need one weight per observed trace")
    op = SourceOperator(grid, mask, weights, q, cfg.cg_tol)
    obj = TikhonovObjective(op, [d * mask.w2 for d in observed], alpha, grid.cell_volume)
    x, hist = obj.solve(tol=tol, max_iter=max_iter)
    m = op.field(x)
    return (m, hist) if return_history else m


# --- results -----------------------------------------------------------------------

@dataclass
class RecoveryResult:
    f_at_one: np.ndarray
    r_estimate: float
    residual_history: list
    regularization_used: float
    summary: dict = field(default_factory=dict)

    def f(self, tau):
        """Reconstructed ``f(x, tau) = f(x, 1) |tau|^r tau``."""
        tau = np.asarray(tau, dtype=float)
        return self.f_at_one * np.abs(tau) ** self.r_estimate * tau

    def save(self, directory, grid):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        dump_field(d / "f_at_one.f64", grid, self.f_at_one, role="f_at_one")
        write_history(d / "history.csv", self.residual_history)
        summary = {"r_estimate": _json_float(self.r_estimate), "alpha": self.regularization_used,
                   "iterations": len(self.residual_history),
                   "formula": "f(x,tau) = f_at_one(x) * |tau|^r * tau"}
        summary.update(_jsonable(self.summary))
        (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


@dataclass
class FieldRecovery:
    fields: dict
    history: list
    summary: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.fields[name]

    def save(self, directory, grid):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in self.fields.items():
            dump_field(d / f"{name}.f64", grid, arr, role=name)
        write_history(d / "history.csv", self.history)
        (d / "summary.json").write_text(json.dumps(_jsonable(self.summary), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _json_float(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _tag(history, stage):
    return [dict(row, stage=stage) for row in history]


# --- nonlinearity recovery ------------------------------------------------------------

def richardson_fit(epsilons, traces, r=None, terms=None, r_bounds=(0.05, 1.5)):
    """Fit ``oracle(eps phi) = sum_j eps^(j r + 1) C_j`` per node by least squares.

    ``terms`` defaults to one coefficient per amplitude.  Without ``r`` the
    exponent is chosen inside ``r_bounds`` by smallest residual, using one
    term fewer so that the fit is not an interpolation.  Returns
    ``(coefficients, r)``.
    """
    eps = np.asarray(epsilons, dtype=float)
    Y = np.stack([np.ravel(t) for t in traces])
    scale = max(np.linalg.norm(Y), 1e-300)
    Y = Y / scale
    terms = len(eps) if terms is None else int(terms)
    if not 1 <= terms <= len(eps):
        raise ValueError("need between 1 and len(epsilons) terms")

    def fit(rr, k):
        A = np.stack([eps ** (j * rr + 1) for j in range(k)], axis=1)
        coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
        return coef, float(np.linalg.norm(A @ coef - Y))

    if r is None:
        k = max(2, min(terms, len(eps) - 1))
        lo, hi = r_bounds
        grid_r = np.linspace(lo, hi, max(int(round((hi - lo) / 0.01)) + 1, 3))
        best = grid_r[int(np.argmin([fit(rr, k)[1] for rr in grid_r]))]
        step = grid_r[1] - grid_r[0]
        opt = minimize_scalar(lambda rr: fit(rr, k)[1], bounds=(max(lo, best - step), min(hi, best + step)),
                              method="bounded", options={"xatol": 1e-6})
        r = float(opt.x)
    coef, _ = fit(float(r), terms)
    shape = np.shape(traces[0])
    return [(c * scale).reshape(shape) for c in coef], float(r)


def fit_linear_part(epsilons, traces, r=None, terms=None):
    """Linear part ``L`` of an amplitude sweep; see :func:`richardson_fit`."""
    coef, r = richardson_fit(epsilons, traces, r, terms)
    return coef[0], r


def _sweep(dn_oracle, mask, phi, eps, threads):
    inputs = [phi.scaled(e, f"{phi.label}*{e:g}") for e in eps]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(dn_oracle, inputs))
    else:
        records = [dn_oracle(inp) for inp in inputs]
    return [rec.trace * mask.w2 for rec in records]


def nonlinearity_at(dn_oracle, grid, mask, control: RungeOutcome, tau, r, cfg=None, *, epsilons=None,
                    alphas=(1e-9, 1e-10, 1e-11, 1e-12), threads=1):
    """Direct estimate of ``f(x, tau)`` from a sweep around the control scaled by ``tau``.

    The ``eps^(r+1)`` coefficient of the sweep is driven by
    ``-f(x, tau v)``; inverting it with the weight ``-|v|^r v`` returns
    ``f(x, tau)`` up to the deviation of ``v`` from 1, without using
    homogeneity in ``tau``.
    """
    cfg = cfg or SolverConfig()
    eps = sorted([0.8, 0.4, 0.2, 0.1, 0.05] if epsilons is None else epsilons, reverse=True)
    phi = ExteriorInput(control.phi.field(), float(tau), f"tau{tau:g}")
    traces = _sweep(dn_oracle, mask, phi, eps, threads)
    coef, _ = richardson_fit(eps, traces, r)
    v = mask.project(control.v)
    op = SourceOperator(grid, mask, [-np.abs(v) ** r * v], None, cfg.cg_tol)
    x, _, _, _ = select_alpha(lambda a: TikhonovObjective(op, [coef[1]], a, grid.cell_volume), alphas)
    return op.field(x)


def recover_nonlinearity(dn_oracle, grid, mask, r_known=None, cfg=None, *, control=None, epsilons=None,
                         alphas=(1e-9, 1e-10, 1e-11, 1e-12), noise_level=None, terms=None, control_tol=0.15,
                         control_iters=400, control_alpha=1e-8, threads=1) -> RecoveryResult:
    """Reconstruct ``f(x, 1)`` of an unknown homogeneous nonlinearity from DN data.

    ``dn_oracle`` maps an :class:`ExteriorInput` to a :class:`DnRecord`
    (zero initial data).  Stages: Runge control towards ``v = 1``, an
    amplitude sweep through the oracle, a log-log slope fit of the
    remainders for ``r``, and source inversion of the ``eps^(r+1)``
    coefficient of the sweep, whose source is ``-f(x, 1) |v|^r v``.
    """
    cfg = cfg or SolverConfig()
    history = []
    if control is None:
        prob = ControlProblem(constant_target(grid, mask), control_alpha, max_outer_iters=control_iters,
                              grad_tol=1e-12)
        control = runge_control(prob, grid, mask, None, cfg)
    history += _tag(control.optimization.history, "runge")
    if control.achieved_error > control_tol:
        raise PipelineError("runge", f"control error {control.achieved_error:.3f} exceeds {control_tol}")
    phi = control.phi
    eps = sorted([0.8, 0.4, 0.2, 0.1, 0.05] if epsilons is None else epsilons, reverse=True)
    if len(eps) < 3:
        raise ValueError("need at least 3 amplitudes")
    if terms is None:
        terms = len(eps) if not noise_level else min(3, len(eps))

    traces = _sweep(dn_oracle, mask, phi, eps, threads)
    L, r_fit = fit_linear_part(eps, traces, r_known, terms)
    D = [t - e * L for t, e in zip(traces, eps)]
    dnorm = [spacetime_l2(grid, d) for d in D]
    tnorm = max(spacetime_l2(grid, t) for t in traces)
    summary = {"control_error": control.achieved_error, "epsilons": eps, "remainder_norms": dnorm,
               "terms": terms}
    if max(dnorm) <= 1e-9 * max(tnorm, 1e-300):
        summary.update(degenerate=True, slope=None)
        return RecoveryResult(np.zeros(grid.shape), float("nan"), history, float("nan"), summary)
    slope, resid = loglog_fit(eps, dnorm)
    summary.update(slope=slope, slope_residual=resid, degenerate=False)
    if r_known is None:
        if resid > 0.2:
            raise PipelineError("r-estimate", f"slope fit residual {resid:.3f} exceeds 0.2 in log units")
        # the slope is biased by higher-order terms; sharpen it with the sweep fit near slope - 1
        r_slope = slope - 1.0
        _, r = richardson_fit(eps, traces, None, terms, (max(r_slope - 0.1, 1e-3), r_slope + 0.1))
        summary["r_slope"] = r_slope
        if not 0.0 < r <= 1.05:
            warnings.warn(f"estimated r = {r:.3f} lies outside (0, 1]", RuntimeWarning, stacklevel=2)
    else:
        r = float(r_known)

    coef, _ = richardson_fit(eps, traces, r, terms)
    level = None
    if noise_level:
        # trace noise of size level * ||trace|| propagated through the fit
        design = np.stack([np.asarray(eps) ** (j * r + 1) for j in range(terms)], axis=1)
        row = np.linalg.pinv(design)[1]
        sigma = math.sqrt(sum((c * noise_level * spacetime_l2(grid, t)) ** 2 for c, t in zip(row, traces)))
        level = sigma / max(spacetime_l2(grid, coef[1]), 1e-300)
        summary["coefficient_noise_level"] = level
    v = mask.project(control.v)
    op = SourceOperator(grid, mask, [-np.abs(v) ** r * v], None, cfg.cg_tol)
    x, alpha_used, hist, table = select_alpha(
        lambda a: TikhonovObjective(op, [coef[1]], a, grid.cell_volume), alphas, level)
    history += _tag(hist, "source")
    summary["alpha_table"] = table
    return RecoveryResult(op.field(x), float(r), history, float(alpha_used), summary)


# --- initial data ---------------------------------------------------------------

class InitialDataOperator:
    """``(u0, u1) -> P_w2 (-Delta)^s u`` for ``u'' + A u + q u + qt u = 0``."""

    def __init__(self, grid, mask, q=None, qt=None, cg_tol=1e-12):
        self.grid = grid
        self.mask = mask
        self.q = q
        self.qt = qt
        self.cg_tol = cg_tol
        self.no = int(mask.omega.sum())
        self.size = 2 * self.no
        self.wt = _dx_weights(grid)

    def split(self, x):
        u0 = np.zeros(self.grid.shape)
        u1 = np.zeros(self.grid.shape)
        u0[self.mask.omega] = x[: self.no]
        u1[self.mask.omega] = x[self.no:]
        return u0, u1

    def forward(self, x):
        u0, u1 = self.split(x)
        u = newmark(self.grid, self.mask, None, u0, u1, q=self.q, qt=self.qt, cg_tol=self.cg_tol)[0]
        return [_trace(self.grid, self.mask, u)]

    def adjoint(self, residuals):
        ubar = _trace_adjoint(self.grid, self.mask, self.wt * residuals[0])
        _, u0b, v0b = newmark_adjoint(self.grid, self.mask, ubar, q=self.q, qt=self.qt, cg_tol=self.cg_tol)
        om = self.mask.omega
        return np.concatenate([u0b[om], v0b[om]])


def _linear_q(spec):
    if spec.kind == "zero":
        return None
    if spec.kind == "linear_potential":
        return spec.q
    return None


def recover_initial_data(passive_trace, grid, mask, spec_known, alpha, cfg=None, *, gauss_newton_iters=8,
                         gn_tol=1e-6, x0=None) -> FieldRecovery:
    """Tikhonov reconstruction of ``(u0, u1)`` on omega from a passive ``w2`` trace.

    Linear specs give one normal-equation solve.  Otherwise Gauss-Newton
    steps linearize around the current Picard solution; only local
    convergence is claimed.
    """
    cfg = cfg or SolverConfig()
    trace = passive_trace.trace if isinstance(passive_trace, DnRecord) else np.asarray(passive_trace)
    if isinstance(passive_trace, DnRecord) and np.any(passive_trace.input.field() != 0):
        raise ValueError("initial-data recovery needs a passive record (phi = 0)")
    if spec_known.damping is not None:
        raise ValueError("damping terms are not supported by the initial-data inversion")
    d = trace * mask.w2
    wmod = grid.cell_volume
    if spec_known.is_linear:
        op = InitialDataOperator(grid, mask, _linear_q(spec_known), None, cfg.cg_tol)
        obj = TikhonovObjective(op, [d], alpha, wmod)
        x, hist = obj.solve(x0=x0)
        u0, u1 = op.split(x)
        return FieldRecovery({"u0": u0, "u1": u1}, _tag(hist, "normal"),
                             {"alpha": alpha, "iterations": len(hist), "residual": obj.residual_norm(x),
                              "data_norm": obj.data_norm(), "gauss_newton": False})

    warnings.warn("nonlinear initial-data recovery: Gauss-Newton converges only locally", RuntimeWarning,
                  stacklevel=2)
    n_om = int(mask.omega.sum())
    wt = _dx_weights(grid)
    base = InitialDataOperator(grid, mask, None, None, cfg.cg_tol)

    def evaluate(x):
        u0, u1 = base.split(x)
        u = solve_nonlinear(grid, mask, spec_known, None, u0, u1, cfg, energy=False).u
        res = _trace(grid, mask, u) - d
        return float(np.sum(wt * res * res)) + alpha * wmod * float(x @ x), (u, res)

    def step(x, state):
        u, res = state
        lin = InitialDataOperator(grid, mask, None, mask.project(spec_known.df(u)), cfg.cg_tol)
        obj = TikhonovObjective(lin, [-res], alpha, wmod)
        rhs = lin.adjoint([-res]) - alpha * wmod * x
        return conjugate_gradient_normal(obj.normal, rhs)

    start = np.zeros(2 * n_om) if x0 is None else np.array(x0, dtype=float)
    x, history = gauss_newton(evaluate, step, start, gauss_newton_iters, gn_tol, "gauss-newton")
    u0, u1 = base.split(x)
    return FieldRecovery({"u0": u0, "u1": u1}, history, {"alpha": alpha, "gauss_newton": True})


def gauss_newton(evaluate, solve_step, x0, max_iter, tol, stage, max_halvings=8):
    """Gauss-Newton with step halving.

    ``evaluate(x) -> (J, state)``; ``solve_step(x, state) -> (step, cg_history)``.
    Stops when the relative step falls below ``tol`` or no halving decreases ``J``.
    """
    x = np.array(x0, dtype=float)
    J, state = evaluate(x)
    history = [{"iteration": 0, "objective": J, "grad_norm": float("nan"), "step": 0.0, "stage": stage}]
    for k in range(1, max_iter + 1):
        dx, hist = solve_step(x, state)
        history += _tag(hist, f"{stage}-cg{k}")
        if not np.any(dx):
            break
        t = 1.0
        for _ in range(max_halvings + 1):
            J_new, state_new = evaluate(x + t * dx)
            if J_new < J:
                break
            t *= 0.5
        else:
            warnings.warn(f"{stage}: no step decreased the objective; stopping", RuntimeWarning, stacklevel=3)
            break
        x = x + t * dx
        J, state = J_new, state_new
        history.append({"iteration": k, "objective": J, "grad_norm": float("nan"), "step": t, "stage": stage})
        if t * np.linalg.norm(dx) <= tol * max(np.linalg.norm(x), 1e-300):
            break
    return x, history


def initial_data_objective(grid, mask, observed, alpha, q=None, qt=None, cg_tol=1e-12):
    op = InitialDataOperator(grid, mask, q, qt, cg_tol)
    return TikhonovObjective(op, [observed * mask.w2], alpha, grid.cell_volume)


def source_objective(grid, mask, observed, alpha, weight, q=None, cg_tol=1e-12):
    op = SourceOperator(grid, mask, _as_list(weight), q, cg_tol)
    return TikhonovObjective(op, [o * mask.w2 for o in _as_list(observed)], alpha, grid.cell_volume)


# --- potential and initial data together --------------------------------------------

def default_probe_targets(grid, mask):
    """Constant plus low-frequency targets on omega."""
    x = grid.coords[0]
    om = mask.omega
    lo, hi = x[om].min(), x[om].max()
    xi = (x - 0.5 * (lo + hi)) / max(0.5 * (hi - lo), 1e-300)
    shapes = [np.ones(grid.shape), xi, np.cos(np.pi * xi)]
    return [np.broadcast_to(s * om, (grid.nt + 1,) + grid.shape).astype(float) for s in shapes]


def runge_probes(grid, mask, targets=None, alpha=1e-6, iters=60, cfg=None):
    targets = default_probe_targets(grid, mask) if targets is None else targets
    out = []
    for k, t in enumerate(targets):
        prob = ControlProblem(t, alpha, max_outer_iters=iters, grad_tol=1e-12)
        out.append(runge_control(prob, grid, mask, None, cfg, label=f"probe{k}").phi)
    return out


def _exterior_interior(grid, mask, a, phi, cg_tol):
    """Interior part ``v`` of the exterior-driven linear solution with potential ``a``."""
    zero = np.zeros(grid.shape)
    src = -mask.project(frac_laplacian(grid, phi))
    return newmark(grid, mask, src, zero, zero, q=a, cg_tol=cg_tol)[0]


class JointOperator:
    """Linearization of the records in ``(a, u0, u1)`` around the interior states ``states``.

    Record ``k`` responds to ``da`` through the source ``-da * states[k]``
    and to ``(du0, du1)`` through the initial data.
    """

    def __init__(self, grid, mask, states, a, cg_tol=1e-12):
        self.grid = grid
        self.mask = mask
        self.states = states
        self.a = a
        self.cg_tol = cg_tol
        self.no = int(mask.omega.sum())
        self.size = 3 * self.no
        self.wt = _dx_weights(grid)

    def split(self, x):
        out = []
        for k in range(3):
            f = np.zeros(self.grid.shape)
            f[self.mask.omega] = x[k * self.no:(k + 1) * self.no]
            out.append(f)
        return out

    def forward(self, x):
        g, m = self.grid, self.mask
        da, du0, du1 = self.split(x)
        return [_trace(g, m, newmark(g, m, -da * w, du0, du1, q=self.a, cg_tol=self.cg_tol)[0])
                for w in self.states]

    def adjoint(self, residuals):
        g, m = self.grid, self.mask
        om = m.omega
        out = np.zeros(self.size)
        for w, r in zip(self.states, residuals):
            ubar = _trace_adjoint(g, m, self.wt * r)
            Fbar, u0b, v0b = newmark_adjoint(g, m, ubar, q=self.a, cg_tol=self.cg_tol)
            out += np.concatenate([-np.sum(Fbar * w, axis=0)[om], u0b[om], v0b[om]])
        return out


def _joint_refine(grid, mask, phis, data, a, u0, u1, alpha, cfg, iters, tol, cg_iters=None):
    """Gauss-Newton on ``(a, u0, u1)`` against the passive and all probe records at once."""
    om = mask.omega
    wt = _dx_weights(grid)
    wmod = grid.cell_volume
    no = int(om.sum())
    sources = [None] + [-mask.project(frac_laplacian(grid, p)) for p in phis]
    exterior = [0.0] + list(phis)

    def fields(x):
        out = []
        for k in range(3):
            f = np.zeros(grid.shape)
            f[om] = x[k * no:(k + 1) * no]
            out.append(f)
        return out

    def evaluate(x):
        a_, u0_, u1_ = fields(x)
        states = [newmark(grid, mask, src, u0_, u1_, q=a_, cg_tol=cfg.cg_tol)[0] for src in sources]
        res = [_trace(grid, mask, w + e) - d for w, e, d in zip(states, exterior, data)]
        return sum(float(np.sum(wt * r * r)) for r in res) + alpha * wmod * float(x @ x), (states, res)

    def step(x, state):
        states, res = state
        op = JointOperator(grid, mask, states, fields(x)[0], cfg.cg_tol)
        obj = TikhonovObjective(op, [-r for r in res], alpha, wmod)
        rhs = op.adjoint([-r for r in res]) - alpha * wmod * x
        return conjugate_gradient_normal(obj.normal, rhs, max_iter=cg_iters, warn_cap=cg_iters is None)

    start = np.concatenate([a[om], u0[om], u1[om]])
    x, history = gauss_newton(evaluate, step, start, iters, tol, "joint")
    return fields(x), history


def recover_potential(dn_oracle, grid, mask, alpha, cfg=None, *, probes=None, alpha_initial=None,
                      gauss_newton_iters=6, gn_tol=1e-4, joint_iters=5, alpha_joint=None,
                      cg_iters=100) -> FieldRecovery:
    """Recover ``a`` and then ``(u0, u1)`` for an oracle backed by ``f = a(x) u``.

    Stage ``potential``: differences ``oracle(phi_k) - oracle(0)`` cancel the
    unknown initial data; ``a`` is fitted to them by Gauss-Newton output
    least squares.  Stage ``initial``: the passive record is inverted with
    the recovered potential.  Stage ``joint``: Gauss-Newton on all three
    fields against every record, since the passive trace is far more
    sensitive to ``a`` than the differences are.  Each Gauss-Newton step
    runs at most ``cg_iters`` CG iterations.
    """
    cfg = cfg or SolverConfig()
    probes = runge_probes(grid, mask, cfg=cfg) if probes is None else probes
    try:
        passive = dn_oracle(ExteriorInput.zero(grid))
        records = [dn_oracle(p) for p in probes]
    except Exception as exc:
        raise PipelineError("measure", str(exc)) from exc
    diffs = [(rec.trace - passive.trace) * mask.w2 for rec in records]
    phis = [p.field() for p in probes]
    wt = _dx_weights(grid)
    wmod = grid.cell_volume
    n_om = int(mask.omega.sum())

    def potential(x):
        a = np.zeros(grid.shape)
        a[mask.omega] = x
        return a

    def evaluate(x):
        a = potential(x)
        vs = [_exterior_interior(grid, mask, a, p, cfg.cg_tol) for p in phis]
        res = [_trace(grid, mask, v + p) - d for v, p, d in zip(vs, phis, diffs)]
        return sum(float(np.sum(wt * r * r)) for r in res) + alpha * wmod * float(x @ x), (vs, res)

    def step(x, state):
        vs, res = state
        op = SourceOperator(grid, mask, [-v for v in vs], potential(x), cfg.cg_tol)
        obj = TikhonovObjective(op, [-r for r in res], alpha, wmod)
        rhs = op.adjoint([-r for r in res]) - alpha * wmod * x
        return conjugate_gradient_normal(obj.normal, rhs, max_iter=cg_iters, warn_cap=cg_iters is None)

    try:
        x, history = gauss_newton(evaluate, step, np.zeros(n_om), gauss_newton_iters, gn_tol, "potential")
    except StagnationError as exc:
        raise PipelineError("potential", str(exc)) from exc
    a = potential(x)
    try:
        init = recover_initial_data(passive, grid, mask, NonlinearitySpec.linear_potential(a), alpha_initial or alpha,
                                    cfg)
    except StagnationError as exc:
        raise PipelineError("initial", str(exc)) from exc
    history += _tag(init.history, "initial")
    fields = {"a": a, "u0": init["u0"], "u1": init["u1"]}
    if joint_iters:
        data = [passive.trace * mask.w2] + [rec.trace * mask.w2 for rec in records]
        try:
            (a, u0, u1), joint = _joint_refine(grid, mask, phis, data, a, init["u0"], init["u1"],
                                               alpha_joint or alpha_initial or alpha, cfg, joint_iters, gn_tol,
                                               cg_iters)
        except StagnationError as exc:
            raise PipelineError("joint", str(exc)) from exc
        history += joint
        fields = {"a": a, "u0": u0, "u1": u1}
    return FieldRecovery(fields, history, {"alpha": alpha, "probes": len(probes),
                                           "gauss_newton_iters": sum(1 for h in history if h["stage"] == "potential") - 1,
                                           "joint_iters": sum(1 for h in history if h["stage"] == "joint") - 1})
