import math

import numpy as np
import pytest

import fracwave.forward as forward
from fracwave.forward import (NonlinearitySpec, PicardError, SolverConfig, apply_nemytskii,
                              nemytskii_modulus, newmark, newmark_adjoint, solve_linear,
                              solve_nonlinear, solve_viscous, solve_with_exterior,
                              validate_assumption)
from fracwave.lattice import (Grid, cg_solve, frac_laplacian, hs_tilde_norm, l2_norm,
                              masked_stiffness, smooth_bump, sup_norm_in_time)

from conftest import reference_mask


@pytest.fixture(scope="module")
def g():
    return Grid(1, 128, 8.0, 0.75, 1.0 / 128, 128)


@pytest.fixture(scope="module")
def m(g):
    return reference_mask(g)


def zeros(g):
    return np.zeros(g.shape)


def st_zeros(g):
    return np.zeros((g.nt + 1,) + g.shape)


# --- validation -----------------------------------------------------------------

def test_critical_p_condition_fails_for_p_two():
    # s = 1/2 is critical in one dimension; the nearest representable s above it is used
    spec = NonlinearitySpec.power(np.ones(64), r=1.0, p=2.0)
    rep = validate_assumption(spec, Grid(1, 64, 8.0, 0.5000000000000001, 0.01, 4))
    cond = rep.conditions[0]
    assert not cond.passed and cond.threshold == "p>2"


def test_zero_nonlinearity_passes(g):
    rep = validate_assumption(NonlinearitySpec.zero(), g)
    assert rep.passed and rep.homogeneous


def test_growth_condition_subcritical():
    g = Grid(1, 64, 8.0, 0.25, 0.01, 4)
    rep = validate_assumption(NonlinearitySpec.power(np.ones(64), r=0.5, p=math.inf), g)
    growth = [c for c in rep.conditions if c.name == "(i) growth r"][0]
    assert growth.passed and growth.threshold == "r<=1"
    rep = validate_assumption(NonlinearitySpec.power(np.ones(64), r=1.5, p=math.inf), g)
    assert not rep.passed


def test_negative_coefficient_reported(g):
    q = np.ones(g.shape)
    q[3] = -1
    rep = validate_assumption(NonlinearitySpec.power(q, r=1.0), g)
    assert [c.name for c in rep.failed()] == ["(i) coefficient q>=0"]


def test_homogeneity_flag(g):
    q = np.linspace(0, 1, g.N)
    assert validate_assumption(NonlinearitySpec.power(q, 0.5), g).homogeneous
    tau = np.linspace(-4, 4, 81)
    table = np.sinh(tau)
    custom = NonlinearitySpec("custom", tau_grid=tau, table=table)
    rep = validate_assumption(custom, g)
    assert not rep.homogeneous
    assert rep.passed
    assert "81 samples" in rep.coverage


def test_custom_primitive_matches_closed_form():
    tau = np.linspace(-3, 3, 601)
    spec = NonlinearitySpec("custom", tau_grid=tau, table=tau ** 3)
    x = np.array([-2.5, 0.3, 1.7])
    np.testing.assert_allclose(spec.F(x), x ** 4 / 4, atol=1e-8)
    with pytest.raises(ValueError, match="extrapolation"):
        spec.f(np.array([3.5]))


def test_damping_lipschitz_check(g):
    gfun, lip = NonlinearitySpec.linear_damping(np.full(g.shape, 0.3))
    spec = NonlinearitySpec("zero", damping=gfun, lipschitz_g=lip)
    assert validate_assumption(spec, g).passed
    spec.lipschitz_g = 0.1
    assert not validate_assumption(spec, g).passed


# --- linear solver ------------------------------------------------------------------

def test_zero_data_gives_zero_trajectory(g, m):
    tr = solve_linear(g, m, None, None, zeros(g), zeros(g))
    assert np.all(tr.u == 0) and np.all(tr.ut == 0)
    assert np.all(tr.energy_log["kinetic"] == 0)


def test_initial_data_reproduced_exactly(g, m):
    u0 = smooth_bump(g, 0.1, 0.5)
    u1 = smooth_bump(g, -0.2, 0.4, 0.3)
    tr = solve_linear(g, m, None, None, u0, u1)
    np.testing.assert_array_equal(tr.u[0], u0)
    np.testing.assert_array_equal(tr.ut[0], u1)


def single_mode_error(dt, k=1):
    g = Grid(1, 64, 8.0, 0.75, dt, int(round(1.0 / dt)))
    x = g.coords[0]
    kx = 2 * np.pi * k / g.box_length
    mode = np.cos(kx * x)
    tr = solve_linear(g, None, None, None, mode, zeros(g), energy=False)
    omega = kx ** g.s
    exact = np.cos(omega * g.times)[:, None] * mode
    return np.max(np.abs(tr.u - exact)) / np.max(np.abs(exact))


def test_single_mode_closed_form():
    errs = [single_mode_error(dt, k=5) for dt in (0.02, 0.01, 0.005)]
    assert errs[-1] < 1e-3
    slopes = np.diff(np.log(errs)) / np.diff(np.log([0.02, 0.01, 0.005]))
    assert np.all(np.abs(slopes - 2) < 0.1)


def test_linear_energy_conserved(g, m):
    rng = np.random.default_rng(0)
    q = 2.0 * smooth_bump(g, 0.3, 0.6)
    u0 = smooth_bump(g, -0.2, 0.5) * (1 + 0.1 * rng.standard_normal(g.shape))
    tr = solve_linear(g, m, q, None, m.project(u0), m.project(smooth_bump(g, 0.2, 0.4)))
    log = tr.energy_log
    total = log["kinetic"] + log["elastic"] + log["potential"]
    assert np.max(np.abs(np.diff(total))) / total[0] < 1e-8


def test_linear_energy_identity_with_forcing(g, m):
    F = st_zeros(g)
    F[:] = m.project(smooth_bump(g, 0.0, 0.5))
    F *= np.sin(3 * g.times)[:, None]
    tr = solve_linear(g, m, np.full(g.shape, 0.5), F, zeros(g), zeros(g))
    assert tr.energy_residual() < 1e-10


def test_time_reversal(g, m):
    u0 = smooth_bump(g, 0.1, 0.6)
    fwd = solve_linear(g, m, None, None, u0, zeros(g), energy=False)
    back = solve_linear(g, m, None, None, fwd.u[-1], -fwd.ut[-1], energy=False)
    err = l2_norm(g, back.u[-1] - u0) / l2_norm(g, u0)
    assert err < 10 * g.dt ** 2


def test_continuity_estimate_linear(g, m):
    u0 = smooth_bump(g, 0.0, 0.6)
    eta = smooth_bump(g, 0.3, 0.4)
    base = solve_linear(g, m, None, None, u0, zeros(g), energy=False)
    ratios = []
    for delta in (1e-1, 1e-2, 1e-3):
        pert = solve_linear(g, m, None, None, u0 + delta * eta, zeros(g), energy=False)
        diff = sup_norm_in_time(g, pert.u - base.u, "hs") + sup_norm_in_time(g, pert.ut - base.ut)
        ratios.append(diff / (delta * hs_tilde_norm(g, eta)))
    assert max(ratios) / min(ratios) < 1 + 1e-6


# --- adjoint of the stepping scheme -----------------------------------------------------

@pytest.mark.parametrize("eps", [0.0, 0.05])
def test_newmark_adjoint_is_transpose(g, m, eps):
    rng = np.random.default_rng(3)
    F = m.project(rng.standard_normal((g.nt + 1,) + g.shape))
    u0 = m.project(rng.standard_normal(g.shape))
    v0 = m.project(rng.standard_normal(g.shape))
    q = np.abs(rng.standard_normal(g.shape))
    qt = np.abs(rng.standard_normal((g.nt + 1,) + g.shape))
    ubar = m.project(rng.standard_normal(F.shape))
    vbar = m.project(rng.standard_normal(F.shape))
    u, v, a = newmark(g, m, F, u0, v0, q=q, qt=qt, eps=eps, cg_tol=1e-14)
    lhs = np.sum(ubar * u) + np.sum(vbar * v)
    Fb, u0b, v0b = newmark_adjoint(g, m, ubar, vbar, q=q, qt=qt, eps=eps, cg_tol=1e-14)
    rhs = np.sum(Fb * F) + np.sum(u0b * u0) + np.sum(v0b * v0)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


# --- nonlinear solver -------------------------------------------------------------------

def test_zero_spec_matches_linear_bitwise(g, m):
    u0 = smooth_bump(g, 0.1, 0.5)
    h = st_zeros(g)
    h[:] = 0.2 * m.project(smooth_bump(g, -0.3, 0.4))
    a = solve_linear(g, m, None, h, u0, zeros(g))
    b = solve_nonlinear(g, m, NonlinearitySpec.zero(), h, u0, zeros(g))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.ut, b.ut)


def test_small_data_contracts(g, m):
    spec = NonlinearitySpec.power(m.project(np.ones(g.shape)), r=1.0)
    u0 = 0.2 * smooth_bump(g, 0.0, 0.6)
    tr = solve_nonlinear(g, m, spec, None, u0, zeros(g), SolverConfig(slab_steps=32))
    assert all(rec["converged"] for rec in tr.picard_log)
    assert max(rec["ratio"] for rec in tr.picard_log) <= 0.5


def test_homogeneity_rescaling(g, m):
    r, lam = 0.5, 3.0
    q = 4.0 * m.project(smooth_bump(g, 0.0, 0.8))
    u0 = smooth_bump(g, 0.2, 0.5)
    cfg = SolverConfig(slab_steps=16, picard_tol=1e-13)
    base = solve_nonlinear(g, m, NonlinearitySpec.power(q, r), None, u0, zeros(g), cfg, energy=False)
    scaled = solve_nonlinear(g, m, NonlinearitySpec.power(q / lam ** r, r), None, lam * u0, zeros(g),
                             cfg, energy=False)
    err = np.max(np.abs(scaled.u - lam * base.u)) / np.max(np.abs(lam * base.u))
    assert err < 1e-9


def test_nonlinear_energy_identity():
    g = Grid(1, 128, 8.0, 0.75, 1e-3, 300)
    m = reference_mask(g)
    for r in (0.5, 1.0):
        spec = NonlinearitySpec.power(3.0 * m.project(smooth_bump(g, 0.0, 0.9)), r)
        tr = solve_nonlinear(g, m, spec, None, smooth_bump(g, 0.1, 0.5), zeros(g),
                             SolverConfig(slab_steps=50))
        assert tr.energy_residual() < 1e-4


def test_nonlinear_energy_with_damping(g, m):
    gfun, lip = NonlinearitySpec.linear_damping(0.5 * m.omega)
    spec = NonlinearitySpec.power(m.project(np.ones(g.shape)), 1.0, damping=gfun, lipschitz_g=lip)
    tr = solve_nonlinear(g, m, spec, None, smooth_bump(g, 0.0, 0.5), zeros(g))
    assert tr.energy_residual() < 1e-3
    assert tr.energy_log["dissipation"][-1] > 0


def test_bisection_on_large_slab(g, m):
    spec = NonlinearitySpec.power(60.0 * m.omega, 1.0)
    u0 = smooth_bump(g, 0.0, 0.7)
    tr = solve_nonlinear(g, m, spec, None, u0, zeros(g), SolverConfig(slab_steps=g.nt, picard_max_iters=25))
    failed = [rec for rec in tr.picard_log if not rec["converged"]]
    ok = [rec for rec in tr.picard_log if rec["converged"]]
    assert failed and failed[0]["slab_steps"] == g.nt
    assert all(rec["ratio"] < 1 for rec in ok)
    assert sum(rec["slab_steps"] for rec in ok) == g.nt


def test_single_step_failure_is_fatal():
    g = Grid(1, 64, 8.0, 0.75, 0.5, 4)
    m = reference_mask(g)
    spec = NonlinearitySpec.power(1e6 * m.omega, 1.0)
    with pytest.raises(PicardError):
        solve_nonlinear(g, m, spec, None, smooth_bump(g, 0, 0.5), zeros(g),
                        SolverConfig(slab_steps=2, picard_max_iters=5))


def test_invalid_spec_needs_force(g, m):
    q = -np.ones(g.shape)
    with pytest.raises(ValueError, match="force"):
        solve_nonlinear(g, m, NonlinearitySpec.power(q, 1.0), None, zeros(g), zeros(g))
    solve_nonlinear(g, m, NonlinearitySpec.power(q, 1.0), None, zeros(g), zeros(g), SolverConfig(force=True))


# --- exterior data ------------------------------------------------------------------------

def exterior_phi(g, m, amp=1.0, freq=2.0):
    shape = m.project(smooth_bump(g, -2.0, 0.8), "w1")
    return amp * np.sin(freq * np.pi * g.times)[:, None] ** 2 * shape


def test_zero_exterior_matches_nonlinear(g, m):
    spec = NonlinearitySpec.power(m.project(np.ones(g.shape)), 1.0)
    u0 = smooth_bump(g, 0.0, 0.5)
    a = solve_with_exterior(g, m, spec, None, u0, zeros(g), st_zeros(g))
    b = solve_nonlinear(g, m, spec, None, u0, zeros(g))
    np.testing.assert_array_equal(a.u, b.u)


def test_exterior_values_imposed_exactly(g, m):
    phi = exterior_phi(g, m)
    tr = solve_with_exterior(g, m, NonlinearitySpec.zero(), None, zeros(g), zeros(g), phi)
    np.testing.assert_array_equal(tr.u[:, m.exterior], phi[:, m.exterior])
    assert np.abs(tr.u[:, m.omega]).max() > 0


def test_exterior_overlap_rejected(g, m):
    phi = st_zeros(g)
    phi[:, m.omega] = 1.0
    with pytest.raises(ValueError, match="overlaps"):
        solve_with_exterior(g, m, NonlinearitySpec.zero(), None, zeros(g), zeros(g), phi)


def test_static_exterior_approaches_elliptic_extension(g, m):
    shape = m.project(smooth_bump(g, -2.0, 0.8), "w1")
    phi = np.broadcast_to(shape, (g.nt + 1,) + g.shape).copy()
    rhs = -m.project(frac_laplacian(g, shape))
    v_star = cg_solve(lambda x: masked_stiffness(g, x, m), rhs, tol=1e-12)
    # undamped: oscillation around the elliptic state, running mean converges
    tr = solve_with_exterior(g, m, NonlinearitySpec.zero(), None, shape, zeros(g), phi)
    v = tr.u * m.omega
    errs = [l2_norm(g, v[: k + 1].mean(axis=0) - v_star) for k in (g.nt // 4, g.nt // 2, g.nt)]
    assert errs[0] > errs[1] > errs[2]
    # damped: the state itself settles
    longg = g.with_time(nt=4 * g.nt)
    damped = solve_viscous(longg, m, None, np.broadcast_to(rhs, (longg.nt + 1,) + g.shape), zeros(g),
                           zeros(g), eps=1.0)
    assert l2_norm(g, damped.u[-1] - v_star) < 0.1 * l2_norm(g, v_star)


def test_exterior_energy_estimate_ratio_bounded(g, m):
    rng = np.random.default_rng(5)
    ratios = []
    for k in range(4):
        centre = rng.uniform(-2.6, -1.6)
        shape = m.project(smooth_bump(g, centre, 0.5), "w1")
        phi = np.sin((k + 1) * np.pi * g.times)[:, None] * shape
        u0 = m.project(rng.uniform(0.1, 1.0) * smooth_bump(g, 0.0, 0.5))
        tr = solve_with_exterior(g, m, NonlinearitySpec.zero(), None, u0, zeros(g), phi)
        v = tr.u - phi
        lhs = sup_norm_in_time(g, v, "hs") ** 2 + sup_norm_in_time(g, m.project(tr.ut)) ** 2
        src = m.project(frac_laplacian(g, phi))
        w = np.full(g.nt + 1, g.dt)
        w[[0, -1]] /= 2
        rhs = hs_tilde_norm(g, u0) ** 2 + g.cell_volume * np.sum(w[:, None] * src ** 2)
        ratios.append(lhs / rhs)
    assert max(ratios) <= 2 + 4 * g.T


# --- viscous regularization ----------------------------------------------------------------

def test_viscous_eps_zero_identical(g, m):
    u0 = smooth_bump(g, 0.0, 0.5)
    a = solve_linear(g, m, None, None, u0, zeros(g))
    b = solve_viscous(g, m, None, None, u0, zeros(g), eps=0.0)
    np.testing.assert_array_equal(a.u, b.u)


def test_viscous_converges_monotonically(g, m):
    src = st_zeros(g)
    src[:] = m.project(smooth_bump(g, 0.2, 0.5)) * np.cos(4 * g.times)[:, None]
    ref = solve_linear(g, m, None, src, zeros(g), zeros(g), energy=False)
    gaps = []
    for eps in (1e-1, 1e-2, 1e-3):
        tr = solve_viscous(g, m, None, src, zeros(g), zeros(g), eps=eps, energy=False)
        gaps.append(sup_norm_in_time(g, tr.u - ref.u))
    assert gaps[0] > gaps[1] > gaps[2]


def test_viscous_energy_decays(g, m):
    tr = solve_viscous(g, m, None, None, smooth_bump(g, 0.0, 0.5), zeros(g), eps=0.05)
    log = tr.energy_log
    total = log["kinetic"] + log["elastic"]
    assert np.all(np.diff(total) <= 1e-14 * total[0])
    assert total[-1] < total[0]
    assert tr.energy_residual() < 1e-10


def test_reverse_time_terminal_conditions(g, m):
    F = st_zeros(g)
    F[:] = m.project(smooth_bump(g, 0.0, 0.5)) * g.times[:, None]
    w = solve_viscous(g, m, None, F, zeros(g), zeros(g), eps=0.01, reverse_time=True, energy=False)
    assert np.all(w.u[-1] == 0) and np.all(w.ut[-1] == 0)
    assert np.abs(w.u[0]).max() > 0


# --- Nemytskii ---------------------------------------------------------------------------

def test_nemytskii_zero_and_homogeneity(g, m):
    spec = NonlinearitySpec.power(m.project(smooth_bump(g, 0, 0.8)), 0.5)
    assert np.all(apply_nemytskii(spec, st_zeros(g), m) == 0)
    u = np.random.default_rng(0).standard_normal((5,) + g.shape)
    np.testing.assert_allclose(apply_nemytskii(spec, 2.0 * u, m), 2.0 ** 1.5 * apply_nemytskii(spec, u, m),
                               rtol=1e-13, atol=1e-15)


def test_nemytskii_modulus_decreases(g, m):
    spec = NonlinearitySpec.power(m.project(np.ones(g.shape)), 1.0)
    u = np.sin(np.pi * g.times)[:, None] * smooth_bump(g, 0.0, 0.8)
    rows = nemytskii_modulus(g, m, spec, u, [1e-1, 1e-2, 1e-4, 1e-6, 1e-8])
    vals = [r["max"] for r in rows]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6


def test_nemytskii_custom_range_refused(g, m):
    tau = np.linspace(-1, 1, 21)
    spec = NonlinearitySpec("custom", tau_grid=tau, table=tau)
    with pytest.raises(ValueError):
        apply_nemytskii(spec, 2.0 * np.ones((2,) + g.shape))


# --- persistence -----------------------------------------------------------------------

def test_trajectory_save(tmp_path, g, m):
    spec = NonlinearitySpec.power(m.project(np.ones(g.shape)), 1.0)
    tr = solve_nonlinear(g, m, spec, None, 0.3 * smooth_bump(g, 0, 0.5), zeros(g))
    tr.save(tmp_path)
    header = (tmp_path / "energy_log.csv").read_text().splitlines()[0]
    assert header == "step,t,kinetic,elastic,potential,work,dissipation,residual"
    assert (tmp_path / "picard_log.csv").read_text().startswith("slab_start,")
    assert (tmp_path / "u.f64").stat().st_size == 8 * (g.nt + 1) * g.N


@pytest.mark.parametrize("eps", [0.0, 0.05])
@pytest.mark.parametrize("varying", [False, True])
def test_dense_path_matches_cg(monkeypatch, small_grid, small_mask, eps, varying):
    g, m = small_grid, small_mask
    rng = np.random.default_rng(11)
    src = rng.standard_normal((g.nt + 1,) + g.shape) * m.omega
    q = np.abs(rng.standard_normal(g.shape)) * m.omega
    qt = rng.standard_normal((g.nt + 1,) + g.shape) * m.omega if varying else None
    u0 = smooth_bump(g, 0.1, 0.5) * m.omega
    bar = rng.standard_normal((g.nt + 1,) + g.shape)
    dense = newmark(g, m, src, u0, 0 * u0, q=q, qt=qt, eps=eps)
    dense_adj = newmark_adjoint(g, m, bar, q=q, qt=qt, eps=eps)
    monkeypatch.setattr(forward, "DENSE_LIMIT", 0)
    sparse = newmark(g, m, src, u0, 0 * u0, q=q, qt=qt, eps=eps)
    sparse_adj = newmark_adjoint(g, m, bar, q=q, qt=qt, eps=eps)
    for x, y in zip(dense + dense_adj, sparse + sparse_adj):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-9 * np.abs(y).max())
