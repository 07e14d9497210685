"""Acceptance gate at reference scale (1D, N=256, nt=512, T=1).

Each test records one PASS/FAIL line; the lines are printed together in the
terminal summary.  Criteria that the implementation does not reach fail
here rather than being loosened.
"""
import json

import numpy as np
import pytest

from fracwave.dnmap import ExteriorInput, measure
from fracwave.forward import (NonlinearitySpec, SolverConfig, nemytskii_modulus, solve_linear,
                              solve_nonlinear, solve_viscous)
from fracwave.harness import Scenario, main
from fracwave.inverse import (InitialDataOperator, RungeObjective, SourceOperator, TikhonovObjective,
                              constant_target, linearization_probe)
from fracwave.lattice import (hs_tilde_norm, l2_norm, smooth_bump, spacetime_l2, sup_norm_in_time,
                              time_weights)

import conftest

pytestmark = pytest.mark.acceptance


def record(number, passed, detail):
    conftest.ACCEPTANCE[number] = (bool(passed), detail)
    assert passed, f"criterion {number}: {detail}"


@pytest.fixture(scope="module")
def ref():
    sc = Scenario.load("reference")
    g = sc.grid()
    return sc, g, sc.mask(g)


def cli(tmp_path, *argv):
    code = main([str(a) for a in argv] + ["--out", str(tmp_path), "--threads", "4"])
    if code != 0:
        return code, None
    sc = Scenario.load(argv[argv.index("--scenario") + 1])
    over = {}
    if "--noise" in argv:
        over["experiment.noise"] = float(argv[argv.index("--noise") + 1])
    if over:
        sc = sc.with_overrides(**over)
    path = tmp_path / sc.hash[:16] / argv[0] / "summary.json"
    return code, json.loads(path.read_text())


def test_c01_single_mode_spectral_exactness(ref):
    sc, g, m = ref
    k = 2 * np.pi / g.box_length
    mode = np.cos(k * g.coords[0])
    dts = (4e-3, 2e-3, 1e-3)
    errs = []
    for dt in dts:
        gg = g.with_time(dt=dt, nt=int(round(1.0 / dt)))
        tr = solve_linear(gg, None, None, None, mode, 0 * mode, energy=False)
        exact = np.cos(k ** g.s * gg.times)[:, None] * mode
        errs.append(float(np.max(np.abs(tr.u - exact)) / np.max(np.abs(exact))))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    ok = errs[-1] <= 1e-3 and abs(slope - 2) <= 0.1
    record(1, ok, f"rel err at dt=1e-3 {errs[-1]:.2e} (<=1e-3), dt slope {slope:.3f} (2+-0.1)")


def test_c02_energy_identities(ref):
    sc, g, m = ref
    gg = g.with_time(dt=1e-3, nt=1000)
    rng = np.random.default_rng(2)
    drifts = []
    for trial in range(3):
        c0, c1 = rng.uniform(-0.5, 0.5, 2)
        q = m.project(rng.uniform(0, 3) * smooth_bump(gg, rng.uniform(-0.5, 0.5), 0.7))
        u0 = m.project(smooth_bump(gg, c0, rng.uniform(0.3, 0.8)))
        u1 = m.project(rng.uniform(-1, 1) * smooth_bump(gg, c1, 0.5))
        tr = solve_linear(gg, m, q, None, u0, u1)
        tot = tr.energy_log["kinetic"] + tr.energy_log["elastic"] + tr.energy_log["potential"]
        drifts.append(float(np.max(np.abs(np.diff(tot))) / tot[0]))
    residuals = {}
    for r in (0.5, 1.0):
        spec = NonlinearitySpec.power(sc.coefficient(gg, m), r)
        tr = solve_nonlinear(gg, m, spec, None, sc.field("u0", gg, m), np.zeros(gg.shape), sc.solver())
        residuals[r] = tr.energy_residual()
    ok = max(drifts) <= 1e-8 and max(residuals.values()) <= 1e-4
    record(2, ok, f"linear drift/step {max(drifts):.1e} (<=1e-8), nonlinear residuals "
                  f"{', '.join(f'r={r}: {v:.1e}' for r, v in residuals.items())} (<=1e-4)")


def test_c03_continuity_estimate(ref):
    sc, g, m = ref
    q = m.project(smooth_bump(g, 0.1, 0.7))
    u0 = m.project(smooth_bump(g, 0.0, 0.6))
    F = m.project(smooth_bump(g, -0.3, 0.4)) * np.sin(np.pi * g.times)[:, None]
    eta0, eta1 = m.project(smooth_bump(g, 0.3, 0.4)), m.project(smooth_bump(g, -0.2, 0.3))
    base = solve_linear(g, m, q, F, u0, np.zeros(g.shape), energy=False)
    ratios = []
    for delta in (1e-1, 1e-2, 1e-3, 1e-4):
        pert = solve_linear(g, m, q, F, u0 + delta * eta0, delta * eta1, energy=False)
        diff = max(sup_norm_in_time(g, pert.u - base.u, "hs"), sup_norm_in_time(g, pert.ut - base.ut))
        ratios.append(diff / (delta * (hs_tilde_norm(g, eta0) + l2_norm(g, eta1))))
    var = max(ratios) / min(ratios)
    record(3, var <= 2.0, f"ratio variation {var:.6f} over delta 1e-1..1e-4 (<=2)")


def test_c04_picard_contraction(ref):
    sc, g, m = ref
    spec = sc.spec(g, m)
    u0 = sc.field("u0", g, m)
    default = solve_nonlinear(g, m, spec, None, u0, np.zeros(g.shape), sc.solver(), energy=False)
    big = solve_nonlinear(g, m, spec, None, u0, np.zeros(g.shape),
                          SolverConfig(slab_steps=g.nt, picard_max_iters=8), energy=False)
    logs = default.picard_log + big.picard_log
    ratios = [p["ratio"] for p in logs if p["converged"]]
    bisected = [p["ratio"] for p in big.picard_log if p["converged"]]
    split = any(not p["converged"] for p in big.picard_log)
    ok = max(ratios) < 1 and float(np.median(bisected)) <= 0.5
    record(4, ok, f"max converged ratio {max(ratios):.3g} (<1), median after bisection "
                  f"{np.median(bisected):.3g} (<=0.5), whole-horizon slab bisected: {split}")


def test_c05_remainder_scaling(ref):
    sc, g, m = ref
    slopes = {}
    for r in (0.25, 0.5, 1.0):
        spec = NonlinearitySpec.power(sc.coefficient(g, m), r)
        pr = linearization_probe(g, m, spec, sc.input(g, m), [0.2, 0.1, 0.05, 0.025], sc.solver(), 4)
        slopes[r] = pr.fitted_slope
    ok = all(abs(s - (r + 1)) <= 0.1 for r, s in slopes.items())
    record(5, ok, "slopes " + ", ".join(f"r={r}: {s:.4f}" for r, s in slopes.items()) + " (r+1 +-0.1)")


def test_c06_runge_control(tmp_path):
    code, summary = cli(tmp_path, "runge", "--scenario", "reference")
    errs = summary["errors"]
    mono = all(b < a for a, b in zip(errs, errs[1:]))
    ok = summary["best_error"] <= 0.05 and mono
    record(6, ok, f"best error {summary['best_error']:.4f} (<=0.05), strictly decreasing: {mono}, "
                  f"sweep {[round(e, 4) for e in errs]}")


def _fd(fun, x, rng, n_dirs=5, h=1e-2):
    # objectives are quadratic, so the central difference is exact up to rounding
    _, grad = fun(x)
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        fd = (fun(x + h * d)[0] - fun(x - h * d)[0]) / (2 * h)
        worst = max(worst, abs(fd - grad @ d) / max(abs(fd), 1e-300))
    return worst


def test_c07_adjoint_gradients(ref):
    sc, g, m = ref
    rng = np.random.default_rng(7)
    runge = RungeObjective(g, m, constant_target(g, m), 1e-6)
    e_runge = _fd(runge.value_and_grad, 0.1 * rng.standard_normal(runge.size), rng)
    weight = np.ones((g.nt + 1,) + g.shape) * m.omega * np.sin(np.pi * g.times)[:, None]
    sop = SourceOperator(g, m, [weight])
    tik = TikhonovObjective(sop, sop.forward(rng.standard_normal(sop.size)), 1e-6, g.cell_volume)
    e_source = _fd(tik.value_and_grad, rng.standard_normal(sop.size), rng)
    iop = InitialDataOperator(g, m)
    tik = TikhonovObjective(iop, iop.forward(rng.standard_normal(iop.size)), 1e-6, g.cell_volume)
    e_init = _fd(tik.value_and_grad, rng.standard_normal(iop.size), rng)
    worst = max(e_runge, e_source, e_init)
    record(7, worst <= 1e-5, f"runge {e_runge:.1e}, source {e_source:.1e}, initial data {e_init:.1e} (<=1e-5)")


def test_c08_viscous_regularization(ref):
    sc, g, m = ref
    zero = np.zeros(g.shape)
    F = m.project(smooth_bump(g, -0.3, 0.4)) * np.sin(np.pi * g.times)[:, None] ** 2
    G = m.project(smooth_bump(g, 0.4, 0.5)) * np.sin(2 * np.pi * g.times)[:, None]
    base = solve_viscous(g, m, None, F, zero, zero, 0.0, energy=False).u
    wt = time_weights(g) * g.cell_volume

    def pair(a, b):
        return float(np.dot(wt, (a * b).reshape(len(a), -1).sum(axis=1)))

    gaps, mism, scales = [], [], []
    for eps in (1e-1, 1e-2, 1e-3):
        v = solve_viscous(g, m, None, F, zero, zero, eps, energy=False)
        w = solve_viscous(g, m, None, G, zero, zero, eps, reverse_time=True, energy=False)
        gaps.append(sup_norm_in_time(g, v.u - base))
        lhs, rhs = pair(v.utt, w.u), pair(w.utt, v.u)
        mism.append(abs(lhs - rhs))
        scales.append(max(abs(lhs), abs(rhs)))
    gap_ok = gaps[0] > gaps[1] > gaps[2]
    # the scheme satisfies the discrete identity exactly; a decrease can only show above rounding
    floor = 1e-12 * max(scales)
    mis_ok = all(b < a or b <= floor for a, b in zip(mism, mism[1:]))
    record(8, gap_ok and mis_ok, f"sup-t gaps {[f'{x:.2e}' for x in gaps]} decreasing: {gap_ok}; "
                                 f"IBP mismatch {[f'{x:.1e}' for x in mism]} (rounding floor {floor:.1e})")


def test_c09_nonlinearity_recovery(tmp_path):
    code, clean = cli(tmp_path, "recover-nonlinearity", "--scenario", "reference")
    assert code == 0
    ok_clean = abs(clean["r_estimate"] - 1) <= 0.05 and clean["f_at_one_error"] <= 0.10
    code, noisy = cli(tmp_path, "recover-nonlinearity", "--scenario", "reference", "--noise", "0.01")
    if noisy is None:
        noisy_txt, ok_noisy = f"pipeline exit {code}", False
    else:
        ok_noisy = abs(noisy["r_estimate"] - 1) <= 0.05 and noisy["f_at_one_error"] <= 0.25
        noisy_txt = f"r {noisy['r_estimate']:.4f}, q error {noisy['f_at_one_error']:.3f}"
    record(9, ok_clean and ok_noisy,
           f"noiseless: r {clean['r_estimate']:.4f} (1+-0.05), q error {clean['f_at_one_error']:.4f} (<=0.10); "
           f"1% noise: {noisy_txt} (<=0.25)")


def test_c10_initial_data_recovery(tmp_path):
    code, summary = cli(tmp_path, "recover-initial", "--scenario", "reference_linear")
    assert code == 0
    sc = Scenario.load("reference_linear")
    g = sc.grid()
    m = sc.mask(g)
    zero = np.zeros(g.shape)
    spec = NonlinearitySpec.zero()
    u0 = sc.field("u0", g, m)
    a = measure(g, m, spec, u0, zero, ExteriorInput.zero(g))
    b = measure(g, m, spec, m.project(smooth_bump(g, 0.2, 0.6, 0.5)), m.project(0.3 * smooth_bump(g, 0, 0.5)),
                ExteriorInput.zero(g))
    gap = spacetime_l2(g, a.trace - b.trace) / spacetime_l2(g, a.trace)
    ok = summary["u0_error"] <= 0.10 and summary["u1_error"] <= 0.10 and gap >= 1e-6
    record(10, ok, f"u0 error {summary['u0_error']:.4f}, u1 error {summary['u1_error']:.4f} (<=0.10, u1 relative "
                   f"to ||u0|| since u1 = 0); passive gap {gap:.2e} (>=1e-6)")


def test_c11_simultaneous_recovery(tmp_path):
    code, summary = cli(tmp_path, "recover-potential", "--scenario", "reference_potential")
    assert code == 0
    errs = {k: summary[k] for k in ("a_error", "u0_error", "u1_error")}
    record(11, max(errs.values()) <= 0.10, ", ".join(f"{k} {v:.4f}" for k, v in errs.items()) + " (<=0.10)")


def test_c12_nemytskii_continuity(ref):
    sc, g, m = ref
    spec = sc.spec(g, m)
    u = solve_nonlinear(g, m, spec, None, sc.field("u0", g, m), np.zeros(g.shape), sc.solver(), energy=False).u
    rows = nemytskii_modulus(g, m, spec, u, [10.0 ** -k for k in range(1, 9)])
    vals = [r["max"] for r in rows]
    ok = all(b < a for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-6
    record(12, ok, f"modulus at delta=1e-8 {vals[-1]:.2e} (<1e-6), strictly decreasing: "
                   f"{all(b < a for a, b in zip(vals, vals[1:]))}")
