"""End-to-end acceptance checks, one test per criterion (criterion 3 and 10 in parts).

Each check prints a PASS/FAIL line; the lines are repeated in the terminal
summary under "acceptance criteria".
"""

import dataclasses
import time

import numpy as np
import pytest
from conftest import ACCEPT, solve_cached

from rfqgate.adiabatic import (
    bifurcation_scan,
    ergodic_curvature,
    fit_closure,
    hjb_curvature,
    score_drift_from_hjb,
    tier_a_winrate,
)
from rfqgate.hamiltonian import hamiltonian_deriv, solve_hamiltonian
from rfqgate.hjb import GridSpec, instant_pnl_A, stationary_solve
from rfqgate.model import default_params, win_prob
from rfqgate.simulator import SimConfig, simulate, turnover_report, validate_against_ode

P = default_params()
R0 = P.gate.r0
pytestmark = pytest.mark.slow

BETAS = [5.0, 10.0, 20.0, 40.0, 80.0, 160.0]


def offset_q0(controls, tier="A", k=0):
    i0 = len(controls.q) // 2
    return controls.offset(tier, "bid", k)[i0]


def test_c1_envelope_identity(verdict):
    x = np.linspace(-50.0, 50.0, 21)
    start = time.perf_counter()
    worst = 0.0
    for tier in ("A", "B"):
        for k in range(P.K):
            sol = solve_hamiltonian(P, tier, k, x)
            p = win_prob(P.curve(tier), k, sol.maximizer)
            worst = max(worst, float(np.max(np.abs(hamiltonian_deriv(P, tier, k, x) - p))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 1.0
    assert verdict("1 envelope identity", ok, f"max |H' - p| = {worst:.2e}, {elapsed:.3f} s")


def test_c2_brute_force_maximizers(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(P.K))
        x = float(rng.uniform(-50.0, 50.0))
        z, theta = P.sizes[k], P.risk.theta[k]
        d_hat = float(solve_hamiltonian(P, "A", k, x).maximizer)
        # the maximizer lies above the break-even offset theta - x / z and within a
        # few 1/kappa of it or of the curve midpoint; coarse scan over that span,
        # then a 1e-4 bp grid around the coarse winner
        anchors = (theta - x / z, P.win_A.delta_bar[k])
        coarse = np.arange(min(anchors) - 5.0, max(anchors) + 20.0, 0.01)
        obj = win_prob(P.curve("A"), k, coarse) * (z * (coarse - theta) + x)
        c = coarse[int(np.argmax(obj))]
        fine = np.arange(c - 0.02, c + 0.02, 1e-4)
        obj = win_prob(P.curve("A"), k, fine) * (z * (fine - theta) + x)
        worst = max(worst, abs(float(fine[int(np.argmax(obj))]) - d_hat))
    elapsed = time.perf_counter() - start
    ok = worst < 2e-4 and elapsed < 10.0
    assert verdict("2 brute-force maximizers", ok, f"max gap {worst:.1e} bp over 100 cases, {elapsed:.2f} s")


def test_c3a_top_of_book_spread(acc_free, verdict):
    _, controls, _ = acc_free
    spread = 2.0 * float(offset_q0(controls, "A", 0)[0])
    ok = 0.7 <= spread <= 1.3
    assert verdict("3a top-of-book spread", ok, f"2 delta_1 = {spread:.3f} bp")


@pytest.mark.xfail(strict=True, reason="the default primitives trade about 3x the quoted daily volume; see notes")
def test_c3b_daily_turnover(acc_free, params_free, verdict):
    _, controls, _ = acc_free
    # alpha = 0: the score stays at its starting value, use the single fixed point
    (fp,) = score_drift_from_hjb(controls, params_free).fixed_points
    res = simulate(SimConfig(controls, 5.0, seed=3, R0=fp.R, record_dt=1.0), params_free, 64)
    rep = turnover_report(res)
    ok = abs(rep["total"] / 2000.0 - 1.0) <= 0.15
    assert verdict("3b daily turnover", ok, f"{rep['total']:.0f} M/day (target 2000 +- 15%)")


def test_c4_campaign_dip_ci(params, params_free, verdict):
    grid = GridSpec.ci()
    start = time.perf_counter()
    _, c1, rep1 = solve_cached("ci", params, grid)
    _, c0, rep0 = solve_cached("ci0", params_free, grid)
    elapsed = time.perf_counter() - start
    d1, d0, R = offset_q0(c1, "A", 0), offset_q0(c0, "A", 0), c1.R
    inner = np.arange(1, len(R) - 1)
    local_min = inner[(d1[inner] <= d1[inner - 1]) & (d1[inner] <= d1[inner + 1])]
    below = R[local_min][R[local_min] < R0]
    win = (R >= R0 - 0.1 - 1e-9) & (R <= R0 + 1e-9)
    gap = float(np.max(d1[win] - d0[win]))
    ok = len(below) > 0 and gap < 0 and rep1.converged and rep0.converged and elapsed < 180
    assert verdict("4 campaign dip (CI grid)", ok,
                   f"local min at R = {below.tolist()}, max(delta_fb - delta_free) on window {gap:.3f} bp, "
                   f"{elapsed:.0f} s for both solves (0 if cached)")


def test_c4_full_grid_timing(params, verdict):
    start = time.perf_counter()
    _, controls, rep = stationary_solve(params, GridSpec())
    elapsed = time.perf_counter() - start
    d = offset_q0(controls, "A", 0)
    argmin = float(controls.R[int(np.argmin(d))])
    ok = rep.converged and rep.iterations <= 200 and elapsed < 1800 and argmin < R0
    assert verdict("4 full-grid solve", ok,
                   f"{rep.iterations} iterations, {elapsed:.0f} s, offset argmin R = {argmin:.2f}")


def test_c5_bistability(acc_feedback, acc_free, params, params_free, verdict):
    f1 = score_drift_from_hjb(acc_feedback[1], params)
    f0 = score_drift_from_hjb(acc_free[1], params_free)
    pattern = f1.stability_pattern()
    ok = pattern == ["stable", "unstable", "stable"] and len(f0.fixed_points) == 1
    locs = ", ".join(f"{p.R:.3f}" for p in f1.fixed_points)
    assert verdict("5 bistability", ok, f"alpha=0.01: {pattern} at {locs}; alpha=0: {len(f0.fixed_points)} point")


def test_c6_fold_annihilation(acc_feedback, acc_free, params, verdict):
    c1, c0 = acc_feedback[1], acc_free[1]
    start = time.perf_counter()
    cp = fit_closure(c0.R, tier_a_winrate(c0, params), c1.R, tier_a_winrate(c1, params), params)
    diagram = bifurcation_scan(params, BETAS, "closure", closure=cp)
    elapsed = time.perf_counter() - start
    bracket = diagram.critical_bracket()
    counts = diagram.counts
    ok = bracket is not None and elapsed < 60
    if ok:
        lo, hi = bracket
        ok = counts[BETAS.index(lo)] == 1 and counts[BETAS.index(hi)] == 3
    assert verdict("6 fold annihilation", ok, f"counts {counts}, bracket {bracket}, {elapsed:.2f} s")


def test_c7_riccati_scaling(acc_feedback, params, verdict):
    vg = acc_feedback[0]
    R = [0.2, 0.6, 0.9]
    fitted = hjb_curvature(vg.v, vg.q, vg.R, R)
    predicted = ergodic_curvature(params, R).A_inf
    rel = np.abs(fitted / predicted - 1.0)
    ok = bool(np.all(rel < 0.25))
    assert verdict("7 Riccati scaling", ok, f"relative gaps {np.round(rel, 4).tolist()} at R = {R}")


def test_c8_mc_vs_ode(acc_feedback, params, verdict):
    controls = acc_feedback[1]
    field_ = score_drift_from_hjb(controls, params)
    unstable = field_.unstable_points()[0]
    starts = [0.40, 0.70]
    assert starts[0] < unstable < starts[1]
    start = time.perf_counter()
    out = validate_against_ode(params, controls, starts, 5.0, 256, seed=0)
    elapsed = time.perf_counter() - start
    z = [o.max_z for o in out]
    bare = validate_against_ode(params, controls, starts, 5.0, 256, seed=0, field_=field_, noise=False)
    ok = max(z) <= 3.0 and elapsed < 300 and all(len(o.times) == 10 for o in out)
    assert verdict("8 MC vs ODE", ok,
                   f"max z {np.round(z, 2).tolist()} (bare q=0 ODE: {np.round([b.max_z for b in bare], 1).tolist()}), "
                   f"{elapsed:.0f} s")


def test_c9_pnl_loop(acc_feedback, params, verdict):
    controls = acc_feedback[1]
    R = controls.R
    pi = instant_pnl_A(controls, params, q=0.0)
    field_ = score_drift_from_hjb(controls, params)
    drift = np.interp(R, field_.R, field_.drift)
    inner = np.arange(1, len(R) - 1)
    mins = inner[(pi[inner] < pi[inner - 1]) & (pi[inner] <= pi[inner + 1])]
    dips = R[mins][(R[mins] > R0 - 0.1) & (R[mins] < R0)]
    peak = float(R[int(np.argmax(pi))])
    lo, mid, hi = (p.R for p in field_.fixed_points)
    campaign = (drift > 0) & (R > mid) & (R < R0)
    harvest = (drift < 0) & (R > hi)
    quadrants = campaign.any() and harvest.any() and pi[campaign].max() < pi[harvest].min()
    ok = len(dips) > 0 and peak > R0 and quadrants
    assert verdict("9 PnL loop", ok,
                   f"dip at R = {dips.tolist()}, peak at R = {peak:.2f}, campaign Pi <= {pi[campaign].max():.1f} "
                   f"< harvest Pi >= {pi[harvest].min():.1f}")


def test_c10_dt_halving(acc_feedback, params, verdict):
    vg = acc_feedback[0]
    fine, _, rep = stationary_solve(params, dataclasses.replace(ACCEPT, n_t=2 * ACCEPT.n_t), phi0=vg.phi)
    change = float(np.max(np.abs(fine.at_zero - vg.at_zero)) / np.max(np.abs(vg.at_zero)))
    ok = rep.converged and change < 1e-3
    assert verdict("10a dt halving", ok, f"relative sup change of v(0,0,.) = {change:.2e}")


def test_c10_score_refinement(acc_feedback, params, verdict):
    vg, controls, _ = acc_feedback
    grid = dataclasses.replace(ACCEPT, n_R=2 * ACCEPT.n_R - 1)
    _, fine, rep = stationary_solve(params, grid, phi0=np.interp(grid.R, vg.R, vg.phi))
    a = [p.R for p in score_drift_from_hjb(controls, params).fixed_points]
    b = [p.R for p in score_drift_from_hjb(fine, params).fixed_points]
    shift = float(np.max(np.abs(np.subtract(a, b)))) if len(a) == len(b) else np.inf
    ok = rep.converged and shift < 0.005
    assert verdict("10b n_R doubling", ok, f"fixed points {np.round(a, 4).tolist()} -> {np.round(b, 4).tolist()}")


def test_c10_anderson_vs_plain(verdict):
    # Plain damped iteration contracts at exp(-rho T) per step, so it is run at
    # the heavier discount where it finishes in a few hundred steps.
    p = P.updated({"risk.rho": 5.0})
    grid = GridSpec(q_max=20.0, n_R=51, n_t=600)
    tol = 1e-6
    plain = stationary_solve(p, grid, tol=tol, anderson_m=0, precondition=False, max_iter=400)
    accel = stationary_solve(p, grid, tol=tol, anderson_m=5, precondition=False)
    diff = float(np.max(np.abs(plain[0].phi - accel[0].phi)))
    n_plain, n_accel = plain[2].iterations, accel[2].iterations
    ok = plain[2].converged and accel[2].converged and diff < 10 * tol and n_accel <= n_plain
    assert verdict("10c Anderson vs plain", ok,
                   f"|dPhi| = {diff:.1e}, iterations {n_accel} (Anderson) vs {n_plain} (plain), rho = 5")
