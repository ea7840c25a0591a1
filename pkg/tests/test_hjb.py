import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from rfqgate.hamiltonian import hamiltonian_curvature, hamiltonian_deriv, hamiltonian_value
from rfqgate.hjb import (
    FixedPointError,
    GridSpec,
    HJBError,
    ValueGrid,
    anderson_update,
    extract_controls,
    instant_pnl_A,
    score_kernel,
    solve_block,
    stability_number,
    stationary_solve,
    step_backward,
    terminal_value,
)
from rfqgate.model import ConfigError, default_params, gate

P = default_params()
ZERO4 = [0.0, 0.0, 0.0, 0.0]


def flat(grid, value=0.0):
    v = np.full((grid.n_q, grid.n_R), value)
    return ValueGrid(v, np.zeros(grid.n_R), grid.q, grid.R)


# ---------------------------------------------------------------------------
# grid


def test_grid_geometry():
    g = GridSpec(q_max=10.0, n_R=11, n_t=100)
    assert g.n_q == 21 and g.q[g.i0] == 0.0
    assert g.q_index(-10.0) == 0 and g.q_index(10.0) == 20
    assert g.R_index(0.52) == 5
    assert g.dt == pytest.approx(0.05 / 100)
    with pytest.raises(IndexError):
        g.q_index(11.0)


@pytest.mark.parametrize("kw", [dict(q_max=10.5), dict(n_R=2), dict(n_t=0), dict(q_max=-1.0)])
def test_grid_rejects_bad_shapes(kw):
    with pytest.raises(ConfigError):
        GridSpec(**kw)


def test_grid_rejects_off_lattice_sizes():
    with pytest.raises(ConfigError, match="q_step"):
        GridSpec(q_max=30.0, q_step=3.0).jumps(P)


def test_stability_check():
    assert stability_number(P, SMALL) < 0.5
    assert SMALL.check(P) == pytest.approx(stability_number(P, SMALL))
    with pytest.raises(ConfigError, match="n_t"):
        GridSpec(n_t=100).check(P)


# ---------------------------------------------------------------------------
# one explicit step


def test_no_flow_accrues_only_the_penalty():
    p = P.updated({"intensities.lambda_A": ZERO4, "intensities.lambda_B": ZERO4})
    rng = np.random.default_rng(0)
    v = rng.normal(size=(SMALL.n_q, SMALL.n_R))
    out = step_backward(ValueGrid(v, np.zeros(SMALL.n_R), SMALL.q, SMALL.R), p, SMALL)
    pen = SMALL.dt * 0.5 * p.risk.gamma * p.risk.sigma**2 * SMALL.q**2
    np.testing.assert_allclose(out.v, v - pen[:, None], rtol=0, atol=1e-12)


def test_flat_value_one_step_gain():
    p = P.updated({"risk.gamma": 0.0, "score.alpha": 0.0})
    out = step_backward(flat(SMALL), p, SMALL)
    G = gate(p.gate, SMALL.R)
    gain = np.zeros(SMALL.n_R)
    for k in range(p.K):
        gain += 2 * G * p.intensities.lambda_A[k] * hamiltonian_value(p, "A", k, 0.0)
        gain += 2 * p.intensities.lambda_B[k] * hamiltonian_value(p, "B", k, 0.0)
    interior = np.abs(SMALL.q) <= SMALL.q_max - max(p.ladder.sizes)
    np.testing.assert_allclose(out.v[interior], np.broadcast_to(SMALL.dt * gain, out.v[interior].shape), rtol=1e-9)
    assert np.all(out.v[~interior] < SMALL.dt * gain + 1e-15)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_step_preserves_evenness(seed):
    rng = np.random.default_rng(seed)
    half = rng.normal(scale=5.0, size=(SMALL.n_q // 2 + 1, SMALL.n_R))
    v = np.vstack([half, half[-2::-1]])
    out = step_backward(ValueGrid(v, np.zeros(SMALL.n_R), SMALL.q, SMALL.R), P, SMALL)
    assert np.max(np.abs(out.v - out.v[::-1])) <= 1e-12


def test_step_rejects_non_finite():
    vg = flat(SMALL)
    vg.v[3, 4] = np.nan
    with pytest.raises(HJBError):
        step_backward(vg, P, SMALL)


# ---------------------------------------------------------------------------
# block solve


def test_terminal_condition():
    phi = np.linspace(1.0, 3.0, SMALL.n_R)
    vT = terminal_value(phi, P, SMALL)
    disc = np.exp(-P.risk.rho * SMALL.T_block)
    np.testing.assert_allclose(vT, -0.5 * P.risk.eta * SMALL.q[:, None] ** 2 + disc * phi[None, :], rtol=0, atol=0)


def test_block_value_positive_and_dt_refined():
    p = P.updated({"risk.eta": 0.0})
    coarse, _ = solve_block(np.zeros(SMALL.n_R), p, SMALL)
    fine, _ = solve_block(np.zeros(SMALL.n_R), p, GridSpec(q_max=20.0, n_R=21, n_t=1200))
    assert np.all(coarse.at_zero > 0)
    np.testing.assert_allclose(coarse.at_zero, fine.at_zero, rtol=5e-4)


def test_flat_gate_decouples_score_rows():
    p = P.updated({"score.alpha": 0.0, "gate.beta": 0.0})
    vg, _ = solve_block(np.zeros(SMALL.n_R), p, SMALL)
    assert np.max(np.abs(vg.v - vg.v[:, :1])) < 1e-10


def test_solve_block_rejects_bad_phi():
    with pytest.raises(ValueError):
        solve_block(np.zeros(SMALL.n_R + 1), P, SMALL)


# ---------------------------------------------------------------------------
# controls


def test_quadratic_value_tilts_win_probabilities():
    p = P.updated({"score.alpha": 0.0})
    A = 1e-3
    v = np.broadcast_to(-0.5 * A * SMALL.q[:, None] ** 2, (SMALL.n_q, SMALL.n_R)).copy()
    c = extract_controls(ValueGrid(v, np.zeros(SMALL.n_R), SMALL.q, SMALL.R), p, SMALL)
    j = 5
    for k in range(p.K):
        z = p.ladder.sizes[k]
        kz = hamiltonian_curvature(p, "B", k, -0.5 * A * z * z)
        for q in (-4.0, -1.0, 2.0, 5.0):
            i = SMALL.q_index(q)
            diff = c.y[1, 0, k, i, j] - c.y[1, 1, k, i, j]
            assert np.sign(diff) == -np.sign(q)
            assert diff == pytest.approx(-2 * kz * z * q * A, rel=0.02)


def test_flat_value_gives_uniform_offsets():
    p = P.updated({"score.alpha": 0.0})
    c = extract_controls(flat(SMALL, 3.0), p, SMALL)
    interior = np.abs(SMALL.q) <= SMALL.q_max - max(p.ladder.sizes)
    for k in range(p.K):
        d = c.delta[1, :, k][:, interior]
        assert np.ptp(d) < 1e-12
        assert hamiltonian_deriv(p, "B", k, 0.0) == pytest.approx(c.y[1, 0, k, SMALL.i0, 0], rel=1e-12)


def test_boundary_trades_marked_absent():
    c = extract_controls(flat(SMALL), P, SMALL)
    k = P.K - 1
    z = int(P.ladder.sizes[k])
    assert np.all(np.isnan(c.delta[:, 0, k, -z:]))  # bid (buy) beyond +q_max
    assert np.all(np.isnan(c.delta[:, 1, k, :z]))  # ask (sell) beyond -q_max
    assert np.all(np.isfinite(c.delta[:, 0, k, :-z]))
    assert not c.feasible("bid", k)[-1] and c.feasible("ask", k)[-1]


def test_instant_pnl_formula(small_feedback):
    _, c, _ = small_feedback
    pnl = instant_pnl_A(c, P)
    G = gate(P.gate, c.R)
    i0 = SMALL.i0
    d, y = c.delta[0, 0, 3, i0], c.y[0, 0, 3, i0]
    np.testing.assert_allclose(pnl[i0], 2 * G * 50.0 * y * 10.0 * (d - 0.2), rtol=1e-12)
    assert instant_pnl_A(c, P, q=0.0, R=c.R[4]) == pnl[i0, 4]
    p = P.updated({"intensities.lambda_A": ZERO4})
    assert np.all(instant_pnl_A(c, p) == 0.0)


# ---------------------------------------------------------------------------
# Anderson mixing


def test_anderson_single_entry_is_plain_step():
    x, r = np.array([1.0, 2.0]), np.array([0.5, -0.25])
    np.testing.assert_array_equal(anderson_update([x], [r], m=5), x + r)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_anderson_coefficients_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    X = list(rng.normal(size=(n, 8)))
    Rm = list(rng.normal(size=(n, 8)))
    _, c = anderson_update(X, Rm, m=n, return_coeffs=True)
    assert abs(c.sum() - 1.0) < 1e-12


def test_anderson_singular_falls_back(caplog):
    r = np.ones(3)
    with caplog.at_level(logging.WARNING):
        out, c = anderson_update([np.zeros(3), np.ones(3)], [r, r], m=2, ridge=0.0, return_coeffs=True)
    np.testing.assert_array_equal(c, [0.0, 1.0])
    np.testing.assert_array_equal(out, 2 * r)
    assert "singular" in caplog.text


def test_anderson_beats_plain_on_linear_map():
    rng = np.random.default_rng(1)
    n = 30
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    M = Q @ np.diag(np.linspace(-0.9, 0.9, n)) @ Q.T
    x_star = rng.normal(size=n)
    b = x_star - M @ x_star

    def iterate(m):
        x = np.zeros(n)
        xs, rs = [], []
        for it in range(1, 2000):
            r = M @ x + b - x
            if np.max(np.abs(r)) < 1e-10:
                return it, x
            if m == 0:
                x = x + r
            else:
                xs.append(x)
                rs.append(r)
                x = anderson_update(xs[-m:], rs[-m:], m)
        raise AssertionError("no convergence")

    n_plain, x_plain = iterate(0)
    n_and, x_and = iterate(5)
    assert n_and < n_plain
    np.testing.assert_allclose(x_plain, x_star, atol=1e-9)
    np.testing.assert_allclose(x_and, x_star, atol=1e-9)


@pytest.mark.parametrize("args", [([], [], 3), ([np.ones(2)], [np.ones(2)], 0)])
def test_anderson_rejects_bad_input(args):
    with pytest.raises(ValueError):
        anderson_update(*args)


# ---------------------------------------------------------------------------
# stationary fixed point


def test_heavy_discount_converges_at_once():
    p = P.updated({"risk.rho": 1e4})
    # undamped: the block value no longer depends on phi, so one update lands on it
    vg, _, rep = stationary_solve(p, SMALL, zeta=1.0)
    assert rep.converged and rep.iterations <= 2
    assert stationary_solve(p, SMALL)[2].iterations <= 4
    single, _ = solve_block(np.zeros(SMALL.n_R), p, SMALL)
    np.testing.assert_allclose(vg.phi, single.at_zero, atol=1e-6)


def test_stationary_report_and_symmetry(small_feedback):
    vg, c, rep = small_feedback
    assert rep.converged and rep.residuals[-1] < rep.tol
    assert np.all(np.isfinite(rep.residuals))
    assert np.max(np.abs(vg.v - vg.v[::-1])) <= 1e-8
    np.testing.assert_allclose(vg.phi, vg.at_zero, atol=rep.tol / (1 - np.exp(-P.risk.rho * SMALL.T_block)))
    assert np.all(vg.v <= vg.at_zero[None, :] + 1e-9)
    fin = np.isfinite(c.delta[:, 0])
    np.testing.assert_array_equal(c.delta[:, 0][fin], c.delta[:, 1, :, ::-1][fin])
    ok = np.isfinite(c.y)
    assert np.all((c.y[ok] > 0) & (c.y[ok] < 1))


def test_anderson_and_plain_agree_on_small_grid():
    p = P.updated({"risk.rho": 5.0})
    tol = 1e-6
    plain = stationary_solve(p, SMALL, tol=tol, anderson_m=0, precondition=False)
    fast = stationary_solve(p, SMALL, tol=tol)
    assert plain[2].converged and fast[2].converged
    assert fast[2].iterations <= plain[2].iterations
    assert np.max(np.abs(plain[0].phi - fast[0].phi)) < 10 * tol


def test_max_iter_exhaustion():
    p = P.updated({"risk.rho": 5.0})
    vg, _, rep = stationary_solve(p, SMALL, max_iter=2, anderson_m=0, precondition=False)
    assert not rep.converged and rep.iterations == 2 and len(rep.residuals) == 2
    with pytest.raises(FixedPointError) as err:
        stationary_solve(p, SMALL, max_iter=2, strict=True)
    assert err.value.report.iterations == 2


@pytest.mark.parametrize("kw", [dict(tol=0.0), dict(zeta=0.0), dict(zeta=1.5), dict(anderson_m=-1)])
def test_stationary_rejects_bad_options(kw):
    with pytest.raises(ValueError):
        stationary_solve(P, SMALL, **kw)


def test_score_kernel_is_stochastic(small_feedback):
    vg, _, _ = small_feedback
    K = score_kernel(vg.v, P, SMALL)
    assert np.all(K >= -1e-12)
    np.testing.assert_allclose(K.sum(axis=1), 1.0, atol=1e-10)
    p0 = P.updated({"score.alpha": 0.0})
    np.testing.assert_allclose(score_kernel(vg.v, p0, SMALL), np.eye(SMALL.n_R), atol=1e-12)


# ---------------------------------------------------------------------------
# qualitative signatures on the CI grid


def test_gate_value_nondecreasing(ci_feedback):
    vg, _, _ = ci_feedback
    assert np.all(np.diff(vg.phi) >= 0)


def test_campaign_and_harvest_offsets(ci_feedback, ci_free, params):
    _, c1, _ = ci_feedback
    _, c0, _ = ci_free
    i0 = len(c1.q) // 2
    R = c1.R
    d1, d0 = c1.offset("A", "bid", 3)[i0], c0.offset("A", "bid", 3)[i0]
    r0 = params.gate.r0
    assert R[np.argmin(d1)] < r0
    near = np.abs(R - r0) <= 0.05 + 1e-9
    assert np.all(d1[near] < d0[near])
    high = R >= 0.8
    at_r0 = d1[np.argmin(np.abs(R - r0))]
    assert np.all(d1[high] > at_r0) and np.all(d1[high] < d0[high])


def test_tier_b_matches_gated_offset_at_low_score(ci_feedback):
    _, c, _ = ci_feedback
    j = int(np.argmin(np.abs(c.R - 0.3)))
    inner = np.abs(c.q) <= 25
    for side in ("bid", "ask"):
        b = c.offset("B", side, 3)[inner, j]
        a = c.offset("A", side, 3)[inner, j]
        assert np.max(np.abs(a - b)) < 0.01
