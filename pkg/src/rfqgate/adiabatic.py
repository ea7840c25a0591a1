"""Slow-score analysis: ergodic inventory curvature, score drift, closure and folds.

On the fast scale the value is close to quadratic in inventory with curvature
A(R) ~ sqrt(gamma sigma^2 / (2 xi(R))), xi being the curvature-weighted flow.
On the slow scale the score obeys R' = alpha lambda_RFQ(R) (ybar(R) - R), whose
fixed points are the roots of the per-trade drift ybar(R) - R.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .hamiltonian import solve_hamiltonian
from .hjb import ControlField, FixedPointError, GridSpec, HJBError, stationary_solve
from .model import ModelParams, gate, gate_deriv

log = logging.getLogger(__name__)

SCAN_POINTS = 2001
ROOT_TOL = 1e-7


class ClosureFitError(ValueError):
    """The closure regression is rank deficient or yields inadmissible coefficients."""


# ---------------------------------------------------------------------------
# Ergodic curvature


@dataclass(frozen=True)
class CurvatureProfile:
    R: np.ndarray
    A_inf: np.ndarray  # bp/M
    xi: np.ndarray  # M^2 / (bp*M) / day, per side
    k: np.ndarray  # (tier, size, R): H'' at the evaluation point, 1/(bp*M)


def _as_R(R) -> np.ndarray:
    return np.clip(np.atleast_1d(np.asarray(R, dtype=float)), 0.0, 1.0)


def frozen_curvatures(params: ModelParams) -> np.ndarray:
    """k_z^i = H''_z(0) per (tier, size)."""
    return np.array([[solve_hamiltonian(params, tier, k, 0.0).second_deriv for k in range(params.K)]
                     for tier in ("A", "B")])


def flow_stiffness(params: ModelParams, k_curv: np.ndarray | None = None) -> tuple[float, float]:
    """(xi_A, xi_B) = sum_z Lambda_z^i k_z^i z^2 per side, gate factor excluded."""
    k_curv = frozen_curvatures(params) if k_curv is None else k_curv
    z2 = params.sizes**2
    lam = np.array([params.intensities.lambda_A, params.intensities.lambda_B])
    xi = np.sum(lam * k_curv * z2[None, :], axis=1)
    return float(xi[0]), float(xi[1])


def ergodic_curvature(params: ModelParams, R, mode: str = "frozen",
                      controls: ControlField | None = None) -> CurvatureProfile:
    """A_inf(R) = sqrt(gamma sigma^2 / (2 xi(R))) with xi = sum_{z,i} lambda_z^i k_z^i z^2.

    Intensities are per side.  Each side contributes k (A z q)^2 / 2 to the q^2
    balance, so the pair contributes lambda k z^2 A^2 q^2 and the side count
    does not enter xi.

    ``mode="frozen"`` evaluates every k at x = 0; ``mode="self-consistent"``
    uses the q = 0 continuation gaps of ``controls``.
    """
    R = _as_R(R)
    K = params.K
    if mode == "frozen":
        k = np.repeat(frozen_curvatures(params)[:, :, None], len(R), axis=2)
    elif mode == "self-consistent":
        if controls is None:
            raise ValueError("self-consistent mode needs a control field")
        i0 = len(controls.q) // 2
        k = np.empty((2, K, len(R)))
        for t, tier in enumerate(("A", "B")):
            for j in range(K):
                x0 = np.interp(R, controls.R, controls.x[t, 0, j, i0])
                k[t, j] = solve_hamiltonian(params, tier, j, x0).second_deriv
    else:
        raise ValueError(f"unknown curvature mode {mode!r}")
    G = gate(params.gate, R)
    lamA = np.asarray(params.intensities.lambda_A)[:, None] * G[None, :]
    lamB = np.repeat(np.asarray(params.intensities.lambda_B)[:, None], len(R), axis=1)
    z2 = params.sizes[:, None] ** 2
    xi = np.sum(lamA * k[0] * z2, axis=0) + np.sum(lamB * k[1] * z2, axis=0)
    if np.any(xi <= 0):
        raise ValueError("curvature undefined without flow (xi = 0)")
    A = np.sqrt(params.risk.gamma * params.risk.sigma**2 / (2.0 * xi))
    return CurvatureProfile(R, A, xi, k)


def inventory_std_estimate(params: ModelParams, R, mode: str = "frozen",
                           controls: ControlField | None = None):
    """Quasi-stationary inventory std at fixed R under the linearised quotes.

    Win probabilities tilt by -/+ k z q A per side, giving a mean-reverting
    drift -2 xi A q and a jump variance rate 2 sum lambda z^2 y0, hence
    Var q = sum lambda z^2 y0 / (2 xi A).
    """
    prof = ergodic_curvature(params, R, mode, controls)
    R = prof.R
    G = gate(params.gate, R)
    y0 = np.array([[solve_hamiltonian(params, tier, k, 0.0).deriv for k in range(params.K)]
                   for tier in ("A", "B")])
    z2 = params.sizes**2
    D = (np.asarray(params.intensities.lambda_A) * y0[0] * z2).sum() * G + (
        np.asarray(params.intensities.lambda_B) * y0[1] * z2).sum()
    return np.sqrt(D / (2.0 * prof.xi * prof.A_inf))


def hjb_curvature(v: np.ndarray, q: np.ndarray, R_grid: np.ndarray, R, q_fit: float = 5.0) -> np.ndarray:
    """Curvature A from a least-squares fit v(0, q, R) ~ c - A q^2 / 2 over |q| <= q_fit."""
    R = _as_R(R)
    sel = np.abs(q) <= q_fit + 1e-12
    X = np.column_stack([np.ones(sel.sum()), -0.5 * q[sel] ** 2])
    out = np.empty(len(R))
    for i, r in enumerate(R):
        col = np.array([np.interp(r, R_grid, row) for row in v[sel]])
        out[i] = np.linalg.lstsq(X, col, rcond=None)[0][1]
    return out


# ---------------------------------------------------------------------------
# Drift field and fixed points


@dataclass(frozen=True)
class FixedPoint:
    R: float
    stable: bool
    slope: float  # d(ybar - R)/dR at the root

    @property
    def stability(self) -> str:
        return "stable" if self.stable else "unstable"


@dataclass
class DriftField:
    """Slow-score drift sampled on ``R``.

    ``per_trade`` is ybar - R; ``drift`` is alpha lambda_RFQ(R) (ybar - R) in 1/day.
    """

    R: np.ndarray
    ybar: np.ndarray
    rate: np.ndarray  # lambda_RFQ, tier-A requests/day, both sides
    alpha: float
    fixed_points: list[FixedPoint] = field(default_factory=list)
    fold_candidates: list[float] = field(default_factory=list)

    @property
    def per_trade(self) -> np.ndarray:
        return self.ybar - self.R

    @property
    def drift(self) -> np.ndarray:
        return self.alpha * self.rate * self.per_trade

    @property
    def diffusion(self) -> np.ndarray:
        """Variance rate of R (1/day): each request moves R by alpha (1 - R) or -alpha R."""
        y, R = self.ybar, self.R
        return self.alpha**2 * self.rate * (y * (1.0 - R) ** 2 + (1.0 - y) * R**2)

    def __call__(self, R):
        """Drift (1/day) at arbitrary R by linear interpolation."""
        return np.interp(R, self.R, self.drift)

    def stable_points(self) -> list[float]:
        return [fp.R for fp in self.fixed_points if fp.stable]

    def unstable_points(self) -> list[float]:
        return [fp.R for fp in self.fixed_points if not fp.stable]

    def stability_pattern(self) -> list[str]:
        return [fp.stability for fp in self.fixed_points]


def find_fixed_points(R: np.ndarray, g: Callable[[np.ndarray], np.ndarray] | np.ndarray):
    """Roots of g on [R[0], R[-1]] by sign scan plus bisection.

    ``g`` is a callable or samples on ``R`` (linearly interpolated).  Returns
    (fixed points, fold candidates); a sample where g vanishes without changing
    sign is a tangency and is reported as a fold candidate instead of a root.
    """
    R = np.asarray(R, dtype=float)
    if callable(g):
        fun = g
        vals = np.asarray(g(R), dtype=float)
    else:
        vals = np.asarray(g, dtype=float)
        fun = lambda r: np.interp(r, R, vals)  # noqa: E731
    s = np.sign(vals)
    h = R[1] - R[0]
    roots: list[FixedPoint] = []
    folds: list[float] = []

    def slope_at(r):
        e = min(h, 1e-4)
        lo, hi = max(R[0], r - e), min(R[-1], r + e)
        return float((fun(hi) - fun(lo)) / (hi - lo))

    i = 0
    n = len(R)
    while i < n - 1:
        if s[i] == 0:
            # exact zero on a sample: root if the sign changes across it, tangency otherwise
            left = s[i - 1] if i > 0 else 0
            j = i
            while j < n - 1 and s[j] == 0:
                j += 1
            right = s[j]
            r = float(R[i])
            if left != 0 and right != 0 and left == right:
                folds.append(r)
            else:
                sl = slope_at(r)
                roots.append(FixedPoint(r, sl < 0, sl))
            i = j
            continue
        if s[i] * s[i + 1] < 0:
            r = brentq(lambda x: float(fun(x)), R[i], R[i + 1], xtol=ROOT_TOL)
            sl = slope_at(r)
            if sl == 0:
                sl = float(vals[i + 1] - vals[i])
            roots.append(FixedPoint(float(r), sl < 0, sl))
        i += 1
    return roots, folds


def inventory_distribution(controls: ControlField, params: ModelParams, j: int) -> np.ndarray:
    """Invariant law of inventory with the score frozen at grid node ``R[j]``.

    The chain jumps q -> q + z (bid) or q - z (ask) at rate lambda * y(q, R);
    trades excluded at the inventory boundary never fire.
    """
    q = controls.q
    n = len(q)
    step = q[1] - q[0]
    G = float(gate(params.gate, controls.R[j]))
    Q = np.zeros((n, n))
    idx = np.arange(n)
    for t, lam in enumerate((params.intensities.lambda_A, params.intensities.lambda_B)):
        scale = G if t == 0 else 1.0
        for k, z in enumerate(params.ladder.sizes):
            if lam[k] <= 0:
                continue
            shift = int(round(z / step))
            for s, sign in enumerate((1, -1)):
                rate = scale * lam[k] * np.nan_to_num(controls.y[t, s, k, :, j])
                dest = idx + sign * shift
                ok = (dest >= 0) & (dest < n) & (rate > 0)
                Q[idx[ok], dest[ok]] += rate[ok]
                Q[idx[ok], idx[ok]] -= rate[ok]
    A = Q.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def tier_a_winrate(controls: ControlField, params: ModelParams, R=None, inventory: str = "zero"):
    """Intensity-weighted tier-A win probability.

    ``inventory="zero"`` reads the q = 0 row; ``"ergodic"`` averages over the
    frozen-score invariant inventory law, counting boundary exclusions as losses.
    """
    lam = np.asarray(params.intensities.lambda_A)
    if lam.sum() <= 0:
        raise ValueError("tier-A win rate undefined when every Lambda^A is zero")
    active = lam > 0
    if inventory == "zero":
        i0 = len(controls.q) // 2
        # both sides coincide at q = 0; averaging keeps the estimate symmetric
        y = 0.5 * (controls.y[0, 0, :, i0] + controls.y[0, 1, :, i0])
        ybar = lam[active] @ y[active] / lam.sum()
    elif inventory == "ergodic":
        y = 0.5 * (np.nan_to_num(controls.y[0, 0]) + np.nan_to_num(controls.y[0, 1]))
        ybar = np.empty(len(controls.R))
        for j in range(len(controls.R)):
            pi = inventory_distribution(controls, params, j)
            ybar[j] = lam[active] @ (y[active][:, :, j] @ pi) / lam.sum()
    else:
        raise ValueError(f"unknown inventory mode {inventory!r}")
    if R is None:
        return ybar
    out = np.interp(R, controls.R, ybar)
    return float(out) if np.ndim(R) == 0 else out


def tier_a_rate(params: ModelParams, R) -> np.ndarray:
    """lambda_RFQ(R) = 2 G(R) sum_z Lambda_z^A."""
    return 2.0 * gate(params.gate, R) * sum(params.intensities.lambda_A)


def drift_field(params: ModelParams, R: np.ndarray, ybar: np.ndarray, alpha: float | None = None) -> DriftField:
    alpha = params.score.alpha if alpha is None else float(alpha)
    R = np.asarray(R, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    roots, folds = find_fixed_points(R, ybar - R)
    return DriftField(R, ybar, tier_a_rate(params, R), alpha, roots, folds)


def score_drift_from_hjb(controls: ControlField, params: ModelParams, R_grid=None,
                         alpha: float | None = None, inventory: str = "zero") -> DriftField:
    """Drift field from solved controls.

    ``alpha`` sets the EMA weight in the drift prefactor (default: ``params``).
    Fixed points come from the per-trade drift ybar - R, so controls solved
    with alpha = 0 still yield their fixed points.  ``inventory`` selects the
    win-rate estimate (see :func:`tier_a_winrate`).
    """
    R = np.linspace(0.0, 1.0, SCAN_POINTS) if R_grid is None else np.asarray(R_grid, dtype=float)
    return drift_field(params, R, tier_a_winrate(controls, params, R, inventory), alpha)


# ---------------------------------------------------------------------------
# Relaxation ODE


@dataclass
class Trajectory:
    R0: float
    t: np.ndarray  # day
    R: np.ndarray
    converged: bool
    target: float | None

    def at(self, times) -> np.ndarray:
        return np.interp(times, self.t, self.R)


def _diffusion_mean(field_: DriftField, R0: float, horizon: float, dt: float, n_cells: int):
    """Mean of the score density under dp/dt = -(f p)' + (D p)''/2 on [0, 1], no-flux ends.

    Finite volumes on ``n_cells`` nodes, Crank-Nicolson in time, point mass at R0.
    """
    from scipy.sparse import diags, identity
    from scipy.sparse.linalg import splu

    x = np.linspace(0.0, 1.0, n_cells)
    h = x[1] - x[0]
    f = np.interp(x, field_.R, field_.drift)
    D = np.maximum(np.interp(x, field_.R, field_.diffusion), 0.0)
    fa = 0.5 * (f[1:] + f[:-1])
    # face flux F_{i+1/2} = cA p_i + cB p_{i+1}
    cA = 0.5 * fa + 0.5 * D[:-1] / h
    cB = 0.5 * fa - 0.5 * D[1:] / h
    main = np.zeros(n_cells)
    main[:-1] -= cA / h
    main[1:] += cB / h
    L = diags([cA / h, main, -cB / h], [-1, 0, 1], format="csc")
    eye = identity(n_cells, format="csc")
    lhs = splu((eye - 0.5 * dt * L).tocsc())
    rhs = (eye + 0.5 * dt * L).tocsr()
    p = np.zeros(n_cells)
    pos = R0 / h
    i = min(int(pos), n_cells - 2)
    w = pos - i
    p[i], p[i + 1] = 1.0 - w, w
    n_steps = max(1, int(np.ceil(horizon / dt)))
    t = np.linspace(0.0, horizon, n_steps + 1)
    mean = np.empty(n_steps + 1)
    mean[0] = R0
    for s in range(1, n_steps + 1):
        p = lhs.solve(rhs @ p)
        mean[s] = (x @ p) / p.sum()
    return t, mean


def relax_trajectory(field_: DriftField, R0: float, horizon: float, dt_ode: float | None = None,
                     tol: float = 1e-4, max_horizon: float | None = None, noise: bool = False,
                     n_cells: int = 1001) -> Trajectory:
    """Integrate R' = drift(R) with classical RK4 from ``R0``.

    Steps that jump over a root of the drift are halved.  If ``R`` has not
    settled within ``tol`` of a stable fixed point by ``horizon`` the run is
    extended, up to ``max_horizon`` (default 20 x horizon).

    With ``noise=True`` the returned path is instead the mean score under the
    diffusion approximation of the EMA jumps, which carries the O(alpha) shift
    that curvature of the drift induces on a noisy score.  It runs exactly to
    ``horizon``; ``target`` is the nearest stable point of the noiseless drift.
    """
    if not 0.0 <= R0 <= 1.0:
        raise ValueError("R0 must lie in [0, 1]")
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    if noise:
        t, m = _diffusion_mean(field_, float(R0), horizon, dt_ode or 2e-3, n_cells)
        stable = field_.stable_points()
        target = min(stable, key=lambda s: abs(s - m[-1])) if stable else None
        done = target is not None and abs(m[-1] - m[-2]) < tol * (t[-1] - t[-2])
        return Trajectory(float(R0), t, m, bool(done), target)
    lam_max = 2.0 * field_.alpha * float(np.max(field_.rate))
    if dt_ode is None:
        dt_ode = 0.01 / lam_max if lam_max > 0 else horizon / 100.0
    max_horizon = 20.0 * horizon if max_horizon is None else max_horizon
    f = field_

    def rk4(r, h):
        k1 = f(r)
        k2 = f(r + 0.5 * h * k1)
        k3 = f(r + 0.5 * h * k2)
        k4 = f(r + h * k3)
        return r + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0

    stable = f.stable_points()
    ts, Rs = [0.0], [float(R0)]
    t, r = 0.0, float(R0)
    end = horizon
    target = None
    while True:
        while t < end - 1e-12:
            h = min(dt_ode, end - t)
            d0 = f(r)
            new = rk4(r, h)
            # overshoot: the drift changed sign across the step
            for _ in range(30):
                if d0 == 0 or np.sign(f(new)) != -np.sign(d0) or abs(new - r) < 1e-12:
                    break
                h *= 0.5
                new = rk4(r, h)
            t, r = t + h, float(np.clip(new, 0.0, 1.0))
            ts.append(t)
            Rs.append(r)
        near = [s for s in stable if abs(s - r) < tol]
        if near or not stable:
            target = near[0] if near else None
            break
        if end >= max_horizon:
            log.warning("relaxation from R0=%.4f not settled by t=%g", R0, end)
            break
        end = min(2.0 * end, max_horizon)
    if target is None and stable:
        # report the basin's attractor even when not yet reached
        target = min(stable, key=lambda s: abs(s - r))
    return Trajectory(float(R0), np.array(ts), np.array(Rs), bool(near) if stable else False, target)


# ---------------------------------------------------------------------------
# Logistic-gate closure


@dataclass(frozen=True)
class ClosureParams:
    A_coef: float
    B_coef: float
    ybar_star: float
    xi_A: float
    xi_B: float
    xi_0: float
    rms: float = float("nan")

    def xi(self, G):
        return self.xi_B + np.asarray(G, dtype=float) * self.xi_A


def ybar_star(params: ModelParams) -> float:
    lam = np.asarray(params.intensities.lambda_A)
    p0 = np.array([solve_hamiltonian(params, "A", k, 0.0).deriv for k in range(params.K)])
    return float(lam @ p0 / lam.sum())


def closure_base(params: ModelParams) -> tuple[float, float, float, float]:
    """(ybar_star, xi_A, xi_B, xi_0) from frozen curvatures at x = 0."""
    xi_A, xi_B = flow_stiffness(params)
    xi_0 = xi_B + gate(params.gate, params.gate.r0) * xi_A
    return ybar_star(params), xi_A, xi_B, float(xi_0)


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise ValueError("gate coordinate u must lie strictly inside (0, 1)")
    return u


def score_of_u(params: ModelParams, u):
    gp = params.gate
    u = _check_u(u)
    return gp.r0 + np.log(u / (1.0 - u)) / gp.beta


def closure_winrate(cp: ClosureParams, params: ModelParams, R, alpha: float | None = None):
    """Closure estimate of ybar(R)."""
    alpha = params.score.alpha if alpha is None else alpha
    G = gate(params.gate, R)
    return (cp.ybar_star + cp.A_coef * (cp.xi_0**-0.5 - cp.xi(G) ** -0.5)
            + alpha * cp.B_coef * gate_deriv(params.gate, R))


def closure_drift(cp: ClosureParams, params: ModelParams, u):
    """F(u) = ybar(R(u)) - R(u) in the gate coordinate u in (0, 1)."""
    gp = params.gate
    u = _check_u(u)
    G = gp.g_min + gp.delta_g * u
    return (cp.ybar_star + cp.A_coef * (cp.xi_0**-0.5 - cp.xi(G) ** -0.5)
            + params.score.alpha * cp.B_coef * gp.delta_g * gp.beta * u * (1.0 - u)
            - score_of_u(params, u))


def closure_drift_du(cp: ClosureParams, params: ModelParams, u):
    """dF/du; folds are the simultaneous zeros of F and dF/du."""
    gp = params.gate
    u = _check_u(u)
    G = gp.g_min + gp.delta_g * u
    return (cp.A_coef * 0.5 * gp.delta_g * cp.xi_A * cp.xi(G) ** -1.5
            + params.score.alpha * cp.B_coef * gp.delta_g * gp.beta * (1.0 - 2.0 * u)
            - (1.0 / u + 1.0 / (1.0 - u)) / gp.beta)


def closure_field(cp: ClosureParams, params: ModelParams, R_grid=None) -> DriftField:
    R = np.linspace(0.0, 1.0, SCAN_POINTS) if R_grid is None else np.asarray(R_grid, dtype=float)
    return drift_field(params, R, closure_winrate(cp, params, R))


def fit_closure(R_free: np.ndarray, ybar_free: np.ndarray, R_fb: np.ndarray, ybar_fb: np.ndarray,
                params: ModelParams) -> ClosureParams:
    """Least-squares closure coefficients.

    ``(R_free, ybar_free)`` come from a solve without feedback (alpha = 0) and
    determine A alone; ``(R_fb, ybar_fb)`` come from a solve at ``params``'
    alpha and determine B given A.  ybar_star is fixed at its exact value.
    """
    R_free, ybar_free, R_fb, ybar_fb = (np.asarray(a, dtype=float) for a in (R_free, ybar_free, R_fb, ybar_fb))
    if len(R_free) < 20 or len(R_fb) < 20:
        raise ClosureFitError("need at least 20 samples per run")
    if len(R_free) != len(ybar_free) or len(R_fb) != len(ybar_fb):
        raise ClosureFitError("sample arrays differ in length")
    alpha = params.score.alpha
    if alpha <= 0:
        raise ClosureFitError("the feedback run needs alpha > 0 to identify B")
    ys, xi_A, xi_B, xi_0 = closure_base(params)
    base = ClosureParams(0.0, 0.0, ys, xi_A, xi_B, xi_0)

    col_a = xi_0**-0.5 - base.xi(gate(params.gate, R_free)) ** -0.5
    scale_a = float(col_a @ col_a)
    if scale_a <= 1e-30 * max(1.0, xi_0**-1):
        raise ClosureFitError("rank-deficient design: xi does not vary with R (flat gate?)")
    A = float(col_a @ (ybar_free - ys) / scale_a)

    col_b = alpha * gate_deriv(params.gate, R_fb)
    scale_b = float(col_b @ col_b)
    if scale_b <= 1e-30:
        raise ClosureFitError("rank-deficient design: G'(R) vanishes on the samples (flat gate?)")
    A_part = ys + A * (xi_0**-0.5 - base.xi(gate(params.gate, R_fb)) ** -0.5)
    B = float(col_b @ (ybar_fb - A_part) / scale_b)
    if not (A > 0 and B > 0):
        raise ClosureFitError(f"fitted coefficients must be positive, got A={A:.4g}, B={B:.4g}")
    resid = np.concatenate([ybar_free - (ys + A * col_a), ybar_fb - (A_part + B * col_b)])
    return ClosureParams(A, B, ys, xi_A, xi_B, xi_0, float(np.sqrt(np.mean(resid**2))))


# ---------------------------------------------------------------------------
# Bifurcation scan


@dataclass
class BifurcationDiagram:
    parameter: str
    values: np.ndarray
    points: list[list[FixedPoint]]
    failed: list[bool]

    @property
    def counts(self) -> list[int]:
        return [len(p) if not f else -1 for p, f in zip(self.points, self.failed)]

    @property
    def folds(self) -> list[tuple[float, float, int, int]]:
        """Adjacent scan pairs (lo, hi, count_lo, count_hi) where the count changes."""
        out = []
        c = self.counts
        for i in range(len(c) - 1):
            if c[i] >= 0 and c[i + 1] >= 0 and c[i] != c[i + 1]:
                out.append((float(self.values[i]), float(self.values[i + 1]), c[i], c[i + 1]))
        return out

    def critical_bracket(self) -> tuple[float, float] | None:
        """First bracket where the count is 1 below and 3 above."""
        for lo, hi, c_lo, c_hi in self.folds:
            if c_lo == 1 and c_hi == 3:
                return lo, hi
        return None


def bifurcation_scan(params: ModelParams, betas: Sequence[float], source: str = "closure",
                     closure: ClosureParams | None = None, grid: GridSpec | None = None,
                     solver_opts: dict | None = None, progress=None) -> BifurcationDiagram:
    """Fixed points of the score drift as the gate steepness beta varies.

    ``source="closure"`` re-evaluates the fitted closure (``closure`` required);
    ``source="hjb"`` re-solves the stationary problem per beta on ``grid``.
    Scan points whose solve fails are marked and skipped.
    """
    betas = np.asarray(list(betas), dtype=float)
    if len(betas) == 0 or np.any(betas <= 0) or np.any(np.diff(betas) <= 0):
        raise ValueError("betas must be positive and strictly increasing")
    if source not in ("closure", "hjb"):
        raise ValueError(f"unknown source {source!r}")
    if source == "closure" and closure is None:
        raise ValueError("closure source needs fitted ClosureParams")
    grid = GridSpec.ci() if grid is None else grid
    points, failed = [], []
    for i, b in enumerate(betas):
        p = params.updated({"gate.beta": float(b)})
        try:
            if source == "closure":
                fp = closure_field(closure, p).fixed_points
            else:
                _, controls, rep = stationary_solve(p, grid, strict=True, **(solver_opts or {}))
                fp = score_drift_from_hjb(controls, p).fixed_points
            points.append(fp)
            failed.append(False)
        except (FixedPointError, HJBError) as exc:
            log.warning("scan point beta=%g failed: %s", b, exc)
            points.append([])
            failed.append(True)
        if progress is not None:
            progress(i, float(b), points[-1])
    return BifurcationDiagram("beta", betas, points, failed)
