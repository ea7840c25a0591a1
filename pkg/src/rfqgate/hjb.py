"""Reduced HJB on the (inventory, score) grid.

Backward explicit Euler over one block [0, T] with terminal condition
``-eta q^2 / 2 + exp(-rho T) Phi(R)``, and the block-stationary boundary term
Phi found by damped fixed-point iteration with Anderson acceleration.

Tier-A requests carry win/lose score branches: a win moves the state to
(q +/- z, R_+), a loss to (q, R_-).  Off-grid R_+/R_- are read by linear
interpolation.  Trades that would leave [-q_max, q_max] are excluded, so such
a request contributes only its lose branch on tier A and nothing on tier B.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.linalg import expm

from .hamiltonian import HamiltonianTable, build_table, solve_hamiltonian, table_points_for
from .model import ConfigError, ModelParams, gate, score_branches

log = logging.getLogger(__name__)

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is often too old; prefer layers that need no runtime check
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

SIDES = ("bid", "ask")
SIDE_SIGN = {"bid": 1, "ask": -1}  # bid: dealer buys, q -> q + z
TABLE_STEP = 0.01
STABILITY_LIMIT = 0.5
MAX_TABLE_GAP = 5000.0  # bp*M; caps table memory (~1e6 points per row)


class HJBError(ArithmeticError):
    """Non-finite value met during a backward sweep."""


class FixedPointError(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class GridSpec:
    q_max: float = 50.0  # M
    q_step: float = 1.0  # M
    n_R: int = 101
    T_block: float = 0.05  # day
    n_t: int = 10_000

    def __post_init__(self):
        if self.q_step <= 0 or self.q_max <= 0:
            raise ConfigError("grid: q_max and q_step must be > 0")
        if abs(self.q_max / self.q_step - round(self.q_max / self.q_step)) > 1e-9:
            raise ConfigError("grid.q_max: must be a multiple of q_step")
        if self.n_R < 3:
            raise ConfigError("grid.n_R: need at least 3 score points")
        if self.T_block <= 0 or self.n_t < 1:
            raise ConfigError("grid: T_block and n_t must be positive")

    @classmethod
    def ci(cls) -> "GridSpec":
        """Reduced grid used by the test suite."""
        return cls(n_R=51, n_t=2000)

    @property
    def dt(self) -> float:
        return self.T_block / self.n_t

    @property
    def n_q(self) -> int:
        return 2 * int(round(self.q_max / self.q_step)) + 1

    @property
    def q(self) -> np.ndarray:
        half = int(round(self.q_max / self.q_step))
        return np.arange(-half, half + 1) * self.q_step

    @property
    def R(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_R)

    @property
    def i0(self) -> int:
        """Index of q = 0."""
        return self.n_q // 2

    def q_index(self, q: float) -> int:
        i = int(round(q / self.q_step)) + self.i0
        if not 0 <= i < self.n_q:
            raise IndexError(f"q={q} outside the grid")
        return i

    def R_index(self, R: float) -> int:
        return int(np.argmin(np.abs(self.R - R)))

    def jumps(self, params: ModelParams) -> np.ndarray:
        steps = np.asarray(params.ladder.sizes) / self.q_step
        if np.any(np.abs(steps - np.round(steps)) > 1e-9):
            raise ConfigError("grid.q_step: every ladder size must be an integer multiple of q_step")
        return np.round(steps).astype(np.int64)

    def check(self, params: ModelParams) -> float:
        """Validate against ``params``; returns the explicit-scheme stability number."""
        self.jumps(params)
        num = stability_number(params, self)
        if num >= STABILITY_LIMIT:
            raise ConfigError(
                f"grid.n_t: dt * total intensity = {num:.3f} >= {STABILITY_LIMIT}; increase n_t"
            )
        return num


def stability_number(params: ModelParams, grid: GridSpec) -> float:
    """dt times the total request rate over sizes, tiers and both sides at G_max."""
    lam = params.gate.g_max * sum(params.intensities.lambda_A) + sum(params.intensities.lambda_B)
    return grid.dt * 2.0 * lam


@dataclass
class ValueGrid:
    v: np.ndarray  # (n_q, n_R), bp*M
    phi: np.ndarray  # (n_R,), bp*M
    q: np.ndarray
    R: np.ndarray

    @property
    def at_zero(self) -> np.ndarray:
        return self.v[len(self.q) // 2]


@dataclass
class ControlField:
    """Optimal offsets and win probabilities at t = 0 of a block.

    Arrays are indexed ``[tier, side, k, q, R]`` with tier in (A, B) and side
    in (bid, ask).  Trades excluded at the inventory boundary hold NaN.
    """

    q: np.ndarray
    R: np.ndarray
    delta: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def _ix(self, tier: str, side: str, k: int):
        return (0 if tier == "A" else 1), SIDES.index(side), k

    def offset(self, tier: str, side: str, k: int) -> np.ndarray:
        return self.delta[self._ix(tier, side, k)]

    def win(self, tier: str, side: str, k: int) -> np.ndarray:
        return self.y[self._ix(tier, side, k)]

    def feasible(self, side: str, k: int) -> np.ndarray:
        return np.isfinite(self.delta[(1, SIDES.index(side), k)][:, 0])


@dataclass
class FixedPointReport:
    iterations: int = 0
    residuals: list[float] = field(default_factory=list)
    anderson_m: int = 0
    zeta: float = 1.0
    tol: float = 0.0
    converged: bool = False
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# Backward sweep kernel


@nb.njit(cache=True, inline="always")
def _herm(val, der, row, x0, h, n, x):
    t = (x - x0) / h
    i = int(t)
    if i > n - 2:
        i = n - 2
    s = t - i
    s2 = s * s
    s3 = s2 * s
    return (
        (2.0 * s3 - 3.0 * s2 + 1.0) * val[row, i]
        + (s3 - 2.0 * s2 + s) * der[row, i] * h
        + (3.0 * s2 - 2.0 * s3) * val[row, i + 1]
        + (s3 - s2) * der[row, i + 1] * h
    )


@nb.njit(cache=True, parallel=True)
def _sweep(v, n_steps, dt, jumps, lamA, lamB, ip, wp, im, wm, pen, val, der, x0, h, even, status):
    """Run ``n_steps`` explicit steps; returns the t=0 level.

    With ``even`` the input must be even in q: only rows q >= 0 are updated and
    the rest mirrored, which is exact because the primitives are symmetric.
    ``status`` is filled with (code, step, q-index, R-index) on failure:
    code 1 = continuation gap outside the Hamiltonian table, 2 = non-finite value.
    """
    nq, nR = v.shape
    K = jumps.shape[0]
    n = val.shape[1]
    xmax = x0 + h * (n - 1)
    mid = nq // 2
    first = mid if even else 0
    cur = v.copy()
    nxt = np.empty_like(v)
    for step in range(n_steps):
        for a in nb.prange(first, nq):
            for r in range(nR):
                vc = cur[a, r]
                lose = (1.0 - wm[r]) * cur[a, im[r]] + wm[r] * cur[a, im[r] + 1] - vc
                tot = 0.0
                bad = 0
                for k in range(K):
                    z = jumps[k]
                    la = lamA[k, r]
                    tb0 = 0.0
                    tb1 = 0.0
                    ta0 = 0.0
                    ta1 = 0.0
                    for side in range(2):
                        b = a + z if side == 0 else a - z
                        tb = 0.0
                        ta = 0.0
                        if b < 0 or b >= nq:
                            ta = lose
                        else:
                            d = cur[b, r] - vc
                            if d < x0 or d > xmax:
                                bad = 1
                                break
                            tb = _herm(val, der, K + k, x0, h, n, d)
                            if la > 0.0:
                                j = ip[k, r]
                                w = wp[k, r]
                                xa = (1.0 - w) * cur[b, j] + w * cur[b, j + 1] - vc - lose
                                if xa < x0 or xa > xmax:
                                    bad = 1
                                    break
                                ta = lose + _herm(val, der, k, x0, h, n, xa)
                        if side == 0:
                            tb0 = tb
                            ta0 = ta
                        else:
                            tb1 = tb
                            ta1 = ta
                    if bad:
                        break
                    # bid + ask added as a pair keeps the sweep exactly even in q
                    tot += lamB[k] * (tb0 + tb1)
                    if la > 0.0:
                        tot += la * (ta0 + ta1)
                new = vc + dt * (tot - pen[a])
                if bad == 0 and not np.isfinite(new):
                    bad = 2
                if bad:
                    status[0] = bad
                    status[1] = step
                    status[2] = a
                    status[3] = r
                nxt[a, r] = new
        if status[0] != 0:
            return cur
        if even:
            for a in range(mid):
                nxt[a] = nxt[nq - 1 - a]
        cur, nxt = nxt, cur
    return cur


def _interp_weights(R_target: np.ndarray, n_R: int):
    t = np.clip(R_target, 0.0, 1.0) * (n_R - 1)
    i = np.minimum(np.floor(t).astype(np.int64), n_R - 2)
    return i, t - i


@dataclass(frozen=True)
class _Operator:
    jumps: np.ndarray
    lamA: np.ndarray
    lamB: np.ndarray
    ip: np.ndarray
    wp: np.ndarray
    im: np.ndarray
    wm: np.ndarray
    pen: np.ndarray


def _operator(params: ModelParams, grid: GridSpec) -> _Operator:
    R = grid.R
    K = params.K
    G = gate(params.gate, R)
    lamA = np.asarray(params.intensities.lambda_A)[:, None] * G[None, :]
    ip = np.empty((K, grid.n_R), dtype=np.int64)
    wp = np.empty((K, grid.n_R))
    for k in range(K):
        r_plus, r_minus = score_branches(params.score, R, k, params.ladder)
        ip[k], wp[k] = _interp_weights(r_plus, grid.n_R)
    im, wm = _interp_weights(r_minus, grid.n_R)
    pen = 0.5 * params.risk.gamma * params.risk.sigma**2 * grid.q**2
    return _Operator(grid.jumps(params), lamA, np.asarray(params.intensities.lambda_B, dtype=float),
                     ip, wp, im, wm, pen)


def _gaps(v: np.ndarray, op: _Operator, k: int, side: int):
    """Continuation gaps (x_A, x_B) for size k and side, NaN where excluded."""
    nq, nR = v.shape
    z = op.jumps[k]
    shift = z if side == 0 else -z
    src = np.arange(nq) + shift
    ok = (src >= 0) & (src < nq)
    lose = (1.0 - op.wm) * v[:, op.im] + op.wm * v[:, op.im + 1] - v
    xB = np.full_like(v, np.nan)
    xA = np.full_like(v, np.nan)
    moved = v[src[ok]]
    xB[ok] = moved - v[ok]
    up = (1.0 - op.wp[k]) * moved[:, op.ip[k]] + op.wp[k] * moved[:, op.ip[k] + 1]
    xA[ok] = up - v[ok] - lose[ok]
    return xA, xB


def _table_for(v: np.ndarray, params: ModelParams, op: _Operator, table: HamiltonianTable | None):
    """Reuse ``table`` if it covers every gap of ``v`` with margin, else build a wider one."""
    span = 0.0
    for k in range(params.K):
        for side in range(2):
            xA, xB = _gaps(v, op, k, side)
            span = max(span, float(np.nanmax(np.abs(xA))), float(np.nanmax(np.abs(xB))))
    need = 1.25 * span + 20.0
    if table is not None and table.x_range[0] <= -need and table.x_range[1] >= need:
        return table
    lim = float(np.ceil(need / 10.0) * 10.0)
    if lim > MAX_TABLE_GAP:
        raise HJBError(f"continuation gaps reach {span:.3g} bp*M, beyond the table cap {MAX_TABLE_GAP:g}")
    return build_table(params, (-lim, lim), table_points_for((-lim, lim), TABLE_STEP))


def _run(v_terminal, params, grid, op, table, n_steps):
    while True:
        status = np.zeros(4, dtype=np.int64)
        even = bool(np.array_equal(v_terminal, v_terminal[::-1]))
        out = _sweep(v_terminal, n_steps, grid.dt, op.jumps, op.lamA, op.lamB, op.ip, op.wp,
                     op.im, op.wm, op.pen, table.value, table.deriv, table.x0, table.h, even, status)
        if status[0] == 0:
            return out, table
        step, a, r = status[1:]
        where = f"step {step}, q={grid.q[a]:g}, R={grid.R[r]:.4f}"
        if status[0] == 2:
            raise HJBError(f"non-finite value in backward sweep at {where}")
        lo, hi = table.x_range
        lim = 2.0 * max(-lo, hi)
        if lim > MAX_TABLE_GAP:
            raise HJBError(f"continuation gap beyond +/-{MAX_TABLE_GAP:g} at {where}; iterate diverged?")
        log.info("widening Hamiltonian table to +/-%g (gap left range at %s)", lim, where)
        table = build_table(params, (-lim, lim), table_points_for((-lim, lim), TABLE_STEP))


def terminal_value(phi: np.ndarray, params: ModelParams, grid: GridSpec) -> np.ndarray:
    q = grid.q
    disc = np.exp(-params.risk.rho * grid.T_block)
    return -0.5 * params.risk.eta * q[:, None] ** 2 + disc * np.asarray(phi, dtype=float)[None, :]


def step_backward(v_next: ValueGrid, params: ModelParams, grid: GridSpec,
                  table: HamiltonianTable | None = None) -> ValueGrid:
    """One explicit Euler step from t to t - dt."""
    op = _operator(params, grid)
    v = np.ascontiguousarray(v_next.v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise HJBError("v_next is not finite")
    table = _table_for(v, params, op, table)
    out, _ = _run(v, params, grid, op, table, 1)
    return ValueGrid(out, v_next.phi, grid.q, grid.R)


def solve_block(phi, params: ModelParams, grid: GridSpec, table: HamiltonianTable | None = None,
                with_table: bool = False):
    """Backward solve over one block; returns (ValueGrid at t=0, ControlField)."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.n_R,) or not np.all(np.isfinite(phi)):
        raise ValueError("phi must be a finite array over the score grid")
    grid.check(params)
    op = _operator(params, grid)
    vT = terminal_value(phi, params, grid)
    table = _table_for(vT, params, op, table)
    v0, table = _run(vT, params, grid, op, table, grid.n_t)
    vg = ValueGrid(v0, phi.copy(), grid.q, grid.R)
    controls = extract_controls(vg, params, grid)
    if with_table:
        return vg, controls, table
    return vg, controls


def extract_controls(v: ValueGrid, params: ModelParams, grid: GridSpec) -> ControlField:
    op = _operator(params, grid)
    K = params.K
    shape = (2, 2, K, grid.n_q, grid.n_R)
    delta = np.full(shape, np.nan)
    y = np.full(shape, np.nan)
    xs = np.full(shape, np.nan)
    for k in range(K):
        for side in range(2):
            xA, xB = _gaps(v.v, op, k, side)
            for t, (tier, x) in enumerate((("A", xA), ("B", xB))):
                ok = np.isfinite(x)
                sol = solve_hamiltonian(params, tier, k, x[ok])
                delta[t, side, k][ok] = sol.maximizer
                y[t, side, k][ok] = sol.deriv
                xs[t, side, k][ok] = x[ok]
    return ControlField(grid.q, grid.R, delta, y, xs)


def instant_pnl_A(controls: ControlField, params: ModelParams, q=None, R=None):
    """Tier-A edge-capture rate G(R) sum_z Lambda_z^A sum_sides p z (delta - theta), bp*M/day.

    At q = 0 the two sides coincide and this is 2 G sum_z Lambda^A p z (delta - theta).
    Returns the full (q, R) array, or a scalar when both ``q`` and ``R`` are given.
    """
    G = gate(params.gate, controls.R)
    total = np.zeros((len(controls.q), len(controls.R)))
    for k in range(params.K):
        lam = params.intensities.lambda_A[k]
        if lam == 0:
            continue
        z, theta = params.ladder.sizes[k], params.risk.theta[k]
        for s in range(2):
            d, p = controls.delta[0, s, k], controls.y[0, s, k]
            total += lam * np.where(np.isfinite(d), p * z * (d - theta), 0.0)
    total *= G[None, :]
    if q is None and R is None:
        return total
    qi = int(np.argmin(np.abs(controls.q - (0.0 if q is None else q))))
    if R is None:
        return total[qi]
    ri = int(np.argmin(np.abs(controls.R - R)))
    return float(total[qi, ri])


# ---------------------------------------------------------------------------
# Fixed point for the block boundary term


def anderson_update(iterates, residuals, m: int, ridge: float = 1e-8, return_coeffs: bool = False):
    """Anderson mixing over the last ``min(m, len)`` (iterate, residual) pairs.

    Picks coefficients c with sum(c) = 1 minimising
    ``|sum c_i r_i|^2 + ridge * s * |c|^2`` where ``s`` is the largest diagonal
    entry of the residual Gram matrix (so ``ridge`` is scale free), and returns
    ``sum c_i (x_i + r_i)``.
    """
    if not iterates or len(iterates) != len(residuals):
        raise ValueError("need a nonempty history of matching (iterate, residual) pairs")
    if m < 1:
        raise ValueError("m must be >= 1")
    X = np.array(iterates[-m:], dtype=float)
    Rm = np.array(residuals[-m:], dtype=float)
    n = len(X)
    if n == 1:
        c = np.ones(1)
    else:
        gram = Rm @ Rm.T
        scale = float(np.max(np.diag(gram)))
        c = None
        if scale > 0:
            M = gram / scale + ridge * np.eye(n)
            try:
                a = np.linalg.solve(M, np.ones(n))
                if np.all(np.isfinite(a)) and abs(a.sum()) > 1e-300:
                    cond = np.linalg.cond(M)
                    if cond < 1e14:
                        c = a / a.sum()
            except np.linalg.LinAlgError:
                pass
        if c is None:
            log.warning("Anderson normal equations singular; taking a plain step")
            c = np.zeros(n)
            c[-1] = 1.0
    out = c @ (X + Rm)
    return (out, c) if return_coeffs else out


def score_kernel(v0: np.ndarray, params: ModelParams, grid: GridSpec, op: _Operator | None = None):
    """One-block transition matrix of the score at q = 0 under the controls read from ``v0``.

    Builds the generator of the tier-A win/lose jumps (rate G(R) Lambda^A per
    side, outcome probabilities from the q = 0 row, same linear interpolation as
    the sweep) and returns ``exp(T L)``.  Discounted, this is the sensitivity of
    v(0, 0, .) to the terminal term when inventory excursions are ignored.
    """
    op = _operator(params, grid) if op is None else op
    n = grid.n_R
    rows = np.arange(n)
    L = np.zeros((n, n))
    row0 = v0[grid.i0 : grid.i0 + 1]
    for k in range(params.K):
        if params.intensities.lambda_A[k] == 0:
            continue
        for side in range(2):
            # gaps of the q = 0 row only: rebuild a three-row strip around it
            z = op.jumps[k]
            b = grid.i0 + (z if side == 0 else -z)
            if not 0 <= b < grid.n_q:
                y = np.zeros(n)
            else:
                lose = (1.0 - op.wm) * row0[0, op.im] + op.wm * row0[0, op.im + 1] - row0[0]
                up = (1.0 - op.wp[k]) * v0[b, op.ip[k]] + op.wp[k] * v0[b, op.ip[k] + 1]
                y = solve_hamiltonian(params, "A", k, up - row0[0] - lose).deriv
            rate = op.lamA[k]
            for idx, wt in ((op.ip[k], rate * y * (1.0 - op.wp[k])), (op.ip[k] + 1, rate * y * op.wp[k]),
                            (op.im, rate * (1.0 - y) * (1.0 - op.wm)), (op.im + 1, rate * (1.0 - y) * op.wm)):
                np.add.at(L, (rows, idx), wt)
            L[rows, rows] -= rate
    return expm(grid.T_block * L)


def stationary_solve(params: ModelParams, grid: GridSpec, tol: float = 1e-6, max_iter: int = 200,
                     zeta: float = 0.5, anderson_m: int = 5, ridge: float = 1e-8,
                     precondition: bool = True, phi0=None, strict: bool = False, progress=None):
    """Solve Phi(R) = v(0, 0, R) across blocks.

    Each iteration solves one block with terminal term Phi and takes the damped
    step ``Phi + zeta d`` with ``d = v(0, 0, .) - Phi``; ``anderson_m > 0`` mixes
    the last ``anderson_m + 1`` steps.  With ``precondition`` the direction is
    ``d = (I - J)^{-1} (v(0, 0, .) - Phi)``, where J is the discounted score kernel
    of :func:`score_kernel`, which removes the slow exp(-rho T) contraction of
    the plain map.  Converged when ``sup |v(0, 0, .) - Phi| < tol``; since the
    block map is a sup-norm contraction with modulus exp(-rho T), the distance
    to the fixed point is then below ``tol / (1 - exp(-rho T))``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if not 0 < zeta <= 1:
        raise ValueError("zeta must lie in (0, 1]")
    if anderson_m < 0:
        raise ValueError("anderson_m must be >= 0")
    grid.check(params)
    start = time.perf_counter()
    report = FixedPointReport(anderson_m=anderson_m, zeta=zeta, tol=tol)
    phi = np.zeros(grid.n_R) if phi0 is None else np.array(phi0, dtype=float)
    if phi.shape != (grid.n_R,):
        raise ValueError("phi0 must have one entry per score grid point")
    op = _operator(params, grid)
    disc = np.exp(-params.risk.rho * grid.T_block)
    eye = np.eye(grid.n_R)
    table = None
    hist_x: list[np.ndarray] = []
    hist_r: list[np.ndarray] = []
    best = np.inf
    i0 = grid.i0
    vg = None
    for it in range(1, max_iter + 1):
        vT = terminal_value(phi, params, grid)
        table = _table_for(vT, params, op, table)
        v0, table = _run(vT, params, grid, op, table, grid.n_t)
        d = v0[i0] - phi
        res = float(np.max(np.abs(d)))
        report.residuals.append(res)
        report.iterations = it
        vg = ValueGrid(v0, phi.copy(), grid.q, grid.R)
        if progress is not None:
            progress(it, res)
        if res < tol:
            report.converged = True
            break
        if precondition:
            d = np.linalg.solve(eye - disc * score_kernel(v0, params, grid, op), d)
        r = zeta * d
        if anderson_m == 0:
            phi = phi + r
            continue
        if res > 10.0 * best:
            # mixing went astray: restart the history from the current point
            hist_x.clear()
            hist_r.clear()
        best = min(best, res)
        hist_x.append(phi.copy())
        hist_r.append(r)
        del hist_x[: -(anderson_m + 1)], hist_r[: -(anderson_m + 1)]
        phi = anderson_update(hist_x, hist_r, anderson_m + 1, ridge)
    report.wall_time = time.perf_counter() - start
    if not report.converged:
        msg = f"fixed point not converged after {max_iter} iterations (residual {report.residuals[-1]:.3e})"
        if strict:
            raise FixedPointError(msg, report)
        log.warning(msg)
    controls = extract_controls(vg, params, grid)
    return vg, controls, report
