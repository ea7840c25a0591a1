"""Reduced scalar Hamiltonian H_z(x) = sup_delta p_z(delta) (z (delta - theta_z) + x).

For the logistic curve the first-order condition is solved in log-odds
coordinates u = logit p = kappa (delta_bar - delta), where it reads

    exp(u) + u = kappa (delta_bar - theta + x / z) - 1.

The left side is convex and strictly increasing, so a safeguarded Newton
iteration started to the right of the root converges monotonically.  Value and
derivatives then have closed forms:

    H = z exp(u) / kappa,   H' = p,   H'' = (kappa / z) p (1 - p)^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import ModelParams

MAX_ITER = 100
BRACKET = 10.0


class HamiltonianError(ArithmeticError):
    """The one-dimensional maximisation failed to converge."""


class TableRangeError(ValueError):
    """A table query fell outside the tabulated range."""


@dataclass(frozen=True)
class HamiltonianSolution:
    value: np.ndarray | float  # bp*M
    maximizer: np.ndarray | float  # bp
    deriv: np.ndarray | float  # win probability
    second_deriv: np.ndarray | float  # 1/(bp*M)


def _coeffs(params: ModelParams, tier: str, k: int) -> tuple[float, float, float, float]:
    if not 0 <= k < params.K:
        raise IndexError(f"size index {k} out of range for K={params.K}")
    curve = params.curve(tier)
    return params.ladder.sizes[k], curve.kappa[k], curve.delta_bar[k], params.risk.theta[k]


def solve_log_odds(b, max_iter: int = MAX_ITER) -> np.ndarray:
    """Root of exp(u) + u = b, elementwise."""
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise HamiltonianError("non-finite continuation value")
    g = lambda u: np.exp(u) + u - b  # noqa: E731
    # Bracket [-BRACKET, BRACKET] in log-odds (delta_bar -/+ BRACKET/kappa), widened until it holds the root.
    lo = np.minimum(-BRACKET, b - 1.0)
    hi = np.maximum(BRACKET, np.log(np.maximum(b, 1.0)) + 1.0)
    while np.any(g(lo) > 0) or np.any(g(hi) < 0):
        lo, hi = 2 * lo, 2 * hi
        if np.max(np.abs(lo)) > 1e6:
            raise HamiltonianError("could not bracket the first-order condition")
    # Start right of the root: Newton on a convex increasing function stays there.
    u = np.where(b < 1.0, b, np.log(np.maximum(b, 1.0)))
    u = np.clip(u, lo, hi)
    for _ in range(max_iter):
        eu = np.exp(u)
        f = eu + u - b
        lo = np.where(f < 0, u, lo)
        hi = np.where(f > 0, u, hi)
        step = f / (eu + 1.0)
        new = u - step
        bad = (new <= lo) | (new >= hi)
        new = np.where(bad, 0.5 * (lo + hi), new)
        done = np.abs(new - u) <= 1e-14 * np.maximum(1.0, np.abs(u))
        u = new
        if np.all(done):
            return u
    resid = np.max(np.abs(np.exp(u) + u - b))
    if resid > 1e-12 * max(1.0, float(np.max(np.abs(b)))):
        raise HamiltonianError(f"Newton did not converge after {max_iter} iterations (residual {resid:.3e})")
    return u


def solve_hamiltonian(params: ModelParams, tier: str, k: int, x) -> HamiltonianSolution:
    z, kappa, dbar, theta = _coeffs(params, tier, k)
    x = np.asarray(x, dtype=float)
    u = solve_log_odds(kappa * (dbar - theta + x / z) - 1.0)
    p = expit(u)
    q = expit(-u)
    sol = HamiltonianSolution(
        value=z * np.exp(u) / kappa,
        maximizer=dbar - u / kappa,
        deriv=p,
        second_deriv=(kappa / z) * p * q * q,
    )
    if x.ndim == 0:
        sol = HamiltonianSolution(*(float(getattr(sol, f)) for f in ("value", "maximizer", "deriv", "second_deriv")))
    return sol


def objective(params: ModelParams, tier: str, k: int, delta, x):
    """Expected gain p(delta) (z (delta - theta) + x) of quoting ``delta``."""
    z, kappa, dbar, theta = _coeffs(params, tier, k)
    delta = np.asarray(delta, dtype=float)
    return expit(-kappa * (delta - dbar)) * (z * (delta - theta) + x)


def foc_residual(params: ModelParams, tier: str, k: int, delta, x):
    z, kappa, dbar, theta = _coeffs(params, tier, k)
    p = expit(-kappa * (np.asarray(delta, dtype=float) - dbar))
    return -kappa * (1 - p) * (z * (delta - theta) + x) + z


def hamiltonian_value(params, tier, k, x):
    return solve_hamiltonian(params, tier, k, x).value


def hamiltonian_deriv(params, tier, k, x):
    return solve_hamiltonian(params, tier, k, x).deriv


def hamiltonian_curvature(params, tier, k, x):
    return solve_hamiltonian(params, tier, k, x).second_deriv


def offset(params, tier, k, x):
    return solve_hamiltonian(params, tier, k, x).maximizer


@dataclass(frozen=True)
class HamiltonianTable:
    """Cubic Hermite tables of H, H', H'' on a uniform grid, one row per (tier, size).

    Values are interpolated with H' as slopes and derivatives with H'' as
    slopes.  Rows are ordered tier-major: row ``t * K + k``.
    """

    x0: float
    h: float
    n: int
    value: np.ndarray
    deriv: np.ndarray
    second_deriv: np.ndarray
    maximizer: np.ndarray
    K: int

    @property
    def x_range(self) -> tuple[float, float]:
        return self.x0, self.x0 + self.h * (self.n - 1)

    @property
    def x_grid(self) -> np.ndarray:
        return self.x0 + self.h * np.arange(self.n)

    def row(self, tier: str, k: int) -> int:
        return (0 if tier == "A" else 1) * self.K + k

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.x_range
        if np.any(~((x >= lo) & (x <= hi))):
            raise TableRangeError(f"query outside tabulated range [{lo}, {hi}]")
        t = (x - self.x0) / self.h
        i = np.minimum(t.astype(np.int64), self.n - 2)
        return i, t - i

    def _hermite(self, y, dy, row, x):
        i, s = self._locate(x)
        y0, y1 = y[row, i], y[row, i + 1]
        d0, d1 = dy[row, i] * self.h, dy[row, i + 1] * self.h
        s2 = s * s
        s3 = s2 * s
        return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * d0 + (3 * s2 - 2 * s3) * y1 + (s3 - s2) * d1

    def eval_value(self, tier: str, k: int, x):
        return self._hermite(self.value, self.deriv, self.row(tier, k), x)

    def eval_deriv(self, tier: str, k: int, x):
        return self._hermite(self.deriv, self.second_deriv, self.row(tier, k), x)


def build_table(params: ModelParams, x_range: tuple[float, float], n_points: int) -> HamiltonianTable:
    lo, hi = float(x_range[0]), float(x_range[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
        raise ValueError(f"degenerate table range {x_range}")
    if n_points < 16:
        raise ValueError("n_points must be >= 16")
    x = np.linspace(lo, hi, n_points)
    K = params.K
    shape = (2 * K, n_points)
    val, der, cur, mx = (np.empty(shape) for _ in range(4))
    for t, tier in enumerate(("A", "B")):
        for k in range(K):
            sol = solve_hamiltonian(params, tier, k, x)
            r = t * K + k
            val[r], der[r], cur[r], mx[r] = sol.value, sol.deriv, sol.second_deriv, sol.maximizer
    return HamiltonianTable(lo, (hi - lo) / (n_points - 1), n_points, val, der, cur, mx, K)


def table_points_for(x_range: tuple[float, float], step: float = 0.01) -> int:
    return max(16, int(np.ceil((x_range[1] - x_range[0]) / step)) + 1)
