"""Monte Carlo event simulator of the controlled dealer.

Requests arrive per (tier, size, side) as Poisson streams; tier-A rates are
scaled by the gate G(R).  Arrivals are generated by thinning a homogeneous
stream at the G_max majorant.  Each path draws from its own Philox stream keyed
by (seed, path index), so results do not depend on thread count or order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .hjb import ControlField
from .model import ModelParams

CHUNK = 1 << 16  # uniforms per refill


@dataclass(frozen=True)
class SimConfig:
    controls: ControlField
    horizon: float  # day
    seed: int = 0
    q0: float = 0.0  # M
    R0: float = 0.6
    freeze_score: bool = False
    record_dt: float = 0.1  # day

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if not self.record_dt > 0:
            raise ValueError("record_dt must be > 0")
        if not 0.0 <= self.R0 <= 1.0:
            raise ValueError("R0 must lie in [0, 1]")
        q_max = float(np.max(np.abs(self.controls.q)))
        if abs(self.q0) > q_max:
            raise ValueError(f"|q0| exceeds q_max = {q_max:g}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class SimResult:
    """Recorded paths (``[path, record]``) and per-path event tallies.

    Tallies ``requests``, ``quoted``, ``wins`` and ``expected_wins`` are indexed
    ``[path, tier, size]``; ``notional`` is ``[path, tier]`` in M.
    """

    times: np.ndarray
    q: np.ndarray
    R: np.ndarray
    cash: np.ndarray  # bp*M, edge captured
    penalty: np.ndarray  # bp*M, running inventory penalty
    requests: np.ndarray
    quoted: np.ndarray
    wins: np.ndarray
    expected_wins: np.ndarray
    notional: np.ndarray
    q_moments: np.ndarray  # [path, 2]: time integrals of q and q^2
    boundary_skips: np.ndarray
    horizon: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.q.shape[0]

    @property
    def objective(self) -> np.ndarray:
        """Per-path cash edge minus the inventory penalty ledger."""
        return self.cash[:, -1] - self.penalty[:, -1]

    def tier_a_win_rate(self) -> tuple[float, float]:
        """Pooled empirical tier-A win rate over quoted requests and its standard error."""
        n = self.quoted[:, 0].sum()
        if n == 0:
            return float("nan"), float("nan")
        rates = self.wins[:, 0].sum(axis=1) / np.maximum(self.quoted[:, 0].sum(axis=1), 1)
        p = self.wins[:, 0].sum() / n
        se = rates.std(ddof=1) / math.sqrt(self.n_paths) if self.n_paths > 1 else math.sqrt(p * (1 - p) / n)
        return float(p), float(se)

    def mean_R(self) -> tuple[np.ndarray, np.ndarray]:
        """Cross-path mean score path and its standard error."""
        se = self.R.std(axis=0, ddof=1) / math.sqrt(self.n_paths) if self.n_paths > 1 else np.zeros(len(self.times))
        return self.R.mean(axis=0), se

    def inventory_std(self) -> float:
        """Time-averaged inventory standard deviation pooled over paths."""
        m1 = self.q_moments[:, 0].sum() / (self.n_paths * self.horizon)
        m2 = self.q_moments[:, 1].sum() / (self.n_paths * self.horizon)
        return float(math.sqrt(max(m2 - m1 * m1, 0.0)))

    def summary(self) -> dict:
        p, se = self.tier_a_win_rate()
        return {
            "n_paths": self.n_paths,
            "horizon_days": self.horizon,
            "seed": self.seed,
            "tier_a_win_rate": p,
            "tier_a_win_rate_se": se,
            "turnover": turnover_report(self) if self.horizon >= 1.0 else None,
            "inventory_mean": float(self.q_moments[:, 0].sum() / (self.n_paths * self.horizon)),
            "inventory_std": self.inventory_std(),
            "terminal_R_mean": float(self.R[:, -1].mean()),
            "terminal_R_std": float(self.R[:, -1].std()),
            "pnl": {
                "cash_edge_mean": math.fsum(self.cash[:, -1]) / self.n_paths,
                "inventory_penalty_mean": math.fsum(self.penalty[:, -1]) / self.n_paths,
                "objective_mean": math.fsum(self.objective) / self.n_paths,
            },
            "boundary_skips": int(self.boundary_skips.sum()),
        }


# ---------------------------------------------------------------------------
# Event kernel


@nb.njit(cache=True, nogil=True)
def _interp_R(table, qi, R, n_R):
    """Linear interpolation along R of ``table[qi, :]``, clamped at the edges."""
    t = R * (n_R - 1)
    if t <= 0.0:
        return table[qi, 0]
    if t >= n_R - 1:
        return table[qi, n_R - 1]
    j = int(t)
    w = t - j
    return (1.0 - w) * table[qi, j] + w * table[qi, j + 1]


@nb.njit(cache=True, nogil=True)
def _run_path(u, pos, state, tallies, rec, delta, jumps, q_step, i0, lam, lam_max, kappa, dbar,
              theta, gmin, dg, beta, r0, alpha, wwin, freeze, pen_rate, horizon, rec_times):
    """Advance one path while uniforms last.

    ``state`` = [t, q, R, cash, penalty, next_record_index, int_q, int_q2, skips].
    ``tallies`` = [4, tier, size]: requests, quoted, wins, expected wins, plus
    notional in ``tallies[4, tier, 0]``.  ``rec`` = [record, 4] of (q, R, cash, penalty).
    Returns the new position in ``u``; stops early (returning -1) at the horizon.
    """
    n_u = u.shape[0]
    K = jumps.shape[0]
    n_q, n_R = delta.shape[3], delta.shape[4]
    n_rec = rec.shape[0]
    t, q, R = state[0], state[1], state[2]
    cash, pen = state[3], state[4]
    nrec = int(state[5])
    while True:
        if pos + 3 > n_u:
            break
        e = -math.log(1.0 - u[pos]) / lam_max
        t_new = t + e
        # record levels crossed before the next event
        while nrec < n_rec and rec_times[nrec] <= min(t_new, horizon):
            tr = rec_times[nrec]
            rec[nrec, 0] = q
            rec[nrec, 1] = R
            rec[nrec, 2] = cash
            rec[nrec, 3] = pen + pen_rate * q * q * (tr - t)
            nrec += 1
        if t_new >= horizon:
            dtl = horizon - t
            pen += pen_rate * q * q * dtl
            state[6] += q * dtl
            state[7] += q * q * dtl
            t = horizon
            state[0], state[1], state[2], state[3], state[4], state[5] = t, q, R, cash, pen, nrec
            return -1
        pen += pen_rate * q * q * e
        state[6] += q * e
        state[7] += q * q * e
        t = t_new
        # thinning: pick a channel proportional to its current intensity
        g = gmin + dg / (1.0 + math.exp(-beta * (min(max(R, 0.0), 1.0) - r0)))
        x = u[pos + 1] * lam_max
        pos += 3
        tier = -1
        k = 0
        side = 0
        acc = 0.0
        for ti in range(2):
            mult = g if ti == 0 else 1.0
            for kk in range(K):
                rate = lam[ti, kk] * mult
                if x < acc + 2.0 * rate:
                    tier = ti
                    k = kk
                    side = 0 if x < acc + rate else 1
                    break
                acc += 2.0 * rate
            if tier >= 0:
                break
        if tier < 0:
            continue  # rejected candidate
        tallies[0, tier, k] += 1.0
        qi = i0 + int(round(q / q_step))
        z = jumps[k] * q_step
        target = qi + (jumps[k] if side == 0 else -jumps[k])
        win = False
        if target < 0 or target >= n_q:
            state[8] += 1.0
        else:
            d = _interp_R(delta[tier, side, k], qi, R, n_R)
            p = 1.0 / (1.0 + math.exp(kappa[tier, k] * (d - dbar[tier, k])))
            tallies[1, tier, k] += 1.0
            tallies[3, tier, k] += p
            if u[pos - 1] < p:
                win = True
                tallies[2, tier, k] += 1.0
                tallies[4, tier, 0] += z
                q += z if side == 0 else -z
                cash += z * (d - theta[k])
        if tier == 0 and not freeze:
            w = wwin[k] if win else 0.0
            R = (1.0 - alpha) * R + alpha * w
            R = min(max(R, 0.0), 1.0)
    state[0], state[1], state[2], state[3], state[4], state[5] = t, q, R, cash, pen, nrec
    return pos


def _stream(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path])))


def _prepare(cfg: SimConfig, params: ModelParams):
    c = cfg.controls
    q = c.q
    q_step = float(q[1] - q[0])
    steps = np.asarray(params.ladder.sizes) / q_step
    if np.any(np.abs(steps - np.round(steps)) > 1e-9):
        raise ValueError("control grid q step must divide every ladder size")
    if abs(cfg.q0 / q_step - round(cfg.q0 / q_step)) > 1e-9:
        raise ValueError("q0 must lie on the control grid")
    lam = np.array([params.intensities.lambda_A, params.intensities.lambda_B], dtype=float)
    gp = params.gate
    wwin = np.ones(params.K)
    if params.score.size_weighted:
        wwin = np.asarray(params.ladder.sizes) / params.ladder.z_max
    return dict(
        delta=np.ascontiguousarray(c.delta),
        jumps=np.round(steps).astype(np.int64),
        q_step=q_step,
        i0=len(q) // 2,
        lam=lam,
        lam_max=2.0 * (gp.g_max * lam[0].sum() + lam[1].sum()),
        kappa=np.array([params.win_A.kappa, params.win_B.kappa]),
        dbar=np.array([params.win_A.delta_bar, params.win_B.delta_bar]),
        theta=np.asarray(params.risk.theta, dtype=float),
        gmin=gp.g_min,
        dg=gp.delta_g,
        beta=gp.beta,
        r0=gp.r0,
        alpha=params.score.alpha,
        wwin=wwin,
        freeze=cfg.freeze_score,
        pen_rate=0.5 * params.risk.gamma * params.risk.sigma**2,
        horizon=cfg.horizon,
        rec_times=record_times(cfg),
    )


def record_times(cfg: SimConfig) -> np.ndarray:
    """Multiples of ``record_dt`` up to the horizon, with the horizon itself last."""
    t = np.arange(int(math.floor(cfg.horizon / cfg.record_dt + 1e-9)) + 1) * cfg.record_dt
    if cfg.horizon - t[-1] > 1e-9 * cfg.horizon:
        t = np.append(t, cfg.horizon)
    return t


def _simulate_path(cfg: SimConfig, kw: dict, path: int, K: int):
    rng = _stream(cfg.seed, path)
    times = kw["rec_times"]
    state = np.array([0.0, cfg.q0, cfg.R0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    tallies = np.zeros((5, 2, K))
    rec = np.zeros((len(times), 4))
    if kw["lam_max"] <= 0:
        rec[:] = (cfg.q0, cfg.R0, 0.0, 0.0)
        rec[:, 3] = kw["pen_rate"] * cfg.q0**2 * times
        pen = kw["pen_rate"] * cfg.q0**2 * cfg.horizon
        state[4], state[6], state[7] = pen, cfg.q0 * cfg.horizon, cfg.q0**2 * cfg.horizon
        return state, tallies, rec
    while True:
        u = rng.random(CHUNK)
        pos = _run_path(u, 0, state, tallies, rec, **kw)
        if pos < 0:
            break
    return state, tallies, rec


def simulate(cfg: SimConfig, params: ModelParams, n_paths: int, threads: int | None = None) -> SimResult:
    """Simulate ``n_paths`` independent paths over ``cfg.horizon`` days."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    kw = _prepare(cfg, params)
    K = params.K
    times = kw["rec_times"]
    work = lambda p: _simulate_path(cfg, kw, p, K)  # noqa: E731
    if threads is not None and threads > 1 and n_paths > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(work, range(n_paths)))
    else:
        out = [work(p) for p in range(n_paths)]
    states = np.array([o[0] for o in out])
    tallies = np.array([o[1] for o in out])
    recs = np.array([o[2] for o in out])
    return SimResult(
        times=times,
        q=recs[:, :, 0],
        R=recs[:, :, 1],
        cash=recs[:, :, 2],
        penalty=recs[:, :, 3],
        requests=tallies[:, 0],
        quoted=tallies[:, 1],
        wins=tallies[:, 2],
        expected_wins=tallies[:, 3],
        notional=tallies[:, 4, :, 0],
        q_moments=states[:, 6:8],
        boundary_skips=states[:, 8].astype(np.int64),
        horizon=cfg.horizon,
        seed=cfg.seed,
        meta={"params_hash": params.config_hash(), "R0": cfg.R0, "q0": cfg.q0, "freeze_score": cfg.freeze_score},
    )


def turnover_report(result: SimResult) -> dict:
    """Mean daily traded notional (M/day) per tier, with cross-path standard errors."""
    if result.horizon < 1.0:
        raise ValueError("turnover needs a horizon of at least one day")
    per_day = result.notional / result.horizon  # [path, tier]
    total = per_day.sum(axis=1)
    n = result.n_paths
    se = (lambda x: float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)  # noqa: E731
    return {
        "total": float(total.mean()),
        "A": float(per_day[:, 0].mean()),
        "B": float(per_day[:, 1].mean()),
        "total_se": se(total),
    }


@dataclass
class OdeComparison:
    R0: float
    times: np.ndarray
    mc_mean: np.ndarray
    mc_se: np.ndarray
    ode: np.ndarray

    @property
    def deviation(self) -> np.ndarray:
        return self.mc_mean - self.ode

    @property
    def max_abs_deviation(self) -> float:
        return float(np.max(np.abs(self.deviation)))

    @property
    def max_z(self) -> float:
        """Largest deviation in units of the MC standard error."""
        return float(np.max(np.abs(self.deviation) / np.maximum(self.mc_se, 1e-300)))


def validate_against_ode(params: ModelParams, controls: ControlField, R0_list, horizon: float,
                         n_paths: int, seed: int = 0, n_checkpoints: int = 10, field_=None,
                         threads: int | None = None, noise: bool = True) -> list[OdeComparison]:
    """Compare the cross-path mean score with the slow-score dynamics at evenly spaced checkpoints.

    The default reference averages win rates over the frozen-score inventory
    law and includes the diffusion correction (``noise``); pass ``field_`` and
    ``noise=False`` for the bare q = 0 ODE.
    """
    from .adiabatic import relax_trajectory, score_drift_from_hjb

    if n_checkpoints < 1:
        raise ValueError("n_checkpoints must be >= 1")
    if field_ is None:
        field_ = score_drift_from_hjb(controls, params, inventory="ergodic")
    out = []
    for R0 in R0_list:
        cfg = SimConfig(controls, horizon, seed=seed, R0=float(R0), record_dt=horizon / n_checkpoints)
        res = simulate(cfg, params, n_paths, threads=threads)
        mean, se = res.mean_R()
        traj = relax_trajectory(field_, float(R0), horizon, max_horizon=horizon, noise=noise)
        sel = slice(1, None)  # the initial record is exact for both
        out.append(OdeComparison(float(R0), res.times[sel], mean[sel], se[sel], traj.at(res.times[sel])))
    return out
