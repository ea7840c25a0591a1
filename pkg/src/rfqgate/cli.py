"""Command-line entry point: ``rfqgate <subcommand> [options]``.

Every CSV starts with a metadata line carrying the parameter hash; each run
also writes ``manifest.json`` next to its outputs.  Failures print a JSON
object on stderr and exit nonzero (2 for usage/config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .model import ConfigError, ModelParams, default_params, load_params

log = logging.getLogger("rfqgate")

SOLUTION_FILE = "solution.npz"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Run context


class Run:
    def __init__(self, args, params: ModelParams):
        self.args = args
        self.params = params
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.start = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    @property
    def meta(self) -> dict:
        m = {"params_hash": self.params.config_hash(), "subcommand": self.args.command, "version": __version__}
        if getattr(self.args, "seed", None) is not None:
            m["seed"] = self.args.seed
        return m

    def table(self, name: str, columns: dict, extra: dict | None = None) -> Path:
        from .tables import write_table

        path = write_table(self.out / name, columns, {**self.meta, **(extra or {})})
        self.outputs.append(path)
        return path

    def json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps({"meta": self.meta, **payload}, indent=2, sort_keys=True) + "\n")
        self.outputs.append(path)
        return path

    def manifest(self) -> Path:
        path = self.out / "manifest.json"
        payload = {
            "config_hash": self.params.config_hash(),
            "subcommand": self.args.command,
            "tool_version": __version__,
            "argv": sys.argv[1:],
            "seed": getattr(self.args, "seed", None),
            "started_at": self.started,
            "wall_clock_s": round(time.perf_counter() - self.start, 3),
            "outputs": sorted(p.name for p in self.outputs),
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# Solver plumbing


def _grid(args):
    from .hjb import GridSpec

    base = GridSpec.ci() if args.ci else GridSpec()
    kw = {k: v for k, v in (("q_max", args.q_max), ("n_R", args.n_R), ("n_t", args.n_t),
                             ("T_block", args.T_block)) if v is not None}
    return replace(base, **kw)


def _solver_opts(args) -> dict:
    return dict(tol=args.tol, max_iter=args.max_iter, zeta=args.zeta, anderson_m=args.anderson_m,
                precondition=not args.no_precondition)


def _save_solution(run: Run, vg, controls, report, grid) -> None:
    path = run.out / SOLUTION_FILE
    np.savez_compressed(path, v=vg.v, phi=vg.phi, q=vg.q, R=vg.R, delta=controls.delta, y=controls.y,
                        x=controls.x, residuals=np.asarray(report.residuals),
                        params=json.dumps(run.params.to_dict(), sort_keys=True),
                        grid=json.dumps(asdict(grid)))
    run.outputs.append(path)


def load_solution(directory: str | Path):
    """(params, ValueGrid, ControlField) saved by ``rfqgate solve``."""
    from .hjb import ControlField, ValueGrid

    path = Path(directory) / SOLUTION_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no saved solution (run `rfqgate solve` first)")
    with np.load(path) as z:
        params = ModelParams.from_dict(json.loads(str(z["params"])))
        vg = ValueGrid(z["v"], z["phi"], z["q"], z["R"])
        controls = ControlField(z["q"], z["R"], z["delta"], z["y"], z["x"])
    return params, vg, controls


def _solve(run: Run, params: ModelParams | None = None):
    from .hjb import stationary_solve

    params = run.params if params is None else params
    grid = _grid(run.args)
    vg, controls, report = stationary_solve(
        params, grid, progress=lambda i, r: log.info("iteration %d: residual %.3e", i, r), **_solver_opts(run.args))
    if not report.converged:
        log.warning("fixed point not converged; outputs reflect the last iterate")
    return grid, vg, controls, report


def _solution(run: Run, source: str | None, params: ModelParams | None = None):
    """Controls from a saved solve directory, else a fresh solve."""
    if source:
        p, vg, controls = load_solution(source)
        want = run.params if params is None else params
        if p.config_hash() != want.config_hash():
            log.warning("solution in %s was produced with params %s, not %s", source, p.config_hash(),
                        want.config_hash())
        return vg, controls
    _, vg, controls, _ = _solve(run, params)
    return vg, controls


def _controls_columns(controls, params: ModelParams) -> dict:
    from .hjb import SIDES

    cols = {k: [] for k in ("size", "tier", "side", "q", "R", "delta", "y")}
    Q, RR = np.meshgrid(controls.q, controls.R, indexing="ij")
    for t, tier in enumerate(("A", "B")):
        for s, side in enumerate(SIDES):
            for k in range(params.K):
                d = controls.delta[t, s, k]
                ok = np.isfinite(d)
                n = int(ok.sum())
                cols["size"].extend([params.ladder.sizes[k]] * n)
                cols["tier"].extend([tier] * n)
                cols["side"].extend([side] * n)
                cols["q"].extend(Q[ok])
                cols["R"].extend(RR[ok])
                cols["delta"].extend(d[ok])
                cols["y"].extend(controls.y[t, s, k][ok])
    return cols


# ---------------------------------------------------------------------------
# Subcommands


def cmd_solve(run: Run) -> None:
    from .hjb import instant_pnl_A

    grid, vg, controls, report = _solve(run)
    Q, RR = np.meshgrid(vg.q, vg.R, indexing="ij")
    run.table("value.csv", {"q": Q.ravel(), "R": RR.ravel(), "v": vg.v.ravel()})
    run.table("phi.csv", {"R": vg.R, "phi": vg.phi})
    run.table("controls.csv", _controls_columns(controls, run.params))
    run.table("fixed_point.csv", {"iteration": np.arange(1, report.iterations + 1), "residual": report.residuals},
              {"converged": report.converged})
    pnl = instant_pnl_A(controls, run.params)
    run.table("pnl.csv", {"q": Q.ravel(), "R": RR.ravel(), "Pi_A": pnl.ravel()})
    _save_solution(run, vg, controls, report, grid)


def cmd_controls(run: Run) -> None:
    _, controls = _solution(run, run.args.source)
    run.table("controls.csv", _controls_columns(controls, run.params))


def cmd_hamiltonian(run: Run) -> None:
    from .hamiltonian import solve_hamiltonian

    a = run.args
    if a.action != "dump":
        raise UsageError(f"unknown hamiltonian action {a.action!r}")
    if not a.x_max > a.x_min or a.points < 2:
        raise UsageError("need x_max > x_min and at least 2 points")
    x = np.linspace(a.x_min, a.x_max, a.points)
    cols = {k: [] for k in ("size", "tier", "x", "H", "delta", "dH", "d2H")}
    for tier in ("A", "B"):
        for k in range(run.params.K):
            sol = solve_hamiltonian(run.params, tier, k, x)
            cols["size"].extend([run.params.ladder.sizes[k]] * len(x))
            cols["tier"].extend([tier] * len(x))
            cols["x"].extend(x)
            cols["H"].extend(sol.value)
            cols["delta"].extend(sol.maximizer)
            cols["dH"].extend(sol.deriv)
            cols["d2H"].extend(sol.second_deriv)
    run.table("hamiltonian.csv", cols)


def _drift(run: Run):
    from .adiabatic import score_drift_from_hjb

    _, controls = _solution(run, run.args.source)
    return score_drift_from_hjb(controls, run.params, alpha=run.args.alpha)


def cmd_phase_portrait(run: Run) -> None:
    field_ = _drift(run)
    run.table("drift.csv", {"R": field_.R, "ybar": field_.ybar, "per_trade": field_.per_trade, "drift": field_.drift})
    fps = field_.fixed_points
    run.table("fixed_points.csv", {"R": [f.R for f in fps], "stability": [f.stability for f in fps],
                                   "slope": [f.slope for f in fps]})


def cmd_relax(run: Run) -> None:
    from .adiabatic import relax_trajectory

    field_ = _drift(run)
    cols = {"R0": [], "t": [], "R": []}
    for r0 in _floats(run.args.R0):
        tr = relax_trajectory(field_, r0, run.args.horizon)
        cols["R0"].extend([r0] * len(tr.t))
        cols["t"].extend(tr.t)
        cols["R"].extend(tr.R)
    run.table("trajectories.csv", cols)


def _fit(run: Run):
    from .adiabatic import fit_closure, tier_a_winrate

    a = run.args
    _, c_fb = _solution(run, a.source)
    _, c_free = _solution(run, a.source_nofeedback, run.params.updated({"score.alpha": 0.0}))
    return fit_closure(c_free.R, tier_a_winrate(c_free, run.params), c_fb.R, tier_a_winrate(c_fb, run.params),
                       run.params)


def _closure_payload(cp) -> dict:
    return {"A_coef": cp.A_coef, "B_coef": cp.B_coef, "ybar_star": cp.ybar_star, "xi_A": cp.xi_A,
            "xi_B": cp.xi_B, "xi_0": cp.xi_0, "rms": cp.rms}


def cmd_closure_fit(run: Run) -> None:
    run.json("closure.json", {"closure": _closure_payload(_fit(run))})


def cmd_bifurcation(run: Run) -> None:
    from .adiabatic import ClosureParams, bifurcation_scan

    a = run.args
    betas = _floats(a.betas)
    closure = None
    if a.source_kind == "closure":
        if a.closure:
            data = json.loads(Path(a.closure).read_text())
            closure = ClosureParams(**data.get("closure", data))
        else:
            closure = _fit(run)
    diagram = bifurcation_scan(run.params, betas, a.source_kind, closure=closure, grid=_grid(a),
                               solver_opts=_solver_opts(a))
    cols = {"beta": [], "R": [], "stability": []}
    for b, pts, bad in zip(diagram.values, diagram.points, diagram.failed):
        for p in ([] if bad else pts):
            cols["beta"].append(b)
            cols["R"].append(p.R)
            cols["stability"].append(p.stability)
        if bad:
            cols["beta"].append(b)
            cols["R"].append(float("nan"))
            cols["stability"].append("failed")
    bracket = diagram.critical_bracket()
    run.table("bifurcation.csv", cols, {"source": a.source_kind})
    run.json("bifurcation.json", {"betas": list(diagram.values), "counts": list(diagram.counts),
                                  "folds": diagram.folds, "critical_bracket": bracket})


def cmd_simulate(run: Run) -> None:
    from .simulator import SimConfig, simulate

    a = run.args
    _, controls = _solution(run, a.source)
    cfg = SimConfig(controls, a.horizon, seed=a.seed, q0=a.q0, R0=a.R0, freeze_score=a.freeze_score,
                    record_dt=a.record_dt)
    res = simulate(cfg, run.params, a.paths, threads=a.threads)
    n_paths, n_rec = res.q.shape
    run.table("paths.csv", {
        "path": np.repeat(np.arange(n_paths), n_rec),
        "t": np.tile(res.times, n_paths),
        "q": res.q.ravel(),
        "R": res.R.ravel(),
        "cash": res.cash.ravel(),
        "penalty": res.penalty.ravel(),
    })
    run.json("summary.json", {"summary": res.summary()})


def cmd_report(run: Run) -> None:
    from .report import FigureSpec, assign_roles, render

    a = run.args
    spec = FigureSpec(a.figure, assign_roles(a.figure, a.inputs), run.out, svg=not a.no_svg,
                      params=run.params, meta={"params_hash": run.params.config_hash()})
    run.outputs.extend(render(spec))


COMMANDS = {
    "solve": cmd_solve,
    "controls": cmd_controls,
    "hamiltonian": cmd_hamiltonian,
    "phase-portrait": cmd_phase_portrait,
    "relax": cmd_relax,
    "bifurcation": cmd_bifurcation,
    "closure-fit": cmd_closure_fit,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--params", help="model parameter JSON (default: bundled reference set)")
    g.add_argument("--out", default=".", help="output directory (default: .)")
    g.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    g.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    grid = _Parser(add_help=False)
    s = grid.add_argument_group("grid and solver")
    s.add_argument("--ci", action="store_true", help="reduced grid (n_R=51, n_t=2000)")
    s.add_argument("--q-max", dest="q_max", type=float)
    s.add_argument("--n-R", dest="n_R", type=int)
    s.add_argument("--n-t", dest="n_t", type=int)
    s.add_argument("--T-block", dest="T_block", type=float, help="block length [day]")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--zeta", type=float, default=0.5)
    s.add_argument("--anderson-m", type=int, default=5)
    s.add_argument("--no-precondition", action="store_true", help="plain damped map (no score-kernel step)")

    src = _Parser(add_help=False)
    src.add_argument("--from", dest="source", help="directory of a previous `solve` run (else solve now)")

    parser = _Parser(prog="rfqgate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rfqgate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("solve", parents=[common, grid], help="stationary HJB solve; writes value/phi/controls/pnl CSVs")
    sub.add_parser("controls", parents=[common, grid, src], help="write controls.csv")
    p = sub.add_parser("hamiltonian", parents=[common], help="reduced Hamiltonian tables")
    p.add_argument("action", choices=["dump"])
    p.add_argument("--x-min", type=float, default=-50.0)
    p.add_argument("--x-max", type=float, default=50.0)
    p.add_argument("--points", type=int, default=201)

    for name, hlp in (("phase-portrait", "score drift and fixed points"), ("relax", "slow-score relaxation paths")):
        p = sub.add_parser(name, parents=[common, grid, src], help=hlp)
        p.add_argument("--alpha", type=float, default=None, help="EMA weight in the drift prefactor")
        if name == "relax":
            p.add_argument("--R0", default="0.1,0.3,0.45,0.5,0.55,0.6,0.7,0.9", help="comma-separated initial scores")
            p.add_argument("--horizon", type=float, default=30.0, help="day")

    p = sub.add_parser("closure-fit", parents=[common, grid, src], help="fit the logistic-gate closure")
    p.add_argument("--from-nofeedback", dest="source_nofeedback", help="solve directory with alpha = 0")

    p = sub.add_parser("bifurcation", parents=[common, grid, src], help="fixed points versus gate steepness")
    p.add_argument("--betas", default="5,10,20,40,80,160")
    p.add_argument("--source", dest="source_kind", choices=["closure", "hjb"], default="closure")
    p.add_argument("--closure", help="closure.json from closure-fit (closure source)")
    p.add_argument("--solution", dest="source", help="alpha run for an on-the-fly closure fit")
    p.add_argument("--from-nofeedback", dest="source_nofeedback")

    p = sub.add_parser("simulate", parents=[common, grid, src], help="Monte Carlo paths")
    p.add_argument("--horizon", type=float, default=10.0, help="day")
    p.add_argument("--paths", type=int, default=64)
    p.add_argument("--R0", type=float, default=0.6)
    p.add_argument("--q0", type=float, default=0.0)
    p.add_argument("--freeze-score", action="store_true")
    p.add_argument("--record-dt", type=float, default=0.1, help="day")

    p = sub.add_parser("report", parents=[common], help="figure CSV + SVG")
    p.add_argument("--figure", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="role=path or paths in role order")
    p.add_argument("--no-svg", action="store_true")
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    payload = {"error": kind, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["field"] = str(exc).split(":", 1)[0]
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        params = load_params(args.params) if args.params else default_params()
        if args.threads is not None:
            import numba

            from . import hjb  # noqa: F401  (sets the threading-layer preference first)

            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        run = Run(args, params)
        COMMANDS[args.command](run)
        run.manifest()
    except (UsageError, ConfigError) as exc:
        return _fail("config" if isinstance(exc, ConfigError) else "usage", exc, 2)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
