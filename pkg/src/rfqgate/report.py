"""Figure datasets (CSV) and static SVG renderings from solver outputs.

Each figure id reads fixed input roles, checks their columns, assembles one
tidy table and writes ``<id>.csv`` (always) and ``<id>.svg`` (optional).  All
outputs are computed before anything is written, so a failed render leaves no
partial files.  SVGs are byte-stable: fixed hash salt, no date metadata.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, default_params, gate
from .tables import TableError, read_table, write_table

ROLES = {
    "value_heatmap": ("value",),
    "offset_R": ("feedback", "nofeedback"),
    "offset_q": ("controls",),
    "pnl_R": ("pnl",),
    "pnl_drift": ("pnl", "drift"),
    "drift_portrait": ("drift",),
    "relaxation": ("trajectories",),
    "bifurcation": ("bifurcation",),
}
OPTIONAL_ROLES = {"drift_portrait": ("drift_nofeedback", "fixed_points")}
COLUMNS = {
    "value": ("q", "R", "v"),
    "controls": ("size", "tier", "side", "q", "R", "delta", "y"),
    "pnl": ("q", "R", "Pi_A"),
    "drift": ("R", "ybar", "per_trade", "drift"),
    "fixed_points": ("R", "stability"),
    "trajectories": ("R0", "t", "R"),
    "bifurcation": ("beta", "R", "stability"),
}
ROLE_TABLE = {"feedback": "controls", "nofeedback": "controls", "controls": "controls", "value": "value",
              "pnl": "pnl", "drift": "drift", "trajectories": "trajectories", "bifurcation": "bifurcation",
              "fixed_points": "fixed_points", "drift_nofeedback": "drift"}


class ReportError(ValueError):
    """Bad figure request or malformed input table."""


@dataclass
class FigureSpec:
    figure: str
    inputs: dict[str, Path]
    out_dir: Path
    svg: bool = True
    size: float = 10.0  # M, ladder size shown in offset figures
    R_values: tuple[float, ...] = (0.3, 0.5, 0.6, 0.7, 0.9)  # offset_q slices
    log_x: bool = True  # bifurcation: log-scale 1/beta
    xlim: tuple[float, float] | None = None
    ylim: tuple[float, float] | None = None
    params: ModelParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.figure not in ROLES:
            raise ReportError(f"unknown figure id {self.figure!r}; choose from {', '.join(ROLES)}")
        self.inputs = {k: Path(v) for k, v in self.inputs.items()}
        allowed = set(ROLES[self.figure]) | set(OPTIONAL_ROLES.get(self.figure, ()))
        missing = [r for r in ROLES[self.figure] if r not in self.inputs]
        extra = [r for r in self.inputs if r not in allowed]
        if missing:
            raise ReportError(f"{self.figure}: missing input role(s) {', '.join(missing)}")
        if extra:
            raise ReportError(f"{self.figure}: unexpected input role(s) {', '.join(extra)}")
        self.out_dir = Path(self.out_dir)


def assign_roles(figure: str, items: list[str]) -> dict[str, Path]:
    """Map ``role=path`` items (or bare paths, in role order) to input roles."""
    if figure not in ROLES:
        raise ReportError(f"unknown figure id {figure!r}")
    order = list(ROLES[figure]) + list(OPTIONAL_ROLES.get(figure, ()))
    out: dict[str, Path] = {}
    bare = [it for it in items if "=" not in it]
    for it in items:
        if "=" in it:
            role, _, path = it.partition("=")
            out[role] = Path(path)
    free = [r for r in order if r not in out]
    if len(bare) > len(free):
        raise ReportError(f"{figure}: too many inputs")
    out.update(zip(free, map(Path, bare)))
    return out


def _load(spec: FigureSpec, role: str):
    try:
        return read_table(spec.inputs[role], COLUMNS[ROLE_TABLE[role]])
    except TableError as exc:
        raise ReportError(f"{spec.figure}/{role}: {exc}") from exc


def _offset_slice(cols, size: float, tier: str, side: str, q: float | None = None):
    sel = (np.isclose(cols["size"], size) & (cols["tier"] == tier) & (cols["side"] == side))
    if q is not None:
        sel &= np.isclose(cols["q"], q)
    if not sel.any():
        raise ReportError(f"no controls rows for size={size:g}, tier={tier}, side={side}")
    return sel


# ---------------------------------------------------------------------------
# Datasets


def _data_value_heatmap(spec):
    _, c = _load(spec, "value")
    return {"q": c["q"], "R": c["R"], "v": c["v"]}


def _data_offset_R(spec):
    out = {}
    R_ref = None
    for role, col in (("feedback", "delta_feedback"), ("nofeedback", "delta_nofeedback")):
        _, c = _load(spec, role)
        sel = _offset_slice(c, spec.size, "A", "bid", 0.0)
        order = np.argsort(c["R"][sel])
        R = c["R"][sel][order]
        if R_ref is not None and (len(R) != len(R_ref) or not np.allclose(R, R_ref)):
            raise ReportError("offset_R: the two runs use different score grids")
        R_ref = R
        out[col] = c["delta"][sel][order]
    return {"R": R_ref, **out}


def _data_offset_q(spec):
    _, c = _load(spec, "controls")
    R_all = np.unique(c["R"])
    rows = {"R": [], "q": [], "delta_A": [], "delta_B": []}
    for r in spec.R_values:
        rg = R_all[np.argmin(np.abs(R_all - r))]
        for tier, col in (("A", "delta_A"), ("B", "delta_B")):
            sel = _offset_slice(c, spec.size, tier, "bid") & np.isclose(c["R"], rg)
            order = np.argsort(c["q"][sel])
            if tier == "A":
                rows["q"].extend(c["q"][sel][order])
                rows["R"].extend([rg] * int(sel.sum()))
            rows[col].extend(c["delta"][sel][order])
    return {k: np.asarray(v) for k, v in rows.items()}


def _data_pnl_R(spec):
    _, c = _load(spec, "pnl")
    sel = np.isclose(c["q"], 0.0)
    if not sel.any():
        raise ReportError("pnl_R: no q = 0 rows")
    order = np.argsort(c["R"][sel])
    R = c["R"][sel][order]
    params = spec.params or default_params()
    return {"R": R, "Pi_A": c["Pi_A"][sel][order], "G": gate(params.gate, R)}


def _data_pnl_drift(spec):
    pnl = _data_pnl_R(spec)
    _, d = _load(spec, "drift")
    drift = np.interp(pnl["R"], d["R"], d["drift"])
    return {"R": pnl["R"], "drift": drift, "Pi_A": pnl["Pi_A"]}


def _data_drift_portrait(spec):
    _, d = _load(spec, "drift")
    out = {"R": d["R"], "ybar": d["ybar"], "per_trade": d["per_trade"], "drift": d["drift"]}
    if "drift_nofeedback" in spec.inputs:
        _, d0 = _load(spec, "drift_nofeedback")
        out["per_trade_nofeedback"] = np.interp(d["R"], d0["R"], d0["per_trade"])
        out["drift_nofeedback"] = np.interp(d["R"], d0["R"], d0["drift"])
    return out


def _data_relaxation(spec):
    _, c = _load(spec, "trajectories")
    return {"R0": c["R0"], "t": c["t"], "R": c["R"]}


def _data_bifurcation(spec):
    _, c = _load(spec, "bifurcation")
    if np.any(c["beta"] <= 0):
        raise ReportError("bifurcation: beta must be positive")
    return {"beta": c["beta"], "inv_beta": 1.0 / c["beta"], "R": c["R"], "stability": c["stability"]}


DATA = {name: globals()[f"_data_{name}"] for name in ROLES}


# ---------------------------------------------------------------------------
# Rendering


def _axes():
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6.4, 4.0))
    return fig, fig.add_subplot()


def _plot(spec: FigureSpec, data: dict):
    params = spec.params or default_params()
    fig, ax = _axes()
    f = spec.figure
    if f == "value_heatmap":
        q, R = np.unique(data["q"]), np.unique(data["R"])
        V = np.full((len(R), len(q)), np.nan)
        V[np.searchsorted(R, data["R"]), np.searchsorted(q, data["q"])] = data["v"]
        m = ax.pcolormesh(q, R, V, shading="nearest", cmap="viridis")
        fig.colorbar(m, ax=ax, label="v(0, q, R)  [bp*M]")
        ax.axhline(params.gate.r0, color="white", linestyle=":", linewidth=1.2, gid="r0-line")
        ax.set_xlabel("inventory q [M]")
        ax.set_ylabel("score R")
    elif f == "offset_R":
        ax.plot(data["R"], data["delta_feedback"], label=f"alpha = {params.score.alpha:g}")
        ax.plot(data["R"], data["delta_nofeedback"], "--", label="alpha = 0")
        ax.axvline(params.gate.r0, color="grey", linestyle=":")
        ax.set_xlabel("score R")
        ax.set_ylabel(f"tier-A offset, z = {spec.size:g} M [bp]")
        ax.legend()
    elif f == "offset_q":
        for r in np.unique(data["R"]):
            sel = data["R"] == r
            ax.plot(data["q"][sel], data["delta_A"][sel], label=f"A, R = {r:.2f}")
        sel = data["R"] == np.unique(data["R"])[0]
        ax.plot(data["q"][sel], data["delta_B"][sel], "k--", label="B")
        ax.set_xlabel("inventory q [M]")
        ax.set_ylabel(f"bid offset, z = {spec.size:g} M [bp]")
        ax.legend(fontsize="small")
    elif f == "pnl_R":
        ax.plot(data["R"], data["Pi_A"], label="Pi_A(0, R)")
        ax.set_xlabel("score R")
        ax.set_ylabel("tier-A edge capture [bp*M/day]")
        ax2 = ax.twinx()
        ax2.plot(data["R"], data["G"], "--", color="grey", label="G(R)")
        ax2.set_ylabel("gate G(R)")
    elif f == "pnl_drift":
        sc = ax.scatter(data["drift"], data["Pi_A"], c=data["R"], s=8, cmap="coolwarm")
        fig.colorbar(sc, ax=ax, label="score R")
        ax.axvline(0.0, color="grey", linewidth=0.8)
        ax.set_xlabel("score drift dR/dt [1/day]")
        ax.set_ylabel("Pi_A(0, R) [bp*M/day]")
    elif f == "drift_portrait":
        ax.plot(data["R"], data["drift"], label="feedback")
        if "drift_nofeedback" in data:
            ax.plot(data["R"], data["drift_nofeedback"], "--", label="no feedback")
        ax.axhline(0.0, color="grey", linewidth=0.8)
        if "fixed_points" in spec.inputs:
            _, fp = _load(spec, "fixed_points")
            for r, s in zip(fp["R"], fp["stability"]):
                ax.plot([r], [0.0], "o", mfc="k" if s == "stable" else "w", mec="k")
        ax.set_xlabel("score R")
        ax.set_ylabel("dR/dt [1/day]")
        ax.legend()
    elif f == "relaxation":
        for r0 in np.unique(data["R0"]):
            sel = data["R0"] == r0
            ax.plot(data["t"][sel], data["R"][sel], linewidth=1.0)
        ax.set_xlabel("time [day]")
        ax.set_ylabel("score R")
    elif f == "bifurcation":
        ok = data["stability"] != "failed"
        for s, style in (("stable", "ko"), ("unstable", "wo")):
            sel = ok & (data["stability"] == s)
            ax.plot(data["inv_beta"][sel], data["R"][sel], style, mec="k", label=s)
        if spec.log_x:
            ax.set_xscale("log")
        ax.set_xlabel("1 / beta")
        ax.set_ylabel("fixed point R*")
        ax.legend()
    if spec.xlim:
        ax.set_xlim(*spec.xlim)
    if spec.ylim:
        ax.set_ylim(*spec.ylim)
    fig.tight_layout()
    import matplotlib

    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": "rfqgate", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def render(spec: FigureSpec) -> list[Path]:
    """Write ``<figure>.csv`` (and ``<figure>.svg``) into ``spec.out_dir``; returns the paths."""
    data = DATA[spec.figure](spec)
    n = {len(v) for v in data.values()}
    if len(n) != 1 or 0 in n:
        raise ReportError(f"{spec.figure}: empty or ragged dataset")
    svg = _plot(spec, data) if spec.svg else None
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"figure": spec.figure, **spec.meta}
    outs = [write_table(spec.out_dir / f"{spec.figure}.csv", data, meta)]
    if svg is not None:
        path = spec.out_dir / f"{spec.figure}.svg"
        fd, tmp = tempfile.mkstemp(dir=spec.out_dir, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(svg)
        os.replace(tmp, path)
        outs.append(path)
    return outs
