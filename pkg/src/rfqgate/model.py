"""Model primitives: size ladder, tier intensities, win curves, gate, score, risk.

Units are fixed throughout the package: offsets and volatility in bp, sizes
and inventory in M notional, time in days, value and PnL in bp*M.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

SCHEMA_VERSION = 1
TIERS = ("A", "B")


class ConfigError(ValueError):
    """Invalid model or grid configuration."""


def _vec(values, name: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in values)
    except TypeError as exc:
        raise ConfigError(f"{name}: expected a list of numbers") from exc
    if not all(np.isfinite(out)):
        raise ConfigError(f"{name}: entries must be finite")
    return out


@dataclass(frozen=True)
class SizeLadder:
    sizes: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)

    def __post_init__(self):
        sizes = _vec(self.sizes, "ladder.sizes")
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 1:
            raise ConfigError("ladder.sizes: need at least one size")
        if sizes[0] <= 0 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("ladder.sizes: must be positive and strictly increasing")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def z_max(self) -> float:
        return self.sizes[-1]


@dataclass(frozen=True)
class TierIntensities:
    """Per-size, per-side baseline RFQ intensities (events/day)."""

    lambda_A: tuple[float, ...] = (0.0, 0.0, 0.0, 50.0)
    lambda_B: tuple[float, ...] = (1000.0, 800.0, 600.0, 400.0)

    def __post_init__(self):
        a = _vec(self.lambda_A, "intensities.lambda_A")
        b = _vec(self.lambda_B, "intensities.lambda_B")
        object.__setattr__(self, "lambda_A", a)
        object.__setattr__(self, "lambda_B", b)
        if min(a + b) < 0:
            raise ConfigError("intensities: entries must be >= 0")
        if len(a) != len(b):
            raise ConfigError("intensities: lambda_A and lambda_B lengths differ")

    def tier(self, tier: str) -> tuple[float, ...]:
        return self.lambda_A if tier == "A" else self.lambda_B


@dataclass(frozen=True)
class WinCurveParams:
    """Logistic win curve p(delta) = 1 / (1 + exp(kappa (delta - delta_bar)))."""

    kappa: tuple[float, ...] = (5.0, 4.5, 4.0, 3.5)  # 1/bp
    delta_bar: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6)  # bp

    def __post_init__(self):
        k = _vec(self.kappa, "win.kappa")
        d = _vec(self.delta_bar, "win.delta_bar")
        object.__setattr__(self, "kappa", k)
        object.__setattr__(self, "delta_bar", d)
        if min(k) <= 0:
            raise ConfigError("win.kappa: must be > 0")
        if len(k) != len(d):
            raise ConfigError("win: kappa and delta_bar lengths differ")


@dataclass(frozen=True)
class GateParams:
    g_min: float = 0.2
    g_max: float = 1.0
    r0: float = 0.6
    beta: float = 40.0

    def __post_init__(self):
        if not self.g_min >= 0:
            raise ConfigError("gate.g_min: must be >= 0")
        if not self.g_max >= self.g_min:
            raise ConfigError("gate.g_max: must be >= g_min")
        if not 0 < self.r0 < 1:
            raise ConfigError("gate.r0: must lie in (0, 1)")
        if not self.beta >= 0:
            raise ConfigError("gate.beta: must be >= 0")

    @property
    def delta_g(self) -> float:
        return self.g_max - self.g_min


@dataclass(frozen=True)
class ScoreParams:
    alpha: float = 0.01
    size_weighted: bool = False

    def __post_init__(self):
        # alpha = 0 is allowed: it is the no-feedback reference model.
        if not 0 <= self.alpha < 1:
            raise ConfigError("score.alpha: must lie in [0, 1)")


@dataclass(frozen=True)
class RiskParams:
    sigma: float = 100.0  # bp/sqrt(day)
    gamma: float = 1e-3  # 1/(bp*M)
    eta: float = 1.0  # bp/M, terminal penalty
    theta: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2)  # bp, slippage
    rho: float = 0.1  # 1/day, block discount

    def __post_init__(self):
        theta = _vec(self.theta, "risk.theta")
        object.__setattr__(self, "theta", theta)
        if not self.sigma > 0:
            raise ConfigError("risk.sigma: must be > 0")
        if not self.gamma >= 0:
            raise ConfigError("risk.gamma: must be >= 0")
        if not self.eta >= 0:
            raise ConfigError("risk.eta: must be >= 0")
        if not self.rho >= 0:
            raise ConfigError("risk.rho: must be >= 0")
        if min(theta) < 0:
            raise ConfigError("risk.theta: must be >= 0")


_SECTIONS = {
    "ladder": SizeLadder,
    "intensities": TierIntensities,
    "win_A": WinCurveParams,
    "win_B": WinCurveParams,
    "gate": GateParams,
    "score": ScoreParams,
    "risk": RiskParams,
}


@dataclass(frozen=True)
class ModelParams:
    ladder: SizeLadder = field(default_factory=SizeLadder)
    intensities: TierIntensities = field(default_factory=TierIntensities)
    win_A: WinCurveParams = field(default_factory=WinCurveParams)
    win_B: WinCurveParams = field(default_factory=WinCurveParams)
    gate: GateParams = field(default_factory=GateParams)
    score: ScoreParams = field(default_factory=ScoreParams)
    risk: RiskParams = field(default_factory=RiskParams)

    def __post_init__(self):
        K = self.ladder.K
        vectors = {
            "intensities.lambda_A": self.intensities.lambda_A,
            "intensities.lambda_B": self.intensities.lambda_B,
            "win_A.kappa": self.win_A.kappa,
            "win_B.kappa": self.win_B.kappa,
            "risk.theta": self.risk.theta,
        }
        for name, vec in vectors.items():
            if len(vec) != K:
                raise ConfigError(f"{name}: length {len(vec)} != ladder size count {K}")

    @property
    def K(self) -> int:
        return self.ladder.K

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.ladder.sizes)

    def curve(self, tier: str) -> WinCurveParams:
        return self.win_A if tier == "A" else self.win_B

    def updated(self, overrides: Mapping[str, Any]) -> "ModelParams":
        """Return a copy with dotted-key overrides, e.g. ``{"score.alpha": 0.0}``."""
        sections = {name: getattr(self, name) for name in _SECTIONS}
        for key, value in overrides.items():
            section, _, attr = key.partition(".")
            if section not in sections or attr not in {f.name for f in fields(sections[section])}:
                raise ConfigError(f"unknown parameter {key!r}")
            sections[section] = replace(sections[section], **{attr: value})
        return ModelParams(**sections)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelParams":
        """Build from a config mapping.

        Configs must give tier A some flow (otherwise the score never moves);
        direct construction allows the degenerate no-flow cases used in analysis.
        """
        validate_config(data)
        kwargs = {}
        for name, section in _SECTIONS.items():
            if name in data:
                kwargs[name] = section(**data[name])
        out = cls(**kwargs)
        if max(out.intensities.lambda_A) <= 0:
            raise ConfigError("intensities.lambda_A: at least one entry must be > 0")
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _schema() -> dict:
    text = resources.files("rfqgate").joinpath("data/params.schema.json").read_text()
    return json.loads(text)


def validate_config(data: Mapping[str, Any]) -> None:
    """Structural check against the shipped JSON schema; unknown keys are rejected."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}")


def default_params() -> ModelParams:
    text = resources.files("rfqgate").joinpath("data/default_params.json").read_text()
    return ModelParams.from_dict(json.loads(text))


def load_params(path: str | Path) -> ModelParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ModelParams.from_dict(data)


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


# elementary functions


def _check_k(curve: WinCurveParams, k: int) -> None:
    if not 0 <= k < len(curve.kappa):
        raise IndexError(f"size index {k} out of range for K={len(curve.kappa)}")


def win_prob(curve: WinCurveParams, k: int, delta):
    _check_k(curve, k)
    return expit(-curve.kappa[k] * (np.asarray(delta, dtype=float) - curve.delta_bar[k]))


def win_prob_inverse(curve: WinCurveParams, k: int, y):
    """Offset (bp) at which the size-k curve wins with probability ``y``."""
    _check_k(curve, k)
    y = np.asarray(y, dtype=float)
    if np.any(~((y > 0) & (y < 1))):
        raise ValueError("win probability must lie strictly inside (0, 1)")
    return curve.delta_bar[k] + (np.log1p(-y) - np.log(y)) / curve.kappa[k]


def gate_u(gp: GateParams, R):
    R = np.clip(np.asarray(R, dtype=float), 0.0, 1.0)
    return expit(gp.beta * (R - gp.r0))


def gate(gp: GateParams, R):
    return gp.g_min + gp.delta_g * gate_u(gp, R)


def gate_deriv(gp: GateParams, R):
    u = gate_u(gp, R)
    return gp.beta * gp.delta_g * u * (1.0 - u)


def ema_update(sp: ScoreParams, R, win: bool, k: int = 0, ladder: SizeLadder | None = None):
    """Score after one tier-A outcome: ``(1 - alpha) R + alpha w``."""
    R = np.clip(np.asarray(R, dtype=float), 0.0, 1.0)
    w = 0.0
    if win:
        w = 1.0
        if sp.size_weighted:
            if ladder is None:
                raise ValueError("size-weighted updates need the ladder")
            w = ladder.sizes[k] / ladder.z_max
    out = (1.0 - sp.alpha) * R + sp.alpha * w
    return np.clip(out, 0.0, 1.0)


def score_branches(sp: ScoreParams, R, k: int = 0, ladder: SizeLadder | None = None):
    """(R_+, R_-) pair for a tier-A request of size index ``k``."""
    return ema_update(sp, R, True, k, ladder), ema_update(sp, R, False, k, ladder)


def half_life_trades(alpha: float) -> int:
    """Consecutive losses needed to halve the score."""
    return int(np.ceil(np.log(0.5) / np.log1p(-alpha)))
