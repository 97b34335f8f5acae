"""Synthetic panels with known ground truth.

Outcomes follow a low-rank factor structure plus optional covariate
effects, a treatment effect applied after each treated unit's adoption
period, and i.i.d. noise:

    Y[i, t] = base + loadings[i] . factors[:, t] + x[i, t] . beta
              + delta[i, t] + eps[i, t]

Every unit draws from its own seeded generator stream, so enlarging the
panel never perturbs the series of existing units, and the same config
reproduces the same panel bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .panel import PanelDataset

__all__ = [
    "FactorSpec",
    "EffectShape",
    "SimConfig",
    "GroundTruth",
    "default_factors",
    "effect_profile",
    "generate",
]

_BASE_LEVEL = 0.5

_FACTOR_KINDS = ("seasonal", "linear_trend", "smooth_random_walk")
_EFFECT_KINDS = ("none", "step", "decaying", "permanent_shift",
                 "cycle_damping")
_COVARIATE_PROCESSES = ("iid_normal", "ar1")


@dataclass(frozen=True)
class FactorSpec:
    """One latent factor series.

    kind:
        ``"seasonal"`` — a sine wave with the given integer ``period``
        and ``phase`` offset (in periods);
        ``"linear_trend"`` — a centered ramp spanning
        ``[-amplitude, +amplitude]``;
        ``"smooth_random_walk"`` — a moving-average-smoothed random
        walk rescaled to standard deviation ``amplitude``.
    """

    kind: str = "seasonal"
    period: int = 23
    phase: float = 0.0
    amplitude: float = 0.12

    def validate(self, name: str) -> None:
        if self.kind not in _FACTOR_KINDS:
            raise ConfigError(f"{name}.kind must be one of {_FACTOR_KINDS}")
        if self.kind == "seasonal" and self.period < 2:
            raise ConfigError(f"{name}.period must be at least 2")
        if not np.isfinite(self.amplitude):
            raise ConfigError(f"{name}.amplitude must be finite")


@dataclass(frozen=True)
class EffectShape:
    """Treatment effect trajectory in event time.

    kind:
        ``"none"`` — no effect;
        ``"step"`` / ``"permanent_shift"`` — constant ``level`` from
        event time 0 on;
        ``"decaying"`` — ``level * 2**(-e / half_life)`` at event time
        ``e >= 0``;
        ``"cycle_damping"`` — shrink the unit's seasonal component by
        ``fraction`` from event time 0 on.
    """

    kind: str = "none"
    level: float = 0.0
    half_life: float = 10.0
    fraction: float = 0.0

    def validate(self) -> None:
        if self.kind not in _EFFECT_KINDS:
            raise ConfigError(f"effect.kind must be one of {_EFFECT_KINDS}")
        if not np.isfinite(self.level):
            raise ConfigError("effect.level must be finite")
        if self.kind == "decaying" and self.half_life <= 0:
            raise ConfigError("effect.half_life must be positive")
        if self.kind == "cycle_damping" and not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("effect.fraction must be in [0, 1]")


@dataclass(frozen=True)
class SimConfig:
    """Panel generator settings.

    ``treatment_window = (earliest, latest)`` bounds the adoption
    periods drawn uniformly per treated unit (period indices run from 0
    to ``n_periods - 1``).  ``condition_link`` in ``[-1, 1]`` ties each
    treated unit's effect magnitude to its condition draw ``c ~ U(0,1)``
    through the multiplier ``1 + condition_link * (2c - 1)``; zero means
    no association.
    """

    n_control: int = 40
    n_treated: int = 20
    n_periods: int = 120
    rank: int = 1
    factors: tuple[FactorSpec, ...] = (FactorSpec(),)
    loading_scale: float = 0.2
    loading_shift_treated: float = 0.0
    beta_true: tuple[float, ...] = ()
    covariate_process: str = "iid_normal"
    noise_sd: float = 0.02
    missing_rate: float = 0.0
    effect: EffectShape = field(default_factory=EffectShape)
    treatment_window: tuple[int, int] = (60, 80)
    condition_link: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_control < 1:
            raise ConfigError("n_control must be at least 1")
        if self.n_treated < 0:
            raise ConfigError("n_treated must be non-negative")
        if self.n_periods < 2:
            raise ConfigError("n_periods must be at least 2")
        if self.rank < 1:
            raise ConfigError("rank must be at least 1")
        if len(self.factors) != self.rank:
            raise ConfigError(
                f"factors must list exactly rank={self.rank} specs, "
                f"got {len(self.factors)}"
            )
        for k, f in enumerate(self.factors):
            f.validate(f"factors[{k}]")
        if not np.isfinite(self.loading_scale) or self.loading_scale < 0:
            raise ConfigError("loading_scale must be non-negative")
        if not np.isfinite(self.loading_shift_treated):
            raise ConfigError("loading_shift_treated must be finite")
        if self.covariate_process not in _COVARIATE_PROCESSES:
            raise ConfigError(
                f"covariate_process must be one of {_COVARIATE_PROCESSES}"
            )
        if not np.isfinite(self.noise_sd) or self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must be in [0, 1)")
        self.effect.validate()
        lo, hi = self.treatment_window
        if self.n_treated > 0:
            if not (1 <= lo <= hi <= self.n_periods - 1):
                raise ConfigError(
                    "treatment_window must satisfy "
                    "1 <= earliest <= latest <= n_periods - 1"
                )
        if not -1.0 <= self.condition_link <= 1.0:
            raise ConfigError("condition_link must be in [-1, 1]")

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["factors"] = [dataclasses.asdict(f) for f in self.factors]
        d["effect"] = dataclasses.asdict(self.effect)
        d["beta_true"] = list(self.beta_true)
        d["treatment_window"] = list(self.treatment_window)
        return d


@dataclass(frozen=True)
class GroundTruth:
    """True components behind a generated panel.

    ``L_true`` is the noiseless untreated surface (base level plus
    factor structure, excluding covariate effects); ``delta_true`` is
    the cell-level treatment effect (zero off the treated-post block).
    """

    L_true: np.ndarray
    delta_true: np.ndarray
    beta_true: np.ndarray
    factors: np.ndarray
    loadings: np.ndarray
    condition: np.ndarray
    treatment_time: np.ndarray
    unit_ids: tuple[str, ...]
    times: np.ndarray
    seed: int

    def att_event(self, window: tuple[int, int]
                  ) -> tuple[np.ndarray, np.ndarray]:
        """True average effect by event time over treated units
        (calendar-feasible cells only)."""
        pre, post = int(window[0]), int(window[1])
        ev = np.arange(-pre, post + 1)
        treated = np.flatnonzero(~np.isnan(self.treatment_time))
        att = np.full(ev.size, np.nan)
        T = self.times.size
        for c, e in enumerate(ev):
            vals = []
            for i in treated:
                j = int(self.treatment_time[i]) - int(self.times[0]) + int(e)
                if 0 <= j < T:
                    vals.append(self.delta_true[i, j])
            if vals:
                att[c] = float(np.mean(vals))
        return ev, att

    def to_json_dict(self) -> dict:
        def grid(a: np.ndarray) -> list:
            return [[None if np.isnan(v) else float(v) for v in row]
                    for row in a]

        return {
            "seed": int(self.seed),
            "unit_ids": list(self.unit_ids),
            "times": [int(t) for t in self.times],
            "L_true": grid(self.L_true),
            "delta_true": grid(self.delta_true),
            "beta_true": [float(b) for b in self.beta_true],
            "factors": grid(self.factors),
            "loadings": grid(self.loadings),
            "condition": [None if np.isnan(c) else float(c)
                          for c in self.condition],
            "treatment_time": [None if np.isnan(t) else int(t)
                               for t in self.treatment_time],
        }


def default_factors(rank: int) -> tuple[FactorSpec, ...]:
    """A sensible factor menu when none is spelled out: a seasonal
    cycle, a linear trend, a smooth random walk, then phase-shifted
    seasonal cycles to fill any remaining rank."""
    if rank < 1:
        raise ConfigError("rank must be at least 1")
    menu = [
        FactorSpec("seasonal", period=23, amplitude=0.12),
        FactorSpec("linear_trend", amplitude=0.1),
        FactorSpec("smooth_random_walk", amplitude=0.1),
    ]
    out = list(menu[:rank])
    k = len(out)
    while len(out) < rank:
        out.append(FactorSpec("seasonal", period=23,
                              phase=5.0 * (k - 2), amplitude=0.08))
        k += 1
    return tuple(out)


def effect_profile(effect: EffectShape, event_times: np.ndarray,
                   seasonal: np.ndarray | None = None) -> np.ndarray:
    """Evaluate an effect shape on a vector of event times.

    Pre-adoption event times always map to zero.  For
    ``"cycle_damping"`` the caller must supply the unit's seasonal
    component aligned to ``event_times``; the damped effect is
    ``-fraction * seasonal`` after adoption.
    """
    effect.validate()
    ev = np.asarray(event_times, dtype=float)
    post = ev >= 0
    out = np.zeros(ev.shape)
    if effect.kind == "none":
        return out
    if effect.kind in ("step", "permanent_shift"):
        out[post] = effect.level
        return out
    if effect.kind == "decaying":
        out[post] = effect.level * 2.0 ** (-ev[post] / effect.half_life)
        return out
    # cycle_damping
    if seasonal is None:
        raise ConfigError(
            "cycle_damping profiles need the unit's seasonal component"
        )
    seasonal = np.asarray(seasonal, dtype=float)
    if seasonal.shape != ev.shape:
        raise ConfigError("seasonal series must align with event_times")
    out[post] = -effect.fraction * seasonal[post]
    return out


def _factor_series(spec: FactorSpec, T: int, rng: np.random.Generator
                   ) -> np.ndarray:
    t = np.arange(T, dtype=float)
    if spec.kind == "seasonal":
        return spec.amplitude * np.sin(
            2.0 * np.pi * (t + spec.phase) / spec.period
        )
    if spec.kind == "linear_trend":
        if T == 1:
            return np.zeros(1)
        return spec.amplitude * (2.0 * t / (T - 1) - 1.0)
    # smooth_random_walk
    walk = np.cumsum(rng.normal(0.0, 1.0, size=T))
    w = min(9, T)
    kernel = np.ones(w) / w
    padded = np.concatenate([np.full(w - 1, walk[0]), walk,
                             np.full(w - 1, walk[-1])])
    smooth = np.convolve(padded, kernel, mode="same")[w - 1:w - 1 + T]
    smooth = smooth - smooth.mean()
    sd = smooth.std()
    if sd > 0:
        smooth = smooth * (spec.amplitude / sd)
    return smooth


def _unit_rng(seed: int, unit_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, unit_index])


def _factor_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, k])


def generate(config: SimConfig) -> tuple[PanelDataset, GroundTruth]:
    """Draw one synthetic panel and its ground truth.

    Per-unit draws come from ``default_rng([seed, 2, unit_index])`` in
    a fixed order (loadings, covariates, noise, missingness, then
    adoption period and condition for treated units); factor series use
    ``default_rng([seed, 1, k])``.
    """
    config.validate()
    T = config.n_periods
    N = config.n_control + config.n_treated
    times = np.arange(T)
    K = len(config.beta_true)
    beta = np.array(config.beta_true, dtype=float)

    F = np.vstack([
        _factor_series(spec, T, _factor_rng(config.seed, k))
        for k, spec in enumerate(config.factors)
    ])

    seasonal_idx = [k for k, s in enumerate(config.factors)
                    if s.kind == "seasonal"]

    loadings = np.zeros((N, config.rank))
    covariates = np.zeros((N, T, K)) if K else None
    noise = np.zeros((N, T))
    missing = np.zeros((N, T), dtype=bool)
    treatment_time = np.full(N, np.nan)
    condition = np.full(N, np.nan)

    lo, hi = config.treatment_window
    for i in range(N):
        rng = _unit_rng(config.seed, i)
        is_treated = i >= config.n_control
        center = 1.0 + (config.loading_shift_treated if is_treated else 0.0)
        loadings[i] = rng.normal(center, config.loading_scale,
                                 size=config.rank)
        if K:
            if config.covariate_process == "iid_normal":
                covariates[i] = rng.normal(0.0, 1.0, size=(T, K))
            else:  # ar1
                innov = rng.normal(0.0, 0.6, size=(T, K))
                x = np.zeros((T, K))
                x[0] = innov[0]
                for t in range(1, T):
                    x[t] = 0.8 * x[t - 1] + innov[t]
                covariates[i] = x
        noise[i] = rng.normal(0.0, config.noise_sd, size=T)
        missing[i] = rng.uniform(size=T) < config.missing_rate
        if is_treated:
            treatment_time[i] = int(rng.integers(lo, hi + 1))
            condition[i] = rng.uniform()

    L_true = _BASE_LEVEL + loadings @ F

    delta_true = np.zeros((N, T))
    for i in range(config.n_control, N):
        t0 = int(treatment_time[i])
        mult = 1.0 + config.condition_link * (2.0 * condition[i] - 1.0)
        ev = times - t0
        if config.effect.kind == "cycle_damping":
            seasonal = loadings[i, seasonal_idx] @ F[seasonal_idx] \
                if seasonal_idx else np.zeros(T)
            damp = min(1.0, max(0.0, config.effect.fraction * mult))
            shape = dataclasses.replace(config.effect, fraction=damp)
            delta_true[i] = effect_profile(shape, ev, seasonal=seasonal)
        else:
            shape = dataclasses.replace(config.effect,
                                        level=config.effect.level * mult)
            delta_true[i] = effect_profile(shape, ev)

    outcome = L_true + delta_true + noise
    if covariates is not None:
        outcome = outcome + covariates @ beta
    outcome = np.where(missing, np.nan, outcome)

    # Naive comparison series attached to treated units: the
    # cross-sectional mean of observed control outcomes per period.
    baseline = None
    if config.n_treated:
        ctl = outcome[:config.n_control]
        ctl_obs = ~np.isnan(ctl)
        cnt = ctl_obs.sum(axis=0)
        total = np.where(ctl_obs, ctl, 0.0).sum(axis=0)
        control_mean = np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)
        baseline = np.full((N, T), np.nan)
        baseline[config.n_control:] = control_mean

    width_c = max(4, len(str(max(config.n_control - 1, 0))))
    width_t = max(4, len(str(max(config.n_treated - 1, 0))))
    unit_ids = tuple(
        [f"c{i:0{width_c}d}" for i in range(config.n_control)]
        + [f"t{i:0{width_t}d}" for i in range(config.n_treated)]
    )

    panel = PanelDataset(
        unit_ids=unit_ids,
        times=times,
        outcome=outcome,
        covariates=covariates,
        covariate_names=tuple(f"cov_x{k}" for k in range(K)),
        treatment_time=treatment_time,
        condition_value=condition,
        baseline=baseline,
    )
    truth = GroundTruth(
        L_true=L_true,
        delta_true=delta_true,
        beta_true=beta,
        factors=F,
        loadings=loadings,
        condition=condition,
        treatment_time=treatment_time,
        unit_ids=unit_ids,
        times=times,
        seed=config.seed,
    )
    return panel, truth
