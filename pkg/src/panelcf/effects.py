"""Event-time treatment effects from a fitted counterfactual.

The unit-level effect is observed minus predicted-untreated outcome.
Averages are taken over treated units at each event time (periods since
adoption), so staggered adopters line up on a common axis.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .completion import (
    CompletionModel,
    FitConfig,
    PanelFit,
    complete,
    cross_validate,
    lambda_grid,
    residualize_covariates,
)
from .errors import ConfigError, DataError, EstimationError, PanelcfError
from .panel import PanelDataset, _fmt

__all__ = [
    "EffectSeries",
    "StrataSpec",
    "CattResult",
    "CumulativeResult",
    "BootstrapResult",
    "estimate_effects",
    "stratify",
    "catt",
    "cumulative",
    "split_eras",
    "bootstrap_se",
    "write_att_csv",
    "write_unit_effects_csv",
    "write_catt_csv",
    "write_cumulative_csv",
]

# Denominators smaller than this yield NaN percent effects instead of
# blowing up.
_PCT_EPS = 1e-12


@dataclass(frozen=True)
class EffectSeries:
    """Per-unit and averaged effects on the event-time axis.

    ``delta[i, j] = observed[i, j] - counterfactual[i, j]`` for treated
    unit ``i`` at ``event_times[j]``; NaN where the outcome is missing
    or the calendar runs out.  ``att`` averages the non-missing deltas
    per event time (NaN when no unit contributes), ``n_units`` counts
    the contributors.  ``att_pct`` scales by the mean counterfactual at
    the same event time; ``att_pct_pre`` scales by the mean observed
    pre-treatment level.  ``se`` / ``ci_lo`` / ``ci_hi`` stay None until
    attached by :func:`bootstrap_se` via :meth:`with_uncertainty`.
    """

    unit_ids: tuple[str, ...]
    event_times: np.ndarray
    observed: np.ndarray
    counterfactual: np.ndarray
    delta: np.ndarray
    att: np.ndarray
    n_units: np.ndarray
    att_pct: np.ndarray
    att_pct_pre: np.ndarray
    se: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None

    def with_uncertainty(self, boot: "BootstrapResult") -> "EffectSeries":
        if boot.se.shape != self.att.shape:
            raise DataError("bootstrap result does not match this window")
        return replace(self, se=boot.se, ci_lo=boot.ci_lo, ci_hi=boot.ci_hi)


def _event_grids(outcome_rows: np.ndarray, cf_rows: np.ndarray,
                 t0_cols: np.ndarray, window: tuple[int, int]
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Re-index treated-row calendar grids to event time."""
    pre, post = int(window[0]), int(window[1])
    if pre < 0 or post < 0:
        raise ConfigError("window lengths must be non-negative")
    ev = np.arange(-pre, post + 1)
    n, T = outcome_rows.shape
    obs = np.full((n, ev.size), np.nan)
    cfe = np.full((n, ev.size), np.nan)
    for r in range(n):
        j = t0_cols[r] + ev
        ok = (j >= 0) & (j < T)
        obs[r, ok] = outcome_rows[r, j[ok]]
        cfe[r, ok] = cf_rows[r, j[ok]]
    return ev, obs, cfe


def _column_mean(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and count per column over non-NaN entries (NaN when empty)."""
    good = ~np.isnan(values)
    cnt = good.sum(axis=0)
    total = np.where(good, values, 0.0).sum(axis=0)
    mean = np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)
    return mean, cnt.astype(int)


def _series_from_grids(unit_ids, ev, obs, cfe) -> EffectSeries:
    delta = obs - cfe
    att, n_units = _column_mean(delta)

    # Percent scale 1: against the counterfactual level at the same
    # event time, using exactly the units that contribute to att.
    cf_for_att = np.where(~np.isnan(delta), cfe, np.nan)
    cf_mean, _ = _column_mean(cf_for_att)
    with np.errstate(divide="ignore", invalid="ignore"):
        att_pct = np.where(np.abs(cf_mean) > _PCT_EPS, att / cf_mean, np.nan)

    # Percent scale 2: against the observed pre-adoption level pooled
    # over units and pre-event times.
    pre_cells = obs[:, ev < 0]
    pre_vals = pre_cells[~np.isnan(pre_cells)]
    if pre_vals.size and abs(pre_vals.mean()) > _PCT_EPS:
        att_pct_pre = att / pre_vals.mean()
    else:
        att_pct_pre = np.full_like(att, np.nan)

    return EffectSeries(
        unit_ids=tuple(unit_ids),
        event_times=ev,
        observed=obs,
        counterfactual=cfe,
        delta=delta,
        att=att,
        n_units=n_units,
        att_pct=att_pct,
        att_pct_pre=att_pct_pre,
    )


def _counterfactual_grid(panel: PanelDataset, fit) -> np.ndarray:
    if isinstance(fit, PanelFit):
        return fit.counterfactual
    if isinstance(fit, CompletionModel):
        return fit.predict(panel.covariates)
    grid = np.asarray(fit, dtype=float)
    if grid.shape != panel.outcome.shape:
        raise DataError("counterfactual grid shape does not match the panel")
    return grid


def estimate_effects(panel: PanelDataset, fit,
                     window: tuple[int, int]) -> EffectSeries:
    """Event-time effects for every treated unit.

    ``fit`` may be a :class:`PanelFit`, a :class:`CompletionModel`, or
    a precomputed counterfactual grid of shape ``(N, T)``.
    ``window = (pre, post)`` spans event times ``-pre .. post``.

    Raises :class:`EstimationError` when no treated unit has a single
    observed outcome at event times >= 0 inside the window.
    """
    if panel.n_treated == 0:
        raise DataError("panel has no treated units")
    cf = _counterfactual_grid(panel, fit)
    tr = panel.treated_indices
    t0_cols = np.array([panel.time_index(int(panel.treatment_time[i]))
                        for i in tr])
    ev, obs, cfe = _event_grids(panel.outcome[tr], cf[tr], t0_cols, window)
    series = _series_from_grids([panel.unit_ids[i] for i in tr], ev, obs, cfe)
    post = ev >= 0
    if not post.any() or series.n_units[post].sum() == 0:
        raise EstimationError(
            "no observed post-adoption outcomes fall inside the window; "
            "widen it or check the treatment dates"
        )
    return series


# -- strata -----------------------------------------------------------------


@dataclass(frozen=True)
class StrataSpec:
    """Assignment of treated units to condition-value groups.

    Groups are numbered 1 (lowest condition values) through
    ``group_count``.  ``breakpoints`` holds the quantile cut points;
    values exactly on a cut point fall in the lower group.
    """

    group_count: int
    unit_ids: tuple[str, ...]
    labels: np.ndarray
    breakpoints: np.ndarray

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.group_count + 1)[1:]

    def to_json_dict(self) -> dict:
        return {
            "group_count": int(self.group_count),
            "unit_ids": list(self.unit_ids),
            "labels": [int(v) for v in self.labels],
            "breakpoints": [float(b) for b in self.breakpoints],
        }


def stratify(panel: PanelDataset, groups: int = 4) -> StrataSpec:
    """Split treated units into quantile groups of their condition value.

    With all-distinct condition values the group sizes differ by at
    most one; tied values share a group (the lower one).
    """
    if groups < 1:
        raise ConfigError("groups must be at least 1")
    tr = panel.treated_indices
    if tr.size == 0:
        raise DataError("panel has no treated units to stratify")
    if groups > tr.size:
        raise ConfigError(
            f"cannot form {groups} groups from {tr.size} treated units"
        )
    vals = panel.condition_value[tr]
    missing = np.isnan(vals)
    if missing.any():
        bad = [panel.unit_ids[i] for i in tr[missing]]
        raise DataError(
            f"treated units without a condition value: {bad}"
        )
    if groups == 1:
        return StrataSpec(
            group_count=1,
            unit_ids=tuple(panel.unit_ids[i] for i in tr),
            labels=np.ones(tr.size, dtype=int),
            breakpoints=np.zeros(0),
        )
    qs = np.arange(1, groups) / groups
    breakpoints = np.quantile(vals, qs)
    labels = 1 + (vals[:, None] > breakpoints[None, :]).sum(axis=1)
    return StrataSpec(
        group_count=int(groups),
        unit_ids=tuple(panel.unit_ids[i] for i in tr),
        labels=labels.astype(int),
        breakpoints=breakpoints,
    )


@dataclass(frozen=True)
class CattResult:
    """Average effects by condition group and event time.

    ``att[g-1, j]`` is the group-``g`` average effect at
    ``event_times[j]``; NaN where the group contributes no observed
    cell (absent, not zero).
    """

    group_count: int
    event_times: np.ndarray
    att: np.ndarray
    n_units: np.ndarray
    group_sizes: tuple[int, ...]
    breakpoints: np.ndarray

    def to_json_dict(self) -> dict:
        def col(a):
            return [[None if (isinstance(v, float) and math.isnan(v))
                     else float(v) for v in row] for row in a.tolist()]

        return {
            "group_count": int(self.group_count),
            "event_times": [int(e) for e in self.event_times],
            "att": col(self.att),
            "n_units": [[int(v) for v in row] for row in self.n_units],
            "group_sizes": [int(s) for s in self.group_sizes],
            "breakpoints": [float(b) for b in self.breakpoints],
        }


def catt(effects: EffectSeries, strata: StrataSpec) -> CattResult:
    """Stratified average effects.

    The count-weighted average of the group effects reproduces the
    overall ``att`` at every event time where anything is observed.
    """
    if set(strata.unit_ids) != set(effects.unit_ids):
        raise DataError(
            "strata and effects cover different treated units"
        )
    label_of = dict(zip(strata.unit_ids, strata.labels))
    labels = np.array([label_of[u] for u in effects.unit_ids])
    G = strata.group_count
    E = effects.event_times.size
    att = np.full((G, E), np.nan)
    n_units = np.zeros((G, E), dtype=int)
    for g in range(1, G + 1):
        rows = labels == g
        if rows.any():
            att[g - 1], n_units[g - 1] = _column_mean(effects.delta[rows])
    return CattResult(
        group_count=G,
        event_times=effects.event_times,
        att=att,
        n_units=n_units,
        group_sizes=tuple(int((labels == g).sum()) for g in range(1, G + 1)),
        breakpoints=strata.breakpoints,
    )


@dataclass(frozen=True)
class CumulativeResult:
    """Running sum of the average effect from a starting event time.

    Event times with no contributing units are skipped (added as zero)
    and flagged in ``had_gap`` from that point on.
    """

    event_times: np.ndarray
    cum_att: np.ndarray
    had_gap: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "event_times": [int(e) for e in self.event_times],
            "cum_att": [None if math.isnan(v) else float(v)
                        for v in self.cum_att.tolist()],
            "had_gap": [bool(v) for v in self.had_gap],
        }


def cumulative(effects: EffectSeries, from_event: int = 0
               ) -> CumulativeResult:
    """Cumulative average effect starting at ``from_event``."""
    ev = effects.event_times
    if from_event < ev[0] or from_event > ev[-1]:
        raise ConfigError(
            f"from_event {from_event} is outside the window "
            f"[{int(ev[0])}, {int(ev[-1])}]"
        )
    sel = ev >= from_event
    att = effects.att[sel]
    missing = np.isnan(att)
    cum = np.cumsum(np.where(missing, 0.0, att))
    return CumulativeResult(
        event_times=ev[sel],
        cum_att=cum,
        had_gap=np.cumsum(missing.astype(int)) > 0,
    )


def split_eras(panel: PanelDataset, cut_time: int
               ) -> tuple[PanelDataset, PanelDataset]:
    """Split treated units into early adopters (before ``cut_time``)
    and late adopters (at or after).  Both panels keep every control
    unit and the full calendar."""
    tmin, tmax = int(panel.times[0]), int(panel.times[-1])
    if not tmin < cut_time <= tmax:
        raise ConfigError(
            f"cut_time {cut_time} must lie inside the calendar "
            f"({tmin}, {tmax}]"
        )
    controls = [i for i in range(panel.n_units) if not panel.is_treated[i]]
    early = [i for i in panel.treated_indices
             if panel.treatment_time[i] < cut_time]
    late = [i for i in panel.treated_indices
            if panel.treatment_time[i] >= cut_time]
    if not early:
        raise DataError(f"no treated unit adopts before {cut_time}")
    if not late:
        raise DataError(f"no treated unit adopts at or after {cut_time}")
    return (panel.subset_units(controls + early),
            panel.subset_units(controls + late))


# -- bootstrap ---------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    """Unit-bootstrap uncertainty for an event-time effect series.

    Treated units are resampled with replacement (controls stay fixed)
    and the whole fit is repeated per replicate.  ``replicate_att`` has
    one row per replicate (NaN rows mark failed replicates, which also
    count in ``n_failed``).
    """

    event_times: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    replicate_att: np.ndarray
    n_failed: int
    seed: int

    def to_json_dict(self) -> dict:
        def vec(a):
            return [None if math.isnan(v) else float(v) for v in a.tolist()]

        return {
            "event_times": [int(e) for e in self.event_times],
            "se": vec(self.se),
            "ci_lo": vec(self.ci_lo),
            "ci_hi": vec(self.ci_hi),
            "n_replicates": int(self.replicate_att.shape[0]),
            "n_failed": int(self.n_failed),
            "seed": int(self.seed),
        }


def _replicate_att(panel: PanelDataset, window: tuple[int, int],
                   lam: float | None, reselect: bool, config: FitConfig,
                   seed: int, b: int, n_ev: int) -> np.ndarray:
    """One bootstrap replicate; returns the att vector (NaN on failure)."""
    rng = np.random.default_rng([seed, b])
    n_c = panel.n_controls
    tr = panel.treated_indices
    draw = rng.integers(0, tr.size, size=tr.size)
    rows = np.concatenate([np.arange(n_c), tr[draw]])

    Y = panel.outcome[rows]
    cov = None if panel.covariates is None else panel.covariates[rows]
    t0 = panel.treatment_time[rows]

    mask = ~np.isnan(Y)
    t_origin = int(panel.times[0])
    for r in range(n_c, rows.size):
        mask[r, int(t0[r]) - t_origin:] = False

    try:
        if cov is not None:
            y_work, beta_rep = residualize_covariates(Y, cov, mask)
        else:
            y_work, beta_rep = Y, None
        if reselect:
            grid = lambda_grid(y_work, mask, config.grid_points)
            cv = cross_validate(
                y_work, mask, grid, config.folds, [seed, b, 1],
                tolerance=config.tolerance, max_iter=config.max_iter,
                demean_two_way=config.demean_two_way,
            )
            lam_b = cv.chosen_lambda
        else:
            lam_b = float(lam)  # type: ignore[arg-type]
        model = complete(
            y_work, mask, lam_b, tolerance=config.tolerance,
            max_iter=config.max_iter, demean_two_way=config.demean_two_way,
        )
        pred = model.predict()
        if cov is not None:
            # add the covariate term back on the original scale
            pred = pred + cov @ beta_rep
        t0_cols = np.array([int(v) - t_origin for v in t0[n_c:]])
        _ev, obs, cfe = _event_grids(Y[n_c:], pred[n_c:], t0_cols, window)
        att, _cnt = _column_mean(obs - cfe)
        return att
    except (PanelcfError, np.linalg.LinAlgError):
        return np.full(n_ev, np.nan)


def bootstrap_se(panel: PanelDataset, window: tuple[int, int], B: int,
                 seed: int, config: FitConfig = FitConfig(), *,
                 lam: float | None = None, reselect_lambda: bool = False,
                 n_workers: int = 1) -> BootstrapResult:
    """Unit bootstrap over treated units.

    Each replicate ``b`` draws its resample from
    ``default_rng([seed, b])``, so results do not depend on worker
    count or execution order.  ``lam`` fixes the threshold for every
    replicate (pass the point fit's selected value); with
    ``reselect_lambda`` each replicate re-runs cross-validation
    instead.  A replicate that fails to fit is dropped; more than 20%
    dropped aborts with :class:`EstimationError`.
    """
    if B < 2:
        raise ConfigError("B must be at least 2")
    if n_workers < 1:
        raise ConfigError("n_workers must be at least 1")
    if panel.n_treated < 2:
        raise DataError("bootstrap needs at least 2 treated units")
    if lam is None and not reselect_lambda:
        if isinstance(config.lam, str):
            raise ConfigError(
                "pass lam= (the selected threshold) or set "
                "reselect_lambda=True"
            )
        lam = float(config.lam)

    pre, post = int(window[0]), int(window[1])
    n_ev = pre + post + 1
    ev = np.arange(-pre, post + 1)

    def task(b: int) -> np.ndarray:
        return _replicate_att(panel, window, lam, reselect_lambda, config,
                              seed, b, n_ev)

    if n_workers == 1:
        rows = [task(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(task, range(B)))
    rep = np.vstack(rows)

    failed = np.isnan(rep).all(axis=1)
    n_failed = int(failed.sum())
    if n_failed > 0.2 * B:
        raise EstimationError(
            f"{n_failed} of {B} bootstrap replicates failed; "
            "the resampled panels are too thin to fit"
        )

    se = np.full(n_ev, np.nan)
    ci_lo = np.full(n_ev, np.nan)
    ci_hi = np.full(n_ev, np.nan)
    for j in range(n_ev):
        vals = rep[:, j]
        vals = vals[~np.isnan(vals)]
        if vals.size >= 2:
            se[j] = float(np.std(vals, ddof=1))
            ci_lo[j] = float(np.percentile(vals, 2.5))
            ci_hi[j] = float(np.percentile(vals, 97.5))
    return BootstrapResult(
        event_times=ev,
        se=se,
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        replicate_att=rep,
        n_failed=n_failed,
        seed=int(seed),
    )


# -- CSV export --------------------------------------------------------------


def write_att_csv(effects: EffectSeries, path) -> None:
    """Average effects per event time, with both percent scalings."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_time", "att", "se", "ci_lo", "ci_hi",
                    "n_units", "att_pct", "att_pct_pre"])
        E = effects.event_times.size
        nan = np.full(E, np.nan)
        se = effects.se if effects.se is not None else nan
        lo = effects.ci_lo if effects.ci_lo is not None else nan
        hi = effects.ci_hi if effects.ci_hi is not None else nan
        for j in range(E):
            w.writerow([
                str(int(effects.event_times[j])),
                _fmt(effects.att[j]),
                _fmt(se[j]),
                _fmt(lo[j]),
                _fmt(hi[j]),
                str(int(effects.n_units[j])),
                _fmt(effects.att_pct[j]),
                _fmt(effects.att_pct_pre[j]),
            ])


def write_unit_effects_csv(effects: EffectSeries, path) -> None:
    """Per-unit observed / counterfactual / effect rows (calendar-feasible
    cells only; missing outcomes leave observed and delta empty)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "event_time", "observed",
                    "counterfactual", "delta"])
        for i, uid in enumerate(effects.unit_ids):
            for j, e in enumerate(effects.event_times):
                if np.isnan(effects.counterfactual[i, j]):
                    continue  # outside the calendar
                w.writerow([
                    uid,
                    str(int(e)),
                    _fmt(effects.observed[i, j]),
                    _fmt(effects.counterfactual[i, j]),
                    _fmt(effects.delta[i, j]),
                ])


def write_catt_csv(result: CattResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "event_time", "att", "n_units"])
        for g in range(1, result.group_count + 1):
            for j, e in enumerate(result.event_times):
                w.writerow([
                    str(g),
                    str(int(e)),
                    _fmt(result.att[g - 1, j]),
                    str(int(result.n_units[g - 1, j])),
                ])


def write_cumulative_csv(result: CumulativeResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_time", "cum_att", "had_gap"])
        for j, e in enumerate(result.event_times):
            w.writerow([
                str(int(e)),
                _fmt(result.cum_att[j]),
                "1" if result.had_gap[j] else "0",
            ])
