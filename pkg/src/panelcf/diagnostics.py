"""Pre-treatment fit quality and placebo checks.

Everything here scores the counterfactual where the truth is known:
treated units before adoption.  A fitted model that cannot track the
observed pre-treatment path has no business being trusted after it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .completion import FitConfig, PanelFit, fit_panel
from .effects import EffectSeries, estimate_effects
from .errors import ConfigError, DataError
from .panel import PanelDataset, _fmt

__all__ = [
    "FitReport",
    "pre_fit_report",
    "placebo_in_time",
    "write_fit_report_csv",
]


def _sq_corr(x: np.ndarray, y: np.ndarray) -> float:
    """Squared Pearson correlation; NaN when either side is degenerate."""
    if x.size < 2:
        return float("nan")
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    r = float(np.corrcoef(x, y)[0, 1])
    return r * r


@dataclass(frozen=True)
class FitReport:
    """Pre-treatment fit quality per treated unit and pooled.

    ``ratio`` entries are baseline MSPE over counterfactual MSPE, both
    evaluated on the unit's cells where observed outcome, prediction,
    and baseline are all present (so the comparison is like for like);
    values above 1 mean the counterfactual tracks better.  Units with
    no usable pre-treatment cell are listed in ``excluded_units`` and
    carry NaN rows.  Baseline-derived fields are NaN / None when the
    panel carries no baseline series.
    """

    unit_ids: tuple[str, ...]
    mspe_cf: np.ndarray
    mspe_baseline: np.ndarray
    ratio: np.ndarray
    r2_cf_unit: np.ndarray
    r2_baseline_unit: np.ndarray
    pooled_mspe_cf: float
    pooled_mspe_baseline: float
    pooled_ratio: float
    pooled_r2_cf: float
    pooled_r2_baseline: float
    n_worse_than_baseline: int | None
    excluded_units: tuple[str, ...]

    def to_json_dict(self) -> dict:
        def num(v: float):
            return None if (v is None or math.isnan(v)) else float(v)

        return {
            "pooled_mspe_cf": num(self.pooled_mspe_cf),
            "pooled_mspe_baseline": num(self.pooled_mspe_baseline),
            "pooled_ratio": num(self.pooled_ratio),
            "pooled_r2_cf": num(self.pooled_r2_cf),
            "pooled_r2_baseline": num(self.pooled_r2_baseline),
            "n_worse_than_baseline": (
                None if self.n_worse_than_baseline is None
                else int(self.n_worse_than_baseline)
            ),
            "n_units": len(self.unit_ids),
            "excluded_units": list(self.excluded_units),
        }


def pre_fit_report(panel: PanelDataset, counterfactual: np.ndarray,
                   baseline: np.ndarray | None = None) -> FitReport:
    """Score the counterfactual on treated units' pre-adoption cells.

    Parameters
    ----------
    panel : PanelDataset
    counterfactual : ndarray, shape (N, T)
        Full prediction grid from the fit.
    baseline : ndarray, shape (N, T), optional
        Comparison predictions.  Defaults to ``panel.baseline``; pass
        explicitly to override.  When absent entirely, baseline fields
        come back NaN / None.
    """
    if panel.n_treated == 0:
        raise DataError("panel has no treated units")
    cf = np.asarray(counterfactual, dtype=float)
    if cf.shape != panel.outcome.shape:
        raise DataError("counterfactual grid shape does not match the panel")
    if baseline is None:
        baseline = panel.baseline
    has_base = baseline is not None
    if has_base:
        baseline = np.asarray(baseline, dtype=float)
        if baseline.shape != panel.outcome.shape:
            raise DataError("baseline grid shape does not match the panel")

    tr = panel.treated_indices
    n = tr.size
    mspe_cf = np.full(n, np.nan)
    mspe_base = np.full(n, np.nan)
    ratio = np.full(n, np.nan)
    r2_cf = np.full(n, np.nan)
    r2_base = np.full(n, np.nan)
    excluded: list[str] = []

    pool_obs: list[np.ndarray] = []
    pool_cf: list[np.ndarray] = []
    pool_base_obs: list[np.ndarray] = []
    pool_base_cf: list[np.ndarray] = []
    pool_base_base: list[np.ndarray] = []

    for r, i in enumerate(tr):
        j0 = panel.time_index(int(panel.treatment_time[i]))
        obs = panel.outcome[i, :j0]
        pred = cf[i, :j0]
        good = ~np.isnan(obs)
        if not good.any():
            excluded.append(panel.unit_ids[i])
            continue
        o, p = obs[good], pred[good]
        mspe_cf[r] = float(np.mean((o - p) ** 2))
        r2_cf[r] = _sq_corr(o, p)
        pool_obs.append(o)
        pool_cf.append(p)
        if has_base:
            base = baseline[i, :j0]
            both = good & ~np.isnan(base)
            if both.any():
                ob, pb, bb = obs[both], pred[both], base[both]
                mspe_base[r] = float(np.mean((ob - bb) ** 2))
                r2_base[r] = _sq_corr(ob, bb)
                cf_on_both = float(np.mean((ob - pb) ** 2))
                if cf_on_both > 0:
                    ratio[r] = mspe_base[r] / cf_on_both
                pool_base_obs.append(ob)
                pool_base_cf.append(pb)
                pool_base_base.append(bb)

    if not pool_obs:
        raise DataError(
            "no treated unit has an observed pre-treatment outcome"
        )
    all_obs = np.concatenate(pool_obs)
    all_cf = np.concatenate(pool_cf)
    pooled_mspe_cf = float(np.mean((all_obs - all_cf) ** 2))
    pooled_r2_cf = _sq_corr(all_obs, all_cf)

    if has_base and pool_base_obs:
        bo = np.concatenate(pool_base_obs)
        bc = np.concatenate(pool_base_cf)
        bb = np.concatenate(pool_base_base)
        pooled_mspe_base = float(np.mean((bo - bb) ** 2))
        pooled_r2_base = _sq_corr(bo, bb)
        cf_common = float(np.mean((bo - bc) ** 2))
        pooled_ratio = pooled_mspe_base / cf_common if cf_common > 0 \
            else float("nan")
        n_worse = int(np.sum(mspe_cf > mspe_base))
    else:
        pooled_mspe_base = float("nan")
        pooled_r2_base = float("nan")
        pooled_ratio = float("nan")
        n_worse = None

    return FitReport(
        unit_ids=tuple(panel.unit_ids[i] for i in tr),
        mspe_cf=mspe_cf,
        mspe_baseline=mspe_base,
        ratio=ratio,
        r2_cf_unit=r2_cf,
        r2_baseline_unit=r2_base,
        pooled_mspe_cf=pooled_mspe_cf,
        pooled_mspe_baseline=pooled_mspe_base,
        pooled_ratio=pooled_ratio,
        pooled_r2_cf=pooled_r2_cf,
        pooled_r2_baseline=pooled_r2_base,
        n_worse_than_baseline=n_worse,
        excluded_units=tuple(excluded),
    )


def write_fit_report_csv(report: FitReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "mspe_cf", "mspe_baseline", "ratio",
                    "r2_cf_unit", "r2_baseline_unit"])
        for i, uid in enumerate(report.unit_ids):
            w.writerow([
                uid,
                _fmt(report.mspe_cf[i]),
                _fmt(report.mspe_baseline[i]),
                _fmt(report.ratio[i]),
                _fmt(report.r2_cf_unit[i]),
                _fmt(report.r2_baseline_unit[i]),
            ])


def placebo_in_time(panel: PanelDataset, config: FitConfig, fake_shift: int,
                    window: tuple[int, int], min_pre_periods: int = 1
                    ) -> tuple[EffectSeries, PanelFit]:
    """Refit after moving every adoption date ``fake_shift`` periods
    earlier and estimate effects against the shifted axis.

    Event times ``0 .. fake_shift-1`` on the shifted axis are genuinely
    untreated, so their estimated effects should hover near zero; the
    real effect shows up from event time ``fake_shift`` on.  With
    ``fake_shift=0`` this is exactly the standard fit-and-estimate
    path.

    Raises :class:`DataError` if a shifted adoption date falls at or
    before the first period, or if any treated unit keeps fewer than
    ``min_pre_periods`` observed pre-adoption cells.
    """
    fake_shift = int(fake_shift)
    if fake_shift < 0:
        raise ConfigError("fake_shift must be non-negative")
    shifted_tt = panel.treatment_time.copy()
    tr = panel.treated_indices
    shifted_tt[tr] = shifted_tt[tr] - fake_shift
    tmin = int(panel.times[0])
    bad = [panel.unit_ids[i] for i in tr if shifted_tt[i] <= tmin]
    if bad:
        raise DataError(
            f"shift {fake_shift} pushes adoption to or before the first "
            f"period for units: {bad}"
        )
    observed = ~np.isnan(panel.outcome)
    thin = []
    for i in tr:
        j0 = panel.time_index(int(shifted_tt[i]))
        if int(observed[i, :j0].sum()) < min_pre_periods:
            thin.append(panel.unit_ids[i])
    if thin:
        raise DataError(
            f"shift {fake_shift} leaves fewer than {min_pre_periods} "
            f"observed pre-adoption cells for units: {thin}"
        )
    shifted = PanelDataset(
        unit_ids=panel.unit_ids,
        times=panel.times,
        outcome=panel.outcome,
        covariates=panel.covariates,
        covariate_names=panel.covariate_names,
        treatment_time=shifted_tt,
        condition_value=panel.condition_value,
        baseline=panel.baseline,
    )
    fit = fit_panel(shifted, config)
    effects = estimate_effects(shifted, fit, window)
    return effects, fit
