import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import panelcf as pcf

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def records_from_grid(outcome, treatment_time=None, unit_ids=None,
                      condition=None, covariates=None, baseline=None):
    """Long-format records for load_panel from dense test arrays.

    ``outcome`` is (N, T) with NaN for missing; ``treatment_time`` maps
    unit index -> T0 for treated units.  Times are 0..T-1.
    """
    outcome = np.asarray(outcome, dtype=float)
    n, t = outcome.shape
    treatment_time = treatment_time or {}
    unit_ids = unit_ids or [f"u{i}" for i in range(n)]
    rows = []
    for i in range(n):
        for j in range(t):
            rec = {
                "unit_id": unit_ids[i],
                "time": j,
                "outcome": None if np.isnan(outcome[i, j]) else float(outcome[i, j]),
                "treatment_time": treatment_time.get(i),
            }
            if condition is not None and i in condition:
                rec["condition_value"] = condition[i]
            if baseline is not None:
                b = baseline[i, j]
                rec["baseline"] = None if np.isnan(b) else float(b)
            if covariates is not None:
                rec["covariates"] = [
                    None if np.isnan(vals[i, j]) else float(vals[i, j])
                    for vals in covariates.values()
                ]
                rec["covariate_names"] = list(covariates.keys())
            rows.append(rec)
    return rows


@pytest.fixture
def small_treated_panel():
    """4 controls + 2 treated (T0 = 6 and 8), T = 12, no missing."""
    rng = np.random.default_rng(3)
    y = 0.3 * rng.standard_normal((6, 12)).cumsum(axis=1) * 0.1 + 0.5
    return pcf.load_panel(records_from_grid(y, {4: 6, 5: 8}))


@pytest.fixture(scope="session")
def effect_panel():
    """Seeded generator panel with a step effect, shared by the
    effect/diagnostic tests that only need one realistic fit."""
    config = pcf.SimConfig(
        n_control=25, n_treated=8, n_periods=80, rank=2,
        factors=pcf.default_factors(2), loading_scale=0.2,
        noise_sd=0.03, effect=pcf.EffectShape(kind="step", level=-0.2),
        treatment_window=(45, 60), condition_link=-1.0, seed=11,
    )
    panel, truth = pcf.generate(config)
    return panel, truth


@pytest.fixture(scope="session")
def effect_fit(effect_panel):
    panel, _ = effect_panel
    fit = pcf.fit_panel(panel, pcf.FitConfig(lam="cv", grid_points=8, folds=3))
    return fit
