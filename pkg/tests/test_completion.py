import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import panelcf as pcf
from panelcf.errors import (
    CollinearCovariatesError,
    ConfigError,
    DataError,
    UnderIdentifiedError,
)

import oracles

# Frozen output of oracles.svt_bruteforce on the seeded 5x4 fixture
# below with threshold 0.7 (scipy gesvd route, written before these
# tests).
SVT_5X4_EXPECTED = np.array([
    [0.21225473249980278, -0.8360922954068543, 0.5143976591777432, 0.6062813906799231],
    [-1.3451807435160812, -0.9998774522033794, 0.09070298964583859, -0.15880956269711227],
    [0.05642010545307944, -0.7818577431799092, 0.5098382344207815, 0.4472396745079791],
    [0.13823407667694884, 0.7265354575128349, 0.0318957890513827, -0.5522457497924058],
    [0.09690237802812017, -0.573375554524331, 0.5786088969005635, 0.25680324349972905],
])


def _rank2_fixture():
    """Seeded 12x20 rank-2 + noise panel with a 25% MCAR mask; the
    shrinkage threshold is half the top singular value of the
    zero-filled observed matrix."""
    rng = np.random.default_rng(7)
    u = rng.standard_normal((12, 2))
    v = rng.standard_normal((20, 2))
    y = 0.5 * (u @ v.T) + 0.05 * rng.standard_normal((12, 20))
    mask = rng.random((12, 20)) > 0.25
    lam = 0.5 * float(np.linalg.svd(np.where(mask, y, 0.0),
                                    compute_uv=False)[0])
    return y, mask, lam


# -- svt -----------------------------------------------------------------------


def test_svt_diagonal():
    out = pcf.svt(np.diag([3.0, 1.0]), 1.0)
    np.testing.assert_allclose(out, np.diag([2.0, 0.0]), atol=1e-12)


def test_svt_zero_threshold_is_identity():
    m = np.random.default_rng(0).standard_normal((6, 5))
    np.testing.assert_allclose(pcf.svt(m, 0.0), m, atol=1e-12)


def test_svt_matches_frozen_oracle_values():
    m = np.random.default_rng(42).standard_normal((5, 4))
    np.testing.assert_allclose(pcf.svt(m, 0.7), SVT_5X4_EXPECTED, atol=1e-10)


def test_svt_matches_bruteforce_oracle_live():
    m = np.random.default_rng(42).standard_normal((5, 4))
    diff = np.abs(pcf.svt(m, 0.7) - oracles.svt_bruteforce(m, 0.7))
    assert diff.max() < 1e-10


def test_svt_rejects_non_finite():
    m = np.ones((2, 2))
    m[0, 0] = np.nan
    with pytest.raises(DataError):
        pcf.svt(m, 0.1)
    with pytest.raises(DataError):
        pcf.svt(np.ones((2, 2)), -0.5)


def test_svt_shrinks_nuclear_norm():
    m = np.random.default_rng(1).standard_normal((7, 4))
    assert pcf.nuclear_norm(pcf.svt(m, 0.3)) <= pcf.nuclear_norm(m)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_svt_non_expansive(seed, threshold):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((5, 6))
    b = rng.standard_normal((5, 6))
    lhs = np.linalg.norm(pcf.svt(a, threshold) - pcf.svt(b, threshold))
    assert lhs <= np.linalg.norm(a - b) + 1e-9


# -- complete ---------------------------------------------------------------------


def test_complete_lambda_zero_reproduces_full_data():
    y = np.random.default_rng(2).standard_normal((6, 9))
    mask = np.ones_like(y, dtype=bool)
    model = pcf.complete(y, mask, 0.0, demean_two_way=False)
    np.testing.assert_allclose(model.predict(), y, atol=1e-8)


def test_complete_recovers_rank1_cell():
    """Closed-form check: the minimum-nuclear-norm interpolant of a
    positive rank-1 matrix with one hidden cell is the matrix itself.
    The regularized fixed point carries an O(threshold / top singular
    value) bias and converges at the matching rate, so the threshold is
    tiny and the iteration budget correspondingly large."""
    rng = np.random.default_rng(4)
    u = rng.uniform(0.5, 1.5, 6)
    v = rng.uniform(0.5, 1.5, 6)
    y = np.outer(u, v)
    mask = np.ones_like(y, dtype=bool)
    mask[2, 3] = False
    lam = 5e-7 * float(np.linalg.svd(y, compute_uv=False)[0])
    model = pcf.complete(y, mask, lam, tolerance=1e-13, max_iter=1_000_000,
                         demean_two_way=False)
    assert model.converged
    rel = abs(model.predict()[2, 3] - u[2] * v[3]) / abs(u[2] * v[3])
    assert rel < 1e-6


def test_complete_matches_reference_soft_impute():
    """Package loop vs the independent reference at matched iteration
    counts; different SVD backends, so agreement is a math check."""
    y, mask, lam = _rank2_fixture()
    model = pcf.complete(y, mask, lam, demean_two_way=False)
    ref = oracles.soft_impute_reference(y, mask, lam, model.iterations)
    assert np.abs(model.L_hat - ref).max() < 1e-8


def test_reference_fixture_frozen_spot_values():
    """Pin the oracle itself: values recorded when oracles.py was
    written.  A drift here means the fixture or oracle changed, not the
    package."""
    y, mask, lam = _rank2_fixture()
    assert lam == pytest.approx(3.2112708701240424, abs=1e-12)
    ref = oracles.soft_impute_reference(y, mask, lam, 100)
    assert ref[0, 0] == pytest.approx(-0.0005842690153139346, abs=1e-12)
    assert ref[5, 7] == pytest.approx(-0.04690410205966805, abs=1e-12)
    assert ref[11, 19] == pytest.approx(0.020715786754856406, abs=1e-12)
    assert oracles.nuclear_norm_bruteforce(ref) == pytest.approx(
        3.9401947652577256, abs=1e-10)


def test_complete_objective_monotone_on_fixture():
    y, mask, lam = _rank2_fixture()
    for demean in (False, True):
        model = pcf.complete(y, mask, lam, demean_two_way=demean)
        obj = np.asarray(model.objective)
        assert np.all(np.diff(obj) <= 1e-12)


def test_complete_at_lambda_max_gives_rank_zero():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 5)
    model = pcf.complete(y, mask, float(grid[0]), demean_two_way=False)
    assert model.effective_rank == 0
    np.testing.assert_array_equal(model.L_hat, 0.0)


def test_complete_additive_panel_needs_no_rank():
    """Outcome that is exactly grand mean + unit + period effects is
    absorbed by demeaning: rank 0 at any positive threshold, observed
    cells reproduced."""
    rng = np.random.default_rng(9)
    a = rng.standard_normal(8)
    b = rng.standard_normal(11)
    y = 0.4 + a[:, None] + b[None, :]
    mask = rng.random((8, 11)) > 0.2
    model = pcf.complete(y, mask, 0.05, demean_two_way=True)
    assert model.effective_rank == 0
    np.testing.assert_allclose(model.predict()[mask], y[mask], atol=1e-9)


def test_complete_demeaning_matches_reference():
    rng = np.random.default_rng(12)
    y = rng.standard_normal((7, 9))
    mask = rng.random((7, 9)) > 0.25
    model = pcf.complete(y, mask, 1e3, demean_two_way=True)  # rank 0 fit
    mu, a, b = oracles.two_way_demean_reference(y, mask)
    assert model.grand_mean == pytest.approx(mu, abs=1e-10)
    np.testing.assert_allclose(model.unit_effects, a, atol=1e-10)
    np.testing.assert_allclose(model.time_effects, b, atol=1e-10)


def test_complete_warns_when_iteration_budget_exhausted():
    y, mask, _ = _rank2_fixture()
    with pytest.warns(RuntimeWarning, match="did not converge"):
        model = pcf.complete(y, mask, 1e-6, tolerance=1e-14, max_iter=3,
                             demean_two_way=False)
    assert not model.converged
    assert model.iterations == 3
    assert model.final_delta > 1e-14


def test_complete_converged_implies_delta_within_tolerance():
    y, mask, lam = _rank2_fixture()
    model = pcf.complete(y, mask, lam, tolerance=1e-6)
    assert model.converged
    assert model.final_delta <= 1e-6


def test_complete_under_identified_row():
    y = np.ones((4, 6))
    mask = np.ones_like(y, dtype=bool)
    mask[2] = False
    with pytest.raises(UnderIdentifiedError) as err:
        pcf.complete(y, mask, 0.1)
    assert err.value.row_index == 2


def test_complete_under_identified_column():
    y = np.ones((4, 6))
    mask = np.ones_like(y, dtype=bool)
    mask[:, 5] = False
    with pytest.raises(UnderIdentifiedError) as err:
        pcf.complete(y, mask, 0.1)
    assert err.value.col_index == 5


def test_complete_too_few_cells():
    y = np.ones((4, 6))
    mask = np.zeros_like(y, dtype=bool)
    mask[np.arange(4), np.arange(4)] = True
    mask[0, 4] = True
    mask[0, 5] = True  # every row/col covered but |observed| < ... still >= min
    # shrink to fewer than min(N, T) observed cells
    mask[0, 4] = False
    mask[0, 5] = False
    mask[3, 3] = False
    with pytest.raises(UnderIdentifiedError, match="observed cells"):
        pcf.complete(y, mask, 0.1)


def test_complete_rejects_bad_options():
    y = np.ones((3, 3))
    mask = np.ones_like(y, dtype=bool)
    with pytest.raises(ConfigError):
        pcf.complete(y, mask, -1.0)
    with pytest.raises(ConfigError):
        pcf.complete(y, mask, 0.1, max_iter=0)
    with pytest.raises(ConfigError):
        pcf.complete(y, mask, 0.1, tolerance=-1e-3)


def test_training_mse_decreases_along_grid():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 8)
    prev = np.inf
    for lam in grid:
        model = pcf.complete(y, mask, float(lam), demean_two_way=False)
        mse = float(np.mean((y - model.predict())[mask] ** 2))
        assert mse <= prev + 1e-12
        prev = mse


@given(st.integers(0, 2**32 - 1))
def test_complete_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((6, 8))
    mask = rng.random((6, 8)) > 0.2
    if not (mask.any(axis=1).all() and mask.any(axis=0).all()):
        return
    a = pcf.complete(y, mask, 0.3)
    b = pcf.complete(y, mask, 0.3)
    np.testing.assert_array_equal(a.L_hat, b.L_hat)
    assert a.objective == b.objective


# -- residualize_covariates ----------------------------------------------------------


def test_residualize_zero_covariates_contribute_nothing():
    y = np.random.default_rng(3).standard_normal((4, 5))
    cov = np.zeros((4, 5, 2))
    mask = np.ones((4, 5), dtype=bool)
    resid, beta = pcf.residualize_covariates(y, cov, mask)
    np.testing.assert_array_equal(beta, [0.0, 0.0])
    np.testing.assert_array_equal(resid, y)


def test_residualize_exact_linear_model():
    rng = np.random.default_rng(8)
    cov = rng.standard_normal((5, 7, 1))
    y = 2.0 * cov[:, :, 0]
    mask = rng.random((5, 7)) > 0.3
    resid, beta = pcf.residualize_covariates(y, cov, mask)
    assert beta[0] == pytest.approx(2.0, abs=1e-10)
    np.testing.assert_allclose(resid[mask], 0.0, atol=1e-10)


def test_residualize_recovers_known_coefficients():
    rng = np.random.default_rng(15)
    cov = rng.standard_normal((20, 40, 2))
    beta_true = np.array([0.3, -0.1])
    y = cov @ beta_true + 0.01 * rng.standard_normal((20, 40))
    mask = rng.random((20, 40)) > 0.2
    _, beta = pcf.residualize_covariates(y, cov, mask)
    np.testing.assert_allclose(beta, beta_true, atol=0.02)


def test_residualize_collinear_columns_rejected():
    rng = np.random.default_rng(6)
    base = rng.standard_normal((6, 8))
    cov = np.stack([base, 2.0 * base, rng.standard_normal((6, 8))], axis=2)
    mask = np.ones((6, 8), dtype=bool)
    with pytest.raises(CollinearCovariatesError) as err:
        pcf.residualize_covariates(base, cov, mask)
    assert err.value.indices == (1,)


# -- lambda_grid ------------------------------------------------------------------


def test_grid_endpoints():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 2)
    sig_max = float(np.linalg.svd(np.where(mask, y, 0.0),
                                  compute_uv=False)[0])
    assert grid[0] == pytest.approx(sig_max, rel=1e-12)
    assert grid[1] == pytest.approx(sig_max * 1e-4, rel=1e-12)


def test_grid_top_gives_rank_zero_under_svt():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 4)
    shrunk = pcf.svt(np.where(mask, y, 0.0), float(grid[0]))
    assert np.abs(shrunk).max() < 1e-10


def test_grid_ratios_constant():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 9)
    ratios = grid[1:] / grid[:-1]
    assert np.abs(ratios - ratios[0]).max() < 1e-12


# -- cross_validate ----------------------------------------------------------------


def test_cv_single_point_grid_is_chosen():
    y, mask, lam = _rank2_fixture()
    report = pcf.cross_validate(y, mask, np.array([lam]), folds=3, seed=1)
    assert report.chosen_index == 0
    assert report.chosen_lambda == pytest.approx(lam)


def test_cv_noiseless_low_rank_prefers_small_lambda():
    """With noiseless low-rank data the held-out error keeps falling as
    the threshold shrinks, so the pick lands at the bottom of the grid.
    Needs an iteration budget big enough for the small-threshold fits
    to converge (the default budget would truncate them)."""
    rng = np.random.default_rng(13)
    u = rng.standard_normal((20, 2))
    v = rng.standard_normal((30, 2))
    y = u @ v.T
    mask = rng.random((20, 30)) > 0.2
    grid = pcf.lambda_grid(y, mask, 8)
    report = pcf.cross_validate(y, mask, grid, folds=5, seed=3,
                                demean_two_way=False, max_iter=60000)
    assert report.chosen_index >= len(grid) - 2
    assert np.all(np.diff(report.mean_mse) < 0)


def test_cv_chosen_index_matches_reference_oracle():
    """Fixed seeded fixture: the package must agree with the
    independently written fold-evaluation loop exactly."""
    rng = np.random.default_rng(21)
    u = rng.standard_normal((15, 2))
    v = rng.standard_normal((30, 2))
    y = 0.5 * (u @ v.T) + 0.05 * rng.standard_normal((15, 30))
    mask = np.ones((15, 30), dtype=bool)
    sig_max = float(np.linalg.svd(y, compute_uv=False)[0])
    grid = np.geomspace(sig_max, sig_max * 1e-4, 12)
    report = pcf.cross_validate(y, mask, grid, folds=5, seed=0,
                                demean_two_way=False)
    # Frozen when the oracle was first run; the live oracle must agree.
    assert report.chosen_index == 5
    _, oracle_choice = oracles.cv_reference(y, mask, grid, 5, 0)
    assert report.chosen_index == oracle_choice


def test_cv_is_deterministic_and_seed_sensitive():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 5)
    a = pcf.cross_validate(y, mask, grid, folds=3, seed=4)
    b = pcf.cross_validate(y, mask, grid, folds=3, seed=4)
    c = pcf.cross_validate(y, mask, grid, folds=3, seed=5)
    np.testing.assert_array_equal(a.mean_mse, b.mean_mse)
    assert a.fold_sizes == b.fold_sizes
    assert not np.array_equal(a.mean_mse, c.mean_mse)


def test_cv_rejects_increasing_grid():
    y, mask, _ = _rank2_fixture()
    with pytest.raises(ConfigError, match="non-increasing"):
        pcf.cross_validate(y, mask, np.array([0.1, 0.5]), folds=2, seed=0)


def test_cv_rejects_single_fold():
    y, mask, _ = _rank2_fixture()
    with pytest.raises(ConfigError, match="folds"):
        pcf.cross_validate(y, mask, np.array([0.5]), folds=1, seed=0)


def test_cv_anchor_cells_guard_coverage():
    """Every fold's training mask keeps all rows and columns covered,
    which is what the anchor cells are for."""
    rng = np.random.default_rng(17)
    y = rng.standard_normal((6, 7))
    mask = rng.random((6, 7)) > 0.45
    if not (mask.any(axis=1).all() and mask.any(axis=0).all()):
        pytest.skip("fixture lost a row/column before CV")
    grid = pcf.lambda_grid(y, mask, 3)
    report = pcf.cross_validate(y, mask, grid, folds=3, seed=2)
    assert report.n_anchor_cells >= max(y.shape)
    assert sum(report.fold_sizes) == int(mask.sum()) - report.n_anchor_cells


def test_cv_report_round_trips_to_json():
    y, mask, _ = _rank2_fixture()
    grid = pcf.lambda_grid(y, mask, 4)
    report = pcf.cross_validate(y, mask, grid, folds=3, seed=11)
    blob = report.to_json_dict()
    assert blob["chosen_index"] == report.chosen_index
    assert blob["chosen_lambda"] == pytest.approx(report.chosen_lambda)
    assert len(blob["grid"]) == len(blob["mean_mse"]) == 4
    assert blob["seed"] == 11


# -- fit_panel ---------------------------------------------------------------------


def test_fit_panel_fixed_lambda_skips_cv(small_treated_panel):
    fit = pcf.fit_panel(small_treated_panel, pcf.FitConfig(lam=0.2))
    assert fit.cv is None
    assert fit.model.lam == pytest.approx(0.2)
    assert fit.counterfactual.shape == small_treated_panel.outcome.shape


def test_fit_panel_cv_reports_trace(small_treated_panel):
    fit = pcf.fit_panel(
        small_treated_panel, pcf.FitConfig(lam="cv", grid_points=5, folds=3)
    )
    assert fit.cv is not None
    assert fit.model.lam == pytest.approx(fit.cv.chosen_lambda)


def test_fit_panel_under_identified_names_unit():
    y = np.ones((3, 6))
    y[2, :3] = np.nan  # treated unit with no observed pre-treatment cells
    from conftest import records_from_grid

    panel = pcf.load_panel(records_from_grid(y, {2: 3}))
    with pytest.raises(UnderIdentifiedError, match="u2"):
        pcf.fit_panel(panel, pcf.FitConfig(lam=0.1))


def test_fit_config_validation():
    with pytest.raises(ConfigError):
        pcf.FitConfig(lam="maybe").validate()
    with pytest.raises(ConfigError):
        pcf.FitConfig(lam=-0.5).validate()
    with pytest.raises(ConfigError):
        pcf.FitConfig(folds=1).validate()
    with pytest.raises(ConfigError):
        pcf.FitConfig(grid_points=1).validate()
