"""Nuclear-norm-regularized matrix completion for panel outcomes.

The estimator solves, over the observed (untreated, non-missing) cell
set ``O`` of an ``N x T`` matrix ``Y``,

    minimize_L   (1/2) * sum_O (Y_it - L_it)^2  +  lam * ||L||_*

by soft-impute: repeatedly refill the unobserved cells with the current
low-rank iterate and apply singular value thresholding,

    L  <-  svt( P_O(Y) + P_not_O(L),  lam ).

``lam`` is expressed directly on the singular-value scale: it is the
per-iteration shrinkage threshold, and the top of the regularization
path (the smallest value that forces a rank-0 solution when starting
from zeros) equals the largest singular value of the zero-filled
observed matrix.  Dividing the displayed objective by ``|O|`` gives the
equivalent mean-squared form ``(1/(2|O|)) sum_O (Y-L)^2 +
(lam/|O|)||L||_*``, which is what :attr:`CompletionModel.objective`
records; both forms share the same minimizer and the same monotone
descent property.

Two-way additive structure (grand mean, unit effects, period effects)
is removed from the observed cells before completion and added back at
prediction time, so the nuclear norm only has to pay for genuinely
interactive structure.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    CollinearCovariatesError,
    ConfigError,
    DataError,
    EstimationError,
    UnderIdentifiedError,
)
from .panel import ObservationMask, PanelDataset, build_mask

__all__ = [
    "CompletionModel",
    "CvReport",
    "FitConfig",
    "PanelFit",
    "svt",
    "nuclear_norm",
    "complete",
    "residualize_covariates",
    "lambda_grid",
    "cross_validate",
    "fit_panel",
]

#: Singular values below this fraction of the largest one count as zero
#: when reporting the rank of the fitted low-rank component.
RANK_EPSILON_FACTOR = 1e-10

#: Relative tolerance and sweep cap for the alternating two-way
#: demeaning pass.  The pass is cheap, so it is run essentially to
#: machine precision.
_DEMEAN_RTOL = 1e-13
_DEMEAN_MAX_SWEEPS = 500


def svt(m: np.ndarray, threshold: float) -> np.ndarray:
    """Singular value thresholding: shrink every singular value of
    ``m`` toward zero by ``threshold``, clipping at zero.

    This is the proximal operator of ``threshold * ||.||_*`` and the
    basic step of the completion iteration.

    Parameters
    ----------
    m : ndarray, shape (n, p)
        Matrix with finite entries.
    threshold : float
        Non-negative shrinkage amount on the singular-value scale.

    Returns
    -------
    ndarray, shape (n, p)
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise DataError("svt expects a 2-d array")
    if not np.isfinite(m).all():
        raise DataError("svt input must be finite")
    threshold = float(threshold)
    if not np.isfinite(threshold) or threshold < 0:
        raise DataError("svt threshold must be finite and non-negative")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.maximum(s - threshold, 0.0)
    return (u * s) @ vt


def nuclear_norm(m: np.ndarray) -> float:
    """Sum of singular values of ``m``."""
    return float(np.linalg.svd(np.asarray(m, dtype=float),
                               compute_uv=False).sum())


@dataclass(frozen=True)
class CompletionModel:
    """Fitted low-rank completion of a partially observed panel.

    Attributes
    ----------
    L_hat : ndarray, shape (N, T)
        Low-rank component on the working (demeaned, residualized)
        scale.
    lam : float
        Singular-value threshold the model was fit with.
    grand_mean, unit_effects, time_effects : float / ndarray
        Two-way additive structure removed before completion (zeros
        when demeaning was disabled).
    beta : ndarray, shape (K,)
        Covariate coefficients (empty when the fit used no covariates).
    effective_rank : int
        Number of singular values of ``L_hat`` above
        ``RANK_EPSILON_FACTOR`` times the largest one.
    iterations : int
        Number of thresholding steps performed.
    converged : bool
        Whether the relative Frobenius change of the iterate reached
        the tolerance within the iteration budget.
    final_delta : float
        Relative Frobenius change at the last step.
    objective : tuple of float
        Mean-scale penalized objective after every iteration; it is
        non-increasing.
    """

    L_hat: np.ndarray
    lam: float
    grand_mean: float
    unit_effects: np.ndarray
    time_effects: np.ndarray
    beta: np.ndarray
    effective_rank: int
    iterations: int
    converged: bool
    final_delta: float
    objective: tuple[float, ...]

    def predict(self, covariates: np.ndarray | None = None) -> np.ndarray:
        """Untreated-outcome prediction for every cell of the panel:
        additive effects plus low-rank component plus covariate term.

        ``covariates`` (shape ``(N, T, K)``) is required when the model
        was fit with a covariate term.
        """
        pred = (self.grand_mean
                + self.unit_effects[:, None]
                + self.time_effects[None, :]
                + self.L_hat)
        if self.beta.size:
            if covariates is None:
                raise DataError(
                    "model was fit with covariates; predict needs them"
                )
            pred = pred + covariates @ self.beta
        return pred

    def summary(self) -> dict:
        """JSON-ready scalar summary of the fit."""
        return {
            "lambda": self.lam,
            "effective_rank": int(self.effective_rank),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "final_delta": self.final_delta,
            "final_objective": self.objective[-1] if self.objective else None,
            "grand_mean": self.grand_mean,
            "n_covariates": int(self.beta.size),
            "beta": [float(b) for b in self.beta],
        }


def _check_inputs(Y: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Y = np.asarray(Y, dtype=float)
    mask = np.asarray(mask)
    if Y.ndim != 2:
        raise DataError("Y must be 2-d")
    if mask.shape != Y.shape:
        raise DataError("mask shape must match Y")
    if mask.dtype != bool:
        mask = mask.astype(bool)
    if not np.isfinite(Y[mask]).all():
        raise DataError("observed cells must be finite (NaN only off-mask)")
    n, t = Y.shape
    n_obs = int(mask.sum())
    if n_obs < min(n, t):
        raise UnderIdentifiedError(
            f"only {n_obs} observed cells for a {n}x{t} matrix; "
            f"need at least {min(n, t)}"
        )
    row_gap = np.flatnonzero(~mask.any(axis=1))
    if row_gap.size:
        i = int(row_gap[0])
        raise UnderIdentifiedError(
            f"unit row {i} has no observed cells", row_index=i
        )
    col_gap = np.flatnonzero(~mask.any(axis=0))
    if col_gap.size:
        j = int(col_gap[0])
        raise UnderIdentifiedError(
            f"period column {j} has no observed cells", col_index=j
        )
    return Y, mask


def _two_way_means(Y: np.ndarray, mask: np.ndarray
                   ) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares grand mean / unit / period effects on the observed
    cells, by alternating averaging.  Effects are centered so that both
    unit and period effects have zero (unweighted) mean."""
    n, t = Y.shape
    vals = np.where(mask, Y, 0.0)
    row_cnt = mask.sum(axis=1)
    col_cnt = mask.sum(axis=0)
    scale = max(1.0, float(np.abs(Y[mask]).max(initial=0.0)))
    mu = float(Y[mask].mean())
    a = np.zeros(n)
    b = np.zeros(t)
    for _ in range(_DEMEAN_MAX_SWEEPS):
        a_new = (vals - np.where(mask, mu + b[None, :], 0.0)).sum(axis=1) / row_cnt
        b_new = (vals - np.where(mask, mu + a_new[:, None], 0.0)).sum(axis=0) / col_cnt
        change = max(np.abs(a_new - a).max(), np.abs(b_new - b).max())
        a, b = a_new, b_new
        if change <= _DEMEAN_RTOL * scale:
            break
    # Shift the means into the grand mean so the decomposition is unique.
    mu += float(a.mean() + b.mean())
    a = a - a.mean()
    b = b - b.mean()
    return mu, a, b


def complete(Y: np.ndarray, mask: np.ndarray, lam: float, *,
             tolerance: float = 1e-6, max_iter: int = 500,
             demean_two_way: bool = True) -> CompletionModel:
    """Fit the nuclear-norm completion of ``Y`` over the cells in ``mask``.

    Parameters
    ----------
    Y : ndarray, shape (N, T)
        Outcome matrix.  Cells outside ``mask`` may be NaN.
    mask : ndarray of bool, shape (N, T)
        Training cells.  Every row and column must contain at least one
        True cell and ``mask.sum() >= min(N, T)``.
    lam : float
        Singular-value threshold (see module docstring for the scale).
    tolerance : float
        Stop when the relative Frobenius change of the iterate is at or
        below this value.
    max_iter : int
        Iteration budget.  Exhausting it returns a model with
        ``converged=False`` and emits a RuntimeWarning.
    demean_two_way : bool
        Remove grand mean / unit / period effects (estimated on the
        masked cells) before completing, and restore them in
        :meth:`CompletionModel.predict`.

    Returns
    -------
    CompletionModel
    """
    if isinstance(mask, ObservationMask):
        mask = mask.observed
    Y, mask = _check_inputs(Y, mask)
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ConfigError("lam must be finite and non-negative")
    if tolerance < 0:
        raise ConfigError("tolerance must be non-negative")
    if max_iter < 1:
        raise ConfigError("max_iter must be at least 1")

    n, t = Y.shape
    n_obs = int(mask.sum())
    if demean_two_way:
        mu, a, b = _two_way_means(Y, mask)
    else:
        mu, a, b = 0.0, np.zeros(n), np.zeros(t)
    working = np.where(mask, Y - (mu + a[:, None] + b[None, :]), 0.0)

    L = np.zeros_like(working)
    norm_prev = 0.0
    objective: list[float] = []
    converged = False
    delta = np.inf
    iterations = 0
    s_shrunk = np.zeros(min(n, t))
    for iterations in range(1, max_iter + 1):
        filled = np.where(mask, working, L)
        u, s, vt = np.linalg.svd(filled, full_matrices=False)
        s_shrunk = np.maximum(s - lam, 0.0)
        L_new = (u * s_shrunk) @ vt
        sq_err = float((((working - L_new)[mask]) ** 2).sum())
        objective.append((0.5 * sq_err + lam * float(s_shrunk.sum())) / n_obs)
        diff = float(np.linalg.norm(L_new - L))
        delta = diff / max(norm_prev, 1e-12)
        L = L_new
        norm_prev = float(np.linalg.norm(L))
        if delta <= tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"completion did not converge in {max_iter} iterations "
            f"(last relative change {delta:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )

    smax = float(s_shrunk.max(initial=0.0))
    if smax > 0:
        eff_rank = int((s_shrunk > RANK_EPSILON_FACTOR * smax).sum())
    else:
        eff_rank = 0

    return CompletionModel(
        L_hat=L,
        lam=lam,
        grand_mean=mu,
        unit_effects=a,
        time_effects=b,
        beta=np.zeros(0),
        effective_rank=eff_rank,
        iterations=iterations,
        converged=converged,
        final_delta=float(delta),
        objective=tuple(objective),
    )


def residualize_covariates(Y: np.ndarray, covariates: np.ndarray,
                           mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regress the observed cells of ``Y`` on cell-level covariates and
    subtract the fitted covariate term everywhere.

    The regression is a pooled least squares over the masked cells with
    no intercept (level structure is the demeaning pass's job).
    Covariate columns that are identically zero on the masked cells get
    a zero coefficient; any genuine linear dependence among the
    remaining columns raises :class:`CollinearCovariatesError` listing
    the dependent column indices.

    Returns
    -------
    (Y_resid, beta) : ndarray pair
        ``Y_resid`` has the covariate term removed from every cell
        (missing outcome cells stay NaN); ``beta`` has shape (K,).
    """
    Y = np.asarray(Y, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim != 3 or covariates.shape[:2] != Y.shape:
        raise DataError("covariates must have shape (N, T, K) matching Y")
    if not np.isfinite(covariates).all():
        raise DataError("covariates must be finite (impute before fitting)")
    if isinstance(mask, ObservationMask):
        mask = mask.observed
    mask = np.asarray(mask).astype(bool)
    if mask.shape != Y.shape:
        raise DataError("mask shape must match Y")

    K = covariates.shape[2]
    X = covariates[mask]
    y = Y[mask]
    if not np.isfinite(y).all():
        raise DataError("observed cells must be finite")

    nonzero = [j for j in range(K) if np.any(X[:, j] != 0.0)]
    beta = np.zeros(K)
    if nonzero:
        Xa = X[:, nonzero]
        rank = int(np.linalg.matrix_rank(Xa))
        if rank < len(nonzero):
            # Greedy scan: a column that does not raise the design rank
            # is dependent on the columns before it.
            indep: list[int] = []
            dep: list[int] = []
            for j in nonzero:
                trial = X[:, indep + [j]]
                if np.linalg.matrix_rank(trial) > len(indep):
                    indep.append(j)
                else:
                    dep.append(j)
            raise CollinearCovariatesError(dep)
        coef, *_ = np.linalg.lstsq(Xa, y, rcond=None)
        beta[nonzero] = coef
    y_resid = Y - covariates @ beta
    return y_resid, beta


def lambda_grid(Y: np.ndarray, mask: np.ndarray, n_points: int = 20
                ) -> np.ndarray:
    """Geometric grid of candidate thresholds, descending from the
    largest singular value of the zero-filled observed matrix down to
    ``1e-4`` times that value.

    The top of the grid forces an all-zero low-rank component (rank 0),
    so the grid brackets the entire useful regularization path.
    """
    if n_points < 2:
        raise ConfigError("n_points must be at least 2")
    if isinstance(mask, ObservationMask):
        mask = mask.observed
    Y, mask = _check_inputs(Y, mask)
    filled = np.where(mask, Y, 0.0)
    sig_max = float(np.linalg.svd(filled, compute_uv=False)[0])
    if sig_max == 0.0:
        return np.zeros(n_points)
    return np.geomspace(sig_max, sig_max * 1e-4, n_points)


@dataclass(frozen=True)
class CvReport:
    """Cross-validation trace over a threshold grid.

    ``mean_mse`` and ``sd_mse`` are the across-fold mean and sample
    standard deviation of the per-fold held-out mean squared errors;
    ``chosen_index`` points into ``grid`` (ties broken toward the
    stronger threshold, i.e. the earlier grid entry).
    """

    grid: np.ndarray
    mean_mse: np.ndarray
    sd_mse: np.ndarray
    chosen_index: int
    folds: int
    seed: int | tuple[int, ...]
    n_anchor_cells: int
    fold_sizes: tuple[int, ...]

    @property
    def chosen_lambda(self) -> float:
        return float(self.grid[self.chosen_index])

    def to_json_dict(self) -> dict:
        seed = (list(self.seed) if isinstance(self.seed, tuple)
                else int(self.seed))
        return {
            "grid": [float(g) for g in self.grid],
            "mean_mse": [float(v) for v in self.mean_mse],
            "sd_mse": [float(v) for v in self.sd_mse],
            "chosen_index": int(self.chosen_index),
            "chosen_lambda": self.chosen_lambda,
            "folds": int(self.folds),
            "seed": seed,
            "n_anchor_cells": int(self.n_anchor_cells),
            "fold_sizes": [int(s) for s in self.fold_sizes],
        }


def _anchor_cells(mask: np.ndarray) -> np.ndarray:
    """Cells pinned to the training side of every fold: the first
    observed cell of each row and of each column.  Holding these out
    could leave a fold's training mask with an empty row or column."""
    anchors = np.zeros_like(mask, dtype=bool)
    first_col = mask.argmax(axis=1)
    rows = np.arange(mask.shape[0])
    anchors[rows, first_col] = mask[rows, first_col]
    first_row = mask.argmax(axis=0)
    cols = np.arange(mask.shape[1])
    anchors[first_row, cols] |= mask[first_row, cols]
    return anchors


def cross_validate(Y: np.ndarray, mask: np.ndarray, grid: np.ndarray,
                   folds: int = 5, seed: int = 0, *,
                   tolerance: float = 1e-6, max_iter: int = 500,
                   demean_two_way: bool = True) -> CvReport:
    """Select a threshold by K-fold held-out-cell cross-validation.

    The observed cells (minus per-row / per-column anchor cells, which
    always stay in training so every fold keeps full row and column
    coverage) are shuffled with a seeded generator and dealt
    round-robin into ``folds`` folds.  For every grid value, each fold
    is predicted from a model fit on the remaining cells and scored by
    mean squared error.

    Raises
    ------
    ConfigError
        If ``folds < 2`` or the grid is not non-increasing.
    EstimationError
        If a fold would receive no cells (too many folds for the panel).
    """
    if folds < 2:
        raise ConfigError("folds must be at least 2")
    if isinstance(mask, ObservationMask):
        mask = mask.observed
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("grid must be a non-empty 1-d array")
    if np.any(np.diff(grid) > 0):
        raise ConfigError("grid must be sorted in non-increasing order")
    Y, mask = _check_inputs(Y, mask)

    anchors = _anchor_cells(mask)
    assignable = np.flatnonzero((mask & ~anchors).ravel())
    rng = np.random.default_rng(seed)
    order = rng.permutation(assignable)
    fold_of_cell = np.arange(order.size) % folds
    fold_sizes = tuple(int((fold_of_cell == f).sum()) for f in range(folds))
    if min(fold_sizes, default=0) == 0:
        raise EstimationError(
            f"a cross-validation fold would be empty "
            f"({order.size} assignable cells for {folds} folds); "
            "use fewer folds"
        )

    flat_shape = mask.shape
    mean_err = np.zeros((folds, grid.size))
    for f in range(folds):
        test_flat = order[fold_of_cell == f]
        test_mask = np.zeros(mask.size, dtype=bool)
        test_mask[test_flat] = True
        test_mask = test_mask.reshape(flat_shape)
        train_mask = mask & ~test_mask
        for j, lam in enumerate(grid):
            model = complete(Y, train_mask, lam, tolerance=tolerance,
                             max_iter=max_iter, demean_two_way=demean_two_way)
            pred = model.predict()
            err = (Y - pred)[test_mask]
            mean_err[f, j] = float(np.mean(err ** 2))

    mean_mse = mean_err.mean(axis=0)
    sd_mse = mean_err.std(axis=0, ddof=1)
    chosen = int(np.argmin(mean_mse))
    seed_norm = (int(seed) if isinstance(seed, (int, np.integer))
                 else tuple(int(s) for s in seed))
    return CvReport(
        grid=grid,
        mean_mse=mean_mse,
        sd_mse=sd_mse,
        chosen_index=chosen,
        folds=int(folds),
        seed=seed_norm,
        n_anchor_cells=int(anchors.sum()),
        fold_sizes=fold_sizes,
    )


@dataclass(frozen=True)
class FitConfig:
    """Settings for the end-to-end panel fit.

    ``lam`` is either a non-negative float (fixed singular-value
    threshold) or the string ``"cv"`` to select one from a
    ``grid_points``-long geometric grid by ``folds``-fold
    cross-validation seeded with ``cv_seed``.
    """

    lam: float | str = "cv"
    grid_points: int = 20
    folds: int = 5
    cv_seed: int = 0
    tolerance: float = 1e-6
    max_iter: int = 500
    demean_two_way: bool = True

    def validate(self) -> None:
        if isinstance(self.lam, str):
            if self.lam != "cv":
                raise ConfigError(
                    f"lam must be a non-negative number or 'cv', got {self.lam!r}"
                )
        elif not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError("lam must be finite and non-negative")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be at least 2")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be non-negative")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")


@dataclass(frozen=True)
class PanelFit:
    """Everything produced by :func:`fit_panel`: the completion model,
    the cross-validation trace (None for a fixed threshold), the full
    counterfactual prediction grid, and the training mask."""

    model: CompletionModel
    cv: CvReport | None
    counterfactual: np.ndarray
    mask: ObservationMask


def fit_panel(panel: PanelDataset, config: FitConfig = FitConfig()
              ) -> PanelFit:
    """Fit the untreated-outcome model to a panel.

    Builds the training mask (control cells plus treated pre-treatment
    cells), removes the covariate term if the panel carries covariates,
    resolves the threshold (fixed or by cross-validation), runs the
    completion, and predicts the counterfactual for every cell.
    """
    config.validate()
    mask = build_mask(panel)
    Y = panel.outcome
    if panel.covariates is not None:
        y_work, beta = residualize_covariates(Y, panel.covariates,
                                              mask.observed)
    else:
        y_work, beta = Y, np.zeros(0)

    try:
        cv = None
        if isinstance(config.lam, str):
            grid = lambda_grid(y_work, mask.observed, config.grid_points)
            cv = cross_validate(
                y_work, mask.observed, grid, config.folds, config.cv_seed,
                tolerance=config.tolerance, max_iter=config.max_iter,
                demean_two_way=config.demean_two_way,
            )
            lam = cv.chosen_lambda
        else:
            lam = float(config.lam)
        model = complete(
            y_work, mask.observed, lam, tolerance=config.tolerance,
            max_iter=config.max_iter, demean_two_way=config.demean_two_way,
        )
    except UnderIdentifiedError as exc:
        # Rewrite bare row/column indices in terms of the panel labels.
        if exc.row_index is not None:
            raise UnderIdentifiedError(
                f"unit {panel.unit_ids[exc.row_index]!r} has no observed "
                "untreated cells",
                row_index=exc.row_index,
            ) from None
        if exc.col_index is not None:
            raise UnderIdentifiedError(
                f"period {int(panel.times[exc.col_index])} has no observed "
                "untreated cells",
                col_index=exc.col_index,
            ) from None
        raise

    model = dataclasses.replace(model, beta=beta)
    counterfactual = model.predict(panel.covariates)
    return PanelFit(model=model, cv=cv, counterfactual=counterfactual,
                    mask=mask)
