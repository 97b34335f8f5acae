"""Panel containers, long-format ingestion, and observation masks.

A panel is a rectangular unit-by-period grid.  Units are split into
controls (never treated) and treated units, each with a single adoption
period after which their outcome is considered treated.  Missing cells
are carried as NaN, never as absent rows/columns: the period axis is a
dense integer range.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, UnderIdentifiedError

__all__ = [
    "PanelDataset",
    "ObservationMask",
    "EventView",
    "load_panel",
    "load_panel_csv",
    "write_panel_csv",
    "build_mask",
    "filter_min_pre_periods",
    "select_covariates",
    "condition_from_covariate",
    "to_event_time",
]


@dataclass(frozen=True)
class PanelDataset:
    """Immutable container for an outcome panel with staggered adoption.

    Parameters
    ----------
    unit_ids : tuple of str
        Unique unit labels, control units first, then treated units.
    times : ndarray of int, shape (T,)
        Dense, strictly increasing period index (consecutive integers).
        Calendar gaps must be encoded as missing outcomes, not as
        missing columns.
    outcome : ndarray, shape (N, T)
        Outcome values; NaN marks a missing cell.
    covariates : ndarray, shape (N, T, K), or None
        Time-varying covariates.  Missing covariate cells are imputed
        at load time (per-unit linear interpolation, flat at the
        boundaries), so this array is NaN-free when present.
    covariate_names : tuple of str
        Length-K covariate labels (empty when ``covariates`` is None).
    treatment_time : ndarray, shape (N,)
        Adoption period per unit; NaN for control units.  For treated
        units it satisfies ``times[0] < treatment_time <= times[-1]``
        so every treated unit has at least one pre-treatment period.
    condition_value : ndarray, shape (N,)
        Optional per-unit scalar used for stratified effects (for
        example the pre-treatment mean of a severity covariate); NaN
        when absent.
    baseline : ndarray, shape (N, T), or None
        Optional comparison series per unit (a naive counterfactual,
        such as a cross-control mean) used only by diagnostics.
    """

    unit_ids: tuple[str, ...]
    times: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    treatment_time: np.ndarray = field(default=None)  # type: ignore[assignment]
    condition_value: np.ndarray = field(default=None)  # type: ignore[assignment]
    baseline: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.unit_ids)
        if n == 0:
            raise DataError("panel has no units")
        if len(set(self.unit_ids)) != n:
            raise DataError("unit_ids must be unique")
        times = np.asarray(self.times, dtype=int)
        if times.ndim != 1 or times.size == 0:
            raise DataError("times must be a non-empty 1-d integer array")
        if times.size > 1 and not np.all(np.diff(times) == 1):
            raise DataError(
                "times must be consecutive integers; encode calendar gaps "
                "as missing outcomes, not missing columns"
            )
        object.__setattr__(self, "times", times)
        outcome = np.asarray(self.outcome, dtype=float)
        if outcome.shape != (n, times.size):
            raise DataError(
                f"outcome shape {outcome.shape} does not match "
                f"{n} units x {times.size} periods"
            )
        object.__setattr__(self, "outcome", outcome)

        if self.treatment_time is None:
            tt = np.full(n, np.nan)
        else:
            tt = np.asarray(self.treatment_time, dtype=float)
        if tt.shape != (n,):
            raise DataError("treatment_time must have one entry per unit")
        object.__setattr__(self, "treatment_time", tt)

        if self.condition_value is None:
            cond = np.full(n, np.nan)
        else:
            cond = np.asarray(self.condition_value, dtype=float)
        if cond.shape != (n,):
            raise DataError("condition_value must have one entry per unit")
        object.__setattr__(self, "condition_value", cond)

        treated = ~np.isnan(tt)
        # Controls-first ordering: no control may appear after a treated unit.
        if treated.any() and (~treated).any():
            first_treated = int(np.argmax(treated))
            if (~treated[first_treated:]).any():
                raise DataError(
                    "units must be ordered with all control units before "
                    "all treated units"
                )
        tmin, tmax = int(times[0]), int(times[-1])
        bad = treated & ~((tt > tmin) & (tt <= tmax))
        if bad.any():
            offenders = [self.unit_ids[i] for i in np.flatnonzero(bad)]
            raise DataError(
                "treatment_time must lie strictly after the first period "
                f"and at or before the last period; offending units: {offenders}"
            )
        frac = tt[treated] % 1.0
        if treated.any() and not np.allclose(frac, 0.0):
            raise DataError("treatment_time must be an integer period index")

        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim != 3 or cov.shape[:2] != (n, times.size):
                raise DataError(
                    "covariates must have shape (n_units, n_periods, n_covariates)"
                )
            if cov.shape[2] != len(self.covariate_names):
                raise DataError(
                    "covariate_names length must match the covariate axis"
                )
            object.__setattr__(self, "covariates", cov)
        elif self.covariate_names:
            raise DataError("covariate_names given without covariates")

        if self.baseline is not None:
            base = np.asarray(self.baseline, dtype=float)
            if base.shape != outcome.shape:
                raise DataError("baseline must have the same shape as outcome")
            object.__setattr__(self, "baseline", base)

    # -- derived views ---------------------------------------------------

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_periods(self) -> int:
        return int(self.times.size)

    @property
    def is_treated(self) -> np.ndarray:
        """Boolean mask over units, True for treated units."""
        return ~np.isnan(self.treatment_time)

    @property
    def n_treated(self) -> int:
        return int(self.is_treated.sum())

    @property
    def n_controls(self) -> int:
        return self.n_units - self.n_treated

    @property
    def treated_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_treated)

    def time_index(self, t: int) -> int:
        """Column position of calendar period ``t``."""
        pos = int(t) - int(self.times[0])
        if pos < 0 or pos >= self.n_periods:
            raise DataError(f"period {t} is outside the panel calendar")
        return pos

    def subset_units(self, keep: Sequence[int]) -> "PanelDataset":
        """Return a new panel holding the units at positions ``keep``
        (order preserved).  The calendar is kept in full."""
        keep = np.asarray(keep, dtype=int)
        return PanelDataset(
            unit_ids=tuple(self.unit_ids[i] for i in keep),
            times=self.times,
            outcome=self.outcome[keep],
            covariates=None if self.covariates is None else self.covariates[keep],
            covariate_names=self.covariate_names,
            treatment_time=self.treatment_time[keep],
            condition_value=self.condition_value[keep],
            baseline=None if self.baseline is None else self.baseline[keep],
        )


@dataclass(frozen=True)
class ObservationMask:
    """Boolean grid of cells the low-rank model may train on.

    True cells are non-missing outcomes that are untreated: every cell
    of a control unit, and pre-treatment cells of treated units.  Cells
    of treated units at or after their adoption period are always
    False, whether or not the outcome was recorded.
    """

    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=bool)
        object.__setattr__(self, "observed", obs)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def row_counts(self) -> np.ndarray:
        return self.observed.sum(axis=1)

    def col_counts(self) -> np.ndarray:
        return self.observed.sum(axis=0)


@dataclass(frozen=True)
class EventView:
    """Treated-unit outcomes re-indexed to event time.

    ``values[i, j]`` is the outcome of treated unit ``i`` at event time
    ``event_times[j]`` (periods since adoption, 0 = adoption period);
    NaN where the calendar runs out or the outcome is missing.
    """

    unit_ids: tuple[str, ...]
    event_times: np.ndarray
    values: np.ndarray
    treatment_time: np.ndarray


# -- ingestion -------------------------------------------------------------

_RESERVED_COLUMNS = ("unit_id", "time", "outcome", "treatment_time",
                     "condition_value", "baseline")


def load_panel(records: Iterable[Mapping[str, object]]) -> PanelDataset:
    """Build a :class:`PanelDataset` from long-format records.

    Each record is a mapping with keys ``unit_id``, ``time`` (int),
    ``outcome`` (float or None), and optionally ``treatment_time``
    (int or None; None / absent means control), ``condition_value``,
    ``baseline``, and ``covariates`` (a sequence of float-or-None).

    Missing (unit, period) combinations inside the calendar range
    become NaN cells.  Units are canonicalized controls-first, each
    block sorted by id, so the result does not depend on record order.
    Duplicate (unit, period) pairs, units whose records disagree on
    ``treatment_time`` or ``condition_value``, and panels with zero
    control units are rejected with :class:`DataError`.
    """
    rows = list(records)
    if not rows:
        raise DataError("no records supplied")

    n_cov = None
    cov_names: tuple[str, ...] = ()
    for r in rows:
        cov = r.get("covariates")
        k = 0 if cov is None else len(cov)  # type: ignore[arg-type]
        if n_cov is None:
            n_cov = k
            names = r.get("covariate_names")
            if names:
                cov_names = tuple(str(x) for x in names)  # type: ignore[union-attr]
            elif k:
                cov_names = tuple(f"cov_{j}" for j in range(k))
        elif k != n_cov:
            raise DataError(
                "records disagree on the number of covariates "
                f"({n_cov} vs {k})"
            )
    n_cov = n_cov or 0

    seen: set[tuple[str, int]] = set()
    per_unit_tt: dict[str, float] = {}
    per_unit_cond: dict[str, float] = {}
    unit_order: list[str] = []
    t_lo = math.inf
    t_hi = -math.inf
    for r in rows:
        uid = str(r["unit_id"])
        t = int(r["time"])  # type: ignore[arg-type]
        key = (uid, t)
        if key in seen:
            raise DataError(f"duplicate record for unit {uid!r} at period {t}")
        seen.add(key)
        if uid not in per_unit_tt:
            unit_order.append(uid)
            per_unit_tt[uid] = math.nan
            per_unit_cond[uid] = math.nan
        t_lo = min(t_lo, t)
        t_hi = max(t_hi, t)

        # Per-unit metadata: a record may omit the value, but records
        # that do carry it must agree.
        tt_raw = r.get("treatment_time")
        if tt_raw is not None:
            tt = float(tt_raw)  # type: ignore[arg-type]
            prev = per_unit_tt[uid]
            if not math.isnan(prev) and prev != tt:
                raise DataError(
                    f"unit {uid!r} has inconsistent treatment_time "
                    f"({prev:g} vs {tt:g})"
                )
            per_unit_tt[uid] = tt

        cond_raw = r.get("condition_value")
        if cond_raw is not None:
            cond = float(cond_raw)  # type: ignore[arg-type]
            prev = per_unit_cond[uid]
            if not math.isnan(prev) and prev != cond:
                raise DataError(
                    f"unit {uid!r} has inconsistent condition_value "
                    f"({prev:g} vs {cond:g})"
                )
            per_unit_cond[uid] = cond

    controls = sorted(u for u in unit_order if math.isnan(per_unit_tt[u]))
    treated = sorted(u for u in unit_order if not math.isnan(per_unit_tt[u]))
    if not controls:
        raise DataError("panel contains zero control units")
    unit_ids = controls + treated
    unit_pos = {u: i for i, u in enumerate(unit_ids)}

    times = np.arange(int(t_lo), int(t_hi) + 1)
    n, T = len(unit_ids), times.size
    outcome = np.full((n, T), np.nan)
    baseline = np.full((n, T), np.nan)
    any_baseline = False
    cov = np.full((n, T, n_cov), np.nan) if n_cov else None

    for r in rows:
        i = unit_pos[str(r["unit_id"])]
        j = int(r["time"]) - int(t_lo)  # type: ignore[arg-type]
        y = r.get("outcome")
        outcome[i, j] = np.nan if y is None else float(y)  # type: ignore[arg-type]
        b = r.get("baseline")
        if b is not None:
            baseline[i, j] = float(b)  # type: ignore[arg-type]
            any_baseline = True
        if cov is not None:
            vals = r.get("covariates")
            if vals is not None:
                for k, v in enumerate(vals):  # type: ignore[arg-type]
                    cov[i, j, k] = np.nan if v is None else float(v)

    if cov is not None:
        cov = _interpolate_covariates(cov)

    return PanelDataset(
        unit_ids=tuple(unit_ids),
        times=times,
        outcome=outcome,
        covariates=cov,
        covariate_names=cov_names if cov is not None else (),
        treatment_time=np.array([per_unit_tt[u] for u in unit_ids]),
        condition_value=np.array([per_unit_cond[u] for u in unit_ids]),
        baseline=baseline if any_baseline else None,
    )


def _interpolate_covariates(cov: np.ndarray) -> np.ndarray:
    """Fill missing covariate cells per unit and covariate by linear
    interpolation over the period axis, extending flat at the edges.
    A series with no observed value at all is filled with zeros."""
    out = cov.copy()
    n, T, K = cov.shape
    idx = np.arange(T)
    for i in range(n):
        for k in range(K):
            series = out[i, :, k]
            good = ~np.isnan(series)
            if good.all():
                continue
            if not good.any():
                out[i, :, k] = 0.0
                continue
            out[i, :, k] = np.interp(idx, idx[good], series[good])
    return out


def _parse_time(token: str, origin: _dt.date | None,
                cadence_days: int) -> tuple[int, _dt.date | None]:
    """Parse a time token that is either an integer period index or an
    ISO date.  Dates are converted to period indices on a fixed cadence
    anchored at the first date seen."""
    token = token.strip()
    try:
        return int(token), origin
    except ValueError:
        pass
    try:
        day = _dt.date.fromisoformat(token)
    except ValueError as exc:
        raise DataError(
            f"time value {token!r} is neither an integer nor an ISO date"
        ) from exc
    if origin is None:
        origin = day
    span = (day - origin).days
    if span % cadence_days != 0:
        raise DataError(
            f"date {token} is not a whole number of {cadence_days}-day "
            "periods from the first date"
        )
    return span // cadence_days, origin


def load_panel_csv(path, cadence_days: int = 16) -> PanelDataset:
    """Read a long-format CSV into a :class:`PanelDataset`.

    Expected header: ``unit_id,time,outcome,treatment_time`` plus
    optional ``condition_value``, ``baseline``, and any number of
    covariate columns prefixed ``cov_``.  Empty strings are missing
    values; a unit with an empty ``treatment_time`` everywhere is a
    control.  ``time`` may be integer period indices or ISO dates on a
    fixed cadence (default 16 days).
    """
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        fields = list(reader.fieldnames)
        for req in ("unit_id", "time", "outcome"):
            if req not in fields:
                raise DataError(f"{path}: missing required column {req!r}")
        cov_cols = [c for c in fields if c.startswith("cov_")]
        unknown = [c for c in fields
                   if c not in _RESERVED_COLUMNS and c not in cov_cols]
        if unknown:
            raise DataError(f"{path}: unrecognized columns {unknown}")

        origin: _dt.date | None = None
        records: list[dict[str, object]] = []
        for lineno, row in enumerate(reader, start=2):
            uid = (row.get("unit_id") or "").strip()
            if not uid:
                raise DataError(f"{path}:{lineno}: empty unit_id")
            t, origin = _parse_time(row["time"], origin, cadence_days)
            rec: dict[str, object] = {"unit_id": uid, "time": t}

            def _num(col: str) -> float | None:
                raw = (row.get(col) or "").strip()
                if raw == "":
                    return None
                try:
                    return float(raw)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: bad numeric value {raw!r} in {col}"
                    ) from None

            rec["outcome"] = _num("outcome")
            raw_tt = (row.get("treatment_time") or "").strip()
            if raw_tt:
                t0, origin = _parse_time(raw_tt, origin, cadence_days)
                rec["treatment_time"] = t0
            rec["condition_value"] = _num("condition_value")
            if "baseline" in fields:
                rec["baseline"] = _num("baseline")
            if cov_cols:
                rec["covariates"] = [_num(c) for c in cov_cols]
                rec["covariate_names"] = cov_cols
            records.append(rec)
    return load_panel(records)


def _fmt(x: float) -> str:
    """Shortest-roundtrip float formatting; NaN becomes the empty string."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_panel_csv(panel: PanelDataset, path) -> None:
    """Write ``panel`` as the long-format CSV accepted by
    :func:`load_panel_csv`.  Missing cells become empty strings."""
    has_baseline = panel.baseline is not None
    header = ["unit_id", "time", "outcome", "treatment_time", "condition_value"]
    if has_baseline:
        header.append("baseline")
    header.extend(panel.covariate_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, uid in enumerate(panel.unit_ids):
            tt = panel.treatment_time[i]
            cond = panel.condition_value[i]
            for j, t in enumerate(panel.times):
                row = [uid, str(int(t)), _fmt(panel.outcome[i, j]),
                       _fmt(tt), _fmt(cond)]
                if has_baseline:
                    row.append(_fmt(panel.baseline[i, j]))
                if panel.covariates is not None:
                    row.extend(_fmt(v) for v in panel.covariates[i, j])
                writer.writerow(row)


# -- mask and filters --------------------------------------------------------


def build_mask(panel: PanelDataset) -> ObservationMask:
    """Return the training mask: non-missing control cells plus
    non-missing pre-treatment cells of treated units.

    Raises
    ------
    UnderIdentifiedError
        If no cell at all is eligible for training.
    """
    obs = ~np.isnan(panel.outcome)
    for i in panel.treated_indices:
        j0 = panel.time_index(int(panel.treatment_time[i]))
        obs[i, j0:] = False
    if not obs.any():
        raise UnderIdentifiedError(
            "no trainable cells: every outcome is missing or treated"
        )
    return ObservationMask(observed=obs)


def filter_min_pre_periods(panel: PanelDataset, tau: int
                           ) -> tuple[PanelDataset, tuple[str, ...]]:
    """Drop treated units with fewer than ``tau`` non-missing
    pre-treatment observations.

    Control units are never dropped.  Returns the filtered panel and
    the tuple of dropped unit ids (empty when nothing was dropped, so
    the operation is idempotent).

    Raises
    ------
    DataError
        If every treated unit fails the threshold; the message advises
        lowering ``tau``.
    """
    if tau < 0:
        raise DataError("tau must be non-negative")
    keep: list[int] = []
    dropped: list[str] = []
    observed = ~np.isnan(panel.outcome)
    for i in range(panel.n_units):
        t0 = panel.treatment_time[i]
        if math.isnan(t0):
            keep.append(i)
            continue
        j0 = panel.time_index(int(t0))
        if int(observed[i, :j0].sum()) >= tau:
            keep.append(i)
        else:
            dropped.append(panel.unit_ids[i])
    if panel.n_treated and len(dropped) == panel.n_treated:
        raise DataError(
            f"all {panel.n_treated} treated units have fewer than {tau} "
            "pre-treatment observations; lower tau or supply longer history"
        )
    if not dropped:
        return panel, ()
    return panel.subset_units(keep), tuple(dropped)


def select_covariates(panel: PanelDataset, names: Sequence[str]
                      ) -> PanelDataset:
    """Return a panel keeping only the named covariate columns (order
    as given).  Selecting nothing drops the covariate block."""
    if not names:
        return PanelDataset(
            unit_ids=panel.unit_ids, times=panel.times,
            outcome=panel.outcome, covariates=None, covariate_names=(),
            treatment_time=panel.treatment_time,
            condition_value=panel.condition_value, baseline=panel.baseline,
        )
    if panel.covariates is None:
        raise DataError("panel has no covariates to select from")
    missing = [n for n in names if n not in panel.covariate_names]
    if missing:
        raise DataError(f"unknown covariate columns: {missing}")
    idx = [panel.covariate_names.index(n) for n in names]
    return PanelDataset(
        unit_ids=panel.unit_ids, times=panel.times, outcome=panel.outcome,
        covariates=panel.covariates[:, :, idx],
        covariate_names=tuple(names),
        treatment_time=panel.treatment_time,
        condition_value=panel.condition_value, baseline=panel.baseline,
    )


def condition_from_covariate(panel: PanelDataset, name: str) -> PanelDataset:
    """Set each treated unit's condition value to the mean of one
    covariate over its pre-treatment periods."""
    if panel.covariates is None or name not in panel.covariate_names:
        raise DataError(f"panel has no covariate column {name!r}")
    k = panel.covariate_names.index(name)
    cond = panel.condition_value.copy()
    for i in panel.treated_indices:
        j0 = panel.time_index(int(panel.treatment_time[i]))
        if j0 == 0:
            raise DataError(
                f"unit {panel.unit_ids[i]!r} has no pre-treatment periods "
                "to average the conditioning covariate over"
            )
        cond[i] = float(panel.covariates[i, :j0, k].mean())
    return PanelDataset(
        unit_ids=panel.unit_ids, times=panel.times, outcome=panel.outcome,
        covariates=panel.covariates, covariate_names=panel.covariate_names,
        treatment_time=panel.treatment_time, condition_value=cond,
        baseline=panel.baseline,
    )


def to_event_time(panel: PanelDataset, window: tuple[int, int]) -> EventView:
    """Re-index treated-unit outcomes to event time.

    ``window = (pre, post)`` selects event times ``-pre .. post``
    inclusive, where event time 0 is the adoption period.  Cells
    outside the calendar are NaN.
    """
    pre, post = int(window[0]), int(window[1])
    if pre < 0 or post < 0:
        raise DataError("window lengths must be non-negative")
    ev = np.arange(-pre, post + 1)
    tr = panel.treated_indices
    values = np.full((tr.size, ev.size), np.nan)
    for r, i in enumerate(tr):
        j0 = panel.time_index(int(panel.treatment_time[i]))
        for c, e in enumerate(ev):
            j = j0 + int(e)
            if 0 <= j < panel.n_periods:
                values[r, c] = panel.outcome[i, j]
    return EventView(
        unit_ids=tuple(panel.unit_ids[i] for i in tr),
        event_times=ev,
        values=values,
        treatment_time=panel.treatment_time[tr].astype(int)
        if tr.size else np.zeros(0, dtype=int),
    )
