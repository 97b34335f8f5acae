"""Command-line pipeline: simulate, fit, effects, diagnose.

Every command reads one TOML config (its own section), writes only into
the ``--out`` directory, and finishes by writing a ``manifest.json``
recording the resolved configuration, the effective seed, and a sha256
hash of every emitted file.  Outputs are plain CSV / JSON and are byte
reproducible: same config, same seed, same files.

Relative paths inside a config file resolve against the directory the
config file lives in, so a run directory containing its config and its
inputs is self-contained.

Exit codes: 0 success, 1 data/estimation failure, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .completion import FitConfig, fit_panel
from .diagnostics import pre_fit_report, placebo_in_time, write_fit_report_csv
from .effects import (
    bootstrap_se,
    catt,
    cumulative,
    estimate_effects,
    split_eras,
    stratify,
    write_att_csv,
    write_catt_csv,
    write_cumulative_csv,
    write_unit_effects_csv,
)
from .errors import ConfigError, DataError, PanelcfError
from .panel import (
    PanelDataset,
    condition_from_covariate,
    filter_min_pre_periods,
    load_panel_csv,
    select_covariates,
    write_panel_csv,
    _fmt,
)
from .simulate import EffectShape, FactorSpec, SimConfig, default_factors, generate

__all__ = ["main"]


# ---------------------------------------------------------------------------
# small shared helpers

def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"config is missing the [{name}] section")
    return sec


def _require(sec: dict, key: str, where: str):
    if key not in sec:
        raise ConfigError(f"missing required field {where}.{key}")
    return sec[key]


def _check_keys(sec: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"unknown fields in [{where}]: {unknown}")


def _as_window(value, where: str) -> tuple[int, int]:
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(v, int) for v in value)):
        raise ConfigError(f"{where} must be a two-integer list [pre, post]")
    if value[0] < 0 or value[1] < 0:
        raise ConfigError(f"{where} entries must be non-negative")
    return int(value[0]), int(value[1])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, config_section: dict,
                    seed, files: list[str]) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config_section,
        "seed": seed,
        "outputs": {name: _sha256(out_dir / name) for name in sorted(files)},
    }
    _write_json(out_dir / "manifest.json", manifest)


def _write_counterfactual_csv(panel: PanelDataset, cf: np.ndarray,
                              path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "time", "observed", "counterfactual",
                    "baseline"])
        for i, uid in enumerate(panel.unit_ids):
            for j, t in enumerate(panel.times):
                base = (panel.baseline[i, j] if panel.baseline is not None
                        else float("nan"))
                w.writerow([uid, str(int(t)), _fmt(panel.outcome[i, j]),
                            _fmt(cf[i, j]), _fmt(base)])


def _read_counterfactual_csv(path: Path, panel: PanelDataset) -> np.ndarray:
    """Load a counterfactual grid written by ``fit`` and align it to
    ``panel``; the unit and period coverage must match exactly."""
    if not path.exists():
        raise DataError(f"missing counterfactual file: {path}")
    pos = {u: i for i, u in enumerate(panel.unit_ids)}
    t0 = int(panel.times[0])
    cf = np.full(panel.outcome.shape, np.nan)
    filled = np.zeros(panel.outcome.shape, dtype=bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            uid = row["unit_id"]
            if uid not in pos:
                raise DataError(
                    f"{path} covers unit {uid!r} which is not in the panel; "
                    "the fit directory does not match this input"
                )
            j = int(row["time"]) - t0
            if not 0 <= j < panel.n_periods:
                raise DataError(
                    f"{path} covers period {row['time']} outside the panel"
                )
            cf[pos[uid], j] = float(row["counterfactual"])
            filled[pos[uid], j] = True
    if not filled.all():
        raise DataError(
            f"{path} does not cover every panel cell; "
            "the fit directory does not match this input"
        )
    return cf


# ---------------------------------------------------------------------------
# config -> objects

_SIM_PANEL_KEYS = {
    "n_control", "n_treated", "n_periods", "rank", "factors",
    "loading_scale", "loading_shift_treated", "beta_true",
    "covariate_process", "noise_sd", "missing_rate", "effect",
    "treatment_window", "condition_link", "seed",
}

_FACTOR_KEYS = {"kind", "period", "phase", "amplitude"}
_EFFECT_KEYS = {"kind", "level", "half_life", "fraction"}


def _build_sim_config(psec: dict, seed_override: int | None) -> SimConfig:
    _check_keys(psec, _SIM_PANEL_KEYS, "simulate.panel")
    for key in ("n_control", "n_treated", "n_periods"):
        _require(psec, key, "simulate.panel")

    rank = int(psec.get("rank", 1))
    if "factors" in psec:
        raw = psec["factors"]
        if not isinstance(raw, list):
            raise ConfigError("simulate.panel.factors must be an array of tables")
        factors = []
        for k, f in enumerate(raw):
            _check_keys(f, _FACTOR_KEYS, f"simulate.panel.factors[{k}]")
            defaults = FactorSpec()
            factors.append(FactorSpec(
                kind=str(f.get("kind", defaults.kind)),
                period=int(f.get("period", defaults.period)),
                phase=float(f.get("phase", defaults.phase)),
                amplitude=float(f.get("amplitude", defaults.amplitude)),
            ))
        factors = tuple(factors)
    else:
        factors = default_factors(rank)

    esec = psec.get("effect", {})
    _check_keys(esec, _EFFECT_KEYS, "simulate.panel.effect")
    edef = EffectShape()
    effect = EffectShape(
        kind=str(esec.get("kind", edef.kind)),
        level=float(esec.get("level", edef.level)),
        half_life=float(esec.get("half_life", edef.half_life)),
        fraction=float(esec.get("fraction", edef.fraction)),
    )

    window = psec.get("treatment_window", SimConfig().treatment_window)
    if (not isinstance(window, (list, tuple)) or len(window) != 2
            or not all(isinstance(v, int) for v in window)):
        raise ConfigError(
            "simulate.panel.treatment_window must be [earliest, latest]"
        )

    seed = int(psec.get("seed", 0)) if seed_override is None else seed_override

    cfg = SimConfig(
        n_control=int(psec["n_control"]),
        n_treated=int(psec["n_treated"]),
        n_periods=int(psec["n_periods"]),
        rank=rank,
        factors=factors,
        loading_scale=float(psec.get("loading_scale", 0.2)),
        loading_shift_treated=float(psec.get("loading_shift_treated", 0.0)),
        beta_true=tuple(float(b) for b in psec.get("beta_true", ())),
        covariate_process=str(psec.get("covariate_process", "iid_normal")),
        noise_sd=float(psec.get("noise_sd", 0.02)),
        missing_rate=float(psec.get("missing_rate", 0.0)),
        effect=effect,
        treatment_window=(int(window[0]), int(window[1])),
        condition_link=float(psec.get("condition_link", 0.0)),
        seed=seed,
    )
    cfg.validate()
    return cfg


_FIT_KEYS = {
    "input", "cadence_days", "window", "lambda", "grid_points", "folds",
    "demean", "tolerance", "max_iter", "seed", "covariates",
    "condition_from", "min_pre_periods", "min_pre_years", "strata_groups",
    "cumulative_from", "bootstrap", "era_cut",
}


def _resolve_tau(sec: dict, cadence_days: int, where: str) -> int:
    if "min_pre_periods" in sec and "min_pre_years" in sec:
        raise ConfigError(
            f"{where}: give min_pre_periods or min_pre_years, not both"
        )
    if "min_pre_years" in sec:
        years = float(sec["min_pre_years"])
        if years < 0:
            raise ConfigError(f"{where}.min_pre_years must be non-negative")
        return int(round(years * 365.25 / cadence_days))
    tau = int(sec.get("min_pre_periods", 1))
    if tau < 0:
        raise ConfigError(f"{where}.min_pre_periods must be non-negative")
    return tau


def _load_input_panel(sec: dict, base: Path, where: str
                      ) -> tuple[PanelDataset, tuple[str, ...], int]:
    """Shared ingest chain: read CSV, select covariates, derive the
    condition value, apply the minimum-history filter."""
    input_rel = str(_require(sec, "input", where))
    cadence = int(sec.get("cadence_days", 16))
    if cadence < 1:
        raise ConfigError(f"{where}.cadence_days must be positive")
    panel = load_panel_csv(base / input_rel, cadence_days=cadence)

    if "covariates" in sec:
        names = sec["covariates"]
        if not isinstance(names, list):
            raise ConfigError(f"{where}.covariates must be a list of names")
        panel = select_covariates(panel, [str(n) for n in names])

    cond_from = str(sec.get("condition_from", "condition_value"))
    if cond_from != "condition_value":
        panel = condition_from_covariate(panel, cond_from)

    tau = _resolve_tau(sec, cadence, where)
    panel, dropped = filter_min_pre_periods(panel, tau)
    return panel, dropped, tau


def _fit_config_from_section(sec: dict, seed: int, where: str) -> FitConfig:
    lam = sec.get("lambda", "cv")
    if isinstance(lam, str) and lam != "cv":
        raise ConfigError(f"{where}.lambda must be a number or 'cv'")
    cfg = FitConfig(
        lam=lam if isinstance(lam, str) else float(lam),
        grid_points=int(sec.get("grid_points", 20)),
        folds=int(sec.get("folds", 5)),
        cv_seed=seed,
        tolerance=float(sec.get("tolerance", 1e-6)),
        max_iter=int(sec.get("max_iter", 500)),
        demean_two_way=bool(sec.get("demean", True)),
    )
    cfg.validate()
    return cfg


def _effect_products(panel: PanelDataset, fit_or_grid, window, sec: dict,
                     out_dir: Path, files: list[str], *, seed: int,
                     threads: int, reselect: bool, fit_config: FitConfig,
                     lam_for_boot: float | None, where: str) -> None:
    """Estimate effects and write the CSV/JSON family shared by the
    fit and effects commands (att, per-unit, strata, cumulative,
    bootstrap)."""
    effects = estimate_effects(panel, fit_or_grid, window)

    B = int(sec.get("bootstrap", 0))
    if B:
        boot = bootstrap_se(
            panel, window, B, seed, fit_config,
            lam=None if reselect else lam_for_boot,
            reselect_lambda=reselect, n_workers=threads,
        )
        effects = effects.with_uncertainty(boot)
        _write_json(out_dir / "bootstrap.json", boot.to_json_dict())
        files.append("bootstrap.json")

    write_att_csv(effects, out_dir / "effects_att.csv")
    write_unit_effects_csv(effects, out_dir / "effects_units.csv")
    files.extend(["effects_att.csv", "effects_units.csv"])

    groups = int(sec.get("strata_groups", 0))
    if groups:
        spec = stratify(panel, groups)
        result = catt(effects, spec)
        write_catt_csv(result, out_dir / "catt.csv")
        _write_json(out_dir / "strata.json", spec.to_json_dict())
        files.extend(["catt.csv", "strata.json"])

    cum_from = int(sec.get("cumulative_from", 0))
    cum = cumulative(effects, cum_from)
    write_cumulative_csv(cum, out_dir / "cumulative.csv")
    files.append("cumulative.csv")


# ---------------------------------------------------------------------------
# commands

def _cmd_simulate(cfg: dict, base: Path, out_dir: Path,
                  args: argparse.Namespace) -> None:
    sec = _section(cfg, "simulate")
    _check_keys(sec, {"panel", "panel_file", "truth_file"}, "simulate")
    psec = sec.get("panel")
    if not isinstance(psec, dict):
        raise ConfigError("config is missing the [simulate.panel] table")
    sim_cfg = _build_sim_config(psec, args.seed)

    panel, truth = generate(sim_cfg)
    panel_file = str(sec.get("panel_file", "panel.csv"))
    truth_file = str(sec.get("truth_file", "ground_truth.json"))
    write_panel_csv(panel, out_dir / panel_file)
    truth_doc = truth.to_json_dict()
    truth_doc["config"] = sim_cfg.to_json_dict()
    _write_json(out_dir / truth_file, truth_doc)
    _write_manifest(out_dir, "simulate", sec, sim_cfg.seed,
                    [panel_file, truth_file])


def _cmd_fit(cfg: dict, base: Path, out_dir: Path,
             args: argparse.Namespace) -> None:
    sec = _section(cfg, "fit")
    _check_keys(sec, _FIT_KEYS, "fit")
    window = _as_window(_require(sec, "window", "fit"), "fit.window")
    seed = int(sec.get("seed", 0)) if args.seed is None else args.seed

    panel, dropped, tau = _load_input_panel(sec, base, "fit")
    fit_config = _fit_config_from_section(sec, seed, "fit")
    fit = fit_panel(panel, fit_config)

    files: list[str] = []
    _write_counterfactual_csv(panel, fit.counterfactual,
                              out_dir / "counterfactual_full.csv")
    files.append("counterfactual_full.csv")

    summary = fit.model.summary()
    summary.update({
        "lambda_policy": "cv" if isinstance(fit_config.lam, str) else "fixed",
        "n_units": panel.n_units,
        "n_treated": panel.n_treated,
        "n_controls": panel.n_controls,
        "n_periods": panel.n_periods,
        "min_pre_periods": tau,
        "dropped_units": list(dropped),
        "window": list(window),
    })
    _write_json(out_dir / "model_summary.json", summary)
    files.append("model_summary.json")
    if fit.cv is not None:
        _write_json(out_dir / "cv_report.json", fit.cv.to_json_dict())
        files.append("cv_report.json")

    _effect_products(
        panel, fit, window, sec, out_dir, files,
        seed=seed, threads=args.threads, reselect=args.bootstrap_recv,
        fit_config=fit_config, lam_for_boot=fit.model.lam, where="fit",
    )

    report = pre_fit_report(panel, fit.counterfactual)
    _write_json(out_dir / "fit_report.json", report.to_json_dict())
    write_fit_report_csv(report, out_dir / "fit_report_units.csv")
    files.extend(["fit_report.json", "fit_report_units.csv"])

    if "era_cut" in sec:
        cut = int(sec["era_cut"])
        early, late = split_eras(panel, cut)
        era_att = {}
        for tag, sub in (("era_early", early), ("era_late", late)):
            subdir = out_dir / tag
            subdir.mkdir(exist_ok=True)
            sub_fit = fit_panel(sub, fit_config)
            sub_eff = estimate_effects(sub, sub_fit, window)
            write_att_csv(sub_eff, subdir / "effects_att.csv")
            write_unit_effects_csv(sub_eff, subdir / "effects_units.csv")
            files.extend([f"{tag}/effects_att.csv",
                          f"{tag}/effects_units.csv"])
            era_att[tag] = sub_eff
        ev = era_att["era_early"].event_times
        a, b = era_att["era_early"].att, era_att["era_late"].att
        gap = b - a

        def vec(x):
            return [None if np.isnan(v) else float(v) for v in x]

        _write_json(out_dir / "era_comparison.json", {
            "cut_time": cut,
            "event_times": [int(e) for e in ev],
            "att_early": vec(a),
            "att_late": vec(b),
            "att_late_minus_early": vec(gap),
            "n_treated_early": early.n_treated,
            "n_treated_late": late.n_treated,
        })
        files.append("era_comparison.json")

    _write_manifest(out_dir, "fit", sec, seed, files)


def _read_fit_dir(fit_dir: Path) -> tuple[dict, dict]:
    """Load the manifest and model summary left behind by ``fit``."""
    man_path = fit_dir / "manifest.json"
    if not man_path.exists():
        raise DataError(f"{fit_dir} has no manifest.json (not a fit directory?)")
    manifest = json.loads(man_path.read_text())
    if manifest.get("command") != "fit":
        raise DataError(f"{fit_dir} was produced by "
                        f"{manifest.get('command')!r}, expected a fit run")
    summary = json.loads((fit_dir / "model_summary.json").read_text())
    return manifest, summary


def _rebuild_fit_panel(fit_sec: dict, input_rel: str, base: Path
                       ) -> PanelDataset:
    """Re-run the fit command's ingest chain on ``input_rel`` so a
    downstream command sees exactly the panel the model was fit on."""
    sec = dict(fit_sec)
    sec["input"] = input_rel
    panel, _dropped, _tau = _load_input_panel(sec, base, "fit")
    return panel


def _cmd_effects(cfg: dict, base: Path, out_dir: Path,
                 args: argparse.Namespace) -> None:
    sec = _section(cfg, "effects")
    _check_keys(sec, {"fit_dir", "input", "window", "strata_groups",
                      "cumulative_from", "bootstrap", "seed"}, "effects")
    fit_dir = base / str(_require(sec, "fit_dir", "effects"))
    window = _as_window(_require(sec, "window", "effects"), "effects.window")

    manifest, summary = _read_fit_dir(fit_dir)
    fit_sec = manifest["config"]
    panel = _rebuild_fit_panel(fit_sec, str(_require(sec, "input", "effects")),
                               base)
    cf = _read_counterfactual_csv(fit_dir / "counterfactual_full.csv", panel)

    seed = (int(sec.get("seed", manifest.get("seed", 0)))
            if args.seed is None else args.seed)
    fit_config = _fit_config_from_section(fit_sec, seed, "fit")

    files: list[str] = []
    _effect_products(
        panel, cf, window, sec, out_dir, files,
        seed=seed, threads=args.threads, reselect=args.bootstrap_recv,
        fit_config=fit_config, lam_for_boot=float(summary["lambda"]),
        where="effects",
    )
    _write_manifest(out_dir, "effects", sec, seed, files)


def _cmd_diagnose(cfg: dict, base: Path, out_dir: Path,
                  args: argparse.Namespace) -> None:
    sec = _section(cfg, "diagnose")
    _check_keys(sec, {"fit_dir", "input", "window", "placebo_shift"},
                "diagnose")
    fit_dir = base / str(_require(sec, "fit_dir", "diagnose"))

    manifest, summary = _read_fit_dir(fit_dir)
    fit_sec = manifest["config"]
    panel = _rebuild_fit_panel(fit_sec, str(_require(sec, "input", "diagnose")),
                               base)
    cf = _read_counterfactual_csv(fit_dir / "counterfactual_full.csv", panel)

    files: list[str] = []
    report = pre_fit_report(panel, cf)
    _write_json(out_dir / "fit_report.json", report.to_json_dict())
    write_fit_report_csv(report, out_dir / "fit_report_units.csv")
    files.extend(["fit_report.json", "fit_report_units.csv"])

    # Pre-treatment scatter data: one row per observed pre-adoption cell.
    with open(out_dir / "scatter_pre.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "time", "observed", "counterfactual",
                    "baseline"])
        for i in panel.treated_indices:
            j0 = panel.time_index(int(panel.treatment_time[i]))
            for j in range(j0):
                if np.isnan(panel.outcome[i, j]):
                    continue
                base_val = (panel.baseline[i, j]
                            if panel.baseline is not None else float("nan"))
                w.writerow([panel.unit_ids[i], str(int(panel.times[j])),
                            _fmt(panel.outcome[i, j]), _fmt(cf[i, j]),
                            _fmt(base_val)])
    files.append("scatter_pre.csv")

    shift = int(sec.get("placebo_shift", 0))
    if shift > 0:
        seed = (manifest.get("seed", 0) if args.seed is None else args.seed)
        fit_config = _fit_config_from_section(fit_sec, int(seed), "fit")
        window = _as_window(
            sec.get("window", summary.get("window", [0, 0])),
            "diagnose.window",
        )
        tau = max(1, int(summary.get("min_pre_periods", 1)))
        placebo_eff, _placebo_fit = placebo_in_time(
            panel, fit_config, shift, window, min_pre_periods=tau,
        )
        write_att_csv(placebo_eff, out_dir / "placebo_att.csv")
        files.append("placebo_att.csv")
        ev = placebo_eff.event_times
        gap = (ev >= 0) & (ev < shift)
        vals = placebo_eff.att[gap]
        vals = vals[~np.isnan(vals)]
        _write_json(out_dir / "placebo_summary.json", {
            "fake_shift": shift,
            "placebo_window_mean_abs_att": (
                None if vals.size == 0 else float(np.abs(vals).mean())
            ),
            "placebo_window_max_abs_att": (
                None if vals.size == 0 else float(np.abs(vals).max())
            ),
            "n_placebo_event_times": int(vals.size),
        })
        files.append("placebo_summary.json")

    _write_manifest(out_dir, "diagnose", sec,
                    manifest.get("seed", 0) if args.seed is None else args.seed,
                    files)


# ---------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelcf",
        description="Counterfactual panel estimation via low-rank "
                    "matrix completion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "draw a synthetic panel with known ground truth"),
        ("fit", "fit the counterfactual model and export effects"),
        ("effects", "recompute effect summaries from a fit directory"),
        ("diagnose", "pre-treatment fit report and placebo check"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path,
                       help="TOML config file")
        p.add_argument("--out", required=True, type=Path,
                       help="output directory (created if needed)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed in the config")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for bootstrap replicates")
        p.add_argument("--bootstrap-recv", action="store_true",
                       dest="bootstrap_recv",
                       help="re-run threshold cross-validation inside "
                            "every bootstrap replicate")
    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "effects": _cmd_effects,
    "diagnose": _cmd_diagnose,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = _load_toml(args.config)
        base = args.config.resolve().parent
        out_dir = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, base, out_dir, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PanelcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
