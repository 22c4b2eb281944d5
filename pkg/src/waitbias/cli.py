"""Command-line driver: simulate, truth, calibrate, estimate, report.

Configuration comes from documented defaults, overridden by a YAML
config file (--config), overridden by explicit flags.  Every output
file gets a ``.meta`` sidecar holding the resolved configuration, its
hash, the seed, and the generator name, which is enough to reproduce
the run exactly.  Exit codes: 0 success, 1 usage or configuration
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import yaml

from . import __version__, cohortio, datagen, estimators
from .cohortio import SchemaError
from .datagen import CalibrationError, SimulationConfig, SimulationError
from .estimators import EstimationError, EstimationSettings, LandmarkSpec
from .survcore import ConvergenceError, MonotoneLikelihoodError, SurvDataError

RNG_NAME = "pcg64-blocked"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_SIM_KEYS = {f.name for f in dataclasses.fields(SimulationConfig)}
_EST_KEYS = {
    "landmark_preset", "landmark_times", "landmark_window",
    "rcs_knots", "early_max_wait", "confidence_level", "robust", "confounders",
}
_OUT_KEYS = {"directory", "formats"}


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config file is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a mapping at the top level")
    allowed = {"seed", "simulation", "estimation", "output"}
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    for section, keys in (("simulation", _SIM_KEYS), ("estimation", _EST_KEYS), ("output", _OUT_KEYS)):
        body = raw.get(section) or {}
        if not isinstance(body, dict):
            raise UsageError(f"config section '{section}' must be a mapping")
        bad = set(body) - keys
        if bad:
            raise UsageError(f"unknown keys {sorted(bad)} in config section '{section}'")
    return raw


def _sim_config(args, file_cfg) -> SimulationConfig:
    merged = {}
    merged.update(file_cfg.get("simulation") or {})
    if "seed" in file_cfg and file_cfg["seed"] is not None:
        merged["seed"] = file_cfg["seed"]
    flag_map = {
        "scenario": args.scenario, "n_per_cohort": args.n, "wait_rate": args.wait_rate,
        "beta_a": args.beta_a, "beta_b": args.beta_b, "base_rate": args.base_rate,
        "p_g": args.p_g, "g_multiplier": args.g_multiplier,
        "conditional_hr": args.conditional_hr, "censoring_horizon": args.censoring_horizon,
        "seed": args.seed,
    }
    merged.update({k: v for k, v in flag_map.items() if v is not None})
    try:
        config = SimulationConfig(**merged)
        config.validate()
    except (TypeError, SimulationError) as exc:
        raise UsageError(f"invalid simulation configuration: {exc}") from None
    return config


def _estimation_settings(args, file_cfg) -> EstimationSettings:
    body = dict(file_cfg.get("estimation") or {})
    preset = getattr(args, "landmark_preset", None) or body.get("landmark_preset")
    times = getattr(args, "landmark_times", None) or body.get("landmark_times")
    window = getattr(args, "landmark_window", None) or body.get("landmark_window")
    try:
        if times is not None:
            landmarks = LandmarkSpec(
                times=tuple(float(t) for t in times),
                window=float(window if window is not None else 1.0),
            )
        elif preset is not None:
            if preset not in estimators.LANDMARK_PRESETS:
                raise UsageError(
                    f"unknown landmark preset {preset!r}; choose from "
                    f"{sorted(estimators.LANDMARK_PRESETS)}"
                )
            landmarks = estimators.LANDMARK_PRESETS[preset]
        else:
            landmarks = estimators.SIMULATION_LANDMARKS
        settings = EstimationSettings(
            landmarks=landmarks,
            rcs_knots=int(_pick(args, "rcs_knots", body, 5)),
            early_max_wait=float(_pick(args, "early_max_wait", body, 1.0)),
            level=float(_pick(args, "confidence_level", body, 0.95)),
            robust=bool(_pick(args, "robust", body, True)),
            confounders=tuple(_pick(args, "confounders", body, ()) or ()),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid estimation settings: {exc}") from None
    if not 0 < settings.level < 1:
        raise UsageError(f"confidence level must be in (0, 1), got {settings.level}")
    return settings


def _pick(args, name, body, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in body and body[name] is not None:
        return body[name]
    return default


def _out_dir(args, file_cfg):
    out = args.out_dir or (file_cfg.get("output") or {}).get("directory") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _sidecar(path, command, config, extra=None):
    echo = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    meta = {
        "command": command,
        "config": echo,
        "config_hash": cohortio.config_digest(echo),
        "seed": echo.get("seed"),
        "rng": RNG_NAME,
        "version": __version__,
    }
    meta.update(extra or {})
    cohortio.write_metadata(path, meta)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    file_cfg = _load_config_file(args.config)
    config = _sim_config(args, file_cfg)
    out = _out_dir(args, file_cfg)

    sim = datagen.simulate_cohorts(config)
    extra = {
        "acceptance_rate": sim.acceptance_rate,
        "candidates_drawn": sim.candidates_drawn,
        "frailty_resamples": sim.frailty_resamples,
    }
    for name, frame in (("control", sim.control), ("treated", sim.treated)):
        path = os.path.join(out, f"{name}.csv")
        cohortio.write_cohort(frame, path)
        _sidecar(path, "simulate", config, extra)
        print(f"wrote {path} ({len(frame)} records)")
    if args.prospective:
        path = os.path.join(out, "prospective.csv")
        frame = datagen.simulate_prospective(config)
        cohortio.write_cohort(frame, path)
        _sidecar(path, "simulate", config, {"kind": "prospective"})
        print(f"wrote {path} ({len(frame)} records)")
    return EXIT_OK


def cmd_truth(args):
    file_cfg = _load_config_file(args.config)
    config = _sim_config(args, file_cfg)
    estimands = ("ate", "atc", "att") if args.estimand == "all" else (args.estimand,)
    cohorts = datagen.simulate_cohorts(config)
    rows = []
    for est in estimands:
        res = datagen.true_marginal_hr(config, est, cohorts=cohorts, level=args.level or 0.95)
        rows.append(estimators.ResultRow(method="true", estimand=est, result=res))
    table = cohortio.ResultTable.from_rows(rows)
    print(cohortio.render_text_table(table), end="")
    if args.out_dir is not None:
        out = _out_dir(args, file_cfg)
        path = os.path.join(out, "truth.csv")
        cohortio.write_results(table, path, "csv")
        _sidecar(path, "truth", config)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_calibrate(args):
    file_cfg = _load_config_file(args.config)
    config = _sim_config(args, file_cfg)
    cal = datagen.calibrate_conditional_hr(
        config, args.target, tolerance=args.tolerance
    )
    print(f"calibrated conditional_hr = {cal.conditional_hr:.6g}")
    print(f"achieved true marginal ATE = {cal.achieved_ate_hr:.6g} "
          f"(target {cal.target} +/- {cal.tolerance})")
    print("trace:")
    for theta, hr in cal.evaluations:
        print(f"  conditional_hr={theta:.6g} -> ate={hr:.6g}")
    if args.out_dir is not None:
        out = _out_dir(args, file_cfg)
        path = os.path.join(out, "calibration.csv")
        cohortio._write_table(
            path, ("conditional_hr", "ate_hr"),
            [(cohortio._fmt(t), cohortio._fmt(h)) for t, h in cal.evaluations],
        )
        _sidecar(path, "calibrate", config, {
            "target": cal.target, "tolerance": cal.tolerance,
            "calibrated_conditional_hr": cal.conditional_hr,
            "achieved_ate_hr": cal.achieved_ate_hr,
        })
        print(f"wrote {path}")
    return EXIT_OK


def _load_two_cohort(args):
    import pandas as pd

    frames = []
    if args.control:
        frames.append(cohortio.read_cohort(args.control))
    if args.treated:
        frames.append(cohortio.read_cohort(args.treated))
    if not frames:
        return None
    data = pd.concat(frames, ignore_index=True)
    return data


def cmd_estimate(args):
    file_cfg = _load_config_file(args.config)
    settings = _estimation_settings(args, file_cfg)
    out = _out_dir(args, file_cfg)

    data = _load_two_cohort(args)
    prospective = None
    if args.prospective:
        prospective = cohortio.read_cohort(args.prospective)
        if data is None:
            data = estimators.reset_time_axis(prospective)
    if data is None:
        raise UsageError("estimate needs --control/--treated files or a --prospective file")

    treated_rows = data[data["cohort"] == "treated"]
    if len(treated_rows) and (
        "wait_time" not in data.columns
        or treated_rows["wait_time"].isna().any()
    ):
        raise SchemaError(
            "treated records need a wait_time value; the wait-covariate, matching, "
            "median-control, and left-truncation estimators all require it"
        )

    truth = {}
    if args.truth_file:
        for rec in cohortio.read_results(args.truth_file):
            if rec["method"] == "true" and rec["hr"] is not None:
                truth[rec["estimand"]] = rec["hr"]
    for est in ("ate", "atc", "att"):
        v = getattr(args, f"truth_{est}")
        if v is not None:
            truth[est] = v

    rows = estimators.run_all(
        data, prospective=prospective, truth=truth or None, settings=settings
    )
    table = cohortio.ResultTable.from_rows(rows)
    formats = (file_cfg.get("output") or {}).get("formats") or ["csv", "text"]
    meta_extra = {
        "settings": {
            "landmark_times": list(settings.landmarks.times),
            "landmark_window": settings.landmarks.window,
            "rcs_knots": settings.rcs_knots,
            "early_max_wait": settings.early_max_wait,
            "confidence_level": settings.level,
            "robust": settings.robust,
            "confounders": list(settings.confounders),
        },
        "inputs": {k: v for k, v in (("control", args.control), ("treated", args.treated),
                                     ("prospective", args.prospective)) if v},
        "warnings": sorted(
            {w for r in rows if r.result for w in r.result.warnings}
        ),
    }
    for fmt, suffix in (("csv", "results.csv"), ("text", "results.txt")):
        if fmt in formats:
            path = os.path.join(out, suffix)
            cohortio.write_results(table, path, fmt)
            _sidecar(path, "estimate", meta_extra["settings"], meta_extra)
            print(f"wrote {path}")
    failures = [r for r in rows if r.error]
    for r in failures:
        print(f"note: {r.method} failed: {r.error}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    any_rows = False
    for path in args.results:
        records = cohortio.read_results(path)
        print(f"== {path}")
        if not records:
            print("(empty results file: header only)")
            print("warning: nothing to report", file=sys.stderr)
            continue
        any_rows = True
        rows = _records_to_rows(records)
        table = cohortio.ResultTable.from_rows(rows)
        print(cohortio.render_text_table(table), end="")
        _print_bias_summary(records, args.true_hr)
    return EXIT_OK if any_rows or args.results else EXIT_USAGE


def _records_to_rows(records):
    rows = []
    for rec in records:
        res = None
        if rec["hr"] is not None:
            res = estimators.EstimatorResult(
                method=rec["method"], estimand=rec["estimand"], hr=rec["hr"],
                ci_low=rec["ci_low"], ci_high=rec["ci_high"], se_log_hr=rec["se_log_hr"],
                n_subjects=rec["n_subjects"] or 0, n_events=rec["n_events"] or 0,
                robust_se_used=bool(rec["robust_se_used"]),
                warnings=(rec["warnings"],) if rec["warnings"] else (),
            )
        row = estimators.ResultRow(
            method=rec["method"], estimand=rec["estimand"], result=res, error=rec["error"]
        )
        if rec["percent_bias_unadjusted"] is not None or rec["percent_bias_eliminated"] is not None:
            row.bias = _ReadBias(rec["percent_bias_unadjusted"], rec["percent_bias_eliminated"])
        rows.append(row)
    return rows


@dataclasses.dataclass
class _ReadBias:
    percent_bias_unadjusted: float | None
    percent_bias_eliminated: float | None


def _print_bias_summary(records, true_hr_flag):
    from .survcore import bias_metrics

    by_method = {rec["method"]: rec for rec in records if rec["hr"] is not None}
    truth = true_hr_flag
    if truth is None:
        for rec in records:
            if rec["method"] == "true" and rec["estimand"] == "ate" and rec["hr"] is not None:
                truth = rec["hr"]
                break
    if truth is None and "time_varying" in by_method:
        truth = by_method["time_varying"]["hr"]
    unadj = by_method.get("unadjusted")
    if truth is None or unadj is None:
        print("bias summary: needs a truth reference (true row, time_varying row, or "
              "--true-hr) and an unadjusted row")
        return
    base = bias_metrics(truth, unadj["hr"], unadj["hr"])
    if base.true_log_hr == base.unadjusted_log_hr:
        print(f"truth {truth:.4g} equals the unadjusted estimate: bias elimination undefined")
        return
    print(f"unadjusted bias vs truth {truth:.4g}: "
          f"{base.percent_bias_unadjusted:.1f}% on the log-hazard scale")
    for method, rec in by_method.items():
        if method in ("true", "unadjusted", "time_varying"):
            continue
        rep = bias_metrics(truth, unadj["hr"], rec["hr"])
        print(f"  {method}: {rep.percent_bias_eliminated:.1f}% of the bias eliminated")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="waitbias",
                     description="Survivorship-bias survival analysis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_sim_flags(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--scenario", choices=datagen.SCENARIOS)
        p.add_argument("--n", type=int, dest="n", help="subjects per cohort")
        p.add_argument("--seed", type=int)
        p.add_argument("--wait-rate", type=float, dest="wait_rate")
        p.add_argument("--beta-a", type=float, dest="beta_a")
        p.add_argument("--beta-b", type=float, dest="beta_b")
        p.add_argument("--base-rate", type=float, dest="base_rate")
        p.add_argument("--p-g", type=float, dest="p_g")
        p.add_argument("--g-multiplier", type=float, dest="g_multiplier")
        p.add_argument("--conditional-hr", type=float, dest="conditional_hr")
        p.add_argument("--censoring-horizon", type=float, dest="censoring_horizon")

    p = sub.add_parser("simulate", help="generate cohort files")
    add_sim_flags(p)
    p.add_argument("--prospective", action="store_true",
                   help="also write a prospective single-cohort file")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("truth", help="true marginal hazard ratios from clone cohorts")
    add_sim_flags(p)
    p.add_argument("--estimand", choices=("all",) + datagen.ESTIMANDS, default="all")
    p.add_argument("--level", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("calibrate", help="calibrate conditional_hr to a target true ATE")
    add_sim_flags(p)
    p.add_argument("--target", type=float, default=1.5)
    p.add_argument("--tolerance", type=float, default=0.005)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate", help="run the estimator suite on cohort files")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--control", help="control cohort CSV")
    p.add_argument("--treated", help="treated cohort CSV")
    p.add_argument("--prospective", help="prospective cohort CSV (enables time_varying)")
    p.add_argument("--truth-file", dest="truth_file", help="truth.csv from the truth command")
    p.add_argument("--truth-ate", dest="truth_ate", type=float)
    p.add_argument("--truth-atc", dest="truth_atc", type=float)
    p.add_argument("--truth-att", dest="truth_att", type=float)
    p.add_argument("--landmark-preset", dest="landmark_preset",
                   choices=sorted(estimators.LANDMARK_PRESETS))
    p.add_argument("--landmark-times", dest="landmark_times", type=float, nargs="+")
    p.add_argument("--landmark-window", dest="landmark_window", type=float)
    p.add_argument("--rcs-knots", dest="rcs_knots", type=int)
    p.add_argument("--early-max-wait", dest="early_max_wait", type=float)
    p.add_argument("--confidence-level", dest="confidence_level", type=float)
    p.add_argument("--no-robust", dest="robust", action="store_const", const=False)
    p.add_argument("--confounders", nargs="+")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="render results files with bias percentages")
    p.add_argument("results", nargs="+", help="results.csv paths")
    p.add_argument("--true-hr", dest="true_hr", type=float,
                   help="override the truth reference hazard ratio")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, SurvDataError, EstimationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, MonotoneLikelihoodError, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
