"""Estimators for treatment effects when follow-up starts differ.

The two-cohort input has controls followed from diagnosis and treated
subjects followed from treatment start (the bias-inducing "reset" time
axis), with the wait between diagnosis and treatment recorded per
treated subject.  Besides the naive comparison, five corrections use
that wait: regressing on it (linear / quadratic / restricted cubic
splines), landmark matching, selecting the early treated, selecting
controls who outlasted the median wait, and left truncation on the
original axis.  A prospective single-cohort dataset additionally
supports the time-varying-treatment benchmark and can be restructured
into the two-cohort layout with ``reset_time_axis``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pandas as pd

from .survcore import (
    SurvDataError,
    bias_metrics,
    cox_fit,
    default_knots,
    hazard_ratio,
    rcs_basis,
)


class EstimationError(RuntimeError):
    """An estimator cannot be computed on this dataset."""


METHOD_ESTIMANDS = {
    "unadjusted": "ate",
    "wait_linear": "ate",
    "wait_quadratic": "ate",
    "wait_rcs": "ate",
    "matching": "ate",
    "early_treated": "atc",
    "median_control": "att",
    "left_truncation": "ate",
    "time_varying": "ate",
}

METHOD_ORDER = tuple(METHOD_ESTIMANDS)


@dataclasses.dataclass
class EstimatorResult:
    method: str
    estimand: str
    hr: float
    ci_low: float
    ci_high: float
    se_log_hr: float
    n_subjects: int
    n_events: int
    robust_se_used: bool
    warnings: tuple = ()

    def __post_init__(self):
        if not self.ci_low <= self.hr <= self.ci_high:
            raise ValueError(
                f"confidence interval ({self.ci_low}, {self.ci_high}) does not bracket hr={self.hr}"
            )


@dataclasses.dataclass(frozen=True)
class LandmarkSpec:
    """Sequential landmark times; treatment must start within [L, L + window)."""

    times: tuple
    window: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size == 0:
            raise ValueError("landmark spec needs at least one time")
        if np.any(t < 0):
            raise ValueError("landmark times must be non-negative")
        if np.any(np.diff(t) <= 0):
            raise ValueError("landmark times must be strictly increasing")
        if not self.window > 0:
            raise ValueError("landmark window must be positive")


SIMULATION_LANDMARKS = LandmarkSpec(times=tuple(float(t) for t in range(21)), window=1.0)
APPLICATION_LANDMARKS = LandmarkSpec(times=tuple(float(t) for t in range(0, 17, 2)), window=2.0)

LANDMARK_PRESETS = {
    "simulation": SIMULATION_LANDMARKS,
    "application": APPLICATION_LANDMARKS,
}


@dataclasses.dataclass(frozen=True)
class EstimationSettings:
    landmarks: LandmarkSpec = SIMULATION_LANDMARKS
    rcs_knots: int = 5
    early_max_wait: float = 1.0
    level: float = 0.95
    robust: bool = True
    confounders: tuple = ()


@dataclasses.dataclass
class ResultRow:
    method: str
    estimand: str
    result: EstimatorResult | None = None
    error: str | None = None
    bias: object = None  # BiasReport


@dataclasses.dataclass
class LandmarkBuildInfo:
    dropped_landmarks: tuple
    n_excluded_treated: int
    n_rows: int


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------


def _split_cohorts(data):
    if "cohort" not in data:
        raise SurvDataError("two-cohort data needs a 'cohort' column")
    ctrl = data[data["cohort"] == "control"]
    trt = data[data["cohort"] == "treated"]
    if len(ctrl) == 0:
        raise EstimationError("no control records in the dataset")
    if len(trt) == 0:
        raise EstimationError("no treated records in the dataset")
    return ctrl, trt


def _treated_waits(trt):
    w = trt["wait_time"].to_numpy(dtype=float)
    if np.any(~np.isfinite(w)):
        raise SurvDataError("every treated record needs a finite wait_time")
    if np.any(w < 0):
        raise SurvDataError("wait_time must be non-negative")
    return w


def _counting_rows(src, start, stop, status, treated, stratum, confounders):
    frame = pd.DataFrame(
        {
            "subject_id": src["id"].to_numpy(),
            "cluster_id": src["id"].to_numpy(),
            "start": np.asarray(start, dtype=float),
            "stop": np.asarray(stop, dtype=float),
            "status": np.asarray(status, dtype=np.int64),
            "stratum": np.full(len(src), stratum, dtype=np.int64),
            "treated": np.full(len(src), treated, dtype=np.int64),
        }
    )
    for c in confounders:
        if c not in src:
            raise SurvDataError(f"confounder column '{c}' missing from the dataset")
        frame[c] = src[c].to_numpy(dtype=float)
    return frame


def _fit_result(frame, covariates, method, *, robust, level, warnings=()):
    fit = cox_fit(frame, covariates, cluster_variance=robust)
    hz = hazard_ratio(fit, 0, level=level, use_robust=robust)
    return EstimatorResult(
        method=method,
        estimand=METHOD_ESTIMANDS[method],
        hr=hz.hr,
        ci_low=hz.ci_low,
        ci_high=hz.ci_high,
        se_log_hr=hz.se_log_hr,
        n_subjects=int(frame["subject_id"].nunique()),
        n_events=int(fit.n_events),
        robust_se_used=robust,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# prospective-data restructuring
# ---------------------------------------------------------------------------


def reset_time_axis(prospective) -> pd.DataFrame:
    """Re-enact two separate cohorts from a prospective single cohort.

    Every subject yields a control-axis record covering untreated
    follow-up from diagnosis (ending at the event, at censoring, or at
    treatment start); each treated subject yields one more record with
    time measured from treatment start.  Both records carry the
    subject's id, so cluster-aware variance can tie them together.
    """
    t = prospective["event_time"].to_numpy(dtype=float)
    event = prospective["event"].to_numpy(dtype=np.int64)
    if "treatment_start" not in prospective:
        raise SurvDataError("prospective data needs a 'treatment_start' column")
    w = prospective["treatment_start"].to_numpy(dtype=float)
    is_treated = np.isfinite(w)
    late = is_treated & (w >= t)
    if np.any(late):
        bad = prospective["id"].to_numpy()[late][:5]
        raise SurvDataError(
            f"treatment start at or after the event/censoring time for subjects {bad.tolist()}"
        )
    if np.any(is_treated & (w < 0)):
        raise SurvDataError("treatment_start must be non-negative")

    covs = [c for c in prospective.columns if c.startswith("cov_")]

    control = pd.DataFrame(
        {
            "id": prospective["id"].to_numpy(),
            "cohort": "control",
            "entry_time": 0.0,
            "event_time": np.where(is_treated, w, t),
            "event": np.where(is_treated, 0, event).astype(np.int64),
            "wait_time": np.nan,
        }
    )
    trt_src = prospective.loc[is_treated]
    treated = pd.DataFrame(
        {
            "id": trt_src["id"].to_numpy(),
            "cohort": "treated",
            "entry_time": w[is_treated],
            "event_time": t[is_treated] - w[is_treated],
            "event": event[is_treated],
            "wait_time": w[is_treated],
        }
    )
    for c in covs:
        control[c] = prospective[c].to_numpy(dtype=float)
        treated[c] = trt_src[c].to_numpy(dtype=float)
    out = pd.concat([control, treated], ignore_index=True)
    zero_len = out["event_time"].to_numpy() <= 0
    if np.any(zero_len):
        bad = out["id"].to_numpy()[zero_len][:5]
        raise SurvDataError(f"zero-length follow-up after restructuring for subjects {bad.tolist()}")
    return out


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def estimate_unadjusted(data, *, confounders=(), robust=True, level=0.95):
    """Naive reset-axis comparison; carries the survivorship bias."""
    ctrl, trt = _split_cohorts(data)
    frame = pd.concat(
        [
            _counting_rows(ctrl, 0.0, ctrl["event_time"], ctrl["event"], 0, 0, confounders),
            _counting_rows(trt, 0.0, trt["event_time"], trt["event"], 1, 0, confounders),
        ],
        ignore_index=True,
    )
    return _fit_result(frame, ["treated", *confounders], "unadjusted", robust=robust, level=level)


def estimate_wait_covariate(data, form="linear", *, rcs_knots=5, confounders=(),
                            robust=True, level=0.95):
    """Reset-axis fit with the wait entering the model as a covariate.

    Controls carry zero for every wait column (they never initiate
    treatment), so the treatment coefficient is the effect at zero
    wait.  ``form`` selects the functional shape: "linear",
    "quadratic", or "rcs" with ``rcs_knots`` quantile-placed knots over
    the treated waits.
    """
    if form not in ("linear", "quadratic", "rcs"):
        raise ValueError(f"unknown wait-covariate form {form!r}")
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)

    if form == "linear":
        method = "wait_linear"
        cols = {"wait": w}
    elif form == "quadratic":
        method = "wait_quadratic"
        cols = {"wait": w, "wait_sq": w**2}
    else:
        method = "wait_rcs"
        spec = default_knots(w, rcs_knots)
        basis = rcs_basis(w, spec)
        cols = {f"wait_rcs{j + 1}": basis[:, j] for j in range(basis.shape[1])}

    ctrl_rows = _counting_rows(ctrl, 0.0, ctrl["event_time"], ctrl["event"], 0, 0, confounders)
    trt_rows = _counting_rows(trt, 0.0, trt["event_time"], trt["event"], 1, 0, confounders)
    for name, values in cols.items():
        ctrl_rows[name] = 0.0
        trt_rows[name] = values
    frame = pd.concat([ctrl_rows, trt_rows], ignore_index=True)
    return _fit_result(
        frame, ["treated", *cols, *confounders], method, robust=robust, level=level
    )


def build_landmarks(data, spec) -> tuple[pd.DataFrame, LandmarkBuildInfo]:
    """Pooled landmark datasets, stratum = landmark index.

    At each landmark L: the treated arm holds subjects whose treatment
    started within [L, L + window), with time measured from treatment
    start; the control arm holds control records still at risk at L,
    with residual time measured from L.  Controls reappear across
    landmarks; landmarks missing either arm are dropped and reported.
    """
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)
    ctrl_time = ctrl["event_time"].to_numpy(dtype=float)

    frames = []
    dropped = []
    assigned = np.zeros(w.size, dtype=bool)
    for k, lm in enumerate(spec.times):
        tmask = (~assigned) & (w >= lm) & (w < lm + spec.window)
        cmask = ctrl_time > lm
        if not tmask.any() or not cmask.any():
            dropped.append(lm)
            continue
        assigned |= tmask
        tsub = trt.loc[tmask]
        csub = ctrl.loc[cmask]
        frames.append(
            _counting_rows(tsub, 0.0, tsub["event_time"], tsub["event"], 1, k, ())
        )
        frames.append(
            _counting_rows(csub, 0.0, ctrl_time[cmask] - lm, csub["event"], 0, k, ())
        )
    if not frames:
        raise EstimationError("every landmark was empty on one side; nothing to pool")
    pooled = pd.concat(frames, ignore_index=True)
    info = LandmarkBuildInfo(
        dropped_landmarks=tuple(dropped),
        n_excluded_treated=int((~assigned).sum()),
        n_rows=len(pooled),
    )
    # confounders travel with the source rows when requested later
    return pooled, info


def estimate_matching(data, spec=SIMULATION_LANDMARKS, *, confounders=(),
                      robust=True, level=0.95):
    """Landmark-matched comparison pooled across landmark strata."""
    pooled, info = _build_landmarks_with_confounders(data, spec, confounders)
    warnings = []
    if info.dropped_landmarks:
        warnings.append(f"dropped empty landmarks {list(info.dropped_landmarks)}")
    if info.n_excluded_treated:
        warnings.append(f"{info.n_excluded_treated} treated outside all landmark windows")
    return _fit_result(
        pooled, ["treated", *confounders], "matching",
        robust=robust, level=level, warnings=warnings,
    )


def _build_landmarks_with_confounders(data, spec, confounders):
    if not confounders:
        return build_landmarks(data, spec)
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)
    ctrl_time = ctrl["event_time"].to_numpy(dtype=float)
    frames = []
    dropped = []
    assigned = np.zeros(w.size, dtype=bool)
    for k, lm in enumerate(spec.times):
        tmask = (~assigned) & (w >= lm) & (w < lm + spec.window)
        cmask = ctrl_time > lm
        if not tmask.any() or not cmask.any():
            dropped.append(lm)
            continue
        assigned |= tmask
        tsub = trt.loc[tmask]
        csub = ctrl.loc[cmask]
        frames.append(_counting_rows(tsub, 0.0, tsub["event_time"], tsub["event"], 1, k, confounders))
        frames.append(_counting_rows(csub, 0.0, ctrl_time[cmask] - lm, csub["event"], 0, k, confounders))
    if not frames:
        raise EstimationError("every landmark was empty on one side; nothing to pool")
    pooled = pd.concat(frames, ignore_index=True)
    info = LandmarkBuildInfo(tuple(dropped), int((~assigned).sum()), len(pooled))
    return pooled, info


def estimate_early_treated(data, w_max=1.0, *, confounders=(), robust=True, level=0.95):
    """Treated who started within ``w_max`` of diagnosis vs all controls (ATC)."""
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)
    keep = w <= w_max
    if not keep.any():
        raise EstimationError(
            f"non-positivity: no treated subject has wait <= {w_max}; "
            "the early-treated contrast cannot be formed"
        )
    tsub = trt.loc[keep]
    frame = pd.concat(
        [
            _counting_rows(ctrl, 0.0, ctrl["event_time"], ctrl["event"], 0, 0, confounders),
            _counting_rows(tsub, 0.0, tsub["event_time"], tsub["event"], 1, 0, confounders),
        ],
        ignore_index=True,
    )
    return _fit_result(frame, ["treated", *confounders], "early_treated", robust=robust, level=level)


def estimate_median_control(data, *, confounders=(), robust=True, level=0.95):
    """All treated vs controls who outlasted the median wait (ATT).

    The median is the lower median of the treated waits; controls enter
    with their residual time past it (strictly surviving records only).
    """
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)
    m = float(np.sort(w)[(w.size - 1) // 2])
    ctrl_time = ctrl["event_time"].to_numpy(dtype=float)
    keep = ctrl_time > m
    if not keep.any():
        raise EstimationError(
            f"no control record is still at risk at the median wait {m}; "
            "the median-control contrast cannot be formed"
        )
    csub = ctrl.loc[keep]
    frame = pd.concat(
        [
            _counting_rows(csub, 0.0, ctrl_time[keep] - m, csub["event"], 0, 0, confounders),
            _counting_rows(trt, 0.0, trt["event_time"], trt["event"], 1, 0, confounders),
        ],
        ignore_index=True,
    )
    return _fit_result(frame, ["treated", *confounders], "median_control", robust=robust, level=level)


def estimate_left_truncation(data, *, confounders=(), robust=True, level=0.95):
    """Original-axis fit with treated entering the risk set at their wait."""
    ctrl, trt = _split_cohorts(data)
    w = _treated_waits(trt)
    entry = trt["entry_time"].to_numpy(dtype=float)
    if np.any(~np.isfinite(entry)):
        raise SurvDataError("treated records need finite entry_time for left truncation")
    frame = pd.concat(
        [
            _counting_rows(ctrl, 0.0, ctrl["event_time"], ctrl["event"], 0, 0, confounders),
            _counting_rows(
                trt, entry, entry + trt["event_time"].to_numpy(dtype=float),
                trt["event"], 1, 0, confounders,
            ),
        ],
        ignore_index=True,
    )
    return _fit_result(frame, ["treated", *confounders], "left_truncation", robust=robust, level=level)


def estimate_time_varying(prospective, *, confounders=(), robust=True, level=0.95):
    """Benchmark fit with treatment as a time-varying status (prospective data)."""
    t = prospective["event_time"].to_numpy(dtype=float)
    event = prospective["event"].to_numpy(dtype=np.int64)
    if "treatment_start" not in prospective:
        raise SurvDataError("prospective data needs a 'treatment_start' column")
    w = prospective["treatment_start"].to_numpy(dtype=float)
    is_treated = np.isfinite(w)
    if np.any(is_treated & (w >= t)):
        raise SurvDataError("treatment start at or after the event/censoring time")

    never = prospective.loc[~is_treated]
    ever = prospective.loc[is_treated]
    frames = [
        _counting_rows(never, 0.0, t[~is_treated], event[~is_treated], 0, 0, confounders),
        _counting_rows(ever, 0.0, w[is_treated], 0, 0, 0, confounders),
        _counting_rows(ever, w[is_treated], t[is_treated], event[is_treated], 1, 0, confounders),
    ]
    frame = pd.concat(frames, ignore_index=True)
    return _fit_result(frame, ["treated", *confounders], "time_varying", robust=robust, level=level)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def run_all(data, *, prospective=None, truth=None, settings=None) -> list[ResultRow]:
    """Run every applicable estimator; failures are captured per row.

    ``truth`` may be a mapping estimand -> hazard ratio or an iterable
    of EstimatorResult rows from the counterfactual oracle; when given,
    each method row gets log-scale bias metrics against the truth for
    its own estimand (falling back to the ATE truth).
    """
    settings = settings or EstimationSettings()
    rows: list[ResultRow] = []

    truth_hrs: dict = {}
    if truth is not None:
        if isinstance(truth, dict):
            truth_hrs = {str(k).lower(): float(v) for k, v in truth.items()}
            for est in ("ate", "atc", "att"):
                if est not in truth_hrs:
                    continue
                hr = truth_hrs[est]
                rows.append(ResultRow(
                    method="true", estimand=est,
                    result=EstimatorResult(
                        method="true", estimand=est, hr=hr, ci_low=hr, ci_high=hr,
                        se_log_hr=0.0, n_subjects=0, n_events=0, robust_se_used=False,
                    ),
                ))
        else:
            for res in truth:
                truth_hrs[res.estimand] = res.hr
                rows.append(ResultRow(method="true", estimand=res.estimand, result=res))

    common = dict(confounders=settings.confounders, robust=settings.robust, level=settings.level)
    runners = [
        ("unadjusted", lambda: estimate_unadjusted(data, **common)),
        ("wait_linear", lambda: estimate_wait_covariate(data, "linear", **common)),
        ("wait_quadratic", lambda: estimate_wait_covariate(data, "quadratic", **common)),
        ("wait_rcs", lambda: estimate_wait_covariate(
            data, "rcs", rcs_knots=settings.rcs_knots, **common)),
        ("matching", lambda: estimate_matching(data, settings.landmarks, **common)),
        ("early_treated", lambda: estimate_early_treated(
            data, settings.early_max_wait, **common)),
        ("median_control", lambda: estimate_median_control(data, **common)),
        ("left_truncation", lambda: estimate_left_truncation(data, **common)),
    ]
    if prospective is not None:
        runners.append(("time_varying", lambda: estimate_time_varying(prospective, **common)))

    from .survcore import ConvergenceError, MonotoneLikelihoodError

    for method, runner in runners:
        row = ResultRow(method=method, estimand=METHOD_ESTIMANDS[method])
        try:
            row.result = runner()
        except (SurvDataError, EstimationError, MonotoneLikelihoodError,
                ConvergenceError, ValueError) as exc:
            row.error = str(exc)
        rows.append(row)

    unadjusted = next((r.result for r in rows if r.method == "unadjusted" and r.result), None)
    if truth_hrs and unadjusted is not None:
        for row in rows:
            if row.result is None or row.method == "true":
                continue
            t_hr = truth_hrs.get(row.estimand, truth_hrs.get("ate"))
            if t_hr is None:
                continue
            try:
                row.bias = bias_metrics(t_hr, unadjusted.hr, row.result.hr)
            except ValueError:
                row.bias = None
    return rows
