"""Two-cohort survival data with unobserved heterogeneity.

Generates a control cohort followed from diagnosis and a treated cohort
whose members are the survivors of an exponential wait to treatment, so
the treated are systematically the less frail.  Also builds the
counterfactual clone cohorts that define the true marginal hazard
ratios (ATC / ATT / ATE), and calibrates the conditional treatment
effect so the true marginal ATE hits a requested target.

Reproducibility contract: every draw comes from a substream keyed by
(seed, stream id, block index) with a fixed block size, so identical
configs give byte-identical cohorts no matter how blocks would be
scheduled across workers.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pandas as pd

from .estimators import EstimatorResult
from .survcore import cox_fit, hazard_ratio

BLOCK_SIZE = 8192
SELECTION_FLOOR = 1e-3

_S_CONTROL = 1
_S_TREATED = 2
_S_PROSPECTIVE = 3
_S_ATC_CLONE = 4

SCENARIOS = ("beta", "gfactor")
ESTIMANDS = ("atc", "att", "ate")


class SimulationError(RuntimeError):
    """Simulation cannot proceed under the given configuration."""


class CalibrationError(RuntimeError):
    """Conditional hazard ratio calibration failed."""


@dataclasses.dataclass(frozen=True)
class SimulationConfig:
    """Scenario parameters for the two-cohort generator.

    ``scenario="beta"`` draws each subject's per-time-unit recovery
    probability from Beta(beta_a, beta_b) and converts it to a hazard
    rate; ``scenario="gfactor"`` gives a proportion ``p_g`` of subjects
    a protective factor that multiplies ``base_rate`` by
    ``g_multiplier``.  ``conditional_hr`` is the treatment hazard ratio
    conditional on the individual rate.
    """

    scenario: str = "beta"
    n_per_cohort: int = 10_000
    wait_rate: float = 0.1
    beta_a: float = 1.2
    beta_b: float = 10.8
    base_rate: float = 0.26
    p_g: float = 0.35
    g_multiplier: float = 0.18
    conditional_hr: float = 2.0
    censoring_horizon: float | None = None
    seed: int = 0

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise SimulationError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.n_per_cohort < 1:
            raise SimulationError("n_per_cohort must be positive")
        if not self.wait_rate > 0:
            raise SimulationError("wait_rate must be positive")
        if not (self.beta_a > 0 and self.beta_b > 0):
            raise SimulationError("beta_a and beta_b must be positive")
        if not 0 < self.p_g < 1:
            raise SimulationError("p_g must be in (0, 1)")
        if not self.g_multiplier > 0:
            raise SimulationError("g_multiplier must be positive")
        if not self.base_rate > 0:
            raise SimulationError("base_rate must be positive")
        if not self.conditional_hr > 0:
            raise SimulationError("conditional_hr must be positive")
        if self.censoring_horizon is not None and not self.censoring_horizon > 0:
            raise SimulationError("censoring_horizon must be positive when set")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise SimulationError("seed must be an unsigned 64-bit integer")


@dataclasses.dataclass
class FrailtyDraw:
    rates: np.ndarray
    g_carrier: np.ndarray | None
    n_resampled: int


@dataclasses.dataclass
class CohortData:
    """Simulated control and treated cohorts plus generation diagnostics."""

    control: pd.DataFrame
    treated: pd.DataFrame
    acceptance_rate: float
    candidates_drawn: int
    frailty_resamples: int

    def combined(self) -> pd.DataFrame:
        return pd.concat([self.control, self.treated], ignore_index=True)


@dataclasses.dataclass
class CalibrationResult:
    conditional_hr: float
    achieved_ate_hr: float
    target: float
    tolerance: float
    evaluations: list  # (conditional_hr, fitted ATE hr) in evaluation order


def _substream(seed, stream, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream, block))))


def draw_frailty(config, n, rng):
    """Individual hazard rates under the configured heterogeneity mechanism.

    Beta scenario: p ~ Beta(a, b) is a per-time-unit recovery
    probability, converted to a continuous rate -ln(1 - p); draws of
    exactly 1 are resampled and counted.  G-factor scenario: carriers
    (probability p_g) get base_rate * g_multiplier, everyone else
    base_rate.
    """
    config.validate()
    if config.scenario == "beta":
        p = rng.beta(config.beta_a, config.beta_b, n)
        resampled = 0
        while True:
            bad = p >= 1.0
            k = int(bad.sum())
            if k == 0:
                break
            resampled += k
            p[bad] = rng.beta(config.beta_a, config.beta_b, k)
        return FrailtyDraw(rates=-np.log1p(-p), g_carrier=None, n_resampled=resampled)
    g = rng.random(n) < config.p_g
    rates = np.where(g, config.base_rate * config.g_multiplier, config.base_rate)
    return FrailtyDraw(rates=rates, g_carrier=g, n_resampled=0)


def _censor(times, horizon):
    if horizon is None:
        return times, np.ones(times.size, dtype=np.int64)
    event = (times <= horizon).astype(np.int64)
    return np.minimum(times, horizon), event


def _blocks(n):
    for b, lo in enumerate(range(0, n, BLOCK_SIZE)):
        yield b, min(BLOCK_SIZE, n - lo)


def _cohort_frame(ids, cohort, entry, event_time, event, wait, rates, g, t0, t1):
    cols = {
        "id": np.asarray(ids, dtype=np.int64),
        "cohort": cohort,
        "entry_time": entry,
        "event_time": event_time,
        "event": np.asarray(event, dtype=np.int64),
        "wait_time": wait,
        "frailty_rate": rates,
        "untreated_time": t0,
        "treated_time": t1,
    }
    if g is not None:
        cols["g_carrier"] = np.asarray(g, dtype=np.int64)
    return pd.DataFrame(cols)


def simulate_cohorts(config) -> CohortData:
    """Generate the control cohort and the wait-selected treated cohort.

    Controls experience the event at Exp(rate_i) from diagnosis.
    Treated candidates draw a wait w ~ Exp(wait_rate) and an untreated
    time T0 ~ Exp(rate_i); only candidates with T0 > w are retained
    (they had not recovered when treatment started), then the treated
    time runs from treatment start at the boosted rate
    rate_i * conditional_hr.  Candidates are drawn until the cohort is
    full; the acceptance rate is reported and a selection fraction
    below SELECTION_FLOOR aborts.
    """
    config.validate()
    n = config.n_per_cohort

    # control cohort
    rates_parts, g_parts, t0_parts = [], [], []
    resamples = 0
    for b, nb in _blocks(n):
        rng = _substream(config.seed, _S_CONTROL, b)
        fr = draw_frailty(config, nb, rng)
        resamples += fr.n_resampled
        rates_parts.append(fr.rates)
        if fr.g_carrier is not None:
            g_parts.append(fr.g_carrier)
        t0_parts.append(rng.exponential(1.0 / fr.rates))
    rates = np.concatenate(rates_parts)
    t0 = np.concatenate(t0_parts)
    g = np.concatenate(g_parts) if g_parts else None
    event_time, event = _censor(t0, config.censoring_horizon)
    control = _cohort_frame(
        np.arange(n), "control", np.zeros(n), event_time, event,
        np.full(n, np.nan), rates, g, t0, np.full(n, np.nan),
    )

    # treated cohort: rejection-sample survivors of the wait
    candidates = 0
    accepted = 0
    tr_rates, tr_g, tr_w, tr_t0, tr_t1 = [], [], [], [], []
    for b, nb in _blocks(n):
        rng = _substream(config.seed, _S_TREATED, b)
        filled = 0
        while filled < nb:
            need = nb - filled
            fr = draw_frailty(config, need, rng)
            resamples += fr.n_resampled
            w = rng.exponential(1.0 / config.wait_rate, need)
            cand_t0 = rng.exponential(1.0 / fr.rates)
            keep = cand_t0 > w
            k = int(keep.sum())
            candidates += need
            accepted += k
            if k:
                t1 = rng.exponential(1.0 / (fr.rates[keep] * config.conditional_hr))
                tr_rates.append(fr.rates[keep])
                tr_w.append(w[keep])
                tr_t0.append(cand_t0[keep])
                tr_t1.append(t1)
                if fr.g_carrier is not None:
                    tr_g.append(fr.g_carrier[keep])
                filled += k
            if candidates >= 10_000 and accepted / candidates < SELECTION_FLOOR:
                raise SimulationError(
                    f"treated selection fraction {accepted / candidates:.2e} is below "
                    f"{SELECTION_FLOOR:.0e}; wait_rate={config.wait_rate} is too small "
                    "relative to the event rates for survivors to exist"
                )
    rates_t = np.concatenate(tr_rates)
    w_t = np.concatenate(tr_w)
    t0_t = np.concatenate(tr_t0)
    t1_t = np.concatenate(tr_t1)
    g_t = np.concatenate(tr_g) if tr_g else None
    event_time_t, event_t = _censor(t1_t, config.censoring_horizon)
    treated = _cohort_frame(
        np.arange(n, 2 * n), "treated", w_t, event_time_t, event_t,
        w_t, rates_t, g_t, t0_t, t1_t,
    )
    return CohortData(
        control=control,
        treated=treated,
        acceptance_rate=accepted / candidates,
        candidates_drawn=candidates,
        frailty_resamples=resamples,
    )


def simulate_prospective(config) -> pd.DataFrame:
    """One cohort followed from diagnosis with treatment as a status change.

    Every subject draws a rate, a wait w, and an untreated time T0.
    Subjects with T0 <= w have their event before treatment would have
    started; the rest start treatment at w and the event arrives at
    w + T1 with T1 ~ Exp(rate * conditional_hr).  There is no survivor
    selection: this is the full target population, and event_time is on
    the original (diagnosis) axis.
    """
    config.validate()
    n = config.n_per_cohort
    parts = []
    next_id = 0
    for b, nb in _blocks(n):
        rng = _substream(config.seed, _S_PROSPECTIVE, b)
        fr = draw_frailty(config, nb, rng)
        w = rng.exponential(1.0 / config.wait_rate, nb)
        t0 = rng.exponential(1.0 / fr.rates)
        treated = t0 > w
        t1 = np.full(nb, np.nan)
        t1[treated] = rng.exponential(1.0 / (fr.rates[treated] * config.conditional_hr))
        event_orig = np.where(treated, w + t1, t0)

        horizon = config.censoring_horizon
        event_time, event = _censor(event_orig, horizon)
        tx_start = np.where(treated, w, np.nan)
        if horizon is not None:
            # treatment after the administrative horizon is never observed
            unseen = treated & (w >= horizon)
            tx_start[unseen] = np.nan
            t1[unseen] = np.nan

        frame = pd.DataFrame(
            {
                "id": np.arange(next_id, next_id + nb, dtype=np.int64),
                "cohort": np.where(np.isfinite(tx_start), "treated", "control"),
                "entry_time": np.zeros(nb),
                "event_time": event_time,
                "event": event.astype(np.int64),
                "wait_time": tx_start,
                "treatment_start": tx_start,
                "frailty_rate": fr.rates,
                "untreated_time": t0,
                "treated_time": t1,
            }
        )
        if fr.g_carrier is not None:
            frame["g_carrier"] = fr.g_carrier.astype(np.int64)
        parts.append(frame)
        next_id += nb
    return pd.concat(parts, ignore_index=True)


def build_counterfactual(config, estimand, cohorts=None) -> pd.DataFrame:
    """Counting-process dataset of factual subjects plus treatment-switched clones.

    ATC keeps every control's untreated path from diagnosis and adds a
    clone treated from diagnosis.  ATT keeps every selected treated
    subject's path from treatment start and adds a clone that continues
    untreated from the same entry time (its latent untreated event
    time, which exceeds the wait by construction).  ATE is the union.
    Clones reuse the subject's individual rate and share its cluster
    id; latent (uncensored) times are used throughout.
    """
    config.validate()
    est = str(estimand).lower()
    if est not in ESTIMANDS:
        raise ValueError(f"estimand must be one of {ESTIMANDS}, got {estimand!r}")
    if cohorts is None:
        cohorts = simulate_cohorts(config)

    frames = []
    if est in ("atc", "ate"):
        ctrl = cohorts.control
        ids = ctrl["id"].to_numpy()
        rates = ctrl["frailty_rate"].to_numpy()
        t0 = ctrl["untreated_time"].to_numpy()
        clone_parts = []
        for b, nb in _blocks(ids.size):
            rng = _substream(config.seed, _S_ATC_CLONE, b)
            lo = b * BLOCK_SIZE
            clone_parts.append(
                rng.exponential(1.0 / (rates[lo:lo + nb] * config.conditional_hr))
            )
        t1_clone = np.concatenate(clone_parts)
        frames.append(_arm_frame(ids, 0.0, t0, 0))
        frames.append(_arm_frame(ids, 0.0, t1_clone, 1))
    if est in ("att", "ate"):
        trt = cohorts.treated
        ids = trt["id"].to_numpy()
        w = trt["wait_time"].to_numpy()
        t0 = trt["untreated_time"].to_numpy()
        t1 = trt["treated_time"].to_numpy()
        frames.append(_arm_frame(ids, w, w + t1, 1))
        frames.append(_arm_frame(ids, w, t0, 0))
    return pd.concat(frames, ignore_index=True)


def _arm_frame(ids, start, stop, treated):
    n = np.asarray(ids).size
    return pd.DataFrame(
        {
            "subject_id": np.asarray(ids, dtype=np.int64),
            "cluster_id": np.asarray(ids, dtype=np.int64),
            "start": np.broadcast_to(np.asarray(start, dtype=float), (n,)),
            "stop": np.asarray(stop, dtype=float),
            "status": np.ones(n, dtype=np.int64),
            "stratum": np.zeros(n, dtype=np.int64),
            "treated": np.full(n, treated, dtype=np.int64),
        }
    )


def true_marginal_hr(config, estimand, cohorts=None, level=0.95, robust=True) -> EstimatorResult:
    """True marginal hazard ratio from a left-truncated fit on clone cohorts.

    The robust variance clusters the factual/clone pair of every
    subject; pass ``robust=False`` to skip it when only the point
    estimate matters (calibration does).
    """
    frame = build_counterfactual(config, estimand, cohorts=cohorts)
    fit = cox_fit(frame, ["treated"], cluster_variance=robust)
    hz = hazard_ratio(fit, 0, level=level, use_robust=robust)
    return EstimatorResult(
        method="true",
        estimand=str(estimand).lower(),
        hr=hz.hr,
        ci_low=hz.ci_low,
        ci_high=hz.ci_high,
        se_log_hr=hz.se_log_hr,
        n_subjects=int(frame["subject_id"].nunique()),
        n_events=fit.n_events,
        robust_se_used=robust,
    )


def calibrate_conditional_hr(config, target_marginal_ate, tolerance=0.005,
                             lo=1.0, hi=10.0, max_iterations=60) -> CalibrationResult:
    """Bisect the conditional hazard ratio until the true marginal ATE hits target.

    Every evaluation reuses the same seed (common random numbers), so
    the fitted ATE is an exactly deterministic, monotone function of
    the conditional hazard ratio and the bracket never chatters.  The
    base cohorts are generated once; treated and clone times are
    re-scaled per evaluation, which is equivalent to regeneration
    because exponential draws scale inversely with the rate.
    """
    config.validate()
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if target_marginal_ate < 1.0:
        raise CalibrationError("target marginal ATE below 1 is not in the calibration range")

    base = simulate_cohorts(dataclasses.replace(config, conditional_hr=1.0))
    unit_t1 = base.treated["treated_time"].to_numpy().copy()
    evaluations = []

    def fitted_ate(theta):
        treated = base.treated.copy()
        scaled = unit_t1 / theta
        treated["treated_time"] = scaled
        treated["event_time"] = scaled
        cohorts = dataclasses.replace(base, treated=treated)
        res = true_marginal_hr(
            dataclasses.replace(config, conditional_hr=theta, censoring_horizon=None),
            "ate",
            cohorts=cohorts,
            robust=False,
        )
        evaluations.append((theta, res.hr))
        for (ta, ha), (tb, hb) in zip(sorted(evaluations), sorted(evaluations)[1:]):
            if hb < ha - 1e-6:
                raise CalibrationError(
                    f"fitted ATE is non-monotone in conditional_hr beyond numerical noise: "
                    f"hr({ta})={ha:.6f} but hr({tb})={hb:.6f}"
                )
        return res.hr

    def result(theta):
        achieved = true_marginal_hr(
            dataclasses.replace(config, conditional_hr=theta, censoring_horizon=None), "ate"
        ).hr
        return CalibrationResult(
            conditional_hr=theta,
            achieved_ate_hr=achieved,
            target=target_marginal_ate,
            tolerance=tolerance,
            evaluations=evaluations,
        )

    f_lo = fitted_ate(lo)
    if abs(f_lo - target_marginal_ate) <= tolerance:
        return result(lo)
    if f_lo > target_marginal_ate:
        raise CalibrationError(
            f"bracket failure: conditional_hr={lo} already gives ATE {f_lo:.4f} > target"
        )
    f_hi = fitted_ate(hi)
    if abs(f_hi - target_marginal_ate) <= tolerance:
        return result(hi)
    if f_hi < target_marginal_ate:
        raise CalibrationError(
            f"bracket failure: conditional_hr={hi} reaches only ATE {f_hi:.4f} < target "
            f"{target_marginal_ate}; heterogeneity is too strong for this target"
        )
    for _ in range(max_iterations):
        mid = 0.5 * (lo + hi)
        f_mid = fitted_ate(mid)
        if abs(f_mid - target_marginal_ate) <= tolerance:
            return result(mid)
        if f_mid < target_marginal_ate:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6:
            raise CalibrationError(
                "bisection interval collapsed before reaching the tolerance; Monte Carlo "
                "noise exceeds it (increase n_per_cohort or loosen tolerance)"
            )
    raise CalibrationError(f"no convergence within {max_iterations} bisection steps")
