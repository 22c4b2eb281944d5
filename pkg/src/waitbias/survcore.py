"""Cox proportional-hazards engine on counting-process data.

Fits the stratified partial likelihood for (start, stop] interval data,
so delayed entry (left truncation), time-varying treatment status, and
landmark-pooled datasets all share one code path.  The risk set at an
event time t within a stratum is ``{rows : start < t <= stop}``.  Tied
event times use the Efron correction by default (Breslow optional), and
a clustered robust (sandwich) covariance built from score residuals is
available for datasets in which one subject contributes several rows.

Also provides the restricted cubic spline basis used for flexible
wait-time adjustment and log-hazard-scale bias metrics.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.stats import norm as _norm


class SurvDataError(ValueError):
    """A counting-process dataset violates its contract."""


class MonotoneLikelihoodError(RuntimeError):
    """A coefficient diverged during fitting (monotone partial likelihood)."""


class ConvergenceError(RuntimeError):
    """A downstream quantity was requested from a fit that did not converge."""


@dataclasses.dataclass
class CoxFit:
    """Result of a partial-likelihood fit.

    ``model_covariance`` is the inverse observed information;
    ``robust_covariance`` is the clustered sandwich estimate and is only
    present when the fit was run with ``cluster_variance=True``.
    ``max_score`` is the largest absolute component of the score at the
    returned coefficients, measured on the engine's internal
    (standardized-covariate) scale.
    """

    coefficients: np.ndarray
    model_covariance: np.ndarray
    robust_covariance: np.ndarray | None
    log_partial_likelihood: float
    n_events: int
    iterations: int
    converged: bool
    max_score: float
    n_rows: int
    ties_method: str
    covariate_names: tuple[str, ...] = ()


@dataclasses.dataclass
class HazardRatio:
    hr: float
    ci_low: float
    ci_high: float
    se_log_hr: float
    level: float
    robust: bool


@dataclasses.dataclass(frozen=True)
class SplineSpec:
    """Knot locations for a restricted cubic spline; basis has k-1 columns."""

    knots: tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.size < 3:
            raise SurvDataError(f"restricted cubic splines need >= 3 knots, got {k.size}")
        if not np.all(np.isfinite(k)):
            raise SurvDataError("spline knots must be finite")
        if not np.all(np.diff(k) > 0):
            raise SurvDataError(f"spline knots must be strictly increasing, got {self.knots}")

    @property
    def basis_dimension(self) -> int:
        return len(self.knots) - 1


@dataclasses.dataclass
class BiasReport:
    """Log-hazard-scale bias of an unadjusted and a corrected estimate.

    ``percent_bias_eliminated`` is NaN when truth equals the unadjusted
    estimate (the metric is undefined); ``percent_bias_unadjusted`` is
    NaN when the true hazard ratio is exactly 1.
    """

    true_log_hr: float
    unadjusted_log_hr: float
    method_log_hr: float
    percent_bias_unadjusted: float
    percent_bias_eliminated: float


# ---------------------------------------------------------------------------
# Cox partial likelihood
# ---------------------------------------------------------------------------


def _as_float_column(data, name):
    try:
        col = np.asarray(data[name], dtype=float)
    except (KeyError, IndexError):
        raise SurvDataError(f"missing required column '{name}'") from None
    if col.ndim != 1:
        raise SurvDataError(f"column '{name}' must be one-dimensional")
    return col


class _Stratum:
    """Index structures for one stratum, built once and reused each iteration.

    Risk sums at an event time t are computed as (sum over stop >= t)
    minus (sum over start >= t); the subtraction is exact because
    start < stop guarantees {start >= t} is a subset of {stop >= t}.
    """

    __slots__ = (
        "rows", "start", "stop", "status", "X",
        "order_stop", "order_start", "xext_stop", "xext_start", "xext_death",
        "pos_stop", "pos_start",
        "death_rows", "utimes", "group_start", "d", "rep", "frac", "tied",
        "n_events", "x_death_sum",
    )

    def __init__(self, rows, start, stop, status, X, Xext, efron):
        self.rows = rows
        self.start = start
        self.stop = stop
        self.status = status
        self.X = X
        self.order_stop = np.argsort(stop, kind="stable")
        self.order_start = np.argsort(start, kind="stable")

        deaths = np.flatnonzero(status == 1)
        dt = stop[deaths]
        order = np.argsort(dt, kind="stable")
        self.death_rows = deaths[order]
        self.utimes, self.group_start, self.d = np.unique(
            dt[order], return_index=True, return_counts=True
        )
        self.n_events = self.death_rows.size
        self.tied = bool(np.any(self.d > 1))
        m = self.utimes.size
        self.rep = np.repeat(np.arange(m), self.d)
        if efron:
            within = np.arange(self.n_events) - np.repeat(self.group_start, self.d)
            self.frac = within / self.d[self.rep]
        else:
            self.frac = np.zeros(self.n_events)
        self.x_death_sum = X[self.death_rows].sum(axis=0)

        # pre-permuted copies of the extended design keep the per-iteration
        # work down to one broadcast multiply per sort order
        self.xext_stop = Xext[self.order_stop]
        self.xext_start = Xext[self.order_start]
        self.xext_death = Xext[self.death_rows]
        self.pos_stop = np.searchsorted(stop[self.order_stop], self.utimes, side="left")
        self.pos_start = np.searchsorted(start[self.order_start], self.utimes, side="left")

    def risk_and_death_sums(self, w):
        """Per-unique-event-time sums of w*Xext over the risk set and the deaths."""
        sfx_stop = _suffix_sums(w[self.order_stop, None] * self.xext_stop)
        sfx_start = _suffix_sums(w[self.order_start, None] * self.xext_start)
        R = sfx_stop[self.pos_stop] - sfx_start[self.pos_start]
        Vd = w[self.death_rows, None] * self.xext_death
        D = np.add.reduceat(Vd, self.group_start, axis=0) if self.tied else Vd
        return R, D

    def expanded_risk_sums(self, w):
        """Risk sums adjusted per Efron sub-step (one row per event)."""
        R, D = self.risk_and_death_sums(w)
        if not self.tied:
            # frac is identically zero without ties, for Breslow too
            return R
        return R[self.rep] - self.frac[:, None] * D[self.rep]


def _suffix_sums(v):
    out = np.zeros((v.shape[0] + 1, v.shape[1]))
    np.cumsum(v[::-1], axis=0, out=out[1:])
    return out[::-1]


def _column_dot(X, beta):
    # elementwise accumulation keeps the reduction order fixed regardless of
    # BLAS threading, which the byte-identical-output contract relies on
    eta = np.zeros(X.shape[0])
    for j in range(X.shape[1]):
        eta += X[:, j] * beta[j]
    return eta


class _CoxProblem:
    def __init__(self, start, stop, status, X, strata_codes, ties_method):
        self.n, self.p = X.shape
        self.iu0, self.iu1 = np.triu_indices(self.p)
        efron = ties_method == "efron"
        self.strata = []
        for code in np.unique(strata_codes):
            rows = np.flatnonzero(strata_codes == code)
            Xs = X[rows]
            npair = self.iu0.size
            Xext = np.empty((rows.size, 1 + self.p + npair))
            Xext[:, 0] = 1.0
            Xext[:, 1:1 + self.p] = Xs
            Xext[:, 1 + self.p:] = Xs[:, self.iu0] * Xs[:, self.iu1]
            self.strata.append(
                _Stratum(rows, start[rows], stop[rows], status[rows], Xs, Xext, efron)
            )
        self.n_events = sum(st.n_events for st in self.strata)

    def evaluate(self, beta):
        """Log partial likelihood, score, and observed information at beta.

        Returns None when the likelihood is not finite at beta (signals
        the optimizer to shorten its step).
        """
        p = self.p
        ll = 0.0
        grad = np.zeros(p)
        info_pairs = np.zeros(self.iu0.size)
        for st in self.strata:
            if st.n_events == 0:
                continue
            eta = _column_dot(st.X, beta)
            shift = eta.max()
            w = np.exp(eta - shift)
            Re = st.expanded_risk_sums(w)
            S0 = Re[:, 0]
            if not np.all(S0 > 0) or not np.all(np.isfinite(S0)):
                return None
            S1 = Re[:, 1:1 + p]
            S2 = Re[:, 1 + p:]
            ll += (eta[st.death_rows] - shift).sum() - np.log(S0).sum()
            mu = S1 / S0[:, None]
            grad += st.x_death_sum - mu.sum(axis=0)
            info_pairs += (S2 / S0[:, None]).sum(axis=0) - (mu[:, self.iu0] * mu[:, self.iu1]).sum(axis=0)
        if not np.isfinite(ll):
            return None
        A = np.zeros((p, p))
        A[self.iu0, self.iu1] = info_pairs
        A[self.iu1, self.iu0] = info_pairs
        return ll, grad, A

    def score_residuals(self, beta):
        """Per-row score residuals at beta; they sum to the total score.

        A row's residual is its martingale-weighted covariate deviation:
        the event contribution (covariate minus the risk-set mean at the
        event time, averaged over Efron sub-steps) minus the cumulative
        expected contribution over the event times the row was at risk
        for.  Rows aggregate by cluster for the sandwich estimate.
        """
        p = self.p
        U = np.zeros((self.n, p))
        for st in self.strata:
            if st.n_events == 0:
                continue
            eta = _column_dot(st.X, beta)
            shift = eta.max()
            w = np.exp(eta - shift)
            Re = st.expanded_risk_sums(w)
            S0 = Re[:, 0]
            S1 = Re[:, 1:1 + p]
            ae = 1.0 / S0
            mue = S1 / S0[:, None]
            if st.tied:
                gs = st.group_start
                h0 = np.add.reduceat(ae, gs)
                h1 = np.add.reduceat(ae[:, None] * mue, gs, axis=0)
                xbar = np.add.reduceat(mue, gs, axis=0) / st.d[:, None]
                ge = (1.0 - st.frac) * ae
                g0 = np.add.reduceat(ge, gs)
                g1 = np.add.reduceat(ge[:, None] * mue, gs, axis=0)
            else:
                h0, g0 = ae, ae
                h1 = ae[:, None] * mue
                g1, xbar = h1, mue

            cum0 = np.concatenate([[0.0], np.cumsum(h0)])
            cum1 = np.vstack([np.zeros(p), np.cumsum(h1, axis=0)])
            lo = np.searchsorted(st.utimes, st.start, side="right")
            hi = np.where(
                st.status == 1,
                np.searchsorted(st.utimes, st.stop, side="left"),
                np.searchsorted(st.utimes, st.stop, side="right"),
            )
            base0 = cum0[hi] - cum0[lo]
            base1 = cum1[hi] - cum1[lo]

            is_death = st.status == 1
            own = np.searchsorted(st.utimes, st.stop[is_death])
            base0 = base0.copy()
            base0[is_death] += g0[own]
            base1[is_death] += g1[own]
            direct = np.zeros((st.rows.size, p))
            direct[is_death] = st.X[is_death] - xbar[own]
            U[st.rows] = direct - w[:, None] * (st.X * base0[:, None] - base1)
        return U


def cox_fit(
    data,
    covariates,
    *,
    ties_method="efron",
    max_iterations=50,
    tolerance=1e-9,
    score_tolerance=1e-6,
    cluster_variance=False,
    coefficient_bound=15.0,
):
    """Fit a stratified Cox model on counting-process rows.

    Parameters
    ----------
    data : DataFrame or mapping of column name -> array
        Must contain ``start``, ``stop``, ``status`` and every name in
        ``covariates``.  Optional columns: ``stratum`` (separate
        baseline hazards, pooled coefficients), ``cluster_id`` /
        ``subject_id`` (sandwich grouping; defaults to ``subject_id``,
        then to one cluster per row).
    covariates : sequence of str
        Covariate column names; at least one.
    ties_method : {"efron", "breslow"}
    score_tolerance : float
        Convergence bound on the score, per square root of the event
        count (the floating-point floor of the evaluated gradient grows
        with the number of accumulated event terms).
    cluster_variance : bool
        Compute the clustered robust covariance by aggregating score
        residuals within ``cluster_id`` and forming the sandwich.

    Returns
    -------
    CoxFit
        With ``converged=False`` (never an exception) when Newton
        iteration hits ``max_iterations`` without meeting the combined
        likelihood-change and score criteria.

    Raises
    ------
    SurvDataError
        Empty data, invalid intervals, no events anywhere, or a
        singular information matrix.
    MonotoneLikelihoodError
        Some coefficient exceeded ``coefficient_bound`` in absolute
        value during iteration (likelihood has no interior maximum).
    """
    if ties_method not in ("efron", "breslow"):
        raise ValueError(f"unknown ties_method {ties_method!r}")
    covariates = list(covariates)
    if not covariates:
        raise SurvDataError("at least one covariate is required")

    start = _as_float_column(data, "start")
    stop = _as_float_column(data, "stop")
    status_f = _as_float_column(data, "status")
    n = start.size
    if n == 0:
        raise SurvDataError("empty dataset")
    if stop.size != n or status_f.size != n:
        raise SurvDataError("start/stop/status lengths differ")
    for name, col in (("start", start), ("stop", stop)):
        if not np.all(np.isfinite(col)):
            bad = int(np.flatnonzero(~np.isfinite(col))[0])
            raise SurvDataError(f"non-finite value in column '{name}' at row {bad}")
    if not np.all(np.isin(status_f, (0.0, 1.0))):
        bad = int(np.flatnonzero(~np.isin(status_f, (0.0, 1.0)))[0])
        raise SurvDataError(f"status must be 0 or 1; row {bad} has {status_f[bad]!r}")
    status = status_f.astype(np.int8)
    if np.any(stop <= start):
        bad = int(np.flatnonzero(stop <= start)[0])
        raise SurvDataError(
            f"every row needs stop > start; row {bad} has start={start[bad]!r}, stop={stop[bad]!r}"
        )
    if status.sum() == 0:
        raise SurvDataError("no events in any stratum; the partial likelihood is empty")

    X = np.column_stack([_as_float_column(data, c) for c in covariates])
    if not np.all(np.isfinite(X)):
        raise SurvDataError("covariates must be finite")

    if "stratum" in data:
        strata_codes = np.unique(np.asarray(data["stratum"]), return_inverse=True)[1]
    else:
        strata_codes = np.zeros(n, dtype=np.intp)

    # standardize internally for conditioning; fold back afterwards
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Xs = (X - center) / scale

    problem = _CoxProblem(start, stop, status, Xs, strata_codes, ties_method)
    p = problem.p

    beta = np.zeros(p)
    evaluated = problem.evaluate(beta)
    if evaluated is None:
        raise SurvDataError("partial likelihood not finite at beta = 0")
    ll, grad, A = evaluated

    # the achievable score floor grows with the number of accumulated event
    # terms, so the criterion is per root-event rather than absolute
    score_ceiling = score_tolerance * np.sqrt(max(1.0, float(problem.n_events)))

    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        try:
            step = np.linalg.solve(A, grad)
        except np.linalg.LinAlgError:
            raise SurvDataError(
                "singular information matrix; covariates are collinear or constant "
                f"(covariates={tuple(covariates)})"
            ) from None
        ll_old = ll
        accepted = None
        for _ in range(35):
            candidate = beta + step
            evaluated = problem.evaluate(candidate)
            if evaluated is not None and evaluated[0] >= ll_old - 1e-10 * (abs(ll_old) + 1.0):
                accepted = candidate
                break
            step = step / 2.0
        if accepted is None:
            break
        beta = accepted
        ll, grad, A = evaluated

        beta_orig = beta / scale
        if np.any(np.abs(beta_orig) > coefficient_bound):
            worst = int(np.argmax(np.abs(beta_orig)))
            raise MonotoneLikelihoodError(
                f"coefficient for '{covariates[worst]}' passed |beta| > {coefficient_bound} "
                "during iteration; the partial likelihood appears monotone "
                "(perfect separation of events)"
            )
        if (
            abs(ll - ll_old) / (abs(ll_old) + 0.1) < tolerance
            and np.abs(grad).max() < score_ceiling
        ):
            converged = True
            break

    try:
        cov_s = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SurvDataError("singular information matrix at the solution") from None

    robust_s = None
    if cluster_variance:
        cluster = _cluster_ids(data, n)
        U = problem.score_residuals(beta)
        codes = np.unique(cluster, return_inverse=True)[1]
        order = np.argsort(codes, kind="stable")
        sorted_codes = codes[order]
        boundaries = np.flatnonzero(np.diff(sorted_codes)) + 1
        offsets = np.concatenate([[0], boundaries])
        G = np.add.reduceat(U[order], offsets, axis=0)
        B = G.T @ G
        robust_s = cov_s @ B @ cov_s

    unscale = np.outer(1.0 / scale, 1.0 / scale)
    return CoxFit(
        coefficients=beta / scale,
        model_covariance=cov_s * unscale,
        robust_covariance=None if robust_s is None else robust_s * unscale,
        log_partial_likelihood=float(ll),
        n_events=int(problem.n_events),
        iterations=iterations,
        converged=converged,
        max_score=float(np.abs(grad).max()),
        n_rows=n,
        ties_method=ties_method,
        covariate_names=tuple(covariates),
    )


def _cluster_ids(data, n):
    for name in ("cluster_id", "subject_id"):
        if name in data:
            return np.asarray(data[name])
    return np.arange(n)


def hazard_ratio(fit, coefficient_index=0, level=0.95, use_robust=False):
    """Wald hazard ratio and confidence interval for one coefficient."""
    if not fit.converged:
        raise ConvergenceError(
            f"hazard_ratio requires a converged fit (stopped after {fit.iterations} "
            f"iterations with max score {fit.max_score:.2e})"
        )
    p = fit.coefficients.size
    if not 0 <= coefficient_index < p:
        raise IndexError(f"coefficient index {coefficient_index} out of range for {p} coefficients")
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")
    if use_robust:
        if fit.robust_covariance is None:
            raise ValueError("robust covariance was not computed for this fit")
        cov = fit.robust_covariance
    else:
        cov = fit.model_covariance
    beta = float(fit.coefficients[coefficient_index])
    se = float(np.sqrt(cov[coefficient_index, coefficient_index]))
    z = float(_norm.ppf(0.5 + level / 2.0))
    return HazardRatio(
        hr=float(np.exp(beta)),
        ci_low=float(np.exp(beta - z * se)),
        ci_high=float(np.exp(beta + z * se)),
        se_log_hr=se,
        level=level,
        robust=use_robust,
    )


# ---------------------------------------------------------------------------
# Restricted cubic splines
# ---------------------------------------------------------------------------

# quantile placements following the usual recommendations for 3-7 knots
_KNOT_QUANTILES = {
    3: (0.10, 0.50, 0.90),
    4: (0.05, 0.35, 0.65, 0.95),
    5: (0.05, 0.275, 0.50, 0.725, 0.95),
    6: (0.05, 0.23, 0.41, 0.59, 0.77, 0.95),
    7: (0.025, 0.1833, 0.3417, 0.50, 0.6583, 0.8167, 0.975),
}


def rcs_basis(values, spec):
    """Restricted cubic spline basis, n x (k-1).

    Column 0 is the identity; columns 1..k-2 are the truncated-power
    cubic terms constrained to be linear beyond both boundary knots,
    normalized by the squared span of the outer knots so every column
    keeps the units of ``values``.
    """
    if not isinstance(spec, SplineSpec):
        spec = SplineSpec(tuple(spec))
    x = np.asarray(values, dtype=float)
    if x.ndim != 1:
        raise SurvDataError("rcs_basis expects a one-dimensional value vector")
    if not np.all(np.isfinite(x)):
        raise SurvDataError("rcs_basis values must be finite")
    t = np.asarray(spec.knots, dtype=float)
    k = t.size
    denom = (t[-1] - t[0]) ** 2
    span = t[-1] - t[-2]

    def cube(v):
        return np.maximum(v, 0.0) ** 3

    cols = [x]
    for j in range(k - 2):
        term = (
            cube(x - t[j])
            - cube(x - t[-2]) * (t[-1] - t[j]) / span
            + cube(x - t[-1]) * (t[-2] - t[j]) / span
        )
        cols.append(term / denom)
    return np.column_stack(cols)


def default_knots(values, k=3):
    """Quantile-placed knots for a restricted cubic spline.

    Placement follows the standard table for k in 3..7 (e.g. 0.10 /
    0.50 / 0.90 for three knots) and falls back to evenly spaced
    quantiles between 0.05 and 0.95 otherwise.  Coincident quantiles
    are nudged up to the nearest distinct data value.
    """
    x = np.asarray(values, dtype=float)
    x = x[np.isfinite(x)]
    if k < 3:
        raise SurvDataError(f"restricted cubic splines need >= 3 knots, got {k}")
    distinct = np.unique(x)
    if distinct.size < k:
        raise SurvDataError(
            f"need at least {k} distinct values to place {k} knots, got {distinct.size}"
        )
    qs = _KNOT_QUANTILES.get(k)
    if qs is None:
        qs = tuple(np.linspace(0.05, 0.95, k))
    knots = np.quantile(x, qs)
    for i in range(1, k):
        if knots[i] <= knots[i - 1]:
            j = np.searchsorted(distinct, knots[i - 1], side="right")
            if j >= distinct.size:
                raise SurvDataError("cannot place strictly increasing knots on these values")
            knots[i] = distinct[j]
    return SplineSpec(tuple(float(v) for v in knots))


# ---------------------------------------------------------------------------
# Bias metrics
# ---------------------------------------------------------------------------


def bias_metrics(true_hr, unadjusted_hr, method_hr):
    """Percent bias of the unadjusted estimate and percent eliminated by a method.

    Both metrics live on the log-hazard scale:

        percent_bias_unadjusted = 100 * (ln true - ln unadj) / ln true
        percent_bias_eliminated = 100 * (1 - (ln true - ln method)
                                             / (ln true - ln unadj))

    Undefined denominators (true HR of exactly 1, or truth equal to the
    unadjusted estimate) yield NaN for the affected metric.
    """
    for name, v in (("true_hr", true_hr), ("unadjusted_hr", unadjusted_hr), ("method_hr", method_hr)):
        if not np.isfinite(v) or v <= 0:
            raise ValueError(f"{name} must be a positive finite hazard ratio, got {v!r}")
    lt = float(np.log(true_hr))
    lu = float(np.log(unadjusted_hr))
    lm = float(np.log(method_hr))
    pbu = 100.0 * (lt - lu) / lt if lt != 0.0 else float("nan")
    denom = lt - lu
    pbe = 100.0 * (1.0 - (lt - lm) / denom) if denom != 0.0 else float("nan")
    return BiasReport(
        true_log_hr=lt,
        unadjusted_log_hr=lu,
        method_log_hr=lm,
        percent_bias_unadjusted=pbu,
        percent_bias_eliminated=pbe,
    )
