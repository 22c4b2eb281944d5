"""Independent brute-force references used to check the fast engine.

Everything here enumerates risk sets directly from the definition
{start < t <= stop} and never shares code with waitbias.survcore.
"""

import numpy as np
from scipy import optimize


def risk_set(start, stop, t):
    return np.flatnonzero((start < t) & (t <= stop))


def log_partial_likelihood(start, stop, status, X, beta, ties="efron"):
    """Direct evaluation of the (Efron or Breslow) log partial likelihood."""
    start = np.asarray(start, float)
    stop = np.asarray(stop, float)
    status = np.asarray(status, int)
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] != start.size:
        X = X.T
    beta = np.atleast_1d(np.asarray(beta, float))
    eta = X @ beta
    w = np.exp(eta)
    ll = 0.0
    for t in np.unique(stop[status == 1]):
        deaths = np.flatnonzero((stop == t) & (status == 1))
        at_risk = risk_set(start, stop, t)
        d = deaths.size
        s0 = w[at_risk].sum()
        s0_d = w[deaths].sum()
        ll += eta[deaths].sum()
        for ell in range(d):
            if ties == "efron":
                ll -= np.log(s0 - (ell / d) * s0_d)
            else:
                ll -= np.log(s0)
    return ll


def log_partial_likelihood_stratified(df, covariates, beta, ties="efron"):
    ll = 0.0
    strata = df["stratum"] if "stratum" in df else np.zeros(len(df["start"]))
    strata = np.asarray(strata)
    start = np.asarray(df["start"], float)
    stop = np.asarray(df["stop"], float)
    status = np.asarray(df["status"], int)
    X = np.column_stack([np.asarray(df[c], float) for c in covariates])
    for s in np.unique(strata):
        m = strata == s
        ll += log_partial_likelihood(start[m], stop[m], status[m], X[m], beta, ties)
    return ll


def _grid_log_pl(start, stop, status, X, betas, ties):
    """Exact log partial likelihood evaluated at many beta points at once."""
    eta = X @ betas.T  # (n, G)
    w = np.exp(eta)
    ll = np.zeros(betas.shape[0])
    for t in np.unique(stop[status == 1]):
        deaths = np.flatnonzero((stop == t) & (status == 1))
        at_risk = risk_set(start, stop, t)
        d = deaths.size
        s0 = w[at_risk].sum(axis=0)
        s0_d = w[deaths].sum(axis=0)
        ll += eta[deaths].sum(axis=0)
        for ell in range(d):
            if ties == "efron":
                ll -= np.log(s0 - (ell / d) * s0_d)
            else:
                ll -= np.log(s0)
    return ll


def grid_refine_mle(df, covariates, ties="efron", lo=-5.0, hi=5.0, coarse=41):
    """Dense-grid scan plus Nelder-Mead refinement of the exact partial likelihood."""
    p = len(covariates)
    start = np.asarray(df["start"], float)
    stop = np.asarray(df["stop"], float)
    status = np.asarray(df["status"], int)
    X = np.column_stack([np.asarray(df[c], float) for c in covariates])
    axes = [np.linspace(lo, hi, coarse)] * p
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    vals = _grid_log_pl(start, stop, status, X, pts, ties)
    best = pts[np.argmax(vals)]
    res = optimize.minimize(
        lambda b: -_grid_log_pl(start, stop, status, X, b[None, :], ties)[0],
        best,
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000},
    )
    return res.x


def numeric_gradient(fun, beta, h=1e-6):
    beta = np.asarray(beta, float)
    g = np.zeros_like(beta)
    for j in range(beta.size):
        up = beta.copy()
        dn = beta.copy()
        up[j] += h
        dn[j] -= h
        g[j] = (fun(up) - fun(dn)) / (2 * h)
    return g


def score_residuals(start, stop, status, X, beta, ties="efron"):
    """Literal per-row score residuals via loops over Efron sub-steps.

    Row i accumulates (x_i - xbar_l) * (dN_{i,l} - Y_{i,l} w_i / s0_l)
    over every sub-step l of every event time, where a row dying at the
    event time has dN = 1/d and risk weight (1 - l/d) under Efron
    (weight 1 under Breslow).
    """
    start = np.asarray(start, float)
    stop = np.asarray(stop, float)
    status = np.asarray(status, int)
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] != start.size:
        X = X.T
    n, p = X.shape
    w = np.exp(X @ np.atleast_1d(beta))
    U = np.zeros((n, p))
    for t in np.unique(stop[status == 1]):
        deaths = set(np.flatnonzero((stop == t) & (status == 1)).tolist())
        at_risk = risk_set(start, stop, t)
        d = len(deaths)
        for ell in range(d):
            s0 = 0.0
            s1 = np.zeros(p)
            for i in at_risk:
                yw = 1.0
                if i in deaths and ties == "efron":
                    yw = 1.0 - ell / d
                s0 += yw * w[i]
                s1 += yw * w[i] * X[i]
            xbar = s1 / s0
            for i in at_risk:
                yw = 1.0
                if i in deaths and ties == "efron":
                    yw = 1.0 - ell / d
                dn = (1.0 / d) if i in deaths else 0.0
                U[i] += (X[i] - xbar) * (dn - yw * w[i] / s0)
    return U


def random_counting_dataset(rng, n_max=8, p_max=2, force_event=True):
    """Small random dataset with truncation, censoring, and possible ties."""
    n = int(rng.integers(2, n_max + 1))
    p = int(rng.integers(1, p_max + 1))
    start = np.where(rng.random(n) < 0.4, rng.uniform(0, 2, n), 0.0)
    gap = rng.choice([0.5, 1.0, 1.5, 2.0, 3.0], size=n)  # discrete -> ties likely
    stop = start + gap
    status = (rng.random(n) < 0.75).astype(int)
    if force_event and status.sum() == 0:
        status[int(rng.integers(0, n))] = 1
    X = rng.choice([-1.0, 0.0, 1.0, 2.0], size=(n, p))
    return {
        "start": start,
        "stop": stop,
        "status": status,
        **{f"x{j}": X[:, j] for j in range(p)},
    }, [f"x{j}" for j in range(p)]
