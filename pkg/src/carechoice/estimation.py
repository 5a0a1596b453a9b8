"""Estimators: cost regressions, the choice-model MLE, probit, and DiD.

The estimation strategy is two-step. Step one recovers the cost technology
from claims with log-linear fixed-effects regressions: the severity
elasticity of ambulatory cost, and the severity elasticity, ambulatory-use
discount, and facility cost multiples of inpatient cost. Step two plugs the
cost parameters into the insured net-utility formula and estimates the
preference parameters (prevention-benefit coefficients and travel
disutilities) by maximum likelihood on observed care choices. Because the
net utility is linear in the preference parameters, step two is a logistic
regression with a known offset, so the log likelihood is globally concave.

Inference for step two uses a nonparametric cluster bootstrap that resamples
patients, since the cost parameters entering the offset are themselves
estimated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr

from .model import (
    CostParams,
    Facility,
    InsurancePlan,
    PatientProfile,
    PreferenceParams,
    Severity,
    choice_probability,
    log_choice_probability,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# |coefficient| beyond this on the probit/logit scale means the optimizer is
# chasing a perfectly separated likelihood rather than an interior optimum.
SEPARATION_BOUND = 1e3


class RankDeficientError(ValueError):
    """Design matrix has linearly dependent columns; names the culprits."""


class SeparationError(RuntimeError):
    """Binary-response likelihood has no interior maximum."""


@dataclass(frozen=True)
class RegressionResult:
    """Fitted regression: coefficients, robust inference, and fit summary.

    ``robust_se`` is HC1 when no cluster variable was given and CR1
    (cluster-robust with small-sample correction) otherwise. For binary
    models ``adj_r2`` holds McFadden's pseudo R-squared and
    ``marginal_effects`` / ``marginal_se`` hold average marginal effects
    with delta-method standard errors.
    """

    coefficients: dict
    robust_se: dict
    adj_r2: float
    n_obs: int
    residuals: np.ndarray
    vcov: np.ndarray
    param_names: tuple
    marginal_effects: Union[dict, None] = None
    marginal_se: Union[dict, None] = None
    loglik: Union[float, None] = None


@dataclass(frozen=True)
class LogitFit:
    """Choice-model MLE output.

    ``params`` reassembles the point estimates into a PreferenceParams;
    ``estimates`` holds the raw vector in ``param_names`` order. The stored
    ``loglik`` is reproducible from the estimates via ``loglik_and_grad``.
    ``bootstrap_se`` is empty until a bootstrap is run.
    """

    params: PreferenceParams
    param_names: tuple
    estimates: np.ndarray
    loglik: float
    converged: bool
    grad_norm: float
    n_obs: int
    bootstrap_se: dict
    n_bootstrap: int = 0


# ---------------------------------------------------------------------------
# Design-matrix assembly and OLS
# ---------------------------------------------------------------------------


def build_design(data: pd.DataFrame, columns: Sequence[str], fe_groups: Sequence[str] = (),
                 intercept: bool = True):
    """Assemble a design matrix from named columns plus fixed-effect dummies.

    Each variable in ``fe_groups`` is expanded into indicator columns with
    the first (sorted) level omitted as the reference. Returns (X, names).
    """
    blocks = []
    names = []
    n = len(data)
    if intercept:
        blocks.append(np.ones((n, 1)))
        names.append("const")
    for col in columns:
        vals = np.asarray(data[col], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"column {col!r} contains non-finite values")
        blocks.append(vals.reshape(-1, 1))
        names.append(col)
    for var in fe_groups:
        levels = sorted(pd.unique(data[var]))
        for level in levels[1:]:
            blocks.append((np.asarray(data[var]) == level).astype(float).reshape(-1, 1))
            names.append(f"{var}[{level}]")
    X = np.hstack(blocks) if blocks else np.empty((n, 0))
    return X, names


def _check_rank(X: np.ndarray, names: Sequence[str], context: str):
    """Raise RankDeficientError naming dependent columns, if any."""
    if X.shape[1] == 0:
        return
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = sorted(names[j] for j in piv[rank:])
        raise RankDeficientError(
            f"{context}: design matrix is rank deficient; "
            f"drop or merge these columns: {', '.join(bad)}"
        )


def _sandwich_vcov(X: np.ndarray, resid: np.ndarray, xtx_inv: np.ndarray,
                   cluster: Union[np.ndarray, None]):
    """Heteroskedasticity-robust (HC1) or cluster-robust (CR1) covariance."""
    n, k = X.shape
    if cluster is None:
        meat = (X * (resid ** 2)[:, None]).T @ X
        scale = n / max(n - k, 1)
        return scale * xtx_inv @ meat @ xtx_inv
    cl = pd.factorize(np.asarray(cluster))[0]
    n_groups = cl.max() + 1
    if n_groups < 2:
        raise ValueError("cluster-robust inference needs at least two clusters")
    scores = X * resid[:, None]
    group_sums = np.zeros((n_groups, k))
    np.add.at(group_sums, cl, scores)
    meat = group_sums.T @ group_sums
    scale = (n_groups / (n_groups - 1)) * ((n - 1) / max(n - k, 1))
    return scale * xtx_inv @ meat @ xtx_inv


def ols(y, data: pd.DataFrame, columns: Sequence[str], fe_groups: Sequence[str] = (),
        intercept: bool = True, cluster: Union[str, None] = None) -> RegressionResult:
    """Least squares with fixed-effect dummies and robust standard errors.

    ``cluster`` names a column of ``data`` to cluster on; without it the
    standard errors are HC1. Collinear designs raise RankDeficientError
    naming the offending columns instead of silently dropping them.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    X, names = build_design(data, columns, fe_groups=fe_groups, intercept=intercept)
    if len(y) != X.shape[0]:
        raise ValueError(f"response length {len(y)} != design rows {X.shape[0]}")
    if X.shape[0] <= X.shape[1]:
        raise ValueError(f"need more observations ({X.shape[0]}) than parameters ({X.shape[1]})")
    _check_rank(X, names, "ols")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    xtx_inv = np.linalg.inv(X.T @ X)
    cl = np.asarray(data[cluster]) if cluster is not None else None
    vcov = _sandwich_vcov(X, resid, xtx_inv, cl)
    se = np.sqrt(np.diag(vcov))
    n, k = X.shape
    ss_res = float(resid @ resid)
    if intercept:
        ss_tot = float(np.sum((y - y.mean()) ** 2))
    else:
        ss_tot = float(y @ y)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if ss_tot > 0 else float("nan")
    return RegressionResult(
        coefficients=dict(zip(names, coef.tolist())),
        robust_se=dict(zip(names, se.tolist())),
        adj_r2=adj,
        n_obs=n,
        residuals=resid,
        vcov=vcov,
        param_names=tuple(names),
    )


# ---------------------------------------------------------------------------
# Step one: cost regressions
# ---------------------------------------------------------------------------


def _theta_of(value) -> float:
    return value.theta if isinstance(value, Severity) else float(value)


def estimate_cost_params(ambulatory_claims: pd.DataFrame, inpatient_claims: pd.DataFrame,
                         theta_by_patient: Mapping[str, object], patients: pd.DataFrame,
                         covariates: Sequence[str] = ("age", "male"),
                         cluster: str = "patient_id") -> tuple:
    """Recover the cost technology from claims via log-linear regressions.

    The ambulatory regression fits log yearly management cost on log
    severity, demeaned covariates, and year dummies. The inpatient
    regression aggregates cardiovascular hospitalization cost per
    patient-year-facility and adds an ambulatory-use indicator plus
    facility dummies (THC reference). Severity elasticities come off the
    log-severity slopes, the effectiveness parameter off the use
    coefficient, facility cost multiples off exponentiated facility
    dummies, and the money scale and ambulatory price ratio off the
    intercepts (geometric-mean ceilings at the reference year and
    facility, since covariates are demeaned).

    ``patients`` supplies demographics and the observed ``used_ambulatory``
    flag. Returns ``(CostParams, {"ambulatory": ..., "inpatient": ...})``.
    """
    for label, df in (("ambulatory", ambulatory_claims), ("inpatient", inpatient_claims)):
        required = {"patient_id", "year", "total_cost_rmb"}
        missing = required - set(df.columns)
        if missing:
            raise ValueError(f"{label} claims lack columns: {sorted(missing)}")
    if "facility_type" not in inpatient_claims.columns:
        raise ValueError("inpatient claims lack columns: ['facility_type']")
    pat = patients.set_index("patient_id") if "patient_id" in patients.columns else patients
    if "used_ambulatory" not in pat.columns or pat["used_ambulatory"].isna().any():
        raise ValueError("every patient needs an observed used_ambulatory flag")

    theta = {}
    boundary = []
    for pid, val in theta_by_patient.items():
        th = _theta_of(val)
        if th <= 1e-6 or th >= 1.0 - 1e-6:
            boundary.append(pid)
        else:
            theta[pid] = th
    if boundary:
        warnings.warn(
            f"excluding {len(boundary)} patient(s) with severity at the clamp "
            "boundary from the cost regressions", stacklevel=2)

    def attach(df):
        df = df[df["patient_id"].isin(theta)].copy()
        df["log_theta"] = np.log(df["patient_id"].map(theta).astype(float))
        for cov in covariates:
            vals = df["patient_id"].map(pat[cov]).astype(float)
            df[cov] = vals - vals.mean()  # demeaned so intercepts are ceilings
        return df

    amb = attach(ambulatory_claims)
    if len(amb) == 0:
        raise ValueError("no ambulatory claims to fit the price regression on")
    amb_res = ols(np.log(amb["total_cost_rmb"].to_numpy(float)), amb,
                  ["log_theta", *covariates], fe_groups=["year"], cluster=cluster)
    alpha = amb_res.coefficients["log_theta"]

    inp = inpatient_claims
    if "diagnosis_class" in inp.columns:
        inp = inp[inp["diagnosis_class"] == "CVD"]
    if len(inp) == 0:
        raise ValueError("no cardiovascular inpatient claims to fit the cost regression on")
    agg = (inp.groupby(["patient_id", "year", "facility_type"], as_index=False)
              ["total_cost_rmb"].sum())
    agg = attach(agg)
    agg["used_ambulatory"] = agg["patient_id"].map(pat["used_ambulatory"]).astype(float)
    inp_res = ols(np.log(agg["total_cost_rmb"].to_numpy(float)), agg,
                  ["log_theta", "used_ambulatory", *covariates],
                  fe_groups=["year", "facility_type"], cluster=cluster)
    beta = inp_res.coefficients["log_theta"]
    rho = inp_res.coefficients["used_ambulatory"]
    if beta <= 0:
        raise ValueError(f"inpatient severity elasticity must be positive, got {beta:.4f}")

    s_mult = {Facility.THC: 1.0}
    for fac in (Facility.TCM, Facility.GENERAL, Facility.NONLOCAL):
        key = f"facility_type[{int(fac)}]"
        if key in inp_res.coefficients:
            s_mult[fac] = math.exp(inp_res.coefficients[key])
    money_scale = math.exp(inp_res.coefficients["const"])
    p_ratio = math.exp(amb_res.coefficients["const"]) / money_scale

    cp = CostParams(alpha=alpha, beta=beta, rho=rho, s_mult=s_mult,
                    p_ratio=p_ratio, money_scale_rmb=money_scale)
    return cp, {"ambulatory": amb_res, "inpatient": inp_res}


# ---------------------------------------------------------------------------
# Step two: choice-model MLE
# ---------------------------------------------------------------------------


def logit_param_names(rural_minority: bool) -> tuple:
    """Active preference parameters, in estimation order."""
    if rural_minority:
        return ("gamma_h", "gamma_l", "gamma_r", "gamma_m", "t_b", "t_h", "t_m")
    return ("gamma_h", "gamma_l", "t_b", "t_h", "t_m")


def params_to_vector(pp: PreferenceParams) -> np.ndarray:
    return np.array([getattr(pp, name) for name in logit_param_names(pp.rural_minority)])


def vector_to_params(x: np.ndarray, rural_minority: bool) -> PreferenceParams:
    names = logit_param_names(rural_minority)
    return PreferenceParams(rural_minority=rural_minority, **dict(zip(names, x.tolist())))


def logit_features(population: Sequence[PatientProfile], cp: CostParams,
                   plan: InsurancePlan, rural_minority: bool = False):
    """Cast the insured net utility as offset + features dot parameters.

    The utility is linear in the preference parameters: the
    prevention-value regressor is ``(1 - theta) * s / phi_hc`` split across
    the patient groups each gamma coefficient applies to, and each travel
    component loads ``-1 / phi_hc`` on its indicator. The offset collects
    the parameter-free avoided-cost and ambulatory-price terms.

    Returns (offset, X, names, d) where d is the observed-choice vector
    (may contain NaN when choices are unobserved).
    """
    names = logit_param_names(rural_minority)
    n = len(population)
    theta = np.array([p.theta.theta for p in population])
    s = np.array([cp.s(p.facility_choice) for p in population])
    phi_hc = np.array([plan.phi_hc(p.poor_household) for p in population])
    disadv = np.array([p.disadvantaged for p in population], dtype=float)
    high = np.array([p.high_income for p in population], dtype=float)
    male = np.array([p.male for p in population], dtype=float)
    d = np.array([np.nan if p.used_ambulatory is None else float(p.used_ambulatory)
                  for p in population])

    offset = ((1.0 - cp.effectiveness ** cp.beta) * s * theta ** cp.beta
              - (plan.phi_pc / phi_hc) * theta ** cp.alpha * cp.p_ratio)
    pv = (1.0 - theta) * s / phi_hc
    cols = {
        "gamma_h": pv * (1.0 - disadv),
        "gamma_l": pv * disadv,
        "t_b": -1.0 / phi_hc,
        "t_h": -high / phi_hc,
        "t_m": -male / phi_hc,
    }
    if rural_minority:
        rural = np.array([p.rural_hukou for p in population], dtype=float)
        minority = np.array([p.minority for p in population], dtype=float)
        cols["gamma_r"] = pv * rural
        cols["gamma_m"] = pv * minority
    X = np.column_stack([cols[name] for name in names])
    assert X.shape == (n, len(names))
    return offset, X, names, d


def loglik_and_grad(pp: PreferenceParams, population: Sequence[PatientProfile],
                    cp: CostParams, plan: InsurancePlan):
    """Choice log likelihood and its gradient over the active parameters.

    Gradient order follows ``logit_param_names(pp.rural_minority)``. Every
    patient must carry an observed choice.
    """
    offset, X, _, d = logit_features(population, cp, plan, pp.rural_minority)
    if np.isnan(d).any():
        raise ValueError("all patients need observed choices for the likelihood")
    x = params_to_vector(pp)
    v = offset + X @ x
    ll = float(np.sum(log_choice_probability(v, d)))
    grad = X.T @ (d - choice_probability(v))
    return ll, grad


def _maximize_loglik(offset, X, d, x0, gtol=1e-8, max_newton=50):
    """Concave-likelihood maximizer: BFGS warm start plus Newton polish."""

    def negll(x):
        v = offset + X @ x
        ll = np.sum(log_choice_probability(v, d))
        sig = choice_probability(v)
        return -ll, -(X.T @ (d - sig))

    res = minimize(negll, x0, jac=True, method="BFGS",
                   options={"gtol": gtol, "maxiter": 500})
    x = res.x
    # Newton steps sharpen the BFGS solution to the gradient tolerance.
    f, g = negll(x)
    for _ in range(max_newton):
        if np.max(np.abs(g)) < gtol:
            break
        v = offset + X @ x
        sig = choice_probability(v)
        w = sig * (1.0 - sig)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        while scale > 1e-6:
            f_new, g_new = negll(x + scale * step)
            if f_new <= f:
                x, f, g = x + scale * step, f_new, g_new
                break
            scale *= 0.5
        else:
            break
    return x, -f, np.max(np.abs(g))


def fit_logit_mle(population: Sequence[PatientProfile], cp: CostParams,
                  plan: InsurancePlan, init: Union[PreferenceParams, None] = None,
                  rural_minority: bool = False, n_starts: int = 5, seed: int = 0,
                  gtol: float = 1e-8) -> LogitFit:
    """Estimate the preference parameters by maximum likelihood.

    The likelihood is globally concave (logistic with a known offset), so
    the multi-start is belt and braces: one default or supplied start plus
    ``n_starts - 1`` perturbations, keeping the best converged optimum.
    Raises SeparationError when the sample cannot identify an interior
    optimum (all choices identical, or estimates diverging) and
    RankDeficientError when feature columns are collinear, naming the
    parameters involved.
    """
    offset, X, names, d = logit_features(population, cp, plan, rural_minority)
    if np.isnan(d).any():
        raise ValueError("all patients need observed choices before estimation")
    if d.min() == d.max():
        raise SeparationError(
            "every patient made the same choice; preference parameters are not identified")
    _check_rank(X, names, "choice model")

    if init is not None:
        if init.rural_minority != rural_minority:
            raise ValueError("init parameterization does not match rural_minority flag")
        x0 = params_to_vector(init)
    else:
        x0 = np.zeros(len(names))
        x0[names.index("t_b")] = 0.1
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
    starts = [x0] + [x0 + rng.uniform(-0.05, 0.05, size=len(names))
                     for _ in range(max(n_starts - 1, 0))]

    best = None
    for start in starts:
        x, ll, gnorm = _maximize_loglik(offset, X, d, start, gtol=gtol)
        if best is None or ll > best[1]:
            best = (x, ll, gnorm)
    x, ll, gnorm = best
    if np.max(np.abs(x)) > SEPARATION_BOUND or ll > -1e-6:
        # A loglik at 0 means every choice is predicted with certainty,
        # which no interior optimum can do.
        raise SeparationError(
            "estimates diverged; the sample is (quasi-)separated in the features")
    converged = bool(gnorm < 1e-6)
    return LogitFit(
        params=vector_to_params(x, rural_minority),
        param_names=tuple(names),
        estimates=x,
        loglik=ll,
        converged=converged,
        grad_norm=float(gnorm),
        n_obs=len(population),
        bootstrap_se={},
    )


def bootstrap_se(population: Sequence[PatientProfile], cp: CostParams,
                 plan: InsurancePlan, fit: LogitFit, B: int = 200,
                 seed: int = 0, max_failure_share: float = 0.10) -> LogitFit:
    """Cluster bootstrap over patients for the choice-model estimates.

    Patients are resampled with replacement ``B`` times and the model refit
    from the full-sample estimates. Replicates that fail to converge are
    dropped; more than ``max_failure_share`` of them failing aborts with an
    error. Returns a copy of ``fit`` with standard errors attached. The
    replicate stream is deterministic in ``seed`` and independent of the
    other simulation stages.
    """
    if B < 2:
        raise ValueError("need at least two bootstrap replicates")
    rural_minority = fit.params.rural_minority
    n = len(population)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))
    draws = rng.integers(0, n, size=(B, n))  # pre-drawn: order-independent

    estimates = []
    failures = 0
    for b in range(B):
        sample = [population[i] for i in draws[b]]
        try:
            rep = fit_logit_mle(sample, cp, plan, init=fit.params,
                                rural_minority=rural_minority, n_starts=1)
        except (SeparationError, RankDeficientError):
            failures += 1
            continue
        if not rep.converged:
            failures += 1
            continue
        estimates.append(rep.estimates)
    if failures > max_failure_share * B:
        raise RuntimeError(
            f"{failures}/{B} bootstrap replicates failed to converge; "
            "the sample is too unstable for bootstrap inference")
    est = np.vstack(estimates)
    se = est.std(axis=0, ddof=1)
    return LogitFit(
        params=fit.params,
        param_names=fit.param_names,
        estimates=fit.estimates,
        loglik=fit.loglik,
        converged=fit.converged,
        grad_norm=fit.grad_norm,
        n_obs=fit.n_obs,
        bootstrap_se=dict(zip(fit.param_names, se.tolist())),
        n_bootstrap=len(estimates),
    )


# ---------------------------------------------------------------------------
# Reduced form: probit and difference-in-differences
# ---------------------------------------------------------------------------


def _probit_lambda(z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Inverse-Mills score factor q * phi(z) / Phi(q z), stable in both tails."""
    log_phi = -0.5 * z * z - _LOG_SQRT_2PI
    return q * np.exp(log_phi - log_ndtr(q * z))


def probit_fit(outcome, data: pd.DataFrame, columns: Sequence[str],
               fe_groups: Sequence[str] = (), intercept: bool = True,
               cluster: Union[str, None] = None, gtol: float = 1e-8) -> RegressionResult:
    """Probit MLE with average marginal effects and robust inference.

    Newton's method on the (log-concave) likelihood with tail-stable normal
    log-CDF evaluation, so extreme linear indices degrade gracefully rather
    than overflowing. Indicator regressors get discrete-difference AMEs,
    continuous ones the usual density-weighted slope; AME standard errors
    use the delta method. ``adj_r2`` reports McFadden's pseudo R-squared.
    """
    d = np.asarray(outcome, dtype=float)
    if not np.all((d == 0.0) | (d == 1.0)):
        raise ValueError("probit outcome must be binary (0/1)")
    if d.min() == d.max():
        raise SeparationError("outcome never varies; probit coefficients are not identified")
    X, names = build_design(data, columns, fe_groups=fe_groups, intercept=intercept)
    if X.shape[0] != len(d):
        raise ValueError(f"outcome length {len(d)} != design rows {X.shape[0]}")
    _check_rank(X, names, "probit")
    n, k = X.shape
    q = 2.0 * d - 1.0

    b = np.zeros(k)
    for _ in range(100):
        z = X @ b
        lam = _probit_lambda(z, q)
        grad = X.T @ lam
        if np.max(np.abs(grad)) < gtol:
            break
        w = lam * (lam + z)  # observed information weights, positive
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(f"probit information matrix is singular: {exc}")
        ll_old = float(np.sum(log_ndtr(q * z)))
        if 0.5 * float(grad @ step) <= 32.0 * np.finfo(float).eps * max(1.0, abs(ll_old)):
            # Remaining certified improvement is inside the loglik's own
            # rounding noise; the line search can only chase that noise.
            break
        scale = 1.0
        while scale > 1e-8:
            cand = b + scale * step
            ll_new = float(np.sum(log_ndtr(q * (X @ cand))))
            if ll_new >= ll_old:
                b = cand
                break
            scale *= 0.5
        else:
            break
        if np.max(np.abs(b)) > SEPARATION_BOUND:
            raise SeparationError(
                "probit estimates diverged; the outcome is (quasi-)separated")
    else:
        raise RuntimeError("probit failed to converge in 100 Newton iterations")

    z = X @ b
    lam = _probit_lambda(z, q)
    grad = X.T @ lam
    if np.max(np.abs(grad)) > 1e-4 * max(1.0, float(np.abs(np.sum(log_ndtr(q * z))))):
        raise RuntimeError("probit gradient did not vanish at the solution")
    w = lam * (lam + z)
    hess = X.T @ (X * w[:, None])
    hess_inv = np.linalg.inv(hess)
    if cluster is not None:
        cl = pd.factorize(np.asarray(data[cluster]))[0]
        n_groups = cl.max() + 1
        if n_groups < 2:
            raise ValueError("cluster-robust inference needs at least two clusters")
        scores = X * lam[:, None]
        group_sums = np.zeros((n_groups, k))
        np.add.at(group_sums, cl, scores)
        meat = group_sums.T @ group_sums
        corr = (n_groups / (n_groups - 1)) * ((n - 1) / max(n - k, 1))
        vcov = corr * hess_inv @ meat @ hess_inv
    else:
        vcov = hess_inv

    ll = float(np.sum(log_ndtr(q * z)))
    p_bar = d.mean()
    ll0 = n * (p_bar * math.log(p_bar) + (1.0 - p_bar) * math.log(1.0 - p_bar))
    pseudo_r2 = 1.0 - ll / ll0

    phi_z = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
    ame = {}
    ame_se = {}
    for j, name in enumerate(names):
        if name == "const":
            continue
        col = X[:, j]
        is_indicator = np.all((col == 0.0) | (col == 1.0))
        if is_indicator:
            z1 = z + (1.0 - col) * b[j]
            z0 = z - col * b[j]
            effect = float(np.mean(ndtr(z1) - ndtr(z0)))
            phi1 = np.exp(-0.5 * z1 * z1 - _LOG_SQRT_2PI)
            phi0 = np.exp(-0.5 * z0 * z0 - _LOG_SQRT_2PI)
            X1 = X.copy()
            X1[:, j] = 1.0
            X0 = X.copy()
            X0[:, j] = 0.0
            jac = (phi1[:, None] * X1 - phi0[:, None] * X0).mean(axis=0)
        else:
            effect = float(np.mean(phi_z) * b[j])
            jac = ((-z * phi_z)[:, None] * X).mean(axis=0) * b[j]
            jac[j] += float(np.mean(phi_z))
        ame[name] = effect
        ame_se[name] = float(math.sqrt(max(jac @ vcov @ jac, 0.0)))

    se = np.sqrt(np.diag(vcov))
    return RegressionResult(
        coefficients=dict(zip(names, b.tolist())),
        robust_se=dict(zip(names, se.tolist())),
        adj_r2=pseudo_r2,
        n_obs=n,
        residuals=d - ndtr(z),
        vcov=vcov,
        param_names=tuple(names),
        marginal_effects=ame,
        marginal_se=ame_se,
        loglik=ll,
    )


def did_analysis(panel: pd.DataFrame, demographics: Sequence[str] = (),
                 severity_col: Union[str, None] = None,
                 cluster: str = "patient_id") -> RegressionResult:
    """Difference-in-differences probit for ambulatory use around a reform.

    ``panel`` needs one row per patient-year with columns ``patient_id``,
    ``year``, ``post``, ``used_ambulatory``, and ``disadvantaged``. The
    design is a disadvantaged indicator, its interaction with the post
    period, and year dummies (which absorb the post main effect), plus any
    ``demographics`` and, if given, dummies for ``severity_col``. The
    interaction's average marginal effect is the treatment estimate;
    inference clusters on patients.
    """
    required = {"patient_id", "year", "post", "used_ambulatory", "disadvantaged"}
    missing = required - set(panel.columns)
    if missing:
        raise ValueError(f"panel lacks columns: {sorted(missing)}")
    years = pd.unique(panel["year"])
    if len(years) < 2:
        raise ValueError("difference-in-differences needs at least two years")
    treated = panel["disadvantaged"].astype(float)
    if treated.min() == treated.max():
        raise ValueError("need both disadvantaged and regular patients in the panel")

    data = panel.copy()
    data["disadvantaged"] = treated
    data["disadvantaged_x_post"] = treated * data["post"].astype(float)
    columns = ["disadvantaged", "disadvantaged_x_post", *demographics]
    fe_groups = ["year"]
    if severity_col is not None:
        fe_groups = fe_groups + [severity_col]
    return probit_fit(data["used_ambulatory"].astype(float), data, columns,
                      fe_groups=fe_groups, cluster=cluster)
