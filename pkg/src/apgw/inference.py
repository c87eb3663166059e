"""Post-fit summaries: Wald intervals, ratio curves, cure proportions and model tables."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from . import core
from .errors import CovarianceUnavailableError, CurePlateauError, DomainError, NotCureModelError
from .model import BLOCKS, linear_predictors
from .optimizer import FitResult


class CurveKind(enum.Enum):
    SURVIVOR = "survivor"
    HAZARD = "hazard"
    HAZARD_RATIO = "hazard-ratio"
    QUANTILE_RATIO = "quantile-ratio"


@dataclass(frozen=True)
class CurveRequest:
    kind: CurveKind
    profile: tuple
    grid: tuple
    comparison: Optional[tuple] = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise DomainError("curve grid must be non-empty and strictly increasing")
        ratio = self.kind in (CurveKind.HAZARD_RATIO, CurveKind.QUANTILE_RATIO)
        if ratio and self.comparison is None:
            raise DomainError(f"{self.kind.value} curves need a comparison profile")


def _profile_predictors(fit: FitResult, profile) -> np.ndarray:
    """(4,) linear predictors for one covariate profile (without the intercept)."""
    x = np.concatenate([[1.0], np.asarray(profile, dtype=float).ravel()])
    if x.size != fit.coefs.width:
        raise DomainError(f"profile has {x.size - 1} covariates, model expects {fit.coefs.width - 1}")
    return linear_predictors(fit.coefs, x[None, :])[:, 0]


def _binary_pair(fit: FitResult, j: int, base_profile):
    base = np.array(base_profile, dtype=float).ravel()
    if not 0 <= j < base.size:
        raise DomainError(f"covariate index {j} out of range")
    x0, x1 = base.copy(), base.copy()
    x0[j], x1[j] = 0.0, 1.0
    return _profile_predictors(fit, x0), _profile_predictors(fit, x1)


def hazard_ratio_curve(fit: FitResult, j: int, base_profile, grid) -> np.ndarray:
    """h(t | x_j = 1) / h(t | x_j = 0) for a binary covariate ``j`` (0-based among covariates).

    Factorised as exp(beta_j + alpha_j + tau_j) times a power of time times the
    baseline-ratio factor ``g``; with tau_j = nu_j = 0 and phi = 1 this is the
    familiar ``exp(beta_j + alpha_j) t**(gamma0 (e**alpha_j - 1)) g(t)``.
    """
    t = np.asarray(grid, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("hazard-ratio grid must be positive")
    e0, e1 = _binary_pair(fit, j, base_profile)
    g0, g1 = math.exp(e0[2]), math.exp(e1[2])
    k0, k1 = math.expm1(e0[3]), math.expm1(e1[3])
    log_t = np.log(t)
    # log of (phi1 t)^g1 and (phi0 t)^g0
    s0 = g0 * (e0[0] + log_t)
    s1 = g1 * (e1[0] + log_t)
    log_power = (g1 - 1.0) * (e1[0] + log_t) - (g0 - 1.0) * (e0[0] + log_t)
    log_g = (k1 - 1.0) * np.logaddexp(0.0, s1 - e1[3]) - (k0 - 1.0) * np.logaddexp(0.0, s0 - e0[3])
    log_const = (e1[1] - e0[1]) + (e1[2] - e0[2]) + (e1[0] - e0[0])
    return np.exp(log_const + log_power + log_g)


def quantile_ratio_curve(fit: FitResult, j: int, base_profile, u_grid) -> np.ndarray:
    """Q(u | x_j = 1) / Q(u | x_j = 0).

    With a common lam and kappa this is exp(-tau_j) * Q_A1(u)**(1/gamma1 - 1/gamma0),
    where Q_A1 is the gamma = 1 baseline quantile.
    """
    u = np.asarray(u_grid, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError("quantile-ratio grid must lie in (0, 1)")
    e0, e1 = _binary_pair(fit, j, base_profile)
    logs = []
    for e in (e0, e1):
        kappa = math.expm1(e[3])
        lam = math.exp(e[1])
        if kappa < 0:
            limit = 1.0 - math.exp(lam * math.exp(e[3]) / kappa)
            if np.any(u >= limit):
                raise CurePlateauError(float(np.max(u)), limit)
        base_q = core.baseline_chf_inverse(-np.log1p(-u) / lam, kappa)  # Q_A1 at scale lam
        logs.append(np.log(base_q) * math.exp(-e[2]) - e[0])
    return np.exp(logs[1] - logs[0])


def curve(fit: FitResult, request: CurveRequest) -> np.ndarray:
    grid = np.asarray(request.grid, dtype=float)
    if request.kind in (CurveKind.SURVIVOR, CurveKind.HAZARD):
        e = _profile_predictors(fit, request.profile)
        p = core.ApgwParams(math.exp(e[0]), math.exp(e[1]), math.exp(e[2]), math.expm1(e[3]))
        fn = core.survivor if request.kind is CurveKind.SURVIVOR else core.hazard
        return np.asarray(fn(grid, p))
    # ratio kinds: the covariate that differs between the two profiles
    base = np.asarray(request.profile, dtype=float)
    other = np.asarray(request.comparison, dtype=float)
    diff = np.flatnonzero(base != other)
    if diff.size != 1 or {base[diff[0]], other[diff[0]]} != {0.0, 1.0}:
        raise DomainError("ratio curves compare profiles that differ in exactly one 0/1 covariate")
    j = int(diff[0])
    fn = hazard_ratio_curve if request.kind is CurveKind.HAZARD_RATIO else quantile_ratio_curve
    ratio = fn(fit, j, base, grid)
    # orientation: comparison profile over base profile
    return ratio if other[j] == 1.0 else 1.0 / ratio


# ---------------------------------------------------------------------------
# Wald summaries


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise DomainError(f"confidence level must lie in (0, 1), got {level!r}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def _require_cov(fit: FitResult) -> np.ndarray:
    if fit.covariance is None:
        raise CovarianceUnavailableError(fit.condition_warning or "fit has no covariance matrix")
    return fit.covariance


def standard_errors(fit: FitResult) -> dict:
    cov = _require_cov(fit)
    return dict(zip(fit.free_names, np.sqrt(np.diag(cov))))


def wald_ci(fit: FitResult, level: float = 0.95) -> dict:
    """name -> (estimate, lower, upper)."""
    z = _z(level)
    ses = standard_errors(fit)
    est = dict(zip(fit.free_names, fit.theta))
    return {k: (est[k], est[k] - z * se, est[k] + z * se) for k, se in ses.items()}


def coefficient_table(fit: FitResult) -> list[dict]:
    """One row per coefficient; fixed entries carry se = None."""
    ses = standard_errors(fit) if fit.covariance is not None else {}
    rows = []
    m = fit.coefs.as_matrix()
    mask = fit.spec.free_mask()
    names = ("(Intercept)",) + tuple(fit.spec.covariate_names)
    for i, block in enumerate(BLOCKS):
        for j in range(m.shape[1]):
            key = f"{block}{j}"
            rows.append({
                "block": block,
                "term": names[j],
                "key": key,
                "estimate": float(m[i, j]),
                "estimated": bool(mask[i, j]),
                "se": float(ses[key]) if key in ses else None,
            })
    return rows


# ---------------------------------------------------------------------------
# cure proportions


@dataclass(frozen=True)
class CureEstimate:
    profile: tuple
    estimate: float
    lower: float
    upper: float
    gradient: np.ndarray  # d p / d theta over free parameters


@dataclass(frozen=True)
class CureReport:
    estimates: tuple
    level: float
    difference: Optional[tuple] = None  # (estimate, lower, upper) of p[1] - p[0]


def _cure_at(fit: FitResult, profile, cov, z):
    x = np.concatenate([[1.0], np.asarray(profile, dtype=float).ravel()])
    e = _profile_predictors(fit, profile)
    kappa = math.expm1(e[3])
    if kappa >= 0:
        raise NotCureModelError(f"fitted kappa = {kappa:.4g} >= 0 for profile {tuple(profile)}")
    psi = math.exp(e[3])
    # cure p = exp(-c) with log c = x'beta + x'nu - log(1 - psi)
    log_c = e[1] + e[3] - math.log(-kappa)
    p = math.exp(-math.exp(log_c))
    grad_full = np.zeros((4, x.size))
    grad_full[1] = x
    grad_full[3] = x * (1.0 + psi / -kappa)
    grad = grad_full[fit.spec.free_mask()]
    se = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    lower = math.exp(-math.exp(log_c + z * se))
    upper = math.exp(-math.exp(log_c - z * se))
    dp = p * math.log(p) * grad  # chain rule through p = exp(-exp(log_c))
    return CureEstimate(tuple(float(v) for v in np.ravel(profile)), p, lower, upper, dp)


def cure_report(fit: FitResult, profiles: Sequence, level: float = 0.95) -> CureReport:
    """Cure proportions exp(lam (kappa + 1) / kappa) per profile with delta-method intervals.

    Intervals are formed on the log(-log p) scale and mapped back, so they stay
    inside (0, 1). With exactly two profiles the difference p1 - p0 gets a
    symmetric delta-method interval.
    """
    cov = _require_cov(fit)
    z = _z(level)
    ests = tuple(_cure_at(fit, prof, cov, z) for prof in profiles)
    diff = None
    if len(ests) == 2:
        d = ests[1].estimate - ests[0].estimate
        g = ests[1].gradient - ests[0].gradient
        se = math.sqrt(max(float(g @ cov @ g), 0.0))
        diff = (d, d - z * se, d + z * se)
    return CureReport(ests, level, diff)


# ---------------------------------------------------------------------------
# model comparison


def model_table(fits: Sequence[FitResult]) -> list[dict]:
    """dim, loglik, AIC, BIC and their differences from the best model in the set."""
    if not fits:
        return []
    digests = {f.data_digest for f in fits}
    if len(digests) != 1:
        raise DomainError("model_table needs fits to the same dataset")
    best_aic = min(f.aic for f in fits)
    best_bic = min(f.bic for f in fits)
    return [
        {
            "model": f.spec.label,
            "dim": f.n_params,
            "loglik": f.loglik,
            "aic": f.aic,
            "bic": f.bic,
            "delta_aic": f.aic - best_aic,
            "delta_bic": f.bic - best_bic,
            "converged": f.converged,
        }
        for f in fits
    ]
