"""Maximum-likelihood fitting: BFGS with Armijo backtracking, multi-start and diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ApgwError, NoFiniteStartError
from .likelihood import LikelihoodWorkspace, information_from_workspace, is_positive_definite
from .model import BLOCKS, ModelSpec, RegressionCoefficients, SurvivalDataset

log = logging.getLogger(__name__)

GOMPERTZ_BOUNDARY_NU = 15.0
_MAX_STEP = 5.0  # max-norm cap on a single quasi-Newton step
_ARMIJO_C1 = 1e-4
# consecutive iterations below step_tolerance before giving up on the gradient test
_STALL_LIMIT = 10


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-10
    n_starts: int = 5
    seed: int = 0
    start_sd: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0 and self.step_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass
class FitResult:
    coefs: RegressionCoefficients
    loglik: float
    covariance: Optional[np.ndarray]
    converged: bool
    n_iter: int
    condition_warning: Optional[str]
    aic: float
    bic: float
    spec: ModelSpec
    n_obs: int
    data_digest: str
    gradient_norm: float = math.nan
    information: Optional[np.ndarray] = None
    flags: tuple = ()
    start_logliks: tuple = field(default=(), repr=False)

    @property
    def n_params(self) -> int:
        return self.spec.n_free

    @property
    def free_names(self) -> list[str]:
        return self.spec.free_names()

    @property
    def theta(self) -> np.ndarray:
        return self.coefs.as_matrix()[self.spec.free_mask()]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "coefs": self.coefs.to_dict(),
            "free_names": self.free_names,
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "gradient_norm": self.gradient_norm,
            "condition_warning": self.condition_warning,
            "flags": list(self.flags),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "data_digest": self.data_digest,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        cov = d.get("covariance")
        return cls(
            coefs=RegressionCoefficients.from_dict(d["coefs"]),
            loglik=float(d["loglik"]),
            covariance=None if cov is None else np.asarray(cov, dtype=float),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            condition_warning=d.get("condition_warning"),
            aic=float(d["aic"]),
            bic=float(d["bic"]),
            spec=ModelSpec.from_dict(d["spec"]),
            n_obs=int(d["n_obs"]),
            data_digest=d["data_digest"],
            gradient_norm=float(d.get("gradient_norm", math.nan)),
            flags=tuple(d.get("flags", ())),
        )


@dataclass
class _Run:
    theta: np.ndarray
    loglik: float
    grad: np.ndarray
    n_iter: int
    converged: bool


def _objective(ws: LikelihoodWorkspace, theta):
    """Negative log-likelihood and gradient; (inf, None) where not evaluable."""
    try:
        value, grad = ws.evaluate(theta)
    except ApgwError:
        return math.inf, None
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        return math.inf, None
    return -value, -grad


def bfgs_maximize(ws: LikelihoodWorkspace, theta0, config: OptimizerConfig) -> _Run:
    """Maximise the log-likelihood from one start.

    Inverse-Hessian BFGS on the negative log-likelihood. Steps are accepted by
    Armijo backtracking, so the log-likelihood never decreases by more than the
    round-off of its own evaluation (``64 eps |loglik|``), the only regime where
    a step is accepted on gradient reduction alone.
    """
    x = np.asarray(theta0, dtype=float).copy()
    f, g = _objective(ws, x)
    if g is None:
        return _Run(x, -math.inf, np.full_like(x, np.nan), 0, False)
    k = x.size
    h_inv = np.eye(k)
    scaled = False
    stalls = 0
    it = 0
    for it in range(1, config.max_iterations + 1):
        if np.max(np.abs(g)) < config.gradient_tolerance:
            return _Run(x, -f, -g, it - 1, True)
        with np.errstate(over="ignore", invalid="ignore"):
            direction = -h_inv @ g
            slope = direction @ g
        if not slope < 0:
            h_inv = np.eye(k)
            direction = -g
            slope = -(g @ g)
        big = np.max(np.abs(direction))
        if big > _MAX_STEP:
            direction *= _MAX_STEP / big
            slope *= _MAX_STEP / big
        step = 1.0
        g_max = np.max(np.abs(g))
        # below this the Armijo decrease is lost in the round-off of f
        noise = 64.0 * np.finfo(float).eps * max(1.0, abs(f))
        accepted = False
        while step >= 1e-16:
            x_new = x + step * direction
            f_new, g_new = _objective(ws, x_new)
            if g_new is not None:
                if f_new <= f + _ARMIJO_C1 * step * slope:
                    accepted = True
                elif -step * slope < noise and f_new <= f + noise and np.max(np.abs(g_new)) < g_max:
                    accepted = True
            if accepted:
                break
            step *= 0.5
        if not accepted:
            if not np.allclose(h_inv, np.eye(k)):
                h_inv = np.eye(k)
                continue
            break
        s = x_new - x
        y = g_new - g
        rel_change = (f - f_new) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            if not scaled:
                h_inv = np.eye(k) * (sy / (y @ y))
                scaled = True
            rho = 1.0 / sy
            hy = h_inv @ y
            h_inv = h_inv + ((sy + y @ hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(hy, s) + np.outer(s, hy))
        stalls = stalls + 1 if rel_change < config.step_tolerance else 0
        if stalls >= _STALL_LIMIT:
            break
    conv = bool(np.max(np.abs(g)) < config.gradient_tolerance)
    return _Run(x, -f, -g, it, conv)


def _start_points(ws: LikelihoodWorkspace, config: OptimizerConfig) -> list[np.ndarray]:
    spec, data = ws.spec, ws.data
    base = ws.fixed.copy()
    mask = ws.mask
    # Weibull centre for the shape intercepts; the exponential-rate MLE for one scale intercept
    if mask[2, 0]:
        base[2, 0] = 0.0
    if mask[3, 0]:
        base[3, 0] = math.log(2.0)
    rate = max(data.n_events, 1) / float(np.sum(data.times))
    for i in (0, 1):
        if mask[i, 0]:
            base[i, 0] = math.log(rate)
            break
    first = base[mask]
    starts = [first]
    for k in range(1, config.n_starts):
        rng = np.random.default_rng(config.seed ^ k)
        starts.append(first + rng.normal(0.0, config.start_sd, size=first.size))
    return starts


def fit(data: SurvivalDataset, spec: ModelSpec, config: OptimizerConfig = OptimizerConfig()) -> FitResult:
    ws = LikelihoodWorkspace(spec, data)
    k = ws.n_free
    if k == 0:
        return _finish(ws, np.empty(0), _evaluate_only(ws), spec, data, ())
    runs = [bfgs_maximize(ws, s, config) for s in _start_points(ws, config)]
    finite = [r for r in runs if math.isfinite(r.loglik)]
    if not finite:
        raise NoFiniteStartError(f"no start produced a finite log-likelihood for {spec.label}")
    best = max(finite, key=lambda r: r.loglik)
    return _finish(ws, best.theta, best, spec, data, tuple(r.loglik for r in runs))


def _evaluate_only(ws: LikelihoodWorkspace) -> _Run:
    value, _ = ws.evaluate(np.empty(0))
    if not math.isfinite(value):
        raise NoFiniteStartError("log-likelihood is not finite at the fixed coefficients")
    return _Run(np.empty(0), value, np.empty(0), 0, True)


def _finish(ws, theta, run: _Run, spec, data, start_logliks) -> FitResult:
    k = theta.size
    flags = []
    warning = None
    covariance = None
    info = None
    if k:
        info = information_from_workspace(ws, theta)
        if np.all(np.isfinite(info)) and is_positive_definite(info):
            covariance = np.linalg.inv(info)
            covariance = (covariance + covariance.T) / 2.0
        else:
            warning = "observed information is not positive definite; covariance unavailable"
            flags.append("information-not-pd")
    coefs = RegressionCoefficients.from_matrix(ws.coef_matrix(theta))
    if spec.free_mask()[3, 0] and coefs.nu[0] > GOMPERTZ_BOUNDARY_NU:
        flags.append("gompertz-boundary")
    if not run.converged:
        flags.append("not-converged")
    n = data.n
    loglik = run.loglik
    return FitResult(
        coefs=coefs,
        loglik=loglik,
        covariance=covariance,
        converged=run.converged,
        n_iter=run.n_iter,
        condition_warning=warning,
        aic=-2.0 * loglik + 2.0 * k,
        bic=-2.0 * loglik + math.log(n) * k,
        spec=spec,
        n_obs=n,
        data_digest=data.digest(),
        gradient_norm=float(np.max(np.abs(run.grad))) if k else 0.0,
        information=info,
        flags=tuple(flags),
        start_logliks=start_logliks,
    )


def profile_refit(
    data: SurvivalDataset,
    spec: ModelSpec,
    config: OptimizerConfig = OptimizerConfig(),
    fixed: Mapping = None,
) -> FitResult:
    """Fit ``spec`` with the extra entries in ``fixed`` (e.g. ``{"beta0": 0.5}``) frozen."""
    return fit(data, spec.with_fixed(fixed or {}), config)


def scale_invariant(coefs: RegressionCoefficients, x=()) -> float:
    """lam * phi**gamma for covariate row ``x``; the Weibull-identifiable scale combination."""
    x1 = np.concatenate([[1.0], np.asarray(x, dtype=float)])
    e_tau, e_beta, e_alpha, _ = coefs.as_matrix() @ x1
    return math.exp(e_beta + math.exp(e_alpha) * e_tau)


__all__ = ["BLOCKS", "FitResult", "OptimizerConfig", "bfgs_maximize", "fit", "profile_refit", "scale_invariant"]
