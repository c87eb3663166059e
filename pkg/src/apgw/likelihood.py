"""Censored log-likelihood, analytic score and observed information.

Per subject, with z = (phi t)**gamma, psi = kappa + 1 and L = log(1 + z/psi):

    l_i = d_i * (log lam + log gamma + log z - log t + (kappa - 1) L) - lam * H0(z; kappa)

The score is taken with respect to the four linear predictors and mapped onto
coefficients through the design matrix.
"""

from __future__ import annotations

import numpy as np

from .core import expm1_ratio
from .errors import ApgwError, NonFiniteLikelihoodError
from .model import ModelSpec, RegressionCoefficients, SurvivalDataset, check_links, pack

_SERIES_CUTOFF = 0.1
# coefficients (m - 1) / m! for m = 2..13
_G_SERIES = np.array([(m - 1) / np.prod(np.arange(1.0, m + 1)) for m in range(2, 14)])


def _xexp_minus_expm1_over_sq(x):
    """(x e^x - expm1(x)) / x**2, smooth through x = 0 where it equals 1/2."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUTOFF
    xs = np.where(small, x, 0.0)
    series = np.polyval(_G_SERIES[::-1], xs)
    xd = np.where(small, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = (xd * np.exp(xd) - np.expm1(xd)) / (xd * xd)
    return np.where(small, series, direct)


def m0(t, kappa):
    """log h0(t; kappa) = (kappa - 1) log(1 + t/(kappa + 1))."""
    kappa = np.asarray(kappa, dtype=float)
    return (kappa - 1.0) * np.log1p(np.asarray(t, dtype=float) / (kappa + 1.0))


def m0_prime(t, kappa):
    kappa = np.asarray(kappa, dtype=float)
    return (kappa - 1.0) / (kappa + 1.0 + np.asarray(t, dtype=float))


class LikelihoodWorkspace:
    """Binds a spec and a dataset; evaluates the log-likelihood and score at free vectors.

    The last evaluation is cached (``z``, per-subject parameters, value, score)
    and discarded whenever a different vector is requested.
    """

    def __init__(self, spec: ModelSpec, data: SurvivalDataset):
        if spec.p != data.p:
            raise ApgwError(f"spec has {spec.p} covariates, dataset has {data.p}")
        self.spec = spec
        self.data = data
        self.X = data.design()
        self.log_t = np.log(data.times)
        self.delta = data.status.astype(float)
        self.mask = spec.free_mask()
        self.fixed = spec.fixed_matrix()
        self._theta = None
        self.z = None
        self.params = None
        self.value = None
        self.grad = None

    @property
    def n_free(self) -> int:
        return int(self.mask.sum())

    def coef_matrix(self, theta) -> np.ndarray:
        m = self.fixed.copy()
        m[self.mask] = theta
        return m

    def evaluate(self, theta, gradient: bool = True):
        """Return ``(loglik, score)``; score is None when ``gradient`` is False.

        Raises LinkOverflowError; non-finite values are returned as-is.
        """
        theta = np.asarray(theta, dtype=float)
        if self._theta is not None and np.array_equal(theta, self._theta) and (self.grad is not None or not gradient):
            return self.value, self.grad
        eta = self.coef_matrix(theta) @ self.X.T
        check_links(eta)
        ll_i, u = self._terms(eta, gradient)
        value = float(np.sum(ll_i))
        grad = None
        if gradient:
            with np.errstate(invalid="ignore", over="ignore"):
                grad = (u @ self.X)[self.mask]
        self._theta = theta.copy()
        self.value, self.grad = value, grad
        self._ll_i = ll_i
        return value, grad

    def offending_row(self):
        bad = np.flatnonzero(~np.isfinite(self._ll_i))
        return int(bad[0]) if bad.size else None

    def _terms(self, eta, gradient):
        e_tau, e_beta, e_alpha, e_nu = eta
        d = self.delta
        gamma = np.exp(e_alpha)
        lam = np.exp(e_beta)
        psi = np.exp(e_nu)
        kappa = np.expm1(e_nu)
        s = gamma * (e_tau + self.log_t)  # log z
        with np.errstate(over="ignore", invalid="ignore"):
            z = np.exp(s)
            big_l = np.logaddexp(0.0, s - e_nu)  # log(1 + z/psi)
            h0_log = (kappa - 1.0) * big_l
            big_h0 = psi * expm1_ratio(kappa, big_l)
            lam_h0 = lam * big_h0
            ll_i = d * (e_beta + e_alpha + s - self.log_t + h0_log) - lam_h0
        self.z = z
        self.params = (np.exp(e_tau), lam, gamma, kappa)
        if not gradient:
            return ll_i, None

        with np.errstate(over="ignore", invalid="ignore"):
            r = 0.5 * (1.0 + np.tanh(0.5 * (s - e_nu)))  # z / (psi + z)
            one_plus = 1.0 + (kappa - 1.0) * r  # 1 + z m0'(z)
            lam_zh0 = np.exp(e_beta + s + h0_log)  # lam z h0(z)
            u_tau = gamma * (d * one_plus - lam_zh0)
            u_beta = d - lam_h0
            u_alpha = d * (1.0 + s * one_plus) - s * lam_zh0
            x = kappa * big_l
            e_kl = np.exp(x)
            a_term = big_l * big_l * _xexp_minus_expm1_over_sq(x) + big_l * e_kl
            u_nu = d * (psi * big_l - (kappa - 1.0) * r) - lam * psi * (a_term - e_kl * r)
        return ll_i, np.vstack([u_tau, u_beta, u_alpha, u_nu])


def log_likelihood(coefs: RegressionCoefficients, spec: ModelSpec, data: SurvivalDataset) -> float:
    ws = LikelihoodWorkspace(spec, data)
    value, _ = ws.evaluate(pack(coefs, spec), gradient=False)
    if not np.isfinite(value):
        raise NonFiniteLikelihoodError(ws.offending_row())
    return value


def score(coefs: RegressionCoefficients, spec: ModelSpec, data: SurvivalDataset) -> np.ndarray:
    ws = LikelihoodWorkspace(spec, data)
    value, grad = ws.evaluate(pack(coefs, spec))
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteLikelihoodError(ws.offending_row() if ws.offending_row() is not None else -1)
    return grad


def information_from_workspace(ws: LikelihoodWorkspace, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Negative Hessian by central differences of the analytic score, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    hess = np.empty((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        g_up = ws.evaluate(up)[1]
        g_dn = ws.evaluate(dn)[1]
        hess[:, j] = (g_up - g_dn) / (2.0 * h)
    ws.evaluate(theta)
    return -(hess + hess.T) / 2.0


def observed_information(coefs: RegressionCoefficients, spec: ModelSpec, data: SurvivalDataset) -> np.ndarray:
    ws = LikelihoodWorkspace(spec, data)
    return information_from_workspace(ws, pack(coefs, spec))


def is_positive_definite(matrix) -> bool:
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True
