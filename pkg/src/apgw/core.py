"""Closed-form primitives of the adapted power generalised Weibull (APGW) family.

The full model has cumulative hazard ``H(t) = lam * H0((phi * t) ** gamma; kappa)``
with baseline

    H0(x; kappa) = (kappa + 1) / kappa * ((1 + x / (kappa + 1)) ** kappa - 1)

which reduces to ``log(1 + x)`` at ``kappa = 0`` (log-logistic), ``x`` at
``kappa = 1`` (Weibull) and tends to ``exp(x) - 1`` as ``kappa -> inf``
(Gompertz-type). For ``-1 < kappa < 0`` the distribution is defective and
carries a cure fraction.

All functions accept scalars or numpy arrays for the time/probability argument.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CurePlateauError, DomainError, NotCureModelError

# Below this |kappa| the removable singularity of (kappa+1)/kappa is handled by series.
KAPPA_ZERO_TOL = 1e-10
# Absolute tolerance for the equality tests (gamma == 1, kappa*gamma == 1) in shape classification.
SHAPE_TOL = 1e-12


@dataclass(frozen=True)
class ApgwParams:
    """Distributional parameters for one subject.

    ``phi`` is the horizontal (AFT) scale, ``lam`` the vertical (PH) scale,
    ``gamma`` the power shape and ``kappa`` the second shape.
    """

    phi: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        for name in ("phi", "lam", "gamma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value!r}")
        if not (math.isfinite(self.kappa) and self.kappa > -1):
            raise DomainError(f"kappa must be finite and > -1, got {self.kappa!r}")

    @property
    def psi(self) -> float:
        return self.kappa + 1.0

    @property
    def is_cure(self) -> bool:
        return self.kappa < 0


class ShapeTag(enum.Enum):
    CONSTANT = "constant"
    DECREASING = "decreasing"
    DOWN_THEN_UP = "down-then-up"
    UP_THEN_DOWN = "up-then-down"
    INCREASING = "increasing"


@dataclass(frozen=True)
class HazardShape:
    tag: ShapeTag
    turning_point: Optional[float] = None

    def __post_init__(self):
        non_monotone = self.tag in (ShapeTag.DOWN_THEN_UP, ShapeTag.UP_THEN_DOWN)
        if non_monotone != (self.turning_point is not None):
            raise ValueError("turning_point must be given exactly for non-monotone shapes")


# ---------------------------------------------------------------------------
# baseline helpers (vectorised, no validation)


def expm1_ratio(kappa, log_term):
    """``expm1(kappa * L) / kappa`` with the ``kappa -> 0`` limit ``L`` handled."""
    kappa = np.asarray(kappa, dtype=float)
    log_term = np.asarray(log_term, dtype=float)
    small = np.abs(kappa) < KAPPA_ZERO_TOL
    safe = np.where(small, 1.0, kappa)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = np.expm1(safe * log_term) / safe
    series = log_term * (1.0 + 0.5 * kappa * log_term)
    return np.where(small, series, direct)


def baseline_chf(x, kappa):
    """H0(x; kappa) for x >= 0, i.e. the APGW c.h.f. with gamma = 1."""
    x = np.asarray(x, dtype=float)
    psi = np.asarray(kappa, dtype=float) + 1.0
    return psi * expm1_ratio(kappa, np.log1p(x / psi))


def baseline_log_hazard(x, kappa):
    """log h0(x; kappa) = (kappa - 1) * log(1 + x / (kappa + 1))."""
    kappa = np.asarray(kappa, dtype=float)
    return (kappa - 1.0) * np.log1p(np.asarray(x, dtype=float) / (kappa + 1.0))


def baseline_chf_inverse(y, kappa):
    """Inverse of ``baseline_chf`` in its first argument.

    For ``kappa < 0`` the result is ``inf`` at and beyond the supremum
    ``(kappa + 1) / -kappa``.
    """
    y = np.asarray(y, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    psi = kappa + 1.0
    small = np.abs(kappa) < KAPPA_ZERO_TOL
    safe = np.where(small, 1.0, kappa)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        arg = safe * y / psi
        inner = np.where(arg <= -1.0, np.inf, np.log1p(np.maximum(arg, -1.0)) / safe)
        direct = psi * np.expm1(inner)
    series = np.expm1(y * (1.0 - 0.5 * kappa * y))
    out = np.where(small, series, direct)
    return np.where(np.isnan(out) & (kappa < 0), np.inf, out)


def _scaled_time(t, p: ApgwParams):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("time must be > 0")
    with np.errstate(over="ignore"):
        return (p.phi * t) ** p.gamma


def _ret(value):
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# public API


def apgw_chf(t, gamma, kappa):
    """H_A(t; gamma, kappa), the adapted PGW c.h.f. without scale parameters."""
    t = np.asarray(t, dtype=float)
    return _ret(baseline_chf(t**gamma, kappa))


def pgw_chf(t, gamma, kappa):
    """Original (non-adapted) PGW c.h.f. ``(1 + t**gamma)**kappa - 1``."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)) or not gamma > 0 or not kappa > 0:
        raise DomainError("pgw_chf requires t > 0, gamma > 0, kappa > 0")
    return _ret(box_cox_transform(t**gamma, kappa))


def box_cox_transform(y, kappa):
    """The transformation ``w(y) = (1 + y)**kappa - 1`` (itself a c.h.f. in y)."""
    y = np.asarray(y, dtype=float)
    return _ret(np.expm1(kappa * np.log1p(y)))


def cum_hazard(t, p: ApgwParams):
    return _ret(p.lam * baseline_chf(_scaled_time(t, p), p.kappa))


def log_hazard(t, p: ApgwParams):
    t = np.asarray(t, dtype=float)
    z = _scaled_time(t, p)
    return _ret(
        math.log(p.lam * p.phi * p.gamma)
        + (p.gamma - 1.0) * np.log(p.phi * t)
        + baseline_log_hazard(z, p.kappa)
    )


def hazard(t, p: ApgwParams):
    return _ret(np.exp(log_hazard(t, p)))


def survivor(t, p: ApgwParams):
    return _ret(np.exp(-np.asarray(cum_hazard(t, p))))


def density(t, p: ApgwParams):
    return _ret(np.exp(np.asarray(log_hazard(t, p)) - np.asarray(cum_hazard(t, p))))


def log_density(t, p: ApgwParams):
    return _ret(np.asarray(log_hazard(t, p)) - np.asarray(cum_hazard(t, p)))


def chf_supremum(p: ApgwParams) -> float:
    """Limit of H(t) as t -> inf: ``lam * psi / (1 - psi)`` for cure models, else inf."""
    if p.kappa >= 0:
        return math.inf
    return p.lam * p.psi / -p.kappa


def cure_probability(p: ApgwParams) -> float:
    """Mass at infinity, ``exp(lam * (kappa + 1) / kappa)``, for -1 < kappa < 0."""
    if p.kappa >= 0:
        raise NotCureModelError(f"kappa = {p.kappa!r} >= 0 has no cure fraction")
    return math.exp(p.lam * p.psi / p.kappa)


def quantile(u, p: ApgwParams):
    """Time t with ``1 - survivor(t) = u``."""
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError("quantile requires 0 < u < 1")
    if p.is_cure:
        limit = 1.0 - cure_probability(p)
        if np.any(u >= limit):
            bad = u[u >= limit] if u.ndim else u
            raise CurePlateauError(float(np.max(bad)), limit)
    x = baseline_chf_inverse(-np.log1p(-u) / p.lam, p.kappa)
    return _ret(x ** (1.0 / p.gamma) / p.phi)


def classify_shape(p: ApgwParams) -> HazardShape:
    """Hazard shape and, for non-monotone shapes, the turning point in time units."""
    g, k = p.gamma, p.kappa

    def turning():
        tp = ((1.0 - g) * (k + 1.0) / (k * g - 1.0)) ** (1.0 / g)
        return tp / p.phi

    if k < 0:
        if g <= 1.0 + SHAPE_TOL:
            return HazardShape(ShapeTag.DECREASING)
        return HazardShape(ShapeTag.UP_THEN_DOWN, turning())

    g_one = abs(g - 1.0) <= SHAPE_TOL
    kg = k * g
    kg_one = abs(kg - 1.0) <= SHAPE_TOL
    if g_one and kg_one:
        return HazardShape(ShapeTag.CONSTANT)
    # an equality on either axis puts the turning point at 0 or infinity: monotone
    if g < 1.0 and kg > 1.0 and not (g_one or kg_one):
        return HazardShape(ShapeTag.DOWN_THEN_UP, turning())
    if g > 1.0 and kg < 1.0 and not (g_one or kg_one):
        return HazardShape(ShapeTag.UP_THEN_DOWN, turning())
    if (g < 1.0 or g_one) and (kg < 1.0 or kg_one):
        return HazardShape(ShapeTag.DECREASING)
    return HazardShape(ShapeTag.INCREASING)
