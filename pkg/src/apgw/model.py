"""Regression structure: coefficients, model lattice specs and per-subject parameters.

Each distributional parameter gets a log-linear predictor over ``x = (1, x_1, ..., x_p)``:

    log(phi) = x'tau,  log(lam) = x'beta,  log(gamma) = x'alpha,  log(kappa + 1) = x'nu
"""

from __future__ import annotations

import hashlib
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ApgwParams
from .errors import DataValidationError, LinkOverflowError, SpecError

BLOCKS = ("tau", "beta", "alpha", "nu")
SCALE_BLOCKS = ("tau", "beta")
LINK_LIMIT = 700.0

_FIX_KEY = re.compile(r"^(tau|beta|alpha|nu)(\d+)$")


class TwoScalesWarning(UserWarning):
    """Both scale blocks are estimated; the fit is close to non-identifiable."""


@dataclass(frozen=True)
class RegressionCoefficients:
    tau: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        lengths = set()
        for name in BLOCKS:
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            lengths.add(arr.size)
        if len(lengths) != 1 or 0 in lengths:
            raise SpecError(f"coefficient blocks must share a nonzero length, got {sorted(lengths)}")

    @property
    def width(self) -> int:
        """p + 1 (intercept included)."""
        return self.tau.size

    @classmethod
    def zeros(cls, p: int) -> "RegressionCoefficients":
        z = np.zeros(p + 1)
        return cls(z, z, z, z)

    @classmethod
    def from_matrix(cls, m) -> "RegressionCoefficients":
        m = np.asarray(m, dtype=float)
        if m.ndim != 2 or m.shape[0] != 4:
            raise SpecError(f"coefficient matrix must have shape (4, p+1), got {m.shape}")
        return cls(*m)

    def as_matrix(self) -> np.ndarray:
        return np.vstack([self.tau, self.beta, self.alpha, self.nu])

    def replace(self, **entries: float) -> "RegressionCoefficients":
        """Copy with entries such as ``tau0=0.8`` or ``nu0=math.log(2)`` changed."""
        m = self.as_matrix()
        for key, value in entries.items():
            block, index = parse_entry_key(key)
            m[BLOCKS.index(block), index] = value
        return RegressionCoefficients.from_matrix(m)

    def to_dict(self) -> dict:
        return {name: [float(v) for v in getattr(self, name)] for name in BLOCKS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionCoefficients":
        return cls(*(d[name] for name in BLOCKS))

    def __eq__(self, other):
        if not isinstance(other, RegressionCoefficients):
            return NotImplemented
        return np.array_equal(self.as_matrix(), other.as_matrix())

    __hash__ = None


def parse_entry_key(key: str) -> tuple[str, int]:
    """``"nu0"`` -> ``("nu", 0)``."""
    m = _FIX_KEY.match(key.strip())
    if not m:
        raise SpecError(f"bad coefficient key {key!r}; expected e.g. tau0, beta1, alpha0, nu0")
    return m.group(1), int(m.group(2))


@dataclass(frozen=True)
class ModelSpec:
    """Which regression blocks carry estimated covariate slopes, plus frozen entries.

    A scale block (tau, beta) listed in ``active_components`` is estimated in full,
    intercept included; an unlisted scale block is fixed (at 0 unless given in
    ``fixed_values``). The shape intercepts alpha0 and nu0 are always estimated
    unless frozen explicitly; listing alpha or nu adds their slopes.
    """

    active_components: frozenset
    covariate_names: tuple = ()
    fixed_values: Mapping = field(default_factory=dict)
    allow_two_scales: bool = False

    def __post_init__(self):
        active = frozenset(self.active_components)
        unknown = active - set(BLOCKS)
        if unknown:
            raise SpecError(f"unknown regression components {sorted(unknown)}")
        object.__setattr__(self, "active_components", active)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        fixed = {}
        for key, value in dict(self.fixed_values).items():
            block, index = parse_entry_key(key) if isinstance(key, str) else key
            if block not in BLOCKS or not 0 <= index <= self.p:
                raise SpecError(f"fixed entry {block}{index} out of range for p={self.p}")
            if not math.isfinite(value):
                raise SpecError(f"fixed entry {block}{index} must be finite")
            fixed[(block, int(index))] = float(value)
        object.__setattr__(self, "fixed_values", fixed)
        if SCALE_BLOCKS[0] in active and SCALE_BLOCKS[1] in active:
            if not self.allow_two_scales:
                raise SpecError(
                    "tau and beta cannot both be estimated (nearly non-identifiable); "
                    "pass allow_two_scales=True (--allow-two-scales) for diagnostic fits"
                )
            warnings.warn("estimating both tau and beta; expect unstable estimates", TwoScalesWarning, stacklevel=3)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @classmethod
    def parse(
        cls,
        text: str,
        covariate_names: Sequence[str] = (),
        fixed: Optional[Mapping] = None,
        allow_two_scales: bool = False,
    ) -> "ModelSpec":
        """Parse the ``M(beta,alpha)`` notation."""
        m = re.fullmatch(r"\s*M\s*\((.*)\)\s*", text)
        if not m:
            raise SpecError(f"model {text!r} is not of the form M(...)")
        parts = [s.strip() for s in m.group(1).split(",") if s.strip()]
        for part in parts:
            if part not in BLOCKS:
                raise SpecError(f"unknown component {part!r} in {text!r}; use tau, beta, alpha, nu")
        if len(set(parts)) != len(parts):
            raise SpecError(f"repeated component in {text!r}")
        return cls(frozenset(parts), tuple(covariate_names), dict(fixed or {}), allow_two_scales)

    @property
    def label(self) -> str:
        return "M(" + ",".join(b for b in BLOCKS if b in self.active_components) + ")"

    def with_fixed(self, fixed: Mapping) -> "ModelSpec":
        merged = dict(self.fixed_values)
        for key, value in fixed.items():
            merged[parse_entry_key(key) if isinstance(key, str) else key] = value
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TwoScalesWarning)
            return ModelSpec(self.active_components, self.covariate_names, merged, self.allow_two_scales)

    def free_mask(self) -> np.ndarray:
        """Boolean (4, p+1) mask of estimated entries."""
        mask = np.zeros((4, self.p + 1), dtype=bool)
        for i, block in enumerate(BLOCKS):
            if block in SCALE_BLOCKS:
                mask[i, :] = block in self.active_components
            else:
                mask[i, 0] = True
                mask[i, 1:] = block in self.active_components
        for block, index in self.fixed_values:
            mask[BLOCKS.index(block), index] = False
        return mask

    def fixed_matrix(self) -> np.ndarray:
        m = np.zeros((4, self.p + 1))
        for (block, index), value in self.fixed_values.items():
            m[BLOCKS.index(block), index] = value
        return m

    @property
    def n_free(self) -> int:
        return int(self.free_mask().sum())

    def free_names(self) -> list[str]:
        mask = self.free_mask()
        return [f"{BLOCKS[i]}{j}" for i, j in zip(*np.nonzero(mask))]

    def to_dict(self) -> dict:
        return {
            "model": self.label,
            "covariate_names": list(self.covariate_names),
            "fixed": {f"{b}{i}": v for (b, i), v in sorted(self.fixed_values.items())},
            "allow_two_scales": self.allow_two_scales,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TwoScalesWarning)
            return cls.parse(d["model"], d["covariate_names"], d.get("fixed"), d.get("allow_two_scales", False))


def pack(coefs: RegressionCoefficients, spec: ModelSpec) -> np.ndarray:
    """Free-parameter vector, ordered tau, beta, alpha, nu and by index within a block."""
    if coefs.width != spec.p + 1:
        raise SpecError(f"coefficients have width {coefs.width}, spec expects {spec.p + 1}")
    return coefs.as_matrix()[spec.free_mask()]


def unpack(theta, spec: ModelSpec) -> RegressionCoefficients:
    theta = np.asarray(theta, dtype=float)
    mask = spec.free_mask()
    if theta.shape != (int(mask.sum()),):
        raise SpecError(f"free vector has shape {theta.shape}, spec expects ({int(mask.sum())},)")
    m = spec.fixed_matrix()
    m[mask] = theta
    return RegressionCoefficients.from_matrix(m)


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    names: tuple = ()
    reference_levels: Mapping = field(default_factory=dict)

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        status = np.array(self.status).ravel()
        cov = np.array(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(times.size, -1) if times.size else cov.reshape(0, 0)
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(cov.shape[1]))
        if times.size == 0:
            raise DataValidationError("dataset is empty")
        if status.shape != times.shape or cov.shape[0] != times.size:
            raise DataValidationError("times, status and covariates disagree in length")
        if cov.shape[1] != len(names):
            raise DataValidationError(f"{cov.shape[1]} covariate columns but {len(names)} names")
        bad = np.flatnonzero(~(np.isfinite(times) & (times > 0)))
        if bad.size:
            raise DataValidationError(f"row {bad[0]}: time must be finite and > 0, got {times[bad[0]]!r}")
        bad = np.flatnonzero(~np.isin(status, (0, 1)))
        if bad.size:
            raise DataValidationError(f"row {bad[0]}: status must be 0 or 1, got {status[bad[0]]!r}")
        bad_rows = np.flatnonzero(~np.all(np.isfinite(cov), axis=1))
        if bad_rows.size:
            raise DataValidationError(f"row {bad_rows[0]}: covariates must be finite")
        status = status.astype(np.int8)
        for arr in (times, status, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "reference_levels", dict(self.reference_levels))

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def design(self) -> np.ndarray:
        """Design matrix with the intercept column prepended."""
        return np.column_stack([np.ones(self.n), self.covariates])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.status.astype(np.float64), self.covariates):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x1f".join(self.names).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        return (
            self.names == other.names
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.status, other.status)
            and np.array_equal(self.covariates, other.covariates)
        )

    __hash__ = None


def linear_predictors(coefs: RegressionCoefficients, design: np.ndarray) -> np.ndarray:
    """(4, n) array of x'tau, x'beta, x'alpha, x'nu; raises on link overflow."""
    eta = coefs.as_matrix() @ np.asarray(design, dtype=float).T
    check_links(eta)
    return eta


def check_links(eta: np.ndarray) -> None:
    big = np.abs(eta) > LINK_LIMIT
    if big.any():
        i, j = (int(v[0]) for v in np.nonzero(big))
        raise LinkOverflowError(BLOCKS[i], float(eta[i, j]), row=j)


def subject_params(coefs: RegressionCoefficients, x: Iterable[float]) -> ApgwParams:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != coefs.width - 1:
        raise SpecError(f"covariate row has length {x.size}, coefficients expect {coefs.width - 1}")
    eta = linear_predictors(coefs, np.concatenate([[1.0], x])[None, :])[:, 0]
    return ApgwParams(
        phi=math.exp(eta[0]),
        lam=math.exp(eta[1]),
        gamma=math.exp(eta[2]),
        kappa=math.expm1(eta[3]),
    )
