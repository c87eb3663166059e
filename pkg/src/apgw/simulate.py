"""Random variates, censoring calibration and the replication engine for simulation studies.

Random streams use numpy's Philox4x64 counter-based generator keyed by a
``SeedSequence``; replicate ``r`` of a study with seed ``s`` always draws from
the stream ``(s, r)`` whatever the execution order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import core
from .core import ApgwParams
from .errors import ApgwError, UnattainableCensoringError
from .model import BLOCKS, ModelSpec, RegressionCoefficients, SurvivalDataset, linear_predictors
from .optimizer import FitResult, OptimizerConfig, fit

RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10) keyed by SeedSequence"
CALIBRATION_DRAWS = 100_000
_CALIBRATION_KEY = 0xCA1
# kappa values whose log(kappa + 1) are the nu grid of the simulation studies
STUDY_KAPPAS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, math.inf)
STUDY_NU_GRID = tuple(math.log1p(k) if math.isfinite(k) else math.inf for k in STUDY_KAPPAS)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass(frozen=True)
class CovariateLaw:
    """``none``, ``bernoulli`` (one 0/1 column with P(1) = prob) or ``categorical`` (levels arms, indicator coded)."""

    kind: str = "none"
    prob: float = 0.5
    levels: int = 2

    def __post_init__(self):
        if self.kind not in ("none", "bernoulli", "categorical"):
            raise ValueError(f"unknown covariate law {self.kind!r}")
        if self.kind == "bernoulli" and not 0 < self.prob < 1:
            raise ValueError("bernoulli probability must lie in (0, 1)")
        if self.kind == "categorical" and self.levels < 2:
            raise ValueError("categorical law needs at least 2 levels")

    @classmethod
    def parse(cls, text: str) -> "CovariateLaw":
        """``none``, ``bernoulli:0.5`` or ``categorical:5``."""
        kind, _, arg = text.strip().lower().partition(":")
        if kind == "bernoulli":
            return cls("bernoulli", prob=float(arg or 0.5))
        if kind == "categorical":
            return cls("categorical", levels=int(arg or 2))
        if kind == "none" and not arg:
            return cls()
        raise ValueError(f"cannot parse covariate law {text!r}")

    @property
    def names(self) -> tuple:
        if self.kind == "bernoulli":
            return ("x1",)
        if self.kind == "categorical":
            return tuple(f"arm{j}" for j in range(1, self.levels))
        return ()

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "bernoulli":
            return (rng.random(n) < self.prob).astype(float)[:, None]
        if self.kind == "categorical":
            arm = rng.integers(0, self.levels, size=n)
            return (arm[:, None] == np.arange(1, self.levels)[None, :]).astype(float)
        return np.zeros((n, 0))


# ---------------------------------------------------------------------------
# variates


def sample_lifetime(p: ApgwParams, rng: np.random.Generator, size=None):
    """Inverse-transform draw; cured subjects (kappa < 0) get ``inf``."""
    v = rng.random(size)
    out = _lifetimes_from_uniform(v, p.phi, p.lam, p.gamma, p.kappa)
    return float(out) if size is None else out


def _lifetimes_from_uniform(v, phi, lam, gamma, kappa, gompertz=False):
    """Lifetime with survivor probability ``1 - v`` (``v`` uniform on [0, 1))."""
    target = -np.log1p(-np.asarray(v, dtype=float)) / lam  # baseline c.h.f. to reach
    if gompertz:
        x = np.log1p(target)
    else:
        x = core.baseline_chf_inverse(target, kappa)
    with np.errstate(divide="ignore", over="ignore"):
        return x ** (1.0 / gamma) / phi


def sample_lifetimes(coefs: RegressionCoefficients, covariates, rng: np.random.Generator) -> np.ndarray:
    """One lifetime per covariate row; an infinite nu intercept selects the Gompertz limit."""
    covariates = np.asarray(covariates, dtype=float)
    n = covariates.shape[0]
    design = np.column_stack([np.ones(n), covariates])
    gompertz = math.isinf(coefs.nu[0])
    if gompertz:
        if coefs.nu[0] < 0 or np.any(coefs.nu[1:] != 0):
            raise ApgwError("the Gompertz limit needs nu0 = +inf and no nu slopes")
        coefs = RegressionCoefficients(coefs.tau, coefs.beta, coefs.alpha, np.zeros_like(coefs.nu))
    eta = linear_predictors(coefs, design)
    v = rng.random(n)
    return _lifetimes_from_uniform(v, np.exp(eta[0]), np.exp(eta[1]), np.exp(eta[2]), np.expm1(eta[3]), gompertz)


def baseline_survivor(coefs: RegressionCoefficients, t) -> np.ndarray:
    """Survivor function at covariates all zero; handles the Gompertz limit."""
    t = np.asarray(t, dtype=float)
    phi, lam, gamma = math.exp(coefs.tau[0]), math.exp(coefs.beta[0]), math.exp(coefs.alpha[0])
    if math.isinf(coefs.nu[0]):
        return np.exp(-lam * np.expm1((phi * t) ** gamma))
    return np.asarray(core.survivor(t, ApgwParams(phi, lam, gamma, math.expm1(coefs.nu[0]))))


def baseline_quantile(coefs: RegressionCoefficients, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    phi, lam, gamma = math.exp(coefs.tau[0]), math.exp(coefs.beta[0]), math.exp(coefs.alpha[0])
    if math.isinf(coefs.nu[0]):
        return _lifetimes_from_uniform(u, phi, lam, gamma, 0.0, gompertz=True)
    return np.asarray(core.quantile(u, ApgwParams(phi, lam, gamma, math.expm1(coefs.nu[0]))))


# ---------------------------------------------------------------------------
# censoring


def _expected_censoring(lifetimes: np.ndarray, rate: float) -> float:
    """P(C < T) for C ~ Exp(rate), averaged over the lifetime sample."""
    cured = np.isinf(lifetimes)
    if rate <= 0:
        return float(np.mean(cured))
    with np.errstate(invalid="ignore"):
        p = -np.expm1(-rate * lifetimes)
    return float(np.mean(np.where(cured, 1.0, p)))


def calibrate_censoring_rate(
    coefs: RegressionCoefficients,
    law: "CovariateLaw",
    target: float,
    rng: np.random.Generator,
    draws: int = CALIBRATION_DRAWS,
    tol: float = 1e-5,
) -> float:
    """Exponential censoring rate whose expected censored fraction equals ``target``."""
    if not 0 <= target < 1:
        raise UnattainableCensoringError(f"censoring target must lie in [0, 1), got {target!r}")
    if target == 0:
        return 0.0
    lifetimes = sample_lifetimes(coefs, law.draw(draws, rng), rng)
    floor = _expected_censoring(lifetimes, 0.0)
    if floor > target:
        raise UnattainableCensoringError(
            f"cure mass {floor:.3f} alone exceeds the censoring target {target:.3f}"
        )
    lo, hi = 0.0, 1.0 / float(np.median(lifetimes[np.isfinite(lifetimes)]))
    while _expected_censoring(lifetimes, hi) < target:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p = _expected_censoring(lifetimes, mid)
        if abs(p - target) < tol:
            return mid
        if p < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simulate_dataset(
    coefs: RegressionCoefficients,
    n: int,
    law: CovariateLaw,
    censoring_rate: float,
    rng: np.random.Generator,
) -> SurvivalDataset:
    """Draw covariates, lifetimes and exponential censoring; cured lifetimes end up censored."""
    x = law.draw(n, rng)
    lifetimes = sample_lifetimes(coefs, x, rng)
    if censoring_rate > 0:
        censor = rng.exponential(1.0 / censoring_rate, size=n)
    else:
        if np.any(np.isinf(lifetimes)):
            raise UnattainableCensoringError("cured subjects need a positive censoring rate")
        censor = np.full(n, np.inf)
    observed = lifetimes <= censor
    times = np.where(observed, lifetimes, censor)
    return SurvivalDataset(times, observed.astype(int), x, law.names)


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class ScenarioConfig:
    n: int
    true_coefs: RegressionCoefficients
    nu_grid: tuple = (0.0,)
    target_censoring: float = 0.3
    n_replicates: int = 100
    fit_specs: tuple = ()  # (name, ModelSpec) pairs
    seed: int = 0
    covariate_law: CovariateLaw = CovariateLaw()
    optimizer: OptimizerConfig = OptimizerConfig(n_starts=1)
    probe_u: tuple = (0.1, 0.5, 0.9)
    name: str = "scenario"

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("scenario needs n >= 10")
        if self.n_replicates < 1:
            raise ValueError("scenario needs at least one replicate")
        if not 0 <= self.target_censoring < 1:
            raise ValueError("censoring target must lie in [0, 1)")
        if self.true_coefs.width != len(self.covariate_law.names) + 1:
            raise ValueError("true coefficients do not match the covariate law")
        for name, spec in self.fit_specs:
            if spec.p != len(self.covariate_law.names):
                raise ValueError(f"fit spec {name} does not match the covariate law")

    def coefs_at(self, nu: float) -> RegressionCoefficients:
        m = self.true_coefs.as_matrix()
        m[3, 0] = nu
        return RegressionCoefficients.from_matrix(m)


def calibrate_censoring(scenario: ScenarioConfig, nu: Optional[float] = None, nu_index: int = 0) -> float:
    coefs = scenario.coefs_at(scenario.nu_grid[nu_index] if nu is None else nu)
    rng = make_rng(scenario.seed, _CALIBRATION_KEY, nu_index)
    return calibrate_censoring_rate(coefs, scenario.covariate_law, scenario.target_censoring, rng)


@dataclass
class ReplicateRecord:
    nu: float
    replicate: int
    model: str
    coefs: np.ndarray  # (4, p+1)
    free: np.ndarray  # (4, p+1) bool
    se: np.ndarray  # (4, p+1), nan where fixed or unavailable
    converged: bool
    loglik: float
    aic: float
    censored_fraction: float
    probes: np.ndarray  # estimated S0 at the true baseline quantiles


@dataclass
class ReplicationSummary:
    scenario: ScenarioConfig
    records: list
    censoring_rates: dict = field(default_factory=dict)

    def _select(self, nu, model, converged_only=True):
        return [
            r for r in self.records
            if r.model == model and _same_nu(r.nu, nu) and (r.converged or not converged_only)
        ]

    def estimates(self, nu: float, model: str, converged_only: bool = True) -> np.ndarray:
        """(replicates, 4, p+1) array of coefficient estimates."""
        recs = self._select(nu, model, converged_only)
        width = self.scenario.true_coefs.width
        if not recs:
            return np.empty((0, 4, width))
        return np.stack([r.coefs for r in recs])

    def coefficient(self, nu: float, model: str, key: str) -> np.ndarray:
        block, index = key[:-1], int(key[-1])
        return self.estimates(nu, model)[:, BLOCKS.index(block), index]

    def median(self, nu, model, key) -> float:
        return float(np.median(self.coefficient(nu, model, key)))

    def sd(self, nu, model, key) -> float:
        return float(np.std(self.coefficient(nu, model, key), ddof=1))

    def mean_se(self, nu, model, key) -> float:
        block, index = key[:-1], int(key[-1])
        se = np.array([r.se[BLOCKS.index(block), index] for r in self._select(nu, model)])
        return float(np.nanmean(se)) if np.any(np.isfinite(se)) else math.nan

    def convergence_rate(self, nu, model) -> float:
        recs = self._select(nu, model, converged_only=False)
        return sum(r.converged for r in recs) / len(recs) if recs else math.nan

    def realized_censoring(self, nu) -> float:
        seen = {}
        for r in self.records:
            if _same_nu(r.nu, nu):
                seen[r.replicate] = r.censored_fraction
        return float(np.mean(list(seen.values())))

    def probes(self, nu, model) -> np.ndarray:
        return np.stack([r.probes for r in self._select(nu, model)])

    def rows(self) -> list[dict]:
        """Median / SD per (nu, model, coefficient), one row per estimated or fixed coefficient."""
        out = []
        width = self.scenario.true_coefs.width
        for nu in self.scenario.nu_grid:
            for name, spec in self.scenario.fit_specs:
                free = spec.free_mask()
                fixed = spec.fixed_matrix()
                est = self.estimates(nu, name)
                conv = self.convergence_rate(nu, name)
                for i, block in enumerate(BLOCKS):
                    for j in range(width):
                        key = f"{block}{j}"
                        if free[i, j]:
                            col = est[:, i, j]
                            med = float(np.median(col)) if col.size else math.nan
                            sd = float(np.std(col, ddof=1)) if col.size > 1 else math.nan
                        else:
                            med, sd = float(fixed[i, j]), math.nan
                        out.append({
                            "nu": nu,
                            "model": name,
                            "coefficient": key,
                            "estimated": bool(free[i, j]),
                            "median": med,
                            "sd": sd,
                            "convergence_rate": conv,
                            "n_converged": int(est.shape[0]),
                        })
        return out


def _same_nu(a, b) -> bool:
    return (math.isinf(a) and math.isinf(b)) or a == b


def _run_replicate(scenario: ScenarioConfig, nu: float, rate: float, rep: int) -> list:
    rng = make_rng(scenario.seed, rep)
    truth = scenario.coefs_at(nu)
    data = simulate_dataset(truth, scenario.n, scenario.covariate_law, rate, rng)
    censored = 1.0 - data.status.mean()
    q0 = baseline_quantile(truth, np.asarray(scenario.probe_u))
    out = []
    for name, spec in scenario.fit_specs:
        try:
            res = fit(data, spec, scenario.optimizer)
        except ApgwError:
            width = scenario.true_coefs.width
            nan = np.full((4, width), np.nan)
            out.append(ReplicateRecord(nu, rep, name, nan, spec.free_mask(), nan, False, math.nan, math.nan, censored,
                                       np.full(len(q0), np.nan)))
            continue
        out.append(_record(nu, rep, name, spec, res, censored, q0))
    return out


def _record(nu, rep, name, spec: ModelSpec, res: FitResult, censored, q0) -> ReplicateRecord:
    mask = spec.free_mask()
    se = np.full(mask.shape, np.nan)
    if res.covariance is not None:
        with np.errstate(invalid="ignore"):
            se[mask] = np.sqrt(np.diag(res.covariance))
    try:
        probes = baseline_survivor(res.coefs, q0)
    except ApgwError:
        probes = np.full(len(q0), np.nan)
    return ReplicateRecord(
        nu, rep, name, res.coefs.as_matrix(), mask, se, res.converged, res.loglik, res.aic, censored, probes
    )


def _task(args):
    return _run_replicate(*args)


def run_study(scenario: ScenarioConfig, n_jobs: int = 1) -> ReplicationSummary:
    """Simulate and refit every replicate of every nu value; never aborts on fit failures."""
    rates = {}
    tasks = []
    for k, nu in enumerate(scenario.nu_grid):
        rates[nu] = calibrate_censoring(scenario, nu_index=k)
        tasks.extend((scenario, nu, rates[nu], rep) for rep in range(scenario.n_replicates))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_task, tasks, chunksize=8))
    else:
        results = [_task(t) for t in tasks]
    records = [rec for chunk in results for rec in chunk]
    return ReplicationSummary(scenario, records, rates)


# ---------------------------------------------------------------------------
# built-in study designs


def table3_scenario(
    n: int = 1000,
    n_replicates: int = 1000,
    seed: int = 2018,
    nu_grid: Sequence[float] = STUDY_NU_GRID,
    models: Sequence[str] = ("i", "ii", "iii"),
    optimizer: OptimizerConfig = OptimizerConfig(n_starts=1),
) -> ScenarioConfig:
    """No covariates; tau = 0.8, beta = 0.5, alpha = -0.3 and nu varied.

    Model (i) estimates both scales, (ii) fixes beta at 0.5, (iii) fixes beta at 0.
    """
    truth = RegressionCoefficients([0.8], [0.5], [-0.3], [0.0])
    specs = {
        "i": lambda: ModelSpec(frozenset({"tau", "beta"}), (), {}, allow_two_scales=True),
        "ii": lambda: ModelSpec(frozenset({"tau"}), (), {("beta", 0): 0.5}),
        "iii": lambda: ModelSpec(frozenset({"tau"}), (), {}),
    }
    return ScenarioConfig(
        n=n,
        true_coefs=truth,
        nu_grid=tuple(nu_grid),
        target_censoring=0.3,
        n_replicates=n_replicates,
        fit_specs=tuple((m, specs[m]()) for m in models),
        seed=seed,
        optimizer=optimizer,
        name="table3",
    )


def table4_scenario(
    n: int = 1000,
    n_replicates: int = 1000,
    seed: int = 2018,
    nu_grid: Sequence[float] = STUDY_NU_GRID,
    models: Sequence[str] = ("M(tau,beta,alpha)", "M(tau,alpha)", "M(beta,alpha)"),
    optimizer: OptimizerConfig = OptimizerConfig(n_starts=1),
) -> ScenarioConfig:
    """One Bernoulli(0.5) covariate; truth M(tau, alpha) with tau = (0.8, 0.6), alpha = (0.2, -0.5)."""
    law = CovariateLaw("bernoulli", prob=0.5)
    truth = RegressionCoefficients([0.8, 0.6], [0.0, 0.0], [0.2, -0.5], [0.0, 0.0])
    specs = tuple(
        (m, ModelSpec.parse(m, law.names, allow_two_scales=True)) for m in models
    )
    return ScenarioConfig(
        n=n,
        true_coefs=truth,
        nu_grid=tuple(nu_grid),
        target_censoring=0.3,
        n_replicates=n_replicates,
        fit_specs=specs,
        seed=seed,
        covariate_law=law,
        optimizer=optimizer,
        name="table4",
    )


STUDY_SIZES = {"3": 1000, "4": 1000, "B1": 500, "B2": 100}


def study_scenario(table: str, n: Optional[int] = None, n_replicates: int = 1000, seed: int = 2018,
                   nu_grid: Sequence[float] = STUDY_NU_GRID) -> ScenarioConfig:
    """Built-in design by identifier: ``3``, ``4``, ``B1`` (n=500) or ``B2`` (n=100)."""
    if table not in STUDY_SIZES:
        raise ValueError(f"unknown table {table!r}; choose from {sorted(STUDY_SIZES)}")
    size = n or STUDY_SIZES[table]
    if table == "3":
        return table3_scenario(size, n_replicates, seed, nu_grid)
    return table4_scenario(size, n_replicates, seed, nu_grid)
