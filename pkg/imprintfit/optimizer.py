"""
Coordinate-ascent maximum likelihood for one gene.

One cycle:

1. IRLS update of the linear TReC coefficients (gamma0, beta_kappa, betas)
   with step-halving.
2. Joint quasi-Newton pass over the free effects (b0, b1), then a bounded
   Brent pass over each free effect on its own.
3. Bounded Brent pass over log(bb_overdisp), then log(nb_overdisp), clamped
   to the configured range.

Cycles repeat until the absolute log-likelihood change drops below epsilon.
A converged ascent is then polished by one joint L-BFGS-B pass over all free
parameters; if that gains epsilon or more, cycling resumes. Every sub-step
only accepts moves that do not lower the log-likelihood.

A cold fit runs several ascents (moment start, coarse grid, single-effect
optima) and keeps the best one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import chi2

from .errors import DomainError, InsufficientDataError, NestingViolationError, OptimizationFailedError
from .model import (
    GeneData,
    Likelihood,
    ModelParams,
    eta_vector,
    log_mean_vector,
    loglik,
    trec_loglik,
)

logger = logging.getLogger(__name__)

EFFECTS = ("b0", "b1")

_ACCEPT = 1e-12
_PENALTY = 1e300
_NESTING_TOL = 1e-6
_BOUNDARY_TOL = 1e-3


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 1e-5
    max_iters: int = 200
    overdisp_bounds: tuple[float, float] = (1e-4, 1e4)
    min_ase_reads: int = 0
    effect_bound: float = 25.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon!r}")
        if int(self.max_iters) < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters!r}")
        lo, hi = self.overdisp_bounds
        if not 0 < lo < hi:
            raise DomainError(f"overdisp_bounds must satisfy 0 < lo < hi, got {self.overdisp_bounds!r}")
        if self.min_ase_reads < 0:
            raise DomainError(f"min_ase_reads must be >= 0, got {self.min_ase_reads!r}")
        if not self.effect_bound > 0:
            raise DomainError(f"effect_bound must be > 0, got {self.effect_bound!r}")

    @classmethod
    def from_config(cls, config, **overrides) -> "FitConfig":
        values = dict(
            epsilon=config.EPSILON,
            max_iters=config.MAX_ITERS,
            overdisp_bounds=(config.OVERDISP_MIN, config.OVERDISP_MAX),
            min_ase_reads=config.MIN_ASE,
            effect_bound=config.EFFECT_BOUND,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class ModelSpec:
    free_b0: bool = True
    free_b1: bool = True
    likelihood: Likelihood = Likelihood.JOINT

    @property
    def free_effects(self) -> tuple[str, ...]:
        return tuple(name for name, free in zip(EFFECTS, (self.free_b0, self.free_b1)) if free)

    def without(self, effect: str) -> "ModelSpec":
        if effect not in EFFECTS:
            raise DomainError(f"unknown effect {effect!r}")
        return replace(self, **{f"free_{effect}": False})

    @property
    def label(self) -> str:
        return f"{self.likelihood.value}[{','.join(self.free_effects) or '-'}]"


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    loglik: float
    iterations: int
    converged: bool
    trace: tuple[float, ...]
    boundary: bool
    spec: ModelSpec
    n_informative: int
    initial_loglik: float


class LRT(NamedTuple):
    statistic: float
    pvalue: float


@dataclass(frozen=True)
class EffectTests:
    full: FitResult
    null_genetic: FitResult
    null_poo: FitResult
    genetic: LRT
    poo: LRT

    @property
    def p_genetic(self) -> float:
        return self.genetic.pvalue

    @property
    def p_poo(self) -> float:
        return self.poo.pvalue


def _linear_coef(params: ModelParams, names: tuple[str, ...]) -> np.ndarray:
    coef = [params.gamma0]
    if "log_kappa" in names:
        coef.append(params.beta_kappa)
    coef.extend(params.betas)
    return np.asarray(coef, dtype=float)


def _with_linear(params: ModelParams, names: tuple[str, ...], coef: np.ndarray) -> ModelParams:
    coef = [float(c) for c in coef]
    gamma0 = coef.pop(0)
    beta_kappa = coef.pop(0) if "log_kappa" in names else params.beta_kappa
    return params.replace(gamma0=gamma0, beta_kappa=beta_kappa, betas=tuple(coef))


def irls_step(data: GeneData, params: ModelParams, max_halvings: int = 30) -> ModelParams:
    """
    One IRLS update of the linear TReC coefficients.

    beta <- beta + (X'WX)^-1 X'W k with diag(W) = mu / (1 + nb_overdisp * mu)
    and k = (y - mu) / mu; eta and both over-dispersions stay fixed. The step
    is halved until the NB log-likelihood does not decrease (the ASE term does
    not depend on these coefficients). Returns params with updated
    gamma0 / beta_kappa / betas.
    """
    X, names = data.design
    y = data.arrays.total
    coef = _linear_coef(params, names)
    log_mu = log_mean_vector(data, params)
    with np.errstate(over="ignore", invalid="ignore"):
        mu = np.exp(log_mu)
        denom = 1.0 + params.nb_overdisp * mu
        w = mu / denom
        wk = (y - mu) / denom
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(wk))):
        logger.debug("irls: non-finite weights for gene %s, keeping coefficients", data.gene_id)
        return params

    xtwx = (X.T * w) @ X
    xtwk = X.T @ wk
    try:
        step = np.linalg.solve(xtwx, xtwk)
    except np.linalg.LinAlgError:
        step = np.linalg.lstsq(xtwx, xtwk, rcond=None)[0]
    if not np.all(np.isfinite(step)):
        return params

    base = trec_loglik(data, params)
    t = 1.0
    for _ in range(max_halvings + 1):
        candidate = _with_linear(params, names, coef + t * step)
        value = trec_loglik(data, candidate)
        if math.isfinite(value) and value >= base:
            return candidate
        t *= 0.5
    return params


def _clip(value: float, lo: float, hi: float) -> float:
    return float(min(max(value, lo), hi))


def optimize_effects(
    data: GeneData,
    params: ModelParams,
    spec: ModelSpec,
    config: FitConfig | None = None,
) -> ModelParams:
    """Quasi-Newton over the free effects jointly, then Brent over each one."""
    config = config or FitConfig()
    names = spec.free_effects
    if not names:
        raise DomainError(f"model {spec.label} has no free effect")
    bound = config.effect_bound

    def value(v) -> float:
        candidate = params.replace(**{n: float(t) for n, t in zip(names, v)})
        return loglik(data, candidate, spec.likelihood, config.min_ase_reads)

    def objective(v) -> float:
        ll = value(v)
        return -ll if math.isfinite(ll) else _PENALTY

    x = np.array([getattr(params, n) for n in names], dtype=float)
    best = value(x)
    if not math.isfinite(best):
        raise OptimizationFailedError(
            f"gene {data.gene_id!r}: non-finite log-likelihood at entry of {spec.label}"
        )

    res = minimize(objective, np.clip(x, -bound, bound), method="L-BFGS-B", bounds=[(-bound, bound)] * len(names))
    candidate = np.clip(res.x, -bound, bound)
    ll = value(candidate)
    if math.isfinite(ll) and ll > best + _ACCEPT:
        x, best = candidate, ll

    for i in range(len(names)):

        def along(t, i=i):
            v = x.copy()
            v[i] = t
            return objective(v)

        res = minimize_scalar(along, bounds=(-bound, bound), method="bounded", options={"xatol": 1e-8, "maxiter": 500})
        candidate = x.copy()
        candidate[i] = res.x
        ll = value(candidate)
        if math.isfinite(ll) and ll > best + _ACCEPT:
            x, best = candidate, ll

    return params.replace(**{n: float(t) for n, t in zip(names, x)})


def optimize_overdispersion(
    data: GeneData,
    params: ModelParams,
    likelihood: Likelihood = Likelihood.JOINT,
    config: FitConfig | None = None,
) -> ModelParams:
    """
    Brent over log(bb_overdisp) then log(nb_overdisp), clamped to the bounds.

    Both clamp endpoints are evaluated as candidates as well, so an
    unidentifiable or boundary-seeking over-dispersion lands exactly on a clamp.
    """
    config = config or FitConfig()
    lo, hi = config.overdisp_bounds
    names = []
    if likelihood.uses_ase and data.n_informative(config.min_ase_reads) > 0:
        names.append("bb_overdisp")
    if likelihood.uses_trec:
        names.append("nb_overdisp")

    for name in names:

        def value(phi, name=name, base=params) -> float:
            return loglik(data, base.replace(**{name: phi}), likelihood, config.min_ase_reads)

        def objective(t, value=value) -> float:
            ll = value(math.exp(t))
            return -ll if math.isfinite(ll) else _PENALTY

        current = _clip(getattr(params, name), lo, hi)
        best_phi, best = current, value(current)
        res = minimize_scalar(objective, bounds=(math.log(lo), math.log(hi)), method="bounded", options={"xatol": 1e-6})
        for phi in (_clip(math.exp(res.x), lo, hi), lo, hi):
            ll = value(phi)
            if math.isfinite(ll) and (not math.isfinite(best) or ll > best + _ACCEPT):
                best_phi, best = phi, ll
        params = params.replace(**{name: best_phi})
    return params


def effects_on_boundary(params: ModelParams, spec: ModelSpec, bound: float = 25.0) -> bool:
    return any(abs(getattr(params, n)) >= bound - _BOUNDARY_TOL for n in spec.free_effects)


def _pin_fixed_effects(params: ModelParams, spec: ModelSpec) -> ModelParams:
    changes = {n: 0.0 for n in EFFECTS if n not in spec.free_effects}
    return params.replace(**changes) if changes else params


def _snap_overdisp(t: float, lo: float, hi: float) -> float:
    if t <= math.log(lo):
        return lo
    if t >= math.log(hi):
        return hi
    return _clip(math.exp(t), lo, hi)


def polish(data: GeneData, params: ModelParams, spec: ModelSpec, config: FitConfig | None = None) -> ModelParams:
    """
    Joint L-BFGS-B over every free parameter at once.

    The vector is (free effects, linear TReC coefficients, log over-dispersions).
    Effects stay inside the effect box, over-dispersions inside the clamp range;
    a log over-dispersion on its bound maps to the clamp value exactly. Returns
    `params` unchanged unless the log-likelihood strictly improves.
    """
    config = config or FitConfig()
    likelihood = spec.likelihood
    lo, hi = config.overdisp_bounds
    bound = config.effect_bound
    effects = spec.free_effects
    names = data.design[1] if likelihood.uses_trec else ()
    linear = _linear_coef(params, names) if likelihood.uses_trec else np.empty(0)
    overdisp = []
    if likelihood.uses_ase and data.n_informative(config.min_ase_reads) > 0:
        overdisp.append("bb_overdisp")
    if likelihood.uses_trec:
        overdisp.append("nb_overdisp")
    n_eff, n_lin = len(effects), linear.size
    if n_eff + n_lin + len(overdisp) == 0:
        return params

    def unpack(v) -> ModelParams:
        candidate = params.replace(**{n: _clip(float(t), -bound, bound) for n, t in zip(effects, v[:n_eff])})
        if n_lin:
            candidate = _with_linear(candidate, names, v[n_eff : n_eff + n_lin])
        return candidate.replace(**{n: _snap_overdisp(float(t), lo, hi) for n, t in zip(overdisp, v[n_eff + n_lin :])})

    def value(v) -> float:
        return loglik(data, unpack(v), likelihood, config.min_ase_reads)

    def objective(v) -> float:
        ll = value(v)
        return -ll if math.isfinite(ll) else _PENALTY

    x0 = np.concatenate(
        [
            np.clip([getattr(params, n) for n in effects], -bound, bound),
            linear,
            [math.log(_clip(getattr(params, n), lo, hi)) for n in overdisp],
        ]
    ).astype(float)
    bounds = [(-bound, bound)] * n_eff + [(None, None)] * n_lin + [(math.log(lo), math.log(hi))] * len(overdisp)
    base = loglik(data, params, likelihood, config.min_ase_reads)
    res = minimize(objective, x0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 500})
    ll = value(res.x)
    if math.isfinite(ll) and ll > base + _ACCEPT:
        return unpack(res.x)
    return params


def _moment_params(
    data: GeneData,
    config: FitConfig,
    b0: float = 0.0,
    b1: float = 0.0,
    bb_overdisp: float = 0.1,
) -> ModelParams:
    lo, hi = config.overdisp_bounds
    arr = data.arrays
    mean_t = float(arr.total.mean())
    eta = eta_vector(arr, b0, b1)
    gamma0 = math.log(max(mean_t, 1e-3)) - float(eta.mean())

    if data.n_samples > 1 and mean_t > 0:
        var_t = float(arr.total.var(ddof=1))
        nb = _clip((var_t - mean_t) / mean_t**2, lo, hi)
    else:
        nb = lo
    return ModelParams(
        b0=b0,
        b1=b1,
        gamma0=gamma0,
        beta_kappa=0.0,
        betas=(0.0,) * data.n_covariates,
        bb_overdisp=_clip(bb_overdisp, lo, hi),
        nb_overdisp=nb,
    )


def initial_params(data: GeneData, spec: ModelSpec, config: FitConfig) -> ModelParams:
    """
    Starting values.

    gamma0 = log(mean T) - mean eta, beta_kappa = betas = 0, b1 = 0,
    nb_overdisp by the method of moments, bb_overdisp = 0.1. For the joint
    likelihood b0 comes from a TReC-only pre-fit with only b0 free.
    """
    b0 = 0.0
    if spec.likelihood is Likelihood.JOINT and spec.free_b0:
        prefit_spec = ModelSpec(free_b0=True, free_b1=False, likelihood=Likelihood.TREC_ONLY)
        b0 = _ascend(data, prefit_spec, config, _moment_params(data, config)).params.b0
    return _moment_params(data, config, b0=b0)


_SCREEN_EFFECTS = (-2.0, 0.0, 2.0)
_SCREEN_BB = (0.01, 0.3, 3.0)
_SCREEN_KEEP = 2


def _screened_starts(data: GeneData, spec: ModelSpec, config: FitConfig) -> list[ModelParams]:
    """Best few points of a coarse effect x bb_overdisp grid, scored by log-likelihood."""
    likelihood = spec.likelihood
    grids = [_SCREEN_EFFECTS if n in spec.free_effects else (0.0,) for n in EFFECTS]
    bbs = _SCREEN_BB if likelihood.uses_ase else (0.1,)
    scored = []
    for b0 in grids[0]:
        for b1 in grids[1]:
            for bb in bbs:
                start = _moment_params(data, config, b0=b0, b1=b1, bb_overdisp=bb)
                if likelihood.uses_trec:
                    start = irls_step(data, start)
                value = loglik(data, start, likelihood, config.min_ase_reads)
                if math.isfinite(value):
                    scored.append((value, start))
    scored.sort(key=lambda item: item[0], reverse=True)
    return [start for _, start in scored[:_SCREEN_KEEP]]


_POLISH_ROUNDS = 5


def _ascend(data: GeneData, spec: ModelSpec, config: FitConfig, start: ModelParams) -> FitResult:
    likelihood = spec.likelihood
    params = _pin_fixed_effects(start, spec)
    current = loglik(data, params, likelihood, config.min_ase_reads)
    if not math.isfinite(current):
        raise OptimizationFailedError(f"gene {data.gene_id!r}: non-finite log-likelihood at start of {spec.label}")
    initial = current

    trace: list[float] = []
    converged = False
    rounds = 0
    while len(trace) < config.max_iters:
        while len(trace) < config.max_iters:
            if likelihood.uses_trec:
                params = irls_step(data, params)
            if spec.free_effects:
                params = optimize_effects(data, params, spec, config)
            params = optimize_overdispersion(data, params, likelihood, config)

            value = loglik(data, params, likelihood, config.min_ase_reads)
            trace.append(value)
            logger.debug("%s %s iter=%d loglik=%.8f", data.gene_id, spec.label, len(trace), value)
            change = abs(value - current)
            current = value
            if change < config.epsilon:
                converged = True
                break

        if not converged or rounds >= _POLISH_ROUNDS or len(trace) >= config.max_iters:
            break
        rounds += 1
        polished = polish(data, params, spec, config)
        if polished is params:
            break
        value = loglik(data, polished, likelihood, config.min_ase_reads)
        trace.append(value)
        logger.debug("%s %s polish loglik=%.8f", data.gene_id, spec.label, value)
        params, change, current = polished, value - current, value
        if change < config.epsilon:
            break
        converged = False

    return FitResult(
        params=params,
        loglik=current,
        iterations=len(trace),
        converged=converged,
        trace=tuple(trace),
        boundary=effects_on_boundary(params, spec, config.effect_bound),
        spec=spec,
        n_informative=data.n_informative(config.min_ase_reads),
        initial_loglik=initial,
    )


def _check_fittable(data: GeneData, spec: ModelSpec, config: FitConfig) -> None:
    if spec.likelihood is Likelihood.ASE_ONLY and data.n_informative(config.min_ase_reads) == 0:
        raise InsufficientDataError(
            f"gene {data.gene_id!r}: no sample with at least max(1, {config.min_ase_reads}) ASE reads"
        )
    if spec.likelihood.uses_trec:
        data.design  # raises SingularDesignError early


def _fit_cold(
    data: GeneData,
    spec: ModelSpec,
    config: FitConfig,
    extra_starts: tuple[ModelParams, ...] = (),
) -> FitResult:
    best = _ascend(data, spec, config, initial_params(data, spec, config))
    for start in (*_screened_starts(data, spec, config), *extra_starts):
        try:
            result = _ascend(data, spec, config, start)
        except OptimizationFailedError:
            continue
        if result.loglik > best.loglik + _ACCEPT:
            best = result
    return best


def _report(data: GeneData, result: FitResult, config: FitConfig) -> FitResult:
    if not result.converged:
        logger.warning(
            "gene %s: %s did not converge after %d iterations", data.gene_id, result.spec.label, config.max_iters
        )
    return result


def fit(
    data: GeneData,
    spec: ModelSpec | None = None,
    config: FitConfig | None = None,
    start: ModelParams | None = None,
) -> FitResult:
    """
    Fit one model to one gene.

    Effects not free in `spec` are held at 0. Without `start` the fit ascends
    from the moment start, from the best points of a coarse grid and, when
    both effects are free, from both single-effect optima, keeping the best
    ascent; a full model therefore never ends below either single-effect fit.
    `start` warm-starts a single ascent instead. Non-convergence within
    max_iters is reported through `converged=False`, not raised.
    """
    spec = spec or ModelSpec()
    config = config or FitConfig()
    _check_fittable(data, spec, config)

    if start is not None:
        return _report(data, _ascend(data, spec, config, start), config)
    extra = ()
    if len(spec.free_effects) == len(EFFECTS):
        extra = tuple(fit(data, spec.without(e), config).params for e in EFFECTS)
    return _report(data, _fit_cold(data, spec, config, extra), config)


def _loglik_of(fit_or_value) -> float:
    if isinstance(fit_or_value, FitResult):
        return fit_or_value.loglik
    return float(fit_or_value)


def lrt(full, null, df: int = 1) -> LRT:
    """
    Likelihood ratio test of a nested null against the full model.

    Accepts FitResults or plain log-likelihoods. The statistic is floored at
    0; a null above the full model by more than 1e-6 is a nesting violation.
    """
    if int(df) < 1:
        raise DomainError(f"df must be a positive integer, got {df!r}")
    diff = _loglik_of(full) - _loglik_of(null)
    if diff < -_NESTING_TOL:
        raise NestingViolationError(f"null log-likelihood exceeds full model by {-diff:.3g}")
    statistic = max(0.0, 2.0 * diff)
    return LRT(statistic, float(chi2.sf(statistic, df)))


def fit_and_test(
    data: GeneData,
    likelihood: Likelihood = Likelihood.JOINT,
    config: FitConfig | None = None,
) -> EffectTests:
    """
    Full model plus the two single-effect nulls, with LRTs for b0 and b1.

    The nulls are fit cold first and seed the full fit, which is then the
    same fit `fit` returns for the full model. Each null is also refit from
    the full estimate with the tested effect pinned to 0 and the better of
    the two kept. If a null still ends above the full model, the full model
    is refit from it.
    """
    config = config or FitConfig()
    full_spec = ModelSpec(True, True, likelihood)
    _check_fittable(data, full_spec, config)
    cold = {e: fit(data, full_spec.without(e), config) for e in EFFECTS}
    full = _report(data, _fit_cold(data, full_spec, config, tuple(r.params for r in cold.values())), config)

    nulls = {}
    for effect, null in cold.items():
        warm = fit(data, full_spec.without(effect), config, start=full.params)
        nulls[effect] = warm if warm.loglik > null.loglik + _ACCEPT else null
    null_genetic, null_poo = nulls["b0"], nulls["b1"]

    for null in (null_genetic, null_poo):
        if null.loglik > full.loglik:
            refit = fit(data, full_spec, config, start=null.params)
            if refit.loglik > full.loglik:
                full = refit

    return EffectTests(
        full=full,
        null_genetic=null_genetic,
        null_poo=null_poo,
        genetic=lrt(full, null_genetic),
        poo=lrt(full, null_poo),
    )
