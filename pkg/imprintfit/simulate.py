"""
Synthetic genes and the simulation study harness.

Generative model per sample:

- genotype under Hardy-Weinberg with A2 frequency `maf`, haplotype order
  random (so A1A2 and A2A1 are equally likely);
- parental origin of haplotype 1 (x = +1 / -1) equiprobable and independent;
- T ~ NB(mu, nb_overdisp) with log(mu) = gamma0 + eta, gamma0 chosen so the
  population mean of T is `mean_total`;
- N ~ Binomial(T, ase_fraction);
- N1 ~ BB(N, expit(b0 * z + b1 * x), bb_overdisp).

Depth is constant (kappa = 1) and there are no covariates.
"""

from __future__ import annotations

import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .distributions import bb_sample_array, nb_sample_array
from .errors import DomainError, ImprintFitError
from .model import GeneData, GenoClass, Likelihood, SampleRecord, eta_from_codes, eta_offset, z_code
from .optimizer import FitConfig, fit_and_test

logger = logging.getLogger(__name__)

POWER_EFFECTS: tuple[tuple[float, float], ...] = (
    (0.0, 0.0),
    (0.13, 0.13),
    (0.25, 0.25),
    (0.5, 0.5),
    (0.75, 0.75),
    (1.5, 1.5),
)
CURVE_SIZES: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, math.log(2.0), 0.8, 1.0)
TIMING_EFFECTS: tuple[tuple[float, float], ...] = (
    (0.0, 0.5),
    (0.25, 0.5),
    (0.5, 0.5),
    (1.0, 0.5),
    (0.5, 0.0),
    (0.5, 0.25),
    (0.5, 1.0),
)
FITTERS: tuple[Likelihood, ...] = (Likelihood.JOINT, Likelihood.TREC_ONLY, Likelihood.ASE_ONLY)
EFFECT_NAMES = ("genetic", "poo")

# index order = 2 * (hap1 carries A2) + (hap2 carries A2)
_GENO_BY_INDEX = (GenoClass.HOM_A1A1, GenoClass.HET_A1A2, GenoClass.HET_A2A1, GenoClass.HOM_A2A2)


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 32
    b0: float = 0.0
    b1: float = 0.0
    bb_overdisp: float = 0.25
    nb_overdisp: float = 4.0 / 3.0
    mean_total: float = 250.0
    ase_fraction: float = 0.10
    maf: float = 0.5
    seed: int = 1
    gene_id: str = "sim"

    def __post_init__(self):
        if self.n_samples < 2:
            raise DomainError(f"n_samples must be >= 2, got {self.n_samples!r}")
        if not (self.bb_overdisp > 0 and self.nb_overdisp > 0 and self.mean_total > 0):
            raise DomainError("over-dispersions and mean_total must be > 0")
        if not 0 < self.ase_fraction < 1:
            raise DomainError(f"ase_fraction must lie in (0, 1), got {self.ase_fraction!r}")
        if not 0 < self.maf <= 0.5:
            raise DomainError(f"maf must lie in (0, 0.5], got {self.maf!r}")
        if self.seed < 0:
            raise DomainError(f"seed must be >= 0, got {self.seed!r}")


@dataclass(frozen=True)
class ScenarioGrid:
    sample_sizes: tuple[int, ...] = (32, 64, 128, 256)
    effect_pairs: tuple[tuple[float, float], ...] = POWER_EFFECTS
    replicates: int | None = None
    alpha: float = 0.05
    seed: int = 1
    base: SimConfig = field(default_factory=SimConfig)
    fitters: tuple[Likelihood, ...] = FITTERS

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.replicates is not None and self.replicates < 1:
            raise DomainError(f"replicates must be >= 1, got {self.replicates!r}")
        if not self.sample_sizes or not self.effect_pairs:
            raise DomainError("grid needs at least one sample size and one effect pair")

    def replicates_for(self, b0: float, b1: float) -> int:
        if self.replicates is not None:
            return self.replicates
        return 2000 if b0 == 0 and b1 == 0 else 1000


@dataclass(frozen=True)
class PowerRow:
    n: int
    b0: float
    b1: float
    fitter: str
    effect: str
    rejection_rate: float
    replicates: int
    alpha: float
    seed: int


@dataclass(frozen=True)
class BiasRow:
    replicate: int
    n: int
    b0: float
    b1: float
    b0_joint: float
    b1_joint: float
    b0_only: float
    b1_only: float
    status: str = "ok"


@dataclass(frozen=True)
class TimingRow:
    n: int
    b0: float
    b1: float
    median_seconds: float
    repeats: int


def replicate_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one replicate, hashed from (seed, *keys) by SeedSequence."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def genotype_probabilities(maf: float) -> dict[GenoClass, float]:
    q = maf
    return {
        GenoClass.HOM_A1A1: (1 - q) ** 2,
        GenoClass.HET_A1A2: (1 - q) * q,
        GenoClass.HET_A2A1: q * (1 - q),
        GenoClass.HOM_A2A2: q**2,
    }


def solve_gamma0(config: SimConfig) -> float:
    """gamma0 such that E[T] = mean_total over the genotype / parental-origin mix."""
    expected = 0.0
    for geno, prob in genotype_probabilities(config.maf).items():
        for x in (1, -1):
            expected += 0.5 * prob * math.exp(eta_offset(geno, x, config.b0, config.b1))
    return math.log(config.mean_total) - math.log(expected)


def simulate_gene(config: SimConfig, rng: np.random.Generator | None = None) -> GeneData:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = config.n_samples
    hap1_a2 = rng.random(n) < config.maf
    hap2_a2 = rng.random(n) < config.maf
    x = np.where(rng.random(n) < 0.5, 1, -1)
    geno = [_GENO_BY_INDEX[2 * int(h1) + int(h2)] for h1, h2 in zip(hap1_a2, hap2_a2)]
    z = np.array([z_code(g) for g in geno], dtype=float)
    het = np.array([g.is_het for g in geno])
    hom_a2 = np.array([g is GenoClass.HOM_A2A2 for g in geno])

    log_mu = solve_gamma0(config) + eta_from_codes(z, x, het, hom_a2, config.b0, config.b1)
    total = nb_sample_array(log_mu, config.nb_overdisp, rng)
    ase_total = rng.binomial(total, config.ase_fraction)
    ase_hap1 = bb_sample_array(ase_total, config.b0 * z + config.b1 * x, config.bb_overdisp, rng)

    samples = tuple(
        SampleRecord(
            total_count=int(total[k]),
            ase_total=int(ase_total[k]),
            ase_hap1=int(ase_hap1[k]),
            geno_class=geno[k],
            x=int(x[k]),
            sample_id=f"S{k + 1:04d}",
        )
        for k in range(n)
    )
    return GeneData(config.gene_id, samples)


def _pool_map(fn, tasks: Sequence, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    chunksize = max(1, len(tasks) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=chunksize))


def _bias_replicate(task) -> BiasRow:
    config, r, fit_config = task
    data = simulate_gene(config, replicate_rng(config.seed, config.n_samples, r))
    try:
        tests = fit_and_test(data, Likelihood.JOINT, fit_config)
        joint, b0_only, b1_only = tests.full, tests.null_poo, tests.null_genetic
    except ImprintFitError as exc:
        logger.warning("bias replicate %d failed: %s", r, exc)
        nan = float("nan")
        return BiasRow(r, config.n_samples, config.b0, config.b1, nan, nan, nan, nan, exc.code)
    return BiasRow(
        r,
        config.n_samples,
        config.b0,
        config.b1,
        joint.params.b0,
        joint.params.b1,
        b0_only.params.b0,
        b1_only.params.b1,
    )


def run_bias_experiment(
    config: SimConfig,
    replicates: int,
    fit_config: FitConfig | None = None,
    workers: int = 1,
) -> list[BiasRow]:
    """
    Per replicate: effect estimates from the joint two-effect model and from
    the two single-effect models (b0 only, b1 only). Failed fits come back as
    flagged rows with NaN estimates.
    """
    if replicates < 1:
        raise DomainError(f"replicates must be >= 1, got {replicates!r}")
    if replicates < 100:
        logger.warning("bias experiment with %d replicates; densities need >= 100", replicates)
    fit_config = fit_config or FitConfig()
    tasks = [(config, r, fit_config) for r in range(replicates)]
    rows = _pool_map(_bias_replicate, tasks, workers)
    logger.info("bias experiment n=%d b0=%s b1=%s: %d replicates", config.n_samples, config.b0, config.b1, len(rows))
    return rows


def summarize_bias(rows: Iterable[BiasRow]) -> dict[str, float]:
    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        return {}
    return {
        name: float(np.mean([getattr(r, name) for r in ok]))
        for name in ("b0_joint", "b1_joint", "b0_only", "b1_only")
    }


def _power_replicate(task) -> dict[tuple[str, str], float]:
    config, keys, fitters, fit_config = task
    data = simulate_gene(config, replicate_rng(*keys))
    pvalues = {}
    for likelihood in fitters:
        try:
            tests = fit_and_test(data, likelihood, fit_config)
            pvalues[(likelihood.value, "genetic")] = tests.p_genetic
            pvalues[(likelihood.value, "poo")] = tests.p_poo
        except ImprintFitError as exc:
            logger.warning("power replicate %s (%s) failed: %s", keys, likelihood.value, exc)
            pvalues[(likelihood.value, "genetic")] = float("nan")
            pvalues[(likelihood.value, "poo")] = float("nan")
    return pvalues


def run_power_grid(
    grid: ScenarioGrid,
    fit_config: FitConfig | None = None,
    workers: int = 1,
) -> list[PowerRow]:
    """
    Rejection rates of the genetic and parent-of-origin LRTs for every
    (n, b0, b1) scenario and fitter. A failed fit counts as no rejection.
    Replicate r of scenario i at size n draws from rng(seed, n, i, r), so the
    result does not depend on `workers`.
    """
    fit_config = fit_config or FitConfig()
    rows: list[PowerRow] = []
    for n in grid.sample_sizes:
        for index, (b0, b1) in enumerate(grid.effect_pairs):
            config = replace(grid.base, n_samples=n, b0=b0, b1=b1, seed=grid.seed)
            reps = grid.replicates_for(b0, b1)
            tasks = [(config, (grid.seed, n, index, r), grid.fitters, fit_config) for r in range(reps)]
            results = _pool_map(_power_replicate, tasks, workers)
            for likelihood in grid.fitters:
                for effect in EFFECT_NAMES:
                    pvals = np.array([res[(likelihood.value, effect)] for res in results])
                    rejected = int(np.count_nonzero(pvals < grid.alpha))
                    rows.append(
                        PowerRow(n, b0, b1, likelihood.value, effect, rejected / reps, reps, grid.alpha, grid.seed)
                    )
            logger.info("power scenario n=%d b0=%s b1=%s done (%d replicates)", n, b0, b1, reps)
    return rows


def power_curve_pairs(effect: str, sizes: Sequence[float] = CURVE_SIZES) -> tuple[tuple[float, float], ...]:
    """Effect pairs varying one effect with the other held at 0."""
    if effect == "genetic":
        return tuple((float(s), 0.0) for s in sizes)
    if effect == "poo":
        return tuple((0.0, float(s)) for s in sizes)
    raise DomainError(f"effect must be 'genetic' or 'poo', got {effect!r}")


def time_one_model_fit(data: GeneData, fit_config: FitConfig | None = None) -> float:
    """Wall-clock seconds for one gene: single-effect fits, joint fit and both LRTs."""
    start = time.perf_counter()
    fit_and_test(data, Likelihood.JOINT, fit_config)
    return time.perf_counter() - start


def run_timing_bench(
    sample_sizes: Sequence[int],
    effect_pairs: Sequence[tuple[float, float]] = TIMING_EFFECTS,
    repeats: int = 10,
    seed: int = 1,
    fit_config: FitConfig | None = None,
) -> list[TimingRow]:
    if repeats < 1:
        raise DomainError(f"repeats must be >= 1, got {repeats!r}")
    rows = []
    for n in sample_sizes:
        for index, (b0, b1) in enumerate(effect_pairs):
            config = SimConfig(n_samples=n, b0=b0, b1=b1, seed=seed)
            data = simulate_gene(config, replicate_rng(seed, n, index))
            time_one_model_fit(data, fit_config)  # warm-up
            times = [time_one_model_fit(data, fit_config) for _ in range(repeats)]
            rows.append(TimingRow(n, b0, b1, statistics.median(times), repeats))
            logger.info("timing n=%d b0=%s b1=%s: median %.3fs", n, b0, b1, rows[-1].median_seconds)
    return rows
