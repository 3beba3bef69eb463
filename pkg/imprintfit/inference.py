"""
Gene-level multiple testing, imprinting direction, and chromosome-level
direction-consistency tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import false_discovery_control, fisher_exact

from .errors import DomainError, UndefinedDirectionError

logger = logging.getLogger(__name__)

# relative slack when comparing table probabilities to the observed one
_TIE_TOL = 1e-7


class Direction(str, Enum):
    PATERNAL_HIGHER = "paternal"
    MATERNAL_HIGHER = "maternal"


@dataclass(frozen=True)
class GeneTestResult:
    gene_id: str
    n: int
    n_informative: int
    model: str = "joint"
    b0_hat: float | None = None
    b1_hat: float | None = None
    bb_overdisp: float | None = None
    nb_overdisp: float | None = None
    loglik: float | None = None
    p_genetic: float | None = None
    p_poo: float | None = None
    q_genetic: float | None = None
    q_poo: float | None = None
    direction: Direction | None = None
    converged: bool | None = None
    boundary: bool | None = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class ChromosomeSummary:
    chrom: str
    paternal_count: int
    total_count: int

    def __post_init__(self):
        if self.paternal_count < 0 or self.total_count < 0:
            raise DomainError(f"chromosome {self.chrom}: counts must be >= 0")
        if self.paternal_count > self.total_count:
            raise DomainError(
                f"chromosome {self.chrom}: paternal_count {self.paternal_count} > total_count {self.total_count}"
            )

    @property
    def maternal_count(self) -> int:
        return self.total_count - self.paternal_count


@dataclass(frozen=True)
class ConsistencyResult:
    overall_p: float | None
    method: str | None
    tested_chromosomes: tuple[str, ...]
    per_chromosome: dict[str, float]


def bh_qvalues(pvals: Sequence[float]) -> list[float]:
    """Benjamini-Hochberg adjusted p-values, in input order."""
    p = np.asarray(list(pvals), dtype=float)
    if p.size == 0:
        return []
    if not np.all(np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise DomainError("p-values must lie in [0, 1]")
    return [float(q) for q in false_discovery_control(p, method="bh")]


def classify_direction(b1_hat: float) -> Direction:
    """Positive b1 raises the hap-1 fraction when hap 1 is paternal."""
    if not math.isfinite(b1_hat):
        raise DomainError(f"b1_hat must be finite, got {b1_hat!r}")
    if b1_hat == 0:
        raise UndefinedDirectionError("direction is undefined for b1_hat == 0")
    return Direction.PATERNAL_HIGHER if b1_hat > 0 else Direction.MATERNAL_HIGHER


def fisher_exact_2x2(a: int, b: int, c: int, d: int) -> float:
    """Two-sided Fisher exact p-value for [[a, b], [c, d]]."""
    for v in (a, b, c, d):
        if v < 0:
            raise DomainError(f"table counts must be >= 0, got {(a, b, c, d)!r}")
    return float(fisher_exact([[a, b], [c, d]], alternative="two-sided").pvalue)


def _log_choose(n, k):
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def count_tables(totals: Sequence[int], paternal_total: int) -> float:
    """Number of r x 2 tables with the given row totals and first-column total."""
    ways = np.zeros(paternal_total + 1)
    ways[0] = 1.0
    for n in totals:
        ways = np.convolve(ways, np.ones(int(n) + 1))[: paternal_total + 1]
    return float(ways[paternal_total])


def fisher_exact_rx2(
    paternal: Sequence[int],
    totals: Sequence[int],
    exact_limit: int = 1_000_000,
    draws: int = 100_000,
    seed: int = 1,
) -> tuple[float, str]:
    """
    Fisher exact test of homogeneity for an r x 2 table (rows = chromosomes).

    Conditional on the margins the first column follows a multivariate
    hypergeometric law. The p-value sums the probabilities of all tables no
    more likely than the observed one: by enumeration when there are at most
    `exact_limit` tables, otherwise by Monte Carlo with `draws` draws,
    p = (hits + 1) / (draws + 1). Returns (p, method).
    """
    paternal = np.asarray(paternal, dtype=int)
    totals = np.asarray(totals, dtype=int)
    if paternal.shape != totals.shape or paternal.ndim != 1 or paternal.size == 0:
        raise DomainError("paternal and totals must be equal-length, non-empty sequences")
    if np.any(paternal < 0) or np.any(paternal > totals):
        raise DomainError("expected 0 <= paternal <= total in every row")

    target = int(paternal.sum())
    observed = float(_log_choose(totals, paternal).sum())
    threshold = observed + math.log1p(_TIE_TOL)

    if count_tables(totals, target) <= exact_limit:
        remaining = np.concatenate([np.cumsum(totals[::-1])[::-1][1:], [0]])
        sums = np.zeros(1, dtype=int)
        logp = np.zeros(1)
        for n, rest in zip(totals, remaining):
            a = np.arange(n + 1)
            sums = (sums[:, None] + a[None, :]).ravel()
            logp = (logp[:, None] + _log_choose(n, a)[None, :]).ravel()
            keep = (sums <= target) & (sums + rest >= target)
            sums, logp = sums[keep], logp[keep]
        norm = logsumexp(logp)
        extreme = logp <= threshold
        p = float(np.exp(logsumexp(logp[extreme]) - norm)) if extreme.any() else 0.0
        return min(p, 1.0), "exact"

    rng = np.random.default_rng(seed)
    sample = rng.multivariate_hypergeometric(totals, target, size=draws)
    logp = _log_choose(totals[None, :], sample).sum(axis=1)
    hits = int(np.count_nonzero(logp <= threshold))
    logger.debug("fisher r x 2: %d rows, Monte Carlo with %d draws", totals.size, draws)
    return (hits + 1) / (draws + 1), "monte_carlo"


def direction_consistency_test(
    summaries: Sequence[ChromosomeSummary],
    min_genes: int = 5,
    exact_limit: int = 1_000_000,
    draws: int = 100_000,
    seed: int = 1,
) -> ConsistencyResult:
    """
    Is the paternal/maternal split of imprinted genes uniform across chromosomes?

    Overall: Fisher exact test on the chromosome x (paternal, maternal) table,
    restricted to chromosomes with at least 2 genes. Per chromosome (only when
    it has at least `min_genes` genes): 2 x 2 Fisher test of that chromosome
    against all other chromosomes pooled.
    """
    if not summaries:
        raise DomainError("no chromosome summaries given")
    if min_genes < 2:
        raise DomainError(f"min_genes must be >= 2, got {min_genes!r}")

    eligible = [s for s in summaries if s.total_count >= 2]
    overall, method = None, None
    if len(eligible) >= 2:
        overall, method = fisher_exact_rx2(
            [s.paternal_count for s in eligible],
            [s.total_count for s in eligible],
            exact_limit=exact_limit,
            draws=draws,
            seed=seed,
        )

    pat_all = sum(s.paternal_count for s in summaries)
    tot_all = sum(s.total_count for s in summaries)
    per_chromosome = {}
    for s in summaries:
        if s.total_count < min_genes:
            continue
        pat_rest = pat_all - s.paternal_count
        mat_rest = (tot_all - s.total_count) - pat_rest
        per_chromosome[s.chrom] = fisher_exact_2x2(s.paternal_count, s.maternal_count, pat_rest, mat_rest)

    return ConsistencyResult(
        overall_p=overall,
        method=method,
        tested_chromosomes=tuple(s.chrom for s in eligible),
        per_chromosome=per_chromosome,
    )


def with_qvalues(results: Sequence[GeneTestResult]) -> list[GeneTestResult]:
    """Fill q_genetic / q_poo across all results that carry p-values."""
    out = list(results)
    for p_field, q_field in (("p_genetic", "q_genetic"), ("p_poo", "q_poo")):
        idx = [i for i, r in enumerate(out) if getattr(r, p_field) is not None]
        qs = bh_qvalues([getattr(out[i], p_field) for i in idx])
        for i, q in zip(idx, qs):
            out[i] = replace(out[i], **{q_field: q})
    return out


def summarize_by_chromosome(
    results: Iterable[GeneTestResult],
    gene_chrom: Mapping[str, str],
    q_cutoff: float,
) -> list[ChromosomeSummary]:
    """
    Count paternally-higher genes per chromosome among genes with
    q_poo < q_cutoff. Genes without a chromosome or a direction are skipped.
    """
    counts: dict[str, list[int]] = {}
    for r in results:
        if r.q_poo is None or r.direction is None or r.q_poo >= q_cutoff:
            continue
        chrom = gene_chrom.get(r.gene_id)
        if chrom is None:
            logger.warning("gene %s has no chromosome annotation, skipped", r.gene_id)
            continue
        pat_tot = counts.setdefault(chrom, [0, 0])
        pat_tot[0] += r.direction is Direction.PATERNAL_HIGHER
        pat_tot[1] += 1
    return [ChromosomeSummary(chrom, pat, tot) for chrom, (pat, tot) in counts.items()]
