"""
Per-gene data model and likelihood.

One gene across K samples. Each sample carries its total read count T, its
allele-specific read count N, the count N1 on haplotype 1, the candidate
eQTL genotype (ordered by haplotype), the parental origin of haplotype 1,
a read-depth normaliser kappa and optional covariates.

Design codes:

- z = +1 for A2A1 (haplotype 1 carries A2), -1 for A1A2, 0 for homozygotes.
- x = +1 when haplotype 1 is paternal, -1 when maternal.

ASE:  N1 ~ BB(N, p, bb_overdisp),  logit(p) = b0 * z + b1 * x
TReC: T  ~ NB(mu, nb_overdisp),
      log(mu) = gamma0 + beta_kappa * log(kappa) + sum_u beta_u * c_u + eta

Heterozygote eta uses s = z * x (the sign of "A2 is paternal"):
eta = log(1 + exp(b0 + s * b1)) - log(1 + exp(s * b1)). This is what the
per-allele expression model implies and it keeps the likelihood invariant
under swapping the haplotype labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .distributions import bb_logpmf_terms, nb_logpmf_terms
from .errors import DomainError, SingularDesignError


class GenoClass(str, Enum):
    """Candidate eQTL genotype, first letter on haplotype 1 (A = A1, B = A2)."""

    HOM_A1A1 = "AA"
    HET_A1A2 = "AB"
    HET_A2A1 = "BA"
    HOM_A2A2 = "BB"

    @property
    def is_het(self) -> bool:
        return self in (GenoClass.HET_A1A2, GenoClass.HET_A2A1)

    def swapped(self) -> "GenoClass":
        return GenoClass(self.value[::-1])


class Likelihood(str, Enum):
    JOINT = "joint"
    TREC_ONLY = "trec_only"
    ASE_ONLY = "ase_only"

    @property
    def uses_trec(self) -> bool:
        return self is not Likelihood.ASE_ONLY

    @property
    def uses_ase(self) -> bool:
        return self is not Likelihood.TREC_ONLY


_Z = {
    GenoClass.HOM_A1A1: 0,
    GenoClass.HOM_A2A2: 0,
    GenoClass.HET_A2A1: 1,
    GenoClass.HET_A1A2: -1,
}


def z_code(geno_class: GenoClass) -> int:
    return _Z[GenoClass(geno_class)]


@dataclass(frozen=True)
class SampleRecord:
    total_count: int
    ase_total: int
    ase_hap1: int
    geno_class: GenoClass
    x: int
    kappa: float = 1.0
    covariates: tuple[float, ...] = ()
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "geno_class", GenoClass(self.geno_class))
        object.__setattr__(self, "covariates", tuple(float(c) for c in self.covariates))
        for name in ("total_count", "ase_total", "ase_hap1"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise DomainError(f"{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not self.ase_hap1 <= self.ase_total <= self.total_count:
            raise DomainError(
                "expected ase_hap1 <= ase_total <= total_count, got "
                f"{self.ase_hap1}, {self.ase_total}, {self.total_count}"
            )
        if self.x not in (1, -1):
            raise DomainError(f"x must be +1 or -1, got {self.x!r}")
        object.__setattr__(self, "x", int(self.x))
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise DomainError(f"kappa must be finite and > 0, got {self.kappa!r}")
        object.__setattr__(self, "kappa", float(self.kappa))
        if not all(math.isfinite(c) for c in self.covariates):
            raise DomainError("covariates must be finite")

    @property
    def z(self) -> int:
        return z_code(self.geno_class)


class GeneArrays(NamedTuple):
    total: np.ndarray
    ase_total: np.ndarray
    ase_hap1: np.ndarray
    z: np.ndarray
    x: np.ndarray
    het: np.ndarray
    hom_a2: np.ndarray
    log_kappa: np.ndarray
    covariates: np.ndarray


@dataclass(frozen=True)
class GeneData:
    gene_id: str
    samples: tuple[SampleRecord, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if not samples:
            raise DomainError(f"gene {self.gene_id!r} has no samples")
        p = len(samples[0].covariates)
        if any(len(s.covariates) != p for s in samples):
            raise DomainError(f"gene {self.gene_id!r}: covariate dimension differs across samples")
        names = tuple(self.covariate_names) or tuple(f"c{u + 1}" for u in range(p))
        if len(names) != p:
            raise DomainError(f"gene {self.gene_id!r}: {len(names)} covariate names for {p} covariates")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @cached_property
    def arrays(self) -> GeneArrays:
        z = np.array([s.z for s in self.samples], dtype=float)
        geno = [s.geno_class for s in self.samples]
        return GeneArrays(
            total=np.array([s.total_count for s in self.samples], dtype=float),
            ase_total=np.array([s.ase_total for s in self.samples], dtype=float),
            ase_hap1=np.array([s.ase_hap1 for s in self.samples], dtype=float),
            z=z,
            x=np.array([s.x for s in self.samples], dtype=float),
            het=np.array([g.is_het for g in geno]),
            hom_a2=np.array([g is GenoClass.HOM_A2A2 for g in geno]),
            log_kappa=np.log(np.array([s.kappa for s in self.samples], dtype=float)),
            covariates=np.array([s.covariates for s in self.samples], dtype=float).reshape(
                self.n_samples, self.n_covariates
            ),
        )

    def ase_mask(self, min_ase_reads: int = 0) -> np.ndarray:
        n = self.arrays.ase_total
        return (n > 0) & (n >= min_ase_reads)

    def n_informative(self, min_ase_reads: int = 0) -> int:
        return int(self.ase_mask(min_ase_reads).sum())

    @property
    def kappa_varies(self) -> bool:
        return bool(np.ptp(self.arrays.log_kappa) > 0)

    @cached_property
    def design(self) -> tuple[np.ndarray, tuple[str, ...]]:
        """
        TReC design matrix [1, log kappa, covariates] and column names.

        The log-kappa column is dropped when kappa is constant (beta_kappa is
        then held at 0). Raises SingularDesignError naming the first column
        that adds no rank.
        """
        arr = self.arrays
        columns = [np.ones(self.n_samples)]
        names = ["intercept"]
        if self.kappa_varies:
            columns.append(arr.log_kappa)
            names.append("log_kappa")
        for u, name in enumerate(self.covariate_names):
            columns.append(arr.covariates[:, u])
            names.append(name)
        X = np.column_stack(columns)
        for i in range(1, X.shape[1] + 1):
            if np.linalg.matrix_rank(X[:, :i]) < i:
                raise SingularDesignError(
                    f"gene {self.gene_id!r}: design column {names[i - 1]!r} is collinear "
                    f"with earlier columns (K={self.n_samples})",
                    column=names[i - 1],
                )
        return X, tuple(names)


@dataclass(frozen=True)
class ModelParams:
    b0: float = 0.0
    b1: float = 0.0
    gamma0: float = 0.0
    beta_kappa: float = 0.0
    betas: tuple[float, ...] = field(default_factory=tuple)
    bb_overdisp: float = 0.1
    nb_overdisp: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for name in ("b0", "b1", "gamma0", "beta_kappa", "bb_overdisp", "nb_overdisp"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("bb_overdisp", "nb_overdisp"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value!r}")
        for name in ("b0", "b1", "gamma0", "beta_kappa"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)


def bb_logit_mean(z, x, b0: float, b1: float):
    return b0 * z + b1 * x


def _het_eta(s, b0: float, b1: float):
    return np.logaddexp(0.0, b0 + s * b1) - np.logaddexp(0.0, s * b1)


def eta_offset(geno_class: GenoClass, x: int, b0: float, b1: float) -> float:
    geno_class = GenoClass(geno_class)
    if geno_class is GenoClass.HOM_A1A1:
        return 0.0
    if geno_class is GenoClass.HOM_A2A2:
        return float(b0)
    s = z_code(geno_class) * x
    return float(_het_eta(s, b0, b1))


def eta_from_codes(z, x, het, hom_a2, b0: float, b1: float) -> np.ndarray:
    het_eta = _het_eta(np.asarray(z) * np.asarray(x), b0, b1)
    return np.where(het, het_eta, np.where(hom_a2, b0, 0.0))


def eta_vector(arrays: GeneArrays, b0: float, b1: float) -> np.ndarray:
    return eta_from_codes(arrays.z, arrays.x, arrays.het, arrays.hom_a2, b0, b1)


def trec_log_mean(record: SampleRecord, params: ModelParams) -> float:
    if len(params.betas) != len(record.covariates):
        raise DomainError(f"expected {len(record.covariates)} covariate coefficients, got {len(params.betas)}")
    linear = params.gamma0 + params.beta_kappa * math.log(record.kappa)
    linear += sum(b * c for b, c in zip(params.betas, record.covariates))
    return linear + eta_offset(record.geno_class, record.x, params.b0, params.b1)


def log_mean_vector(data: GeneData, params: ModelParams) -> np.ndarray:
    arr = data.arrays
    if len(params.betas) != data.n_covariates:
        raise DomainError(f"expected {data.n_covariates} covariate coefficients, got {len(params.betas)}")
    linear = params.gamma0 + params.beta_kappa * arr.log_kappa
    if data.n_covariates:
        linear = linear + arr.covariates @ np.asarray(params.betas)
    return linear + eta_vector(arr, params.b0, params.b1)


def trec_loglik(data: GeneData, params: ModelParams) -> float:
    return float(nb_logpmf_terms(data.arrays.total, log_mean_vector(data, params), params.nb_overdisp).sum())


def ase_loglik(data: GeneData, params: ModelParams, min_ase_reads: int = 0) -> float:
    arr = data.arrays
    mask = data.ase_mask(min_ase_reads)
    if not mask.any():
        return 0.0
    logit = bb_logit_mean(arr.z[mask], arr.x[mask], params.b0, params.b1)
    return float(bb_logpmf_terms(arr.ase_hap1[mask], arr.ase_total[mask], logit, params.bb_overdisp).sum())


def loglik(
    data: GeneData,
    params: ModelParams,
    likelihood: Likelihood = Likelihood.JOINT,
    min_ase_reads: int = 0,
) -> float:
    total = 0.0
    if likelihood.uses_trec:
        total += trec_loglik(data, params)
    if likelihood.uses_ase:
        total += ase_loglik(data, params, min_ase_reads)
    return total


def joint_loglik(data: GeneData, params: ModelParams, min_ase_reads: int = 0) -> float:
    return loglik(data, params, Likelihood.JOINT, min_ase_reads)


def relabel_haplotypes(data: GeneData) -> GeneData:
    """Swap haplotype 1 and 2 in every sample (N1 -> N - N1, AB <-> BA, x -> -x)."""
    samples = [
        replace(
            s,
            ase_hap1=s.ase_total - s.ase_hap1,
            geno_class=s.geno_class.swapped(),
            x=-s.x,
        )
        for s in data.samples
    ]
    return GeneData(data.gene_id, tuple(samples), data.covariate_names)
