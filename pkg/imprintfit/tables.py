"""
TSV formats.

Inputs (tab-separated, UTF-8, header row, `#` comment lines allowed):

- counts: gene_id, sample_id, total_count, ase_total, ase_hap1, geno_class,
  hap1_parent. geno_class is one of AA/AB/BA/BB with the first letter on
  haplotype 1; hap1_parent is paternal or maternal.
- covariates: sample_id, kappa, then any number of numeric covariate columns.

Outputs use `NA` for missing values, `true` / `false` for booleans and the
shortest round-trip repr for floats, so identical runs give identical bytes.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
import pandas as pd

from .errors import DomainError, ParseError
from .inference import Direction, GeneTestResult
from .model import GeneData, GenoClass, SampleRecord

COUNTS_COLUMNS = ("gene_id", "sample_id", "total_count", "ase_total", "ase_hap1", "geno_class", "hap1_parent")
COUNT_FIELDS = ("total_count", "ase_total", "ase_hap1")
RESULT_COLUMNS = (
    "gene_id",
    "n",
    "n_informative",
    "model",
    "b0_hat",
    "b1_hat",
    "bb_overdisp",
    "nb_overdisp",
    "loglik",
    "p_genetic",
    "p_poo",
    "q_genetic",
    "q_poo",
    "direction",
    "converged",
    "boundary",
    "status",
)
POWER_COLUMNS = ("n", "b0", "b1", "fitter", "effect", "rejection_rate", "replicates", "alpha", "seed")
BIAS_COLUMNS = ("replicate", "n", "b0", "b1", "b0_joint", "b1_joint", "b0_only", "b1_only", "status")
TIMING_COLUMNS = ("n", "b0", "b1", "median_seconds", "repeats")
DIRECTION_COLUMNS = ("chrom", "paternal_count", "total_count", "p_value", "method")

PARENT_CODES = {"paternal": 1, "maternal": -1}
PARENT_NAMES = {v: k for k, v in PARENT_CODES.items()}
GENO_CODES = {g.value: g for g in GenoClass}
NA = "NA"


@dataclass(frozen=True, eq=False)
class CountsTable:
    """Validated counts; `frame` holds x (+1/-1) instead of hap1_parent."""

    frame: pd.DataFrame
    path: str
    lines: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def gene_ids(self) -> list[str]:
        return list(pd.unique(self.frame["gene_id"]))

    @property
    def sample_ids(self) -> list[str]:
        return list(pd.unique(self.frame["sample_id"]))


@dataclass(frozen=True, eq=False)
class CovariatesTable:
    frame: pd.DataFrame  # indexed by sample_id
    path: str
    covariate_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.frame)


def _read_tsv(path) -> tuple[pd.DataFrame, int, list[int]]:
    """
    Read a TSV as strings. Returns (frame, header line, data lines); line
    numbers are 1-based physical lines so comment and blank lines count.
    Every data row must have exactly as many fields as the header.
    """
    path = str(path)
    with open(path, "rb") as fh:
        content = fh.read()
    try:
        raw = content.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        line = content[: exc.start].count(b"\n") + 1
        raise ParseError(f"not valid UTF-8 (byte 0x{content[exc.start]:02x})", path=path, line=line) from exc
    kept = [(i + 1, line) for i, line in enumerate(raw) if line.strip() and not line.lstrip().startswith("#")]
    if not kept:
        raise ParseError("empty file, expected a header row", path=path)
    header_line, header = kept[0]
    n_fields = header.count("\t") + 1
    for number, line in kept[1:]:
        found = line.count("\t") + 1
        if found != n_fields:
            raise ParseError(f"expected {n_fields} fields, found {found}", path=path, line=number)
    text = "\n".join(line for _, line in kept) + "\n"
    try:
        frame = pd.read_csv(
            io.StringIO(text), sep="\t", dtype=str, keep_default_na=False, na_filter=False, index_col=False
        )
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed TSV: {exc}", path=path) from exc
    frame.columns = [c.strip() for c in frame.columns]
    return frame, header_line, [n for n, _ in kept[1:]]


def _require_columns(frame: pd.DataFrame, columns: Iterable[str], path: str, header_line: int) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}", path=path, line=header_line)


def _fail_first(mask, message: str, path: str, lines: Sequence[int], frame: pd.DataFrame, key: str) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.any():
        row = int(np.flatnonzero(mask)[0])
        raise ParseError(f"{message} ({key}={frame.iloc[row][key]!r})", path=path, line=lines[row])


def _non_negative_ints(frame, column, path, lines, key) -> pd.Series:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = values.isna() | (values < 0) | (values != np.floor(values))
    _fail_first(bad, f"{column} must be a non-negative integer", path, lines, frame, key)
    return values.astype(np.int64)


def parse_counts(path) -> CountsTable:
    path = str(path)
    frame, header_line, lines = _read_tsv(path)
    _require_columns(frame, COUNTS_COLUMNS, path, header_line)
    frame = frame.loc[:, list(COUNTS_COLUMNS)].apply(lambda col: col.str.strip())

    _fail_first((frame["gene_id"] == "") | (frame["sample_id"] == ""), "empty gene_id or sample_id", path, lines, frame, "gene_id")
    for column in COUNT_FIELDS:
        frame[column] = _non_negative_ints(frame, column, path, lines, "sample_id")
    _fail_first(
        frame["ase_hap1"] > frame["ase_total"],
        "ase_hap1 exceeds ase_total",
        path, lines, frame, "sample_id",
    )
    _fail_first(
        frame["ase_total"] > frame["total_count"],
        "ase_total exceeds total_count",
        path, lines, frame, "sample_id",
    )
    _fail_first(
        ~frame["geno_class"].isin(GENO_CODES),
        "geno_class must be one of AA, AB, BA, BB",
        path, lines, frame, "geno_class",
    )
    _fail_first(
        ~frame["hap1_parent"].isin(PARENT_CODES),
        "hap1_parent must be paternal or maternal",
        path, lines, frame, "hap1_parent",
    )
    _fail_first(
        frame.duplicated(["gene_id", "sample_id"]),
        "duplicate (gene_id, sample_id)",
        path, lines, frame, "sample_id",
    )

    frame["x"] = frame.pop("hap1_parent").map(PARENT_CODES).astype(np.int64)
    return CountsTable(frame.reset_index(drop=True), path, tuple(lines))


def parse_covariates(path) -> CovariatesTable:
    path = str(path)
    frame, header_line, lines = _read_tsv(path)
    _require_columns(frame, ("sample_id", "kappa"), path, header_line)
    frame["sample_id"] = frame["sample_id"].str.strip()
    _fail_first(frame["sample_id"] == "", "empty sample_id", path, lines, frame, "sample_id")
    _fail_first(frame["sample_id"].duplicated(), "duplicate sample_id", path, lines, frame, "sample_id")

    names = tuple(c for c in frame.columns if c not in ("sample_id", "kappa"))
    for column in ("kappa", *names):
        values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        _fail_first(~np.isfinite(values.to_numpy(dtype=float)), f"{column} must be a finite number", path, lines, frame, "sample_id")
        frame[column] = values.astype(float)
    _fail_first(frame["kappa"] <= 0, "kappa must be > 0", path, lines, frame, "sample_id")
    return CovariatesTable(frame.set_index("sample_id"), path, names)


def build_genes(counts: CountsTable, covariates: CovariatesTable | None = None) -> list[GeneData]:
    """GeneData per gene, genes and samples in input order."""
    if covariates is not None:
        wanted = set(counts.sample_ids)
        have = set(covariates.frame.index)
        missing = sorted(wanted - have)
        extra = sorted(have - wanted)
        if missing:
            raise ParseError(f"samples missing from covariates: {', '.join(missing[:5])}", path=covariates.path)
        if extra:
            raise ParseError(f"samples not present in counts: {', '.join(extra[:5])}", path=covariates.path)

    genes = []
    for gene_id, rows in counts.frame.groupby("gene_id", sort=False):
        samples = []
        for row in rows.itertuples(index=False):
            kappa, values = 1.0, ()
            if covariates is not None:
                cov = covariates.frame.loc[row.sample_id]
                kappa = float(cov["kappa"])
                values = tuple(float(cov[name]) for name in covariates.covariate_names)
            samples.append(
                SampleRecord(
                    total_count=int(row.total_count),
                    ase_total=int(row.ase_total),
                    ase_hap1=int(row.ase_hap1),
                    geno_class=GENO_CODES[row.geno_class],
                    x=int(row.x),
                    kappa=kappa,
                    covariates=values,
                    sample_id=row.sample_id,
                )
            )
        names = covariates.covariate_names if covariates is not None else ()
        genes.append(GeneData(str(gene_id), tuple(samples), names))
    return genes


def load_genes(counts_path, covariates_path=None) -> list[GeneData]:
    counts = parse_counts(counts_path)
    covariates = parse_covariates(covariates_path) if covariates_path else None
    return build_genes(counts, covariates)


def format_value(value) -> str:
    if value is None:
        return NA
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return NA if math.isnan(value) else repr(value)
    return str(value)


def _as_mapping(row) -> Mapping:
    if is_dataclass(row):
        return {f.name: getattr(row, f.name) for f in fields(row)}
    return row


def write_tsv(rows: Iterable, columns: Sequence[str], out: TextIO | str | Path) -> None:
    """Write dataclass or mapping rows with a fixed column order."""
    body = [[format_value(_as_mapping(row).get(c)) for c in columns] for row in rows]
    frame = pd.DataFrame(body, columns=list(columns), dtype=str)
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8", newline="") as fh:
            frame.to_csv(fh, sep="\t", index=False, lineterminator="\n")
    else:
        frame.to_csv(out, sep="\t", index=False, lineterminator="\n")


def counts_rows(genes: Iterable[GeneData]) -> list[dict]:
    rows = []
    for gene in genes:
        for s in gene.samples:
            rows.append(
                {
                    "gene_id": gene.gene_id,
                    "sample_id": s.sample_id,
                    "total_count": s.total_count,
                    "ase_total": s.ase_total,
                    "ase_hap1": s.ase_hap1,
                    "geno_class": s.geno_class,
                    "hap1_parent": PARENT_NAMES[s.x],
                }
            )
    return rows


def covariates_rows(gene: GeneData) -> tuple[list[dict], tuple[str, ...]]:
    columns = ("sample_id", "kappa", *gene.covariate_names)
    rows = []
    for s in gene.samples:
        row = {"sample_id": s.sample_id, "kappa": s.kappa}
        row.update(zip(gene.covariate_names, s.covariates))
        rows.append(row)
    return rows, columns


def _optional(value: str, cast):
    return None if value in (NA, "") else cast(value)


def _bool(value: str) -> bool:
    if value not in ("true", "false"):
        raise ValueError(f"expected true/false, got {value!r}")
    return value == "true"


def parse_results(path) -> list[GeneTestResult]:
    """Read back a `fit` result table."""
    path = str(path)
    frame, header_line, lines = _read_tsv(path)
    _require_columns(frame, RESULT_COLUMNS, path, header_line)
    floats = ("b0_hat", "b1_hat", "bb_overdisp", "nb_overdisp", "loglik", "p_genetic", "p_poo", "q_genetic", "q_poo")
    results = []
    for line, row in zip(lines, frame.itertuples(index=False)):
        try:
            values = {name: _optional(getattr(row, name), float) for name in floats}
            results.append(
                GeneTestResult(
                    gene_id=row.gene_id,
                    n=int(row.n),
                    n_informative=int(row.n_informative),
                    model=row.model,
                    direction=_optional(row.direction, Direction),
                    converged=_optional(row.converged, _bool),
                    boundary=_optional(row.boundary, _bool),
                    status=row.status,
                    **values,
                )
            )
        except (ValueError, DomainError) as exc:
            raise ParseError(str(exc), path=path, line=line) from exc
    return results


def parse_gene_chrom(path) -> dict[str, str]:
    """gene_id -> chrom annotation."""
    path = str(path)
    frame, header_line, lines = _read_tsv(path)
    _require_columns(frame, ("gene_id", "chrom"), path, header_line)
    frame = frame.loc[:, ["gene_id", "chrom"]].apply(lambda col: col.str.strip())
    _fail_first(frame["gene_id"].duplicated(), "duplicate gene_id", path, lines, frame, "gene_id")
    _fail_first(frame["chrom"] == "", "empty chrom", path, lines, frame, "gene_id")
    return dict(zip(frame["gene_id"], frame["chrom"]))
