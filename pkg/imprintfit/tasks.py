from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import replace
from functools import partial
from typing import Sequence

import click

from .errors import DomainError, ImprintFitError, ParseError, UndefinedDirectionError
from .inference import (
    GeneTestResult,
    classify_direction,
    direction_consistency_test,
    summarize_by_chromosome,
    with_qvalues,
)
from .model import GeneData, Likelihood
from .optimizer import FitConfig, fit_and_test
from .simulate import (
    POWER_EFFECTS,
    TIMING_EFFECTS,
    ScenarioGrid,
    SimConfig,
    power_curve_pairs,
    replicate_rng,
    run_bias_experiment,
    run_power_grid,
    run_timing_bench,
    simulate_gene,
    summarize_bias,
)
from .tables import (
    BIAS_COLUMNS,
    COUNTS_COLUMNS,
    DIRECTION_COLUMNS,
    POWER_COLUMNS,
    RESULT_COLUMNS,
    TIMING_COLUMNS,
    counts_rows,
    covariates_rows,
    load_genes,
    parse_gene_chrom,
    parse_results,
    write_tsv,
)

logger = logging.getLogger(__name__)

# gene currently being fitted in this thread / process; read by the log filter
current_gene: ContextVar[str] = ContextVar("imprintfit_current_gene", default="-")


def fit_gene(data: GeneData, config: FitConfig | None = None, min_total_mean: float = 0.0) -> GeneTestResult:
    """
    Fit one gene and test both effects.

    Genes without informative ASE samples fall back to the TReC-only model.
    Per-gene failures never raise; they come back as a row with `status`
    set to the error code and no estimates.
    """
    config = config or FitConfig()
    token = current_gene.set(data.gene_id)
    n_informative = data.n_informative(config.min_ase_reads)
    likelihood = Likelihood.JOINT if n_informative > 0 else Likelihood.TREC_ONLY
    base = dict(gene_id=data.gene_id, n=data.n_samples, n_informative=n_informative, model=likelihood.value)
    try:
        if float(data.arrays.total.mean()) < min_total_mean:
            logger.info("mean total count below %s, gene skipped", min_total_mean)
            return GeneTestResult(**base, status="low_expression")
        if likelihood is Likelihood.TREC_ONLY:
            logger.info("no informative ASE samples, fitting TReC only")
        tests = fit_and_test(data, likelihood, config)
    except ImprintFitError as exc:
        logger.warning("fit failed (%s): %s", exc.code, exc)
        return GeneTestResult(**base, status=exc.code)
    finally:
        current_gene.reset(token)

    full = tests.full
    try:
        direction = classify_direction(full.params.b1)
    except UndefinedDirectionError:
        direction = None
    return GeneTestResult(
        **base,
        b0_hat=full.params.b0,
        b1_hat=full.params.b1,
        bb_overdisp=full.params.bb_overdisp if likelihood.uses_ase else None,
        nb_overdisp=full.params.nb_overdisp,
        loglik=full.loglik,
        p_genetic=tests.p_genetic,
        p_poo=tests.p_poo,
        direction=direction,
        converged=full.converged and tests.null_genetic.converged and tests.null_poo.converged,
        boundary=full.boundary,
    )


def fit_genes(
    genes: Sequence[GeneData],
    config: FitConfig | None = None,
    min_total_mean: float = 0.0,
    threads: int = 1,
) -> list[GeneTestResult]:
    """Fit all genes (in input order) and add BH q-values across the run."""
    config = config or FitConfig()
    job = partial(fit_gene, config=config, min_total_mean=min_total_mean)
    if threads > 1 and len(genes) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, genes))
    else:
        results = [job(g) for g in genes]
    failed = sum(1 for r in results if not r.ok)
    logger.info("fitted %s genes (%s with non-ok status)", len(results), failed)
    return with_qvalues(results)


def simulate_genes(config: SimConfig, genes: int = 1) -> list[GeneData]:
    """`genes` independent genes on one shared sample set."""
    if genes < 1:
        raise DomainError(f"genes must be >= 1, got {genes!r}")
    if genes == 1:
        return [simulate_gene(config)]
    return [
        simulate_gene(replace(config, gene_id=f"{config.gene_id}{g + 1}"), replicate_rng(config.seed, g))
        for g in range(genes)
    ]


@contextmanager
def _fatal_errors():
    """Input and I/O problems end the command with exit code 1; bad values are usage errors."""
    try:
        yield
    except (ParseError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    except DomainError as exc:
        raise click.UsageError(str(exc)) from exc


@contextmanager
def _output(out: str):
    if out == "-":
        yield click.get_text_stream("stdout")
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        yield fh


def _int_list(ctx, param, value) -> tuple | None:
    if value is None:
        return None
    try:
        items = tuple(int(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise click.BadParameter("expected a comma-separated list of integers")
    if not items or any(v < 2 for v in items):
        raise click.BadParameter("sample sizes must be integers >= 2")
    return items


def _pairs(ctx, param, value) -> tuple:
    pairs = []
    for item in value or ():
        try:
            b0, b1 = (float(v) for v in item.split(","))
        except ValueError:
            raise click.BadParameter(f"expected B0,B1, got {item!r}")
        pairs.append((b0, b1))
    return tuple(pairs)


def _fit_config(config, epsilon, max_iters, min_ase) -> FitConfig:
    with _fatal_errors():
        return FitConfig.from_config(config, epsilon=epsilon, max_iters=max_iters, min_ase_reads=min_ase)


def _fit_options(fn):
    fn = click.option("--epsilon", type=float, default=None, help="Convergence tolerance on the log-likelihood change.")(fn)
    fn = click.option("--max-iters", type=int, default=None, help="Maximum coordinate-ascent cycles.")(fn)
    fn = click.option("--min-ase", type=int, default=None, help="Minimum ASE reads for a sample's ASE term.")(fn)
    return fn


def register_cli(cli: click.Group):
    @cli.command("fit")
    @click.option("--counts", "counts_path", required=True, type=click.Path(dir_okay=False))
    @click.option("--covariates", "covariates_path", default=None, type=click.Path(dir_okay=False))
    @click.option("--out", default="-", show_default=True, help="Output TSV ('-' for stdout).")
    @_fit_options
    @click.option("--min-total-mean", type=float, default=None, help="Skip genes with a lower mean total count.")
    @click.option("--alpha", type=float, default=None, help="q-value cutoff for the summary log line.")
    @click.option("--threads", type=int, default=None, help="Worker processes for gene-level fits.")
    @click.pass_obj
    def fit_cmd(config, counts_path, covariates_path, out, epsilon, max_iters, min_ase, min_total_mean, alpha, threads):
        """Fit every gene and test the genetic and parent-of-origin effects."""
        fit_config = _fit_config(config, epsilon, max_iters, min_ase)
        threads = threads if threads is not None else config.THREADS
        alpha = alpha if alpha is not None else config.ALPHA
        if threads < 1:
            raise click.BadParameter("must be >= 1", param_hint="--threads")
        with _fatal_errors():
            genes = load_genes(counts_path, covariates_path)
            logger.info("loaded %s genes from %s", len(genes), counts_path)
            min_mean = min_total_mean if min_total_mean is not None else config.MIN_TOTAL_MEAN
            results = fit_genes(genes, fit_config, min_mean, threads)
            with _output(out) as fh:
                write_tsv(results, RESULT_COLUMNS, fh)
        hits = sum(1 for r in results if r.q_poo is not None and r.q_poo < alpha)
        logger.info("%s genes with q_poo < %s", hits, alpha)

    @cli.command("simulate")
    @click.option("--n", "n_samples", type=int, default=32, show_default=True)
    @click.option("--b0", type=float, default=0.0, show_default=True)
    @click.option("--b1", type=float, default=0.0, show_default=True)
    @click.option("--bb-overdisp", type=float, default=0.25, show_default=True)
    @click.option("--nb-overdisp", type=float, default=4.0 / 3.0, show_default=True)
    @click.option("--mean-total", type=float, default=250.0, show_default=True)
    @click.option("--ase-fraction", type=float, default=0.10, show_default=True)
    @click.option("--maf", type=float, default=0.5, show_default=True)
    @click.option("--genes", type=int, default=1, show_default=True)
    @click.option("--seed", type=int, default=None)
    @click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
    @click.pass_obj
    def simulate_cmd(config, n_samples, b0, b1, bb_overdisp, nb_overdisp, mean_total, ase_fraction, maf, genes, seed, out):
        """Write counts.tsv and covariates.tsv for simulated genes."""
        with _fatal_errors():
            sim = SimConfig(
                n_samples=n_samples,
                b0=b0,
                b1=b1,
                bb_overdisp=bb_overdisp,
                nb_overdisp=nb_overdisp,
                mean_total=mean_total,
                ase_fraction=ase_fraction,
                maf=maf,
                seed=seed if seed is not None else config.SEED,
                gene_id="gene" if genes > 1 else "gene1",
            )
            data = simulate_genes(sim, genes)
            os.makedirs(out, exist_ok=True)
            write_tsv(counts_rows(data), COUNTS_COLUMNS, os.path.join(out, "counts.tsv"))
            rows, columns = covariates_rows(data[0])
            write_tsv(rows, columns, os.path.join(out, "covariates.tsv"))
        logger.info("simulated %s genes x %s samples into %s", len(data), n_samples, out)

    @cli.command("power")
    @click.option("--n", "sample_sizes", default="32", show_default=True, callback=_int_list, help="Comma-separated sample sizes.")
    @click.option("--pair", "pairs", multiple=True, callback=_pairs, help="Effect pair B0,B1 (repeatable).")
    @click.option("--curve", type=click.Choice(["genetic", "poo"]), default=None, help="Vary one effect, other at 0.")
    @click.option("--replicates", type=int, default=None, help="Default: 2000 for the null row, 1000 otherwise.")
    @_fit_options
    @click.option("--alpha", type=float, default=None)
    @click.option("--seed", type=int, default=None)
    @click.option("--threads", type=int, default=None)
    @click.option("--out", default="-", show_default=True)
    @click.pass_obj
    def power_cmd(config, sample_sizes, pairs, curve, replicates, epsilon, max_iters, min_ase, alpha, seed, threads, out):
        """Rejection rates of both LRTs for the joint and the two short models."""
        if curve and pairs:
            raise click.UsageError("--curve and --pair are mutually exclusive")
        fit_config = _fit_config(config, epsilon, max_iters, min_ase)
        with _fatal_errors():
            effect_pairs = power_curve_pairs(curve) if curve else (pairs or POWER_EFFECTS)
            grid = ScenarioGrid(
                sample_sizes=sample_sizes,
                effect_pairs=effect_pairs,
                replicates=replicates,
                alpha=alpha if alpha is not None else config.ALPHA,
                seed=seed if seed is not None else config.SEED,
            )
            rows = run_power_grid(grid, fit_config, workers=threads or config.THREADS)
            with _output(out) as fh:
                write_tsv(rows, POWER_COLUMNS, fh)

    @cli.command("bias")
    @click.option("--n", "n_samples", type=int, default=256, show_default=True)
    @click.option("--b0", type=float, default=0.5, show_default=True)
    @click.option("--b1", type=float, default=0.5, show_default=True)
    @click.option("--replicates", type=int, default=500, show_default=True)
    @_fit_options
    @click.option("--seed", type=int, default=None)
    @click.option("--threads", type=int, default=None)
    @click.option("--out", default="-", show_default=True)
    @click.pass_obj
    def bias_cmd(config, n_samples, b0, b1, replicates, epsilon, max_iters, min_ase, seed, threads, out):
        """Per-replicate estimates from the joint and single-effect models."""
        fit_config = _fit_config(config, epsilon, max_iters, min_ase)
        with _fatal_errors():
            sim = SimConfig(n_samples=n_samples, b0=b0, b1=b1, seed=seed if seed is not None else config.SEED)
            rows = run_bias_experiment(sim, replicates, fit_config, workers=threads or config.THREADS)
            summary = summarize_bias(rows)
            failed = sum(r.status != "ok" for r in rows)
            logger.info(
                "bias means over %s replicates (%s failed): %s",
                len(rows),
                failed,
                ", ".join(f"{k}={v:.4f}" for k, v in summary.items()) or "none",
            )
            with _output(out) as fh:
                write_tsv(rows, BIAS_COLUMNS, fh)

    @cli.command("bench")
    @click.option("--n", "sample_sizes", default="32,64,128,256", show_default=True, callback=_int_list)
    @click.option("--pair", "pairs", multiple=True, callback=_pairs, help="Effect pair B0,B1 (default 0.5,0.5).")
    @click.option("--all-pairs", is_flag=True, help="Use the full timing grid of effect pairs.")
    @click.option("--repeats", type=int, default=10, show_default=True)
    @click.option("--seed", type=int, default=None)
    @click.option("--out", default="-", show_default=True)
    @click.pass_obj
    def bench_cmd(config, sample_sizes, pairs, all_pairs, repeats, seed, out):
        """Median wall-clock seconds per full model fit."""
        if all_pairs and pairs:
            raise click.UsageError("--all-pairs and --pair are mutually exclusive")
        effect_pairs = TIMING_EFFECTS if all_pairs else (pairs or ((0.5, 0.5),))
        fit_config = FitConfig.from_config(config)
        with _fatal_errors():
            rows = run_timing_bench(
                sample_sizes,
                effect_pairs,
                repeats=repeats,
                seed=seed if seed is not None else config.SEED,
                fit_config=fit_config,
            )
            with _output(out) as fh:
                write_tsv(rows, TIMING_COLUMNS, fh)

    @cli.command("direction")
    @click.option("--results", "results_path", required=True, type=click.Path(dir_okay=False), help="Output of `fit`.")
    @click.option("--chrom", "chrom_path", required=True, type=click.Path(dir_okay=False), help="gene_id / chrom TSV.")
    @click.option("--q-cutoff", type=float, default=0.25, show_default=True)
    @click.option("--min-genes", type=int, default=5, show_default=True)
    @click.option("--seed", type=int, default=None)
    @click.option("--out", default="-", show_default=True)
    @click.pass_obj
    def direction_cmd(config, results_path, chrom_path, q_cutoff, min_genes, seed, out):
        """Test whether imprinting direction is uniform across chromosomes."""
        with _fatal_errors():
            results = parse_results(results_path)
            summaries = summarize_by_chromosome(results, parse_gene_chrom(chrom_path), q_cutoff)
            if not summaries:
                raise click.ClickException(f"no gene with q_poo < {q_cutoff} and a known chromosome")
            outcome = direction_consistency_test(
                summaries,
                min_genes=min_genes,
                exact_limit=config.EXACT_TABLE_LIMIT,
                draws=config.MC_DRAWS,
                seed=seed if seed is not None else config.SEED,
            )
            rows = [
                {
                    "chrom": "all",
                    "paternal_count": sum(s.paternal_count for s in summaries),
                    "total_count": sum(s.total_count for s in summaries),
                    "p_value": outcome.overall_p,
                    "method": outcome.method,
                }
            ]
            for s in summaries:
                tested = s.chrom in outcome.per_chromosome
                rows.append(
                    {
                        "chrom": s.chrom,
                        "paternal_count": s.paternal_count,
                        "total_count": s.total_count,
                        "p_value": outcome.per_chromosome.get(s.chrom),
                        "method": "fisher_2x2" if tested else None,
                    }
                )
            with _output(out) as fh:
                write_tsv(rows, DIRECTION_COLUMNS, fh)

    return cli
