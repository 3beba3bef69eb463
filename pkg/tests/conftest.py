import numpy as np
import pytest

from imprintfit.model import GeneData, GenoClass, SampleRecord


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_gene(rows, gene_id="g1", kappa=None, covariates=None, covariate_names=()):
    """rows: (T, N, N1, geno, x) tuples."""
    samples = []
    for k, (t, n, n1, geno, x) in enumerate(rows):
        samples.append(
            SampleRecord(
                total_count=t,
                ase_total=n,
                ase_hap1=n1,
                geno_class=GenoClass(geno),
                x=x,
                kappa=1.0 if kappa is None else kappa[k],
                covariates=() if covariates is None else covariates[k],
                sample_id=f"s{k + 1}",
            )
        )
    return GeneData(gene_id, tuple(samples), tuple(covariate_names))


def random_tiny_gene(rng: np.random.Generator, k: int = 6, max_count: int = 30, gene_id="tiny"):
    genos = ["AA", "AB", "BA", "BB"]
    rows = []
    for i in range(k):
        geno = genos[i % 4] if i < 4 else genos[int(rng.integers(4))]
        t = int(rng.integers(1, max_count + 1))
        n = int(rng.integers(0, t + 1))
        n1 = int(rng.integers(0, n + 1))
        rows.append((t, n, n1, geno, int(rng.choice([1, -1]))))
    return make_gene(rows, gene_id=gene_id)


@pytest.fixture
def small_gene():
    return make_gene(
        [
            (12, 4, 3, "AB", 1),
            (20, 6, 1, "BA", -1),
            (7, 0, 0, "AA", 1),
            (30, 9, 6, "BA", 1),
            (15, 3, 1, "AB", -1),
            (25, 0, 0, "BB", -1),
        ]
    )


@pytest.fixture
def counts_tsv(tmp_path):
    path = tmp_path / "counts.tsv"
    path.write_text(
        "# toy input\n"
        "gene_id\tsample_id\ttotal_count\tase_total\tase_hap1\tgeno_class\thap1_parent\n"
        "g1\ts1\t10\t4\t1\tAB\tpaternal\n"
        "g1\ts2\t12\t5\t3\tBA\tmaternal\n"
        "g1\ts3\t9\t0\t0\tAA\tpaternal\n"
        "g2\ts1\t30\t6\t2\tBB\tmaternal\n"
        "g2\ts2\t25\t5\t5\tAB\tpaternal\n"
        "g2\ts3\t40\t8\t4\tBA\tpaternal\n",
        encoding="utf-8",
    )
    return path


@pytest.fixture
def covariates_tsv(tmp_path):
    path = tmp_path / "covariates.tsv"
    path.write_text(
        "sample_id\tkappa\tbatch\n"
        "s1\t1.0\t0\n"
        "s2\t1.5\t1\n"
        "s3\t0.8\t0\n",
        encoding="utf-8",
    )
    return path
