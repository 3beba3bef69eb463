import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import make_gene, random_tiny_gene
from imprintfit.errors import DomainError, InsufficientDataError, NestingViolationError, SingularDesignError
from imprintfit.inference import Direction, classify_direction
from imprintfit.model import Likelihood, ModelParams, eta_vector, joint_loglik
from imprintfit.optimizer import (
    FitConfig,
    ModelSpec,
    effects_on_boundary,
    fit,
    fit_and_test,
    irls_step,
    lrt,
    optimize_effects,
    optimize_overdispersion,
    polish,
)
from imprintfit.simulate import SimConfig, simulate_gene

TIGHT = FitConfig(epsilon=1e-9, max_iters=2000)


def intercept_only(y):
    return make_gene([(t, 0, 0, "AA", 1) for t in y])


class TestIrlsStep:
    def test_first_step_from_zero(self):
        gene = intercept_only([2, 2])
        out = irls_step(gene, ModelParams(gamma0=0.0, nb_overdisp=1e-10))
        assert out.gamma0 == pytest.approx(1.0, abs=1e-6)

    def test_second_step(self):
        gene = intercept_only([2, 2])
        out = irls_step(gene, ModelParams(gamma0=1.0, nb_overdisp=1e-10))
        assert out.gamma0 == pytest.approx(2.0 / math.e, abs=1e-4)
        assert out.gamma0 == pytest.approx(0.7358, abs=1e-4)

    def test_fixed_point(self):
        gene = intercept_only([2, 2])
        start = ModelParams(gamma0=math.log(2.0), nb_overdisp=0.5)
        assert irls_step(gene, start).gamma0 == pytest.approx(math.log(2.0), abs=1e-12)

    def test_never_decreases_trec_likelihood(self, small_gene):
        from imprintfit.model import trec_loglik

        params = ModelParams(b0=0.3, b1=0.2, gamma0=8.0, nb_overdisp=0.01)
        out = irls_step(small_gene, params)
        assert trec_loglik(small_gene, out) >= trec_loglik(small_gene, params)

    def test_singular_design(self):
        gene = make_gene(
            [(10, 2, 1, "AB", 1), (12, 3, 1, "BA", 1), (9, 0, 0, "AA", -1)],
            covariates=[(1.0,), (1.0,), (1.0,)],
            covariate_names=("const",),
        )
        with pytest.raises(SingularDesignError) as err:
            irls_step(gene, ModelParams(betas=(0.0,)))
        assert err.value.column == "const"


def symmetric_ase_gene():
    return make_gene(
        [
            (20, 10, 5, "AB", 1),
            (20, 10, 5, "BA", -1),
            (20, 8, 4, "AB", -1),
            (20, 8, 4, "BA", 1),
        ]
    )


class TestOptimizeEffects:
    def test_stationary_point_is_kept(self):
        gene = symmetric_ase_gene()
        start = ModelParams(b0=0.0, b1=0.0, bb_overdisp=0.3)
        out = optimize_effects(gene, start, ModelSpec(True, True, Likelihood.ASE_ONLY))
        assert out.b0 == pytest.approx(0.0, abs=1e-8)
        assert out.b1 == pytest.approx(0.0, abs=1e-8)

    def test_does_not_lower_likelihood(self, small_gene):
        params = ModelParams(b0=1.0, b1=-1.0, gamma0=math.log(18.0), bb_overdisp=0.2, nb_overdisp=0.3)
        out = optimize_effects(small_gene, params, ModelSpec())
        assert joint_loglik(small_gene, out) >= joint_loglik(small_gene, params) - 1e-9

    def test_only_free_effects_move(self, small_gene):
        params = ModelParams(b0=0.0, b1=0.25, gamma0=math.log(18.0))
        out = optimize_effects(small_gene, params, ModelSpec(True, False))
        assert out.b1 == 0.25

    def test_needs_a_free_effect(self, small_gene):
        with pytest.raises(DomainError):
            optimize_effects(small_gene, ModelParams(), ModelSpec(False, False))

    def test_single_saturated_sample_hits_bound(self):
        gene = make_gene([(20, 10, 10, "AB", 1)])
        spec = ModelSpec(True, False, Likelihood.ASE_ONLY)
        result = fit(gene, spec)
        assert abs(result.params.b0) == pytest.approx(25.0, abs=1e-3)
        assert result.boundary
        assert effects_on_boundary(result.params, spec)

    def test_null_simulation_effects_near_zero(self):
        gene = simulate_gene(SimConfig(n_samples=1024, seed=20))
        result = fit(gene)
        assert abs(result.params.b0) < 0.2
        assert abs(result.params.b1) < 0.2


class TestOptimizeOverdispersion:
    def test_underdispersed_counts_hit_lower_clamp(self):
        gene = make_gene([(50, 0, 0, "AA" if k % 2 else "BB", 1) for k in range(20)])
        result = fit(gene, ModelSpec(True, False, Likelihood.TREC_ONLY))
        assert result.params.nb_overdisp == 1e-4

    def test_single_sample_hits_clamps(self):
        gene = make_gene([(40, 10, 5, "AB", 1)])
        result = fit(gene)
        assert result.params.nb_overdisp in (1e-4, 1e4)
        assert result.params.bb_overdisp in (1e-4, 1e4)

    def test_non_decreasing(self, small_gene):
        params = ModelParams(b0=0.2, b1=0.1, gamma0=math.log(18.0), bb_overdisp=5.0, nb_overdisp=5.0)
        out = optimize_overdispersion(small_gene, params)
        assert joint_loglik(small_gene, out) >= joint_loglik(small_gene, params)
        assert 1e-4 <= out.bb_overdisp <= 1e4
        assert 1e-4 <= out.nb_overdisp <= 1e4

    def test_bb_overdispersion_recovered(self):
        gene = simulate_gene(SimConfig(n_samples=1024, b0=0.3, b1=0.3, seed=4))
        result = fit(gene)
        assert result.params.bb_overdisp == pytest.approx(0.25, abs=0.1)


class TestPolish:
    def test_improves_poor_point(self, small_gene):
        params = ModelParams(b0=1.5, b1=-1.0, gamma0=math.log(18.0), bb_overdisp=2.0, nb_overdisp=2.0)
        out = polish(small_gene, params, ModelSpec())
        assert joint_loglik(small_gene, out) > joint_loglik(small_gene, params)

    def test_keeps_optimum(self, small_gene):
        result = fit(small_gene, config=TIGHT)
        out = polish(small_gene, result.params, ModelSpec(), TIGHT)
        assert joint_loglik(small_gene, out) >= result.loglik
        assert joint_loglik(small_gene, out) == pytest.approx(result.loglik, abs=1e-6)

    def test_pinned_effect_and_range(self):
        gene = make_gene([(50, 0, 0, "AA" if k % 2 else "BB", 1) for k in range(20)])
        params = ModelParams(b0=0.3, gamma0=math.log(50.0), nb_overdisp=0.5)
        out = polish(gene, params, ModelSpec(True, False, Likelihood.TREC_ONLY))
        assert out.b1 == 0.0
        assert 1e-4 <= out.nb_overdisp < 0.5
        assert joint_loglik(gene, out) > joint_loglik(gene, params)
        assert out.bb_overdisp == params.bb_overdisp


class TestFit:
    def test_trace_is_monotone(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            gene = random_tiny_gene(rng, k=int(rng.integers(4, 9)), max_count=50)
            result = fit(gene)
            assert np.all(np.diff(result.trace) >= -1e-9)
            assert result.loglik == result.trace[-1]
            assert result.loglik >= result.initial_loglik

    @pytest.mark.slow
    def test_trace_is_monotone_randomized(self):
        rng = np.random.default_rng(321)
        for i in range(1000):
            gene = random_tiny_gene(rng, k=int(rng.integers(4, 9)), max_count=50, gene_id=f"m{i}")
            spec = ModelSpec(likelihood=Likelihood.JOINT if i % 2 == 0 else Likelihood.TREC_ONLY)
            result = fit(gene, spec)
            assert np.all(np.diff(result.trace) >= -1e-9), gene.gene_id
            assert result.loglik == result.trace[-1]

    def test_determinism(self, small_gene):
        a = fit(small_gene)
        b = fit(small_gene)
        assert a.params == b.params
        assert a.trace == b.trace
        assert a.loglik == b.loglik

    def test_reports_non_convergence(self, small_gene):
        result = fit(small_gene, config=FitConfig(epsilon=1e-300, max_iters=1))
        assert not result.converged
        assert result.iterations == 1

    def test_ase_only_needs_informative_samples(self):
        gene = intercept_only([5, 7, 9])
        with pytest.raises(InsufficientDataError):
            fit(gene, ModelSpec(likelihood=Likelihood.ASE_ONLY))

    def test_min_ase_reads_applies_to_ase_only(self, small_gene):
        with pytest.raises(InsufficientDataError):
            fit(small_gene, ModelSpec(likelihood=Likelihood.ASE_ONLY), FitConfig(min_ase_reads=50))

    def test_pinned_effects_stay_zero(self, small_gene):
        result = fit(small_gene, ModelSpec(False, True))
        assert result.params.b0 == 0.0
        result = fit(small_gene, ModelSpec(True, False))
        assert result.params.b1 == 0.0

    def test_warm_start(self, small_gene):
        full = fit(small_gene)
        again = fit(small_gene, start=full.params)
        assert again.loglik >= full.loglik - 1e-9

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_simulated_estimates_near_truth(self, seed):
        estimates = []
        for r in range(4):
            gene = simulate_gene(SimConfig(n_samples=256, b0=0.5, b1=0.5, seed=100 * seed + r))
            estimates.append(fit(gene).params)
        assert np.mean([p.b0 for p in estimates]) == pytest.approx(0.5, abs=0.15)
        assert np.mean([p.b1 for p in estimates]) == pytest.approx(0.5, abs=0.15)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            FitConfig(epsilon=0.0)
        with pytest.raises(DomainError):
            FitConfig(overdisp_bounds=(1.0, 0.5))

    def test_config_from_class(self):
        class Cfg:
            EPSILON = 1e-6
            MAX_ITERS = 50
            OVERDISP_MIN = 1e-3
            OVERDISP_MAX = 1e3
            MIN_ASE = 2
            EFFECT_BOUND = 10.0

        cfg = FitConfig.from_config(Cfg, max_iters=None, min_ase_reads=4)
        assert cfg == FitConfig(epsilon=1e-6, max_iters=50, overdisp_bounds=(1e-3, 1e3), min_ase_reads=4, effect_bound=10.0)


_EFFECT_GRID = (-25.0, -8.0, -4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 25.0)
_LOG_OVERDISP_GRID = (math.log(1e-4), -4.0, -2.0, 0.0, 2.0, math.log(1e4))


def grid_oracle(gene, free=("b0", "b1"), polish_points=8):
    """
    Maximum of the joint log-likelihood inside the fitting box.

    A dense grid over the free effects and both log over-dispersions, with
    gamma0 set to its Poisson profile value at each point, followed by bounded
    Nelder-Mead runs from the best grid points.
    """
    lo, hi = math.log(1e-4), math.log(1e4)
    arr = gene.arrays
    total = float(arr.total.sum())

    def params_at(b0, b1, lbb, lnb, gamma0=None):
        if gamma0 is None:
            scale = float(np.exp(eta_vector(arr, b0, b1)).sum())
            gamma0 = math.log(max(total, 1e-3) / scale)
        return ModelParams(b0=b0, b1=b1, gamma0=gamma0, bb_overdisp=math.exp(lbb), nb_overdisp=math.exp(lnb))

    def unpack(v):
        values = dict(zip(free, v))
        return params_at(values.get("b0", 0.0), values.get("b1", 0.0), v[-2], v[-1], gamma0=v[-3])

    def negative(v):
        value = joint_loglik(gene, unpack(v))
        return -value if math.isfinite(value) else 1e300

    grids = [_EFFECT_GRID if name in free else (0.0,) for name in ("b0", "b1")]
    scored = []
    for b0, b1, lbb, lnb in itertools.product(*grids, _LOG_OVERDISP_GRID, _LOG_OVERDISP_GRID):
        params = params_at(b0, b1, lbb, lnb)
        value = joint_loglik(gene, params)
        if math.isfinite(value):
            effects = [v for name, v in (("b0", b0), ("b1", b1)) if name in free]
            scored.append((value, [*effects, params.gamma0, lbb, lnb]))
    scored.sort(key=lambda item: item[0], reverse=True)

    bounds = [(-25.0, 25.0)] * len(free) + [(None, None), (lo, hi), (lo, hi)]
    best = scored[0][0]
    for _, x0 in scored[:polish_points]:
        for _ in range(2):
            res = minimize(
                negative,
                x0,
                method="Nelder-Mead",
                bounds=bounds,
                options={"maxiter": 20000, "xatol": 1e-9, "fatol": 1e-11, "adaptive": True},
            )
            x0 = res.x
        best = max(best, -res.fun)
    return best


class TestOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_independent_search(self, seed):
        gene = random_tiny_gene(np.random.default_rng(seed), k=6, max_count=30)
        result = fit(gene, config=TIGHT)
        assert result.loglik >= grid_oracle(gene) - 1e-3

    def test_escapes_poor_coordinate_basin(self):
        # has a local optimum that traps plain coordinate ascent
        gene = make_gene([(28, 0, 0, "AA", 1), (12, 12, 12, "AB", -1), (26, 19, 8, "BA", -1), (5, 2, 1, "BB", -1)])
        full = fit(gene)
        assert full.loglik >= -16.3529 - 1e-3
        assert full.loglik >= grid_oracle(gene) - 1e-3
        for effect in ("b0", "b1"):
            assert full.loglik >= fit(gene, ModelSpec().without(effect)).loglik - 1e-6
        tests = fit_and_test(gene)
        assert tests.full.loglik >= full.loglik - 1e-9

    @pytest.mark.parametrize("seed", [10, 11, 12, 13])
    def test_lrt_statistics_match_independent_search(self, seed):
        gene = random_tiny_gene(np.random.default_rng(seed), k=6, max_count=30)
        tests = fit_and_test(gene, config=TIGHT)
        full = grid_oracle(gene)
        genetic = max(0.0, 2.0 * (full - grid_oracle(gene, free=("b1",))))
        poo = max(0.0, 2.0 * (full - grid_oracle(gene, free=("b0",))))
        assert tests.genetic.statistic == pytest.approx(genetic, abs=2e-3)
        assert tests.poo.statistic == pytest.approx(poo, abs=2e-3)

    def test_full_fit_never_below_single_effect_fits(self):
        rng = np.random.default_rng(77)
        for i in range(30):
            gene = random_tiny_gene(rng, k=int(rng.integers(4, 9)), max_count=50, gene_id=f"n{i}")
            full = fit(gene)
            for effect in ("b0", "b1"):
                assert full.loglik >= fit(gene, ModelSpec().without(effect)).loglik - 1e-6

    @pytest.mark.slow
    def test_randomized_instances(self):
        rng = np.random.default_rng(2024)
        for i in range(50):
            gene = random_tiny_gene(rng, k=int(rng.integers(4, 9)), max_count=50, gene_id=f"t{i}")
            result = fit(gene, config=TIGHT)
            assert result.loglik >= grid_oracle(gene) - 1e-3


class TestLrt:
    def test_equal_loglik(self):
        assert lrt(-5.0, -5.0) == (0.0, 1.0)

    def test_critical_value(self):
        statistic, p = lrt(0.0, -3.841 / 2)
        assert statistic == pytest.approx(3.841)
        assert p == pytest.approx(0.05, abs=1e-4)

    def test_known_values(self):
        statistic, p = lrt(-8.0, -10.0, df=1)
        assert statistic == 4.0
        assert p == pytest.approx(0.0455, abs=1e-4)

    def test_small_negative_difference_is_floored(self):
        assert lrt(-10.0, -10.0 + 5e-7).statistic == 0.0

    def test_nesting_violation(self):
        with pytest.raises(NestingViolationError):
            lrt(-10.0, -9.0)

    def test_bad_df(self):
        with pytest.raises(DomainError):
            lrt(-1.0, -2.0, df=0)


class TestFitAndTest:
    @pytest.mark.parametrize("seed", range(8))
    def test_full_model_dominates_nulls(self, seed):
        gene = random_tiny_gene(np.random.default_rng(seed + 50), k=8, max_count=50)
        tests = fit_and_test(gene)
        assert tests.full.loglik >= tests.null_genetic.loglik - 1e-6
        assert tests.full.loglik >= tests.null_poo.loglik - 1e-6
        assert 0.0 <= tests.p_genetic <= 1.0
        assert 0.0 <= tests.p_poo <= 1.0
        assert tests.null_genetic.params.b0 == 0.0
        assert tests.null_poo.params.b1 == 0.0

    def test_trec_only_model(self):
        gene = simulate_gene(SimConfig(n_samples=64, b0=2.0, b1=0.0, seed=8))
        tests = fit_and_test(gene, Likelihood.TREC_ONLY)
        assert tests.full.spec.likelihood is Likelihood.TREC_ONLY
        assert tests.p_genetic < 0.05

    def test_flipping_parental_origin_flips_direction(self):
        gene = simulate_gene(SimConfig(n_samples=64, b0=0.3, b1=1.0, seed=21))
        flipped = replace(gene, samples=tuple(replace(s, x=-s.x) for s in gene.samples))
        original = fit(gene, config=TIGHT)
        mirrored = fit(flipped, config=TIGHT)
        assert original.params.b1 > 0
        assert mirrored.params.b1 == pytest.approx(-original.params.b1, abs=1e-3)
        assert mirrored.params.b0 == pytest.approx(original.params.b0, abs=1e-3)
        assert mirrored.loglik == pytest.approx(original.loglik, abs=1e-6)
        assert classify_direction(original.params.b1) is Direction.PATERNAL_HIGHER
        assert classify_direction(mirrored.params.b1) is Direction.MATERNAL_HIGHER
