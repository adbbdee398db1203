import math
import os

import numpy as np
import pytest

from config_manager import load_config

from measures import (
    closed_form_1d,
    closed_form_2d,
    exact_map_1d,
    sample,
    solve_elliptic_1d,
    uniform_disk,
    uniform_interval,
)
from models import DomainSpec, EllipticCoeffs1D, NumericalFailure, PointMass, SampleSet, SweepRow, TrainConfig
from neural_map import identity_net
from risk import (
    RunArtifacts,
    decompose_excess_risk,
    disc_bound,
    discrete_ot_map,
    doubling_probe,
    example_rate,
    fit_rate,
    generalization_bound,
    holder_probe,
    j2_bound,
    j2_functional,
    ood_check,
    predicted_rate,
    rate_sweep,
    stat_bound,
    stat_term_mc,
    summarize_sweep,
    sweep_runs,
    w2_to_point,
)
from transport import w2_point_clouds

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def _desk_fit(name):
    cfg = load_config(os.path.join(CONFIGS, name))
    rows = sweep_runs(cfg.example, cfg.sample_sizes(), cfg.repeats, cfg.train, cfg.seed, cfg.val_size,
                      cfg.transport, cfg.hidden, cfg.workers)
    return summarize_sweep(rows, cfg.example)


class TestStatisticalTerms:
    def test_j2_of_uniform(self):
        assert j2_functional(uniform_interval(n_grid=10001)) == pytest.approx(1 / 6, abs=1e-8)

    def test_j2_of_closed_form(self):
        expected = (20 - 9 * math.log(3)) / 64
        assert j2_functional(closed_form_1d()) == pytest.approx(expected, abs=1e-6)

    def test_j2_needs_a_1d_density(self):
        with pytest.raises(ValueError):
            j2_functional(closed_form_2d())

    def test_bounds(self):
        uniform = uniform_interval(n_grid=10001)
        assert j2_bound(uniform, 99) == pytest.approx(math.sqrt(2 / 6 / 100), rel=1e-6)
        assert disc_bound(uniform, 99) == pytest.approx(2 * j2_bound(uniform, 99))
        assert stat_bound(2.0, 0.1, 0.2) == pytest.approx(0.8)
        assert generalization_bound(2.0, 0.1, 0.2) == pytest.approx(0.4)

    @pytest.mark.parametrize("d, slope", [(1, -0.25), (2, -0.25), (4, -0.25), (5, -0.2), (10, -0.1)])
    def test_predicted_rate(self, d, slope):
        assert predicted_rate(d) == pytest.approx(slope)

    def test_predicted_rate_dimension(self):
        with pytest.raises(ValueError):
            predicted_rate(0)

    def test_w2_to_point(self):
        assert w2_to_point(uniform_interval(), 0.5) == pytest.approx(math.sqrt(1 / 12), abs=1e-6)

    def test_stat_term_below_quantile_bound(self):
        estimate = stat_term_mc(uniform_interval(), 100, repeats=20, seed=0)
        assert 0 < estimate.mean <= j2_bound(uniform_interval(), 100)
        assert estimate.stderr > 0
        assert not estimate.approximate

    @pytest.mark.parametrize("N", [9, 99, 999])
    def test_empirical_distance_bounds(self, N):
        uniform = stat_term_mc(uniform_interval(), N, repeats=500, seed=N)
        assert uniform.mean <= 1 / math.sqrt(3 * (N + 1)) + 3 * uniform.stderr
        affine = stat_term_mc(closed_form_1d(), N, repeats=500, seed=N + 1)
        assert affine.mean <= math.sqrt((20 - 9 * math.log(3)) / (32 * (N + 1))) + 3 * affine.stderr

    def test_stat_term_on_the_disk_is_approximate(self):
        estimate = stat_term_mc(closed_form_2d(), 50, repeats=2, seed=1)
        assert estimate.approximate
        assert estimate.mean > 0

    def test_point_mass_has_no_statistical_error(self):
        estimate = stat_term_mc(PointMass((0.5,)), 1, repeats=3, seed=0)
        assert estimate.mean == 0.0

    def test_j2_quadrature_is_second_order(self):
        exact = (20 - 9 * math.log(3)) / 64
        errors = np.array([abs(j2_functional(closed_form_1d(n_grid=n)) - exact) for n in (101, 201, 401)])
        assert np.all(np.log2(errors[:-1] / errors[1:]) >= 1.9)

    def test_stat_term_nonincreasing_in_n(self):
        estimates = [stat_term_mc(closed_form_1d(), n, repeats=200, seed=n) for n in (10, 40, 160)]
        for small, large in zip(estimates, estimates[1:]):
            assert large.mean <= small.mean + 3 * math.hypot(small.stderr, large.stderr)

    def test_disk_estimate_couples_against_the_whole_reference(self):
        disk = closed_form_2d()
        estimate = stat_term_mc(disk, 40, repeats=20, seed=3)
        independent = [w2_point_clouds(sample(disk, 40, seed=500 + r), sample(disk, 40, seed=600 + r)).value
                       for r in range(20)]
        # two independent N-clouds sit about sqrt(2) further apart than one cloud and the measure
        assert estimate.mean < np.mean(independent)

    def test_stat_term_needs_repeats(self):
        with pytest.raises(ValueError):
            stat_term_mc(uniform_interval(), 10, repeats=1, seed=0)


class TestDecomposition:
    def artifacts(self, n=200, **kwargs):
        xs = sample(uniform_interval(), n, seed=3)
        ys = sample(closed_form_1d(), n, seed=4)
        return RunArtifacts(xs, ys, exact_map_1d, uniform_interval(), closed_form_1d(), **kwargs)

    def test_exact_map_has_no_optimization_or_approximation_error(self):
        report = decompose_excess_risk(self.artifacts(oracle=exact_map_1d, lipschitz=2.0),
                                       val_size=2000, seed=0, stat_repeats=2)
        assert report.eps_opt == 0.0
        assert report.eps_app == 0.0
        assert report.eps_app_l2 == 0.0
        assert report.eps_disc == pytest.approx(report.empirical_risk)
        assert report.stat_term is not None and report.stat_term > 0
        assert report.lipschitz_bound == 2.0

    def test_supplied_validation_pair(self):
        run = self.artifacts(oracle=exact_map_1d)
        report = decompose_excess_risk(run, val_size=1, seed=0, stat_repeats=0, validation=(run.xs, run.ys))
        assert report.eps_gen == 0.0
        assert report.population_risk_stderr == 0.0
        assert report.term_sum() == pytest.approx(report.empirical_risk)
        assert report.excess_risk == report.population_risk_estimate

    def test_without_oracle_only_generalization_is_known(self):
        report = decompose_excess_risk(self.artifacts(), val_size=1000, seed=1, pop_blocks=3, stat_repeats=0)
        assert report.eps_opt is None and report.eps_app is None and report.eps_disc is None
        assert report.term_sum() is None
        assert report.eps_gen == pytest.approx(report.population_risk_estimate - report.empirical_risk)
        assert "unavailable" in report.notes["eps_opt"]

    def test_network_budget(self):
        xs = sample(uniform_interval(), 50, seed=5)
        run = RunArtifacts(xs, sample(closed_form_1d(), 50, seed=6), identity_net(1, width=4),
                           uniform_interval(), closed_form_1d(), holder=(1.0, 2.0, 1.0))
        report = decompose_excess_risk(run, val_size=200, seed=2, pop_blocks=2, stat_repeats=2)
        assert report.approx_budget is not None
        assert report.approx_budget.width == 4
        # relu(x) - relu(-x): both layers have spectral norm sqrt(2)
        assert report.lipschitz_bound == pytest.approx(2.0)

    def test_discretization_error_shrinks_with_n(self):
        means = []
        for n in (100, 1000, 10_000):
            values = []
            for s in range(10):
                xs = sample(uniform_interval(), n, seed=10 * s + 1)
                ys = sample(closed_form_1d(), n, seed=10 * s + 2)
                run = RunArtifacts(xs, ys, exact_map_1d, uniform_interval(), closed_form_1d(), oracle=exact_map_1d)
                report = decompose_excess_risk(run, val_size=1, seed=s, stat_repeats=0, validation=(xs, ys))
                values.append(report.eps_disc)
            means.append(np.mean(values))
        assert means[0] > means[1] > means[2]

    def test_invalid_population_blocks(self):
        with pytest.raises(ValueError):
            decompose_excess_risk(self.artifacts(), val_size=100, seed=0, pop_blocks=0)


class TestRateFit:
    def test_exact_power_law(self):
        n_list = [100, 300, 1000, 3000]
        means = [3.0 * n ** -0.5 for n in n_list]
        fit = fit_rate(n_list, means, [0.0] * 4, repeats=5, predicted_slope=-0.25)
        assert fit.slope == pytest.approx(-0.5, abs=1e-10)
        assert fit.intercept == pytest.approx(math.log10(3.0), abs=1e-10)
        assert max(abs(r) for r in fit.residuals) < 1e-10

    def test_nonpositive_means(self):
        with pytest.raises(ValueError):
            fit_rate([10, 20], [0.1, 0.0], [0.0, 0.0], repeats=1)

    def test_summary_excludes_diverged_runs(self):
        rows = [
            SweepRow(10, 0, 0.2, 0.1, 5, 10, False, 1),
            SweepRow(10, 1, float("nan"), float("nan"), -1, 0, True, 2),
            SweepRow(100, 0, 0.1, 0.05, 5, 10, False, 3),
            SweepRow(1000, 0, 0.05, 0.01, 5, 10, False, 4),
        ]
        fit = summarize_sweep(rows, "1d")
        assert fit.excluded_runs == 1
        assert fit.means[0] == pytest.approx(0.2)
        assert fit.predicted_slope == -0.5
        assert fit.repeats == 2

    @pytest.mark.parametrize("example, slope", [("1d", -0.5), ("2d", -0.25)])
    def test_example_rate(self, example, slope):
        assert example_rate(example) == slope

    def test_example_rate_unknown(self):
        with pytest.raises(ValueError):
            example_rate("3d")

    def test_two_dimensional_summary_uses_generic_rate(self):
        rows = [SweepRow(n, 0, n ** -0.3, 0.0, 1, 1, False, i) for i, n in enumerate([10, 100, 1000])]
        fit = summarize_sweep(rows, "2d")
        assert fit.predicted_slope == -0.25
        assert fit.slope == pytest.approx(-0.3, abs=1e-10)

    def test_summary_with_no_surviving_run(self):
        rows = [SweepRow(10, 0, float("nan"), float("nan"), -1, 0, True, 1),
                SweepRow(20, 0, 0.1, 0.1, 1, 1, False, 2)]
        with pytest.raises(NumericalFailure):
            summarize_sweep(rows, "1d")

    @pytest.mark.parametrize("n_list", [[10, 20], [10, 30, 20]])
    def test_sweep_rejects_bad_sizes(self, n_list):
        with pytest.raises(ValueError):
            sweep_runs("1d", n_list, 1, TrainConfig(max_iters=1, patience=1), seed=0, val_size=10)

    def test_tiny_sweep_is_reproducible(self):
        cfg = TrainConfig(max_iters=5, patience=5)
        first = sweep_runs("1d", [4, 8, 16], 1, cfg, seed=7, val_size=200, hidden=(4,))
        second = sweep_runs("1d", [4, 8, 16], 1, cfg, seed=7, val_size=200, hidden=(4,))
        assert [row.N for row in first] == [4, 8, 16]
        assert [row.val_w2 for row in first] == [row.val_w2 for row in second]
        assert all(row.iterations == 5 for row in first)

    @pytest.mark.slow
    def test_desk_sweep_slope_is_negative(self):
        cfg = TrainConfig(max_iters=2000, patience=2000)
        fit = rate_sweep("1d", [50, 200, 800], 2, cfg, seed=0, val_size=20_000, hidden=(32, 32), workers=2)
        assert fit.slope < 0
        assert fit.excluded_runs == 0

    @pytest.mark.slow
    def test_bundled_1d_desk_sweep_rate(self):
        fit = _desk_fit("paper_1d_desk.cfg")
        assert -0.65 <= fit.slope <= -0.38

    @pytest.mark.slow
    def test_bundled_2d_desk_sweep_rate(self):
        fit = _desk_fit("paper_2d_desk.cfg")
        assert fit.slope <= -0.18


class TestDoubling:
    def test_uniform_interval_ratio_is_two(self):
        result = doubling_probe(uniform_interval(), trials=10_000, seed=0)
        assert np.all(result.ratios == 2.0)
        assert len(result.ratios) == 10_000

    def test_affine_density_ratio_is_two(self):
        # the mass of a symmetric interval under a linear density is length times the center value
        result = doubling_probe(closed_form_1d(), trials=10_000, seed=1)
        assert result.max_ratio == pytest.approx(2.0, rel=1e-6)
        assert result.max_ratio <= 6.0

    def test_uniform_disk_ratio_is_four(self):
        result = doubling_probe(uniform_disk(), trials=50, seed=2)
        assert result.max_ratio == pytest.approx(4.0, rel=1e-6)
        assert result.worst_matrix.shape == (2, 2)

    def test_closed_form_disk_is_doubling(self):
        result = doubling_probe(closed_form_2d(), trials=10_000, seed=3)
        assert 1.0 < result.max_ratio <= 16.0
        assert np.linalg.norm(result.worst_center) < 1.0

    @pytest.mark.parametrize("trials, margin", [(0, 0.01), (10, 0.5), (10, -0.1)])
    def test_invalid_arguments(self, trials, margin):
        with pytest.raises(ValueError):
            doubling_probe(uniform_interval(), trials=trials, seed=0, margin=margin)


class TestHolder:
    def test_exact_map_is_lipschitz(self):
        estimate = holder_probe(exact_map_1d, DomainSpec.interval(), pairs=5000, seed=0)
        assert 0.95 <= estimate.beta <= 1.0
        assert estimate.constant <= 2.2
        assert estimate.beta_lower <= estimate.raw_slope
        assert estimate.r_max == pytest.approx(0.2)

    def test_network_input(self):
        estimate = holder_probe(identity_net(2), DomainSpec.unit_disk(), pairs=2000, seed=1)
        assert estimate.beta == pytest.approx(1.0)
        assert estimate.constant == pytest.approx(1.0)

    def test_constant_map_has_no_estimate(self):
        with pytest.raises(ValueError, match="coincident"):
            holder_probe(lambda pts: np.zeros_like(pts), DomainSpec.interval(), pairs=100, seed=2)

    def test_discrete_map_in_1d_is_monotone(self):
        mapping = discrete_ot_map(closed_form_1d(), 200, seed=3)
        assert np.all(np.diff(mapping.source[:, 0]) > 0)
        assert np.all(np.diff(mapping.image[:, 0]) >= 0)

    def test_discrete_map_on_the_disk(self):
        mapping = discrete_ot_map(closed_form_2d(), 1024, seed=4)
        assert mapping.source.shape == mapping.image.shape == (1024, 2)
        assert np.all(np.sum(mapping.source ** 2, axis=1) <= 1.0)
        estimate = holder_probe(mapping, DomainSpec.unit_disk(), pairs=20_000, seed=5)
        assert estimate.beta_lower > 0
        assert estimate.beta <= 1.0
        assert estimate.pairs > 1000


class TestOOD:
    def clouds(self, n=2000):
        mu = sample(uniform_interval(), n, seed=10)
        nu = sample(closed_form_1d(), n, seed=11)
        nu1 = SampleSet(sample(closed_form_1d(), n, seed=12).points + 0.1, "shifted", 12)
        return mu, nu, nu1

    def test_triangle_inequality_holds_on_samples(self):
        mu, nu, nu1 = self.clouds()
        result = ood_check(exact_map_1d, mu, nu, nu1)
        assert result.slack >= -1e-12
        assert result.tolerance >= 0
        assert result.rhs == pytest.approx(result.lhs + result.slack)

    def test_known_shift(self):
        mu, nu, nu1 = self.clouds()
        result = ood_check(exact_map_1d, mu, nu, nu1, shift_w2=0.1, blocks=4)
        assert result.w2_shift == 0.1

    def test_point_mass_with_population_shift(self):
        mu, nu, _ = self.clouds(5000)
        point = sample(PointMass((0.5,)), 5000, seed=0)
        shift = w2_to_point(closed_form_1d(), 0.5)
        result = ood_check(exact_map_1d, mu, nu, point, shift_w2=shift)
        assert result.slack >= -result.tolerance
        assert result.w2_shift == shift

    def test_elliptic_target_shift(self):
        mu, nu, _ = self.clouds(5000)
        shifted = solve_elliptic_1d(EllipticCoeffs1D(a=lambda x: 1.0, b=lambda x: 0.0, c=lambda x: 0.0,
                                                     g=lambda x: 0.0, h0=0.6, h1=1.4))
        nu1 = sample(shifted, 5000, seed=13)
        for model in (exact_map_1d, identity_net(1)):
            result = ood_check(model, mu, nu, nu1)
            assert result.slack >= -result.tolerance
            assert result.w2_shift > 0

    def test_single_block_has_zero_tolerance(self):
        mu, nu, nu1 = self.clouds(100)
        assert ood_check(exact_map_1d, mu, nu, nu1, blocks=1).tolerance == 0.0

    def test_unequal_sizes(self):
        mu, nu, nu1 = self.clouds(100)
        with pytest.raises(ValueError):
            ood_check(exact_map_1d, mu, nu, SampleSet(nu1.points[:50], "short", 0))
