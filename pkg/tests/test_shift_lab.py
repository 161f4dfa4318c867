import math

import numpy as np
import pytest

from oracles import fd_gradient
from tastekit.errors import NumericalError
from tastekit.numkit import Rng, mean_and_stderr
from tastekit.predictors import MlpPredictor
from tastekit.score_models import (
    GaussianMixture,
    IsotropicGaussian,
    Potential,
    TiltedScore,
)
from tastekit.shift_lab import (
    MixtureDistribution,
    density_ratio,
    directional_decomposition_check,
    fisher_bound_check,
    mean_shift_family,
    mixture_build,
    projection_identity_check,
    rotation_family,
    rotation_sweep,
    tilt_slope_check,
    tilt_variance_check,
)
from tastekit.stein_core import langevin_apply, first_order_projected


class LinearBiasScore:
    """s(x) = s_p(x) + (b x1, 0): a state-dependent score error."""

    def __init__(self, base, b):
        self.base = base
        self.b = float(b)
        self.dim = base.dim

    def score(self, x):
        out = np.atleast_2d(self.base.score(x)).copy()
        out[:, 0] += self.b * np.atleast_2d(x)[:, 0]
        return out

    def to_dict(self):
        return {"kind": "test-linear-bias", "b": self.b}


def predictor_matrix():
    return [
        ("linear", MlpPredictor.linear([-1.0, 1.0])),
        ("tanh", MlpPredictor.build(2, [24], "tanh", Rng(5))),
        ("softplus", MlpPredictor.build(2, [16], "softplus", Rng(6))),
    ]


def base_matrix():
    return [
        ("gauss", IsotropicGaussian.standard(2)),
        ("mixture", GaussianMixture([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.8, 1.2])),
    ]


class TestProjectionIdentity:
    def test_no_shift_both_sides_vanish(self, linear_task_predictor, std_normal_2d):
        rep = projection_identity_check(linear_task_predictor, std_normal_2d,
                                        std_normal_2d, 20_000, Rng(1))
        assert abs(rep.lhs) < 3 * rep.lhs_stderr
        assert rep.rhs == 0.0

    def test_gaussian_mean_shift_closed_form(self, linear_task_predictor, std_normal_2d):
        q = IsotropicGaussian([2.0, 0.0], 1.0)
        rep = projection_identity_check(linear_task_predictor, std_normal_2d, q,
                                        50_000, Rng(2))
        assert rep.lhs == pytest.approx(2.0, abs=3 * rep.lhs_stderr)
        assert rep.rhs == pytest.approx(2.0, abs=1e-12)
        assert rep.within(3.0)

    def test_rotation_family_closed_form(self, linear_task_predictor, std_normal_2d):
        q = rotation_family(10.0, math.pi / 2)
        rep = projection_identity_check(linear_task_predictor, std_normal_2d, q,
                                        50_000, Rng(3))
        assert rep.lhs == pytest.approx(-10 * math.sqrt(2), abs=3 * rep.lhs_stderr)
        assert rep.within(3.0)

    def test_full_matrix_within_three_sigma(self):
        combos = 0
        for i, (_, predictor) in enumerate(predictor_matrix()):
            for j, (_, base) in enumerate(base_matrix()):
                shifted = mean_shift_family(base, [1.5, -0.5])
                tilted = TiltedScore(base, Potential.linear([0.5, -0.7]), 0.4).resolve()
                for k, q in enumerate((shifted, tilted)):
                    rep = projection_identity_check(
                        predictor, base, q, 30_000, Rng(800 + 100 * i + 10 * j + k))
                    assert rep.within(3.0), rep.to_dict()
                    combos += 1
        assert combos >= 12


class TestRotationSweep:
    def test_exact_predictor_matches_closed_form(self, linear_task_predictor):
        phis = [0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4, math.pi, 3 * math.pi / 2]
        rows = rotation_sweep(linear_task_predictor, phis, Rng(4), n_per_angle=4000)
        for row in rows:
            closed = -10.0 * math.sqrt(2.0) * math.sin(row.phi)
            assert row.taste == pytest.approx(closed, abs=3 * row.taste_stderr)
        by_phi = {row.phi: row.taste for row in rows}
        assert by_phi[math.pi / 2] == pytest.approx(-14.142, abs=0.15)
        assert by_phi[3 * math.pi / 2] == pytest.approx(14.142, abs=0.15)

    def test_exact_predictor_has_zero_task_error(self, linear_task_predictor):
        rows = rotation_sweep(linear_task_predictor, [0.0, 1.0], Rng(5), n_per_angle=500)
        assert all(row.mse < 1e-24 for row in rows)

    def test_log_likelihood_flat_across_angles(self, linear_task_predictor):
        phis = [2 * math.pi * k / 8 for k in range(8)]
        rows = rotation_sweep(linear_task_predictor, phis, Rng(6), n_per_angle=2000)
        values = [r.loglik for r in rows]
        lo, hi = min(values), max(values)
        se = math.hypot(rows[values.index(lo)].loglik_stderr,
                        rows[values.index(hi)].loglik_stderr)
        assert hi - lo < 3 * se

    def test_taste_argmax_sits_on_sensitive_angle(self, linear_task_predictor):
        # The closed form |mu1 - mu2| peaks at both pi/2 and 3 pi/2; the
        # estimated argmax must land on that extremal set.
        phis = [2 * math.pi * k / 16 for k in range(16)]
        rows = rotation_sweep(linear_task_predictor, phis, Rng(7), n_per_angle=2000)
        taste = [abs(r.taste) for r in rows]
        assert phis[taste.index(max(taste))] in (math.pi / 2, 3 * math.pi / 2)


class TestTiltExpansions:
    def test_aligned_slope_matches_covariance(self, linear_task_predictor, std_normal_2d):
        rep = tilt_slope_check(linear_task_predictor, std_normal_2d,
                               Potential.linear([1.0, 0.0]),
                               [0.01, 0.02, 0.05], 20_000, Rng(8))
        # Cov(x1 - x2, x1) = 1; coupled draws make the response exactly linear.
        assert rep.lhs == pytest.approx(1.0, abs=1e-10)
        assert rep.rhs == pytest.approx(1.0, abs=3 * rep.rhs_stderr)
        assert abs(rep.lhs - rep.rhs) <= max(0.05 * abs(rep.rhs), 3 * rep.combined_stderr)

    def test_orthogonal_tilt_slope_vanishes(self, linear_task_predictor, std_normal_2d):
        rep = tilt_slope_check(linear_task_predictor, std_normal_2d,
                               Potential.linear([1.0, 1.0]),
                               [0.01, 0.02, 0.05], 20_000, Rng(9))
        assert abs(rep.lhs) < 1e-10
        assert abs(rep.rhs) < 3 * rep.rhs_stderr

    def test_snis_branch_for_quadratic_tilt(self, std_normal_2d, tanh_net):
        rep = tilt_slope_check(tanh_net, std_normal_2d,
                               Potential.quadratic(np.array([[0.3, 0.0], [0.0, -0.2]])),
                               [0.02, 0.05], 30_000, Rng(10))
        assert rep.extras["coupled_draws"] is False
        assert rep.within(3.0)

    def test_zero_strength_tilt_is_the_base(self, std_normal_2d):
        tilt = TiltedScore(std_normal_2d, Potential.linear([1.0, 0.0]), 0.0)
        resolved = tilt.resolve()
        assert np.array_equal(resolved.mean, std_normal_2d.mean)
        assert resolved.variance == std_normal_2d.variance

    def test_variance_closed_form_and_flatness(self, linear_task_predictor, std_normal_2d):
        rep = tilt_variance_check(linear_task_predictor, std_normal_2d,
                                  Potential.linear([1.0, 0.0]), 0.05, 50_000, Rng(11))
        # Var_p(x1 - x2) = 2, and a mean shift leaves it unchanged at any eps.
        assert rep.extras["var_p"] == pytest.approx(2.0, abs=0.1)
        assert rep.lhs == pytest.approx(2.0, abs=3 * rep.lhs_stderr)
        assert rep.within(3.0)


class TestDecomposition:
    def test_constant_bias_reduces_to_corrected_functional(self, linear_task_predictor,
                                                           std_normal_2d):
        biased = TiltedScore(std_normal_2d, Potential.linear([1.0, 0.0]), 1.0)
        q = IsotropicGaussian([0.5, 0.0], 1.0)
        rep = directional_decomposition_check(linear_task_predictor, std_normal_2d,
                                              q, biased, 100_000, Rng(12))
        assert rep.within(3.0)
        t3, t3_se = rep.extras["score_error_term"]
        assert abs(t3) < 3 * t3_se  # constant g: E_p[g (l - 1)] = 0

    def test_linear_bias_closed_form(self, linear_task_predictor, std_normal_2d):
        biased = LinearBiasScore(std_normal_2d, 0.5)
        q = IsotropicGaussian([2.0, 0.0], 1.0)
        rep = directional_decomposition_check(linear_task_predictor, std_normal_2d,
                                              q, biased, 100_000, Rng(13))
        assert rep.within(3.0)
        t3, t3_se = rep.extras["score_error_term"]
        assert t3 == pytest.approx(-1.0, abs=3 * t3_se)

    def test_no_shift_all_terms_vanish(self, linear_task_predictor, std_normal_2d):
        biased = LinearBiasScore(std_normal_2d, 0.5)
        rep = directional_decomposition_check(linear_task_predictor, std_normal_2d,
                                              std_normal_2d, biased, 50_000, Rng(14))
        t2, t2_se = rep.extras["exact_score_term"]
        t3, t3_se = rep.extras["score_error_term"]
        assert abs(t2) <= 3 * t2_se
        # l = 1 identically here, so the error term is exactly zero.
        assert t3 == 0.0 and t3_se == 0.0

    def test_density_ratio_requires_closed_form(self, linear_task_predictor,
                                                std_normal_2d):
        class NoDensity:
            dim = 2
            def score(self, x):
                return np.zeros_like(np.atleast_2d(x))
            def sample(self, n, rng):
                return rng.normal((n, 2))
        with pytest.raises(NumericalError, match="density ratio"):
            directional_decomposition_check(linear_task_predictor, std_normal_2d,
                                            NoDensity(), std_normal_2d, 1000, Rng(15))


class TestFisherBound:
    def test_exact_score_gives_zero_both_sides(self, linear_task_predictor,
                                               std_normal_2d):
        q = IsotropicGaussian([0.5, 0.0], 1.0)
        rep = fisher_bound_check(linear_task_predictor, std_normal_2d, q,
                                 std_normal_2d, 10_000, Rng(16))
        assert rep.lhs == 0.0 and rep.rhs == 0.0
        assert rep.extras["bound_holds"]

    def test_constant_bias_slack_bound(self, linear_task_predictor, std_normal_2d):
        biased = TiltedScore(std_normal_2d, Potential.linear([1.0, 0.0]), 1.0)
        q = IsotropicGaussian([0.5, 0.0], 1.0)
        rep = fisher_bound_check(linear_task_predictor, std_normal_2d, q, biased,
                                 100_000, Rng(17))
        assert abs(rep.lhs) < 3 * rep.lhs_stderr
        assert rep.rhs > 0.5
        assert rep.extras["bound_holds"]

    def test_linear_bias_unit_lhs(self, linear_task_predictor, std_normal_2d):
        biased = LinearBiasScore(std_normal_2d, 0.5)
        q = IsotropicGaussian([2.0, 0.0], 1.0)
        rep = fisher_bound_check(linear_task_predictor, std_normal_2d, q, biased,
                                 100_000, Rng(18))
        assert rep.lhs == pytest.approx(1.0, abs=3 * rep.lhs_stderr)
        assert rep.extras["bound_holds"]


class TestMixtures:
    def test_all_in_distribution(self, std_normal_2d):
        q = IsotropicGaussian([5.0, 5.0], 1.0)
        _, labels = mixture_build(std_normal_2d, q, 0.0, 25, Rng(19))
        assert labels.sum() == 0

    def test_all_out_of_distribution(self, std_normal_2d):
        q = IsotropicGaussian([5.0, 5.0], 1.0)
        _, labels = mixture_build(std_normal_2d, q, 1.0, 25, Rng(20))
        assert labels.sum() == 25

    def test_exact_rounded_count(self, std_normal_2d):
        q = IsotropicGaussian([5.0, 5.0], 1.0)
        _, labels = mixture_build(std_normal_2d, q, 0.2, 10, Rng(21))
        assert labels.sum() == 2

    def test_mixture_distribution_score_matches_fd(self, std_normal_2d):
        q = IsotropicGaussian([2.0, -1.0], 1.5)
        mix = MixtureDistribution(std_normal_2d, q, 0.3)
        x = np.array([0.7, -0.3])
        fd = fd_gradient(lambda z: float(np.atleast_1d(mix.log_density(z))[0]), x, 1e-5)
        assert np.abs(mix.score(x) - fd).max() < 1e-5

    def test_zero_fraction_is_the_in_distribution(self, std_normal_2d):
        mix = MixtureDistribution(std_normal_2d, IsotropicGaussian([3.0, 3.0], 1.0), 0.0)
        pts = Rng(22).normal((10, 2))
        assert np.allclose(mix.log_density(pts), std_normal_2d.log_density(pts))

    def test_density_ratio_closed_form(self, std_normal_2d):
        q = IsotropicGaussian([1.0, 0.0], 1.0)
        pts = Rng(23).normal((1000, 2))
        expected = np.exp(pts[:, 0] - 0.5)
        assert np.allclose(density_ratio(std_normal_2d, q, pts), expected)


class TestBlindSpotContrast:
    def test_projected_operator_blind_but_full_operator_sees(self, linear_task_predictor,
                                                             std_normal_2d):
        # theta = 3 pi / 4: shift along (-1, 1), i.e. exactly along grad f.
        eps = 10.0
        theta = 3 * math.pi / 4
        q = IsotropicGaussian(eps * np.array([math.cos(theta), math.sin(theta)]), 1.0)
        pts = q.sample(20_000, Rng(24))
        fo, fo_se = mean_and_stderr(first_order_projected(
            linear_task_predictor, std_normal_2d, pts, [1.0, 1.0]))
        lv, lv_se = mean_and_stderr(langevin_apply(
            linear_task_predictor, std_normal_2d, pts))
        assert abs(fo) < 3 * fo_se
        assert abs(lv) > 10 * lv_se
        assert lv == pytest.approx(-10 * math.sqrt(2), abs=3 * lv_se)
