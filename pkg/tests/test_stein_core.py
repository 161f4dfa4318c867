import math

import numpy as np
import pytest

from tastekit.errors import ConfigError
from tastekit.numkit import Rng, mean_and_stderr
from tastekit.predictors import MlpPredictor, QuadraticPredictor
from tastekit.score_models import IsotropicGaussian
from tastekit.shift_lab import rotation_family
from tastekit.stein_core import (
    CorrectedL2Result,
    LaplacianRoute,
    ResidualOptions,
    batch_adjusted_residuals,
    first_order_apply,
    first_order_l2_corrected,
    first_order_projected,
    hutchinson_laplacian,
    langevin_apply,
    per_dimension_residuals,
    taste_functional_estimate,
)


class BiasedScore:
    """Exact score plus a constant offset; used to exercise the baseline."""

    def __init__(self, base, delta):
        self.base = base
        self.delta = np.asarray(delta, dtype=np.float64)
        self.dim = base.dim

    def score(self, x):
        return np.atleast_2d(self.base.score(x)) + self.delta

    def to_dict(self):
        return {"kind": "test-biased", "delta": self.delta.tolist()}


class TestLangevinApply:
    def test_linear_hand_value(self, linear_task_predictor, std_normal_2d):
        val = langevin_apply(linear_task_predictor, std_normal_2d, np.array([1.0, 2.0]))
        assert val == -1.0

    def test_quadratic_at_origin(self, std_normal_2d):
        quad = QuadraticPredictor(np.eye(2))
        assert langevin_apply(quad, std_normal_2d, np.zeros(2)) == 4.0

    def test_mean_zero_under_p(self, linear_task_predictor, std_normal_2d):
        pts = std_normal_2d.sample(100_000, Rng(1))
        m, se = mean_and_stderr(langevin_apply(linear_task_predictor, std_normal_2d, pts))
        assert abs(m) < 3 * se

    def test_omit_route_returns_dot_term(self, std_normal_2d):
        quad = QuadraticPredictor(np.eye(2))
        x = np.array([0.5, -0.5])
        full = langevin_apply(quad, std_normal_2d, x, route="exact")
        dot = langevin_apply(quad, std_normal_2d, x, route="omit")
        assert full - dot == pytest.approx(4.0)

    def test_route_parsing(self):
        assert LaplacianRoute.parse("hutchinson:16").probes == 16
        assert LaplacianRoute.parse("exact").kind == "exact"
        with pytest.raises(ConfigError):
            LaplacianRoute.parse("hutchinson:zero")
        with pytest.raises(ConfigError):
            LaplacianRoute.parse("cubature")

    def test_hutchinson_route_needs_rng(self, tanh_net, std_normal_2d):
        with pytest.raises(ConfigError, match="rng"):
            langevin_apply(tanh_net, std_normal_2d, np.zeros(2), route="hutchinson:4")

    def test_shortcut_route_requires_support(self, tanh_net, std_normal_2d):
        with pytest.raises(ConfigError):
            langevin_apply(tanh_net, std_normal_2d, np.zeros(2), route="shortcut")

    def test_dimension_mismatch(self, linear_task_predictor):
        with pytest.raises(ValueError, match="dimension"):
            langevin_apply(linear_task_predictor, IsotropicGaussian.standard(3),
                           np.zeros(3))


class TestHutchinson:
    def test_quadratic_trace_exact_for_every_probe_count(self, std_normal_2d):
        quad = QuadraticPredictor(np.eye(2))
        pts = std_normal_2d.sample(50, Rng(2))
        for k in (1, 4, 16, 64):
            est, per = hutchinson_laplacian(quad, pts, k, Rng(3))
            assert np.abs(est - 4.0).max() < 1e-9
            assert per.shape == (50, k)

    def test_linear_gives_zero_per_probe(self, linear_task_predictor):
        _, per = hutchinson_laplacian(linear_task_predictor, np.zeros((5, 2)), 8, Rng(4))
        assert np.abs(per).max() == 0.0

    def test_tanh_net_within_probe_stderr(self, tanh_net, std_normal_2d):
        pts = std_normal_2d.sample(20, Rng(5))
        exact = np.asarray(tanh_net.input_laplacian_exact(pts))
        est, per = hutchinson_laplacian(tanh_net, pts, 1000, Rng(6))
        se = per.std(axis=1, ddof=1) / math.sqrt(1000)
        z = np.abs(est - exact) / np.maximum(se, 1e-300)
        assert z.max() < 4.0  # max over 20 points

    def test_variance_scales_inversely_with_probes(self, tanh_net):
        x = np.array([[0.4, -0.7]])
        means = {k: [] for k in (1, 4, 16, 64)}
        for rep in range(300):
            for k in means:
                est, _ = hutchinson_laplacian(tanh_net, x, k, Rng(1000 + rep),
                                              sample_keys=np.array([rep]))
                means[k].append(est[0])
        base = np.var(means[1], ddof=1)
        for k in (4, 16, 64):
            ratio = (np.var(means[k], ddof=1) * k) / base
            assert 0.5 < ratio < 2.0, (k, ratio)

    def test_fd_mode_matches_exact_mode(self, tanh_net, std_normal_2d):
        pts = std_normal_2d.sample(30, Rng(7))
        est_fd, _ = hutchinson_laplacian(tanh_net, pts, 6, Rng(8), hvp_mode="fd")
        est_ex, _ = hutchinson_laplacian(tanh_net, pts, 6, Rng(8), hvp_mode="exact")
        assert np.abs(est_fd - est_ex).max() < 1e-6

    def test_probe_noise_is_keyed_per_sample(self, tanh_net, std_normal_2d):
        # The probe draws for a sample depend only on (seed, sample key),
        # not on which batch the sample arrives in.
        from tastekit.numkit import rademacher_block, substream_seeds

        pts = std_normal_2d.sample(10, Rng(9))
        est_all, _ = hutchinson_laplacian(tanh_net, pts, 4, Rng(10))
        est_tail, _ = hutchinson_laplacian(tanh_net, pts[6:], 4, Rng(10),
                                           sample_keys=np.arange(6, 10))
        assert np.allclose(est_all[6:], est_tail, rtol=0, atol=1e-12)
        probes_all = rademacher_block(substream_seeds(10, np.arange(10)), 8)
        probes_tail = rademacher_block(substream_seeds(10, np.arange(6, 10)), 8)
        assert np.array_equal(probes_all[6:], probes_tail)


class TestPerDimension:
    def test_hand_values(self, linear_task_predictor, std_normal_2d):
        vals = per_dimension_residuals(linear_task_predictor, std_normal_2d,
                                       np.array([[1.0, 2.0]]))
        assert np.allclose(vals, [[1.0, -2.0]])
        assert vals.sum() == pytest.approx(-1.0)

    def test_rows_sum_to_scalar_residual(self, tanh_net, std_normal_2d):
        pts = std_normal_2d.sample(500, Rng(11))
        per_dim = per_dimension_residuals(tanh_net, std_normal_2d, pts)
        scalar = langevin_apply(tanh_net, std_normal_2d, pts)
        assert np.abs(per_dim.sum(axis=1) - scalar).max() < 1e-9

    def test_component_means_vanish_under_p(self, linear_task_predictor, std_normal_2d):
        pts = std_normal_2d.sample(100_000, Rng(12))
        per_dim = per_dimension_residuals(linear_task_predictor, std_normal_2d, pts)
        for i in range(2):
            m, se = mean_and_stderr(per_dim[:, i])
            assert abs(m) < 3 * se


class TestBatchAdjustedResiduals:
    def test_no_baseline_branch_is_passthrough(self, linear_task_predictor, std_normal_2d):
        pts = std_normal_2d.sample(50, Rng(13))
        batch, cal = batch_adjusted_residuals(
            pts, None, linear_task_predictor, std_normal_2d,
            ResidualOptions(compute_baseline=False), Rng(14))
        assert np.array_equal(batch.raw, batch.adjusted)
        assert cal.d_f == 0.0 and cal.n_calibration == 0

    def test_baseline_requires_calibration(self, linear_task_predictor, std_normal_2d):
        with pytest.raises(ConfigError, match="calibration"):
            batch_adjusted_residuals(np.zeros((5, 2)), None, linear_task_predictor,
                                     std_normal_2d, ResidualOptions(), Rng(15))

    def test_exact_score_baseline_vanishes(self, linear_task_predictor, std_normal_2d):
        batch, cal = batch_adjusted_residuals(
            std_normal_2d.sample(100, Rng(16)), std_normal_2d.sample(100_000, Rng(17)),
            linear_task_predictor, std_normal_2d, ResidualOptions(), Rng(18))
        assert abs(cal.d_f) < 3 * cal.d_f_stderr

    def test_biased_score_baseline_converges(self, linear_task_predictor, std_normal_2d):
        biased = BiasedScore(std_normal_2d, [1.0, 0.0])
        batch, cal = batch_adjusted_residuals(
            std_normal_2d.sample(100, Rng(19)), std_normal_2d.sample(80_000, Rng(20)),
            linear_task_predictor, biased, ResidualOptions(), Rng(21))
        assert cal.d_f == pytest.approx(-1.0, abs=3 * cal.d_f_stderr)

    def test_outputs_independent_of_batch_size(self, tanh_net, std_normal_2d):
        test = std_normal_2d.sample(700, Rng(22))
        cal = std_normal_2d.sample(300, Rng(23))
        results = []
        for bs in (7, 128, 4096):
            batch, baseline = batch_adjusted_residuals(
                test, cal, tanh_net, std_normal_2d,
                ResidualOptions(route="hutchinson:4", batch_size=bs), Rng(24))
            results.append((batch.adjusted, baseline.d_f))
        for adjusted, d_f in results[1:]:
            assert np.array_equal(adjusted, results[0][0])
            assert d_f == results[0][1]

    def test_per_dimension_mode(self, tanh_net, std_normal_2d):
        batch, cal = batch_adjusted_residuals(
            std_normal_2d.sample(40, Rng(25)), std_normal_2d.sample(200, Rng(26)),
            tanh_net, std_normal_2d, ResidualOptions(per_dimension=True), Rng(27))
        assert batch.per_dimension_raw.shape == (40, 2)
        assert cal.per_dimension.shape == (2,)
        assert np.allclose(batch.per_dimension_adjusted,
                           batch.per_dimension_raw - cal.per_dimension)
        assert np.abs(batch.per_dimension_raw.sum(axis=1) - batch.raw).max() < 1e-9

    def test_per_dimension_rejects_stochastic_route(self, tanh_net, std_normal_2d):
        with pytest.raises(ConfigError, match="exact route"):
            batch_adjusted_residuals(np.zeros((5, 2)), np.zeros((5, 2)), tanh_net,
                                     std_normal_2d,
                                     ResidualOptions(route="hutchinson:4",
                                                     per_dimension=True), Rng(28))

    def test_provenance_ids_present(self, tanh_net, std_normal_2d):
        batch, _ = batch_adjusted_residuals(
            np.zeros((3, 2)), None, tanh_net, std_normal_2d,
            ResidualOptions(compute_baseline=False), Rng(29))
        assert len(batch.provenance["predictor_id"]) == 12
        assert batch.provenance["seed"] == 29

    def test_batch_and_baseline_serialise_to_json(self, tanh_net, std_normal_2d):
        import json

        from tastekit.reportio import jsonable

        batch, cal = batch_adjusted_residuals(
            std_normal_2d.sample(10, Rng(50)), std_normal_2d.sample(30, Rng(51)),
            tanh_net, std_normal_2d, ResidualOptions(per_dimension=True), Rng(52))
        payload = json.dumps(jsonable(batch.to_dict()), sort_keys=True)
        assert '"per_dimension_raw"' in payload
        cal_payload = json.loads(json.dumps(jsonable(cal.to_dict())))
        assert cal_payload["n_calibration"] == 30
        assert len(cal_payload["per_dimension"]) == 2


class TestTasteFunctional:
    def test_no_shift_estimate_near_zero(self, linear_task_predictor, std_normal_2d):
        batch, _ = batch_adjusted_residuals(
            std_normal_2d.sample(50_000, Rng(30)), None, linear_task_predictor,
            std_normal_2d, ResidualOptions(compute_baseline=False), Rng(31))
        est, se = taste_functional_estimate(batch)
        assert abs(est) < 3 * se

    def test_mean_shift_closed_form(self, linear_task_predictor, std_normal_2d):
        q = IsotropicGaussian([2.0, 0.0], 1.0)
        batch, _ = batch_adjusted_residuals(
            q.sample(50_000, Rng(32)), None, linear_task_predictor, std_normal_2d,
            ResidualOptions(compute_baseline=False), Rng(33))
        est, se = taste_functional_estimate(batch)
        assert est == pytest.approx(2.0, abs=3 * se)

    def test_single_sample_flagged(self, linear_task_predictor, std_normal_2d):
        batch, _ = batch_adjusted_residuals(
            np.array([[1.0, 2.0]]), None, linear_task_predictor, std_normal_2d,
            ResidualOptions(compute_baseline=False), Rng(34))
        est, se = taste_functional_estimate(batch)
        assert est == -1.0 and se is None


class TestFirstOrder:
    def test_hand_value_at_origin(self, linear_task_predictor, std_normal_2d):
        assert np.allclose(first_order_apply(linear_task_predictor, std_normal_2d,
                                             np.zeros(2)), [-1.0, 1.0])

    def test_constant_predictor_returns_score(self, std_normal_2d):
        const = MlpPredictor.linear([0.0, 0.0], b=1.0)
        pts = Rng(35).normal((10, 2))
        assert np.allclose(first_order_apply(const, std_normal_2d, pts),
                           std_normal_2d.score(pts))

    def test_componentwise_mean_zero_under_p(self, linear_task_predictor, std_normal_2d):
        pts = std_normal_2d.sample(100_000, Rng(36))
        field = first_order_apply(linear_task_predictor, std_normal_2d, pts)
        for i in range(2):
            m, se = mean_and_stderr(field[:, i])
            assert abs(m) < 3 * se

    def test_projection_hand_value(self, linear_task_predictor, std_normal_2d):
        assert first_order_projected(linear_task_predictor, std_normal_2d,
                                     np.zeros(2), [1.0, 1.0]) == 0.0

    def test_projection_rejects_zero_direction(self, linear_task_predictor, std_normal_2d):
        with pytest.raises(ValueError, match="non-zero"):
            first_order_projected(linear_task_predictor, std_normal_2d,
                                  np.zeros(2), [0.0, 0.0])

    def test_projection_mean_zero_under_p(self, linear_task_predictor, std_normal_2d):
        pts = std_normal_2d.sample(50_000, Rng(37))
        vals = first_order_projected(linear_task_predictor, std_normal_2d, pts,
                                     [1.0, 1.0])
        m, se = mean_and_stderr(vals)
        assert abs(m) < 3 * se

    def test_projection_closed_form_on_rotating_shift(self, linear_task_predictor,
                                                      std_normal_2d):
        eps = 10.0
        for theta, expected in ((0.0, 100.0), (math.pi / 4, 0.0)):
            q = IsotropicGaussian(eps * np.array([math.cos(theta), math.sin(theta)]), 1.0)
            vals = first_order_projected(linear_task_predictor, std_normal_2d,
                                         q.sample(20_000, Rng(38)), [1.0, 1.0])
            m, se = mean_and_stderr(vals)
            assert m == pytest.approx(expected, abs=3 * se)

    def test_l2_norm_positive_without_correction(self, linear_task_predictor,
                                                 std_normal_2d):
        pts = std_normal_2d.sample(20_000, Rng(39))
        sq = (first_order_apply(linear_task_predictor, std_normal_2d, pts) ** 2).sum(axis=1)
        m, se = mean_and_stderr(sq)
        assert m > 10 * se

    def test_l2_corrected_null_near_zero(self, linear_task_predictor, std_normal_2d):
        res = first_order_l2_corrected(std_normal_2d.sample(20_000, Rng(40)),
                                       std_normal_2d.sample(20_000, Rng(41)),
                                       linear_task_predictor, std_normal_2d)
        assert isinstance(res, CorrectedL2Result)
        assert abs(res.value) < 3 * res.stderr

    def test_l2_corrected_positive_at_projected_blind_angle(self, linear_task_predictor,
                                                            std_normal_2d):
        blind = rotation_family(10.0, 0.0, base_direction=[1.0, 1.0])
        res = first_order_l2_corrected(blind.sample(20_000, Rng(42)),
                                       std_normal_2d.sample(20_000, Rng(43)),
                                       linear_task_predictor, std_normal_2d)
        assert res.value > 3 * res.stderr
