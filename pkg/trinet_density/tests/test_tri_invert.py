import numpy as np
import pytest
from errors import NotInvertibleError, SampleRejectionError, ToleranceNotReachedError
from tri_core import FlowModel, TriUnit, flow_forward, init_flow, softplus_inverse, unit_forward
from tri_invert import SolveStatus, invert_flow, invert_flow_batch, invert_unit, sample


def scalar_unit(nonlinearity="tanh", u=1.0, v=1.0, a=0.0, b=0.0) -> TriUnit:
    return TriUnit(
        packed=[[softplus_inverse(u)]],
        v_diag_raw=[softplus_inverse(v)],
        a=[a],
        b=[b],
        nonlinearity=nonlinearity,
    )


def single_layer(unit: TriUnit) -> FlowModel:
    return FlowModel(layers=(unit,), flip_after=(False,))


class TestInvertUnit:
    @pytest.mark.parametrize("kind", ["log", "tanh"])
    def test_round_trip(self, make_flow, rng, kind):
        unit = make_flow(4, 3, n_layers=1, nonlinearity=kind, seed=2).layers[0]
        x = rng.standard_normal((50, 4))
        recovered = invert_unit(unit, unit_forward(unit, x)[0])
        assert np.max(np.abs(recovered - x)) < 1e-8

    def test_vector_shape(self, make_flow, rng):
        unit = make_flow(3, 2, n_layers=1).layers[0]
        x = rng.standard_normal(3)
        recovered = invert_unit(unit, unit_forward(unit, x)[0])
        assert recovered.shape == (3,)
        np.testing.assert_allclose(recovered, x, atol=1e-8)

    def test_out_of_range_tanh_target(self):
        with pytest.raises(NotInvertibleError) as info:
            invert_unit(scalar_unit("tanh"), np.array([1.5]))
        assert info.value.layer == 0
        assert info.value.dim == 0

    def test_odd_log_unit_maps_zero_to_zero(self):
        x = invert_unit(scalar_unit("log", u=0.7, v=1.3), np.array([0.0]))
        np.testing.assert_allclose(x, [0.0], atol=1e-12)

    def test_known_scalar_root(self):
        # y = log(1 + x) for x >= 0
        x = invert_unit(scalar_unit("log"), np.array([np.log(4.0)]))
        np.testing.assert_allclose(x, [3.0], atol=1e-9)


class TestInvertFlow:
    def test_round_trip(self, make_flow, rng):
        model = make_flow(4, 2, n_layers=4, nonlinearity="log", seed=11)
        x = rng.standard_normal((1000, 4))
        y, _, _ = flow_forward(model, x)
        assert np.max(np.abs(invert_flow(model, y) - x)) < 1e-6

    def test_round_trip_without_flips(self, make_flow, rng):
        model = make_flow(3, 2, n_layers=3, flip=False, seed=12)
        x = rng.standard_normal((100, 3))
        y, _, _ = flow_forward(model, x)
        assert np.max(np.abs(invert_flow(model, y) - x)) < 1e-6

    def test_failure_reports_top_layer_first(self, make_flow):
        model = make_flow(2, 2, n_layers=3, nonlinearity="tanh", seed=1)
        with pytest.raises(NotInvertibleError, match="^layer 2: ") as info:
            invert_flow(model, np.array([50.0, 50.0]))
        assert info.value.layer == 2

    def test_iteration_cap(self, make_flow, rng):
        model = make_flow(2, 2, n_layers=2)
        y, _, _ = flow_forward(model, rng.standard_normal(2))
        with pytest.raises(ToleranceNotReachedError):
            invert_flow(model, y, max_iter=3)

    def test_tolerance_must_be_positive(self, make_flow):
        with pytest.raises(ValueError, match="positive"):
            invert_flow_batch(make_flow(2, 2), np.zeros(2), tol=0.0)


class TestInvertFlowBatch:
    def test_iterations_bounded_by_bracket(self, rng):
        tol = 1e-10
        model = init_flow(3, 4, n_layers=3, nonlinearity="log", seed=5)
        y, _, _ = flow_forward(model, 2.0 * rng.standard_normal((40, 3)))
        result = invert_flow_batch(model, y, tol=tol)
        assert result.ok.all()
        bound = 2 + np.ceil(np.log2(result.bracket_width / tol))
        assert np.all(result.iterations <= bound)
        assert np.all(result.iterations > 0)

    def test_newton_agrees_with_bisection(self, make_flow, rng):
        model = make_flow(3, 3, n_layers=3, seed=9)
        y, _, _ = flow_forward(model, rng.standard_normal((30, 3)))
        plain = invert_flow_batch(model, y)
        newton = invert_flow_batch(model, y, newton=True)
        np.testing.assert_allclose(newton.x, plain.x, atol=1e-8)
        assert np.all(newton.residual < 1e-8)

    def test_failed_rows_do_not_spoil_the_batch(self):
        unit = scalar_unit("tanh", u=1.0, v=1.0)
        y = np.array([[0.2], [1.5], [-0.9], [-2.0]])
        model = single_layer(unit)
        result = invert_flow_batch(model, y)
        np.testing.assert_array_equal(result.ok, [True, False, True, False])
        np.testing.assert_array_equal(result.status[~result.ok], SolveStatus.NOT_INVERTIBLE)
        np.testing.assert_array_equal(result.failed_layer, [-1, 0, -1, 0])
        assert np.all(np.isnan(result.x[~result.ok]))
        np.testing.assert_allclose(result.x[result.ok, 0], np.arctanh([0.2, -0.9]), atol=1e-9)
        assert np.all(result.residual[result.ok] < 1e-9)

    def test_residual_is_small(self, make_flow, rng):
        model = make_flow(2, 4, n_layers=2, seed=3)
        y, _, _ = flow_forward(model, rng.standard_normal((20, 2)))
        assert np.all(invert_flow_batch(model, y).residual < 1e-9)


class TestSample:
    def test_deterministic_and_batch_independent(self, make_flow):
        model = make_flow(2, 2, n_layers=2)
        first, _ = sample(model, 20, seed=4)
        second, _ = sample(model, 20, seed=4)
        head, _ = sample(model, 5, seed=4)
        np.testing.assert_array_equal(first, second)
        np.testing.assert_allclose(first[:5], head, atol=1e-9)

    def test_seed_changes_samples(self, make_flow):
        model = make_flow(2, 2, n_layers=2)
        assert not np.allclose(sample(model, 10, seed=1)[0], sample(model, 10, seed=2)[0])

    def test_forward_recovers_base_draws(self, make_flow):
        model = make_flow(3, 2, n_layers=3, seed=6)
        samples, rejected = sample(model, 25, seed=8)
        draws = np.vstack([np.random.default_rng([8, i]).standard_normal(3) for i in range(25)])
        y, _, _ = flow_forward(model, samples)
        assert rejected == 0
        np.testing.assert_allclose(y, draws, atol=1e-8)

    def test_zero_count(self, make_flow):
        samples, rejected = sample(make_flow(3, 2), 0, seed=0)
        assert samples.shape == (0, 3)
        assert rejected == 0

    def test_negative_count(self, make_flow):
        with pytest.raises(ValueError, match="non-negative"):
            sample(make_flow(2, 2), -1, seed=0)

    def test_wide_tanh_range_redraws(self):
        model = single_layer(scalar_unit("tanh", v=1.5))
        samples, rejected = sample(model, 200, seed=0)
        assert rejected > 0
        assert np.all(np.isfinite(samples))

    def test_narrow_tanh_range_aborts(self):
        model = single_layer(scalar_unit("tanh", v=0.5))
        with pytest.raises(SampleRejectionError):
            sample(model, 200, seed=0)
