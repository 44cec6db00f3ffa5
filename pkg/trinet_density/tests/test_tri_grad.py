import itertools

import numpy as np
import pytest
from errors import DivergenceError
from tri_core import FlowModel, TriUnit, flow_forward, init_flow, nll
from tri_grad import (
    GradientSet,
    backward,
    batch_nll_gradient,
    finite_diff_check,
    l1_subgradient,
    nll_backward,
    relative_error,
)

# N in {1, 2, 3, 5}, B in {1, 2, 4}, L in {1, 2, 3}, both nonlinearities and flip settings
ORACLE_CASES = [
    (n_dim, block_size, n_layers, ("log", "tanh")[case % 2], (case // 2) % 2 == 0)
    for case, (n_dim, block_size, n_layers) in enumerate(
        itertools.product((1, 2, 3, 5), (1, 2, 4), (1, 2, 3))
    )
]


def mean_nll(model: FlowModel, x: np.ndarray) -> float:
    y, logdet, _ = flow_forward(model, x)
    return float(np.mean(nll(y, logdet)))


@pytest.mark.parametrize(("n_dim", "block_size", "n_layers", "kind", "flips"), ORACLE_CASES)
def test_gradient_matches_finite_differences(make_flow, n_dim, block_size, n_layers, kind, flips):
    seed = 100 * n_dim + 10 * block_size + n_layers
    model = make_flow(n_dim, block_size, n_layers, kind, flips, seed=seed)
    x = np.random.default_rng(seed).standard_normal(n_dim)
    assert finite_diff_check(model, x, eps=1e-5) < 1e-4


def test_gradient_on_a_batch(make_flow, rng):
    model = make_flow(3, 2, n_layers=2, seed=21)
    assert finite_diff_check(model, rng.standard_normal((5, 3)), eps=1e-5) < 1e-4


def test_output_bias_gradient_is_output():
    unit = TriUnit(packed=[[0.3]], v_diag_raw=[-0.2], a=[0.1], b=[0.4], nonlinearity="tanh")
    model = FlowModel(layers=(unit,), flip_after=(False,))
    y, _, trace = flow_forward(model, np.array([0.8]))
    grads = nll_backward(model, trace, y)
    np.testing.assert_allclose(grads.layers[0].d_b, y, rtol=1e-15)


def test_output_bias_gradient_is_batch_mean(make_flow, rng):
    model = make_flow(3, 2, n_layers=1, flip=False)
    y, _, trace = flow_forward(model, rng.standard_normal((8, 3)))
    grads = nll_backward(model, trace, y)
    np.testing.assert_allclose(grads.layers[0].d_b, y.mean(axis=0), rtol=1e-12)


def test_initialized_model_at_origin():
    model = init_flow(2, 1, n_layers=1)
    x = np.zeros(2)
    y, _, trace = flow_forward(model, x)
    grads = nll_backward(model, trace, y)
    np.testing.assert_allclose(grads.layers[0].d_b, y, atol=1e-15)
    assert finite_diff_check(model, x, eps=1e-5) < 1e-4


def test_large_step_degrades_the_oracle(make_flow, rng):
    model = make_flow(3, 2, n_layers=2, seed=31)
    x = rng.standard_normal(3)
    assert finite_diff_check(model, x, eps=1e-1) > finite_diff_check(model, x, eps=1e-5)


def test_subset_of_coordinates(make_flow, rng):
    model = make_flow(4, 2, n_layers=2, seed=5)
    x = rng.standard_normal(4)
    assert finite_diff_check(model, x, max_coords=20) <= finite_diff_check(model, x)


def test_batch_gradient_is_mean_of_rows(make_flow, rng):
    model = make_flow(3, 2, n_layers=3, seed=8)
    batch = rng.standard_normal((6, 3))
    y, _, trace = flow_forward(model, batch)
    together = nll_backward(model, trace, y).arrays()

    rows = GradientSet.zeros_like(model)
    for row in batch:
        y_row, _, trace_row = flow_forward(model, row)
        rows = rows + nll_backward(model, trace_row, y_row)
    for left, right in zip(together, rows.scaled(1.0 / 6).arrays(), strict=True):
        np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-13)


def test_input_adjoint_matches_differences(make_flow, rng):
    model = make_flow(3, 2, n_layers=2, seed=13)
    x = rng.standard_normal(3)
    y, _, trace = flow_forward(model, x)
    _, gx = backward(model, trace, y)
    eps = 1e-6
    numeric = [
        (mean_nll(model, x + eps * e) - mean_nll(model, x - eps * e)) / (2 * eps) for e in np.eye(3)
    ]
    np.testing.assert_allclose(gx[0], numeric, rtol=1e-5, atol=1e-8)


def test_output_loss_without_logdet(make_flow, rng):
    model = make_flow(2, 3, n_layers=2, seed=17)
    x = rng.standard_normal((4, 2))
    goal = rng.standard_normal((4, 2))

    def loss(candidate):
        y, _, _ = flow_forward(candidate, x)
        return 0.5 * float(np.mean(np.sum((y - goal) ** 2, axis=1)))

    y, _, trace = flow_forward(model, x)
    grads, _ = backward(model, trace, y - goal, logdet_weight=0.0)
    params = model.parameters()
    eps = 1e-6
    for k in range(len(params)):
        idx = (0,) * params[k].ndim
        shifted = []
        for sign in (1.0, -1.0):
            arrays = [p.copy() for p in params]
            arrays[k][idx] += sign * eps
            shifted.append(loss(model.with_parameters(arrays)))
        numeric = (shifted[0] - shifted[1]) / (2 * eps)
        assert relative_error(numeric, float(grads.arrays()[k][idx])) < 1e-5


def test_non_finite_adjoint_raises(make_flow):
    model = make_flow(2, 2, n_layers=1)
    y, _, trace = flow_forward(model, np.zeros(2))
    with pytest.raises(DivergenceError):
        backward(model, trace, np.array([np.inf, 0.0]))


class TestBatchGradient:
    def test_matches_direct_backward(self, make_flow, rng):
        model = make_flow(3, 2, n_layers=2, seed=3)
        batch = rng.standard_normal((10, 3))
        loss, grads = batch_nll_gradient(model, batch)
        y, logdet, trace = flow_forward(model, batch)
        assert loss == pytest.approx(float(np.mean(nll(y, logdet))), rel=1e-14)
        for left, right in zip(grads.arrays(), nll_backward(model, trace, y).arrays(), strict=True):
            np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-15)

    def test_workers_agree_with_serial(self, make_flow, rng):
        model = make_flow(3, 2, n_layers=2, seed=4)
        batch = rng.standard_normal((25, 3))
        serial_loss, serial = batch_nll_gradient(model, batch, workers=1)
        pooled_loss, pooled = batch_nll_gradient(model, batch, workers=4)
        assert pooled_loss == pytest.approx(serial_loss, rel=1e-12)
        for left, right in zip(serial.arrays(), pooled.arrays(), strict=True):
            np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-14)

    def test_deterministic_reduction_is_reproducible(self, make_flow, rng):
        model = make_flow(3, 2, n_layers=2, seed=6)
        batch = rng.standard_normal((30, 3))
        first = batch_nll_gradient(model, batch, workers=3, deterministic=True)
        second = batch_nll_gradient(model, batch, workers=3, deterministic=True)
        assert first[0] == second[0]
        for left, right in zip(first[1].arrays(), second[1].arrays(), strict=True):
            np.testing.assert_array_equal(left, right)

    def test_more_workers_than_rows(self, make_flow, rng):
        model = make_flow(2, 2, n_layers=1)
        loss, _ = batch_nll_gradient(model, rng.standard_normal((2, 2)), workers=8)
        assert np.isfinite(loss)


class TestL1:
    @staticmethod
    def scalar_model(values):
        packed, v_diag_raw, a, b = values
        unit = TriUnit(packed=[[packed]], v_diag_raw=[v_diag_raw], a=[a], b=[b])
        return FlowModel(layers=(unit,), flip_after=(False,))

    def test_zero_parameters(self):
        penalty, grads = l1_subgradient(self.scalar_model([0.0, 0.0, 0.0, 0.0]), 0.5)
        assert penalty == 0.0
        assert grads.max_abs() == 0.0

    def test_arithmetic(self):
        penalty, grads = l1_subgradient(self.scalar_model([1.0, -2.0, 0.0, 0.0]), 0.1)
        assert penalty == pytest.approx(0.3)
        np.testing.assert_allclose([g.item() for g in grads.arrays()], [0.1, -0.1, 0.0, 0.0])

    def test_zero_weight(self, make_flow):
        penalty, grads = l1_subgradient(make_flow(3, 2), 0.0)
        assert penalty == 0.0
        assert grads.max_abs() == 0.0

    def test_subgradient_bounded_by_weight(self, make_flow):
        _, grads = l1_subgradient(make_flow(3, 4, n_layers=3, scale=1.0), 0.25)
        assert grads.max_abs() == pytest.approx(0.25)

    def test_negative_weight(self, make_flow):
        with pytest.raises(ValueError, match="non-negative"):
            l1_subgradient(make_flow(2, 2), -1.0)


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
