import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connflow.connectivity import ConnectivityReport
from connflow.errors import InputError
from connflow.nn import LayerSpec, Network, init_network
from connflow.protocol import RunRecord, TrainConfig, train_task
from connflow.theory import (
    LossOracle,
    QuadraticOracle,
    c_eps,
    connectivity_forgetting_corr,
    eo_bound_thm5,
    frobenius_prune_bound,
    hvp,
    lambda_max,
    numerical_grad,
    rank_correlation,
    single_weight_prune,
    taylor_residual,
)


def quadratic_with_spectrum(eigs, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((len(eigs), len(eigs))))
    return QuadraticOracle(q @ np.diag(eigs) @ q.T)


def test_hvp_on_diagonal_quadratic():
    oracle = QuadraticOracle(np.diag([1.0, 2.0, 3.0]))
    w = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(hvp(oracle, w, np.array([1.0, 1.0, 1.0])), [1.0, 2.0, 3.0], atol=1e-9)
    np.testing.assert_allclose(hvp(oracle, w, np.array([0.0, 5.0, 0.0])), [0.0, 10.0, 0.0], atol=1e-9)


def test_hvp_rejects_zero_direction():
    with pytest.raises(InputError):
        hvp(QuadraticOracle(np.eye(2)), np.zeros(2), np.zeros(2))


def test_numerical_grad_on_quadratic():
    oracle = QuadraticOracle(np.diag([1.0, 2.0, 3.0]), linear=np.array([1.0, 0.0, -1.0]))
    w = np.array([1.0, 1.0, 1.0])
    np.testing.assert_allclose(numerical_grad(oracle, w), [2.0, 2.0, 2.0], atol=1e-8)


@pytest.mark.parametrize("eigs, expected", [([1.0, 2.0, 5.0], 5.0), ([-3.0, 0.5, 4.0], 4.0)])
def test_lambda_max_known_spectra(eigs, expected):
    est = lambda_max(quadratic_with_spectrum(eigs), np.zeros(3), iters=200, tol=1e-10)
    assert abs(est.lambda_max - expected) < 1e-3
    assert est.iterations_used <= 200


def test_lambda_max_when_negative_eigenvalue_dominates():
    est = lambda_max(quadratic_with_spectrum([-10.0, 1.0, 2.0], seed=3), np.zeros(3), iters=200)
    assert abs(est.lambda_max - 2.0) < 1e-3 and est.converged


def test_lambda_max_budget_exhausted_flags_nonconvergence():
    est = lambda_max(quadratic_with_spectrum([-10.0, 9.9, 2.0]), np.zeros(3), iters=3, tol=1e-12)
    assert not est.converged and est.iterations_used <= 3


def test_lambda_max_is_seeded():
    oracle = quadratic_with_spectrum([1.0, 1.5, 2.0, 7.0])
    a = lambda_max(oracle, np.zeros(4), seed=4)
    b = lambda_max(oracle, np.zeros(4), seed=4)
    assert a == b


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_taylor_residual_vanishes_on_quadratics(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((4, 4))
    oracle = QuadraticOracle(m + m.T, linear=rng.standard_normal(4), const=float(rng.normal()))
    assert taylor_residual(oracle, rng.standard_normal(4), rng.standard_normal(4)) < 1e-8


def test_taylor_residual_shrinks_faster_than_quadratic(blob_tasks):
    task = blob_tasks[0]
    net = init_network([8, 6, 3], "tanh", seed=1)
    train_task(net, None, task, TrainConfig(epochs=10))
    oracle = LossOracle(net, task.x_eval, task.y_eval)
    w = net.to_vector()
    delta = np.random.default_rng(2).standard_normal(w.size)
    delta /= np.linalg.norm(delta)
    alphas = [1e-1 / 2**i for i in range(7)] + [1e-3]
    ratios = [taylor_residual(oracle, w, w + a * delta) / a**2 for a in alphas]
    assert all(r0 >= r1 for r0, r1 in zip(ratios, ratios[1:]))


def test_frobenius_bound_zero_for_identical_nets(tiny_net, blob_tasks):
    task = blob_tasks[0]
    bound, actual = frobenius_prune_bound(tiny_net, tiny_net.copy(), 1, task.x_eval, task.y_eval)
    assert bound == 0.0 and actual == 0.0


def test_frobenius_bound_arithmetic():
    net = Network([LayerSpec(2, 2, "identity"), LayerSpec(2, 2, "identity")],
                  [np.array([[3.0, 0.0], [0.0, 4.0]]), np.eye(2)])
    pruned = single_weight_prune(net, 0)
    assert pruned.weights[0][1, 1] == 0.0
    bound, _ = frobenius_prune_bound(net, pruned, 0, np.ones((1, 2)), np.array([0]))
    # |dW| / |W| * |W0| * |W1| = 4/5 * 5 * sqrt(2)
    assert bound == pytest.approx(4.0 * math.sqrt(2.0), rel=1e-14)


def test_frobenius_bound_rejects_changes_elsewhere(tiny_net, blob_tasks):
    other = single_weight_prune(tiny_net, 2)
    with pytest.raises(InputError):
        frobenius_prune_bound(tiny_net, other, 0, blob_tasks[0].x_eval, blob_tasks[0].y_eval)


def test_frobenius_bound_holds_for_single_weight_prunes(blob_tasks):
    rng = np.random.default_rng(0)
    task = blob_tasks[0]
    for i in range(20):
        net = init_network([8, int(rng.integers(3, 12)), 3], "tanh", seed=i)
        layer = int(rng.integers(0, 2))
        idx = int(rng.integers(net.weights[layer].size))
        bound, actual = frobenius_prune_bound(net, single_weight_prune(net, layer, idx), layer,
                                              task.x_eval, task.y_eval)
        assert actual <= bound


def test_c_eps_switches_branch_at_four():
    assert c_eps(1.0) == 2.0
    assert c_eps(4.0) == 4.0
    assert c_eps(9.0) == 9.0
    assert c_eps(0.25) == 1.0


def test_eo_bound_arithmetic():
    # 0.5 * 1 * 1 * (0 + 1/1)^2
    assert eo_bound_thm5(1.0, 0.0, 0.25, [1.0]) == 0.5
    # 0.5 * mean(1, 3) * 2 * (1 + 2/2)^2 = 8
    assert eo_bound_thm5(2.0, 1.0, 1.0, [1.0, 3.0]) == 8.0


def test_eo_bound_rejects_nonpositive_inputs():
    with pytest.raises(InputError):
        eo_bound_thm5(0.0, 1.0, 0.1, [1.0])
    with pytest.raises(InputError):
        eo_bound_thm5(1.0, 1.0, 0.0, [1.0])


def test_rank_correlation_cases():
    ok = rank_correlation([1, 2, 3, 4], [10, 20, 30, 45])
    assert ok.status == "ok" and ok.spearman_r == pytest.approx(1.0)
    assert rank_correlation([1, 1, 1], [1, 2, 3]).status == "undefined"
    assert rank_correlation([1, 2], [5, 3]).spearman_r == -1.0
    assert rank_correlation([1], [1]).status == "undefined"


def test_connectivity_forgetting_corr_needs_three_tasks():
    with pytest.raises(InputError):
        connectivity_forgetting_corr(RunRecord.empty(2))


def test_numerical_grad_examples():
    w = np.array([0.5, -2.0, 3.0])
    np.testing.assert_allclose(numerical_grad(QuadraticOracle(np.eye(3)), w), w, atol=1e-10)
    np.testing.assert_array_equal(numerical_grad(QuadraticOracle(np.zeros((3, 3)), const=4.0), w), 0.0)
    with pytest.raises(InputError):
        numerical_grad(QuadraticOracle(np.eye(3)), w, h=0.0)


def test_hvp_basis_vector_and_linearity(tiny_net, blob_tasks):
    quad = QuadraticOracle(np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(hvp(quad, np.ones(3), np.array([0.0, 1.0, 0.0])), [0.0, 2.0, 0.0], atol=1e-6)
    oracle = LossOracle(tiny_net, blob_tasks[0].x_eval, blob_tasks[0].y_eval)
    w = tiny_net.to_vector()
    v = np.random.default_rng(0).standard_normal(w.size)
    a, b = hvp(oracle, w, 2 * v), 2 * hvp(oracle, w, v)
    assert np.linalg.norm(a - b) <= 1e-5 * np.linalg.norm(b)


def test_hvp_is_symmetric_on_tiny_nets(blob_tasks):
    rng = np.random.default_rng(1)
    for seed in range(5):
        net = init_network([8, 5, 3], "tanh", seed=seed)
        oracle = LossOracle(net, blob_tasks[0].x_eval[:40], blob_tasks[0].y_eval[:40])
        w = net.to_vector()
        u, v = rng.standard_normal(w.size), rng.standard_normal(w.size)
        left, right = float(v @ hvp(oracle, w, u)), float(u @ hvp(oracle, w, v))
        assert abs(left - right) <= 1e-5 * max(abs(left), abs(right))


def test_identity_hessian_converges_in_one_step():
    est = lambda_max(QuadraticOracle(np.eye(4)), np.zeros(4))
    assert est.lambda_max == pytest.approx(1.0, abs=1e-9) and est.iterations_used == 1


def test_trained_optimum_has_nonnegative_top_eigenvalue(blob_tasks):
    net = init_network([8, 6, 3], "tanh", seed=0)
    train_task(net, None, blob_tasks[0], TrainConfig(epochs=10))
    est = lambda_max(LossOracle(net, blob_tasks[0].x_eval, blob_tasks[0].y_eval), net.to_vector())
    assert est.lambda_max >= 0.0 and est.converged


def test_taylor_residual_at_expansion_point():
    assert taylor_residual(QuadraticOracle(np.eye(2)), np.ones(2), np.ones(2)) == 0.0


def test_frobenius_bound_saturates_for_zeroed_layer(tiny_net, blob_tasks):
    zeroed = tiny_net.copy()
    zeroed.weights[1][:] = 0.0
    bound, _ = frobenius_prune_bound(tiny_net, zeroed, 1, blob_tasks[0].x_eval, blob_tasks[0].y_eval)
    assert bound == pytest.approx(math.prod(np.linalg.norm(w) for w in tiny_net.weights), rel=1e-14)


def _record_with(deltas, forgetting_values):
    rec = RunRecord.empty(len(deltas))
    rec.reports = [ConnectivityReport(t + 1, [d]) for t, d in enumerate(deltas)]
    rec.forgetting = forgetting_values
    return rec


def test_connectivity_forgetting_corr_examples():
    flat = connectivity_forgetting_corr(_record_with([0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.5]))
    assert flat.status == "undefined"
    anti = connectivity_forgetting_corr(_record_with([0.1, 0.2, 0.3, 0.4], [0.9, 0.5, 0.1]))
    assert anti.spearman_r == pytest.approx(-1.0) and anti.status == "ok"
