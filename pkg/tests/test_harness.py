import numpy as np
import pytest

from conftest import random_dataset, random_stack
from linland.errors import (
    DataValidationError,
    DivergenceError,
    PreconditionError,
)
from linland.harness import (
    ExperimentConfig,
    MaskedDataset,
    classify_critical_point,
    descend_weights,
    factor_into_stack,
    generate_instance,
    generate_masked_instance,
    gradient_descent,
    masked_completion_experiment,
    no_bad_local_minima_experiment,
    plant_rank_deficient_minimum,
    shallow_global_value,
)
from linland.linalg import numerical_rank
from linland.model import Dataset, NetworkDims, WeightStack, gradient_norm, loss, product
from linland.shallow import global_minimizer


def _cfg(widths, m, **kw):
    return ExperimentConfig(dims=NetworkDims(widths), num_samples=m, **kw)


# ------------------------------------------------------------- generation

def test_generate_instance_deterministic():
    cfg = _cfg((4, 3, 2, 3, 4), 10, seed=7)
    d1, W1 = generate_instance(cfg)
    d2, W2 = generate_instance(cfg)
    np.testing.assert_array_equal(d1.X, d2.X)
    np.testing.assert_array_equal(d1.Y, d2.Y)
    for a, b in zip(W1.layers, W2.layers):
        np.testing.assert_array_equal(a, b)


def test_generate_instance_full_row_ranks():
    cfg = _cfg((4, 3, 2, 3, 4), 10, seed=1)
    data, W = generate_instance(cfg)
    assert numerical_rank(data.X) == 4
    assert numerical_rank(data.Y) == 4
    assert W.dims.widths == (4, 3, 2, 3, 4)


def test_generate_instance_rejects_small_m():
    with pytest.raises(PreconditionError):
        _cfg((4, 2, 4), 3)


def test_config_validation():
    with pytest.raises(DataValidationError):
        _cfg((3, 1, 3), 6, step_policy="adam")
    with pytest.raises(DataValidationError):
        _cfg((3, 1, 3), 6, trials=0)


# -------------------------------------------------------- gradient descent

def test_descent_from_global_minimum_is_immediate(rng):
    data = random_dataset(rng, 3, 3, 7)
    dims = NetworkDims((3, 1, 3))
    W = factor_into_stack(global_minimizer(data, 1), dims)
    cfg = _cfg((3, 1, 3), 7, seed=0)
    res = gradient_descent(W, data, cfg)
    assert res.iterations == 0
    assert res.reached_global
    assert res.status == "converged"


def test_descent_diverges_with_huge_fixed_step():
    cfg = _cfg((3, 1, 3), 6, seed=2, step_policy="fixed", step_size=1e6, max_iters=5000)
    data, W0 = generate_instance(cfg)
    with pytest.raises(DivergenceError):
        gradient_descent(W0, data, cfg)


def test_descent_backtracking_monotone_loss():
    cfg = _cfg((3, 2, 3), 6, seed=5, max_iters=20_000)
    data, W0 = generate_instance(cfg)
    _, _, _, _, _, _, traj = descend_weights(W0, data, cfg, record_trajectory=True)
    losses = traj[:, 1]
    # non-increasing up to the documented few-ulp floor slack
    slack = 3.6e-15 * (1.0 + np.abs(losses))
    assert np.all(np.diff(losses) <= slack[:-1])


def test_descent_trajectory_columns():
    cfg = _cfg((3, 1, 3), 6, seed=3, max_iters=500)
    data, W0 = generate_instance(cfg)
    _, iters, _, _, _, _, traj = descend_weights(W0, data, cfg, record_trajectory=True)
    assert traj.shape[1] == 3
    assert traj[0, 0] == 0
    assert traj[-1, 0] <= iters


def test_small_suite_converges_global():
    cfg = _cfg((3, 1, 3), 6, seed=11, trials=10)
    summary = no_bad_local_minima_experiment(cfg)
    assert summary["converged"] == 10
    assert summary["global_count"] == 10
    assert summary["theorem_holds"]
    assert summary["max_gap_converged"] <= cfg.loss_gap_tol


# ----------------------------------------------------------- classification

def test_classify_global_minimum(rng):
    data = random_dataset(rng, 3, 3, 7)
    dims = NetworkDims((3, 2, 3))
    W = factor_into_stack(global_minimizer(data, 2), dims)
    rep = classify_critical_point(W, data, _cfg((3, 2, 3), 7))
    assert rep.classification == "global-min"
    assert rep.gap <= 1e-9


def test_classify_saddle_at_zero():
    data = Dataset(np.eye(2), np.diag([2.0, 1.0]))
    W = WeightStack((np.zeros((2, 2)), np.zeros((2, 2))))
    rep = classify_critical_point(W, data, _cfg((2, 2, 2), 2))
    assert rep.classification == "saddle"
    assert rep.gradient_norm <= 1e-12
    assert rep.hessian_min_eig < -1e-6


def test_classify_random_point_non_critical(rng):
    data = random_dataset(rng, 3, 3, 7)
    W = random_stack(rng, (3, 2, 3))
    rep = classify_critical_point(W, data, _cfg((3, 2, 3), 7))
    assert rep.classification == "non-critical"


def test_gap_is_never_negative_beyond_tolerance(rng):
    cfg = _cfg((3, 2, 3), 7)
    for _ in range(10):
        data = random_dataset(rng, 3, 3, 7)
        W = random_stack(rng, (3, 2, 3))
        rep = classify_critical_point(W, data, cfg)
        assert rep.gap >= -cfg.loss_gap_tol * (1 + abs(rep.global_value))


def test_descent_converging_exactly_onto_saddle_is_recorded():
    # zero weights are an exact critical point: descent stops immediately and
    # the endpoint classifies as a saddle, not as a global minimum
    data = Dataset(np.eye(2), np.diag([2.0, 1.0]))
    W0 = WeightStack((np.zeros((2, 2)), np.zeros((2, 2))))
    cfg = _cfg((2, 2, 2), 2, seed=0)
    res = gradient_descent(W0, data, cfg)
    assert res.status == "converged"
    assert res.report.classification == "saddle"
    assert not res.reached_global


def test_stall_nudges_are_counted_and_bounded():
    # a glacial fixed step makes every window a plateau: the runner nudges,
    # records each one, and gives up honestly after the bound
    cfg = _cfg((3, 1, 3), 6, seed=3, step_policy="fixed", step_size=1e-20,
               max_iters=20_000, stall_window=1000, max_nudges=3)
    data, W0 = generate_instance(cfg)
    res = gradient_descent(W0, data, cfg)
    assert res.status == "stalled"
    assert res.nudges == 3
    assert res.iterations < cfg.max_iters
    assert res.report.classification == "non-critical"


# ------------------------------------------------------------- determinism

def test_experiment_deterministic_and_parallel_invariant():
    cfg = _cfg((3, 1, 3), 6, seed=21, trials=6)
    s1 = no_bad_local_minima_experiment(cfg, n_jobs=1)
    s2 = no_bad_local_minima_experiment(cfg, n_jobs=3)
    assert s1 == s2


# ---------------------------------------------------------------- planting

def test_planted_minimum_properties():
    data, W = plant_rank_deficient_minimum(seed=7)
    assert gradient_norm(W, data) <= 1e-10
    assert numerical_rank(product(W)) == 1
    gv = shallow_global_value(data, W.dims)
    assert abs(loss(W, data) - gv) <= 1e-9 * (1 + abs(gv))


def test_factor_into_stack_exact(rng):
    data = random_dataset(rng, 4, 4, 8)
    dims = NetworkDims((4, 3, 2, 3, 4))
    R = global_minimizer(data, 2)
    W = factor_into_stack(R, dims)
    assert np.abs(product(W) - R).max() <= 1e-12 * (1 + np.abs(R).max())


def test_factor_into_stack_rejects_wide_rank(rng):
    dims = NetworkDims((3, 1, 3))
    with pytest.raises(PreconditionError):
        factor_into_stack(rng.standard_normal((3, 3)), dims)


# ------------------------------------------------------- masked completion

def test_masked_dataset_validation():
    dims = NetworkDims((3, 3, 3))
    with pytest.raises(DataValidationError):
        MaskedDataset(target=np.zeros((3, 3)), mask=np.zeros((3, 3), dtype=bool), dims=dims)
    with pytest.raises(DataValidationError):
        MaskedDataset(target=np.zeros((2, 3)), mask=np.ones((3, 3), dtype=bool), dims=dims)


def test_masked_experiment_rejects_bad_fraction():
    dims = NetworkDims((3, 3, 3))
    masked = generate_masked_instance(dims, 1, 0.7, seed=1)
    cfg = _cfg((3, 3, 3), 3, trials=2)
    with pytest.raises(PreconditionError):
        masked_completion_experiment(cfg, masked, 0.0)
    with pytest.raises(PreconditionError):
        generate_masked_instance(dims, 1, 0.0, seed=1)


def test_masked_experiment_deterministic():
    dims = NetworkDims((4, 4, 4))
    masked = generate_masked_instance(dims, 2, 0.7, seed=3)
    cfg = _cfg((4, 4, 4), 4, trials=4, seed=5, max_iters=50_000)
    s1 = masked_completion_experiment(cfg, masked, 0.7)
    s2 = masked_completion_experiment(cfg, masked, 0.7, n_jobs=2)
    assert s1 == s2
    assert s1["empirical"] is True
    assert s1["success_fraction"] >= 0.0


def test_masked_full_observation_matches_unmasked():
    # a full mask is the plain objective with X = I: converged trials must
    # reach the closed-form global value of that problem
    rng = np.random.default_rng(8)
    dims = NetworkDims((4, 2, 4))
    Y = rng.standard_normal((4, 4))
    masked = MaskedDataset(target=Y, mask=np.ones((4, 4), dtype=bool), dims=dims)
    cfg = _cfg((4, 2, 4), 4, trials=5, seed=2, max_iters=100_000)
    summary = masked_completion_experiment(cfg, masked, 1.0)
    data = Dataset(np.eye(4), Y)
    gv = shallow_global_value(data, dims)
    assert summary["converged"] >= 1
    assert abs(summary["best_value"] - gv) <= 1e-6 * (1 + abs(gv))
    assert summary["success_fraction"] == 1.0
