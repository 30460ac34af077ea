import numpy as np
import pytest

from conftest import random_dataset, random_stack
from linland.constructors import (
    PerturbationBudget,
    deep_to_shallow_witness,
    factor_perturbed_product,
    full_rank_perturbation,
    rank_restoring_sweep,
    two_factor_perturbation,
    two_factor_perturbation_left,
)
from linland.errors import (
    NotLayerwiseMinimumError,
    NotLocalMinimumError,
    PreconditionError,
)
from linland.harness import factor_into_stack, plant_rank_deficient_minimum
from linland.linalg import numerical_rank, pseudo_inverse, rank_truncate
from linland.model import Dataset, WeightStack, gradient_norm, loss, product
from linland.shallow import global_minimizer, shallow_loss

DELTA_LADDER = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


# -------------------------------------------------- two-factor perturbation

def test_two_factor_noop(rng):
    A = rng.standard_normal((2, 4))
    B = rng.standard_normal((4, 3))
    Bbar = two_factor_perturbation(A, B, A @ B)
    assert np.abs(Bbar - B).max() <= 1e-12


def test_two_factor_hand_example():
    A = np.array([[1.0, 0.0]])
    B = np.array([[1.0], [0.0]])
    Bbar = two_factor_perturbation(A, B, np.array([[1.1]]))
    np.testing.assert_allclose(Bbar, np.array([[1.1], [0.0]]), atol=1e-14)
    np.testing.assert_allclose(A @ Bbar, [[1.1]], atol=1e-14)


def test_two_factor_random_exactness_and_bound(rng):
    for _ in range(30):
        A = rng.standard_normal((2, 4))
        B = rng.standard_normal((4, 3))
        R = A @ B
        Rbar = R + 1e-6 * rng.standard_normal(R.shape)
        Bbar = two_factor_perturbation(A, B, Rbar)
        scale = 1 + np.abs(Rbar).max()
        assert np.abs(A @ Bbar - Rbar).max() <= 1e-12 * scale
        bound = np.linalg.norm(pseudo_inverse(A), 2) * np.linalg.norm(Rbar - R)
        assert np.linalg.norm(Bbar - B) <= bound * (1 + 1e-9)


def test_two_factor_rejects_row_rank_deficient(rng):
    A = np.outer(rng.standard_normal(3), rng.standard_normal(4))
    with pytest.raises(PreconditionError):
        two_factor_perturbation(A, rng.standard_normal((4, 3)), np.zeros((3, 3)))


def test_two_factor_left_variant(rng):
    # mirrored variant: right factor has full column rank, left factor moves
    A = rng.standard_normal((4, 5))
    B = rng.standard_normal((5, 2))
    R = A @ B
    Rbar = R + 1e-6 * rng.standard_normal(R.shape)
    Abar = two_factor_perturbation_left(A, B, Rbar)
    assert np.abs(Abar @ B - Rbar).max() <= 1e-12 * (1 + np.abs(Rbar).max())


# ------------------------------------------------- full-rank perturbation

def _layerwise_instance():
    # two layers, bottom layer rank-deficient but layerwise optimal
    X = np.eye(2)
    Y = np.diag([2.0, 0.0]) + 1e-3 * np.eye(2)
    data = Dataset(X, Y)
    W2 = np.diag([2.0, 0.0])
    W1 = np.diag([2.0 * 2.001 / 4.0, 0.0])
    return data, WeightStack((W1, W2))


def test_repair_full_rank_layer_is_noop(rng):
    data = random_dataset(rng, 2, 2, 4)
    W = random_stack(rng, (2, 2, 2))
    # make layer 1 exactly layerwise optimal first
    from linland.constructors import _affine_chain

    A, B = _affine_chain(W, data, 1)
    W1 = pseudo_inverse(B @ B.T) @ B @ data.Y @ A.T @ pseudo_inverse(A @ A.T)
    W = W.replace_layer(0, W1)
    res = full_rank_perturbation(W, 1, data, PerturbationBudget(delta=1e-3))
    assert res.displacement == 0.0
    assert res.repaired is W


def test_repair_planted_layer():
    data, W = _layerwise_instance()
    res = full_rank_perturbation(W, 1, data, PerturbationBudget(delta=1e-2))
    assert numerical_rank(res.repaired.layers[0]) == 2
    assert abs(res.loss_after - res.loss_before) <= 1e-9
    assert res.displacement <= 0.5e-2


@pytest.mark.parametrize("delta", DELTA_LADDER)
def test_repair_delta_ladder(delta):
    data, W = _layerwise_instance()
    res = full_rank_perturbation(W, 1, data, PerturbationBudget(delta=delta))
    assert res.displacement <= delta / 2
    assert numerical_rank(res.repaired.layers[0]) == 2
    assert abs(res.loss_after - res.loss_before) <= 1e-9


def test_repair_rejects_non_layerwise_minimum(rng):
    data = random_dataset(rng, 2, 2, 4)
    W = random_stack(rng, (2, 2, 2))
    with pytest.raises(NotLayerwiseMinimumError):
        full_rank_perturbation(W, 1, data, PerturbationBudget(delta=1e-3))


# ---------------------------------------------------- rank-restoring sweep

def test_sweep_noop_at_full_product_rank(rng):
    from linland.model import NetworkDims

    data = random_dataset(rng, 3, 3, 7)
    R = global_minimizer(data, 2)
    W = factor_into_stack(R, NetworkDims((3, 2, 3)))
    res = rank_restoring_sweep(W, data, PerturbationBudget(delta=1e-3))
    assert res.displacement == 0.0
    assert res.product_rank == 2


@pytest.mark.parametrize("delta", DELTA_LADDER)
def test_sweep_planted_middle_deficiency(delta):
    data, W = plant_rank_deficient_minimum(seed=7)
    assert numerical_rank(product(W)) == 1
    res = rank_restoring_sweep(W, data, PerturbationBudget(delta=delta))
    assert res.product_rank == 2
    assert abs(res.loss_after - res.loss_before) <= 1e-9
    assert res.displacement <= delta / 2


def _chain_deficient_instance(seed=3, m=6):
    # all layers full rank yet the product vanishes; the target is invisible
    # through X so this is a global minimum
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2, m))
    proj = X.T @ np.linalg.inv(X @ X.T) @ X
    Y = rng.standard_normal((1, m)) @ (np.eye(m) - proj)
    Y *= 1.0 / max(1.0, np.linalg.norm(Y) / 2.0)
    data = Dataset(X, Y)
    W = WeightStack(
        (rng.standard_normal((1, 2)), np.array([[0.0], [1.0]]), np.array([[1.0, 0.0]]))
    )
    return data, W


@pytest.mark.parametrize("delta", DELTA_LADDER)
def test_sweep_chain_deficiency(delta):
    data, W = _chain_deficient_instance()
    assert gradient_norm(W, data) <= 1e-12
    res = rank_restoring_sweep(W, data, PerturbationBudget(delta=delta))
    assert res.product_rank == 1  # d_p = 1 for (2,1,2,1)
    assert abs(res.loss_after - res.loss_before) <= 1e-9
    assert res.displacement <= delta


def test_sweep_frobenius_rank_inequality():
    data, W = plant_rank_deficient_minimum(seed=7)
    res = rank_restoring_sweep(W, data, PerturbationBudget(delta=1e-3))
    L = res.repaired.layers
    p = res.repaired.dims.bottleneck_index  # widths index 1 for (3,2,2,3)
    dp = res.repaired.dims.bottleneck_width
    lower = L[0]
    for q in range(1, p):
        lower = L[q] @ lower
    upper = L[p]
    for q in range(p + 1, len(L)):
        upper = L[q] @ upper
    # Sylvester bound evaluated on the outputs
    assert numerical_rank(upper) + numerical_rank(lower) - dp <= res.product_rank


def test_sweep_rejects_non_minimum(rng):
    data = random_dataset(rng, 3, 3, 7)
    W = random_stack(rng, (3, 2, 3))
    with pytest.raises(NotLocalMinimumError):
        rank_restoring_sweep(W, data, PerturbationBudget(delta=1e-3))


# ------------------------------------------------ factorizing perturbations

def test_factor_noop(rng):
    W = random_stack(rng, (3, 2, 3))
    R = product(W)
    W2 = factor_perturbed_product(W, R)
    assert np.abs(product(W2) - R).max() <= 1e-12 * (1 + np.abs(R).max())


def test_factor_identity_pair_example(rng):
    Wbar = WeightStack((np.eye(2), np.eye(2)))
    E = rng.standard_normal((2, 2))
    R = np.eye(2) + 1e-4 * E / np.abs(E).max()
    W = factor_perturbed_product(Wbar, R)
    assert np.abs(product(W) - R).max() <= 1e-12
    for L in W.layers:
        assert np.abs(L - np.eye(2)).max() <= 1e-2


@pytest.mark.parametrize("widths", [(3, 2, 3), (3, 2, 2, 3), (4, 3, 2, 3, 4)])
def test_factor_ladder(widths, rng):
    Wbar = random_stack(rng, widths)
    dp = min(widths)
    Rbar = product(Wbar)
    sigma1 = np.linalg.norm(Rbar, 2)
    ratios = []
    for eps in DELTA_LADDER:
        R = rank_truncate(Rbar + eps * rng.standard_normal(Rbar.shape), dp)
        W = factor_perturbed_product(Wbar, R)
        assert np.abs(product(W) - R).max() <= 1e-10 * sigma1
        disp = max(np.abs(a - b).max() for a, b in zip(W.layers, Wbar.layers))
        ratios.append(disp / eps)
    assert max(ratios) / min(ratios) <= 10.0


def test_factor_rejects_bad_ranks(rng):
    W = random_stack(rng, (3, 2, 3))
    R_big = rng.standard_normal((3, 3))  # generically rank 3 > d_p
    with pytest.raises(PreconditionError):
        factor_perturbed_product(W, R_big)
    deficient = WeightStack((np.zeros((2, 3)), rng.standard_normal((3, 2))))
    with pytest.raises(PreconditionError):
        factor_perturbed_product(deficient, np.zeros((3, 3)))


# ----------------------------------------------------------- witness

def test_witness_on_global_factors(rng):
    from linland.harness import shallow_global_value
    from linland.model import NetworkDims

    data = random_dataset(rng, 3, 3, 7)
    dims = NetworkDims((3, 1, 3))
    R_star = global_minimizer(data, 1)
    W = factor_into_stack(R_star, dims)
    R_hat = deep_to_shallow_witness(
        W, data, PerturbationBudget(delta=1e-4), rng=np.random.default_rng(5)
    )
    gv = shallow_global_value(data, dims)
    assert abs(shallow_loss(R_hat, data) - gv) <= 1e-8 * (1 + abs(gv))
    assert numerical_rank(R_hat) == 1
    assert abs(shallow_loss(R_hat, data) - loss(W, data)) <= 1e-8 * (1 + loss(W, data))


def test_witness_rejects_mid_training(rng):
    data = random_dataset(rng, 3, 3, 7)
    W = random_stack(rng, (3, 1, 3))
    with pytest.raises(NotLocalMinimumError):
        deep_to_shallow_witness(W, data, PerturbationBudget(delta=1e-4))


def test_witness_on_planted_deficient_minimum():
    data, W = plant_rank_deficient_minimum(seed=7)
    R_hat = deep_to_shallow_witness(
        W, data, PerturbationBudget(delta=1e-5), rng=np.random.default_rng(2)
    )
    assert numerical_rank(R_hat, tol=1e-8) == 2 or numerical_rank(R_hat) == 2
    assert abs(shallow_loss(R_hat, data) - loss(W, data)) <= 1e-8 * (1 + loss(W, data))
