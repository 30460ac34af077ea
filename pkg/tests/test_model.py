import math

import numpy as np
import pytest

from conftest import random_dataset, random_stack
from linland import _kernels
from linland.errors import (
    DataValidationError,
    DimensionMismatchError,
    SizeLimitError,
)
from linland.model import (
    Dataset,
    NetworkDims,
    WeightStack,
    gradient,
    gradient_norm,
    hessian,
    loss,
    product,
)


# -------------------------------------------------------------- types

def test_dims_bottleneck_tie_breaks_low():
    assert NetworkDims((3, 2, 3, 2, 3)).bottleneck_index == 1
    assert NetworkDims((2, 3, 3, 2)).bottleneck_index == 0


def test_dims_validation():
    with pytest.raises(DataValidationError):
        NetworkDims((4,))
    with pytest.raises(DataValidationError):
        NetworkDims((4, 0, 4))


def test_stack_shape_chain_enforced(rng):
    with pytest.raises(DimensionMismatchError):
        WeightStack((rng.standard_normal((2, 3)), rng.standard_normal((3, 3))))


def test_stack_layers_are_immutable(rng):
    W = random_stack(rng, (3, 2, 3))
    with pytest.raises(ValueError):
        W.layers[0][0, 0] = 5.0


def test_stack_flat_roundtrip(rng):
    W = random_stack(rng, (4, 3, 2, 3, 4))
    W2 = WeightStack.from_flat(W.to_flat(), W.dims)
    for a, b in zip(W.layers, W2.layers):
        np.testing.assert_array_equal(a, b)


def test_dataset_rejects_rank_deficiency():
    X = np.eye(3)
    Y = np.vstack([np.ones(3), np.ones(3)])
    with pytest.raises(DataValidationError):
        Dataset(X, Y)


def test_dataset_rejects_too_few_samples(rng):
    with pytest.raises(DataValidationError):
        Dataset(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))


def test_dataset_rejects_sample_mismatch(rng):
    with pytest.raises(DimensionMismatchError):
        Dataset(rng.standard_normal((2, 5)), rng.standard_normal((2, 4)))


# ------------------------------------------------------------ product

def test_product_identity_stack():
    W = WeightStack((np.eye(2), np.eye(2)))
    np.testing.assert_array_equal(product(W), np.eye(2))


def test_product_single_layer(rng):
    A = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(product(WeightStack((A,))), A)


def test_product_matches_left_to_right(rng):
    for _ in range(20):
        W = random_stack(rng, (3, 4, 2, 5, 3))
        # associativity oracle: evaluate in the opposite association order
        P = W.layers[-1]
        for L in reversed(W.layers[:-1]):
            P = P @ L
        assert np.abs(product(W) - P).max() <= 1e-12 * (1 + np.abs(P).max())


# --------------------------------------------------------------- loss

def test_loss_exact_fit():
    W = WeightStack((np.eye(2), np.eye(2)))
    data = Dataset(np.eye(2), np.eye(2))
    assert loss(W, data) == 0.0


def test_loss_half_norm_convention():
    # identity network against a zero target: loss = ||I_2||_F^2 / 2 = 1
    # (kernel level: the Dataset constructor rightly rejects a rank-0 target)
    W = WeightStack((np.eye(2), np.eye(2)))
    widths = _kernels.widths_array(W.dims.widths)
    val = _kernels.loss_flat(W.to_flat(), widths, np.eye(2), np.zeros((2, 2)))
    assert val == 1.0


def test_loss_matches_fsum_oracle(rng):
    for _ in range(20):
        W = random_stack(rng, (3, 2, 4))
        data = random_dataset(rng, 3, 4, 7)
        R = product(W)
        E = R @ data.X - data.Y
        direct = 0.5 * math.fsum(float(v) ** 2 for v in E.ravel())
        assert abs(loss(W, data) - direct) <= 1e-12 * (1 + abs(direct))


def test_loss_shape_mismatch(rng):
    W = random_stack(rng, (3, 2, 4))
    data = random_dataset(rng, 4, 4, 8)
    with pytest.raises(DimensionMismatchError):
        loss(W, data)


# ------------------------------------------------------------ gradient

def test_gradient_zero_at_exact_fit():
    W = WeightStack((np.eye(2), np.eye(2)))
    data = Dataset(np.eye(2), np.eye(2))
    for g in gradient(W, data):
        assert np.all(g == 0)


def test_gradient_hand_example():
    # two layers, X = Y = I, W1 = I, W2 = 0: dL/dW2 = -I, dL/dW1 = 0
    W = WeightStack((np.eye(2), np.zeros((2, 2))))
    data = Dataset(np.eye(2), np.eye(2))
    g1, g2 = gradient(W, data)
    np.testing.assert_allclose(g2, -np.eye(2), atol=1e-15)
    np.testing.assert_allclose(g1, np.zeros((2, 2)), atol=1e-15)


def _fd_gradient(theta, widths, X, Y, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (_kernels.loss_flat(tp, widths, X, Y) - _kernels.loss_flat(tm, widths, X, Y)) / (
            2 * h
        )
    return g


def test_gradient_matches_central_differences(rng):
    for _ in range(20):
        W = random_stack(rng, (3, 2, 3, 2))
        data = random_dataset(rng, 3, 2, 6)
        widths = _kernels.widths_array(W.dims.widths)
        theta = W.to_flat()
        g = _kernels.grad_flat(theta, widths, data.X, data.Y)
        g_fd = _fd_gradient(theta, widths, data.X, data.Y)
        assert np.linalg.norm(g - g_fd) <= 1e-5 * (1 + np.linalg.norm(g_fd))


# ------------------------------------------------------------- hessian

def test_hessian_single_layer_structure(rng):
    # depth 1 is convex: the Hessian is exactly kron(I, X X^T), PSD
    data = random_dataset(rng, 3, 2, 6)
    W = random_stack(rng, (3, 2))
    H = hessian(W, data)
    np.testing.assert_allclose(H, np.kron(np.eye(2), data.X @ data.X.T), atol=1e-12)
    assert np.linalg.eigvalsh(H)[0] >= -1e-12


def test_hessian_saddle_at_zero():
    data = Dataset(np.eye(2), np.diag([2.0, 1.0]))
    W = WeightStack((np.zeros((2, 2)), np.zeros((2, 2))))
    H = hessian(W, data)
    eigs = np.linalg.eigvalsh(H)
    assert eigs[0] < -1.9  # the coupling block contributes -sigma_max(Y)


def test_hessian_symmetry_and_fd(rng):
    for _ in range(5):
        W = random_stack(rng, (3, 2, 3))
        data = random_dataset(rng, 3, 3, 6)
        H = hessian(W, data)
        assert np.abs(H - H.T).max() <= 1e-9
        widths = _kernels.widths_array(W.dims.widths)
        theta = W.to_flat()
        n = theta.size
        H_fd = np.zeros((n, n))
        h = 1e-5
        for i in range(n):
            tp = theta.copy()
            tm = theta.copy()
            tp[i] += h
            tm[i] -= h
            H_fd[:, i] = (
                _kernels.grad_flat(tp, widths, data.X, data.Y)
                - _kernels.grad_flat(tm, widths, data.X, data.Y)
            ) / (2 * h)
        assert np.abs(H - H_fd).max() <= 1e-4 * (1 + np.abs(H_fd).max())


def test_hessian_size_limit(rng):
    data = random_dataset(rng, 2, 2, 4)
    W = random_stack(rng, (2, 2, 2))
    with pytest.raises(SizeLimitError):
        hessian(W, data, max_params=5)


# ---------------------------------------------------------- invariants

def test_weight_space_symmetry(rng):
    # W_i -> C W_i, W_{i+1} -> W_{i+1} C^{-1} leaves the loss unchanged
    for _ in range(20):
        W = random_stack(rng, (3, 3, 3, 3))
        data = random_dataset(rng, 3, 3, 6)
        base = loss(W, data)
        i = int(rng.integers(0, 2))
        C = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        layers = list(W.layers)
        layers[i] = C @ layers[i]
        layers[i + 1] = layers[i + 1] @ np.linalg.inv(C)
        assert abs(loss(WeightStack(tuple(layers)), data) - base) <= 1e-9 * (1 + base)


def test_loss_never_beats_global_value(rng):
    from linland.harness import shallow_global_value

    for _ in range(20):
        W = random_stack(rng, (3, 2, 3))
        data = random_dataset(rng, 3, 3, 6)
        gv = shallow_global_value(data, W.dims)
        assert loss(W, data) >= gv - 1e-9 * (1 + abs(gv))


def test_gradient_norm_consistency(rng):
    W = random_stack(rng, (3, 2, 3))
    data = random_dataset(rng, 3, 3, 6)
    gs = gradient(W, data)
    manual = np.sqrt(sum(np.sum(g * g) for g in gs))
    assert abs(gradient_norm(W, data) - manual) <= 1e-12 * (1 + manual)
