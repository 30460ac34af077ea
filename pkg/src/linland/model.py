"""Deep linear network: dimensions, weights, data, loss, gradient, Hessian.

The end-to-end map of a stack (W_1, ..., W_H) is the product W_H ... W_1 and
the training objective is half the squared Frobenius residual against the
targets. Hot paths (product/loss/gradient) run on the selected kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DataValidationError,
    DimensionMismatchError,
    SizeLimitError,
)
from .linalg import RANK_RTOL, as_matrix, numerical_rank

HESSIAN_PARAM_LIMIT = 2000


@dataclass(frozen=True)
class NetworkDims:
    """Layer widths (d_0, ..., d_H) of a depth-H linear network."""

    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise DataValidationError(f"need at least two widths, got {widths}")
        if any(w < 1 for w in widths):
            raise DataValidationError(f"widths must be positive, got {widths}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def bottleneck_index(self) -> int:
        """Index of the smallest width; ties resolve to the smallest index."""
        return int(np.argmin(self.widths))

    @property
    def bottleneck_width(self) -> int:
        return min(self.widths)

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        w = self.widths
        return tuple((w[i + 1], w[i]) for i in range(self.depth))

    @property
    def param_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)


@dataclass(frozen=True)
class WeightStack:
    """Ordered weight matrices (W_1, ..., W_H); layer i maps width d_{i-1} to d_i.

    Layers are stored as read-only float64 copies, so stacks are safe to share
    across threads.
    """

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = []
        for i, W in enumerate(self.layers):
            M = np.array(as_matrix(W, f"layer {i + 1}"), copy=True)
            M.flags.writeable = False
            mats.append(M)
        if not mats:
            raise DataValidationError("weight stack needs at least one layer")
        for i in range(1, len(mats)):
            if mats[i].shape[1] != mats[i - 1].shape[0]:
                raise DimensionMismatchError(
                    f"layer {i + 1} has {mats[i].shape[1]} columns but layer {i} has "
                    f"{mats[i - 1].shape[0]} rows"
                )
        object.__setattr__(self, "layers", tuple(mats))

    @property
    def dims(self) -> NetworkDims:
        widths = (self.layers[0].shape[1],) + tuple(W.shape[0] for W in self.layers)
        return NetworkDims(widths)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def to_flat(self) -> np.ndarray:
        return _kernels.pack_layers(self.layers)

    @classmethod
    def from_flat(cls, theta: np.ndarray, dims: NetworkDims) -> "WeightStack":
        widths = _kernels.widths_array(dims.widths)
        return cls(tuple(_kernels.unpack_theta(np.asarray(theta, dtype=np.float64), widths)))

    def replace_layer(self, index: int, W: np.ndarray) -> "WeightStack":
        """New stack with layer `index` (0-based) replaced."""
        layers = list(self.layers)
        layers[index] = W
        return WeightStack(tuple(layers))


@dataclass(frozen=True)
class Dataset:
    """Training pair: inputs X (d_0 x m) and targets Y (d_H x m).

    Both must have full row rank and m >= max(d_0, d_H); violations raise at
    construction rather than being repaired.
    """

    X: np.ndarray
    Y: np.ndarray
    rank_tol: float = field(default=RANK_RTOL, repr=False)

    def __post_init__(self):
        X = np.array(as_matrix(self.X, "X"), copy=True)
        Y = np.array(as_matrix(self.Y, "Y"), copy=True)
        if X.shape[1] != Y.shape[1]:
            raise DimensionMismatchError(
                f"X has {X.shape[1]} samples but Y has {Y.shape[1]}"
            )
        m = X.shape[1]
        if m < max(X.shape[0], Y.shape[0]):
            raise DataValidationError(
                f"need m >= max(d_0, d_H): m={m}, d_0={X.shape[0]}, d_H={Y.shape[0]}"
            )
        if numerical_rank(X, self.rank_tol) != X.shape[0]:
            raise DataValidationError("X must have full row rank")
        if numerical_rank(Y, self.rank_tol) != Y.shape[0]:
            raise DataValidationError("Y must have full row rank")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[0]

    @property
    def output_dim(self) -> int:
        return self.Y.shape[0]

    @property
    def num_samples(self) -> int:
        return self.X.shape[1]

    @property
    def target_scale(self) -> float:
        """1 + ||Y||_F, the scale used by relative gradient tolerances."""
        return 1.0 + float(np.linalg.norm(self.Y))


def _check_compatible(W: WeightStack, data: Dataset) -> None:
    dims = W.dims
    if dims.widths[0] != data.input_dim or dims.widths[-1] != data.output_dim:
        raise DimensionMismatchError(
            f"stack maps {dims.widths[0]} -> {dims.widths[-1]} but data is "
            f"{data.input_dim} -> {data.output_dim}"
        )


def product(W: WeightStack) -> np.ndarray:
    """End-to-end map W_H ... W_1, accumulated from the first layer upward."""
    widths = _kernels.widths_array(W.dims.widths)
    return _kernels.product_flat(W.to_flat(), widths)


def loss(W: WeightStack, data: Dataset) -> float:
    """Half squared Frobenius residual of the network output against Y."""
    _check_compatible(W, data)
    widths = _kernels.widths_array(W.dims.widths)
    return float(_kernels.loss_flat(W.to_flat(), widths, data.X, data.Y))


def gradient(W: WeightStack, data: Dataset) -> tuple[np.ndarray, ...]:
    """Per-layer partial derivatives of the loss.

    For layer i the derivative is (W_H...W_{i+1})^T (RX - Y) X^T (W_{i-1}...W_1)^T
    with empty products read as identities.
    """
    _check_compatible(W, data)
    widths = _kernels.widths_array(W.dims.widths)
    g = _kernels.grad_flat(W.to_flat(), widths, data.X, data.Y)
    return tuple(_kernels.unpack_theta(g, widths))


def gradient_norm(W: WeightStack, data: Dataset) -> float:
    _check_compatible(W, data)
    widths = _kernels.widths_array(W.dims.widths)
    g = _kernels.grad_flat(W.to_flat(), widths, data.X, data.Y)
    return float(np.linalg.norm(g))


def hessian(W: WeightStack, data: Dataset, max_params: int = HESSIAN_PARAM_LIMIT) -> np.ndarray:
    """Dense Hessian of the loss in the flat parameter order.

    Flattening is layer-major (layer 1 first) and row-major within each layer,
    matching WeightStack.to_flat. Assembled analytically from the Gauss-Newton
    part plus the residual curvature coupling distinct layers; the parameter
    count is capped to keep this a desk-scale dense object.
    """
    _check_compatible(W, data)
    dims = W.dims
    n = dims.param_count
    if n > max_params:
        raise SizeLimitError(f"parameter count {n} exceeds dense Hessian limit {max_params}")

    H = dims.depth
    layers = W.layers
    # acts[i] = W_i ... W_1 X (acts[0] = X); suffix[i] = W_H ... W_{i+1}
    acts = [np.asarray(data.X)]
    for i in range(H):
        acts.append(layers[i] @ acts[-1])
    suffix = [None] * (H + 1)
    suffix[H] = np.eye(dims.widths[-1])
    for i in range(H, 0, -1):
        suffix[i - 1] = suffix[i] @ layers[i - 1]
    E = acts[H] - data.Y

    sizes = [r * c for r, c in dims.layer_shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.zeros((n, n))

    def between(i: int, j: int) -> np.ndarray:
        # W_{j-1} ... W_{i+1}, identity when j == i + 1 (layer indices 1-based)
        D = np.eye(dims.widths[i])
        for q in range(i + 1, j):
            D = layers[q - 1] @ D
        return D

    for j in range(1, H + 1):
        for i in range(1, j + 1):
            Bj = suffix[j]
            Bi = suffix[i]
            block = np.kron(Bj.T @ Bi, acts[j - 1] @ acts[i - 1].T)
            if j > i:
                Mji = Bj.T @ E @ acts[i - 1].T
                D = between(i, j)
                nj_r, nj_c = dims.layer_shapes[j - 1]
                ni_r, ni_c = dims.layer_shapes[i - 1]
                block = block + np.einsum("ad,bc->abcd", Mji, D).reshape(
                    nj_r * nj_c, ni_r * ni_c
                )
            r0, r1 = offsets[j - 1], offsets[j]
            c0, c1 = offsets[i - 1], offsets[i]
            out[r0:r1, c0:c1] = block
            if j > i:
                out[c0:c1, r0:r1] = block.T
    return out
