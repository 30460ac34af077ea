"""Constructive landscape repairs for deep linear networks.

Implements the machinery that turns an arbitrary minimum into a
rank-normalized one without changing the loss: full-rank repair of a single
layer through its normal equation, rank-restoring sweeps across the stack,
exact refactorization of perturbed products, and the end-to-end witness that
maps a deep minimum onto the rank-constrained shallow problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CertificationError,
    ConstructionError,
    DimensionMismatchError,
    NotLayerwiseMinimumError,
    NotLocalMinimumError,
    PreconditionError,
)
from .linalg import (
    RANK_RTOL,
    aligned_svd_pair,
    as_matrix,
    numerical_rank,
    pseudo_inverse,
    rank_truncate,
)
from .model import (
    HESSIAN_PARAM_LIMIT,
    Dataset,
    WeightStack,
    gradient_norm,
    hessian,
    loss,
    product,
)
from .shallow import shallow_loss


@dataclass(frozen=True)
class PerturbationBudget:
    """Allowed entrywise displacement delta and line-search start mu."""

    delta: float
    mu: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise PreconditionError(f"delta must be finite and positive, got {self.delta}")
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise PreconditionError(f"mu must be finite and positive, got {self.mu}")


@dataclass(frozen=True)
class RepairResult:
    """Outcome of a loss-preserving repair."""

    repaired: WeightStack
    displacement: float
    loss_before: float
    loss_after: float
    product_rank: int
    per_layer_ranks: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "displacement": self.displacement,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "product_rank": self.product_rank,
            "per_layer_ranks": list(self.per_layer_ranks),
        }


def _anchored_rank(M: np.ndarray, floor: float = 1.0) -> int:
    """Rank with the cutoff anchored to max(sigma_max, floor).

    The relative cutoff of numerical_rank calls any junk-scale matrix full
    rank against itself; repairs must not mistake 1e-17 roundoff for a
    restored singular direction, so here the threshold never drops below
    RANK_RTOL times the problem's unit scale.
    """
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0:
        return 0
    return int(np.count_nonzero(s > RANK_RTOL * max(float(s[0]), floor)))


def _layer_ranks(W: WeightStack) -> tuple[int, ...]:
    return tuple(numerical_rank(L) for L in W.layers)


def _stack_displacement(W_new: WeightStack, W_old: WeightStack) -> float:
    return max(
        float(np.abs(a - b).max()) for a, b in zip(W_new.layers, W_old.layers)
    )


def two_factor_perturbation(A, B, Rbar) -> np.ndarray:
    """Right factor Bbar with A @ Bbar = Rbar exactly, close to B.

    Requires A to have full row rank; the correction A^+ (Rbar - A B) then
    satisfies ||Bbar - B|| <= ||A^+|| ||Rbar - A B||.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Rbar = as_matrix(Rbar, "Rbar")
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatchError(f"inner dimensions differ: {A.shape} vs {B.shape}")
    if Rbar.shape != (A.shape[0], B.shape[1]):
        raise DimensionMismatchError(
            f"target must be {(A.shape[0], B.shape[1])}, got {Rbar.shape}"
        )
    if numerical_rank(A) != A.shape[0]:
        raise PreconditionError("left factor must have full row rank")
    return B + pseudo_inverse(A) @ (Rbar - A @ B)


def two_factor_perturbation_left(A, B, Rbar) -> np.ndarray:
    """Left factor Abar with Abar @ B = Rbar exactly (B full column rank)."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Rbar = as_matrix(Rbar, "Rbar")
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatchError(f"inner dimensions differ: {A.shape} vs {B.shape}")
    if Rbar.shape != (A.shape[0], B.shape[1]):
        raise DimensionMismatchError(
            f"target must be {(A.shape[0], B.shape[1])}, got {Rbar.shape}"
        )
    if numerical_rank(B) != B.shape[1]:
        raise PreconditionError("right factor must have full column rank")
    return A + (Rbar - A @ B) @ pseudo_inverse(B)


def _affine_chain(W: WeightStack, data: Dataset, layer: int):
    """Prefix A = W_{i-1}...W_1 X and transposed suffix B = (W_H...W_{i+1})^T."""
    A = np.asarray(data.X)
    for q in range(layer - 1):
        A = W.layers[q] @ A
    Bt = np.eye(W.dims.widths[-1])
    for q in range(W.depth - 1, layer - 1, -1):
        Bt = Bt @ W.layers[q]
    return A, Bt.T


def full_rank_perturbation(
    W: WeightStack,
    layer: int,
    data: Dataset,
    budget: PerturbationBudget,
    residual_rtol: float = 1e-8,
) -> RepairResult:
    """Replace layer `layer` (1-based) by a nearby full-rank normal-equation solution.

    The layer must already satisfy its normal equation (it minimizes the loss
    with the other layers frozen). The replacement moves along the segment
    toward a full-rank solution, halving the step until both full-rankness and
    the delta/2 displacement budget hold, which leaves the loss unchanged.
    """
    if not 1 <= layer <= W.depth:
        raise PreconditionError(f"layer must lie in [1, {W.depth}], got {layer}")
    Wi = W.layers[layer - 1]
    d_out, d_in = Wi.shape
    target = min(d_out, d_in)
    loss_before = loss(W, data)

    A, B = _affine_chain(W, data, layer)
    rhs = B @ data.Y @ A.T
    lhs = B @ (B.T @ Wi @ A) @ A.T
    resid = float(np.linalg.norm(lhs - rhs))
    if resid > residual_rtol * (1.0 + np.linalg.norm(rhs)):
        raise NotLayerwiseMinimumError(
            f"layer {layer} violates its normal equation (residual {resid:.3e})"
        )

    if _anchored_rank(Wi) == target:
        return RepairResult(
            repaired=W,
            displacement=0.0,
            loss_before=loss_before,
            loss_after=loss_before,
            product_rank=numerical_rank(product(W)),
            per_layer_ranks=_layer_ranks(W),
        )

    UA, sA, VAt = np.linalg.svd(A, full_matrices=True)
    UB, sB, VBt = np.linalg.svd(B, full_matrices=True)
    s1 = int(np.count_nonzero(sA > RANK_RTOL * sA[0])) if sA.size and sA[0] > 0 else 0
    s2 = int(np.count_nonzero(sB > RANK_RTOL * sB[0])) if sB.size and sB[0] > 0 else 0

    interaction = VBt @ data.Y @ VAt.T
    if numerical_rank(interaction) < data.output_dim:
        raise ConstructionError("target interaction matrix lost row rank in the SVD bases")

    Z = np.zeros((d_out, d_in))
    if s2 and s1:
        Z[:s2, :s1] = (interaction[:s2, :s1] / sB[:s2, None]) / sA[None, :s1]

    # 0/1 completion outside the locked top-left block: shifted diagonal first,
    # then a greedy fill verified by numerical rank.
    K = np.zeros((d_out, d_in))
    t = 0
    while s2 + t < d_out and s1 + t < d_in:
        K[s2 + t, s1 + t] = 1.0
        t += 1
    if _anchored_rank(Z + K) < target:
        for r in range(d_out):
            for c in range(d_in):
                if r < s2 and c < s1:
                    continue
                if K[r, c] != 0.0:
                    continue
                before = _anchored_rank(Z + K)
                K[r, c] = 1.0
                if _anchored_rank(Z + K) <= before:
                    K[r, c] = 0.0
                elif _anchored_rank(Z + K) == target:
                    break
            if _anchored_rank(Z + K) == target:
                break
    if _anchored_rank(Z + K) < target:
        raise ConstructionError(
            f"no full-rank completion of the layer-{layer} normal-equation solution exists"
        )
    W_hat = UB @ (Z + K) @ UA.T

    direction = W_hat - Wi
    dmax = float(np.abs(direction).max())
    mu = min(budget.mu, (1.0 - 1e-9) * (budget.delta / 2.0) / dmax)
    while mu >= 1e-300:
        W_try = Wi + mu * direction
        if _anchored_rank(W_try) == target:
            break
        mu /= 2.0
    else:
        raise ConstructionError(f"step size underflow while repairing layer {layer}")

    repaired = W.replace_layer(layer - 1, W_try)
    loss_after = loss(repaired, data)
    if abs(loss_after - loss_before) > 1e-9 * (1.0 + abs(loss_before)):
        raise ConstructionError(
            f"repair changed the loss by {abs(loss_after - loss_before):.3e}"
        )
    return RepairResult(
        repaired=repaired,
        displacement=float(mu * dmax),
        loss_before=loss_before,
        loss_after=loss_after,
        product_rank=numerical_rank(product(repaired)),
        per_layer_ranks=_layer_ranks(repaired),
    )


def _merged_budget(budget: PerturbationBudget, kept: np.ndarray) -> PerturbationBudget:
    # cap the merged-layer move so the refactored real layer moves <= delta/2
    s = np.linalg.svd(kept, compute_uv=False)
    smin = s[s > RANK_RTOL * s[0]].min()
    inner = min(kept.shape)
    amp = np.sqrt(float(inner)) / smin
    return PerturbationBudget(delta=budget.delta * min(1.0, 1.0 / amp), mu=budget.mu)


def _null_completion_direction(M: np.ndarray, target: int) -> np.ndarray:
    """Unit max-norm direction whose addition lifts M to the target rank."""
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    rho = int(np.count_nonzero(s > RANK_RTOL * max(float(s[0]), 1.0))) if s.size else 0
    D = np.zeros_like(M)
    for t in range(rho, target):
        D += np.outer(U[:, t], Vt[t, :])
    dmax = np.abs(D).max()
    if dmax == 0.0:
        raise ConstructionError("matrix already has the target rank")
    return D / dmax


def _restore_layer_rank(
    W: WeightStack,
    layer: int,
    data: Dataset,
    budget: PerturbationBudget,
    residual_rtol: float = 1e-6,
) -> WeightStack:
    """Make one layer full rank, preserving the loss.

    Tries the exact normal-equation repair first. When the solution set is
    rank-pinned (no full-rank completion exists) it falls back to a tiny bump
    along the layer's own null directions: at a critical point the loss moves
    only to second order, so the step is halved until the drift sits below
    1e-10 relative while the rank signal stays far above the rank cutoff.
    """
    try:
        return full_rank_perturbation(W, layer, data, budget, residual_rtol=residual_rtol).repaired
    except ConstructionError:
        pass
    Wi = W.layers[layer - 1]
    target = min(Wi.shape)
    D = _null_completion_direction(Wi, target)
    loss0 = loss(W, data)
    drift_budget = 1e-10 * (1.0 + abs(loss0))
    mu = min(budget.mu, (1.0 - 1e-9) * budget.delta / 2.0)
    while mu >= 1e-300:
        W_try = W.replace_layer(layer - 1, Wi + mu * D)
        if abs(loss(W_try, data) - loss0) <= drift_budget:
            if _anchored_rank(W_try.layers[layer - 1]) == target:
                return W_try
            raise ConstructionError(
                f"layer {layer}: no step both preserves the loss and restores rank"
            )
        mu /= 2.0
    raise ConstructionError(f"step size underflow while bumping layer {layer}")


def _merged_full_rank_target(
    virtual: WeightStack,
    vlayer: int,
    data: Dataset,
    budget: PerturbationBudget,
) -> np.ndarray:
    """Full-rank replacement for a merged layer, exact when possible."""
    try:
        res = full_rank_perturbation(virtual, vlayer, data, budget, residual_rtol=1e-6)
        return res.repaired.layers[vlayer - 1]
    except ConstructionError:
        pass
    M = virtual.layers[vlayer - 1]
    target = min(M.shape)
    D = _null_completion_direction(M, target)
    loss0 = loss(virtual, data)
    drift_budget = 1e-10 * (1.0 + abs(loss0))
    mu = min(budget.mu, (1.0 - 1e-9) * budget.delta / 2.0)
    while mu >= 1e-300:
        M_try = M + mu * D
        v_try = virtual.replace_layer(vlayer - 1, M_try)
        if abs(loss(v_try, data) - loss0) <= drift_budget:
            if _anchored_rank(M_try) == target:
                return M_try
            raise ConstructionError(
                "merged layer: no step both preserves the loss and restores rank"
            )
        mu /= 2.0
    raise ConstructionError("step size underflow while bumping a merged layer")


def rank_restoring_sweep(
    W: WeightStack,
    data: Dataset,
    budget: PerturbationBudget,
    grad_rtol: float = 1e-8,
) -> RepairResult:
    """Perturb a minimum so the end-to-end product reaches the bottleneck rank.

    First repairs every rank-deficient layer through its normal equation, then
    sweeps pairwise products outward from the bottleneck: on each side the
    kept factor (full row rank below, full column rank above) lets the merged
    product be repaired as a single layer and the change pushed into exactly
    one real layer. The loss never moves; per-layer displacement stays within
    the budget.
    """
    dims = W.dims
    p = dims.bottleneck_index
    dp = dims.bottleneck_width
    H = W.depth

    gn = gradient_norm(W, data)
    if gn > grad_rtol * data.target_scale:
        raise NotLocalMinimumError(
            f"gradient norm {gn:.3e} exceeds {grad_rtol:.1e} x scale; not a minimum"
        )
    loss_before = loss(W, data)
    if _anchored_rank(product(W)) == dp:
        return RepairResult(
            repaired=W,
            displacement=0.0,
            loss_before=loss_before,
            loss_after=loss_before,
            product_rank=dp,
            per_layer_ranks=_layer_ranks(W),
        )

    current = W
    for layer in range(1, H + 1):
        L = current.layers[layer - 1]
        if _anchored_rank(L) < min(L.shape):
            current = _restore_layer_rank(current, layer, data, budget)

    layers = list(current.layers)
    if p >= 1:
        C = layers[p - 1]  # bottleneck layer, full row rank d_p
        for q in range(p, 1, -1):
            right = layers[q - 2]
            merged = C @ right
            if _anchored_rank(merged) < dp:
                virtual = WeightStack(tuple(layers[: q - 2]) + (merged,) + tuple(layers[p:]))
                merged_hat = _merged_full_rank_target(
                    virtual, q - 1, data, _merged_budget(budget, C)
                )
                layers[q - 2] = two_factor_perturbation(C, right, merged_hat)
            C = C @ layers[q - 2]
    if p <= H - 1:
        C2 = layers[p]  # layer above the bottleneck, full column rank d_p
        for q in range(p + 2, H + 1):
            left = layers[q - 1]
            merged = left @ C2
            if _anchored_rank(merged) < dp:
                virtual = WeightStack(tuple(layers[:p]) + (merged,) + tuple(layers[q:]))
                merged_hat = _merged_full_rank_target(
                    virtual, p + 1, data, _merged_budget(budget, C2)
                )
                layers[q - 1] = two_factor_perturbation_left(left, C2, merged_hat)
            C2 = layers[q - 1] @ C2

    repaired = WeightStack(tuple(layers))
    prank = _anchored_rank(product(repaired))
    if prank != dp:
        raise ConstructionError(f"sweep finished with product rank {prank}, wanted {dp}")
    loss_after = loss(repaired, data)
    if abs(loss_after - loss_before) > 1e-8 * (1.0 + abs(loss_before)):
        raise ConstructionError(
            f"sweep changed the loss by {abs(loss_after - loss_before):.3e}"
        )
    return RepairResult(
        repaired=repaired,
        displacement=_stack_displacement(repaired, W),
        loss_before=loss_before,
        loss_after=loss_after,
        product_rank=prank,
        per_layer_ranks=_layer_ranks(repaired),
    )


def _split_pair(lower_bar: np.ndarray, upper_bar: np.ndarray, R_target: np.ndarray):
    """Refactor upper_bar @ lower_bar into a pair with product R_target.

    Works through aligned full SVDs of the reference product and the target:
    the left factor keeps the target's left basis with rows rescaled by the
    singular value ratios; the right factor keeps the reference coefficients
    against the target's right basis.
    """
    Rbar = upper_bar @ lower_bar
    Ub, sb, Vb, U, s, V = aligned_svd_pair(Rbar, R_target)
    S2 = Ub.T @ upper_bar
    nmin = min(Rbar.shape)
    cutoff = RANK_RTOL * sb[0] if sb.size and sb[0] > 0 else 0.0
    for i in range(nmin):
        if sb[i] > cutoff:
            S2[i, :] *= s[i] / sb[i]
    S1 = lower_bar @ Vb
    return S1 @ V.T, U @ S2


def factor_perturbed_product(Wbar: WeightStack, R) -> WeightStack:
    """Factors of a perturbed product: W with product(W) = R, each layer near Wbar's.

    Requires the reference product to reach the bottleneck rank d_p and the
    target to stay within it. Depth 2 splits through aligned SVDs; deeper
    stacks recurse on the pair adjacent to the bottleneck.
    """
    R = as_matrix(R, "R")
    dims = Wbar.dims
    dp = dims.bottleneck_width
    Rbar = product(Wbar)
    if R.shape != Rbar.shape:
        raise DimensionMismatchError(f"target must be {Rbar.shape}, got {R.shape}")
    if numerical_rank(Rbar) != dp:
        raise PreconditionError(
            f"reference product has rank {numerical_rank(Rbar)}, needs the bottleneck rank {dp}"
        )
    if numerical_rank(R) > dp:
        raise PreconditionError(
            f"target rank {numerical_rank(R)} exceeds the bottleneck rank {dp}"
        )
    return _factor_recurse(list(Wbar.layers), R)


def _factor_recurse(layers: list[np.ndarray], R: np.ndarray) -> WeightStack:
    H = len(layers)
    if H == 1:
        return WeightStack((R,))
    if H == 2:
        lower, upper = _split_pair(layers[0], layers[1], R)
        return WeightStack((lower, upper))
    widths = (layers[0].shape[1],) + tuple(L.shape[0] for L in layers)
    p = int(np.argmin(widths))
    if p >= 2:
        lo_idx, hi_idx = p - 2, p - 1  # python indices of layers p-1 and p
    else:
        lo_idx, hi_idx = p, p + 1  # python indices of layers p+1 and p+2
    merged = layers[hi_idx] @ layers[lo_idx]
    new_layers = layers[:lo_idx] + [merged] + layers[hi_idx + 1:]
    rec = _factor_recurse(new_layers, R)
    M = rec.layers[lo_idx]
    lower, upper = _split_pair(layers[lo_idx], layers[hi_idx], M)
    out = list(rec.layers)
    out[lo_idx:lo_idx + 1] = [lower, upper]
    return WeightStack(tuple(out))


def deep_to_shallow_witness(
    W: WeightStack,
    data: Dataset,
    budget: PerturbationBudget,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    grad_rtol: float = 1e-8,
    curvature_check: bool = True,
) -> np.ndarray:
    """Shallow witness of a deep minimum: a rank-d_p matrix with the same loss.

    Runs the rank-restoring sweep and certifies the result is a minimum of the
    rank-constrained shallow problem by sampling tangent directions of the
    rank-d_p manifold (radius budget.delta, projection retraction) and
    checking the objective never decreases beyond roundoff.
    """
    dims = W.dims
    dp = dims.bottleneck_width
    gn = gradient_norm(W, data)
    if gn > grad_rtol * data.target_scale:
        raise NotLocalMinimumError(
            f"gradient norm {gn:.3e} exceeds {grad_rtol:.1e} x scale; not a minimum"
        )
    if curvature_check and dims.param_count <= HESSIAN_PARAM_LIMIT:
        eigs = np.linalg.eigvalsh(hessian(W, data))
        scale = max(abs(float(eigs[-1])), abs(float(eigs[0])), 1e-300)
        if float(eigs[0]) < -1e-6 * scale:
            raise NotLocalMinimumError(
                f"Hessian has negative curvature (min eig {eigs[0]:.3e}); not a minimum"
            )

    swept = rank_restoring_sweep(W, data, budget, grad_rtol=grad_rtol)
    R_hat = product(swept.repaired)
    f_hat = shallow_loss(R_hat, data)
    f_deep = loss(W, data)
    if abs(f_hat - f_deep) > 1e-8 * (1.0 + abs(f_deep)):
        raise ConstructionError(
            f"witness value drifted from the deep loss by {abs(f_hat - f_deep):.3e}"
        )

    rng = rng if rng is not None else np.random.default_rng(0)
    Uf, sf, Vft = np.linalg.svd(R_hat, full_matrices=True)
    U, V = Uf[:, :dp], Vft.T[:, :dp]
    U_perp, V_perp = Uf[:, dp:], Vft.T[:, dp:]
    slack = 1e-9 * (1.0 + abs(f_hat))
    for idx in range(samples):
        M = rng.standard_normal((dp, dp))
        Delta = U @ M @ V.T
        if U_perp.shape[1]:
            Delta = Delta + U_perp @ rng.standard_normal((U_perp.shape[1], dp)) @ V.T
        if V_perp.shape[1]:
            Delta = Delta + U @ rng.standard_normal((dp, V_perp.shape[1])) @ V_perp.T
        Delta = Delta / np.linalg.norm(Delta)
        R_probe = rank_truncate(R_hat + budget.delta * Delta, dp)
        f_probe = shallow_loss(R_probe, data)
        if f_probe < f_hat - slack:
            raise CertificationError(
                f"direction {idx} decreased the shallow objective by {f_hat - f_probe:.3e}"
            )
    return R_hat
