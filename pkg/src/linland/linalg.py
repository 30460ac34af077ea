"""Deterministic dense linear-algebra kernels.

SVD, Moore-Penrose pseudo-inverse, numerical rank, principal-angle sines,
the singular-subspace perturbation bound, and SVD alignment between a matrix
and a perturbation of it. All functions are pure; none hold state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DecompositionError,
    DimensionMismatchError,
    GapViolationError,
    PreconditionError,
)

# Relative cutoff separating rank signal from double-precision SVD noise.
RANK_RTOL = 1e-10
# Relative tolerance grouping nearly-equal singular values into blocks.
SPECTRUM_GROUP_RTOL = 1e-8

_EPS = np.finfo(np.float64).eps


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 2-D array."""
    M = np.asarray(a, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got ndim={M.ndim}")
    if M.size and not np.all(np.isfinite(M)):
        raise PreconditionError(f"{name} contains NaN or Inf entries")
    return M


@dataclass(frozen=True)
class SVDTriple:
    """Thin singular value decomposition M = U @ diag(S) @ V.T.

    U and V have orthonormal columns; S is non-increasing and non-negative.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T

    def orthonormality_defect(self) -> float:
        du = np.abs(self.U.T @ self.U - np.eye(self.U.shape[1])).max()
        dv = np.abs(self.V.T @ self.V - np.eye(self.V.shape[1])).max()
        return float(max(du, dv))


def svd(M) -> SVDTriple:
    """Thin SVD with an explicit error on LAPACK non-convergence."""
    M = as_matrix(M)
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD failed to converge: {exc}") from exc
    return SVDTriple(U=U, S=s, V=Vt.T)


def pseudo_inverse(M, tol: float = RANK_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values below tol * sigma_max are zeroed."""
    if tol < 0:
        raise PreconditionError(f"tol must be >= 0, got {tol}")
    t = svd(M)
    if t.S.size == 0 or t.S[0] == 0.0:
        return np.zeros((t.V.shape[0], t.U.shape[0]))
    cutoff = tol * t.S[0]
    inv = np.where(t.S > cutoff, 1.0 / np.where(t.S > cutoff, t.S, 1.0), 0.0)
    return (t.V * inv) @ t.U.T


def numerical_rank(M, tol: float = RANK_RTOL) -> int:
    """Count of singular values above tol * sigma_max (zero matrix has rank 0)."""
    if not 0.0 < tol < 1.0:
        raise PreconditionError(f"tol must lie in (0, 1), got {tol}")
    s = svd(M).S
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def rank_truncate(M, k: int) -> np.ndarray:
    """Best rank-k approximation in Frobenius norm (truncated SVD)."""
    if k < 0:
        raise PreconditionError(f"k must be >= 0, got {k}")
    t = svd(M)
    if k >= t.S.size:
        return t.reconstruct()
    return (t.U[:, :k] * t.S[:k]) @ t.V[:, :k].T


def _check_orthonormal(U: np.ndarray, name: str, atol: float = 1e-8) -> None:
    defect = np.abs(U.T @ U - np.eye(U.shape[1])).max() if U.size else 0.0
    if defect > atol:
        raise PreconditionError(f"{name} does not have orthonormal columns (defect {defect:.2e})")


def subspace_sin_angles(U1, U2) -> np.ndarray:
    """Sines of the principal angles between two column spaces.

    Computed from the projection of U2 onto the orthogonal complement of U1,
    which stays accurate for tiny angles. Result is non-decreasing in [0, 1].
    """
    U1 = as_matrix(U1, "U1")
    U2 = as_matrix(U2, "U2")
    if U1.shape != U2.shape:
        raise DimensionMismatchError(f"subspace bases differ in shape: {U1.shape} vs {U2.shape}")
    _check_orthonormal(U1, "U1")
    _check_orthonormal(U2, "U2")
    comp = U2 - U1 @ (U1.T @ U2)
    sines = np.linalg.svd(comp, compute_uv=False)[::-1]
    return np.clip(sines, 0.0, 1.0)


def orthogonal_procrustes(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Orthogonal Q minimizing ||A @ Q - B||_F (reflections allowed)."""
    P, _, Wt = np.linalg.svd(A.T @ B)
    return P @ Wt


@dataclass(frozen=True)
class WedinReport:
    """Evaluation of the singular-subspace perturbation bound at one pair."""

    rho: float
    lhs: float
    rhs: float
    holds: bool


def wedin_bound_check(Mbar, M, k: int) -> WedinReport:
    """Check the sin-theta bound between the leading-k singular subspaces.

    Both matrices must be m x n with m >= n and 1 <= k < n. The gap
    rho = min(min_{i<=k, j>k} |sigma_i(M) - sigma_j(Mbar)|, min_{i<=k} sigma_i(M))
    must be positive, else the bound's hypothesis fails.
    """
    Mbar = as_matrix(Mbar, "Mbar")
    M = as_matrix(M, "M")
    if Mbar.shape != M.shape:
        raise DimensionMismatchError(f"shape mismatch: {Mbar.shape} vs {M.shape}")
    m, n = M.shape
    if m < n:
        raise DimensionMismatchError(f"expected m >= n, got shape {M.shape}")
    if not 1 <= k < n:
        raise PreconditionError(f"k must satisfy 1 <= k < {n}, got {k}")

    t = svd(M)
    tb = svd(Mbar)
    gap = np.abs(t.S[:k, None] - tb.S[None, k:]).min()
    rho = float(min(gap, t.S[:k].min()))
    if rho <= 0.0:
        raise GapViolationError(f"singular value gap rho = {rho} is not positive")

    U1, V1 = t.U[:, :k], t.V[:, :k]
    sin_u = subspace_sin_angles(U1, tb.U[:, :k])
    sin_v = subspace_sin_angles(V1, tb.V[:, :k])
    lhs = float(np.sqrt(np.sum(sin_u**2) + np.sum(sin_v**2)))

    E = Mbar - M
    resid = np.sqrt(np.sum((E @ V1) ** 2) + np.sum((E.T @ U1) ** 2))
    rhs = float(resid / rho)
    return WedinReport(rho=rho, lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + 1e-9))


def group_spectrum_blocks(s: np.ndarray, rtol: float = SPECTRUM_GROUP_RTOL,
                          zero_rtol: float = RANK_RTOL) -> list[slice]:
    """Group a non-increasing singular value vector into equal-value blocks.

    Values below zero_rtol * s[0] form one trailing zero block. Positive
    values join a block while they stay within rtol (relative) of the block's
    leading value.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.size
    if n == 0:
        return []
    top = s[0]
    zcut = zero_rtol * top
    pos = int(np.count_nonzero(s > zcut))
    blocks: list[slice] = []
    start = 0
    for i in range(1, pos):
        if s[start] - s[i] > rtol * s[start]:
            blocks.append(slice(start, i))
            start = i
    if pos > 0:
        blocks.append(slice(start, pos))
    if pos < n:
        blocks.append(slice(pos, n))
    return blocks


def _joint_polar(G: np.ndarray) -> np.ndarray:
    P, _, Wt = np.linalg.svd(G)
    return P @ Wt


def aligned_svd_pair(Mbar, M, group_rtol: float = SPECTRUM_GROUP_RTOL):
    """Full SVDs of Mbar and M with factor bases matched block by block.

    Returns (Ubar, sbar, Vbar, U, s, V). Both outputs are valid full SVDs of
    their matrices. Basis freedom is spent where it is actually available:

    - a block whose singular values in M agree to roundoff is rotated (jointly
      on U and V) toward the reference basis;
    - a block degenerate in Mbar but split in M rotates the *reference* basis
      toward M instead, which keeps both decompositions exact;
    - blocks split on both sides get per-column sign alignment only;
    - trailing null columns (below the rank cutoff of Mbar) are rotated on the
      U and V sides independently, valid up to M's own trailing singular mass.
    """
    Mbar = as_matrix(Mbar, "Mbar")
    M = as_matrix(M, "M")
    if Mbar.shape != M.shape:
        raise DimensionMismatchError(f"shape mismatch: {Mbar.shape} vs {M.shape}")
    try:
        Ub, sb, Vbt = np.linalg.svd(Mbar, full_matrices=True)
        U, s, Vt = np.linalg.svd(M, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD failed to converge: {exc}") from exc
    Ub, Vb = Ub.copy(), Vbt.T.copy()
    U, V = U.copy(), Vt.T.copy()
    m, n = M.shape

    scale = max(sb[0] if sb.size else 0.0, s[0] if s.size else 0.0, 1e-300)
    tight = 64.0 * _EPS * scale
    blocks = group_spectrum_blocks(sb, rtol=group_rtol)
    pos_blocks = [b for b in blocks if sb[b.start] > RANK_RTOL * max(sb[0], 1e-300)]
    pos = pos_blocks[-1].stop if pos_blocks else 0

    for blk in pos_blocks:
        idx = np.arange(blk.start, blk.stop)
        if idx.size == 1:
            i = idx[0]
            if U[:, i] @ Ub[:, i] + V[:, i] @ Vb[:, i] < 0.0:
                U[:, i] = -U[:, i]
                V[:, i] = -V[:, i]
            continue
        spread_m = float(s[idx[0]] - s[idx[-1]])
        spread_ref = float(sb[idx[0]] - sb[idx[-1]])
        if spread_m <= tight:
            Q = _joint_polar(U[:, idx].T @ Ub[:, idx] + V[:, idx].T @ Vb[:, idx])
            U[:, idx] = U[:, idx] @ Q
            V[:, idx] = V[:, idx] @ Q
        elif spread_ref <= tight:
            Q = _joint_polar(Ub[:, idx].T @ U[:, idx] + Vb[:, idx].T @ V[:, idx])
            Ub[:, idx] = Ub[:, idx] @ Q
            Vb[:, idx] = Vb[:, idx] @ Q
        else:
            for i in idx:
                if U[:, i] @ Ub[:, i] + V[:, i] @ Vb[:, i] < 0.0:
                    U[:, i] = -U[:, i]
                    V[:, i] = -V[:, i]

    if pos < m:
        Qu = _joint_polar(U[:, pos:].T @ Ub[:, pos:])
        U[:, pos:] = U[:, pos:] @ Qu
    if pos < n:
        Qv = _joint_polar(V[:, pos:].T @ Vb[:, pos:])
        V[:, pos:] = V[:, pos:] @ Qv
    return Ub, sb, Vb, U, s, V


def perturbed_svd_align(Mbar, M, group_rtol: float = SPECTRUM_GROUP_RTOL) -> SVDTriple:
    """A valid thin SVD of M with factors matched to the SVD of Mbar.

    Mbar must have full numerical rank and the perturbation must keep all of
    M's singular values positive. Within blocks where M is degenerate the
    factors are Procrustes-rotated toward the reference; elsewhere only the
    joint column sign is fixed, which is the entire freedom a valid SVD of M
    offers.
    """
    Mbar = as_matrix(Mbar, "Mbar")
    M = as_matrix(M, "M")
    k = min(M.shape)
    if numerical_rank(Mbar) != k:
        raise PreconditionError("reference matrix must have full numerical rank")
    if numerical_rank(M) != k:
        raise PreconditionError("perturbed matrix lost rank; perturbation too large")
    _, _, _, U, s, V = aligned_svd_pair(Mbar, M, group_rtol=group_rtol)
    return SVDTriple(U=U[:, :k], S=s[:k], V=V[:, :k])
