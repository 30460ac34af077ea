"""Rank-constrained shallow least squares.

Reduces min ||R X - Y||_F^2 over rank(R) <= k to a diagonal approximation
problem via two SVDs, computes closed-form global minimizers and values from
the block spectrum, analyses candidate minima for block/projection structure,
and builds the rank-preserving descent path that strictly improves any
non-greedy rank allocation.

The 1/2 convention of the deep objective is used here as well, so deep and
shallow values compare exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConstructionError,
    DataValidationError,
    DimensionMismatchError,
    PreconditionError,
)
from .linalg import RANK_RTOL, SPECTRUM_GROUP_RTOL, as_matrix, group_spectrum_blocks
from .model import Dataset


@dataclass(frozen=True)
class BlockSpectrum:
    """Distinct diagonal values with multiplicities, strictly decreasing."""

    values: tuple[float, ...]
    multiplicities: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        mults = tuple(int(m) for m in self.multiplicities)
        if len(vals) != len(mults):
            raise DataValidationError("values and multiplicities differ in length")
        if any(m < 1 for m in mults):
            raise DataValidationError("multiplicities must be positive")
        if any(v < 0 for v in vals):
            raise DataValidationError("spectrum values must be non-negative")
        if any(vals[i] <= vals[i + 1] for i in range(len(vals) - 1)):
            raise DataValidationError("spectrum values must be strictly decreasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "multiplicities", mults)

    @classmethod
    def from_singular_values(cls, s, rtol: float = SPECTRUM_GROUP_RTOL) -> "BlockSpectrum":
        """Group a sorted non-increasing value vector into blocks.

        Values below the rank cutoff relative to the leading value collapse
        into a single zero block.
        """
        s = np.asarray(s, dtype=np.float64)
        if s.size == 0:
            raise DataValidationError("cannot build a spectrum from an empty vector")
        if np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
            raise DataValidationError("input values must be sorted non-increasing")
        blocks = group_spectrum_blocks(s, rtol=rtol)
        vals, mults = [], []
        zcut = RANK_RTOL * max(s[0], 1e-300)
        for blk in blocks:
            rep = s[blk.start]
            vals.append(float(rep) if rep > zcut else 0.0)
            mults.append(blk.stop - blk.start)
        return cls(tuple(vals), tuple(mults))

    @property
    def num_blocks(self) -> int:
        return len(self.values)

    @property
    def total(self) -> int:
        return sum(self.multiplicities)

    def block_ranges(self) -> tuple[range, ...]:
        out, start = [], 0
        for m in self.multiplicities:
            out.append(range(start, start + m))
            start += m
        return tuple(out)

    def expand(self) -> np.ndarray:
        """The full sorted diagonal this spectrum groups."""
        return np.repeat(np.asarray(self.values), np.asarray(self.multiplicities))


@dataclass(frozen=True)
class RankAllocation:
    """Per-block ranks assigned under a total rank budget."""

    per_block: tuple[int, ...]

    def __post_init__(self):
        pb = tuple(int(a) for a in self.per_block)
        if any(a < 0 for a in pb):
            raise DataValidationError("block ranks must be non-negative")
        object.__setattr__(self, "per_block", pb)

    @property
    def total(self) -> int:
        return sum(self.per_block)

    def to_text(self) -> str:
        return ",".join(str(a) for a in self.per_block)


def rank_allocation(spectrum: BlockSpectrum, k: int) -> RankAllocation:
    """Greedy allocation: fill the largest blocks first, up to k total.

    Zero-value blocks never receive rank; they contribute nothing to the
    objective.
    """
    if k < 0:
        raise PreconditionError(f"rank budget must be >= 0, got {k}")
    remaining = int(k)
    alloc = []
    for lam, mult in zip(spectrum.values, spectrum.multiplicities):
        if lam <= 0.0 or remaining <= 0:
            alloc.append(0)
            continue
        take = min(mult, remaining)
        alloc.append(take)
        remaining -= take
    return RankAllocation(tuple(alloc))


def allocation_value(spectrum: BlockSpectrum, allocation: RankAllocation) -> float:
    """Half of sum_i (m_i - a_i) * lambda_i^2 for any feasible allocation."""
    if len(allocation.per_block) != spectrum.num_blocks:
        raise DimensionMismatchError("allocation does not match the spectrum's blocks")
    if any(a > m for a, m in zip(allocation.per_block, spectrum.multiplicities)):
        raise PreconditionError("allocation exceeds a block's multiplicity")
    return 0.5 * float(
        sum(
            (m - a) * lam * lam
            for lam, m, a in zip(spectrum.values, spectrum.multiplicities, allocation.per_block)
        )
    )


def global_min_value(spectrum: BlockSpectrum, k: int) -> float:
    """Optimal objective value of the diagonal problem at rank budget k (halved)."""
    return allocation_value(spectrum, rank_allocation(spectrum, k))


@dataclass(frozen=True)
class ReducedProblem:
    """Diagonal form of the shallow problem plus the transforms mapping back.

    Stores the SVD factors of X (x_left, x_singulars, x_right) and of the
    rotated target (target_left, target_singulars, target_right), together
    with the constant objective offset carried by target energy outside the
    row space of X.
    """

    target_singulars: np.ndarray
    target_left: np.ndarray
    target_right: np.ndarray
    x_left: np.ndarray
    x_singulars: np.ndarray
    x_right: np.ndarray
    offset: float
    candidate: np.ndarray | None = field(default=None)

    @property
    def out_dim(self) -> int:
        return self.target_left.shape[0]

    @property
    def in_dim(self) -> int:
        return self.target_right.shape[0]

    def sigma2_matrix(self) -> np.ndarray:
        S = np.zeros((self.out_dim, self.in_dim))
        r = self.target_singulars.size
        S[np.arange(r), np.arange(r)] = self.target_singulars
        return S

    def spectrum(self, rtol: float = SPECTRUM_GROUP_RTOL) -> BlockSpectrum:
        return BlockSpectrum.from_singular_values(self.target_singulars, rtol=rtol)

    def padded_spectrum(self, rtol: float = SPECTRUM_GROUP_RTOL) -> BlockSpectrum:
        """Spectrum of the square zero-padded diagonal target."""
        n = max(self.out_dim, self.in_dim)
        s = np.zeros(n)
        s[: self.target_singulars.size] = self.target_singulars
        return BlockSpectrum.from_singular_values(s, rtol=rtol)

    def pad_square(self, T: np.ndarray) -> np.ndarray:
        """Zero-pad a reduced candidate to the square analysis coordinates."""
        T = as_matrix(T, "T")
        if T.shape != (self.out_dim, self.in_dim):
            raise DimensionMismatchError(
                f"expected {(self.out_dim, self.in_dim)}, got {T.shape}"
            )
        n = max(self.out_dim, self.in_dim)
        out = np.zeros((n, n))
        out[: T.shape[0], : T.shape[1]] = T
        return out

    def crop_rect(self, T: np.ndarray) -> np.ndarray:
        """Inverse of pad_square."""
        T = as_matrix(T, "T")
        return T[: self.out_dim, : self.in_dim]

    def to_shallow(self, T: np.ndarray) -> np.ndarray:
        """Map a reduced candidate back to shallow coordinates."""
        T = as_matrix(T, "T")
        if T.shape == (max(self.out_dim, self.in_dim),) * 2 and T.shape != (
            self.out_dim,
            self.in_dim,
        ):
            T = self.crop_rect(T)
        if T.shape != (self.out_dim, self.in_dim):
            raise DimensionMismatchError(
                f"expected {(self.out_dim, self.in_dim)} (or padded square), got {T.shape}"
            )
        inv = 1.0 / self.x_singulars
        S = (self.target_left @ T @ self.target_right.T) * inv[None, :]
        return S @ self.x_left.T

    def from_shallow(self, R: np.ndarray) -> np.ndarray:
        """Map a shallow matrix into the reduced diagonal coordinates."""
        R = as_matrix(R, "R")
        if R.shape != (self.out_dim, self.in_dim):
            raise DimensionMismatchError(
                f"expected {(self.out_dim, self.in_dim)}, got {R.shape}"
            )
        S = (R @ self.x_left) * self.x_singulars[None, :]
        return self.target_left.T @ S @ self.target_right

    def reduced_value(self, T: np.ndarray) -> float:
        """Objective value (halved, offset included) of a reduced candidate."""
        T = as_matrix(T, "T")
        if T.shape != (self.out_dim, self.in_dim):
            T = self.crop_rect(T)
        diff = T - self.sigma2_matrix()
        return 0.5 * float(np.sum(diff * diff)) + self.offset


def shallow_loss(R, data: Dataset) -> float:
    """Half squared Frobenius residual ||R X - Y||^2 / 2."""
    R = as_matrix(R, "R")
    if R.shape != (data.output_dim, data.input_dim):
        raise DimensionMismatchError(
            f"R must be {(data.output_dim, data.input_dim)}, got {R.shape}"
        )
    E = R @ data.X - data.Y
    return 0.5 * float(np.sum(E * E))


def reduce_to_diagonal(data: Dataset, candidate=None) -> ReducedProblem:
    """Rotate the shallow problem into diagonal coordinates.

    After the reduction the objective is half the squared distance of the
    reduced variable to a rectangular diagonal target, plus a constant equal
    to half the target energy outside the row space of X. When `candidate`
    is given, it is mapped into the reduced coordinates and carried along.
    """
    U1, s1, V1t = np.linalg.svd(data.X, full_matrices=True)
    if s1.size == 0 or s1[-1] <= RANK_RTOL * s1[0]:
        raise PreconditionError("X must have full row rank")
    V1 = V1t.T
    Yv = data.Y @ V1
    d0 = data.input_dim
    Yhat = Yv[:, :d0]
    tail = Yv[:, d0:]
    offset = 0.5 * float(np.sum(tail * tail))
    U2, s2, V2t = np.linalg.svd(Yhat, full_matrices=True)
    rp = ReducedProblem(
        target_singulars=s2,
        target_left=U2,
        target_right=V2t.T,
        x_left=U1,
        x_singulars=s1,
        x_right=V1,
        offset=offset,
        candidate=None,
    )
    if candidate is not None:
        rp = replace(rp, candidate=rp.from_shallow(candidate))
    return rp


def global_minimizer(data: Dataset, k: int) -> np.ndarray:
    """Closed-form optimum of the rank-k constrained shallow problem.

    Keeps the leading k diagonal entries of the reduced target (leading
    coordinates on ties, which fixes a deterministic choice among non-unique
    minimizers) and maps back through the reduction transforms.
    """
    if not 0 <= k <= min(data.output_dim, data.input_dim):
        raise PreconditionError(
            f"k must lie in [0, {min(data.output_dim, data.input_dim)}], got {k}"
        )
    rp = reduce_to_diagonal(data)
    T = np.zeros((rp.out_dim, rp.in_dim))
    kk = min(k, rp.target_singulars.size)
    T[np.arange(kk), np.arange(kk)] = rp.target_singulars[:kk]
    return rp.to_shallow(T)


@dataclass(frozen=True)
class BlockReport:
    """Structure checks of a reduced candidate against the block spectrum."""

    is_block_diagonal: bool
    is_symmetric: bool
    projection_defects: tuple[float, ...]
    allocation: RankAllocation
    is_global: bool
    off_block_mass: float

    @property
    def blocks_pass(self) -> bool:
        return self.is_block_diagonal and self.is_symmetric

    def to_text(self) -> str:
        lines = [
            f"is_block_diagonal: {str(self.is_block_diagonal).lower()}",
            f"is_symmetric: {str(self.is_symmetric).lower()}",
            f"off_block_mass: {self.off_block_mass:.6e}",
        ]
        for i, d in enumerate(self.projection_defects, start=1):
            lines.append(f"projection_defect_{i}: {d:.6e}")
        lines.append(f"allocation: {self.allocation.to_text()}")
        lines.append(f"total_rank: {self.allocation.total}")
        lines.append(f"is_global: {str(self.is_global).lower()}")
        return "\n".join(lines)


def analyze_candidate(T, spectrum: BlockSpectrum, tol: float = 1e-8) -> BlockReport:
    """Check the block-diagonal projection structure of a candidate minimum.

    T lives in the square padded reduced coordinates; the spectrum (including
    any zero block) must cover its full dimension. The verdict `is_global`
    compares the candidate's per-block ranks against the greedy allocation at
    the candidate's own total rank.
    """
    T = as_matrix(T, "T")
    n = spectrum.total
    if T.shape != (n, n):
        raise DimensionMismatchError(
            f"candidate must be {n}x{n} to match the spectrum, got {T.shape}"
        )
    lam1 = spectrum.values[0] if spectrum.values else 0.0
    thr = tol * (1.0 + lam1)
    ranges = spectrum.block_ranges()

    mask = np.zeros((n, n), dtype=bool)
    for rng_i in ranges:
        mask[np.ix_(rng_i, rng_i)] = True
    off_mass = float(np.abs(T[~mask]).max()) if (~mask).any() else 0.0
    is_block_diag = off_mass <= thr
    is_symmetric = float(np.abs(T - T.T).max()) <= thr

    defects = []
    ranks = []
    for lam, rng_i in zip(spectrum.values, ranges):
        Ti = T[np.ix_(rng_i, rng_i)]
        if lam > 0.0:
            P = Ti / lam
            defects.append(float(np.linalg.norm(P @ P - P)))
            sv = np.linalg.svd(Ti, compute_uv=False)
            ranks.append(int(np.count_nonzero(sv > thr)))
        else:
            defects.append(float(np.linalg.norm(Ti)))
            sv = np.linalg.svd(Ti, compute_uv=False) if Ti.size else np.zeros(0)
            ranks.append(int(np.count_nonzero(sv > thr)))
    allocation = RankAllocation(tuple(ranks))
    greedy = rank_allocation(spectrum, allocation.total)
    return BlockReport(
        is_block_diagonal=is_block_diag,
        is_symmetric=is_symmetric,
        projection_defects=tuple(defects),
        allocation=allocation,
        is_global=allocation.per_block == greedy.per_block,
        off_block_mass=off_mass,
    )


def candidate_from_allocation(
    spectrum: BlockSpectrum, allocation: RankAllocation, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Block-structured candidate realizing a given allocation.

    Each block receives lambda_i times a rank-a_i projection: onto the leading
    coordinates, or onto a random subspace when a generator is supplied.
    """
    if len(allocation.per_block) != spectrum.num_blocks:
        raise DimensionMismatchError("allocation does not match the spectrum's blocks")
    n = spectrum.total
    T = np.zeros((n, n))
    for lam, a, rng_i in zip(spectrum.values, allocation.per_block, spectrum.block_ranges()):
        m = len(rng_i)
        if a > m:
            raise PreconditionError("allocation exceeds a block's multiplicity")
        if a == 0 or lam == 0.0:
            continue
        if rng is None:
            P = np.zeros((m, m))
            P[np.arange(a), np.arange(a)] = 1.0
        else:
            Q, _ = np.linalg.qr(rng.standard_normal((m, m)))
            P = Q[:, :a] @ Q[:, :a].T
        T[np.ix_(rng_i, rng_i)] = lam * P
    return T


def descent_path(
    Tstar, spectrum: BlockSpectrum, i1: int, i2: int, theta: float
) -> np.ndarray:
    """Rank-preserving path T(theta) strictly improving a non-greedy allocation.

    Moves one rank unit of block i2 toward the under-filled block i1 < i2:
    T(theta) = T* - lam_{i2} u u^T + c(theta) w(theta) w(theta)^T with
    c(theta) = lam_{i1} sin^2(theta) + lam_{i2} cos^2(theta) and
    w = u cos(theta) + ubar sin(theta). T(0) = T* and the objective change is
    lam_{i2}^2 - c(theta)^2 (in un-halved form), strictly decreasing on
    (0, pi/2] whenever lam_{i1} > lam_{i2}.
    """
    T = as_matrix(Tstar, "Tstar")
    if not 0 <= i1 < i2 < spectrum.num_blocks:
        raise PreconditionError(f"need 0 <= i1 < i2 < {spectrum.num_blocks}, got ({i1}, {i2})")
    if not 0.0 <= theta <= np.pi / 2 + 1e-12:
        raise PreconditionError(f"theta must lie in [0, pi/2], got {theta}")
    report = analyze_candidate(T, spectrum)
    lam1 = spectrum.values[0] if spectrum.values else 0.0
    struct_tol = 1e-6 * (1.0 + lam1)
    if not report.blocks_pass or any(d > struct_tol for d in report.projection_defects):
        raise PreconditionError("candidate fails block/projection structure checks")
    alloc = report.allocation.per_block
    mult = spectrum.multiplicities
    if alloc[i1] >= mult[i1]:
        raise ConstructionError(f"block {i1} has no spare capacity")
    if alloc[i2] < 1:
        raise ConstructionError(f"block {i2} has no rank to donate")

    ranges = spectrum.block_ranges()
    n = spectrum.total
    lam_a = spectrum.values[i1]
    lam_b = spectrum.values[i2]

    # donor direction: an eigenvector of block i2 at eigenvalue lam_b
    I2 = list(ranges[i2])
    evals, evecs = np.linalg.eigh(T[np.ix_(I2, I2)])
    u_local = evecs[:, -1]
    if u_local[np.argmax(np.abs(u_local))] < 0:
        u_local = -u_local
    u = np.zeros(n)
    u[I2] = u_local

    # receiving direction: inside block i1, orthogonal to its retained eigenvectors
    I1 = list(ranges[i1])
    evals1, evecs1 = np.linalg.eigh(T[np.ix_(I1, I1)])
    retained = evecs1[:, len(I1) - alloc[i1]:] if alloc[i1] > 0 else np.zeros((len(I1), 0))
    ubar_local = None
    for j in range(len(I1)):
        e = np.zeros(len(I1))
        e[j] = 1.0
        resid = e - retained @ (retained.T @ e)
        norm = np.linalg.norm(resid)
        if norm > 0.5:
            ubar_local = resid / norm
            break
    if ubar_local is None:
        raise ConstructionError(f"no direction orthogonal to the retained basis in block {i1}")
    ubar = np.zeros(n)
    ubar[I1] = ubar_local

    c = lam_a * np.sin(theta) ** 2 + lam_b * np.cos(theta) ** 2
    w = u * np.cos(theta) + ubar * np.sin(theta)
    return T - lam_b * np.outer(u, u) + c * np.outer(w, w)
