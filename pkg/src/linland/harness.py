"""Experiment engine: instance generation, gradient descent, classification.

Runs seeded, reproducible descent trials over deep linear networks, classifies
the endpoints against the closed-form global value of the rank-constrained
shallow problem, and aggregates the landscape experiments (including the
masked-completion variant, which is empirical: no closed-form global value
exists under masking, so trials are judged against the best value found).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DataValidationError,
    DivergenceError,
    GenerationError,
    LinlandError,
    PreconditionError,
)
from .model import Dataset, NetworkDims, WeightStack, hessian, loss, product
from .shallow import global_min_value, reduce_to_diagonal

VALID_POLICIES = ("backtracking", "fixed")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a descent experiment needs to be reproducible.

    grad_tol and loss_gap_tol are relative factors: the effective thresholds
    are grad_tol * (1 + ||Y||_F) and loss_gap_tol * (1 + |global value|).
    """

    dims: NetworkDims
    num_samples: int
    trials: int = 1
    seed: int = 0
    step_policy: str = "backtracking"
    step_size: float = 0.05
    max_iters: int = 200_000
    grad_tol: float = 1e-8
    loss_gap_tol: float = 1e-6
    armijo: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    stall_window: int = 1000
    nudge_norm: float = 1e-7
    max_nudges: int = 50
    divergence_cap: float = 1e12

    def __post_init__(self):
        if self.step_policy not in VALID_POLICIES:
            raise DataValidationError(f"step_policy must be one of {VALID_POLICIES}")
        if self.trials < 1 or self.max_iters < 1:
            raise DataValidationError("trials and max_iters must be positive")
        if self.grad_tol <= 0 or self.loss_gap_tol <= 0:
            raise DataValidationError("tolerances must be positive")
        if self.step_size <= 0 or self.nudge_norm <= 0:
            raise DataValidationError("step_size and nudge_norm must be positive")
        if self.num_samples < max(self.dims.widths[0], self.dims.widths[-1]):
            raise PreconditionError(
                f"need num_samples >= max(d_0, d_H) = "
                f"{max(self.dims.widths[0], self.dims.widths[-1])}, got {self.num_samples}"
            )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims.widths),
            "num_samples": self.num_samples,
            "trials": self.trials,
            "seed": self.seed,
            "step_policy": self.step_policy,
            "step_size": self.step_size,
            "max_iters": self.max_iters,
            "grad_tol": self.grad_tol,
            "loss_gap_tol": self.loss_gap_tol,
            "stall_window": self.stall_window,
            "nudge_norm": self.nudge_norm,
            "max_nudges": self.max_nudges,
        }


@dataclass(frozen=True)
class CriticalPointReport:
    """Gradient, curvature, and value diagnostics at one weight stack."""

    gradient_norm: float
    hessian_min_eig: float
    hessian_max_eig: float
    loss: float
    global_value: float
    gap: float
    classification: str

    def to_dict(self) -> dict:
        return {
            "gradient_norm": self.gradient_norm,
            "hessian_min_eig": self.hessian_min_eig,
            "hessian_max_eig": self.hessian_max_eig,
            "loss": self.loss,
            "global_value": self.global_value,
            "gap": self.gap,
            "classification": self.classification,
        }


@dataclass(frozen=True)
class TrialResult:
    seed_index: int
    iterations: int
    report: CriticalPointReport
    reached_global: bool
    nudges: int = 0
    status: str = "converged"
    trajectory: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "seed_index": self.seed_index,
            "iterations": self.iterations,
            "reached_global": self.reached_global,
            "nudges": self.nudges,
            "status": self.status,
            "report": self.report.to_dict(),
        }


@dataclass(frozen=True)
class MaskedDataset:
    """Completion target: Y, the observed-entry mask, and the factor dims."""

    target: np.ndarray
    mask: np.ndarray
    dims: NetworkDims

    def __post_init__(self):
        Y = np.asarray(self.target, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        expect = (self.dims.widths[-1], self.dims.widths[0])
        if Y.shape != expect:
            raise DataValidationError(f"target must be {expect}, got {Y.shape}")
        if mask.shape != Y.shape:
            raise DataValidationError("mask shape must match the target")
        if not mask.any():
            raise DataValidationError("mask must observe at least one entry")
        if not np.all(np.isfinite(Y)):
            raise DataValidationError("target contains NaN or Inf")
        object.__setattr__(self, "target", Y)
        object.__setattr__(self, "mask", mask)

    @property
    def mask_float(self) -> np.ndarray:
        return self.mask.astype(np.float64)

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())


def initial_stack(dims: NetworkDims, rng: np.random.Generator) -> WeightStack:
    """Random initialization with entries scaled by 1/sqrt(fan-in)."""
    layers = []
    for r, c in dims.layer_shapes:
        layers.append(rng.standard_normal((r, c)) / np.sqrt(c))
    return WeightStack(tuple(layers))


def _generate_data(dims: NetworkDims, m: int, rng: np.random.Generator,
                   retries: int = 100) -> Dataset:
    d0, dH = dims.widths[0], dims.widths[-1]
    X = None
    for _ in range(retries):
        cand = rng.standard_normal((d0, m))
        if np.linalg.matrix_rank(cand) == d0:
            X = cand
            break
    if X is None:
        raise GenerationError("could not draw a full-row-rank X")
    Y = None
    for _ in range(retries):
        cand = rng.standard_normal((dH, m))
        if np.linalg.matrix_rank(cand) == dH:
            Y = cand
            break
    if Y is None:
        raise GenerationError("could not draw a full-row-rank Y")
    return Dataset(X, Y)


def generate_instance(config: ExperimentConfig) -> tuple[Dataset, WeightStack]:
    """Seeded random instance: full-row-rank data plus a fan-in-scaled init."""
    rng = np.random.default_rng(config.seed)
    data = _generate_data(config.dims, config.num_samples, rng)
    return data, initial_stack(config.dims, rng)


def shallow_global_value(data: Dataset, dims: NetworkDims) -> float:
    """Global optimum value of the rank-d_p constrained shallow problem."""
    rp = reduce_to_diagonal(data)
    return global_min_value(rp.spectrum(), dims.bottleneck_width) + rp.offset


def _run_chunked_descent(theta, widths, chunk_fn, chunk_args, config: ExperimentConfig,
                         grad_eff: float, rng: np.random.Generator,
                         record: bool = False):
    """Shared chunked driver: stall-nudge logic around the kernel loops."""
    fixed = config.step_policy == "fixed"
    eta = config.step_size
    it_total = 0
    nudges = 0
    status = "max-iters"
    prev_loss = np.inf
    prev_gn = np.inf
    f = np.nan
    gn = np.nan
    traj_parts: list[np.ndarray] = []

    while it_total < config.max_iters:
        chunk = int(min(config.stall_window, config.max_iters - it_total))
        rec_l = np.empty(chunk) if record else np.empty(1)
        rec_g = np.empty(chunk) if record else np.empty(1)
        theta, steps, f, gn, eta, st = chunk_fn(
            theta, widths, *chunk_args, fixed, eta, grad_eff, chunk,
            config.shrink, config.grow, config.armijo, config.divergence_cap,
            rec_l, rec_g, record,
        )
        if record:
            rows = steps if st == _kernels.STATUS_EXHAUSTED else min(steps + 1, chunk)
            if rows > 0:
                its = it_total + np.arange(rows)
                traj_parts.append(np.column_stack([its, rec_l[:rows], rec_g[:rows]]))
        it_total += steps
        if st == _kernels.STATUS_CONVERGED:
            status = "converged"
            break
        if st == _kernels.STATUS_DIVERGED:
            raise DivergenceError(
                f"loss exceeded {config.divergence_cap:.1e} after {it_total} iterations; "
                "reduce the step size"
            )
        # a stall means BOTH signals froze over the window: loss flat and the
        # gradient no longer shrinking; near a minimum the gradient still
        # decays geometrically, so plain slow convergence is left alone
        loss_flat = prev_loss - f <= 1e-12 * (1.0 + abs(f))
        grad_stuck = gn >= 0.9 * prev_gn
        if st == _kernels.STATUS_UNDERFLOW or (loss_flat and grad_stuck):
            if nudges >= config.max_nudges:
                status = "stalled"
                break
            bump = rng.standard_normal(theta.size)
            theta = theta + config.nudge_norm * bump / np.linalg.norm(bump)
            nudges += 1
        prev_loss = f
        prev_gn = gn

    traj = np.concatenate(traj_parts, axis=0) if (record and traj_parts) else None
    return theta, it_total, float(f), float(gn), nudges, status, traj


def classify_critical_point(W: WeightStack, data: Dataset,
                            config: ExperimentConfig) -> CriticalPointReport:
    """Classify a point as non-critical, global-min, saddle, or bad-local-min.

    The last label marks the combination the landscape theory rules out
    (critical, non-global value, no negative curvature); it appearing in an
    experiment is a finding, not a crash.
    """
    widths = _kernels.widths_array(W.dims.widths)
    theta = W.to_flat()
    g = _kernels.grad_flat(theta, widths, data.X, data.Y)
    gn = float(np.linalg.norm(g))
    f = float(_kernels.loss_flat(theta, widths, data.X, data.Y))
    gv = shallow_global_value(data, W.dims)
    gap = f - gv

    eigs = np.linalg.eigvalsh(hessian(W, data))
    h_min, h_max = float(eigs[0]), float(eigs[-1])

    grad_eff = config.grad_tol * data.target_scale
    gap_eff = config.loss_gap_tol * (1.0 + abs(gv))
    if gap < -gap_eff:
        raise LinlandError(
            f"loss {f} undercuts the global value {gv}; the reduction is inconsistent"
        )
    if gn > grad_eff:
        label = "non-critical"
    elif gap <= gap_eff:
        label = "global-min"
    elif h_min < -1e-6 * max(abs(h_min), abs(h_max), 1e-300):
        label = "saddle"
    else:
        label = "bad-local-min"
    return CriticalPointReport(
        gradient_norm=gn,
        hessian_min_eig=h_min,
        hessian_max_eig=h_max,
        loss=f,
        global_value=gv,
        gap=gap,
        classification=label,
    )


def gradient_descent(W0: WeightStack, data: Dataset, config: ExperimentConfig,
                     rng: np.random.Generator | None = None,
                     record_trajectory: bool = False,
                     seed_index: int = 0) -> TrialResult:
    """Descend from W0 with the configured step policy and classify the endpoint.

    Backtracking keeps the loss non-increasing; a fixed step raises
    DivergenceError past the divergence cap. When the gradient stalls above
    tolerance with the loss flat for a full window, a tiny seeded nudge is
    applied and counted.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    widths = _kernels.widths_array(W0.dims.widths)
    grad_eff = config.grad_tol * data.target_scale
    theta, iters, _, _, nudges, status, traj = _run_chunked_descent(
        W0.to_flat(), widths, _kernels.gd_chunk, (data.X, data.Y), config,
        grad_eff, rng, record=record_trajectory,
    )
    W_final = WeightStack.from_flat(theta, W0.dims)
    report = classify_critical_point(W_final, data, config)
    return TrialResult(
        seed_index=seed_index,
        iterations=iters,
        report=report,
        reached_global=report.classification == "global-min",
        nudges=nudges,
        status=status,
        trajectory=traj,
    )


def descend_weights(W0: WeightStack, data: Dataset, config: ExperimentConfig,
                    rng: np.random.Generator | None = None,
                    record_trajectory: bool = False):
    """Like gradient_descent but also returns the final stack and trajectory."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    widths = _kernels.widths_array(W0.dims.widths)
    grad_eff = config.grad_tol * data.target_scale
    theta, iters, f, gn, nudges, status, traj = _run_chunked_descent(
        W0.to_flat(), widths, _kernels.gd_chunk, (data.X, data.Y), config,
        grad_eff, rng, record=record_trajectory,
    )
    return WeightStack.from_flat(theta, W0.dims), iters, f, gn, nudges, status, traj


def _relative_gap(report: CriticalPointReport) -> float:
    return report.gap / (1.0 + abs(report.global_value))


def no_bad_local_minima_experiment(config: ExperimentConfig, n_jobs: int = 1) -> dict:
    """Independent descent trials hunting for a non-global minimum.

    Each trial draws its own data and init from (seed, trial index). The
    landscape claim holds on the run when every converged trial classifies as
    a global minimum.
    """

    def run(t: int) -> TrialResult:
        rng = np.random.default_rng([config.seed, t])
        data = _generate_data(config.dims, config.num_samples, rng)
        W0 = initial_stack(config.dims, rng)
        nudge_rng = np.random.default_rng([config.seed, t, 1])
        return gradient_descent(W0, data, config, rng=nudge_rng, seed_index=t)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(config.trials)))
    else:
        results = [run(t) for t in range(config.trials)]

    converged = [r for r in results if r.status == "converged"]
    global_count = sum(1 for r in converged if r.reached_global)
    saddle_count = sum(1 for r in converged if r.report.classification == "saddle")
    bad_count = sum(1 for r in results if r.report.classification == "bad-local-min")
    max_gap = max((_relative_gap(r.report) for r in converged), default=0.0)
    return {
        "config": config.to_dict(),
        "trials": config.trials,
        "converged": len(converged),
        "global_count": global_count,
        "saddle_terminated": saddle_count,
        "bad_local_minima": bad_count,
        "global_fraction": (global_count / len(converged)) if converged else 0.0,
        "max_gap_converged": max_gap,
        "nudges_total": sum(r.nudges for r in results),
        "theorem_holds": bool(converged) and global_count == len(converged),
        "per_trial": [r.to_dict() for r in results],
    }


def generate_masked_instance(dims: NetworkDims, rank: int, observe_fraction: float,
                             seed: int, retries: int = 100) -> MaskedDataset:
    """Planted low-rank target with a Bernoulli-observed entry mask."""
    if not 0.0 < observe_fraction <= 1.0:
        raise PreconditionError(f"observe_fraction must lie in (0, 1], got {observe_fraction}")
    rng = np.random.default_rng(seed)
    dH, d0 = dims.widths[-1], dims.widths[0]
    if rank > min(dH, d0):
        raise PreconditionError(f"planted rank {rank} exceeds min(d_H, d_0)")
    P = rng.standard_normal((dH, rank))
    Q = rng.standard_normal((rank, d0))
    Y = P @ Q / np.sqrt(rank)
    for _ in range(retries):
        mask = rng.random((dH, d0)) < observe_fraction
        if mask.any():
            return MaskedDataset(target=Y, mask=mask, dims=dims)
    raise GenerationError("could not draw a non-empty observation mask")


def masked_completion_experiment(config: ExperimentConfig, masked: MaskedDataset,
                                 observe_fraction: float, n_jobs: int = 1) -> dict:
    """Minimize the observed-entry squared loss over deep factors, many seeds.

    EMPIRICAL: no closed-form global value exists under masking, so the report
    scores each trial against the best value found across all trials.
    """
    if not 0.0 < observe_fraction <= 1.0:
        raise PreconditionError(f"observe_fraction must lie in (0, 1], got {observe_fraction}")
    dims = masked.dims
    widths = _kernels.widths_array(dims.widths)
    maskf = masked.mask_float
    observed_norm = float(np.linalg.norm(masked.target * maskf))
    grad_eff = config.grad_tol * (1.0 + observed_norm)

    def run(t: int) -> dict:
        rng = np.random.default_rng([config.seed, t])
        W0 = initial_stack(dims, rng)
        nudge_rng = np.random.default_rng([config.seed, t, 1])
        theta, iters, f, gn, nudges, status, _ = _run_chunked_descent(
            W0.to_flat(), widths, _kernels.masked_gd_chunk,
            (masked.target, maskf), config, grad_eff, nudge_rng,
        )
        return {
            "seed_index": t,
            "iterations": iters,
            "final_loss": f,
            "gradient_norm": gn,
            "nudges": nudges,
            "status": status,
        }

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            per_trial = list(pool.map(run, range(config.trials)))
    else:
        per_trial = [run(t) for t in range(config.trials)]

    finals = [r["final_loss"] for r in per_trial if r["status"] == "converged"]
    best = min(finals) if finals else float("nan")
    tol = config.loss_gap_tol * (1.0 + abs(best)) if finals else 0.0
    success = sum(1 for f in finals if f <= best + tol)
    return {
        "config": config.to_dict(),
        "empirical": True,
        "observe_fraction": observe_fraction,
        "observed_entries": masked.observed_count,
        "trials": config.trials,
        "converged": len(finals),
        "best_value": best,
        "success_count": success,
        "success_fraction": (success / len(finals)) if finals else 0.0,
        "per_trial": per_trial,
    }


def factor_into_stack(R: np.ndarray, dims: NetworkDims) -> WeightStack:
    """Weight stack whose product equals R exactly (rank(R) <= every width)."""
    R = np.asarray(R, dtype=np.float64)
    dH, d0 = dims.widths[-1], dims.widths[0]
    if R.shape != (dH, d0):
        raise DataValidationError(f"R must be {(dH, d0)}, got {R.shape}")
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    r = int(np.count_nonzero(s > 1e-13 * s[0])) if s.size and s[0] > 0 else 0
    if r > dims.bottleneck_width:
        raise PreconditionError(
            f"rank {r} does not fit through the bottleneck {dims.bottleneck_width}"
        )
    root = np.sqrt(s[:r])
    layers = []
    H = dims.depth
    for i in range(1, H + 1):
        rows, cols = dims.layer_shapes[i - 1]
        L = np.zeros((rows, cols))
        if i == 1 and H == 1:
            layers.append(R.copy())
            continue
        if i == 1:
            L[:r, :] = root[:, None] * Vt[:r, :]
        elif i == H:
            L[:, :r] = U[:, :r] * root[None, :]
        else:
            L[np.arange(r), np.arange(r)] = 1.0
        layers.append(L)
    return WeightStack(tuple(layers))


def plant_rank_deficient_minimum(seed: int = 0, m: int = 8) -> tuple[Dataset, WeightStack]:
    """A genuine global minimum of a (3,2,2,3) network whose product has rank 1.

    The target's visible part through X is rank one while Y keeps full row
    rank, so the optimum sits below the bottleneck rank: the configuration
    every rank-restoring construction is built to repair. The middle factor
    is rank-deficient; the outer layers are full rank.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3, m))
    W1 = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    h = W1.T @ b
    a = rng.standard_normal(2)
    a /= np.linalg.norm(a)
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    u2 = rng.standard_normal(3)
    u2 -= (u2 @ u) * u
    u2 /= np.linalg.norm(u2)
    a_perp = np.array([-a[1], a[0]])
    proj = X.T @ np.linalg.inv(X @ X.T) @ X
    N = rng.standard_normal((3, m)) @ (np.eye(m) - proj)
    N *= 1.0 / max(1.0, np.linalg.norm(N) / 2.0)
    Y = np.outer(u, X.T @ h) + N
    data = Dataset(X, Y)
    W2 = np.outer(a, b)
    W3 = np.outer(u, a) + np.outer(u2, a_perp)
    return data, WeightStack((W1, W2, W3))
