"""Command-line front end.

Subcommands: gen, train, analyze, perturb {repair|sweep|factor}, verify,
complete. Reports are JSON with an embedded run manifest; matrices travel as
plain comma-separated text. LANDSCAPE_SEED overrides --seed when set. All
diagnostics go to stderr; exit status is 0 exactly when every requested check
passes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .constructors import (
    PerturbationBudget,
    deep_to_shallow_witness,
    factor_perturbed_product,
    full_rank_perturbation,
    rank_restoring_sweep,
)
from .errors import CertificationError, LinlandError, NotLocalMinimumError
from .harness import (
    ExperimentConfig,
    classify_critical_point,
    descend_weights,
    generate_masked_instance,
    initial_stack,
    masked_completion_experiment,
    no_bad_local_minima_experiment,
    shallow_global_value,
    _generate_data,
)
from .linalg import numerical_rank
from .matio import load_weight_stack, read_matrix, save_weight_stack, write_matrix
from .model import Dataset, NetworkDims, WeightStack, loss, product
from .shallow import (
    BlockSpectrum,
    RankAllocation,
    candidate_from_allocation,
    descent_path,
    global_min_value,
    global_minimizer,
    rank_allocation,
    reduce_to_diagonal,
    shallow_loss,
)


def _resolve_seed(args) -> int:
    env = os.environ.get("LANDSCAPE_SEED", "").strip()
    if env:
        return int(env)
    return int(args.seed)


def _parse_dims(text: str) -> NetworkDims:
    widths = tuple(int(w) for w in text.split(","))
    return NetworkDims(widths)


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _manifest(command: str, arguments: dict, inputs: list, outputs: list, t0: float) -> dict:
    return {
        "command": command,
        "version": __version__,
        "arguments": arguments,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_seconds": time.time() - t0,
    }


def _load_dataset(data_dir: str) -> Dataset:
    d = Path(data_dir)
    return Dataset(read_matrix(d / "X.txt"), read_matrix(d / "Y.txt"))


def cmd_gen(args) -> int:
    t0 = time.time()
    dims = _parse_dims(args.dims)
    seed = _resolve_seed(args)
    rng = np.random.default_rng(seed)
    data = _generate_data(dims, args.samples, rng)
    W0 = initial_stack(dims, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "X.txt", data.X)
    write_matrix(out / "Y.txt", data.Y)
    (out / "dims.txt").write_text(",".join(str(w) for w in dims.widths) + "\n")
    save_weight_stack(out / "weights", W0)
    report = {
        "manifest": _manifest(
            "gen",
            {"dims": list(dims.widths), "samples": args.samples, "seed": seed},
            [],
            [out / "X.txt", out / "Y.txt", out / "dims.txt", out / "weights"],
            t0,
        ),
        "results": {
            "x_rank": numerical_rank(data.X),
            "y_rank": numerical_rank(data.Y),
            "initial_loss": loss(W0, data),
        },
    }
    _emit(report, args.report)
    return 0


def _config_from_args(args, dims: NetworkDims, samples: int, seed: int,
                      trials: int = 1) -> ExperimentConfig:
    return ExperimentConfig(
        dims=dims,
        num_samples=samples,
        trials=trials,
        seed=seed,
        step_policy=args.policy,
        step_size=args.step,
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
        loss_gap_tol=args.gap_tol,
    )


def cmd_train(args) -> int:
    t0 = time.time()
    data = _load_dataset(args.data)
    W0 = load_weight_stack(Path(args.weights))
    seed = _resolve_seed(args)
    config = _config_from_args(args, W0.dims, data.num_samples, seed)
    W_fin, iters, f, gn, nudges, status, traj = descend_weights(
        W0, data, config, rng=np.random.default_rng(seed),
        record_trajectory=args.trajectory is not None,
    )
    outputs = []
    if args.out:
        save_weight_stack(Path(args.out), W_fin)
        outputs.append(args.out)
    if args.trajectory is not None and traj is not None:
        lines = ["iteration,loss,gradient_norm"]
        lines += [f"{int(i)},{l:.17g},{g:.17g}" for i, l, g in traj]
        Path(args.trajectory).write_text("\n".join(lines) + "\n")
        outputs.append(args.trajectory)
    report = {
        "manifest": _manifest(
            "train",
            {"data": args.data, "weights": args.weights, "seed": seed,
             "policy": args.policy, "step": args.step, "max_iters": args.max_iters,
             "grad_tol": args.grad_tol, "gap_tol": args.gap_tol},
            [args.data, args.weights],
            outputs,
            t0,
        ),
        "results": {
            "iterations": iters,
            "final_loss": f,
            "gradient_norm": gn,
            "nudges": nudges,
            "status": status,
        },
    }
    _emit(report, args.report)
    return 0


def cmd_analyze(args) -> int:
    t0 = time.time()
    data = _load_dataset(args.data)
    W = load_weight_stack(Path(args.weights))
    seed = _resolve_seed(args)
    config = ExperimentConfig(
        dims=W.dims, num_samples=data.num_samples, seed=seed,
        grad_tol=args.grad_tol, loss_gap_tol=args.gap_tol,
    )
    rep = classify_critical_point(W, data, config)
    report = {
        "manifest": _manifest(
            "analyze",
            {"data": args.data, "weights": args.weights,
             "grad_tol": args.grad_tol, "gap_tol": args.gap_tol},
            [args.data, args.weights],
            [],
            t0,
        ),
        "results": rep.to_dict(),
    }
    _emit(report, args.out)
    return 0


def cmd_perturb(args) -> int:
    t0 = time.time()
    data = _load_dataset(args.data)
    W = load_weight_stack(Path(args.weights))
    budget = PerturbationBudget(delta=args.delta, mu=args.mu)
    inputs = [args.data, args.weights]
    outputs = []
    try:
        if args.mode == "repair":
            res = full_rank_perturbation(W, args.layer, data, budget)
            results = res.to_dict()
            repaired = res.repaired
        elif args.mode == "sweep":
            res = rank_restoring_sweep(W, data, budget)
            results = res.to_dict()
            repaired = res.repaired
        else:  # factor
            R = read_matrix(args.target)
            inputs.append(args.target)
            W_new = factor_perturbed_product(W, R)
            resid = float(np.abs(product(W_new) - R).max())
            disp = max(
                float(np.abs(a - b).max()) for a, b in zip(W_new.layers, W.layers)
            )
            results = {
                "product_residual": resid,
                "max_layer_displacement": disp,
                "per_layer_ranks": [numerical_rank(L) for L in W_new.layers],
            }
            repaired = W_new
    except LinlandError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    if args.save_weights:
        save_weight_stack(Path(args.save_weights), repaired)
        outputs.append(args.save_weights)
    report = {
        "manifest": _manifest(
            f"perturb-{args.mode}",
            {"data": args.data, "weights": args.weights, "delta": args.delta,
             "mu": args.mu, "layer": getattr(args, "layer", None),
             "target": getattr(args, "target", None)},
            inputs,
            outputs,
            t0,
        ),
        "results": results,
    }
    _emit(report, args.out)
    return 0


def _check(name: str, tolerance, measured, passed: bool) -> dict:
    return {"name": name, "tolerance": tolerance, "measured": measured,
            "passed": bool(passed)}


def _verify_theorem2(dims: NetworkDims, samples: int, trials: int, seed: int) -> list[dict]:
    d0, dH = dims.widths[0], dims.widths[-1]
    worst_oracle = 0.0
    worst_roundtrip = 0.0
    for t in range(max(trials, 1)):
        rng = np.random.default_rng([seed, t, 2])
        data = _generate_data(dims, samples, rng)
        rp = reduce_to_diagonal(data)
        spec = rp.spectrum()
        proj = np.linalg.pinv(data.X) @ data.X
        visible = data.Y @ proj
        sv = np.linalg.svd(visible, compute_uv=False)
        hidden = 0.5 * float(np.sum((data.Y - visible) ** 2))
        for k in range(0, min(d0, dH) + 1):
            R = global_minimizer(data, k)
            val = shallow_loss(R, data)
            oracle = 0.5 * float(np.sum(sv[k:] ** 2)) + hidden
            worst_oracle = max(worst_oracle, abs(val - oracle) / (1.0 + abs(oracle)))
            pred = global_min_value(spec, k) + rp.offset
            worst_roundtrip = max(worst_roundtrip, abs(val - pred) / (1.0 + abs(pred)))

    # descent path: random non-greedy allocations strictly improve
    worst_identity = 0.0
    monotone = True
    rng = np.random.default_rng([seed, 3])
    for _ in range(25):
        vals = np.sort(rng.uniform(0.5, 4.0, size=3))[::-1]
        spec = BlockSpectrum(tuple(vals), (1, 2, 1))
        alloc = RankAllocation((0, 1, 1))
        T = candidate_from_allocation(spec, alloc, rng=rng)
        thetas = np.linspace(0.0, np.pi / 2, 20)
        S2 = np.diag(spec.expand())
        h0 = float(np.sum((T - S2) ** 2))
        prev = np.inf
        for th in thetas:
            Tt = descent_path(T, spec, 0, 2, th)
            h = float(np.sum((Tt - S2) ** 2))
            pred = vals[2] ** 2 - (vals[0] * np.sin(th) ** 2 + vals[2] * np.cos(th) ** 2) ** 2
            worst_identity = max(worst_identity, abs((h - h0) - pred))
            if th > 0 and h >= prev:
                monotone = False
            prev = h
    return [
        _check("theorem2-oracle-equivalence", 1e-8, worst_oracle, worst_oracle <= 1e-8),
        _check("theorem2-reduction-round-trip", 1e-10, worst_roundtrip, worst_roundtrip <= 1e-10),
        _check("theorem2-descent-identity", 1e-10, worst_identity, worst_identity <= 1e-10),
        _check("theorem2-descent-monotone", True, monotone, monotone),
    ]


def _verify_theorem3(args, dims: NetworkDims, samples: int, trials: int, seed: int) -> list[dict]:
    config = _config_from_args(args, dims, samples, seed, trials=trials)
    summary = no_bad_local_minima_experiment(config, n_jobs=args.parallel)
    return [
        _check("theorem3-converged-trials", ">=1", summary["converged"], summary["converged"] >= 1),
        _check("theorem3-global-fraction", 1.0, summary["global_fraction"],
               summary["global_fraction"] == 1.0),
        _check("theorem3-max-relative-gap", config.loss_gap_tol,
               summary["max_gap_converged"],
               summary["max_gap_converged"] <= config.loss_gap_tol),
        _check("theorem3-bad-local-minima", 0, summary["bad_local_minima"],
               summary["bad_local_minima"] == 0),
    ]


def _witness_checks(W: WeightStack, data: Dataset, delta: float, seed: int,
                    label: str) -> list[dict]:
    budget = PerturbationBudget(delta=delta)
    dp = W.dims.bottleneck_width
    try:
        R_hat = deep_to_shallow_witness(
            W, data, budget, rng=np.random.default_rng([seed, 7])
        )
    except NotLocalMinimumError as exc:
        return [_check(f"{label}-input-is-local-minimum", "gradient/curvature", str(exc), False)]
    except CertificationError as exc:
        return [_check(f"{label}-certification", "no sampled decrease", str(exc), False)]
    f_deep = loss(W, data)
    f_shallow = shallow_loss(R_hat, data)
    gv = shallow_global_value(data, W.dims)
    val_err = abs(f_shallow - f_deep) / (1.0 + abs(f_deep))
    gap = (f_shallow - gv) / (1.0 + abs(gv))
    return [
        _check(f"{label}-value-equality", 1e-8, val_err, val_err <= 1e-8),
        _check(f"{label}-witness-rank", dp, numerical_rank(R_hat), numerical_rank(R_hat) == dp),
        _check(f"{label}-certification", "no sampled decrease", "passed", True),
        _check(f"{label}-global-gap", 1e-6, gap, gap <= 1e-6),
    ]


def _verify_theorem1(args, dims: NetworkDims, samples: int, trials: int, seed: int) -> list[dict]:
    if args.weights and args.data:
        data = _load_dataset(args.data)
        W = load_weight_stack(Path(args.weights))
        return _witness_checks(W, data, args.delta, seed, "theorem1")
    checks = []
    config = _config_from_args(args, dims, samples, seed, trials=1)
    for t in range(min(trials, 5)):
        rng = np.random.default_rng([seed, t])
        data = _generate_data(dims, samples, rng)
        W0 = initial_stack(dims, rng)
        W_fin, _, _, _, _, status, _ = descend_weights(
            W0, data, config, rng=np.random.default_rng([seed, t, 1])
        )
        if status != "converged":
            checks.append(_check(f"theorem1-trial{t}-descent", "converged", status, False))
            continue
        checks.extend(_witness_checks(W_fin, data, args.delta, seed, f"theorem1-trial{t}"))
    return checks


def cmd_verify(args) -> int:
    t0 = time.time()
    dims = _parse_dims(args.dims)
    seed = _resolve_seed(args)
    checks: list[dict] = []
    if args.theorem in ("2", "all"):
        checks.extend(_verify_theorem2(dims, args.samples, args.trials, seed))
    if args.theorem in ("3", "all"):
        checks.extend(_verify_theorem3(args, dims, args.samples, args.trials, seed))
    if args.theorem in ("1", "all"):
        checks.extend(_verify_theorem1(args, dims, args.samples, args.trials, seed))
    passed = all(c["passed"] for c in checks)
    report = {
        "manifest": _manifest(
            "verify",
            {"theorem": args.theorem, "dims": list(dims.widths),
             "samples": args.samples, "trials": args.trials, "seed": seed},
            [p for p in (args.data, args.weights) if p],
            [],
            t0,
        ),
        "results": {"checks": checks, "all_passed": passed},
    }
    _emit(report, args.out)
    if not passed:
        for c in checks:
            if not c["passed"]:
                print(f"FAILED: {c['name']} (measured {c['measured']})", file=sys.stderr)
        return 1
    return 0


def cmd_complete(args) -> int:
    t0 = time.time()
    dims = _parse_dims(args.dims)
    seed = _resolve_seed(args)
    inputs = []
    if args.target:
        Y = read_matrix(args.target)
        inputs.append(args.target)
        rng = np.random.default_rng([seed, 13])
        mask = rng.random(Y.shape) < args.observe_fraction
        if not mask.any():
            mask[0, 0] = True
        from .harness import MaskedDataset

        masked = MaskedDataset(target=Y, mask=mask, dims=dims)
    else:
        masked = generate_masked_instance(dims, args.planted_rank, args.observe_fraction, seed)
    config = _config_from_args(args, dims, max(dims.widths[0], dims.widths[-1]), seed,
                               trials=args.trials)
    summary = masked_completion_experiment(config, masked, args.observe_fraction,
                                           n_jobs=args.parallel)
    report = {
        "manifest": _manifest(
            "complete",
            {"dims": list(dims.widths), "observe_fraction": args.observe_fraction,
             "trials": args.trials, "seed": seed, "planted_rank": args.planted_rank,
             "target": args.target},
            inputs,
            [],
            t0,
        ),
        "results": summary,
    }
    _emit(report, args.out)
    return 0


def _add_descent_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=["backtracking", "fixed"], default="backtracking",
                   help="step policy (default backtracking)")
    p.add_argument("--step", type=float, default=0.05, help="step size / initial step")
    p.add_argument("--max-iters", type=int, default=200_000)
    p.add_argument("--grad-tol", type=float, default=1e-8,
                   help="relative gradient tolerance (times 1 + ||Y||_F)")
    p.add_argument("--gap-tol", type=float, default=1e-6,
                   help="relative loss-gap tolerance for the global classification")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linland",
        description="Deep linear network landscape toolkit",
    )
    parser.add_argument("--version", action="version", version=f"linland {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random instance on disk")
    p.add_argument("--dims", required=True, help="comma-separated widths d_0,...,d_H")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--report", default="-", help="report path or - for stdout")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="gradient descent from stored weights")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", help="directory for the final weights")
    p.add_argument("--trajectory", help="CSV path for (iteration, loss, gradient_norm)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="-")
    _add_descent_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="classify a stored weight stack")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--gap-tol", type=float, default=1e-6)
    p.add_argument("--out", default="-", help="report path or - for stdout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("perturb", help="run a landscape repair construction")
    p.add_argument("mode", choices=["repair", "sweep", "factor"])
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--layer", type=int, default=1, help="1-based layer for repair")
    p.add_argument("--target", help="matrix file with the target product (factor mode)")
    p.add_argument("--delta", type=float, default=1e-3, help="max-norm displacement budget")
    p.add_argument("--mu", type=float, default=1.0, help="line search start")
    p.add_argument("--save-weights", help="directory for the repaired weights")
    p.add_argument("--out", default="-", help="report path or - for stdout")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("verify", help="run theorem-level verification checks")
    p.add_argument("--theorem", choices=["1", "2", "3", "all"], required=True)
    p.add_argument("--dims", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="dataset directory (theorem 1 on a checkpoint)")
    p.add_argument("--weights", help="weights directory (theorem 1 on a checkpoint)")
    p.add_argument("--delta", type=float, default=1e-4, help="witness perturbation budget")
    p.add_argument("--parallel", type=int, default=1, help="trial worker threads")
    p.add_argument("--out", default="-", help="report path or - for stdout")
    _add_descent_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("complete", help="masked-entry completion experiment (empirical)")
    p.add_argument("--dims", required=True)
    p.add_argument("--observe-fraction", type=float, required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--planted-rank", type=int, default=2)
    p.add_argument("--target", help="matrix file with the completion target")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", default="-", help="report path or - for stdout")
    _add_descent_flags(p)
    p.set_defaults(func=cmd_complete)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LinlandError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error[FileNotFound]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
