"""Plain-text matrix files and weight-stack directories.

Matrix format (used repo-wide): one row per line, comma-separated entries,
17 significant digits so values round-trip bit-exactly. Dimensions are
inferred from the line and field counts.

A weight stack serializes to a directory holding layer_1.txt ... layer_H.txt
plus dims.txt listing the widths (d_0, ..., d_H).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataValidationError
from .linalg import as_matrix
from .model import NetworkDims, WeightStack


def format_matrix(M) -> str:
    M = as_matrix(M)
    lines = [", ".join(format(v, ".17g") for v in row) for row in M]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(f) for f in line.split(",")])
        except ValueError as exc:
            raise DataValidationError(f"bad matrix entry on line {lineno}: {exc}") from exc
    if not rows:
        raise DataValidationError("matrix file is empty")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DataValidationError("matrix rows have inconsistent field counts")
    return as_matrix(np.asarray(rows, dtype=np.float64))


def write_matrix(path, M) -> None:
    Path(path).write_text(format_matrix(M))


def read_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text())


def save_weight_stack(directory, stack: WeightStack) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, W in enumerate(stack.layers, start=1):
        write_matrix(d / f"layer_{i}.txt", W)
    widths = stack.dims.widths
    (d / "dims.txt").write_text(",".join(str(w) for w in widths) + "\n")


def load_weight_stack(directory) -> WeightStack:
    d = Path(directory)
    dims_file = d / "dims.txt"
    if not dims_file.exists():
        raise DataValidationError(f"missing dims manifest: {dims_file}")
    widths = tuple(int(w) for w in dims_file.read_text().strip().split(","))
    dims = NetworkDims(widths)
    layers = []
    for i in range(1, dims.depth + 1):
        f = d / f"layer_{i}.txt"
        if not f.exists():
            raise DataValidationError(f"missing layer file: {f}")
        W = read_matrix(f)
        if W.shape != dims.layer_shapes[i - 1]:
            raise DataValidationError(
                f"layer {i} has shape {W.shape}, manifest expects {dims.layer_shapes[i - 1]}"
            )
        layers.append(W)
    return WeightStack(tuple(layers))
