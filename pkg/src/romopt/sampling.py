"""Latin-hypercube design generation and snapshot collection.

A SnapshotSet pairs an input matrix D (one design per column) with an output
matrix Y (one stacked state vector per column), plus block metadata naming
which rows of Y belong to which physical variable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesignSpace:
    """Axis-aligned box of design variables in physical units."""

    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValueError("names, lower, upper must have equal length")
        if len(self.names) < 1:
            raise ValueError("need at least one design dimension")
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"dimension {name!r}: lower {lo} must be < upper {hi}")

    @property
    def n_dims(self) -> int:
        return len(self.names)

    @staticmethod
    def box(names, lower, upper) -> "DesignSpace":
        return DesignSpace(
            tuple(names), tuple(float(v) for v in lower), tuple(float(v) for v in upper)
        )


@dataclass
class SnapshotSet:
    """Paired input/output snapshot matrices with block row metadata.

    inputs: N_d x N, one design per column.
    outputs: m x N, column j is the evaluation of inputs[:, j].
    blocks: ordered (name, start_row, stop_row) with half-open row ranges
    that partition [0, m).
    grid: optional coordinate vector shared by all output columns.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    input_names: tuple[str, ...]
    blocks: tuple[tuple[str, int, int], ...]
    grid: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if self.inputs.shape[1] != self.outputs.shape[1]:
            raise ValueError(
                f"inputs have {self.inputs.shape[1]} columns, "
                f"outputs {self.outputs.shape[1]}"
            )
        if len(self.input_names) != self.inputs.shape[0]:
            raise ValueError("one input name per input row required")
        m = self.outputs.shape[0]
        cursor = 0
        for name, start, stop in self.blocks:
            if start != cursor or stop <= start:
                raise ValueError(f"block {name!r} range [{start},{stop}) breaks the partition")
            cursor = stop
        if cursor != m:
            raise ValueError(f"blocks cover {cursor} rows, outputs have {m}")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.outputs.shape[0]

    def block_rows(self, name: str) -> slice:
        for bname, start, stop in self.blocks:
            if bname == name:
                return slice(start, stop)
        raise KeyError(f"no block named {name!r}")


def lhc_sample(
    space: DesignSpace, n: int, seed: int, midpoint: bool = False
) -> np.ndarray:
    """Latin-hypercube sample: N_d x n matrix, one design per column.

    Every dimension gets exactly one point per equal-width stratum; strata are
    paired across dimensions by independent random permutations; placement in
    a stratum is uniform random (or the midpoint with midpoint=True). The
    result is a deterministic function of (space, n, seed).
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    d = space.n_dims
    out = np.empty((d, n))
    for i in range(d):
        perm = rng.permutation(n)
        jitter = 0.5 if midpoint else rng.uniform(size=n)
        unit = (perm + jitter) / n
        out[i] = space.lower[i] + unit * (space.upper[i] - space.lower[i])
    return out


def collect_snapshots(
    space: DesignSpace,
    designs: np.ndarray,
    evaluator,
    blocks=None,
    grid=None,
    skip_failures: bool = False,
) -> SnapshotSet:
    """Evaluate every design column and assemble the snapshot matrices.

    The evaluator maps one design vector to one output vector; output columns
    keep the order of the design columns. A failing evaluation aborts unless
    skip_failures is set, in which case the column is dropped and its index
    logged.
    """
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    if designs.shape[0] != space.n_dims:
        raise ValueError(
            f"designs have {designs.shape[0]} rows, space has {space.n_dims} dims"
        )
    kept_cols = []
    outputs = []
    for j in range(designs.shape[1]):
        try:
            y = np.asarray(evaluator(designs[:, j]), dtype=float).ravel()
        except Exception as exc:
            if not skip_failures:
                raise
            log.warning("evaluation failed for sample %d: %s", j, exc)
            continue
        if outputs and y.size != outputs[-1].size:
            raise ValueError(f"evaluator output length changed at sample {j}")
        outputs.append(y)
        kept_cols.append(j)
    if not outputs:
        raise ValueError("all evaluations failed")
    y_mat = np.column_stack(outputs)
    if blocks is None:
        blocks = (("y", 0, y_mat.shape[0]),)
    return SnapshotSet(
        inputs=designs[:, kept_cols],
        outputs=y_mat,
        input_names=space.names,
        blocks=tuple(blocks),
        grid=None if grid is None else np.asarray(grid, dtype=float),
    )


def save_snapshots_csv(snapshots: SnapshotSet, path) -> None:
    """Write a SnapshotSet as CSV with two metadata header lines.

    Line 1: ``# inputs: <name> <name> ...``
    Line 2: ``# blocks: <name>:<start>:<stop> ...``
    Then one row per sample: the design values followed by the output values,
    to full printed precision.
    """
    with open(path, "w", newline="") as fh:
        fh.write("# inputs: " + " ".join(snapshots.input_names) + "\n")
        fh.write(
            "# blocks: "
            + " ".join(f"{n}:{a}:{b}" for n, a, b in snapshots.blocks)
            + "\n"
        )
        for j in range(snapshots.n_samples):
            row = np.concatenate([snapshots.inputs[:, j], snapshots.outputs[:, j]])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_snapshots_csv(path) -> SnapshotSet:
    """Inverse of save_snapshots_csv."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(lines) < 3:
        raise ValueError(f"{path}: need two header lines and at least one data row")
    if not lines[0].startswith("# inputs: "):
        raise ValueError(f"{path}: first line must start with '# inputs: '")
    if not lines[1].startswith("# blocks: "):
        raise ValueError(f"{path}: second line must start with '# blocks: '")
    input_names = tuple(lines[0][len("# inputs: ") :].split())
    blocks = []
    for token in lines[1][len("# blocks: ") :].split():
        parts = token.split(":")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed block token {token!r}")
        blocks.append((parts[0], int(parts[1]), int(parts[2])))
    n_inputs = len(input_names)
    m = blocks[-1][2]
    rows = []
    for ln in lines[2:]:
        vals = [float(v) for v in ln.split(",")]
        if len(vals) != n_inputs + m:
            raise ValueError(
                f"{path}: row has {len(vals)} values, expected {n_inputs + m}"
            )
        rows.append(vals)
    data = np.asarray(rows).T
    return SnapshotSet(
        inputs=data[:n_inputs],
        outputs=data[n_inputs:],
        input_names=input_names,
        blocks=tuple(blocks),
    )
