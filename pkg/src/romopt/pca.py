"""Principal-component reduction of snapshot matrices.

The projector rows are the leading left singular vectors of the snapshot
matrix Y (m x N). The spectrum holds eigenvalues of the snapshot covariance,
s_i^2 / (N - 1), so reconstruction error obeys the Eckart-Young identity
||Y - P^T P Y||_F^2 = (N - 1) * sum of the discarded eigenvalues.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .sampling import SnapshotSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcaBasis:
    """Truncated orthonormal projector with its covariance spectrum.

    p: k x m projector, rows orthonormal.
    spectrum: all min(m, N) covariance eigenvalues, descending.
    mean: column mean subtracted before projection, or None.
    """

    p: np.ndarray
    spectrum: np.ndarray
    k: int
    energy: float
    mean: np.ndarray | None = None
    block: str = "y"

    def __post_init__(self):
        object.__setattr__(self, "p", np.atleast_2d(np.asarray(self.p, dtype=float)))
        object.__setattr__(
            self, "spectrum", np.asarray(self.spectrum, dtype=float).ravel()
        )
        if self.mean is not None:
            object.__setattr__(
                self, "mean", np.asarray(self.mean, dtype=float).ravel()
            )
        if self.p.shape[0] != self.k:
            raise ValueError(f"projector has {self.p.shape[0]} rows, k={self.k}")
        if np.any(np.diff(self.spectrum) > 1e-12) or np.any(self.spectrum < -1e-12):
            raise ValueError("spectrum must be nonincreasing and nonnegative")

    @property
    def m(self) -> int:
        return self.p.shape[1]

    def energy_ratios(self) -> np.ndarray:
        """Cumulative eigenvalue fractions; empty for a zero spectrum."""
        total = self.spectrum.sum()
        if total == 0.0:
            return np.zeros_like(self.spectrum)
        return np.cumsum(self.spectrum) / total


def fit(
    y: np.ndarray,
    energy: float = 0.998,
    centering: bool = False,
    k: int | None = None,
    block: str = "y",
) -> PcaBasis:
    """Fit a PCA basis to the m x N snapshot matrix via economy SVD.

    k is the smallest count whose cumulative eigenvalue fraction reaches
    ``energy`` (ties resolve small), unless an explicit ``k`` overrides the
    threshold. A zero matrix yields an empty (k=0) basis with a warning.
    """
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy must be in (0, 1]")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    m, n = y.shape
    if n < 1:
        raise ValueError("need at least one snapshot column")
    mean = None
    if centering:
        mean = y.mean(axis=1)
        y = y - mean[:, None]
    # economy SVD: never forms the m x m covariance
    u, s, _ = np.linalg.svd(y, full_matrices=False)
    denom = max(n - 1, 1)
    spectrum = s**2 / denom
    total = spectrum.sum()
    if total == 0.0:
        log.warning("zero snapshot matrix: returning an empty basis")
        k_sel = 0
    elif k is not None:
        if not 0 <= k <= min(m, n):
            raise ValueError(f"k={k} outside [0, {min(m, n)}]")
        k_sel = k
    else:
        ratios = np.cumsum(spectrum) / total
        k_sel = int(np.argmax(ratios >= energy)) + 1
    return PcaBasis(
        p=u[:, :k_sel].T.copy(),
        spectrum=spectrum,
        k=k_sel,
        energy=energy,
        mean=mean,
        block=block,
    )


def project(basis: PcaBasis, y: np.ndarray) -> np.ndarray:
    """U = P (y - mean) for m-row input; accepts a vector or a matrix."""
    y = np.asarray(y, dtype=float)
    vec = y.ndim == 1
    y2 = y[:, None] if vec else y
    if y2.shape[0] != basis.m:
        raise ValueError(f"input has {y2.shape[0]} rows, basis expects {basis.m}")
    if basis.mean is not None:
        y2 = y2 - basis.mean[:, None]
    u = basis.p @ y2
    return u[:, 0] if vec else u


def reconstruct(basis: PcaBasis, u: np.ndarray) -> np.ndarray:
    """P^T u (+ mean in centering mode); accepts a vector or a matrix."""
    u = np.asarray(u, dtype=float)
    vec = u.ndim == 1
    u2 = u[:, None] if vec else u
    if u2.shape[0] != basis.k:
        raise ValueError(f"input has {u2.shape[0]} rows, basis has k={basis.k}")
    y = basis.p.T @ u2
    if basis.mean is not None:
        y = y + basis.mean[:, None]
    return y[:, 0] if vec else y


def fit_per_variable(
    snapshots: SnapshotSet,
    energy: float = 0.998,
    centering: bool = False,
    k: int | None = None,
) -> list[PcaBasis]:
    """Independent PCA per variable block; the combined projector is block
    diagonal over the block row ranges."""
    bases = []
    for name, start, stop in snapshots.blocks:
        bases.append(
            fit(
                snapshots.outputs[start:stop],
                energy=energy,
                centering=centering,
                k=k,
                block=name,
            )
        )
    return bases


def save_basis(basis: PcaBasis, path) -> None:
    """Persist projector, spectrum, mean, and metadata losslessly (npz)."""
    meta = json.dumps(
        {"k": basis.k, "energy": basis.energy, "block": basis.block}
    )
    arrays = {"p": basis.p, "spectrum": basis.spectrum, "meta": np.array(meta)}
    if basis.mean is not None:
        arrays["mean"] = basis.mean
    np.savez(path, **arrays)


def load_basis(path) -> PcaBasis:
    """Inverse of save_basis."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        return PcaBasis(
            p=data["p"],
            spectrum=data["spectrum"],
            k=int(meta["k"]),
            energy=float(meta["energy"]),
            mean=data["mean"] if "mean" in data.files else None,
            block=str(meta["block"]),
        )
