"""Piecewise-affine approximation of tanh on a truncated symmetric domain.

Curves are built on the positive half [0, z_max] and mirrored, exploiting odd
symmetry; beyond +-z_max the curve saturates at +-1. The adaptive fit greedily
splits the segment with the largest integral absolute error, placing each new
breakpoint by golden-section minimization of the post-split error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_Z_MAX = 8.0  # tanh(8) is within 1e-6 of 1, so the plateau joint is tight
SIMPSON_POINTS = 4096  # quadrature subintervals per segment

_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PwaCurve:
    """Continuous piecewise-affine interpolant of tanh.

    breakpoints: strictly increasing, spanning [-z_max, z_max], 0 included.
    values: tanh at each breakpoint.
    Evaluation saturates at -1 / +1 outside the span.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "breakpoints", np.asarray(self.breakpoints, dtype=float)
        )
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        bp = self.breakpoints
        if bp.size < 2 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing, >= 2 of them")
        if bp.size != self.values.size:
            raise ValueError("one value per breakpoint required")
        if not np.any(bp == 0.0):
            raise ValueError("z=0 must be a breakpoint")

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    @property
    def z_max(self) -> float:
        return float(self.breakpoints[-1])


def _segment_error(a: float, b: float, points: int = SIMPSON_POINTS) -> float:
    """Composite-Simpson integral of |tanh - chord| over one segment [a, b].

    tanh is concave on the positive axis, so the integrand keeps one sign
    inside a segment and Simpson sees a smooth function.
    """
    if points % 2:
        points += 1
    z = np.linspace(a, b, points + 1)
    fa, fb = np.tanh(a), np.tanh(b)
    chord = fa + (z - a) * ((fb - fa) / (b - a))
    g = np.abs(np.tanh(z) - chord)
    h = (b - a) / points
    return h / 3.0 * (g[0] + g[-1] + 4.0 * g[1:-1:2].sum() + 2.0 * g[2:-1:2].sum())


def _golden_min(fun, lo: float, hi: float, tol: float = 1e-8) -> float:
    """Golden-section minimizer of a unimodal scalar function on [lo, hi]."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def _mirror(positive: np.ndarray) -> PwaCurve:
    bp = np.concatenate([-positive[:0:-1], positive])
    return PwaCurve(breakpoints=bp, values=np.tanh(bp))


def adaptive_fit(half_segments: int, z_max: float = DEFAULT_Z_MAX) -> PwaCurve:
    """Greedy adaptive PWA with ``half_segments`` segments on (0, z_max],
    mirrored to 2*half_segments total.

    Starts from the chord {0, z_max}; each round splits the positive-side
    segment with the largest integral absolute error at the point minimizing
    the split segment's error.
    """
    if half_segments < 1:
        raise ValueError("half_segments must be >= 1")
    if z_max <= 0:
        raise ValueError("z_max must be positive")
    pos = [0.0, float(z_max)]
    errs = [_segment_error(0.0, float(z_max))]
    while len(pos) - 1 < half_segments:
        i = int(np.argmax(errs))
        a, b = pos[i], pos[i + 1]
        t = _golden_min(
            lambda t: _segment_error(a, t) + _segment_error(t, b), a, b
        )
        pos.insert(i + 1, t)
        errs[i : i + 1] = [_segment_error(a, t), _segment_error(t, b)]
    return _mirror(np.asarray(pos))


def uniform_fit(half_segments: int, z_max: float = DEFAULT_Z_MAX) -> PwaCurve:
    """Equally spaced breakpoints on [0, z_max], mirrored."""
    if half_segments < 1:
        raise ValueError("half_segments must be >= 1")
    if z_max <= 0:
        raise ValueError("z_max must be positive")
    return _mirror(np.linspace(0.0, z_max, half_segments + 1))


def eval_curve(curve: PwaCurve, z) -> np.ndarray | float:
    """Linear interpolation with saturation plateaus beyond +-z_max."""
    out = np.interp(z, curve.breakpoints, curve.values, left=-1.0, right=1.0)
    return float(out) if np.isscalar(z) else out


def total_error(curve: PwaCurve, points_per_segment: int = SIMPSON_POINTS) -> float:
    """Composite-Simpson estimate of the integral absolute error of the curve
    against tanh over its full span [-z_max, z_max]."""
    if points_per_segment < 1000:
        raise ValueError("need >= 1000 quadrature points per segment")
    if points_per_segment % 2:
        points_per_segment += 1
    total = 0.0
    bp, v = curve.breakpoints, curve.values
    for i in range(curve.n_segments):
        a, b = bp[i], bp[i + 1]
        z = np.linspace(a, b, points_per_segment + 1)
        chord = v[i] + (z - a) * ((v[i + 1] - v[i]) / (b - a))
        g = np.abs(np.tanh(z) - chord)
        h = (b - a) / points_per_segment
        total += h / 3.0 * (g[0] + g[-1] + 4.0 * g[1:-1:2].sum() + 2.0 * g[2:-1:2].sum())
    return total


def save_curve_csv(curve: PwaCurve, path) -> None:
    """Persist breakpoints and values as a two-column CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z", "v"])
        for z, v in zip(curve.breakpoints, curve.values):
            writer.writerow([repr(float(z)), repr(float(v))])


def load_curve_csv(path) -> PwaCurve:
    """Inverse of save_curve_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["z", "v"]:
            raise ValueError(f"unexpected header {header!r} in {path}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    arr = np.asarray(rows)
    return PwaCurve(breakpoints=arr[:, 0], values=arr[:, 1])


def plot_curve_svg(curve: PwaCurve, path) -> None:
    """SVG overlay of tanh and the PWA curve with the error band shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    span = 1.15 * curve.z_max
    z = np.linspace(-span, span, 4000)
    exact = np.tanh(z)
    approx = eval_curve(curve, z)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(z, exact, label="tanh", linewidth=1.2)
    ax.plot(z, approx, label=f"PWA (N'={curve.n_segments})", linewidth=1.0)
    ax.fill_between(z, exact, approx, alpha=0.3, label="error band")
    ax.plot(curve.breakpoints, curve.values, ".", markersize=4)
    ax.set_xlabel("z")
    ax.set_ylabel("f(z)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
