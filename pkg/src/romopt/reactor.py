"""Steady-state tubular reactor model: an exothermic first-order reaction in a
1-D non-isothermal reactor with axial dispersion, discretized by central finite
differences and solved by damped Newton with Damkohler continuation.

The two coupled balances (dimensionless concentration C and temperature T on
y in [0, 1]) are

    0 = (1/Pe1) C'' - C' + Da (1 - C) exp(T / (1 + T/gamma))
    0 = (1/(Le Pe2)) T'' - (1/Le) T' - (beta/Le) T
        + B Da (1 - C) exp(T / (1 + T/gamma)) + (beta/Le) Tw(y)

with Robin inflow conditions C' - Pe1 C = 0, T' - Pe2 T = 0 at y = 0 and
zero-gradient outflow C' = T' = 0 at y = 1.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded

DEFAULT_NODES = 250

# Zone edges for the three-zone wall profile: equal thirds of [0, 1].
ZONE_EDGES = (1.0 / 3.0, 2.0 / 3.0)


class SolveFailure(RuntimeError):
    """Newton (and its continuation fallback) failed to converge.

    Carries the infinity norm of the last residual in ``residual_norm``.
    """

    def __init__(self, message, residual_norm):
        super().__init__(f"{message} (last residual inf-norm {residual_norm:.3e})")
        self.residual_norm = float(residual_norm)


@dataclass(frozen=True)
class ReactorParams:
    """Physical and numerical parameters of the tubular reactor."""

    pe1: float = 5.0
    pe2: float = 5.0
    le: float = 1.0
    beta: float = 1.5
    gamma: float = 20.0
    b_rise: float = 12.0
    da: float = 0.1
    wall: float | tuple[float, float, float] = 0.0
    m_nodes: int = DEFAULT_NODES

    def __post_init__(self):
        if self.pe1 <= 0 or self.pe2 <= 0 or self.le <= 0:
            raise ValueError("Peclet and Lewis numbers must be positive")
        if self.da < 0:
            raise ValueError("Damkohler number must be nonnegative")
        if self.m_nodes < 3:
            raise ValueError("need at least 3 grid nodes")
        w = self.wall if isinstance(self.wall, tuple) else (self.wall,)
        if not all(np.isfinite(w)):
            raise ValueError("wall temperatures must be finite")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m_nodes)

    def wall_profile(self) -> np.ndarray:
        """Wall temperature at every grid node."""
        if isinstance(self.wall, tuple):
            return zone_wall_profile(*self.wall, self.grid)
        return np.full(self.m_nodes, float(self.wall))

    def with_da(self, da: float) -> "ReactorParams":
        return replace(self, da=da)


@dataclass
class StateField:
    """Concentration and temperature fields over the uniform grid.

    At a converged solution the residual infinity norm is <= the solver
    tolerance (1e-10 at the default 250-node grid).
    """

    c: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.c.shape != self.t.shape or self.c.ndim != 1:
            raise ValueError("c and t must be 1-D arrays of equal length")

    @property
    def m_nodes(self) -> int:
        return self.c.size

    def stacked(self) -> np.ndarray:
        """Concentration stacked over temperature, length 2*m."""
        return np.concatenate([self.c, self.t])

    @staticmethod
    def zeros(m_nodes: int) -> "StateField":
        return StateField(np.zeros(m_nodes), np.zeros(m_nodes))

    @staticmethod
    def from_stacked(vec: np.ndarray) -> "StateField":
        vec = np.asarray(vec, dtype=float)
        m = vec.size // 2
        return StateField(vec[:m], vec[m:])


def zone_wall_profile(tw1, tw2, tw3, grid) -> np.ndarray:
    """Piecewise-constant three-zone wall temperature over the grid.

    Zone edges sit at y = 1/3 and y = 2/3; a node on an edge belongs to the
    zone to its right (half-open convention), and the last node is in zone 3.
    """
    grid = np.asarray(grid, dtype=float)
    zone = np.searchsorted(np.asarray(ZONE_EDGES), grid, side="right")
    return np.asarray([tw1, tw2, tw3], dtype=float)[zone]


def _rate_terms(params: ReactorParams, c, t):
    """Reaction rate (1-C) exp(T/(1+T/gamma)) and its T-derivative factor.

    Returns (E, dE) with E = exp(T/(1+T/gamma)) and dE = E / (1+T/gamma)^2,
    evaluated elementwise. Non-finite values are allowed to propagate; the
    damped Newton loop rejects such steps.
    """
    den = 1.0 + t / params.gamma
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e = np.exp(t / den)
        de = e / den**2
    return e, de


def residual(params: ReactorParams, state: StateField) -> np.ndarray:
    """Discrete steady-state residual, concentration rows stacked over
    temperature rows (length 2*m_nodes).

    Interior nodes use second-order central differences; both boundaries use
    one-sided second-order stencils so the overall scheme stays O(h^2).
    """
    m = params.m_nodes
    if state.m_nodes != m:
        raise ValueError(f"state has {state.m_nodes} nodes, params expect {m}")
    c, t = state.c, state.t
    h = 1.0 / (m - 1)
    tw = params.wall_profile()
    e, _ = _rate_terms(params, c, t)
    with np.errstate(over="ignore", invalid="ignore"):
        rate = params.da * (1.0 - c) * e

    rc = np.empty(m)
    rt = np.empty(m)

    # interior: i = 1..m-2
    with np.errstate(over="ignore", invalid="ignore"):
        cc = c[1:-1]
        d2c = (c[2:] - 2.0 * cc + c[:-2]) / h**2
        d1c = (c[2:] - c[:-2]) / (2.0 * h)
        rc[1:-1] = d2c / params.pe1 - d1c + rate[1:-1]

        tt = t[1:-1]
        d2t = (t[2:] - 2.0 * tt + t[:-2]) / h**2
        d1t = (t[2:] - t[:-2]) / (2.0 * h)
        rt[1:-1] = (
            d2t / (params.le * params.pe2)
            - d1t / params.le
            - params.beta / params.le * tt
            + params.b_rise * rate[1:-1]
            + params.beta / params.le * tw[1:-1]
        )

    # inflow (Robin): f' - Pe f = 0 with one-sided second-order derivative
    rc[0] = (-3.0 * c[0] + 4.0 * c[1] - c[2]) / (2.0 * h) - params.pe1 * c[0]
    rt[0] = (-3.0 * t[0] + 4.0 * t[1] - t[2]) / (2.0 * h) - params.pe2 * t[0]
    # outflow (Neumann): f' = 0
    rc[m - 1] = (3.0 * c[-1] - 4.0 * c[-2] + c[-3]) / (2.0 * h)
    rt[m - 1] = (3.0 * t[-1] - 4.0 * t[-2] + t[-3]) / (2.0 * h)

    return np.concatenate([rc, rt])


def _jacobian_coo(params: ReactorParams, state: StateField):
    """COO triplets of the analytic Jacobian in stacked (C-rows, T-rows) order.

    Column/row index i refers to C at node i; m+i refers to T at node i.
    """
    m = params.m_nodes
    c, t = state.c, state.t
    h = 1.0 / (m - 1)
    e, de = _rate_terms(params, c, t)

    rows, cols, vals = [], [], []

    def add(r, co, v):
        rows.append(r)
        cols.append(co)
        vals.append(v)

    idx = np.arange(1, m - 1)
    a_diff_c = 1.0 / (params.pe1 * h**2)
    a_diff_t = 1.0 / (params.le * params.pe2 * h**2)
    a_conv_c = 1.0 / (2.0 * h)
    a_conv_t = 1.0 / (params.le * 2.0 * h)

    # concentration rows, interior
    add(idx, idx - 1, np.full(m - 2, a_diff_c + a_conv_c))
    add(idx, idx, -2.0 * a_diff_c - params.da * e[1:-1])
    add(idx, idx + 1, np.full(m - 2, a_diff_c - a_conv_c))
    add(idx, m + idx, params.da * (1.0 - c[1:-1]) * de[1:-1])

    # temperature rows, interior
    add(m + idx, m + idx - 1, np.full(m - 2, a_diff_t + a_conv_t))
    add(
        m + idx,
        m + idx,
        -2.0 * a_diff_t
        - params.beta / params.le
        + params.b_rise * params.da * (1.0 - c[1:-1]) * de[1:-1],
    )
    add(m + idx, m + idx + 1, np.full(m - 2, a_diff_t - a_conv_t))
    add(m + idx, idx, -params.b_rise * params.da * e[1:-1])

    # boundary rows
    add(0, 0, -1.5 / h - params.pe1)
    add(0, 1, 2.0 / h)
    add(0, 2, -0.5 / h)
    add(m, m, -1.5 / h - params.pe2)
    add(m, m + 1, 2.0 / h)
    add(m, m + 2, -0.5 / h)
    add(m - 1, m - 1, 1.5 / h)
    add(m - 1, m - 2, -2.0 / h)
    add(m - 1, m - 3, 0.5 / h)
    add(2 * m - 1, 2 * m - 1, 1.5 / h)
    add(2 * m - 1, 2 * m - 2, -2.0 / h)
    add(2 * m - 1, 2 * m - 3, 0.5 / h)

    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(c_) for c_ in cols])
    vals = np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in vals])
    return rows, cols, vals


def jacobian(params: ReactorParams, state: StateField) -> sp.csr_matrix:
    """Analytic Jacobian of ``residual`` w.r.t. the stacked state."""
    m = params.m_nodes
    rows, cols, vals = _jacobian_coo(params, state)
    return sp.coo_matrix((vals, (rows, cols)), shape=(2 * m, 2 * m)).tocsr()


# Interleaving (C0,T0,C1,T1,...) makes the Jacobian banded with bandwidth 4:
# interior rows couple nodes i-1..i+1 (offsets up to 3) and boundary rows
# reach two nodes inward (offset 4).
_BAND = 4


def _solve_newton_step(params, rows, cols, vals, rhs):
    m = params.m_nodes
    # stacked index -> interleaved index
    perm = np.empty(2 * m, dtype=np.intp)
    perm[:m] = 2 * np.arange(m)
    perm[m:] = 2 * np.arange(m) + 1
    r = perm[rows]
    c = perm[cols]
    ab = np.zeros((2 * _BAND + 1, 2 * m))
    np.add.at(ab, (_BAND + r - c, c), vals)
    rhs_i = np.empty_like(rhs)
    rhs_i[perm] = rhs
    sol_i = solve_banded((_BAND, _BAND), ab, rhs_i)
    return sol_i[perm]


def _newton(params: ReactorParams, state: StateField, tol, max_iter, max_halvings=30):
    x = state.stacked().copy()
    r = residual(params, StateField.from_stacked(x))
    nr = float(np.max(np.abs(r))) if np.all(np.isfinite(r)) else np.inf
    for _ in range(max_iter):
        if nr <= tol:
            return StateField.from_stacked(x), nr
        rows, cols, vals = _jacobian_coo(params, StateField.from_stacked(x))
        if not np.all(np.isfinite(vals)):
            raise SolveFailure("Jacobian is non-finite", nr)
        try:
            dx = _solve_newton_step(params, rows, cols, vals, -r)
        except np.linalg.LinAlgError as exc:
            raise SolveFailure(f"linear solve failed: {exc}", nr) from exc
        step = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + step * dx
            r_new = residual(params, StateField.from_stacked(x_new))
            nr_new = (
                float(np.max(np.abs(r_new))) if np.all(np.isfinite(r_new)) else np.inf
            )
            if nr_new < nr:
                x, r, nr = x_new, r_new, nr_new
                break
            step *= 0.5
        else:
            raise SolveFailure("Newton stalled (no damping step reduced residual)", nr)
    if nr <= tol:
        return StateField.from_stacked(x), nr
    raise SolveFailure("Newton did not converge within iteration limit", nr)


def default_schedule(da: float, steps: int = 20) -> np.ndarray:
    """Uniform Damkohler continuation schedule 0 -> da."""
    return np.linspace(0.0, da, steps + 1)


def ignited_guess(params: ReactorParams) -> StateField:
    """Initial iterate on the ignited branch: a thin conversion front at the
    inlet with a wall-anchored temperature bump. Only a basin seed; Newton
    does the rest."""
    y = params.grid
    tw = params.wall_profile()
    c = 1.0 - np.exp(-40.0 * y)
    t = tw + 0.5 * params.b_rise * c * np.exp(-params.beta * y)
    return StateField(c, t)


def solve_steady(
    params: ReactorParams,
    guess: StateField | None = None,
    schedule: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> StateField:
    """Solve the steady-state equations by damped Newton.

    Tries direct Newton from ``guess`` first; if that stalls, restarts with
    homotopy in Da following ``schedule`` (default: 20 uniform steps from 0).
    The exothermic reaction ignites for hot wall settings: past the ignition
    fold the low-conversion branch ceases to exist and continuation from the
    previous state must stall, so stalled steps retry from an ignited-branch
    iterate (at the stalled Da, at the target Da, then walking down from a
    hotter anchor). The whole cascade is deterministic.

    Raises SolveFailure (carrying the last residual norm) once every fallback
    is exhausted.
    """
    if guess is None:
        guess = StateField.zeros(params.m_nodes)
    if guess.m_nodes != params.m_nodes:
        raise ValueError("guess dimensions do not match params.m_nodes")
    try:
        state, _ = _newton(params, guess, tol, max_iter)
        return state
    except SolveFailure:
        pass
    if schedule is None:
        schedule = default_schedule(params.da)
    schedule = np.asarray(schedule, dtype=float)
    if np.any(np.diff(schedule) < 0):
        raise ValueError("continuation schedule must be nondecreasing in Da")

    state = StateField.zeros(params.m_nodes)
    last_norm = np.inf
    for da in schedule:
        pd = params.with_da(da)
        try:
            state, _ = _newton(pd, state, tol, max_iter)
            continue
        except SolveFailure as exc:
            last_norm = exc.residual_norm
        try:
            state, _ = _newton(pd, ignited_guess(pd), tol, max_iter)
            continue
        except SolveFailure as exc:
            last_norm = exc.residual_norm
        break
    else:
        return state

    # Hysteresis window: neither branch reachable at the stalled Da. Land on
    # the ignited branch at the target (or a hotter anchor) and walk down.
    try:
        state, _ = _newton(params, ignited_guess(params), tol, max_iter)
        return state
    except SolveFailure as exc:
        last_norm = exc.residual_norm
    for factor in (1.5, 2.0, 3.0, 4.0):
        pa = params.with_da(params.da * factor)
        try:
            state, _ = _newton(pa, ignited_guess(pa), tol, max_iter)
        except SolveFailure as exc:
            last_norm = exc.residual_norm
            continue
        try:
            for da in np.linspace(pa.da, params.da, 11)[1:]:
                state, _ = _newton(params.with_da(da), state, tol, max_iter)
            return state
        except SolveFailure as exc:
            last_norm = exc.residual_norm
    raise SolveFailure("continuation and ignited fallbacks exhausted", last_norm)


def c_exit(state: StateField) -> float:
    """Exit concentration: C at the last grid node."""
    return float(state.c[-1])


def save_solution_csv(path, grid, state: StateField) -> None:
    """One solution as CSV with header row ``y, C, T``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "C", "T"])
        for y, cv, tv in zip(grid, state.c, state.t):
            writer.writerow([repr(float(y)), repr(float(cv)), repr(float(tv))])


def load_solution_csv(path):
    """Inverse of save_solution_csv; returns (grid, StateField)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["y", "C", "T"]:
            raise ValueError(f"unexpected header {header!r} in {path}")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows)
    return arr[:, 0], StateField(arr[:, 1], arr[:, 2])


def export_snapshots(out_dir, grid, designs, states, prefix="sample") -> list[str]:
    """Batch export: one ``y, C, T`` CSV per solution plus an index file
    mapping file names to design vectors."""
    os.makedirs(out_dir, exist_ok=True)
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    paths = []
    index_path = os.path.join(out_dir, f"{prefix}_index.csv")
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file"] + [f"d{i + 1}" for i in range(designs.shape[1])])
        for i, (d, state) in enumerate(zip(designs, states)):
            name = f"{prefix}_{i:04d}.csv"
            save_solution_csv(os.path.join(out_dir, name), grid, state)
            writer.writerow([name] + [repr(float(v)) for v in d])
            paths.append(os.path.join(out_dir, name))
    return [index_path] + paths
