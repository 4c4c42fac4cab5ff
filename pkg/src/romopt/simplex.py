"""Bounded-variable revised simplex over compiled MILP arrays.

LpProblem compiles a MilpModel once (rows to equality form with signed
slacks, binaries relaxed to [0, 1]) and can then be solved repeatedly under
different structural bound vectors, which is what branch and bound needs.
Phase 1 starts from a slack basis and adds artificials only for rows whose
slack start is infeasible; Bland's rule engages after a run of degenerate
pivots so cycling cannot stall a solve. Any loss of numerical control is
reported as SimplexFailure, never as a silently wrong answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .milp import MilpModel

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-10
RESULT_TOL = 1e-7
REFRESH_EVERY = 128
BLAND_AFTER = 1000
MAX_ITER = 200000

BASIC, AT_LO, AT_UP, NB_FREE = 0, 1, 2, 3


class SimplexFailure(RuntimeError):
    """Numerical breakdown: singular basis, stalled recovery, or an
    iteration budget blowout."""


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None = None
    objective: float | None = None


class LpProblem:
    """Equality-form LP arrays shared across repeated bounded solves."""

    def __init__(self, a_struct, senses, rhs, c_struct, lb, ub, maximize, const=0.0):
        self.m, self.n = a_struct.shape
        self.a_ext = sp.hstack(
            [sp.csc_matrix(a_struct), sp.eye(self.m, format="csc")], format="csc"
        )
        self.b = np.asarray(rhs, dtype=float)
        self.maximize = bool(maximize)
        self.const = float(const)
        # internal sense is always minimize
        self.c_int = np.asarray(c_struct, dtype=float) * (-1.0 if maximize else 1.0)
        slack_lo = np.zeros(self.m)
        slack_hi = np.zeros(self.m)
        for i, s in enumerate(senses):
            if s == "<=":
                slack_lo[i], slack_hi[i] = 0.0, np.inf
            elif s == ">=":
                slack_lo[i], slack_hi[i] = -np.inf, 0.0
            else:
                slack_lo[i], slack_hi[i] = 0.0, 0.0
        self.l0 = np.concatenate([np.asarray(lb, dtype=float), slack_lo])
        self.u0 = np.concatenate([np.asarray(ub, dtype=float), slack_hi])

    @classmethod
    def from_model(cls, model: MilpModel) -> "LpProblem":
        n, m = model.n_vars, len(model.constraints)
        rows, cols, vals = [], [], []
        senses, rhs = [], []
        for i, c in enumerate(model.constraints):
            for j, v in c.coeffs.items():
                rows.append(i)
                cols.append(j)
                vals.append(v)
            senses.append(c.sense)
            rhs.append(c.rhs)
        a = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
        c_struct = np.zeros(n)
        for j, v in model.objective.items():
            c_struct[j] = v
        lb = np.array([v.lb for v in model.variables])
        ub = np.array([v.ub for v in model.variables])
        return cls(
            a, senses, rhs, c_struct, lb, ub, model.sense == "max",
            model.objective_const,
        )

    # -- column access including virtual artificial columns ---------------

    def _col(self, j):
        if j < self.n + self.m:
            sl = slice(self.a_ext.indptr[j], self.a_ext.indptr[j + 1])
            return self.a_ext.indices[sl], self.a_ext.data[sl]
        i = j - (self.n + self.m)
        return np.array([i]), np.array([self._sigma[i]])

    def _ax(self, x):
        out = self.a_ext @ x[: self.n + self.m]
        return out + self._sigma * x[self.n + self.m :]

    def _aty(self, y):
        head = self.a_ext.T @ y
        return np.concatenate([head, self._sigma * y])

    # -- simplex core ------------------------------------------------------

    def _refresh(self):
        """Refactor the basis inverse and recompute basic values exactly."""
        cols = [self._col(j) for j in self.basis]
        bm = np.zeros((self.m, self.m))
        for k, (ri, vi) in enumerate(cols):
            bm[ri, k] = vi
        try:
            self.binv = np.linalg.inv(bm)
        except np.linalg.LinAlgError as exc:
            raise SimplexFailure("singular basis during refactor") from exc
        xs = self.x.copy()
        xs[self.basis] = 0.0
        self.x[self.basis] = self.binv @ (self.b - self._ax(xs))

    def _iterate(self, c, phase1):
        degenerate = 0
        bland = False
        since_refresh = 0
        lo, hi = self.l, self.u
        for _ in range(MAX_ITER):
            y = self.binv.T @ c[self.basis]
            d = c - self._aty(y)
            d[self.basis] = 0.0
            movable = hi > lo
            elig = movable & (
                ((self.state == AT_LO) & (d < -OPT_TOL))
                | ((self.state == AT_UP) & (d > OPT_TOL))
                | ((self.state == NB_FREE) & (np.abs(d) > OPT_TOL))
            )
            if not np.any(elig):
                return "optimal"
            idx = np.nonzero(elig)[0]
            if bland:
                j = int(idx[0])
            else:
                j = int(idx[np.argmax(np.abs(d[idx]))])
            if self.state[j] == AT_LO:
                sigma = 1.0
            elif self.state[j] == AT_UP:
                sigma = -1.0
            else:
                sigma = -np.sign(d[j])
            ri, vi = self._col(j)
            w = self.binv[:, ri] @ vi
            g = -sigma * w  # movement of basic values per unit step

            vb = self.x[self.basis]
            lb_b, ub_b = lo[self.basis], hi[self.basis]
            ratios = np.full(self.m, np.inf)
            up_mask = g > PIVOT_TOL
            dn_mask = g < -PIVOT_TOL
            ratios[up_mask] = (ub_b[up_mask] - vb[up_mask]) / g[up_mask]
            ratios[dn_mask] = (lb_b[dn_mask] - vb[dn_mask]) / g[dn_mask]
            np.maximum(ratios, 0.0, out=ratios)
            t_own = hi[j] - lo[j] if self.state[j] != NB_FREE else np.inf
            t_basic = ratios.min() if self.m else np.inf

            if t_own <= t_basic:
                if not np.isfinite(t_own):
                    if phase1:
                        raise SimplexFailure("phase-1 objective unbounded")
                    return "unbounded"
                # bound flip, no basis change
                self.x[self.basis] = vb + g * t_own
                self.x[j] = hi[j] if self.state[j] == AT_LO else lo[j]
                self.state[j] = AT_UP if self.state[j] == AT_LO else AT_LO
                continue
            if not np.isfinite(t_basic):
                if phase1:
                    raise SimplexFailure("phase-1 objective unbounded")
                return "unbounded"

            block = np.nonzero(ratios <= t_basic + 1e-12)[0]
            if bland:
                leave = int(block[np.argmin(self.basis[block])])
            else:
                leave = int(block[np.argmax(np.abs(g[block]))])
            t = float(ratios[leave])
            if abs(w[leave]) < PIVOT_TOL:
                raise SimplexFailure("pivot element below tolerance")
            if t <= 1e-12:
                degenerate += 1
                if degenerate >= BLAND_AFTER:
                    bland = True

            out_var = self.basis[leave]
            self.x[self.basis] = vb + g * t
            self.x[j] = self.x[j] + sigma * t
            if g[leave] > 0:
                self.x[out_var] = hi[out_var]
                self.state[out_var] = AT_UP
            else:
                self.x[out_var] = lo[out_var]
                self.state[out_var] = AT_LO
            self.basis[leave] = j
            self.state[j] = BASIC
            piv = w[leave]
            self.binv[leave] /= piv
            w2 = w.copy()
            w2[leave] = 0.0
            self.binv -= np.outer(w2, self.binv[leave])
            since_refresh += 1
            if since_refresh >= REFRESH_EVERY:
                self._refresh()
                since_refresh = 0
        raise SimplexFailure("simplex iteration limit exceeded")

    def solve(self, lb=None, ub=None) -> LpSolution:
        """Solve under optional structural bound overrides (length-n arrays)."""
        n, m = self.n, self.m
        lo = self.l0.copy()
        hi = self.u0.copy()
        if lb is not None:
            lo[:n] = lb
        if ub is not None:
            hi[:n] = ub
        if np.any(lo > hi + FEAS_TOL):
            return LpSolution("infeasible")
        hi = np.maximum(hi, lo)
        n_all = n + 2 * m
        self.l = np.concatenate([lo, np.zeros(m)])
        self.u = np.concatenate([hi, np.full(m, np.inf)])
        self.x = np.zeros(n_all)
        self.state = np.full(n_all, AT_LO, dtype=np.int8)
        self._sigma = np.ones(m)

        # nonbasic start for structurals: finite bound nearest zero
        for j in range(n):
            if np.isfinite(lo[j]) and np.isfinite(hi[j]):
                if abs(lo[j]) <= abs(hi[j]):
                    self.x[j], self.state[j] = lo[j], AT_LO
                else:
                    self.x[j], self.state[j] = hi[j], AT_UP
            elif np.isfinite(lo[j]):
                self.x[j], self.state[j] = lo[j], AT_LO
            elif np.isfinite(hi[j]):
                self.x[j], self.state[j] = hi[j], AT_UP
            else:
                self.x[j], self.state[j] = 0.0, NB_FREE

        r = self.b - self.a_ext[:, :n] @ self.x[:n]
        basis = np.empty(m, dtype=int)
        art_active = np.zeros(m, dtype=bool)
        for i in range(m):
            s_lo, s_hi = self.l0[n + i], self.u0[n + i]
            if s_lo - FEAS_TOL <= r[i] <= s_hi + FEAS_TOL:
                basis[i] = n + i
                self.x[n + i] = min(max(r[i], s_lo), s_hi)
                self.state[n + i] = BASIC
                self.u[n + m + i] = 0.0  # artificial never needed
            else:
                s_val = s_lo if r[i] < s_lo else s_hi
                self.x[n + i] = s_val
                self.state[n + i] = AT_LO if s_val == s_lo else AT_UP
                resid = r[i] - s_val
                self._sigma[i] = 1.0 if resid >= 0 else -1.0
                basis[i] = n + m + i
                self.x[n + m + i] = abs(resid)
                self.state[n + m + i] = BASIC
                art_active[i] = True
        self.basis = basis
        self._refresh()

        if np.any(art_active):
            c1 = np.zeros(n_all)
            c1[n + m :][art_active] = 1.0
            self._iterate(c1, phase1=True)
            infeas = float(c1 @ self.x)
            if infeas > FEAS_TOL * (1.0 + np.abs(self.b).max(initial=0.0)):
                return LpSolution("infeasible")
            self.u[n + m :] = 0.0
            self.x[n + m :] = np.minimum(self.x[n + m :], 0.0)

        c2 = np.zeros(n_all)
        c2[:n] = self.c_int
        status = self._iterate(c2, phase1=False)
        if status == "unbounded":
            return LpSolution("unbounded")

        self._refresh()
        if self._max_violation() > RESULT_TOL:
            # one recovery pass: clean basis, re-optimize, re-verify
            self._iterate(c2, phase1=False)
            self._refresh()
            if self._max_violation() > RESULT_TOL:
                raise SimplexFailure("solution failed feasibility verification")
        xs = self.x[:n].copy()
        obj = float(self.c_int @ xs)
        if self.maximize:
            obj = -obj
        return LpSolution("optimal", xs, obj + self.const)

    def _max_violation(self) -> float:
        worst = float(np.max(np.maximum(self.l - self.x, self.x - self.u), initial=0.0))
        resid = self.b - self._ax(self.x)
        scale = 1.0 + np.abs(self.b).max(initial=0.0)
        return max(worst, float(np.abs(resid).max(initial=0.0)) / scale)


def solve_lp(model: MilpModel) -> LpSolution:
    """Solve the LP relaxation of a MilpModel (binaries relaxed to [0,1])."""
    return LpProblem.from_model(model).solve()
