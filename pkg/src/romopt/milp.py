"""MILP compilation of reduced surrogates.

encode_pwa_sos turns a single-hidden-layer tanh network plus a PWA curve into
a lambda-interpolation MILP (binary adjacency rows by default, native SOS2
groups optionally). encode_relu_bigm turns a deep ReLU network into the
big-M disjunctive form. Input and output scalers are folded into the affine
rows, so models are stated in physical units throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnet import Network
from .pca import PcaBasis
from .pwa import PwaCurve, eval_curve

DEFAULT_BIG_M = 10000.0


@dataclass
class Variable:
    name: str
    lb: float
    ub: float
    kind: str = "continuous"  # continuous | binary

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.kind == "binary":
            self.lb, self.ub = 0.0, 1.0
        if np.isnan(self.lb) or np.isnan(self.ub) or self.lb > self.ub:
            raise ValueError(f"bad bounds [{self.lb}, {self.ub}] for {self.name!r}")


@dataclass
class Constraint:
    coeffs: dict[int, float]
    sense: str  # <= | = | >=
    rhs: float
    name: str = ""

    def __post_init__(self):
        if self.sense not in ("<=", "=", ">="):
            raise ValueError(f"unknown sense {self.sense!r}")
        if not np.isfinite(self.rhs):
            raise ValueError(f"non-finite rhs in {self.name!r}")
        for idx, val in self.coeffs.items():
            if not np.isfinite(val):
                raise ValueError(f"non-finite coefficient on var {idx} in {self.name!r}")


@dataclass
class MilpModel:
    """Sparse MILP: variables, constraint rows, optional SOS2 groups, and a
    linear objective. ``groups`` maps semantic names (d, u, per-neuron blocks)
    to variable index lists so later passes can address them."""

    variables: list[Variable] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    sos2_groups: list[list[int]] = field(default_factory=list)
    sense: str = "min"
    objective: dict[int, float] = field(default_factory=dict)
    objective_const: float = 0.0
    groups: dict[str, list[int]] = field(default_factory=dict)
    name: str = "model"
    # per-SOS2-group curve metadata (z var, h var, breakpoints, values);
    # lets a solver tighten z and h bounds when it narrows a group
    sos2_meta: list[dict] = field(default_factory=list)

    def add_var(self, name, lb=-np.inf, ub=np.inf, kind="continuous") -> int:
        self.variables.append(Variable(name, float(lb), float(ub), kind))
        return len(self.variables) - 1

    def add_constraint(self, coeffs, sense, rhs, name="") -> int:
        clean = {int(i): float(v) for i, v in coeffs.items() if v != 0.0}
        for i in clean:
            if not 0 <= i < len(self.variables):
                raise ValueError(f"constraint {name!r} references unknown variable {i}")
        if not name:
            name = f"c{len(self.constraints)}"
        self.constraints.append(Constraint(clean, sense, float(rhs), name))
        return len(self.constraints) - 1

    def add_sos2(self, indices) -> int:
        idx = [int(i) for i in indices]
        for i in idx:
            if not 0 <= i < len(self.variables):
                raise ValueError(f"SOS2 group references unknown variable {i}")
        self.sos2_groups.append(idx)
        return len(self.sos2_groups) - 1

    def set_objective(self, coeffs, sense="min", const=0.0) -> None:
        if sense not in ("min", "max"):
            raise ValueError(f"unknown sense {sense!r}")
        self.sense = sense
        self.objective = {int(i): float(v) for i, v in coeffs.items() if v != 0.0}
        self.objective_const = float(const)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_binary(self) -> int:
        return sum(v.kind == "binary" for v in self.variables)

    def var_names(self) -> list[str]:
        return [v.name for v in self.variables]


@dataclass(frozen=True)
class BoundsBox:
    """Design-variable box; optional state bounds ride along separately."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float).ravel())
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float).ravel())
        if self.lower.size != self.upper.size:
            raise ValueError("lower and upper differ in length")
        if np.any(self.lower > self.upper):
            raise ValueError("lb > ub in some dimension")

    @property
    def n_dims(self) -> int:
        return self.lower.size


@dataclass(frozen=True)
class LinearObjective:
    """sense * (d_coeffs . d + u_coeffs . u' + const)."""

    sense: str
    d_coeffs: np.ndarray
    u_coeffs: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ValueError(f"unknown sense {self.sense!r}")
        object.__setattr__(
            self, "d_coeffs", np.asarray(self.d_coeffs, dtype=float).ravel()
        )
        object.__setattr__(
            self, "u_coeffs", np.asarray(self.u_coeffs, dtype=float).ravel()
        )


def folded_layers(net: Network):
    """Affine layers with the input scaler folded into the first and the
    output descaler folded into the last: weights/biases in physical units."""
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    bs[0] = bs[0] + ws[0] @ net.in_scaler.c
    ws[0] = ws[0] * net.in_scaler.a[None, :]
    ws[-1] = ws[-1] / net.out_scaler.a[:, None]
    bs[-1] = (bs[-1] - net.out_scaler.c) / net.out_scaler.a
    return ws, bs


def _affine_interval(w, b, lo, hi):
    """Interval image of w x + b for x in [lo, hi], elementwise exact."""
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    return wp @ lo + wn @ hi + b, wp @ hi + wn @ lo + b


def preactivation_intervals(net: Network, bounds: BoundsBox):
    """Per-layer pre-activation intervals over the design box, propagated
    with interval arithmetic through the network's own activation."""
    if bounds.n_dims != net.spec.n_inputs:
        raise ValueError("bounds dimension does not match the network input")
    ws, bs = folded_layers(net)
    lo, hi = bounds.lower, bounds.upper
    intervals = []
    for w, b in zip(ws[:-1], bs[:-1]):
        zlo, zhi = _affine_interval(w, b, lo, hi)
        intervals.append((zlo, zhi))
        if net.spec.activation == "relu":
            lo, hi = np.maximum(zlo, 0.0), np.maximum(zhi, 0.0)
        else:
            lo, hi = np.tanh(zlo), np.tanh(zhi)
    return intervals


def tighten_bigm(net: Network, bounds: BoundsBox):
    """Per-neuron big-M values: the largest pre-activation magnitude each
    neuron can reach over the design box, by layerwise interval propagation.
    Always an upper bound on the true magnitude."""
    ms = []
    for zlo, zhi in preactivation_intervals(net, bounds):
        if not (np.all(np.isfinite(zlo)) and np.all(np.isfinite(zhi))):
            raise ValueError("interval propagation produced non-finite bounds")
        ms.append(np.maximum(np.abs(zlo), np.abs(zhi)))
    return ms


def encode_pwa_sos(
    net: Network,
    curve: PwaCurve,
    bounds: BoundsBox,
    objective: LinearObjective,
    sos2_native: bool = False,
    name: str = "pwa",
) -> MilpModel:
    """Lambda-form MILP of a tanh network with tanh replaced by the PWA
    curve, one interpolation block per hidden neuron (any depth; neurons are
    numbered globally across layers). Binary adjacency rows by default;
    sos2_native swaps them for declared SOS2 groups (branch-and-bound then
    branches on the groups).

    Pre-activation bounds are propagated layer by layer through the curve's
    exact interval image (the curve is monotone, so the image of [a, b] is
    [curve(a), curve(b)]). Fails if any neuron's range exceeds the curve span.
    """
    if net.spec.activation != "tanh":
        raise ValueError("PWA encoding applies to tanh networks")
    if objective.d_coeffs.size != net.spec.n_inputs:
        raise ValueError("objective d_coeffs length mismatch")
    if objective.u_coeffs.size != net.spec.n_outputs:
        raise ValueError("objective u_coeffs length mismatch")
    ws, bs = folded_layers(net)
    span = curve.z_max
    layer_iv = []
    lo_vec, hi_vec = bounds.lower, bounds.upper
    offset = 0
    for t in range(len(ws) - 1):
        zlo, zhi = _affine_interval(ws[t], bs[t], lo_vec, hi_vec)
        for j, (a, b) in enumerate(zip(zlo, zhi)):
            if a < -span - 1e-12 or b > span + 1e-12:
                raise ValueError(
                    f"neuron {offset + j}: pre-activation range [{a:.6g}, "
                    f"{b:.6g}] exceeds the curve span [-{span:g}, {span:g}]; "
                    f"refit the curve with z_max >= {max(abs(a), abs(b)):.6g}"
                )
        hlo = np.asarray(eval_curve(curve, zlo), dtype=float)
        hhi = np.asarray(eval_curve(curve, zhi), dtype=float)
        layer_iv.append((zlo, zhi, hlo, hhi))
        lo_vec, hi_vec = hlo, hhi
        offset += zlo.size
    n_pts = curve.breakpoints.size
    model = MilpModel(name=name)

    d_idx = [
        model.add_var(f"d{i}", bounds.lower[i], bounds.upper[i])
        for i in range(net.spec.n_inputs)
    ]
    u_idx = [model.add_var(f"u{ell}") for ell in range(net.spec.n_outputs)]
    model.groups["d"] = d_idx
    model.groups["u"] = u_idx

    prev_idx = d_idx
    g = 0
    for t, (zlo, zhi, hlo, hhi) in enumerate(layer_iv):
        wt, bt = ws[t], bs[t]
        h_layer = []
        for j in range(zlo.size):
            z_j = model.add_var(f"z{g}", zlo[j], zhi[j])
            h_j = model.add_var(f"h{g}", hlo[j], hhi[j])
            h_layer.append(h_j)
            lam = [model.add_var(f"l{g}_{i}", 0.0, 1.0) for i in range(n_pts)]
            model.groups[f"lambda{g}"] = lam
            # pre-activation row: z - sum w[j,i] prev_i = b[j]
            row = {prev_idx[i]: -wt[j, i] for i in range(len(prev_idx))}
            row[z_j] = 1.0
            model.add_constraint(row, "=", bt[j], f"pre{g}")
            # interpolation rows
            model.add_constraint({i: 1.0 for i in lam}, "=", 1.0, f"lsum{g}")
            row = {lam[i]: -curve.breakpoints[i] for i in range(n_pts)}
            row[z_j] = 1.0
            model.add_constraint(row, "=", 0.0, f"zint{g}")
            row = {lam[i]: -curve.values[i] for i in range(n_pts)}
            row[h_j] = 1.0
            model.add_constraint(row, "=", 0.0, f"hint{g}")
            if sos2_native:
                model.add_sos2(lam)
                model.sos2_meta.append(
                    {
                        "z": z_j,
                        "h": h_j,
                        "breakpoints": curve.breakpoints.copy(),
                        "values": curve.values.copy(),
                    }
                )
            else:
                ybin = [
                    model.add_var(f"y{g}_{s}", kind="binary")
                    for s in range(n_pts - 1)
                ]
                model.groups[f"segbin{g}"] = ybin
                model.add_constraint(
                    {lam[0]: 1.0, ybin[0]: -1.0}, "<=", 0.0, f"adj{g}_0"
                )
                for i in range(1, n_pts - 1):
                    model.add_constraint(
                        {lam[i]: 1.0, ybin[i - 1]: -1.0, ybin[i]: -1.0},
                        "<=",
                        0.0,
                        f"adj{g}_{i}",
                    )
                model.add_constraint(
                    {lam[n_pts - 1]: 1.0, ybin[n_pts - 2]: -1.0},
                    "<=",
                    0.0,
                    f"adj{g}_{n_pts - 1}",
                )
                model.add_constraint({i: 1.0 for i in ybin}, "=", 1.0, f"ysum{g}")
            g += 1
        prev_idx = h_layer

    wo, bo = ws[-1], bs[-1]
    for ell in range(net.spec.n_outputs):
        row = {prev_idx[j]: -wo[ell, j] for j in range(len(prev_idx))}
        row[u_idx[ell]] = 1.0
        model.add_constraint(row, "=", bo[ell], f"out{ell}")

    obj = {d_idx[i]: objective.d_coeffs[i] for i in range(len(d_idx))}
    for ell in range(len(u_idx)):
        obj[u_idx[ell]] = obj.get(u_idx[ell], 0.0) + objective.u_coeffs[ell]
    model.set_objective(obj, objective.sense, objective.const)
    return model


def encode_relu_bigm(
    net: Network,
    bounds: BoundsBox,
    objective: LinearObjective,
    m_mode: str = "tight",
    m_const: float = DEFAULT_BIG_M,
    name: str = "relu",
) -> MilpModel:
    """Big-M disjunctive MILP of a (deep) ReLU network.

    Per neuron: z = z' - z'', 0 <= z' <= M(1-bz), 0 <= z'' <= M bz; the next
    layer and the linear output consume the post-ReLU z'.
    """
    if net.spec.activation != "relu":
        raise ValueError("big-M encoding applies to ReLU nets")
    if objective.d_coeffs.size != net.spec.n_inputs:
        raise ValueError("objective d_coeffs length mismatch")
    if objective.u_coeffs.size != net.spec.n_outputs:
        raise ValueError("objective u_coeffs length mismatch")
    if m_mode == "tight":
        ms = tighten_bigm(net, bounds)
    elif m_mode == "constant":
        ms = [np.full(w, m_const) for w in net.spec.hidden_widths]
    else:
        raise ValueError(f"unknown m_mode {m_mode!r}")
    ws, bs = folded_layers(net)
    model = MilpModel(name=name)
    d_idx = [
        model.add_var(f"d{i}", bounds.lower[i], bounds.upper[i])
        for i in range(net.spec.n_inputs)
    ]
    u_idx = [model.add_var(f"u{ell}") for ell in range(net.spec.n_outputs)]
    model.groups["d"] = d_idx
    model.groups["u"] = u_idx

    prev = d_idx
    for t, width in enumerate(net.spec.hidden_widths):
        w, b = ws[t], bs[t]
        zp_layer = []
        for j in range(width):
            m_j = float(ms[t][j])
            zp = model.add_var(f"zp{t}_{j}", 0.0, np.inf)
            zn = model.add_var(f"zn{t}_{j}", 0.0, np.inf)
            bz = model.add_var(f"bz{t}_{j}", kind="binary")
            # affine row: zp - zn - sum w[j,i] prev_i = b[j]
            row = {prev[i]: -w[j, i] for i in range(len(prev))}
            row[zp] = 1.0
            row[zn] = -1.0
            model.add_constraint(row, "=", b[j], f"aff{t}_{j}")
            # zp <= M (1 - bz); zn <= M bz
            model.add_constraint({zp: 1.0, bz: m_j}, "<=", m_j, f"on{t}_{j}")
            model.add_constraint({zn: 1.0, bz: -m_j}, "<=", 0.0, f"off{t}_{j}")
            zp_layer.append(zp)
        model.groups[f"relu{t}"] = zp_layer
        prev = zp_layer

    wo, bo = ws[-1], bs[-1]
    for ell in range(net.spec.n_outputs):
        row = {prev[j]: -wo[ell, j] for j in range(len(prev))}
        row[u_idx[ell]] = 1.0
        model.add_constraint(row, "=", bo[ell], f"out{ell}")

    obj = {d_idx[i]: objective.d_coeffs[i] for i in range(len(d_idx))}
    for ell in range(len(u_idx)):
        obj[u_idx[ell]] = obj.get(u_idx[ell], 0.0) + objective.u_coeffs[ell]
    model.set_objective(obj, objective.sense, objective.const)
    return model


def add_state_bounds(
    model: MilpModel, basis: PcaBasis, lb, ub, rows=None
) -> MilpModel:
    """Append reconstructed-state box rows lb <= (P^T u' + mean) <= ub for the
    selected state rows; non-finite sides are skipped. Mutates and returns
    the model."""
    u_idx = model.groups.get("u")
    if not u_idx:
        raise ValueError("model has no u' variable group")
    if len(u_idx) != basis.k:
        raise ValueError(f"model has {len(u_idx)} u' vars, basis k={basis.k}")
    if rows is None:
        rows = range(basis.m)
    lb = np.broadcast_to(np.asarray(lb, dtype=float), (basis.m,))
    ub = np.broadcast_to(np.asarray(ub, dtype=float), (basis.m,))
    for r in rows:
        if not 0 <= r < basis.m:
            raise ValueError(f"state row {r} outside [0, {basis.m})")
        coeffs = {u_idx[i]: basis.p[i, r] for i in range(basis.k)}
        shift = basis.mean[r] if basis.mean is not None else 0.0
        if np.isfinite(lb[r]):
            model.add_constraint(coeffs, ">=", lb[r] - shift, f"slb{r}")
        if np.isfinite(ub[r]):
            model.add_constraint(coeffs, "<=", ub[r] - shift, f"sub{r}")
    return model
