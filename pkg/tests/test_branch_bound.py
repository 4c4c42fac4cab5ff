"""Branch-and-bound and multistart local-search tests.

The MILP oracle is exhaustive enumeration: every binary pattern is fixed in
turn and the continuous remainder (if any) is solved as an LP. Pure-binary
instances need no LP at all, which keeps that half of the oracle fully
independent of the simplex code.
"""

import itertools

import numpy as np
import pytest

from romopt.branch_bound import multistart_local, solve_milp
from romopt.milp import (
    BoundsBox,
    LinearObjective,
    MilpModel,
    encode_pwa_sos,
    folded_layers,
)
from romopt.nnet import AffineScaler, Network, NetworkSpec, forward, input_jacobian
from romopt.pca import PcaBasis
from romopt.pwa import adaptive_fit, eval_curve
from romopt.simplex import LpProblem


def random_milp(seed, n_bin, n_cont, m, eq_frac=0.1, anchored=False):
    """Random mixed instance; anchored rows stay feasible at a known point."""
    rng = np.random.default_rng(seed)
    model = MilpModel()
    x0 = []
    for j in range(n_bin):
        model.add_var(f"b{j}", kind="binary")
        x0.append(float(rng.integers(0, 2)))
    for j in range(n_cont):
        lo = rng.uniform(-3.0, 0.0)
        hi = lo + rng.uniform(0.5, 4.0)
        model.add_var(f"x{j}", lo, hi)
        x0.append(rng.uniform(lo, hi))
    x0 = np.array(x0)
    n = n_bin + n_cont
    for _ in range(m):
        nnz = int(rng.integers(1, n + 1))
        cols = rng.choice(n, size=nnz, replace=False)
        coeffs = {int(j): float(rng.normal()) for j in cols}
        r = rng.random()
        sense = "=" if r < eq_frac else ("<=" if r < 0.6 else ">=")
        rhs = float(rng.normal(scale=1.5))
        if anchored:
            at_x0 = sum(v * x0[j] for j, v in coeffs.items())
            pad = float(rng.uniform(0.0, 1.5))
            rhs = at_x0 + (pad if sense == "<=" else -pad if sense == ">=" else 0.0)
        model.add_constraint(coeffs, sense, rhs)
    obj = {j: float(rng.normal()) for j in range(n)}
    model.set_objective(obj, "max" if rng.random() < 0.5 else "min",
                        float(rng.normal()))
    return model


def enumerate_best(model):
    """Best objective over all binary patterns; None when infeasible."""
    bins = [i for i, v in enumerate(model.variables) if v.kind == "binary"]
    conts = [i for i, v in enumerate(model.variables) if v.kind != "binary"]
    sign = 1.0 if model.sense == "max" else -1.0
    lb0 = np.array([v.lb for v in model.variables])
    ub0 = np.array([v.ub for v in model.variables])
    prob = LpProblem.from_model(model) if conts else None
    best = None
    for bits in itertools.product((0.0, 1.0), repeat=len(bins)):
        x = np.zeros(len(model.variables))
        x[bins] = bits
        if prob is None:
            feasible = True
            for c in model.constraints:
                lhs = sum(v * x[i] for i, v in c.coeffs.items())
                if c.sense == "<=" and lhs > c.rhs + 1e-9:
                    feasible = False
                elif c.sense == ">=" and lhs < c.rhs - 1e-9:
                    feasible = False
                elif c.sense == "=" and abs(lhs - c.rhs) > 1e-9:
                    feasible = False
            if not feasible:
                continue
            val = sum(v * x[i] for i, v in model.objective.items())
            val += model.objective_const
        else:
            lb, ub = lb0.copy(), ub0.copy()
            lb[bins] = bits
            ub[bins] = bits
            sol = prob.solve(lb, ub)
            if sol.status != "optimal":
                continue
            val = sol.objective
        if best is None or sign * val > sign * best:
            best = val
    return best


def make_net(widths, seed):
    rng = np.random.default_rng(seed)
    weights = [
        rng.normal(scale=0.7, size=(widths[t + 1], widths[t]))
        for t in range(len(widths) - 1)
    ]
    biases = [rng.normal(scale=0.3, size=widths[t + 1])
              for t in range(len(widths) - 1)]
    spec = NetworkSpec(tuple(widths), "tanh")
    return Network(spec, weights, biases, AffineScaler.identity(widths[0]),
                   AffineScaler.identity(widths[-1]))


def trace_pwa(net, curve, d):
    ws, bs = folded_layers(net)
    z = ws[0] @ np.asarray(d, dtype=float) + bs[0]
    return ws[1] @ eval_curve(curve, z) + bs[1]


def test_random_milps_match_enumeration():
    for seed in range(20):
        n_bin = int(np.random.default_rng(1000 + seed).integers(3, 9))
        anchored = seed % 2 == 0
        model = random_milp(seed, n_bin=n_bin, n_cont=2, m=4, eq_frac=0.05,
                            anchored=anchored)
        ref = enumerate_best(model)
        if anchored:
            assert ref is not None
        rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
        if ref is None:
            assert rep.status == "infeasible"
            assert rep.objective is None
        else:
            assert rep.objective == pytest.approx(ref, abs=1e-8)
            assert rep.x is not None


def test_pure_binary_instances():
    for seed in range(6):
        model = random_milp(300 + seed, n_bin=9, n_cont=0, m=4, eq_frac=0.0)
        ref = enumerate_best(model)
        rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
        if ref is None:
            assert rep.status == "infeasible"
        else:
            assert rep.objective == pytest.approx(ref, abs=1e-8)
            bins = [i for i, v in enumerate(model.variables)
                    if v.kind == "binary"]
            frac = np.abs(rep.x[bins] - np.round(rep.x[bins]))
            assert frac.max() <= 1e-6


def test_integral_relaxation_solves_at_root():
    model = MilpModel()
    x = model.add_var("x", kind="binary")
    y = model.add_var("y", kind="binary")
    model.add_constraint({x: 1.0, y: 1.0}, "<=", 1.0)
    model.set_objective({x: 1.0, y: 2.0}, "max")
    rep = solve_milp(model)
    assert rep.status == "optimal"
    assert rep.nodes == 1
    assert rep.objective == pytest.approx(2.0, abs=1e-9)
    assert rep.gap == 0.0


def test_no_integer_point():
    # LP relaxation feasible at x = 0.5, neither binary value fits the rows
    model = MilpModel()
    x = model.add_var("x", kind="binary")
    model.add_constraint({x: 1.0}, ">=", 0.25)
    model.add_constraint({x: 1.0}, "<=", 0.75)
    model.set_objective({x: 1.0}, "max")
    rep = solve_milp(model)
    assert rep.status == "infeasible"
    assert rep.objective is None and rep.x is None


def test_root_pruned_by_interval_propagation():
    model = MilpModel()
    x = model.add_var("x", 0.0, 1.0, kind="binary")
    y = model.add_var("y", 0.0, 1.0)
    model.add_constraint({x: 1.0, y: 1.0}, "<=", -1.0)
    model.set_objective({x: 1.0}, "max")
    rep = solve_milp(model)
    assert rep.status == "infeasible"
    assert rep.nodes == 1


def test_bound_dominates_incumbent():
    for seed in (2, 7, 13):
        model = random_milp(seed, n_bin=6, n_cont=3, m=4)
        rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
        if rep.objective is None:
            continue
        sign = 1.0 if model.sense == "max" else -1.0
        assert sign * rep.bound >= sign * rep.objective - 1e-9


def test_gap_limit_status_and_bound():
    # a loose tolerance stops the solve early on a knapsack-style instance
    rng = np.random.default_rng(5)
    model = MilpModel()
    n = 14
    w = rng.uniform(1.0, 4.0, n)
    p = w + rng.uniform(0.0, 0.3, n)
    for j in range(n):
        model.add_var(f"b{j}", kind="binary")
    model.add_constraint({j: w[j] for j in range(n)}, "<=", 0.4 * w.sum())
    model.set_objective({j: p[j] for j in range(n)}, "max")
    loose = solve_milp(model, rel_gap=0.5, abs_gap=0.0)
    assert loose.status in ("optimal", "gap-limit")
    tight = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
    sign = 1.0
    assert sign * loose.bound >= sign * tight.objective - 1e-9
    assert sign * loose.objective <= sign * tight.objective + 1e-9
    if loose.status == "gap-limit":
        assert loose.gap <= 0.5 + 1e-12


def test_node_limit_reports_time_limit_status():
    model = random_milp(42, n_bin=10, n_cont=2, m=6)
    rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12, node_limit=1,
                     dive=False)
    assert rep.status == "time-limit"
    assert rep.nodes <= 1


def test_log_rows_and_bound_monotonicity(tmp_path):
    path = tmp_path / "solve.csv"
    model = random_milp(8, n_bin=8, n_cont=2, m=5)
    rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12, log_path=path)
    text = path.read_text().splitlines()
    assert text[0] == "node,bound,incumbent,gap,time"
    assert len(text) == len(rep.log) + 1
    sign = 1.0 if model.sense == "max" else -1.0
    bounds = []
    times = []
    for line in text[1:]:
        parts = line.split(",")
        assert len(parts) == 5
        if parts[1]:
            bounds.append(float(parts[1]))
        times.append(float(parts[4]))
    finite = [b for b in bounds if np.isfinite(b)]
    for a, b in zip(finite, finite[1:]):
        assert sign * b <= sign * a + 1e-7
    assert times == sorted(times)


def test_determinism():
    model = random_milp(17, n_bin=7, n_cont=3, m=5)
    r1 = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
    r2 = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
    assert r1.status == r2.status
    assert r1.nodes == r2.nodes
    if r1.objective is not None:
        assert r1.objective == r2.objective
        assert np.array_equal(r1.x, r2.x)


def box_objective(net, sense="max"):
    return LinearObjective(
        sense,
        np.zeros(net.spec.n_inputs),
        np.ones(net.spec.n_outputs),
    )


def test_sos2_fixed_input_matches_forward():
    net = make_net((2, 4, 2), seed=31)
    curve = adaptive_fit(20)
    rng = np.random.default_rng(0)
    for mode in (True, False):
        for trial in range(4):
            d = rng.uniform(-1.0, 1.0, 2)
            bounds = BoundsBox(d, d)
            model = encode_pwa_sos(net, curve, bounds, box_objective(net),
                                   sos2_native=mode)
            rep = solve_milp(model, rel_gap=1e-12, abs_gap=1e-12)
            assert rep.status in ("optimal", "gap-limit")
            ref_pwa = trace_pwa(net, curve, d).sum()
            ref_true = forward(net, d).sum()
            assert rep.objective == pytest.approx(ref_pwa, abs=1e-6)
            assert rep.objective == pytest.approx(ref_true, abs=5e-3)


def test_sos2_free_optimum_beats_grid():
    net = make_net((2, 5, 1), seed=8)
    curve = adaptive_fit(16)
    lo, hi = np.full(2, -1.5), np.full(2, 1.5)
    bounds = BoundsBox(lo, hi)
    model = encode_pwa_sos(net, curve, bounds, box_objective(net),
                           sos2_native=True)
    rep = solve_milp(model, rel_gap=1e-9, abs_gap=1e-9)
    assert rep.status in ("optimal", "gap-limit")
    xs = np.linspace(lo[0], hi[0], 161)
    grid_best = max(
        trace_pwa(net, curve, (a, b)).sum()
        for a in xs for b in xs
    )
    assert rep.objective >= grid_best - 1e-6
    d_star = rep.x[:2]
    assert rep.objective == pytest.approx(
        trace_pwa(net, curve, d_star).sum(), abs=1e-6
    )


def test_sos2_wide_box_closes_tight_gap():
    # ten neurons over a 3-d box: input bisection plus window/support
    # pruning must close a 1e-6 gap in a small tree
    net = make_net((3, 10, 1), seed=12)
    curve = adaptive_fit(15)
    lo, hi = np.full(3, -2.0), np.full(3, 2.0)
    model = encode_pwa_sos(net, curve, BoundsBox(lo, hi), box_objective(net),
                           sos2_native=True)
    rep = solve_milp(model, rel_gap=1e-6, abs_gap=1e-6, node_limit=4000)
    assert rep.status in ("optimal", "gap-limit")
    assert rep.nodes < 4000
    ws, bs = folded_layers(net)
    axes = np.linspace(-2.0, 2.0, 41)
    grid = np.stack(np.meshgrid(axes, axes, axes), axis=0).reshape(3, -1)
    vals = ws[1] @ eval_curve(curve, ws[0] @ grid + bs[0][:, None]) + bs[1][:, None]
    assert rep.objective >= vals.max() - 1e-6
    d_star = rep.x[:3]
    assert rep.objective == pytest.approx(
        trace_pwa(net, curve, d_star).sum(), abs=1e-6
    )
    assert rep.bound >= rep.objective - 1e-9


def test_warm_start_accepts_feasible_point():
    net = make_net((2, 4, 2), seed=31)
    curve = adaptive_fit(12)
    d0 = np.array([0.3, -0.4])
    fixed = encode_pwa_sos(net, curve, BoundsBox(d0, d0), box_objective(net),
                           sos2_native=True)
    seed_rep = solve_milp(fixed, rel_gap=1e-12, abs_gap=1e-12)
    assert seed_rep.x is not None
    box = BoundsBox(np.full(2, -1.0), np.full(2, 1.0))
    free = encode_pwa_sos(net, curve, box, box_objective(net),
                          sos2_native=True)
    cold = solve_milp(free, rel_gap=1e-9, abs_gap=1e-9)
    warm = solve_milp(free, rel_gap=1e-9, abs_gap=1e-9, warm_x=seed_rep.x)
    assert warm.objective == pytest.approx(cold.objective, abs=1e-7)
    assert warm.objective >= seed_rep.objective - 1e-9


def test_warm_start_rejects_bad_points():
    model = random_milp(4, n_bin=3, n_cont=2, m=3)
    n = len(model.variables)
    with pytest.raises(ValueError):
        solve_milp(model, warm_x=np.zeros(n + 1))
    with pytest.raises(ValueError):
        solve_milp(model, warm_x=np.full(n, 50.0))


def test_multistart_monotone_net_hits_corner():
    # tiny positive weights keep the net monotone increasing in every input
    widths = (3, 2, 1)
    weights = [np.full((2, 3), 0.05), np.full((1, 2), 0.8)]
    biases = [np.zeros(2), np.zeros(1)]
    net = Network(NetworkSpec(widths, "tanh"), weights, biases,
                  AffineScaler.identity(3), AffineScaler.identity(1))
    bounds = BoundsBox(np.zeros(3), np.full(3, 4.0))
    obj = LinearObjective("max", np.zeros(3), np.ones(1))
    d_star, v_star = multistart_local(net, None, obj, bounds, n_starts=8,
                                      seed=3)
    assert d_star == pytest.approx(np.full(3, 4.0), abs=1e-6)
    assert v_star == pytest.approx(float(forward(net, np.full(3, 4.0))[0]),
                                   abs=1e-9)


def test_multistart_finds_global_of_two_basin_profile():
    # u(d) = tanh(3d - 3.6) + 0.9 tanh(-3d - 3.6): local maxima at both ends
    # of the box, the right one is global
    weights = [np.array([[3.0], [-3.0]]), np.array([[1.0, 0.9]])]
    biases = [np.array([-3.6, -3.6]), np.zeros(1)]
    net = Network(NetworkSpec((1, 2, 1), "tanh"), weights, biases,
                  AffineScaler.identity(1), AffineScaler.identity(1))
    bounds = BoundsBox(np.array([-3.0]), np.array([3.0]))
    obj = LinearObjective("max", np.zeros(1), np.ones(1))
    d_star, v_star = multistart_local(net, None, obj, bounds, n_starts=16,
                                      seed=0)
    assert d_star[0] == pytest.approx(3.0, abs=1e-6)
    assert v_star == pytest.approx(float(forward(net, [3.0])[0]), abs=1e-9)
    # both end points really are ascent-stable: the interior is worse
    interior = forward(net, [0.0])[0]
    assert v_star > interior + 1.5


def test_multistart_stationarity():
    net = make_net((3, 6, 2), seed=12)
    bounds = BoundsBox(np.full(3, -2.0), np.full(3, 2.0))
    rng = np.random.default_rng(2)
    obj = LinearObjective("max", rng.normal(size=3), rng.normal(size=2))
    d_star, v_star = multistart_local(net, None, obj, bounds, n_starts=12,
                                      seed=1)
    g = obj.d_coeffs + input_jacobian(net, d_star).T @ obj.u_coeffs
    proj_step = np.clip(d_star + g, bounds.lower, bounds.upper) - d_star
    assert np.linalg.norm(proj_step) <= 1e-6
    direct = float(obj.d_coeffs @ d_star + obj.u_coeffs @ forward(net, d_star))
    assert v_star == pytest.approx(direct, abs=1e-9)


def test_multistart_state_space_objective_folds_through_basis():
    net = make_net((2, 5, 3), seed=44)
    rng = np.random.default_rng(7)
    q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    basis = PcaBasis(p=q.T, spectrum=np.array([3.0, 2.0, 1.0]), k=3,
                     energy=0.999, mean=rng.normal(size=6))
    c_state = rng.normal(size=6)
    obj_state = LinearObjective("max", np.zeros(2), c_state, 0.5)
    bounds = BoundsBox(np.full(2, -1.0), np.full(2, 1.0))
    d1, v1 = multistart_local(net, basis, obj_state, bounds, n_starts=10,
                              seed=5)
    manual = float(
        c_state @ (basis.p.T @ forward(net, d1) + basis.mean) + 0.5
    )
    assert v1 == pytest.approx(manual, abs=1e-9)
    folded = LinearObjective("max", np.zeros(2), basis.p @ c_state,
                             0.5 + float(c_state @ basis.mean))
    d2, v2 = multistart_local(net, None, folded, bounds, n_starts=10, seed=5)
    assert v2 == pytest.approx(v1, abs=1e-9)
    assert d2 == pytest.approx(d1, abs=1e-7)
