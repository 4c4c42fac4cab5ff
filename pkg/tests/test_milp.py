"""Tests for the MILP encoders.

No solver is involved here: exactness is checked by substituting the
network's own forward trace into every constraint row, which is stronger
than a solve (any violation shows up directly, not just at the optimum).
"""

import numpy as np
import pytest

from romopt.milp import (
    BoundsBox,
    LinearObjective,
    MilpModel,
    add_state_bounds,
    encode_pwa_sos,
    encode_relu_bigm,
    folded_layers,
    tighten_bigm,
)
from romopt.nnet import AffineScaler, Network, NetworkSpec, forward
from romopt.pca import PcaBasis
from romopt.pwa import adaptive_fit, eval_curve


def make_net(widths, activation, seed, scale=False):
    rng = np.random.default_rng(seed)
    weights = [
        rng.normal(scale=0.6, size=(widths[t + 1], widths[t]))
        for t in range(len(widths) - 1)
    ]
    biases = [rng.normal(scale=0.3, size=widths[t + 1]) for t in range(len(widths) - 1)]
    spec = NetworkSpec(tuple(widths), activation)
    if scale:
        in_s = AffineScaler(rng.uniform(0.5, 2.0, widths[0]), rng.normal(size=widths[0]))
        out_s = AffineScaler(
            rng.uniform(0.5, 2.0, widths[-1]), rng.normal(size=widths[-1])
        )
    else:
        in_s = AffineScaler.identity(widths[0])
        out_s = AffineScaler.identity(widths[-1])
    return Network(spec, weights, biases, in_s, out_s)


def trace_pwa(net, curve, d):
    """Forward pass with tanh replaced by the PWA curve, folded units.

    z and h come back flattened across hidden layers, matching the encoder's
    global neuron numbering.
    """
    ws, bs = folded_layers(net)
    x = np.asarray(d, dtype=float)
    zs, hs = [], []
    for t in range(len(ws) - 1):
        z = ws[t] @ x + bs[t]
        x = eval_curve(curve, z)
        zs.append(z)
        hs.append(x)
    return np.concatenate(zs), np.concatenate(hs), ws[-1] @ x + bs[-1]


def assign_pwa(model, net, curve, d):
    """Variable assignment describing the PWA forward trace at d."""
    z, h, u = trace_pwa(net, curve, d)
    vals = {}
    for i, v in enumerate(d):
        vals[f"d{i}"] = v
    for ell, v in enumerate(u):
        vals[f"u{ell}"] = v
    bp = curve.breakpoints
    for j in range(z.size):
        vals[f"z{j}"] = z[j]
        vals[f"h{j}"] = h[j]
        s = min(max(np.searchsorted(bp, z[j], side="right") - 1, 0), bp.size - 2)
        t = (z[j] - bp[s]) / (bp[s + 1] - bp[s])
        for i in range(bp.size):
            vals[f"l{j}_{i}"] = 0.0
        vals[f"l{j}_{s}"] = 1.0 - t
        vals[f"l{j}_{s + 1}"] = vals.get(f"l{j}_{s + 1}", 0.0) + t
        for i in range(bp.size - 1):
            vals[f"y{j}_{i}"] = 1.0 if i == s else 0.0
    return vals, u


def assign_relu(model, net, d):
    vals = {}
    for i, v in enumerate(d):
        vals[f"d{i}"] = v
    ws, bs = folded_layers(net)
    x = np.asarray(d, dtype=float)
    for t in range(len(ws) - 1):
        z = ws[t] @ x + bs[t]
        for j, zj in enumerate(z):
            vals[f"zp{t}_{j}"] = max(zj, 0.0)
            vals[f"zn{t}_{j}"] = max(-zj, 0.0)
            vals[f"bz{t}_{j}"] = 1.0 if zj < 0 else 0.0
        x = np.maximum(z, 0.0)
    u = ws[-1] @ x + bs[-1]
    for ell, v in enumerate(u):
        vals[f"u{ell}"] = v
    return vals, u


def max_violation(model, vals):
    x = np.array([vals[v.name] for v in model.variables])
    worst = 0.0
    for i, v in enumerate(model.variables):
        worst = max(worst, v.lb - x[i], x[i] - v.ub)
    for c in model.constraints:
        lhs = sum(coef * x[i] for i, coef in c.coeffs.items())
        if c.sense == "<=":
            worst = max(worst, lhs - c.rhs)
        elif c.sense == ">=":
            worst = max(worst, c.rhs - lhs)
        else:
            worst = max(worst, abs(lhs - c.rhs))
    return worst


def objective_value(model, vals):
    x = {i: vals[v.name] for i, v in enumerate(model.variables)}
    return sum(c * x[i] for i, c in model.objective.items()) + model.objective_const


def simple_objective(net, sense="max"):
    return LinearObjective(
        sense,
        np.zeros(net.spec.n_inputs),
        np.ones(net.spec.n_outputs),
    )


def test_model_validation():
    m = MilpModel()
    i = m.add_var("x", 0, 1)
    b = m.add_var("y", kind="binary")
    assert m.variables[b].lb == 0.0 and m.variables[b].ub == 1.0
    with pytest.raises(ValueError):
        m.add_var("z", 2.0, 1.0)
    with pytest.raises(ValueError):
        m.add_var("w", kind="integer")
    with pytest.raises(ValueError):
        m.add_constraint({i: 1.0}, "<", 0.0)
    with pytest.raises(ValueError):
        m.add_constraint({i: np.nan}, "<=", 0.0)
    with pytest.raises(ValueError):
        m.add_constraint({99: 1.0}, "<=", 0.0)
    with pytest.raises(ValueError):
        m.add_sos2([0, 57])
    with pytest.raises(ValueError):
        m.set_objective({i: 1.0}, sense="best")


def test_bounds_box_validation():
    with pytest.raises(ValueError):
        BoundsBox([0.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        BoundsBox([2.0], [1.0])
    box = BoundsBox([0.0, -1.0], [4.0, 1.0])
    assert box.n_dims == 2


def test_pwa_count_formulas_single_neuron():
    net = make_net([1, 1, 1], "tanh", seed=0)
    curve = adaptive_fit(1)  # N' = 2 segments, 3 breakpoints
    box = BoundsBox([-1.0], [1.0])
    model = encode_pwa_sos(net, curve, box, simple_objective(net))
    # 1 d + 1 u + 1 z + 1 h + 3 lambda + 2 binaries
    assert model.n_vars == 9
    assert model.n_binary == 2
    # pre + lsum + zint + hint + 3 adjacency + ysum + 1 output row
    assert len(model.constraints) == 9
    assert model.sos2_groups == []


def test_pwa_count_formulas_benchmark_size():
    net = make_net([3, 30, 12], "tanh", seed=1)
    curve = adaptive_fit(15)  # N' = 30
    box = BoundsBox(np.zeros(3), np.full(3, 0.2))
    model = encode_pwa_sos(net, curve, box, simple_objective(net))
    n, npts, k = 30, 31, 12
    assert model.n_binary == 900
    assert model.n_vars == 3 + k + n * (2 + npts + npts - 1)
    assert len(model.constraints) == n * (4 + npts + 1) + k


def test_pwa_sos2_native_mode():
    net = make_net([2, 4, 1], "tanh", seed=2)
    curve = adaptive_fit(4)
    box = BoundsBox([-0.5, -0.5], [0.5, 0.5])
    model = encode_pwa_sos(net, curve, box, simple_objective(net), sos2_native=True)
    assert model.n_binary == 0
    assert len(model.sos2_groups) == 4
    assert len(model.constraints) == 4 * 4 + 1
    for g in model.sos2_groups:
        assert len(g) == curve.breakpoints.size


def test_pwa_substitution_exactness():
    net = make_net([3, 8, 2], "tanh", seed=3, scale=True)
    curve = adaptive_fit(12)
    box = BoundsBox(np.full(3, -0.8), np.full(3, 0.8))
    model = encode_pwa_sos(net, curve, box, simple_objective(net))
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = rng.uniform(-0.8, 0.8, 3)
        vals, u = assign_pwa(model, net, curve, d)
        assert max_violation(model, vals) <= 1e-9
        assert objective_value(model, vals) == pytest.approx(u.sum(), abs=1e-9)


def test_pwa_matches_true_forward_closely():
    # the PWA trace approximates the true tanh forward pass
    net = make_net([2, 6, 1], "tanh", seed=4, scale=True)
    curve = adaptive_fit(60)
    box = BoundsBox([-1.0, -1.0], [1.0, 1.0])
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        d = rng.uniform(-1, 1, 2)
        _, _, u = trace_pwa(net, curve, d)
        worst = max(worst, abs(u[0] - forward(net, d)[0]))
    assert worst < 2e-3


def test_pwa_range_check_failure_names_neuron():
    net = make_net([1, 2, 1], "tanh", seed=5)
    net.weights[0][1, 0] = 50.0  # force a wide pre-activation on neuron 1
    curve = adaptive_fit(4)
    box = BoundsBox([-1.0], [1.0])
    with pytest.raises(ValueError, match="neuron 1"):
        encode_pwa_sos(net, curve, box, simple_objective(net))


def test_pwa_rejects_relu_net():
    relu = make_net([2, 4, 1], "relu", seed=6)
    curve = adaptive_fit(4)
    box = BoundsBox([-1, -1], [1, 1])
    with pytest.raises(ValueError):
        encode_pwa_sos(relu, curve, box, simple_objective(relu))


def test_pwa_deep_chain_exactness():
    # two hidden layers: layer 1 pre rows consume layer 0 interpolants
    net = make_net([2, 4, 3, 1], "tanh", seed=6, scale=True)
    curve = adaptive_fit(40)
    box = BoundsBox([-1, -1], [1, 1])
    model = encode_pwa_sos(net, curve, box, simple_objective(net))
    n_pts = curve.breakpoints.size
    assert model.n_vars == 2 + 1 + 7 * (2 + n_pts + n_pts - 1)
    assert model.n_binary == 7 * (n_pts - 1)
    rng = np.random.default_rng(17)
    for _ in range(30):
        d = rng.uniform(-1, 1, 2)
        vals, u = assign_pwa(model, net, curve, d)
        assert max_violation(model, vals) <= 1e-9
        assert objective_value(model, vals) == pytest.approx(u.sum(), abs=1e-9)


def test_relu_single_neuron_identity():
    # z = d with valid M: the feasible set forces z' = max(0, d)
    spec = NetworkSpec((1, 1, 1), "relu")
    net = Network(
        spec,
        [np.array([[1.0]]), np.array([[1.0]])],
        [np.zeros(1), np.zeros(1)],
        AffineScaler.identity(1),
        AffineScaler.identity(1),
    )
    box = BoundsBox([-1.0], [1.0])
    ms = tighten_bigm(net, box)
    assert ms[0][0] == pytest.approx(1.0)
    model = encode_relu_bigm(net, box, simple_objective(net))
    for d in (-1.0, -0.3, 0.0, 0.7, 1.0):
        vals, u = assign_relu(model, net, [d])
        assert max_violation(model, vals) <= 1e-12
        assert u[0] == pytest.approx(max(d, 0.0))


def test_relu_count_formulas():
    net = make_net([3, 40, 40, 12], "relu", seed=8)
    box = BoundsBox(np.zeros(3), np.full(3, 0.1))
    model = encode_relu_bigm(net, box, simple_objective(net))
    total = 80
    assert model.n_vars == 3 + 12 + 3 * total
    assert model.n_binary == total
    assert len(model.constraints) == 3 * total + 12


def test_relu_substitution_exactness():
    net = make_net([3, 40, 40, 2], "relu", seed=9, scale=True)
    box = BoundsBox(np.full(3, -1.0), np.full(3, 1.0))
    model = encode_relu_bigm(net, box, simple_objective(net))
    rng = np.random.default_rng(13)
    for _ in range(100):
        d = rng.uniform(-1, 1, 3)
        vals, u = assign_relu(model, net, d)
        assert max_violation(model, vals) <= 1e-9
        assert np.max(np.abs(u - forward(net, d))) <= 1e-9
        assert objective_value(model, vals) == pytest.approx(u.sum(), abs=1e-9)


def test_relu_constant_m_mode():
    net = make_net([2, 5, 1], "relu", seed=10)
    box = BoundsBox([-1, -1], [1, 1])
    model = encode_relu_bigm(net, box, simple_objective(net), m_mode="constant")
    on_rows = [c for c in model.constraints if c.name.startswith("on")]
    assert len(on_rows) == 5
    for c in on_rows:
        assert c.rhs == 10000.0
    with pytest.raises(ValueError):
        encode_relu_bigm(net, box, simple_objective(net), m_mode="loose")


def test_relu_rejects_tanh_net():
    net = make_net([2, 4, 1], "tanh", seed=11)
    box = BoundsBox([-1, -1], [1, 1])
    with pytest.raises(ValueError):
        encode_relu_bigm(net, box, simple_objective(net))


def test_tighten_bigm_zero_weights():
    spec = NetworkSpec((1, 2, 1), "relu")
    net = Network(
        spec,
        [np.zeros((2, 1)), np.zeros((1, 2))],
        [np.array([0.7, -2.5]), np.zeros(1)],
        AffineScaler.identity(1),
        AffineScaler.identity(1),
    )
    ms = tighten_bigm(net, BoundsBox([-1.0], [1.0]))
    assert np.allclose(ms[0], [0.7, 2.5])


def test_tighten_bigm_sampling_oracle():
    # 1e5 sampled pre-activations over the box never exceed the M values
    net = make_net([3, 10, 10, 1], "relu", seed=12, scale=True)
    box = BoundsBox(np.full(3, -2.0), np.full(3, 2.0))
    ms = tighten_bigm(net, box)
    ws, bs = folded_layers(net)
    rng = np.random.default_rng(21)
    x = rng.uniform(-2.0, 2.0, size=(100000, 3)).T
    for t in range(2):
        z = ws[t] @ x + bs[t][:, None]
        assert np.all(np.abs(z) <= ms[t][:, None] + 1e-12)
        x = np.maximum(z, 0.0)


def test_tighten_bigm_below_default():
    net = make_net([3, 40, 40, 12], "relu", seed=14)
    box = BoundsBox(np.zeros(3), np.full(3, 4.0))
    for m in tighten_bigm(net, box):
        assert np.all(m <= 10000.0)


def test_state_bounds_rows():
    rng = np.random.default_rng(15)
    q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    basis = PcaBasis(p=q.T, spectrum=np.array([2.0, 1.0]), k=2, energy=1.0)
    net = make_net([2, 3, 2], "tanh", seed=16)
    model = encode_pwa_sos(
        net, adaptive_fit(3), BoundsBox([-1, -1], [1, 1]), simple_objective(net)
    )
    before = len(model.constraints)
    add_state_bounds(model, basis, -1.0, 1.0, rows=[])
    assert len(model.constraints) == before

    add_state_bounds(model, basis, -np.inf, np.inf, rows=[0, 5])
    assert len(model.constraints) == before  # non-finite sides skipped

    add_state_bounds(model, basis, 0.0, 2.0, rows=[1, 4])
    assert len(model.constraints) == before + 4
    row = model.constraints[-1]
    u_idx = model.groups["u"]
    assert set(row.coeffs) <= set(u_idx)

    with pytest.raises(ValueError):
        add_state_bounds(model, basis, 0.0, 1.0, rows=[6])


def test_state_bounds_respect_centering():
    p = np.eye(2)
    mean = np.array([10.0, -5.0])
    basis = PcaBasis(p=p, spectrum=np.array([1.0, 1.0]), k=2, energy=1.0, mean=mean)
    net = make_net([2, 3, 2], "tanh", seed=17)
    model = encode_pwa_sos(
        net, adaptive_fit(3), BoundsBox([-1, -1], [1, 1]), simple_objective(net)
    )
    add_state_bounds(model, basis, np.array([9.0, -7.0]), np.array([12.0, -4.0]))
    lbs = [c for c in model.constraints if c.name == "slb0"]
    assert lbs[0].rhs == pytest.approx(-1.0)  # 9 - 10


def test_objective_assembly():
    net = make_net([2, 3, 2], "tanh", seed=18)
    obj = LinearObjective("max", np.array([0.5, 0.0]), np.array([0.0, 2.0]), const=1.5)
    model = encode_pwa_sos(net, adaptive_fit(3), BoundsBox([-1, -1], [1, 1]), obj)
    d_idx, u_idx = model.groups["d"], model.groups["u"]
    assert model.sense == "max"
    assert model.objective[d_idx[0]] == 0.5
    assert model.objective[u_idx[1]] == 2.0
    assert d_idx[1] not in model.objective
    assert model.objective_const == 1.5
    with pytest.raises(ValueError):
        encode_pwa_sos(
            net,
            adaptive_fit(3),
            BoundsBox([-1, -1], [1, 1]),
            LinearObjective("max", np.zeros(3), np.zeros(2)),
        )
