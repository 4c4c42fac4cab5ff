"""Feed-forward networks (tanh or ReLU hidden layers, linear output) with
Levenberg-Marquardt training, early stopping, and width growth.

Data matrices are column-major over samples: inputs N_d x N, targets k x N.
Networks carry min-max scalers fitted on the training split; forward() maps
physical inputs to physical outputs, and reported MSEs are in physical units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def stable_tanh(z: np.ndarray) -> np.ndarray:
    """tanh via its exponential form, sign-split so the exponent never
    overflows: tanh(z) = sign(z) * (1 - 2 / (exp(2|z|) + 1))."""
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    with np.errstate(over="ignore"):
        mag = 1.0 - 2.0 / (np.exp(2.0 * az) + 1.0)
    return np.sign(z) * mag


def _tanh_deriv(z: np.ndarray) -> np.ndarray:
    t = stable_tanh(z)
    return 1.0 - t * t


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _relu_deriv(z: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(float)


_ACTIVATIONS = {
    "tanh": (stable_tanh, _tanh_deriv),
    "relu": (relu, _relu_deriv),
}


class TrainingFailure(RuntimeError):
    """grow_to_tolerance exhausted max_width; carries the best TrainReport."""

    def __init__(self, message, best_report):
        super().__init__(message)
        self.best_report = best_report


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: layer widths input..output, hidden activation name."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    scale_inputs: bool = True
    scale_outputs: bool = True

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("need input, >=1 hidden, and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.widths[1:-1]

    def with_hidden_width(self, width: int) -> "NetworkSpec":
        if len(self.hidden_widths) != 1:
            raise ValueError("width growth applies to single-hidden-layer specs")
        return NetworkSpec(
            (self.widths[0], width, self.widths[-1]),
            self.activation,
            self.scale_inputs,
            self.scale_outputs,
        )


@dataclass(frozen=True)
class AffineScaler:
    """Elementwise map x -> a*x + c with exact inverse."""

    a: np.ndarray
    c: np.ndarray

    def scale(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.a * x + self.c
        return self.a[:, None] * x + self.c[:, None]

    def descale(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return (x - self.c) / self.a
        return (x - self.c[:, None]) / self.a[:, None]

    @staticmethod
    def identity(n: int) -> "AffineScaler":
        return AffineScaler(np.ones(n), np.zeros(n))

    @staticmethod
    def fit_minmax(data: np.ndarray) -> "AffineScaler":
        """Per-row map of [min, max] onto [-1, 1]; constant rows shift only."""
        data = np.atleast_2d(np.asarray(data, dtype=float))
        lo = data.min(axis=1)
        hi = data.max(axis=1)
        span = hi - lo
        a = np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 1.0)
        c = np.where(span > 0, -(hi + lo) / np.where(span > 0, span, 1.0), -lo)
        return AffineScaler(a, c)


@dataclass
class Network:
    """Weights, biases, and fitted scalers for one feed-forward net."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_scaler: AffineScaler
    out_scaler: AffineScaler

    def __post_init__(self):
        widths = self.spec.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        for t, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[t + 1], widths[t]) or b.shape != (widths[t + 1],):
                raise ValueError(f"layer {t} shapes {w.shape}/{b.shape} break the chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {t} has non-finite parameters")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def _forward_scaled(net: Network, x: np.ndarray):
    """Hidden-layer pass in scaled space; returns (pre-activations, activations, y)."""
    act, _ = _ACTIVATIONS[net.spec.activation]
    zs, acts = [], [x]
    a = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = w @ a + b[:, None]
        a = act(z)
        zs.append(z)
        acts.append(a)
    y = net.weights[-1] @ a + net.biases[-1][:, None]
    return zs, acts, y


def forward(net: Network, d: np.ndarray) -> np.ndarray:
    """Physical inputs to physical outputs; accepts a vector or a matrix."""
    d = np.asarray(d, dtype=float)
    vec = d.ndim == 1
    x = d[:, None] if vec else d
    if x.shape[0] != net.spec.n_inputs:
        raise ValueError(f"input has {x.shape[0]} rows, spec wants {net.spec.n_inputs}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    _, _, y = _forward_scaled(net, net.in_scaler.scale(x))
    out = net.out_scaler.descale(y)
    return out[:, 0] if vec else out


def input_jacobian(net: Network, d: np.ndarray) -> np.ndarray:
    """Analytic d(output)/d(input) at one physical input vector: k x N_d."""
    d = np.asarray(d, dtype=float).ravel()
    x = net.in_scaler.scale(d)[:, None]
    _, deriv = _ACTIVATIONS[net.spec.activation]
    zs, _, _ = _forward_scaled(net, x)
    jac = net.weights[-1].copy()
    for w, z in zip(net.weights[-2::-1], zs[::-1]):
        jac = (jac * deriv(z)[:, 0][None, :]) @ w
    # chain through the affine scalers
    jac = jac * net.in_scaler.a[None, :]
    jac = jac / net.out_scaler.a[:, None]
    return jac


def mse(net: Network, d: np.ndarray, u: np.ndarray) -> float:
    """Mean squared prediction error over all outputs, computed on the
    scaled (normalized) targets, mirroring toolbox-style training where the
    tolerance refers to outputs mapped into [-1, 1]. With output scaling
    disabled this is the physical-units MSE."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    _, _, y = _forward_scaled(net, net.in_scaler.scale(d))
    return float(np.mean((y - net.out_scaler.scale(u)) ** 2))


@dataclass
class TrainReport:
    train_mse: float
    val_mse: float
    test_mse: float
    iterations: int
    stop_reason: str  # tolerance | early-stop | max-iter

    def __post_init__(self):
        if min(self.train_mse, self.val_mse, self.test_mse) < 0:
            raise ValueError("MSEs must be nonnegative")

    def meets(self, tol: float) -> bool:
        return max(self.train_mse, self.val_mse, self.test_mse) <= tol


def _split_indices(n: int, ratios, rng):
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    perm = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def _init_params(spec: NetworkSpec, rng):
    weights, biases = [], []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(rng.uniform(-1.0, 1.0, size=(n_out, n_in)) * np.sqrt(3.0 / n_in))
        biases.append(rng.uniform(-0.5, 0.5, size=n_out))
    return weights, biases


def _pack(weights, biases):
    return np.concatenate([a.ravel() for pair in zip(weights, biases) for a in pair])


def _unpack(theta, spec: NetworkSpec):
    weights, biases = [], []
    pos = 0
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(theta[pos : pos + n_out * n_in].reshape(n_out, n_in))
        pos += n_out * n_in
        biases.append(theta[pos : pos + n_out])
        pos += n_out
    return weights, biases


def _residual_jacobian(net: Network, x: np.ndarray, u_scaled: np.ndarray):
    """Scaled-space residuals and their Jacobian w.r.t. all parameters.

    Residual order: sample-major, outputs within a sample. Parameter order
    matches _pack: layer by layer, weights row-major then biases.
    """
    _, deriv = _ACTIVATIONS[net.spec.activation]
    zs, acts, y = _forward_scaled(net, x)
    n = x.shape[1]
    k = net.spec.n_outputs
    res = (y - u_scaled).T.ravel()

    # sens[t]: d(scaled outputs)/d(z_t), shape (k, n_t, N)
    n_hidden = len(net.weights) - 1
    sens = [None] * n_hidden
    if n_hidden:
        sens[-1] = net.weights[-1][:, :, None] * deriv(zs[-1])[None, :, :]
        for t in range(n_hidden - 2, -1, -1):
            back = np.einsum("kjn,ji->kin", sens[t + 1], net.weights[t + 1])
            sens[t] = back * deriv(zs[t])[None, :, :]

    blocks = []
    for t in range(n_hidden):
        jw = np.einsum("kpn,qn->nkpq", sens[t], acts[t]).reshape(n * k, -1)
        jb = np.transpose(sens[t], (2, 0, 1)).reshape(n * k, -1)
        blocks.extend([jw, jb])
    # output layer: d y_l / d Wo[p, q] = (l == p) * a_last[q]
    a_last = acts[-1]
    n_out_prev = a_last.shape[0]
    eye = np.eye(k)
    jw_out = np.einsum("kp,qn->nkpq", eye, a_last).reshape(n * k, k * n_out_prev)
    jb_out = np.tile(eye, (n, 1))
    blocks.extend([jw_out, jb_out])
    return res, np.hstack(blocks)


def train_lm(
    data,
    spec: NetworkSpec,
    split=(0.7, 0.15, 0.15),
    mse_tol: float = 1e-4,
    max_iter: int = 1000,
    seed: int = 0,
    patience: int = 6,
    lm_lambda0: float = 1e-3,
):
    """Levenberg-Marquardt training with early stopping.

    Returns (Network, TrainReport); never raises on non-convergence, the
    report's stop_reason says what ended the run. Success means every split
    MSE is at or below mse_tol.
    """
    d_all, u_all = (np.atleast_2d(np.asarray(m, dtype=float)) for m in data)
    if d_all.shape[1] != u_all.shape[1]:
        raise ValueError("input and target sample counts differ")
    n = d_all.shape[1]
    if n < 10:
        raise ValueError("need at least 10 samples")
    if d_all.shape[0] != spec.n_inputs or u_all.shape[0] != spec.n_outputs:
        raise ValueError("data dimensions do not match the network spec")
    rng = np.random.default_rng(seed)
    idx_train, idx_val, idx_test = _split_indices(n, split, rng)

    in_scaler = (
        AffineScaler.fit_minmax(d_all[:, idx_train])
        if spec.scale_inputs
        else AffineScaler.identity(spec.n_inputs)
    )
    out_scaler = (
        AffineScaler.fit_minmax(u_all[:, idx_train])
        if spec.scale_outputs
        else AffineScaler.identity(spec.n_outputs)
    )
    weights, biases = _init_params(spec, rng)
    net = Network(spec, weights, biases, in_scaler, out_scaler)

    x_train = in_scaler.scale(d_all[:, idx_train])
    u_train_scaled = out_scaler.scale(u_all[:, idx_train])
    splits = {
        "train": (d_all[:, idx_train], u_all[:, idx_train]),
        "val": (d_all[:, idx_val], u_all[:, idx_val]),
        "test": (d_all[:, idx_test], u_all[:, idx_test]),
    }

    lam = lm_lambda0
    theta = _pack(net.weights, net.biases)
    res, jac = _residual_jacobian(net, x_train, u_train_scaled)
    sse = float(res @ res)
    best_val = np.inf
    best_theta = theta.copy()
    stall = 0
    stop_reason = "max-iter"
    iters = 0
    for iters in range(1, max_iter + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ res
        accepted = False
        for _ in range(25):
            try:
                step = np.linalg.solve(jtj + lam * np.eye(jtj.shape[0]), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            theta_new = theta + step
            w_new, b_new = _unpack(theta_new, spec)
            net_try = Network(spec, w_new, b_new, in_scaler, out_scaler)
            res_new, jac_new = _residual_jacobian(net_try, x_train, u_train_scaled)
            sse_new = float(res_new @ res_new)
            if np.isfinite(sse_new) and sse_new < sse:
                theta, res, jac, sse = theta_new, res_new, jac_new, sse_new
                net = net_try
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            stop_reason = "max-iter"
            break

        val_mse = mse(net, *splits["val"])
        if val_mse < best_val - 1e-15:
            best_val = val_mse
            best_theta = theta.copy()
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                stop_reason = "early-stop"
                break
        if all(mse(net, *splits[s]) <= mse_tol for s in ("train", "val", "test")):
            best_theta = theta.copy()
            stop_reason = "tolerance"
            break

    w_fin, b_fin = _unpack(best_theta, spec)
    net = Network(spec, w_fin, b_fin, in_scaler, out_scaler)
    report = TrainReport(
        train_mse=mse(net, *splits["train"]),
        val_mse=mse(net, *splits["val"]),
        test_mse=mse(net, *splits["test"]),
        iterations=iters,
        stop_reason=stop_reason,
    )
    return net, report


def train_best_of(data, spec, restarts, seed=0, **kwargs):
    """Best network over seeded restarts, ranked by worst split MSE."""
    best = None
    for r in range(restarts):
        net, report = train_lm(data, spec, seed=seed + r, **kwargs)
        score = max(report.train_mse, report.val_mse, report.test_mse)
        if best is None or score < best[0]:
            best = (score, net, report)
        if "mse_tol" in kwargs and report.meets(kwargs["mse_tol"]):
            break
    return best[1], best[2]


def grow_to_tolerance(
    data,
    base_spec: NetworkSpec,
    mse_tol: float = 1e-4,
    max_width: int = 40,
    restarts: int = 5,
    width_step: int = 5,
    seed: int = 0,
    **kwargs,
):
    """Increase the hidden width until some restart meets mse_tol on all
    three splits; raises TrainingFailure (with the best report seen) if
    max_width is reached without success."""
    if max_width < base_spec.hidden_widths[0]:
        raise ValueError("max_width below the base width")
    best = None
    width = base_spec.hidden_widths[0]
    while width <= max_width:
        spec = base_spec.with_hidden_width(width)
        for r in range(restarts):
            net, report = train_lm(
                data, spec, mse_tol=mse_tol, seed=seed + 1000 * width + r, **kwargs
            )
            score = max(report.train_mse, report.val_mse, report.test_mse)
            if best is None or score < best[0]:
                best = (score, net, report)
            if report.meets(mse_tol):
                log.info("width %d restart %d met tol %g", width, r, mse_tol)
                return net, report
        width += width_step
    raise TrainingFailure(
        f"no width <= {max_width} reached MSE {mse_tol:g} on all splits", best[2]
    )


def save_network(net: Network, path) -> None:
    """Self-describing text persistence at full precision."""
    lines = [
        "# romopt network",
        f"activation {net.spec.activation}",
        "widths " + " ".join(str(w) for w in net.spec.widths),
        f"scale_inputs {int(net.spec.scale_inputs)}",
        f"scale_outputs {int(net.spec.scale_outputs)}",
        "in_scaler_a " + " ".join(repr(float(v)) for v in net.in_scaler.a),
        "in_scaler_c " + " ".join(repr(float(v)) for v in net.in_scaler.c),
        "out_scaler_a " + " ".join(repr(float(v)) for v in net.out_scaler.a),
        "out_scaler_c " + " ".join(repr(float(v)) for v in net.out_scaler.c),
    ]
    for t, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{t} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"b{t} {b.size}")
        lines.append(" ".join(repr(float(v)) for v in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path) -> Network:
    """Inverse of save_network."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "# romopt network":
        raise ValueError(f"{path}: not a network file")
    fields = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("W"):
        key, _, rest = lines[i].partition(" ")
        fields[key] = rest
        i += 1
    spec = NetworkSpec(
        widths=tuple(int(v) for v in fields["widths"].split()),
        activation=fields["activation"],
        scale_inputs=bool(int(fields["scale_inputs"])),
        scale_outputs=bool(int(fields["scale_outputs"])),
    )
    weights, biases = [], []
    while i < len(lines):
        tag, *dims = lines[i].split()
        i += 1
        if tag.startswith("W"):
            rows, cols = int(dims[0]), int(dims[1])
            w = np.array(
                [[float(v) for v in lines[i + r].split()] for r in range(rows)]
            )
            if w.shape != (rows, cols):
                raise ValueError(f"{path}: ragged weight block {tag}")
            weights.append(w)
            i += rows
        elif tag.startswith("b"):
            biases.append(np.array([float(v) for v in lines[i].split()]))
            i += 1
        elif tag:
            raise ValueError(f"{path}: unexpected line {tag!r}")
    def scaler(prefix):
        return AffineScaler(
            np.array([float(v) for v in fields[f"{prefix}_a"].split()]),
            np.array([float(v) for v in fields[f"{prefix}_c"].split()]),
        )

    return Network(spec, weights, biases, scaler("in_scaler"), scaler("out_scaler"))
