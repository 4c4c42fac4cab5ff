"""End-to-end driver: sample the full model, reduce, train, encode, solve,
validate. Every stage reads its inputs from the run directory and persists
its outputs there, so stages can be run one at a time or chained by
run_pipeline. Plain-text INI config; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .branch_bound import multistart_local, solve_milp
from .lpfiles import write_lp, write_mps
from .milp import (
    BoundsBox,
    LinearObjective,
    encode_pwa_sos,
    encode_relu_bigm,
    folded_layers,
)
from .nnet import NetworkSpec, forward, load_network, save_network, train_best_of
from .pca import PcaBasis, fit as pca_fit, load_basis, project, reconstruct, save_basis
from .pwa import (
    adaptive_fit,
    eval_curve,
    load_curve_csv,
    plot_curve_svg,
    save_curve_csv,
    total_error,
    uniform_fit,
)
from .reactor import ReactorParams, SolveFailure, c_exit, solve_steady
from .sampling import (
    DesignSpace,
    collect_snapshots,
    lhc_sample,
    load_snapshots_csv,
    save_snapshots_csv,
)

log = logging.getLogger(__name__)

CASES = ("reactor", "csv-dataset")
PATHS = ("tanh-pwa", "relu-bigm", "tanh-multistart")
PWA_MODES = ("adaptive", "uniform")
SOS2_MODES = ("native", "binary")

ARTIFACTS = {
    "designs": "designs.csv",
    "snapshots": "snapshots.csv",
    "pca_summary": "pca.csv",
    "network": "network.txt",
    "train_report": "train_report.csv",
    "curve": "curve.csv",
    "curve_plot": "curve.svg",
    "model_lp": "model.lp",
    "model_mps": "model.mps",
    "solver_log": "solver_log.csv",
    "solve": "solve.csv",
    "reference": "reference.csv",
    "validate": "validate.csv",
    "profile": "profile.csv",
    "profiles_plot": "profiles.svg",
    "deviations": "deviations.csv",
    "table2": "table2.csv",
    "run_report": "run_report.csv",
    "study": "study.csv",
}


class StageFailure(RuntimeError):
    """A pipeline stage could not complete.

    Carries the stage name and the artifact paths written so far, so a
    failed run can be inspected where it stopped.
    """

    def __init__(self, stage, message, artifacts=None):
        self.stage = stage
        self.message = message
        self.artifacts = dict(artifacts or {})
        lines = [f"stage {stage!r} failed: {message}"]
        for name, path in sorted(self.artifacts.items()):
            lines.append(f"  {name}: {path}")
        super().__init__("\n".join(lines))


@dataclass
class PipelineConfig:
    """Everything a run needs, with desk-scale reactor defaults."""

    case: str = "reactor"
    dataset_path: str | None = None
    objective_row: int | None = None
    n_samples: int = 256
    seed: int = 0
    energy: float = 0.998
    centering: bool = True
    per_variable: bool = False
    k: int | None = None
    hidden: tuple[int, ...] = (30,)
    activation: str = "tanh"
    train_tol: float = 1e-4
    restarts: int = 20
    path: str = "tanh-pwa"
    force_deep_pwa: bool = False
    half_segments: int = 15
    z_max: float = 8.0
    pwa_mode: str = "adaptive"
    rel_gap: float = 2e-4
    abs_gap: float = 2e-4
    time_limit: float | None = None
    sos2: str = "native"
    n_starts: int = 64
    out_dir: str = "runs/reactor"
    skip_failures: bool = False
    da: float = 0.1
    gamma: float = 20.0
    b_rise: float = 12.0
    beta: float = 1.5
    pe1: float = 5.0
    pe2: float = 5.0
    le: float = 1.0
    m_nodes: int = 250
    wall_low: float = 0.0
    wall_high: float = 4.0

    def reactor_params(self, wall=0.0) -> ReactorParams:
        return ReactorParams(
            pe1=self.pe1,
            pe2=self.pe2,
            le=self.le,
            beta=self.beta,
            gamma=self.gamma,
            b_rise=self.b_rise,
            da=self.da,
            wall=wall,
            m_nodes=self.m_nodes,
        )

    def design_space(self) -> DesignSpace:
        if self.case != "reactor":
            raise ValueError("design_space is defined by the reactor case only")
        return DesignSpace.box(
            ("tw1", "tw2", "tw3"), [self.wall_low] * 3, [self.wall_high] * 3
        )


def _as_str(s):
    return s.strip()


def _as_int(s):
    return int(s)


def _as_float(s):
    return float(s)


def _as_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _as_opt_int(s):
    return None if not s.strip() else int(s)


def _as_opt_float(s):
    return None if not s.strip() else float(s)


def _as_opt_str(s):
    return None if not s.strip() else s.strip()


def _as_int_tuple(s):
    parts = [p for p in s.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty width list")
    return tuple(int(p) for p in parts)


_SCHEMA = {
    ("case", "kind"): ("case", _as_str),
    ("case", "dataset"): ("dataset_path", _as_opt_str),
    ("case", "objective_row"): ("objective_row", _as_opt_int),
    ("sampling", "n"): ("n_samples", _as_int),
    ("sampling", "seed"): ("seed", _as_int),
    ("pca", "energy"): ("energy", _as_float),
    ("pca", "centering"): ("centering", _as_bool),
    ("pca", "per_variable"): ("per_variable", _as_bool),
    ("pca", "k"): ("k", _as_opt_int),
    ("network", "hidden"): ("hidden", _as_int_tuple),
    ("network", "activation"): ("activation", _as_str),
    ("network", "tol"): ("train_tol", _as_float),
    ("network", "restarts"): ("restarts", _as_int),
    ("surrogate", "path"): ("path", _as_str),
    ("surrogate", "force_deep_pwa"): ("force_deep_pwa", _as_bool),
    ("pwa", "half_segments"): ("half_segments", _as_int),
    ("pwa", "z_max"): ("z_max", _as_float),
    ("pwa", "mode"): ("pwa_mode", _as_str),
    ("solver", "rel_gap"): ("rel_gap", _as_float),
    ("solver", "abs_gap"): ("abs_gap", _as_float),
    ("solver", "time_limit"): ("time_limit", _as_opt_float),
    ("solver", "sos2"): ("sos2", _as_str),
    ("solver", "multistart"): ("n_starts", _as_int),
    ("output", "dir"): ("out_dir", _as_str),
    ("reactor", "da"): ("da", _as_float),
    ("reactor", "gamma"): ("gamma", _as_float),
    ("reactor", "b"): ("b_rise", _as_float),
    ("reactor", "beta"): ("beta", _as_float),
    ("reactor", "pe1"): ("pe1", _as_float),
    ("reactor", "pe2"): ("pe2", _as_float),
    ("reactor", "le"): ("le", _as_float),
    ("reactor", "nodes"): ("m_nodes", _as_int),
    ("reactor", "wall_low"): ("wall_low", _as_float),
    ("reactor", "wall_high"): ("wall_high", _as_float),
}


def parse_config(path, seed=None, out_dir=None, skip_failures=None) -> PipelineConfig:
    """Read an INI config; unknown sections or keys raise. The keyword
    arguments override the file (command-line flags win)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    read = cp.read(path)
    if not read:
        raise ValueError(f"config file {path!r} not found or unreadable")
    cfg = PipelineConfig()
    for section in cp.sections():
        for key, raw in cp.items(section):
            try:
                field_name, conv = _SCHEMA[(section, key)]
            except KeyError:
                known = sorted(k for s, k in _SCHEMA if s == section)
                if not known:
                    raise ValueError(
                        f"{path}: unknown section [{section}]"
                    ) from None
                raise ValueError(
                    f"{path}: unknown key {key!r} in [{section}] "
                    f"(known: {', '.join(known)})"
                ) from None
            try:
                setattr(cfg, field_name, conv(raw))
            except ValueError as exc:
                raise ValueError(
                    f"{path}: bad value for [{section}] {key}: {exc}"
                ) from None
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    if skip_failures is not None:
        cfg.skip_failures = skip_failures
    validate_config(cfg)
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.case not in CASES:
        raise ValueError(f"case must be one of {CASES}, got {cfg.case!r}")
    if cfg.path not in PATHS:
        raise ValueError(f"surrogate path must be one of {PATHS}, got {cfg.path!r}")
    if cfg.pwa_mode not in PWA_MODES:
        raise ValueError(f"pwa mode must be one of {PWA_MODES}, got {cfg.pwa_mode!r}")
    if cfg.sos2 not in SOS2_MODES:
        raise ValueError(f"sos2 must be one of {SOS2_MODES}, got {cfg.sos2!r}")
    if cfg.case == "csv-dataset":
        if cfg.dataset_path is None:
            raise ValueError("csv-dataset case needs [case] dataset = <path>")
        if not os.path.exists(cfg.dataset_path):
            raise ValueError(f"dataset file {cfg.dataset_path!r} does not exist")
    if cfg.n_samples < 2:
        raise ValueError("sample count must be >= 2")
    if not 0.0 < cfg.energy <= 1.0:
        raise ValueError("pca energy must be in (0, 1]")
    if cfg.train_tol <= 0 or cfg.rel_gap <= 0 or cfg.abs_gap <= 0:
        raise ValueError("tolerances must be positive")
    if cfg.time_limit is not None and cfg.time_limit <= 0:
        raise ValueError("time limit must be positive")
    if cfg.restarts < 1 or cfg.n_starts < 1:
        raise ValueError("restart counts must be >= 1")
    if not cfg.hidden or any(w < 1 for w in cfg.hidden):
        raise ValueError("hidden widths must be positive")
    if cfg.half_segments < 1:
        raise ValueError("half_segments must be >= 1")
    if cfg.z_max <= 0:
        raise ValueError("z_max must be positive")
    if cfg.path in ("tanh-pwa", "tanh-multistart") and cfg.activation != "tanh":
        raise ValueError(f"path {cfg.path!r} requires a tanh network")
    if cfg.path == "relu-bigm" and cfg.activation != "relu":
        raise ValueError("path 'relu-bigm' requires a relu network")
    if cfg.case == "reactor" and cfg.wall_high <= cfg.wall_low:
        raise ValueError("wall bounds must satisfy wall_low < wall_high")


def artifact_path(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, ARTIFACTS[name])


def _ensure_dir(cfg: PipelineConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)


def _save_designs(path, designs, names) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + ",".join(names) + "\n")
        for j in range(designs.shape[1]):
            fh.write(",".join(repr(float(v)) for v in designs[:, j]) + "\n")


def _load_designs(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing '# name,...' header")
    names = tuple(lines[0][2:].split(","))
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    return np.asarray(rows).T, names


class _BasisStack:
    """One fitted basis per output block, chained into a single latent
    vector. A plain (non per-variable) fit is a one-element stack covering
    every output row."""

    def __init__(self, entries):
        # entries: list of (block_name, PcaBasis, row_slice)
        self.entries = list(entries)
        self.k_total = sum(b.k for _, b, _ in self.entries)

    def project(self, y):
        return np.vstack(
            [project(b, np.atleast_2d(y)[rows]) for _, b, rows in self.entries]
        )

    def reconstruct(self, u):
        u = np.asarray(u, dtype=float).ravel()
        parts = []
        at = 0
        for _, b, _ in self.entries:
            parts.append(reconstruct(b, u[at : at + b.k]))
            at += b.k
        return np.concatenate(parts)

    def row_coeffs(self, row: int):
        """Latent coefficients and constant offset for one output row:
        y[row] = coeffs @ u + const."""
        coeffs = np.zeros(self.k_total)
        at = 0
        for _, b, rows in self.entries:
            if rows.start <= row < rows.stop:
                local = row - rows.start
                coeffs[at : at + b.k] = b.p[:, local]
                const = float(b.mean[local]) if b.mean is not None else 0.0
                return coeffs, const
            at += b.k
        raise ValueError(f"output row {row} not covered by any block")

    @property
    def m_total(self):
        return self.entries[-1][2].stop


def _basis_paths(cfg, snapshots=None):
    if not cfg.per_variable:
        return {"all": os.path.join(cfg.out_dir, "basis.npz")}
    if snapshots is None:
        snapshots = load_snapshots_csv(artifact_path(cfg, "snapshots"))
    return {
        name: os.path.join(cfg.out_dir, f"basis_{name}.npz")
        for name, _, _ in snapshots.blocks
    }


def _load_stack(cfg, snapshots=None) -> _BasisStack:
    if snapshots is None:
        snapshots = load_snapshots_csv(artifact_path(cfg, "snapshots"))
    if not cfg.per_variable:
        basis = load_basis(os.path.join(cfg.out_dir, "basis.npz"))
        return _BasisStack([("all", basis, slice(0, snapshots.n_outputs))])
    entries = []
    for name, start, stop in snapshots.blocks:
        basis = load_basis(os.path.join(cfg.out_dir, f"basis_{name}.npz"))
        entries.append((name, basis, slice(start, stop)))
    return _BasisStack(entries)


def _objective_row(cfg: PipelineConfig, n_outputs: int) -> int:
    if cfg.objective_row is not None:
        if not 0 <= cfg.objective_row < n_outputs:
            raise ValueError(
                f"objective_row {cfg.objective_row} outside [0, {n_outputs})"
            )
        return cfg.objective_row
    if cfg.case == "reactor":
        return cfg.m_nodes - 1  # exit concentration: last node of the c block
    return n_outputs - 1


def _reactor_evaluator(cfg: PipelineConfig):
    """Maps a wall-temperature design to the stacked steady state. Chains
    the previous converged state as the next initial guess; solve_steady
    falls back to continuation when the chained guess stalls."""
    base = cfg.reactor_params()
    last = {"state": None}

    def evaluate(d):
        params = replace(base, wall=(float(d[0]), float(d[1]), float(d[2])))
        try:
            state = solve_steady(params, guess=last["state"])
        except SolveFailure:
            state = solve_steady(params)
        last["state"] = state
        return state.stacked()

    return evaluate


def stage_sample(cfg: PipelineConfig) -> dict:
    """Draw the design set (reactor) or ingest the dataset (csv-dataset)."""
    _ensure_dir(cfg)
    out = {}
    if cfg.case == "reactor":
        space = cfg.design_space()
        designs = lhc_sample(space, cfg.n_samples, cfg.seed)
        _save_designs(artifact_path(cfg, "designs"), designs, space.names)
        out["designs"] = artifact_path(cfg, "designs")
    else:
        snapshots = load_snapshots_csv(cfg.dataset_path)
        _save_designs(
            artifact_path(cfg, "designs"), snapshots.inputs, snapshots.input_names
        )
        save_snapshots_csv(snapshots, artifact_path(cfg, "snapshots"))
        out["designs"] = artifact_path(cfg, "designs")
        out["snapshots"] = artifact_path(cfg, "snapshots")
    return out


def stage_fom(cfg: PipelineConfig) -> dict:
    """Evaluate the full model at every design."""
    _ensure_dir(cfg)
    if cfg.case != "reactor":
        path = artifact_path(cfg, "snapshots")
        if not os.path.exists(path):
            raise StageFailure(
                "fom", "csv-dataset outputs come from the dataset; run 'sample' first"
            )
        return {"snapshots": path}
    designs, names = _load_designs(artifact_path(cfg, "designs"))
    space = cfg.design_space()
    if names != space.names:
        raise StageFailure("fom", f"designs file names {names} do not match {space.names}")
    m = cfg.m_nodes
    snapshots = collect_snapshots(
        space,
        designs,
        _reactor_evaluator(cfg),
        blocks=(("c", 0, m), ("t", m, 2 * m)),
        grid=cfg.reactor_params().grid,
        skip_failures=cfg.skip_failures,
    )
    save_snapshots_csv(snapshots, artifact_path(cfg, "snapshots"))
    return {"snapshots": artifact_path(cfg, "snapshots")}


def stage_pca(cfg: PipelineConfig) -> dict:
    """Fit the projection basis (one per block with per_variable)."""
    snapshots = load_snapshots_csv(artifact_path(cfg, "snapshots"))
    out = {}
    rows = []
    if cfg.per_variable:
        for name, start, stop in snapshots.blocks:
            basis = pca_fit(
                snapshots.outputs[start:stop],
                energy=cfg.energy,
                centering=cfg.centering,
                k=cfg.k,
                block=name,
            )
            path = os.path.join(cfg.out_dir, f"basis_{name}.npz")
            save_basis(basis, path)
            out[f"basis_{name}"] = path
            rows.append((name, basis))
    else:
        basis = pca_fit(
            snapshots.outputs,
            energy=cfg.energy,
            centering=cfg.centering,
            k=cfg.k,
        )
        path = os.path.join(cfg.out_dir, "basis.npz")
        save_basis(basis, path)
        out["basis"] = path
        rows.append(("all", basis))
    with open(artifact_path(cfg, "pca_summary"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["block", "k", "energy_target", "energy_captured", "n_snapshots"]
        )
        for name, basis in rows:
            ratios = basis.energy_ratios()
            captured = float(ratios[basis.k - 1]) if basis.k >= 1 else 0.0
            writer.writerow(
                [name, basis.k, repr(cfg.energy), repr(captured), snapshots.n_samples]
            )
    out["pca_summary"] = artifact_path(cfg, "pca_summary")
    return out


def stage_train(cfg: PipelineConfig) -> dict:
    """Fit the latent-coordinate network on the projected snapshots."""
    snapshots = load_snapshots_csv(artifact_path(cfg, "snapshots"))
    stack = _load_stack(cfg, snapshots)
    targets = stack.project(snapshots.outputs)
    spec = NetworkSpec(
        (snapshots.inputs.shape[0], *cfg.hidden, stack.k_total), cfg.activation
    )
    net, report = train_best_of(
        (snapshots.inputs, targets),
        spec,
        restarts=cfg.restarts,
        mse_tol=cfg.train_tol,
        seed=cfg.seed,
    )
    if not report.meets(cfg.train_tol):
        log.warning(
            "training missed tol %g (train %.3g, val %.3g, test %.3g); continuing",
            cfg.train_tol,
            report.train_mse,
            report.val_mse,
            report.test_mse,
        )
    save_network(net, artifact_path(cfg, "network"))
    with open(artifact_path(cfg, "train_report"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["train_mse", "val_mse", "test_mse", "iterations", "stop_reason", "met_tol"]
        )
        writer.writerow(
            [
                repr(report.train_mse),
                repr(report.val_mse),
                repr(report.test_mse),
                report.iterations,
                report.stop_reason,
                int(report.meets(cfg.train_tol)),
            ]
        )
    return {
        "network": artifact_path(cfg, "network"),
        "train_report": artifact_path(cfg, "train_report"),
    }


def stage_pwa(cfg: PipelineConfig) -> dict:
    """Fit and persist the activation curve (tanh-PWA path only)."""
    if cfg.path != "tanh-pwa":
        raise StageFailure("pwa", f"path {cfg.path!r} does not use a PWA curve")
    _ensure_dir(cfg)
    fitter = adaptive_fit if cfg.pwa_mode == "adaptive" else uniform_fit
    curve = fitter(cfg.half_segments, cfg.z_max)
    save_curve_csv(curve, artifact_path(cfg, "curve"))
    plot_curve_svg(curve, artifact_path(cfg, "curve_plot"))
    log.info(
        "PWA curve: %d segments, integral error %.3g",
        curve.n_segments,
        total_error(curve),
    )
    return {
        "curve": artifact_path(cfg, "curve"),
        "curve_plot": artifact_path(cfg, "curve_plot"),
    }


def _design_bounds(cfg: PipelineConfig) -> tuple[BoundsBox, tuple[str, ...]]:
    if cfg.case == "reactor":
        space = cfg.design_space()
        return BoundsBox(space.lower, space.upper), space.names
    designs, names = _load_designs(artifact_path(cfg, "designs"))
    return BoundsBox(designs.min(axis=1), designs.max(axis=1)), names


def _build_objective(cfg: PipelineConfig, stack: _BasisStack) -> LinearObjective:
    row = _objective_row(cfg, stack.m_total)
    u_coeffs, const = stack.row_coeffs(row)
    n_inputs = 3 if cfg.case == "reactor" else len(_design_bounds(cfg)[1])
    return LinearObjective("max", np.zeros(n_inputs), u_coeffs, const=const)


def _build_model(cfg: PipelineConfig, net, stack: _BasisStack, curve):
    """Encode the surrogate optimization problem in physical units."""
    bounds, _ = _design_bounds(cfg)
    objective = _build_objective(cfg, stack)
    if cfg.path == "relu-bigm":
        return encode_relu_bigm(net, bounds, objective, name="relu"), bounds, objective
    if len(net.spec.hidden_widths) > 1 and not cfg.force_deep_pwa:
        raise StageFailure(
            "encode",
            "piecewise curve error compounds through stacked hidden layers and "
            "can dominate the optimum; set [surrogate] force_deep_pwa = true "
            "to encode anyway",
        )
    for attempt in range(6):
        try:
            model = encode_pwa_sos(
                net,
                curve,
                bounds,
                objective,
                sos2_native=(cfg.sos2 == "native"),
                name="pwa",
            )
            break
        except ValueError as exc:
            msg = str(exc)
            marker = "z_max >= "
            if marker not in msg or attempt == 5:
                raise
            needed = float(msg.split(marker)[1]) * 1.05
            log.warning(
                "curve span %.3g too small for the trained weights; refitting "
                "with z_max = %.3g",
                curve.z_max,
                needed,
            )
            fitter = adaptive_fit if cfg.pwa_mode == "adaptive" else uniform_fit
            curve = fitter(cfg.half_segments, needed)
            save_curve_csv(curve, artifact_path(cfg, "curve"))
            plot_curve_svg(curve, artifact_path(cfg, "curve_plot"))
    return model, bounds, objective, curve


def stage_encode(cfg: PipelineConfig) -> dict:
    """Write the MILP in LP and MPS form."""
    if cfg.path == "tanh-multistart":
        raise StageFailure(
            "encode", "the multistart path optimizes the smooth network directly; "
            "there is no algebraic encoding"
        )
    net = load_network(artifact_path(cfg, "network"))
    stack = _load_stack(cfg)
    if cfg.path == "tanh-pwa":
        curve = load_curve_csv(artifact_path(cfg, "curve"))
        model, _, _, _ = _build_model(cfg, net, stack, curve)
    else:
        model, _, _ = _build_model(cfg, net, stack, None)
    write_lp(model, artifact_path(cfg, "model_lp"))
    write_mps(model, artifact_path(cfg, "model_mps"))
    log.info(
        "encoded %s: %d vars (%d binary), %d rows, %d SOS2 groups",
        cfg.path,
        model.n_vars,
        model.n_binary,
        len(model.constraints),
        len(model.sos2_groups),
    )
    return {
        "model_lp": artifact_path(cfg, "model_lp"),
        "model_mps": artifact_path(cfg, "model_mps"),
    }


def _pwa_warm_values(model, net, curve, d):
    """MILP-feasible point tracing the PWA forward pass at d."""
    ws, bs = folded_layers(net)
    names = {v.name: i for i, v in enumerate(model.variables)}
    x = np.zeros(model.n_vars)
    for i, v in enumerate(np.asarray(d, dtype=float)):
        x[names[f"d{i}"]] = v
    hidden = np.asarray(d, dtype=float)
    bp = curve.breakpoints
    g = 0
    for t in range(len(ws) - 1):
        z = ws[t] @ hidden + bs[t]
        hidden = np.asarray(eval_curve(curve, z), dtype=float)
        for j in range(z.size):
            x[names[f"z{g}"]] = z[j]
            x[names[f"h{g}"]] = hidden[j]
            s = min(max(np.searchsorted(bp, z[j], side="right") - 1, 0), bp.size - 2)
            frac = (z[j] - bp[s]) / (bp[s + 1] - bp[s])
            x[names[f"l{g}_{s}"]] = 1.0 - frac
            x[names[f"l{g}_{s + 1}"]] += frac
            if f"y{g}_0" in names:
                x[names[f"y{g}_{s}"]] = 1.0
            g += 1
    u = ws[-1] @ hidden + bs[-1]
    for ell, v in enumerate(u):
        x[names[f"u{ell}"]] = v
    return x


def _relu_warm_values(model, net, d):
    """MILP-feasible point tracing the ReLU forward pass at d."""
    ws, bs = folded_layers(net)
    names = {v.name: i for i, v in enumerate(model.variables)}
    x = np.zeros(model.n_vars)
    hidden = np.asarray(d, dtype=float)
    for i, v in enumerate(hidden):
        x[names[f"d{i}"]] = v
    for t in range(len(ws) - 1):
        z = ws[t] @ hidden + bs[t]
        for j, zj in enumerate(z):
            x[names[f"zp{t}_{j}"]] = max(zj, 0.0)
            x[names[f"zn{t}_{j}"]] = max(-zj, 0.0)
            x[names[f"bz{t}_{j}"]] = 1.0 if zj < 0 else 0.0
        hidden = np.maximum(z, 0.0)
    u = ws[-1] @ hidden + bs[-1]
    for ell, v in enumerate(u):
        x[names[f"u{ell}"]] = v
    return x


def stage_solve(cfg: PipelineConfig) -> dict:
    """Optimize the surrogate: MILP branch-and-bound or smooth multistart."""
    net = load_network(artifact_path(cfg, "network"))
    stack = _load_stack(cfg)
    bounds, names = _design_bounds(cfg)
    objective = _build_objective(cfg, stack)
    t0 = time.monotonic()
    out = {}
    if cfg.path == "tanh-multistart":
        d_star, value = multistart_local(
            net, None, objective, bounds, n_starts=cfg.n_starts, seed=cfg.seed
        )
        status, bound, gap, nodes = "multistart", float("nan"), float("nan"), 0
        u_star = forward(net, d_star)
    else:
        if cfg.path == "tanh-pwa":
            curve = load_curve_csv(artifact_path(cfg, "curve"))
            model, bounds, objective, curve = _build_model(cfg, net, stack, curve)
        else:
            model, bounds, objective = _build_model(cfg, net, stack, None)
        write_lp(model, artifact_path(cfg, "model_lp"))
        write_mps(model, artifact_path(cfg, "model_mps"))
        out["model_lp"] = artifact_path(cfg, "model_lp")
        out["model_mps"] = artifact_path(cfg, "model_mps")
        d_warm, _ = multistart_local(
            net, None, objective, bounds, n_starts=cfg.n_starts, seed=cfg.seed
        )
        if cfg.path == "tanh-pwa":
            warm = _pwa_warm_values(model, net, curve, d_warm)
        else:
            warm = _relu_warm_values(model, net, d_warm)
        report = solve_milp(
            model,
            rel_gap=cfg.rel_gap,
            abs_gap=cfg.abs_gap,
            time_limit=cfg.time_limit,
            warm_x=warm,
            log_path=artifact_path(cfg, "solver_log"),
        )
        out["solver_log"] = artifact_path(cfg, "solver_log")
        if report.x is None:
            raise StageFailure(
                "solve", f"branch and bound ended {report.status} with no incumbent",
                out,
            )
        d_star = report.x[model.groups["d"]]
        u_star = report.x[model.groups["u"]]
        value = float(report.objective)
        status, bound, gap, nodes = (
            report.status,
            report.bound,
            report.gap,
            report.nodes,
        )
    wall = time.monotonic() - t0
    with open(artifact_path(cfg, "solve"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["path", "status", "objective", "bound", "gap", "nodes", "wall_time"]
            + list(names)
            + [f"u{i}" for i in range(len(u_star))]
        )
        writer.writerow(
            [cfg.path, status, repr(value), repr(float(bound)), repr(float(gap)),
             nodes, repr(wall)]
            + [repr(float(v)) for v in d_star]
            + [repr(float(v)) for v in u_star]
        )
    out["solve"] = artifact_path(cfg, "solve")
    return out


def _read_solve(cfg: PipelineConfig):
    with open(artifact_path(cfg, "solve"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        row = next(reader)
    rec = dict(zip(header, row))
    n_d = 3 if cfg.case == "reactor" else len(_design_bounds(cfg)[1])
    d_cols = header[7 : 7 + n_d]
    d_star = np.array([float(rec[c]) for c in d_cols])
    u_star = np.array([float(rec[c]) for c in header[7 + n_d :]])
    return rec, d_star, u_star


def _fd_gradient(fun, d, lower, upper, h=1e-5):
    g = np.zeros(d.size)
    for i in range(d.size):
        hi = min(h, (upper[i] - d[i]) if d[i] + h > upper[i] else h)
        lo = min(h, (d[i] - lower[i]) if d[i] - h < lower[i] else h)
        dp, dm = d.copy(), d.copy()
        dp[i] += hi
        dm[i] -= lo
        g[i] = (fun(dp) - fun(dm)) / (hi + lo)
    return g


def reference_optimum(cfg: PipelineConfig, n_starts=256, seed=0, use_cache=True):
    """Best full-model objective over the design box: projected-gradient
    multistart on the full model itself with finite-difference gradients,
    then a
    Newton polish on the strictly interior coordinates. Cached to CSV.

    Returns (d_ref, value). Raises StageFailure when fewer than 90% of the
    starts converge.
    """
    path = artifact_path(cfg, "reference")
    if use_cache and os.path.exists(path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            row = next(reader)
        return np.array([float(v) for v in row[:3]]), float(row[3])
    if cfg.case != "reactor":
        raise StageFailure("reference", "reference optimum is defined for the reactor case")
    _ensure_dir(cfg)
    space = cfg.design_space()
    lower, upper = np.asarray(space.lower), np.asarray(space.upper)
    base = cfg.reactor_params()
    cache: dict[tuple, float] = {}
    chain = {"state": None}

    def fom(d):
        key = tuple(round(float(v), 12) for v in d)
        if key in cache:
            return cache[key]
        params = replace(base, wall=key)
        try:
            state = solve_steady(params, guess=chain["state"])
        except SolveFailure:
            state = solve_steady(params)
        chain["state"] = state
        val = c_exit(state)
        cache[key] = val
        return val

    starts = lhc_sample(space, n_starts, seed)
    box_diag = float(np.linalg.norm(upper - lower))
    best_d, best_v = None, -np.inf
    converged = 0
    for s in range(n_starts):
        chain["state"] = None
        d = starts[:, s].copy()
        v = fom(d)
        alpha = 0.25 * box_diag
        ok = False
        for _ in range(80):
            g = _fd_gradient(fom, d, lower, upper)
            gn = float(np.linalg.norm(g))
            # projected stationarity: zero gradient, or gradient pointing
            # out of the box at every active bound
            if gn <= 1e-8 or np.linalg.norm(np.clip(d + g, lower, upper) - d) <= 1e-8:
                ok = True
                break
            direction = g / gn
            alpha = min(max(2.0 * alpha, 1e-6), box_diag)
            improved = False
            while alpha >= 1e-10:
                cand = np.clip(d + alpha * direction, lower, upper)
                move = cand - d
                if np.linalg.norm(move) == 0.0:
                    alpha *= 0.5
                    continue
                vc = fom(cand)
                if vc >= v + 1e-4 * float(g @ move):
                    d, v = cand, vc
                    improved = True
                    break
                alpha *= 0.5
            if not improved:
                ok = True  # no ascent left at line-search resolution
                break
        converged += ok
        free = (d > lower + 1e-9) & (d < upper - 1e-9)
        if ok and np.any(free):
            d, v = _newton_polish(fom, d, free, lower, upper)
        # canonical cold re-evaluation: the warm-started chain may sit on a
        # hysteresis branch the cold solver would not reach
        chain["state"] = None
        cache.pop(tuple(round(float(x), 12) for x in d), None)
        v = fom(d)
        if v > best_v:
            best_d, best_v = d.copy(), v
    frac = converged / n_starts
    if frac < 0.9:
        raise StageFailure(
            "reference", f"only {frac:.0%} of {n_starts} starts converged"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["tw1", "tw2", "tw3", "value", "n_starts", "seed", "converged_frac"]
        )
        writer.writerow(
            [repr(float(v)) for v in best_d]
            + [repr(float(best_v)), n_starts, seed, repr(frac)]
        )
    return best_d, best_v


def _newton_polish(fun, d, free, lower, upper, iters=5, h=1e-4):
    """Equality-free Newton refinement on the interior coordinates."""
    d = d.copy()
    v = fun(d)
    idx = np.flatnonzero(free)
    for _ in range(iters):
        g = np.zeros(idx.size)
        hess = np.zeros((idx.size, idx.size))
        for a, i in enumerate(idx):
            dp, dm = d.copy(), d.copy()
            dp[i] += h
            dm[i] -= h
            fp, fm = fun(dp), fun(dm)
            g[a] = (fp - fm) / (2 * h)
            hess[a, a] = (fp - 2 * v + fm) / h**2
            for b_i in range(a + 1, idx.size):
                j = idx[b_i]
                dpp = d.copy(); dpp[i] += h; dpp[j] += h
                dpm = d.copy(); dpm[i] += h; dpm[j] -= h
                dmp = d.copy(); dmp[i] -= h; dmp[j] += h
                dmm = d.copy(); dmm[i] -= h; dmm[j] -= h
                hess[a, b_i] = hess[b_i, a] = (
                    fun(dpp) - fun(dpm) - fun(dmp) + fun(dmm)
                ) / (4 * h**2)
        try:
            step = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            break
        cand = d.copy()
        cand[idx] = np.clip(d[idx] + step, lower[idx], upper[idx])
        vc = fun(cand)
        if vc <= v + 1e-14:
            break
        d, v = cand, vc
    return d, v


def stage_validate(cfg: PipelineConfig) -> dict:
    """Evaluate the full model at the surrogate optimum and compare with
    the reference optimum."""
    if cfg.case != "reactor":
        raise StageFailure(
            "validate", "csv-dataset runs have no full model to validate against"
        )
    rec, d_star, _ = _read_solve(cfg)
    params = replace(cfg.reactor_params(), wall=tuple(float(v) for v in d_star))
    state = solve_steady(params)
    fom_value = c_exit(state)
    _, reference = reference_optimum(cfg)
    rel_error = abs(fom_value - reference) / abs(reference)
    with open(artifact_path(cfg, "validate"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["tw1", "tw2", "tw3", "surrogate_value", "fom_value", "reference",
             "rel_error"]
        )
        writer.writerow(
            [repr(float(v)) for v in d_star]
            + [rec["objective"], repr(fom_value), repr(reference), repr(rel_error)]
        )
    # profile artifact for the report overlays
    net = load_network(artifact_path(cfg, "network"))
    stack = _load_stack(cfg)
    y_surr = stack.reconstruct(forward(net, d_star))
    m = cfg.m_nodes
    grid = params.grid
    with open(artifact_path(cfg, "profile"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "c_fom", "t_fom", "c_surrogate", "t_surrogate"])
        for i in range(m):
            writer.writerow(
                [repr(float(grid[i])), repr(float(state.c[i])), repr(float(state.t[i])),
                 repr(float(y_surr[i])), repr(float(y_surr[m + i]))]
            )
    log.info(
        "validated: surrogate %.6f, FOM %.6f, reference %.6f, rel err %.3e",
        float(rec["objective"]) if rec["objective"] != "nan" else float("nan"),
        fom_value,
        reference,
        rel_error,
    )
    return {
        "validate": artifact_path(cfg, "validate"),
        "profile": artifact_path(cfg, "profile"),
        "reference": artifact_path(cfg, "reference"),
    }


def report_artifacts(cfg: PipelineConfig) -> dict:
    """Comparison table, profile overlay plot, and deviation summary."""
    for name in ("solve", "validate", "profile"):
        if not os.path.exists(artifact_path(cfg, name)):
            raise StageFailure(
                "report", f"missing artifact {artifact_path(cfg, name)}; run the "
                "earlier stages first"
            )
    rec, d_star, _ = _read_solve(cfg)
    with open(artifact_path(cfg, "validate"), newline="") as fh:
        reader = csv.reader(fh)
        vhead = next(reader)
        vrec = dict(zip(vhead, next(reader)))
    net = load_network(artifact_path(cfg, "network"))
    model_label = "-".join(str(w) for w in net.spec.widths) + f" {net.spec.activation}"
    with open(artifact_path(cfg, "table2"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "solver-path", "function value", "reference",
             "relative error", "wall time"]
        )
        writer.writerow(
            [model_label, cfg.path, vrec["fom_value"], vrec["reference"],
             vrec["rel_error"], rec["wall_time"]]
        )

    prof = np.genfromtxt(artifact_path(cfg, "profile"), delimiter=",", names=True)
    dev_c = float(np.max(np.abs(prof["c_fom"] - prof["c_surrogate"])))
    dev_t = float(np.max(np.abs(prof["t_fom"] - prof["t_surrogate"])))
    with open(artifact_path(cfg, "deviations"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "max_abs_deviation"])
        writer.writerow(["c", repr(dev_c)])
        writer.writerow(["t", repr(dev_t)])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, fom_col, surr_col, label in (
        (axes[0], "c_fom", "c_surrogate", "concentration C"),
        (axes[1], "t_fom", "t_surrogate", "temperature T"),
    ):
        ax.plot(prof["y"], prof[fom_col], label="full model", linewidth=1.4)
        ax.plot(prof["y"], prof[surr_col], "--", label="surrogate", linewidth=1.2)
        ax.set_xlabel("axial position y")
        ax.set_ylabel(label)
        ax.legend(loc="best")
    title_d = ", ".join(f"{v:.4f}" for v in d_star)
    fig.suptitle(f"profiles at the optimum ({title_d})")
    fig.tight_layout()
    fig.savefig(artifact_path(cfg, "profiles_plot"), format="svg")
    plt.close(fig)
    return {
        "table2": artifact_path(cfg, "table2"),
        "profiles_plot": artifact_path(cfg, "profiles_plot"),
        "deviations": artifact_path(cfg, "deviations"),
    }


@dataclass
class RunReport:
    """What a completed run produced, with where it is on disk."""

    case: str
    path: str
    d_star: np.ndarray
    surrogate_value: float
    fom_value: float
    reference: float
    rel_error: float
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


STAGES = {
    "sample": stage_sample,
    "fom": stage_fom,
    "pca": stage_pca,
    "train": stage_train,
    "pwa": stage_pwa,
    "encode": stage_encode,
    "solve": stage_solve,
    "validate": stage_validate,
    "report": report_artifacts,
}


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Execute every applicable stage in order and write run_report.csv.

    Timings vary between runs; everything else in the report is a
    deterministic function of the config (including the seed).
    """
    validate_config(cfg)
    order = ["sample", "fom", "pca", "train"]
    if cfg.path == "tanh-pwa":
        order.append("pwa")
    if cfg.path != "tanh-multistart":
        order.append("encode")
    order.append("solve")
    if cfg.case == "reactor":
        order += ["validate", "report"]
    artifacts: dict[str, str] = {}
    timings: dict[str, float] = {}
    for stage in order:
        t0 = time.monotonic()
        try:
            artifacts.update(STAGES[stage](cfg))
        except StageFailure as exc:
            raise StageFailure(exc.stage, exc.message, artifacts) from exc
        except Exception as exc:
            raise StageFailure(stage, str(exc), artifacts) from exc
        timings[stage] = time.monotonic() - t0
        log.info("stage %-8s done in %.2f s", stage, timings[stage])

    rec, d_star, _ = _read_solve(cfg)
    surrogate_value = float(rec["objective"])
    if cfg.case == "reactor":
        with open(artifact_path(cfg, "validate"), newline="") as fh:
            reader = csv.reader(fh)
            vhead = next(reader)
            vrec = dict(zip(vhead, next(reader)))
        fom_value = float(vrec["fom_value"])
        reference = float(vrec["reference"])
        rel_error = float(vrec["rel_error"])
    else:
        fom_value = reference = rel_error = float("nan")
    report = RunReport(
        case=cfg.case,
        path=cfg.path,
        d_star=d_star,
        surrogate_value=surrogate_value,
        fom_value=fom_value,
        reference=reference,
        rel_error=rel_error,
        timings=timings,
        artifacts=artifacts,
    )
    with open(artifact_path(cfg, "run_report"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerow(["case", cfg.case])
        writer.writerow(["path", cfg.path])
        for i, v in enumerate(d_star):
            writer.writerow([f"d{i}", repr(float(v))])
        writer.writerow(["surrogate_value", repr(surrogate_value)])
        writer.writerow(["fom_value", repr(fom_value)])
        writer.writerow(["reference", repr(reference)])
        writer.writerow(["rel_error", repr(rel_error)])
        for stage, dt in timings.items():
            writer.writerow([f"time_{stage}", repr(dt)])
        for name, path in sorted(artifacts.items()):
            writer.writerow([f"artifact_{name}", path])
    report.artifacts["run_report"] = artifact_path(cfg, "run_report")
    return report


STUDY_COUNTS = (10, 20, 30, 40, 50, 60, 70, 80)


def pca_study(
    seed: int = 0,
    counts=STUDY_COUNTS,
    energy: float = 0.998,
    n_val: int = 500,
    m_nodes: int = 250,
    out_path=None,
):
    """Reduction-quality sweep over snapshot counts for the Damkohler-sweep
    regime (single design variable Da in [0.121, 0.400], cold wall).

    For each count: LHC-sample Da, solve the full model at each sample, fit
    a mean-centered basis at the energy threshold, and score reconstruction
    on a shared 500-point uniform Da validation grid. Errors are percent
    state-vector norms: err = 100 * ||reconstructed - true|| / ||true||;
    the table reports their sum and max over the grid.
    """
    base = ReactorParams(
        gamma=10.0, b_rise=14.0, da=0.1, wall=0.0, m_nodes=m_nodes
    )
    space = DesignSpace.box(("da",), (0.121,), (0.400,))

    def sweep(da_values):
        """Solve along ascending Da, chaining states; retry cold on a stall."""
        states = np.empty((2 * m_nodes, da_values.size))
        order = np.argsort(da_values)
        guess = None
        for j in order:
            params = base.with_da(float(da_values[j]))
            try:
                state = solve_steady(params, guess=guess)
            except SolveFailure:
                state = solve_steady(params)
            states[:, j] = state.stacked()
            guess = state
        return states

    val_da = np.linspace(0.121, 0.400, n_val)
    val_states = sweep(val_da)
    val_norms = np.linalg.norm(val_states, axis=0)
    rows = []
    for count in counts:
        da_samples = lhc_sample(space, count, seed)[0]
        snaps = sweep(da_samples)
        basis = pca_fit(snaps, energy=energy, centering=True)
        recon = reconstruct(basis, project(basis, val_states))
        err = 100.0 * np.linalg.norm(recon - val_states, axis=0) / val_norms
        rows.append(
            {
                "samples": count,
                "k": basis.k,
                "total_error_pct": float(err.sum()),
                "max_error_pct": float(err.max()),
            }
        )
        log.info(
            "study: %3d samples -> k=%d, total %.2f%%, max %.2f%%",
            count,
            basis.k,
            rows[-1]["total_error_pct"],
            rows[-1]["max_error_pct"],
        )
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["samples", "k", "total_error_pct", "max_error_pct"])
            for row in rows:
                writer.writerow(
                    [row["samples"], row["k"], repr(row["total_error_pct"]),
                     repr(row["max_error_pct"])]
                )
    return rows
