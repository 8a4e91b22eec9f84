"""Monte Carlo experiment harness: configuration, execution, steady-state
theory overlays, and CSV/JSON reporting.

A run is a product of (algorithm, gamma, eta) cells. Trials share one
trajectory ensemble (per-trial seeds base_seed + trial), so algorithm
comparisons are paired; each cell's internal filter randomness draws from its
own deterministic stream. Everything is a pure function of the config and the
base seed.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qws
from .filters import ALGORITHMS, FilterOptions, filter_step, info_vectors, init_filter_state
from .linalg import min_eig_sym, sym_inv
from .network import (ConsensusNetwork, build_named_topology,
                      build_random_geometric, network_from_json, spectral_data)
from .riccati import (RiccatiError, SteadyStatePrediction, ckf_steady_prior,
                      fused_observation, modified_info_terms,
                      steady_modified_cm, steady_modified_ci)
from .system import (PlantModel, SensorSuite, cycle_types, make_tracking_model,
                     make_tracking_sensors, simulate)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "CellResult",
    "SteadyTheory",
    "load_config",
    "run_experiment",
    "compute_steady_theory",
    "posterior_theory_trace",
    "steady_state_tables",
    "qws_benchmark",
    "QwsBenchReport",
    "emit_report",
    "report_to_dict",
    "report_from_dict",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    network: dict = field(default_factory=lambda: {
        "kind": "geometric", "n": 20, "side": 300.0, "radius": 100.0, "seed": 8})
    plant: dict = field(default_factory=lambda: {
        "T": 0.1, "horizon_steps": 200,
        "x0_mean": [150.0, 0.0, 150.0, 0.0], "P0_scale": 100.0})
    node_types: object = "cycle"
    algorithms: list = field(default_factory=lambda: ["ckf", "mcm-direct"])
    gammas: list = field(default_factory=lambda: [4])
    etas: list = field(default_factory=lambda: [0.0])
    omega: float | None = None
    trials: int = 1000
    base_seed: int = 2024
    steady_window: float = 0.25
    out_dir: str = "out"
    freeze_qws: bool = False

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.gammas or any(g < 1 for g in self.gammas):
            raise ConfigError("gammas must be a non-empty list of integers >= 1")
        if any(not 0.0 <= e < 1.0 for e in self.etas):
            raise ConfigError("etas must lie in [0, 1)")
        if not 0.0 < self.steady_window <= 1.0:
            raise ConfigError("steady_window must be a fraction in (0, 1]")
        for alg in self.algorithms:
            if alg not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {alg!r}")
        if int(self.plant.get("horizon_steps", 0)) < 1:
            raise ConfigError("plant.horizon_steps must be >= 1")
        if float(self.plant.get("T", 0.0)) <= 0:
            raise ConfigError("plant.T must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name, "network": self.network, "plant": self.plant,
            "node_types": self.node_types, "algorithms": list(self.algorithms),
            "gammas": list(self.gammas), "etas": list(self.etas),
            "omega": self.omega, "trials": self.trials,
            "base_seed": self.base_seed, "steady_window": self.steady_window,
            "out_dir": self.out_dir, "freeze_qws": self.freeze_qws,
        }


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def build_network(spec: dict) -> ConsensusNetwork:
    if "file" in spec:
        return network_from_json(Path(spec["file"]).read_text())
    kind = spec.get("kind", "geometric")
    if kind == "geometric":
        return build_random_geometric(int(spec["n"]), float(spec["side"]),
                                      float(spec["radius"]), int(spec.get("seed", 0)))
    return build_named_topology(kind, int(spec["n"]), spec.get("seed"))


def build_plant(spec: dict) -> PlantModel:
    return make_tracking_model(float(spec.get("T", 0.1)),
                               x0_mean=spec.get("x0_mean", (150.0, 0.0, 150.0, 0.0)),
                               p0_scale=float(spec.get("P0_scale", 100.0)))


def build_sensors(node_types, node_count: int) -> SensorSuite:
    if node_types == "cycle" or node_types is None:
        types = cycle_types(node_count)
    else:
        types = list(node_types)
        if len(types) != node_count:
            raise ConfigError("node_types length must equal network size")
    return make_tracking_sensors(types)


# ---------------------------------------------------------------------------
# steady-state theory
# ---------------------------------------------------------------------------

@dataclass
class SteadyTheory:
    """Steady-state predictions for one (gamma, eta) network configuration."""

    gamma: int
    eta: float
    p_ckf: np.ndarray
    ckf_post_trace: float
    mcm_p: np.ndarray | None = None          # (N, n, n) prior
    mcm_post_trace: np.ndarray | None = None  # (N,)
    mcm_error: str | None = None
    mci: SteadyStatePrediction | None = None
    mci_post_est_trace: np.ndarray | None = None  # (N,) trace(P_bar)
    mci_post_act_trace: np.ndarray | None = None  # (N,) posterior-transformed P~
    mci_error: str | None = None


def compute_steady_theory(plant: PlantModel, sensors: SensorSuite,
                          network: ConsensusNetwork, gamma: int,
                          eta: float = 0.0) -> SteadyTheory:
    p_ckf = ckf_steady_prior(plant, sensors)
    omega_sum = sensors.info_matrices().sum(axis=0)
    ckf_post = float(np.trace(sym_inv(sym_inv(p_ckf) + omega_sum)))
    th = SteadyTheory(gamma=gamma, eta=eta, p_ckf=p_ckf, ckf_post_trace=ckf_post)

    lg = network.power(gamma)
    c_tilde, r_tilde = fused_observation(lg, sensors)
    try:
        th.mcm_p = steady_modified_cm(plant, c_tilde, r_tilde)
        omegas = modified_info_terms(c_tilde, r_tilde)
        th.mcm_post_trace = np.array([
            float(np.trace(sym_inv(sym_inv(th.mcm_p[i]) + omegas[i])))
            for i in range(network.node_count)])
    except RiccatiError as exc:
        th.mcm_error = str(exc)
    try:
        pred = steady_modified_ci(plant, lg, c_tilde, r_tilde, sensors)
        th.mci = pred
        th.mci_post_est_trace = np.trace(pred.p_bar, axis1=1, axis2=2)
        a_inv = np.linalg.inv(plant.a)
        post_act = a_inv @ (pred.p_tilde - plant.q) @ a_inv.T
        th.mci_post_act_trace = np.trace(post_act, axis1=1, axis2=2)
    except RiccatiError as exc:
        th.mci_error = str(exc)
    return th


def posterior_theory_trace(algorithm: str, theory: SteadyTheory,
                           node_count: int) -> np.ndarray | None:
    """Per-node theoretical steady posterior MSE (trace of the posterior error
    covariance) where the paper's theory defines one."""
    if algorithm == "ckf":
        return np.full(node_count, theory.ckf_post_trace)
    if algorithm.startswith("mcm"):
        return theory.mcm_post_trace
    if algorithm.startswith("mci"):
        return theory.mci_post_act_trace
    return None


# ---------------------------------------------------------------------------
# experiment execution
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    algorithm: str
    gamma: int
    eta: float
    mse: np.ndarray | None = None              # (K, N)
    mmse: float | None = None
    mmse_se: float | None = None
    trial_steady_mse: np.ndarray | None = None  # (B,)
    steady_mse_per_node: np.ndarray | None = None        # (N,)
    emp_prior_cov: np.ndarray | None = None     # (N, n, n) steady window
    emp_prior_trace: np.ndarray | None = None   # (N,)
    theory_post_trace: np.ndarray | None = None  # (N,)
    theory_mmse: float | None = None
    theory_prior_est_trace: np.ndarray | None = None  # (N,) trace(P_i), mci
    theory_prior_act_trace: np.ndarray | None = None  # (N,) trace(P~_i), mci
    consistency_margin_theory: np.ndarray | None = None
    consistency_margin_empirical: np.ndarray | None = None
    failed: bool = False
    error: str | None = None


@dataclass
class ExperimentReport:
    schema_version: int
    config: dict
    network_info: dict
    cells: list
    runtime_s: float
    created_at: str


@dataclass
class _TrajectoryBatch:
    states: np.ndarray        # (B, K+1, n)
    measurements: list        # per node (B, K, m_i)


def _simulate_batch(plant: PlantModel, sensors: SensorSuite, steps: int,
                    base_seed: int, trials: int) -> _TrajectoryBatch:
    n = plant.dim
    states = np.empty((trials, steps + 1, n))
    meas = [np.empty((trials, steps, c.shape[0])) for c in sensors.c]
    for b in range(trials):
        tr = simulate(plant, sensors, steps, base_seed + b)
        states[b] = tr.states
        for i in range(sensors.node_count):
            meas[i][b] = tr.measurements[i]
    return _TrajectoryBatch(states=states, measurements=meas)


def _run_cell(algorithm: str, plant: PlantModel, sensors: SensorSuite,
              network: ConsensusNetwork, gamma: int, batch: _TrajectoryBatch,
              steady_start: int, options: FilterOptions,
              cell_rng_seed) -> dict:
    trials = batch.states.shape[0]
    steps = batch.states.shape[1] - 1
    n = plant.dim
    st = init_filter_state(algorithm, plant, sensors, network, gamma,
                           batch=trials, options=options,
                           rng=np.random.default_rng(cell_rng_seed))
    n_nodes = st.node_axis
    mse = np.empty((steps, n_nodes))
    trial_sum = np.zeros(trials)
    prior_cov = np.zeros((n_nodes, n, n))
    steady_count = 0
    z_buf = None
    for k in range(1, steps + 1):
        ys = [m[:, k - 1] for m in batch.measurements]
        z_buf = info_vectors(sensors, ys, info_maps=st.info_maps)
        filter_step(st, z_buf)
        truth = batch.states[:, k][:, None, :]
        err = st.x_post - truth
        sq = np.sum(err * err, axis=-1)          # (B, N)
        mse[k - 1] = sq.mean(axis=0)
        if k > steady_start:
            trial_sum += sq.mean(axis=1)
            e_prior = st.x_prior - truth
            prior_cov += np.einsum("bna,bnc->nac", e_prior, e_prior) / trials
            steady_count += 1
    trial_steady = trial_sum / steady_count
    prior_cov /= steady_count
    if n_nodes == 1:  # centralized filter: same estimate serves every node
        n_all = network.node_count
        mse = np.broadcast_to(mse, (steps, n_all)).copy()
        prior_cov = np.broadcast_to(prior_cov, (n_all, n, n)).copy()
    return {
        "mse": mse,
        "trial_steady_mse": trial_steady,
        "emp_prior_cov": prior_cov,
        "steady_mse_per_node": mse[steady_start:].mean(axis=0),
    }


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Execute every (algorithm, gamma, eta) cell of the config and attach the
    steady-state theory overlays. Deterministic given the base seed."""
    t_start = time.time()
    config.validate()
    network0 = build_network(config.network)
    plant = build_plant(config.plant)
    sensors = build_sensors(config.node_types, network0.node_count)
    steps = int(config.plant["horizon_steps"])
    steady_start = int(round(steps * (1.0 - config.steady_window)))

    batch = _simulate_batch(plant, sensors, steps, config.base_seed, config.trials)

    sd = spectral_data(network0)
    net_info = {
        "n": network0.node_count,
        "edges": sorted([i + 1, j + 1] for i, j in network0.edges),
        "lambda2": sd.lambda2,
        "diameter": sd.diameter,
    }

    cells: list[CellResult] = []
    theory_cache: dict[tuple, SteadyTheory] = {}
    cell_index = 0
    for eta in config.etas:
        network = network0.blended(float(eta))
        for gamma in config.gammas:
            key = (gamma, float(eta))
            if key not in theory_cache:
                theory_cache[key] = compute_steady_theory(
                    plant, sensors, network, gamma, eta=float(eta))
            theory = theory_cache[key]
            for algorithm in config.algorithms:
                cell = CellResult(algorithm=algorithm, gamma=gamma, eta=float(eta))
                options = FilterOptions(omega=config.omega,
                                        freeze_qws=config.freeze_qws)
                try:
                    out = _run_cell(algorithm, plant, sensors, network, gamma,
                                    batch, steady_start, options,
                                    cell_rng_seed=[config.base_seed, cell_index, 1])
                except Exception as exc:  # cell marked failed, run continues
                    cell.failed = True
                    cell.error = f"{type(exc).__name__}: {exc}"
                    cells.append(cell)
                    cell_index += 1
                    continue
                cell.mse = out["mse"]
                cell.trial_steady_mse = out["trial_steady_mse"]
                cell.emp_prior_cov = out["emp_prior_cov"]
                cell.emp_prior_trace = np.trace(out["emp_prior_cov"],
                                                axis1=1, axis2=2)
                cell.steady_mse_per_node = out["steady_mse_per_node"]
                cell.mmse = float(out["trial_steady_mse"].mean())
                cell.mmse_se = float(out["trial_steady_mse"].std(ddof=1)
                                     / np.sqrt(config.trials)) if config.trials > 1 else 0.0
                tpt = posterior_theory_trace(algorithm, theory, network.node_count)
                if tpt is not None:
                    cell.theory_post_trace = np.asarray(tpt, dtype=float)
                    cell.theory_mmse = float(np.mean(tpt))
                if algorithm.startswith("mci") and theory.mci is not None:
                    cell.theory_prior_est_trace = np.trace(theory.mci.p,
                                                           axis1=1, axis2=2)
                    cell.theory_prior_act_trace = np.trace(theory.mci.p_tilde,
                                                           axis1=1, axis2=2)
                    cell.consistency_margin_theory = theory.mci.consistency_margin
                    cell.consistency_margin_empirical = np.array([
                        min_eig_sym(theory.mci.p[i] - cell.emp_prior_cov[i])
                        for i in range(network.node_count)])
                cells.append(cell)
                cell_index += 1

    return ExperimentReport(
        schema_version=SCHEMA_VERSION,
        config=config.to_dict(),
        network_info=net_info,
        cells=cells,
        runtime_s=time.time() - t_start,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


def steady_state_tables(config: ExperimentConfig) -> dict:
    """Theory-only output for the steady-state CLI subcommand: per-node
    trace(P_i), trace(P~_i), consistency margins, trace(P^C), and the
    CKF-gap |P_i - P^C|_2 per gamma."""
    config.validate()
    network0 = build_network(config.network)
    plant = build_plant(config.plant)
    sensors = build_sensors(config.node_types, network0.node_count)
    out = {"schema_version": SCHEMA_VERSION, "entries": []}
    for eta in config.etas:
        network = network0.blended(float(eta))
        for gamma in config.gammas:
            th = compute_steady_theory(plant, sensors, network, gamma, float(eta))
            entry = {
                "gamma": gamma, "eta": float(eta),
                "trace_P_ckf": float(np.trace(th.p_ckf)),
                "ckf_post_trace": th.ckf_post_trace,
            }
            if th.mcm_p is not None:
                entry["mcm"] = {
                    "trace_P": np.trace(th.mcm_p, axis1=1, axis2=2).tolist(),
                    "post_trace": th.mcm_post_trace.tolist(),
                    "gap_to_ckf_2norm": [
                        float(np.linalg.norm(th.mcm_p[i] - th.p_ckf, 2))
                        for i in range(network.node_count)],
                }
            else:
                entry["mcm"] = {"error": th.mcm_error}
            if th.mci is not None:
                entry["mci"] = {
                    "trace_P": np.trace(th.mci.p, axis1=1, axis2=2).tolist(),
                    "trace_P_tilde": np.trace(th.mci.p_tilde, axis1=1, axis2=2).tolist(),
                    "consistency_margin": th.mci.consistency_margin.tolist(),
                    "gap_to_ckf_2norm": [
                        float(np.linalg.norm(th.mci.p[i] - th.p_ckf, 2))
                        for i in range(network.node_count)],
                }
            else:
                entry["mci"] = {"error": th.mci_error}
            out["entries"].append(entry)
    return out


# ---------------------------------------------------------------------------
# QWS estimator benchmark
# ---------------------------------------------------------------------------

@dataclass
class QwsBenchReport:
    gamma: int
    ks: list
    direct_err: np.ndarray          # (K, N) |U - R~|_F
    direct_err_pinv: np.ndarray     # (K, N) |U^+ - R~^+|_F
    bound_exact: np.ndarray         # (K, N) alpha_i |X~_i|_2
    bound_spectral: list            # per k: float | None
    direct_bound_ok: bool
    stoch_k: int
    stoch_mse_empirical: float
    stoch_mse_predicted: float
    stoch_agrees: bool


def qws_benchmark(config: ExperimentConfig, max_k: int = 60,
                  replicas: int = 1000, agree_rtol: float = 0.10) -> QwsBenchReport:
    """Run both QWS estimators against the exact oracle on the configured
    network, recording per-step errors, the direct-method bounds, and the
    stochastic moment prediction."""
    config.validate()
    network = build_network(config.network).blended(float(config.etas[0]))
    sensors = build_sensors(config.node_types, network.node_count)
    gamma = int(config.gammas[0])
    xs = sensors.info_matrices()
    x_tilde = qws.exact_qws(network, gamma, xs)
    xt_pinv = qws.pseudo_inverse(x_tilde)
    xt_norm2 = np.linalg.norm(x_tilde, 2, axis=(1, 2))
    n_nodes = network.node_count

    st = qws.direct_init(network, xs, rng_seed=config.base_seed)
    qws.direct_round(st, network, gamma)
    ks, derr, derrp, bexact, bspec = [], [], [], [], []
    ok = True
    while st.k <= max_k:
        est = qws.direct_estimates(st)
        err = np.linalg.norm(est - x_tilde, "fro", axis=(1, 2))
        err2 = np.linalg.norm(est - x_tilde, 2, axis=(1, 2))
        errp = np.linalg.norm(qws.pseudo_inverse(est) - xt_pinv, "fro", axis=(1, 2))
        bound = qws.direct_error_bound(network, gamma, st.k)
        ks.append(st.k)
        derr.append(err)
        derrp.append(errp)
        bexact.append(bound.alpha_exact * xt_norm2)
        bspec.append(bound.alpha_spectral)
        if np.any(err2 > bound.alpha_exact * xt_norm2 * (1 + 1e-9) + 1e-12):
            ok = False
        qws.direct_consensus_round(st, network)

    stoch_k = max(xs.shape[-1] + 4, 20)
    sst = qws.stochastic_init(xs, batch_shape=(replicas,))
    rng = np.random.default_rng([config.base_seed, 7])
    for _ in range(stoch_k):
        qws.stochastic_round(sst, network, gamma, rng)
    sq = np.sum((sst.upsilon - x_tilde) ** 2, axis=(-2, -1))  # (R, N)
    emp = float(sq.mean())
    pred = float(np.mean([
        qws.stochastic_moment_predictions(x_tilde[i], stoch_k).mse_forward
        for i in range(n_nodes)]))
    agrees = bool(abs(emp - pred) <= agree_rtol * pred)

    return QwsBenchReport(
        gamma=gamma, ks=ks,
        direct_err=np.array(derr), direct_err_pinv=np.array(derrp),
        bound_exact=np.array(bexact), bound_spectral=bspec,
        direct_bound_ok=ok,
        stoch_k=stoch_k, stoch_mse_empirical=emp, stoch_mse_predicted=pred,
        stoch_agrees=agrees,
    )


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def report_to_dict(report: ExperimentReport) -> dict:
    cells = []
    for c in report.cells:
        cells.append({
            "algorithm": c.algorithm, "gamma": c.gamma, "eta": c.eta,
            "mse": _arr(c.mse), "mmse": c.mmse, "mmse_se": c.mmse_se,
            "trial_steady_mse": _arr(c.trial_steady_mse),
            "steady_mse_per_node": _arr(c.steady_mse_per_node),
            "emp_prior_cov": _arr(c.emp_prior_cov),
            "emp_prior_trace": _arr(c.emp_prior_trace),
            "theory_post_trace": _arr(c.theory_post_trace),
            "theory_mmse": c.theory_mmse,
            "theory_prior_est_trace": _arr(c.theory_prior_est_trace),
            "theory_prior_act_trace": _arr(c.theory_prior_act_trace),
            "consistency_margin_theory": _arr(c.consistency_margin_theory),
            "consistency_margin_empirical": _arr(c.consistency_margin_empirical),
            "failed": c.failed, "error": c.error,
        })
    return {
        "schema_version": report.schema_version,
        "config": report.config,
        "network": report.network_info,
        "cells": cells,
        "runtime_s": report.runtime_s,
        "created_at": report.created_at,
    }


def _maybe_arr(x):
    return None if x is None else np.asarray(x, dtype=float)


def report_from_dict(doc: dict) -> ExperimentReport:
    cells = []
    for c in doc["cells"]:
        cells.append(CellResult(
            algorithm=c["algorithm"], gamma=c["gamma"], eta=c["eta"],
            mse=_maybe_arr(c["mse"]), mmse=c["mmse"], mmse_se=c["mmse_se"],
            trial_steady_mse=_maybe_arr(c["trial_steady_mse"]),
            steady_mse_per_node=_maybe_arr(c["steady_mse_per_node"]),
            emp_prior_cov=_maybe_arr(c["emp_prior_cov"]),
            emp_prior_trace=_maybe_arr(c["emp_prior_trace"]),
            theory_post_trace=_maybe_arr(c["theory_post_trace"]),
            theory_mmse=c["theory_mmse"],
            theory_prior_est_trace=_maybe_arr(c["theory_prior_est_trace"]),
            theory_prior_act_trace=_maybe_arr(c["theory_prior_act_trace"]),
            consistency_margin_theory=_maybe_arr(c["consistency_margin_theory"]),
            consistency_margin_empirical=_maybe_arr(c["consistency_margin_empirical"]),
            failed=c["failed"], error=c["error"],
        ))
    return ExperimentReport(
        schema_version=doc["schema_version"], config=doc["config"],
        network_info=doc["network"], cells=cells,
        runtime_s=doc["runtime_s"], created_at=doc["created_at"],
    )


CSV_COLUMNS = ["experiment", "algorithm", "gamma", "eta", "node", "k",
               "mse", "theory"]


def emit_report(report: ExperimentReport, out_dir,
                formats=("csv", "json")) -> list[Path]:
    """Write the report as a long-format CSV (one row per algorithm, gamma,
    eta, node, step) and/or a full JSON document. Column order is stable and
    rows are emitted in deterministic order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = report.config.get("name", "experiment")
    written = []
    if "csv" in formats:
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for c in report.cells:
                if c.failed or c.mse is None:
                    continue
                theory = c.theory_post_trace
                steps, n_nodes = c.mse.shape
                for node in range(n_nodes):
                    tval = "" if theory is None else repr(float(theory[node]))
                    for k in range(steps):
                        writer.writerow([name, c.algorithm, c.gamma, c.eta,
                                         node + 1, k + 1,
                                         repr(float(c.mse[k, node])), tval])
        written.append(path)
    if "json" in formats:
        path = out_dir / f"{name}.json"
        with open(path, "w") as fh:
            json.dump(report_to_dict(report), fh, indent=1)
        written.append(path)
    return written
