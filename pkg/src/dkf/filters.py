"""The seven consensus filters, advanced as per-node state machines in
synchronous rounds over a simulated network.

Algorithm tags: ckf | cm | ci | hcmci | mcm-direct | mcm-stoch | mci-direct
| mci-stoch. Every time step follows the same schedule: Prediction -> Fusion
(gamma neighbour-averaging sub-rounds) -> Covariance -> Correction; the
measurement of step k is consumed by the fusion of step k.

State arrays carry a leading Monte Carlo batch axis so independent trials run
in lock-step. Covariance paths that do not depend on the measurements or on
per-trial randomness (everything except the stochastic modes) are stored with
batch size 1 and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qws
from .linalg import spd_inv_batched, sym_inv, sym_pinv, symmetrize
from .network import ConsensusNetwork
from .system import PlantModel, SensorSuite, Trajectory

__all__ = [
    "ALGORITHMS",
    "FilterOptions",
    "FilterState",
    "FilterHistory",
    "FilterError",
    "init_filter_state",
    "filter_step",
    "ckf_step",
    "cm_step",
    "ci_step",
    "hcmci_step",
    "modified_cm_step",
    "modified_ci_step",
    "run_filter",
    "info_vectors",
]

ALGORITHMS = ("ckf", "cm", "ci", "hcmci",
              "mcm-direct", "mcm-stoch", "mci-direct", "mci-stoch")

FREEZE_TOL = 1e-12
FREEZE_STREAK = 10


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterOptions:
    omega: float | None = None        # hcmci measurement gain; defaults to N
    freeze_qws: bool = False          # stop updating the QWS estimate once converged
    naive_mode: bool = False          # reduced q-row width for non-sensing nodes
    pinv_rel_tol: float | None = None


@dataclass
class FilterState:
    """Stacked per-node filter state for one algorithm.

    x arrays are (B, N, n); covariance arrays are (Bp, N, n, n) where Bp is 1
    whenever the covariance path is trial-independent. aux holds the QWS
    estimator state of the modified algorithms.
    """

    algorithm: str
    plant: PlantModel
    sensors: SensorSuite
    network: ConsensusNetwork
    gamma: int
    options: FilterOptions
    x_prior: np.ndarray
    p_prior: np.ndarray
    x_post: np.ndarray
    p_post: np.ndarray
    k: int = 0
    aux: object | None = None
    rng: np.random.Generator | None = None
    # precomputed constants
    infos: np.ndarray | None = None       # (N, n, n) C_i^T R_i^-1 C_i
    info_maps: list | None = None         # per node C_i^T R_i^-1, (n, m_i)
    s_gamma: np.ndarray | None = None     # (N, n, n) fused observation matrices
    omega_eff: float = 1.0
    # freeze bookkeeping
    qws_frozen: bool = False
    _freeze_streak: int = 0
    _last_estimates: np.ndarray | None = None
    _cached_terms: tuple | None = None

    @property
    def batch(self) -> int:
        return self.x_post.shape[0]

    @property
    def node_axis(self) -> int:
        return self.x_post.shape[1]


def _fuse_batched(weights: np.ndarray, arr: np.ndarray, rounds: int) -> np.ndarray:
    for _ in range(rounds):
        arr = np.einsum("ij,bj...->bi...", weights, arr)
    return arr


def _mv(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Batched matrix @ vector with leading-dimension broadcasting."""
    return (mat @ vec[..., None])[..., 0]


def info_vectors(sensors: SensorSuite, measurements, batch: int | None = None,
                 info_maps=None) -> np.ndarray:
    """Convert raw per-node measurements to information vectors
    z_i = C_i^T R_i^-1 y_i, stacked (B, N, n)."""
    if info_maps is None:
        info_maps = [ci.T @ np.linalg.inv(ri)
                     for ci, ri in zip(sensors.c, sensors.r)]
    cols = []
    for i, y in enumerate(measurements):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.ndim == 1:
            y = y[None, :]
        cols.append(y @ info_maps[i].T)
    z = np.stack(cols, axis=1)
    if batch is not None and z.shape[0] == 1 and batch > 1:
        z = np.broadcast_to(z, (batch,) + z.shape[1:])
    return z


def init_filter_state(algorithm: str, plant: PlantModel, sensors: SensorSuite,
                      network: ConsensusNetwork, gamma: int,
                      batch: int = 1, options: FilterOptions | None = None,
                      rng: np.random.Generator | int | None = None) -> FilterState:
    """Set up a filter run: x_{i,0|0} = x0_mean, P_{i,0|0} = P0, plus the
    algorithm's auxiliary state (q rows / factor decompositions)."""
    if algorithm not in ALGORITHMS:
        raise FilterError(f"unknown algorithm {algorithm!r}; use one of {ALGORITHMS}")
    if gamma < 1:
        raise FilterError("gamma must be >= 1")
    if sensors.node_count != network.node_count:
        raise FilterError("sensor suite and network disagree on node count")
    options = options or FilterOptions()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = plant.dim
    n_nodes = 1 if algorithm == "ckf" else network.node_count

    x0 = np.broadcast_to(plant.x0_mean, (batch, n_nodes, n)).copy()
    per_trial_cov = algorithm in ("mcm-stoch", "mci-stoch")
    bp = batch if per_trial_cov else 1
    p0 = np.broadcast_to(plant.p0, (bp, n_nodes, n, n)).copy()

    infos = sensors.info_matrices()
    info_maps = [ci.T @ np.linalg.inv(ri) for ci, ri in zip(sensors.c, sensors.r)]
    lg = network.power(gamma)
    s_gamma = np.einsum("ij,jab->iab", lg, infos)

    st = FilterState(
        algorithm=algorithm, plant=plant, sensors=sensors, network=network,
        gamma=gamma, options=options,
        x_prior=x0.copy(), p_prior=p0.copy(), x_post=x0, p_post=p0,
        rng=rng, infos=infos, info_maps=info_maps, s_gamma=s_gamma,
    )
    if algorithm == "hcmci":
        st.omega_eff = float(options.omega) if options.omega is not None \
            else float(network.node_count)
        if st.omega_eff <= 0:
            raise FilterError("hcmci omega must be positive")
    if algorithm in ("mcm-direct", "mci-direct"):
        naive = None
        if options.naive_mode:
            naive = {i for i in range(network.node_count) if not np.any(infos[i])}
        st.aux = qws.direct_init(network, infos, rng_seed=rng,
                                 naive_mode=options.naive_mode, naive_set=naive)
    elif algorithm in ("mcm-stoch", "mci-stoch"):
        st.aux = qws.stochastic_init(infos, batch_shape=(batch,))
    return st


def _predict(st: FilterState) -> None:
    a, q = st.plant.a, st.plant.q
    st.x_prior = _mv(a, st.x_post)
    st.p_prior = symmetrize(a @ st.p_post @ a.T + q)


def _invert_cov(st: FilterState, m: np.ndarray) -> np.ndarray:
    # deterministic covariance paths keep the eigendecomposition-based
    # inverse; only the per-trial stochastic stacks take the fast LAPACK path
    if m.shape[0] == 1:
        return sym_inv(m)
    return spd_inv_batched(m)


def _qws_terms(st: FilterState) -> tuple[np.ndarray, np.ndarray]:
    """Advance the QWS estimator one time step and return (G, M) with
    G = C~^T U^+ C~ and M = C~^T U^+ (vector-term map)."""
    if st.qws_frozen and st._cached_terms is not None:
        return st._cached_terms
    ct = st.s_gamma
    if st.algorithm.endswith("direct"):
        ests = qws.direct_round(st.aux, st.network, st.gamma)
        updag = sym_pinv(ests, st.options.pinv_rel_tol)
        g = np.einsum("nji,njk,nkl->nil", ct, updag, ct)[None]
        m = np.einsum("nji,njk->nik", ct, updag)[None]
    else:
        upsilon = qws.stochastic_round(st.aux, st.network, st.gamma, st.rng)
        updag = sym_pinv(upsilon, st.options.pinv_rel_tol)
        g = np.einsum("nji,bnjk,nkl->bnil", ct, updag, ct)
        m = np.einsum("nji,bnjk->bnik", ct, updag)
        ests = upsilon
    if st.options.freeze_qws:
        if st._last_estimates is not None:
            delta = float(np.max(np.linalg.norm(
                ests - st._last_estimates, "fro", axis=(-2, -1))))
            st._freeze_streak = st._freeze_streak + 1 if delta < FREEZE_TOL else 0
            if st._freeze_streak >= FREEZE_STREAK:
                st.qws_frozen = True
        st._last_estimates = np.array(ests, copy=True)
        st._cached_terms = (g, m)
    return g, m


def _correct_local_info(st: FilterState, add_mat: np.ndarray,
                        add_vec: np.ndarray) -> None:
    """Measurement update of the local-information family (ckf/cm/mcm):
    P_post = (P_prior^-1 + add_mat)^-1, x_post = P_post (P^-1 x + add_vec)."""
    i_prior = _invert_cov(st, st.p_prior)
    i_post = i_prior + add_mat
    st.p_post = symmetrize(_invert_cov(st, i_post))
    st.x_post = _mv(st.p_post, _mv(i_prior, st.x_prior) + add_vec)


def _correct_fused_info(st: FilterState, v_fused: np.ndarray,
                        j_fused: np.ndarray, add_mat: np.ndarray,
                        add_vec: np.ndarray) -> None:
    """Measurement update of the fused-information family (ci/hcmci/mci)."""
    i_post = v_fused + add_mat
    st.p_post = symmetrize(_invert_cov(st, i_post))
    st.x_post = _mv(st.p_post, j_fused + add_vec)


def _step_ckf(st: FilterState, z: np.ndarray) -> None:
    zsum = z.sum(axis=1, keepdims=True)
    add = st.infos.sum(axis=0)[None, None]
    _correct_local_info(st, add, zsum)


def _step_cm(st: FilterState, z: np.ndarray) -> None:
    zf = _fuse_batched(st.network.weights, z, st.gamma)
    n_nodes = st.network.node_count
    _correct_local_info(st, n_nodes * st.s_gamma[None], n_nodes * zf)


def _step_ci_family(st: FilterState, z: np.ndarray) -> None:
    w = st.network.weights
    i_prior = _invert_cov(st, st.p_prior)
    j0 = _mv(i_prior, st.x_prior)
    zf = _fuse_batched(w, z, st.gamma)
    jf = _fuse_batched(w, j0, st.gamma)
    vf = _fuse_batched(w, i_prior, st.gamma)
    om = st.omega_eff
    _correct_fused_info(st, vf, jf, om * st.s_gamma[None], om * zf)


def _step_mcm(st: FilterState, z: np.ndarray) -> None:
    zf = _fuse_batched(st.network.weights, z, st.gamma)
    g, m = _qws_terms(st)
    _correct_local_info(st, g, _mv(m, zf))


def _step_mci(st: FilterState, z: np.ndarray) -> None:
    w = st.network.weights
    i_prior = _invert_cov(st, st.p_prior)
    j0 = _mv(i_prior, st.x_prior)
    zf = _fuse_batched(w, z, st.gamma)
    jf = _fuse_batched(w, j0, st.gamma)
    vf = _fuse_batched(w, i_prior, st.gamma)
    g, m = _qws_terms(st)
    _correct_fused_info(st, vf, jf, g, _mv(m, zf))


_STEPPERS = {
    "ckf": _step_ckf,
    "cm": _step_cm,
    "ci": _step_ci_family,
    "hcmci": _step_ci_family,
    "mcm-direct": _step_mcm,
    "mcm-stoch": _step_mcm,
    "mci-direct": _step_mci,
    "mci-stoch": _step_mci,
}


def filter_step(st: FilterState, measurements) -> FilterState:
    """Advance one time step. measurements is the per-node list of y_{i,k}
    (each (m_i,) or (B, m_i)), or a pre-stacked (B, N, n) information-vector
    array."""
    if isinstance(measurements, np.ndarray) and measurements.ndim == 3:
        z = measurements
    else:
        z = info_vectors(st.sensors, measurements, batch=st.batch,
                         info_maps=st.info_maps)
    if z.shape[0] != st.batch:
        if z.shape[0] == 1:
            z = np.broadcast_to(z, (st.batch,) + z.shape[1:])
        else:
            raise FilterError("measurement batch does not match state batch")
    st.k += 1
    _predict(st)
    _STEPPERS[st.algorithm](st, z)
    return st


def _named_step(tag):
    def step(st: FilterState, measurements) -> FilterState:
        if st.algorithm not in tag:
            raise FilterError(f"state runs {st.algorithm!r}, expected one of {tag}")
        return filter_step(st, measurements)
    return step


ckf_step = _named_step(("ckf",))
cm_step = _named_step(("cm",))
ci_step = _named_step(("ci",))
hcmci_step = _named_step(("hcmci",))
modified_cm_step = _named_step(("mcm-direct", "mcm-stoch"))
modified_ci_step = _named_step(("mci-direct", "mci-stoch"))


@dataclass
class FilterHistory:
    """Full per-step record of a single-trajectory run."""

    algorithm: str
    x_prior: np.ndarray   # (K, N, n)
    x_post: np.ndarray    # (K, N, n)
    p_prior: np.ndarray   # (K, N, n, n)
    p_post: np.ndarray    # (K, N, n, n)


def run_filter(algorithm: str, trajectory: Trajectory, network: ConsensusNetwork,
               gamma: int, plant: PlantModel, sensors: SensorSuite,
               options: FilterOptions | None = None,
               rng: np.random.Generator | int | None = None) -> FilterHistory:
    """Drive one filter over one trajectory; deterministic given the rng seed."""
    st = init_filter_state(algorithm, plant, sensors, network, gamma,
                           batch=1, options=options, rng=rng)
    steps = trajectory.steps
    n_nodes = st.node_axis
    n = plant.dim
    hist = FilterHistory(
        algorithm=algorithm,
        x_prior=np.empty((steps, n_nodes, n)),
        x_post=np.empty((steps, n_nodes, n)),
        p_prior=np.empty((steps, n_nodes, n, n)),
        p_post=np.empty((steps, n_nodes, n, n)),
    )
    for k in range(1, steps + 1):
        filter_step(st, trajectory.measurement_at(k))
        hist.x_prior[k - 1] = st.x_prior[0]
        hist.x_post[k - 1] = st.x_post[0]
        hist.p_prior[k - 1] = np.broadcast_to(st.p_prior[0], (n_nodes, n, n))
        hist.p_post[k - 1] = np.broadcast_to(st.p_post[0], (n_nodes, n, n))
    return hist
