"""Distributed computation of the quadratic weighted sum (QWS)

    X_tilde_i = sum_j (l_ij^(gamma))^2 X_j,

which is the exact covariance of a gamma-round fused measurement when
X_j = C_j^T R_j^{-1} C_j.

Two fully distributed estimators are provided:

* direct method — each node owns a random row q_i; a persistent consensus on
  N q_i^T q_i decouples the weighted factors, and the estimate
  U_i = u (W (x) I_n)^+ u^T converges deterministically at the consensus rate.
* stochastic method — each node fuses a fresh Gaussian sample Y_i^T theta per
  step and averages outer products; the running average follows a Wishart law.

`exact_qws` is the centralized oracle used only by tests and diagnostics.
Kronecker products with I_n are never materialized; the estimate is assembled
blockwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import check_symmetric, psd_sqrt, sym_pinv
from .network import ConsensusNetwork

__all__ = [
    "InfoFactor",
    "factor_info",
    "info_factors",
    "exact_qws",
    "exact_qws_oracle",
    "DirectState",
    "direct_init",
    "direct_round",
    "direct_consensus_round",
    "direct_estimates",
    "direct_error_bound",
    "DirectBound",
    "StochasticState",
    "stochastic_init",
    "stochastic_round",
    "stochastic_moment_predictions",
    "MomentPrediction",
    "pseudo_inverse",
    "QwsError",
]

REDRAW_LIMIT = 16

# Numerical full-rank threshold for the stacked q rows: the consensus matrix
# W inherits cond(Q)^2, and the estimate's floating-point noise floor is
# ~eps * cond(W), so a draw with sigma_min below this fraction of sigma_max
# would drown the late-k error bound in roundoff. Redrawing costs nothing
# (any full-rank Q is valid) and keeps the noise floor near 1e-12.
RANK_RTOL = 1e-2


class QwsError(RuntimeError):
    pass


def pseudo_inverse(m: np.ndarray, rel_tol: float | None = None) -> np.ndarray:
    """Symmetric pseudoinverse; eigenvalues below rel_tol * lambda_max count as
    zero (default rel_tol = 1e-10 * n)."""
    return sym_pinv(m, rel_tol)


def factor_info(x: np.ndarray) -> np.ndarray:
    """Factor a PSD matrix as X = Y^T Y with Y the symmetric PSD square root.

    Y is always n x n, even when rank(X) < n, so fused quantities keep a
    uniform dimension across nodes.
    """
    return psd_sqrt(x)


@dataclass(frozen=True)
class InfoFactor:
    """A node's PSD information matrix X together with a factor Y^T Y = X."""

    index: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        err = np.max(np.abs(self.y.T @ self.y - self.x))
        if err > 1e-10 * max(1.0, float(np.max(np.abs(self.x)))):
            raise QwsError(f"factor mismatch at node {self.index}: |Y^T Y - X| = {err:.3e}")


def info_factors(xs: np.ndarray) -> list[InfoFactor]:
    xs = np.asarray(xs, dtype=float)
    return [InfoFactor(i, xs[i], factor_info(xs[i])) for i in range(xs.shape[0])]


def _as_xy_stacks(factors) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(factors, np.ndarray):
        factors = info_factors(factors)
    xs = np.stack([f.x for f in factors])
    ys = np.stack([f.y for f in factors])
    return xs, ys


def exact_qws(network: ConsensusNetwork, gamma: int, xs: np.ndarray) -> np.ndarray:
    """Centralized ground truth: X_tilde_i for every node, (N, n, n)."""
    if gamma < 1:
        raise QwsError("gamma must be >= 1")
    lg = network.power(gamma)
    return np.einsum("ij,jab->iab", lg**2, np.asarray(xs, dtype=float))


def exact_qws_oracle(network: ConsensusNetwork, gamma: int, xs: np.ndarray,
                     i: int) -> np.ndarray:
    return exact_qws(network, gamma, xs)[i]


# ---------------------------------------------------------------------------
# direct method
# ---------------------------------------------------------------------------

@dataclass
class DirectState:
    """Stacked per-node state of the direct method.

    W persists across time steps (its consensus count only grows), while u is
    re-initialized from the factors at the start of every time step.
    """

    q: np.ndarray            # (N, S) random rows; zero rows for naive nodes
    w: np.ndarray            # (N, S, S) running consensus on N q^T q
    u: np.ndarray | None     # (N, S, n, n) fused factor blocks, None before first fuse
    y: np.ndarray            # (N, n, n) factors
    k: int = 0               # consensus rounds applied to w since init
    u_rounds: int = 0        # fusion rounds applied to the current u
    active: np.ndarray = field(default=None)  # indices of non-naive nodes

    @property
    def node_count(self) -> int:
        return self.q.shape[0]


def direct_init(network: ConsensusNetwork, factors, rng_seed=None,
                naive_mode: bool = False, naive_set=None) -> DirectState:
    """Draw the q rows ([q_i]_j ~ N(0,1)) and start the persistent consensus
    W_i = N q_i^T q_i.

    In naive mode the rows of nodes in naive_set (those with X_i = 0) are zero
    and the row width shrinks to S = #non-naive nodes; only the stacked active
    rows need full rank.
    """
    xs, ys = _as_xy_stacks(factors)
    n_nodes = network.node_count
    if xs.shape[0] != n_nodes:
        raise QwsError("one factor per node required")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)

    if naive_mode:
        if naive_set is None:
            naive_set = {i for i in range(n_nodes) if not np.any(xs[i])}
        naive_set = set(int(i) for i in naive_set)
        for i in naive_set:
            if np.any(xs[i]):
                raise QwsError(f"node {i} marked naive but has X != 0")
        active = np.array(sorted(set(range(n_nodes)) - naive_set), dtype=int)
    else:
        active = np.arange(n_nodes)
    width = active.size
    if width == 0:
        raise QwsError("no active nodes")

    for _ in range(REDRAW_LIMIT):
        q = np.zeros((n_nodes, width))
        q[active] = rng.standard_normal((width, width))
        sv = np.linalg.svd(q[active], compute_uv=False)
        if sv[-1] > RANK_RTOL * sv[0]:
            break
    else:
        raise QwsError("rank-deficient Q after redraw limit")

    w = n_nodes * np.einsum("ij,ik->ijk", q, q)
    return DirectState(q=q, w=w, u=None, y=ys, active=active)


def _refresh_u(state: DirectState) -> None:
    # u block (i, j) = [q_i]_j * Y_i^T
    state.u = np.einsum("ij,iba->ijab", state.q, state.y)
    state.u_rounds = 0


def _fuse(weights: np.ndarray, arr: np.ndarray) -> np.ndarray:
    return np.einsum("ij,j...->i...", weights, arr)


def direct_consensus_round(state: DirectState, network: ConsensusNetwork,
                           fuse_u: bool = False) -> None:
    """One synchronous neighbour-averaging round on W (and optionally u)."""
    state.w = _fuse(network.weights, state.w)
    state.k += 1
    if fuse_u:
        if state.u is None:
            raise QwsError("u not initialized; call direct_round or _refresh_u")
        state.u = _fuse(network.weights, state.u)
        state.u_rounds += 1


def direct_estimates(state: DirectState, rel_tol: float | None = None) -> np.ndarray:
    """U_i = u (W_i (x) I_n)^+ u^T assembled blockwise, (N, n, n)."""
    if state.u is None:
        raise QwsError("u not initialized")
    wp = sym_pinv(state.w, rel_tol)
    return np.einsum("ijab,ijs,iscb->iac", state.u, wp, state.u)


def direct_round(state: DirectState, network: ConsensusNetwork,
                 gamma: int) -> np.ndarray:
    """One filter time step: re-initialize u, fuse u and W together for gamma
    sub-rounds (W continues from its previous value), and return the per-node
    estimates U_{i,k}."""
    if gamma < 1:
        raise QwsError("gamma must be >= 1")
    _refresh_u(state)
    for _ in range(gamma):
        direct_consensus_round(state, network, fuse_u=True)
    return direct_estimates(state)


@dataclass(frozen=True)
class DirectBound:
    alpha_exact: np.ndarray        # (N,) max over gamma-neighbours of |1/(N l^k) - 1|
    alpha_spectral: float | None   # N|lam2|^k / (1 - N|lam2|^k), absent if >= 1
    k: int
    gamma: int


def direct_error_bound(network: ConsensusNetwork, gamma: int, k: int) -> DirectBound:
    """Both forms of the direct-method error bound at consensus count k.

    The spectral form is undefined (returned as None) while N |lambda2|^k >= 1;
    on a complete graph lambda2 = 0 and both forms vanish.
    """
    if k < gamma:
        raise QwsError("bound requires k >= gamma")
    n = network.node_count
    lk = network.power(k)
    lg = network.power(gamma)
    alpha_exact = np.empty(n)
    for i in range(n):
        nbrs = lg[i] > 0.0
        alpha_exact[i] = np.max(np.abs(1.0 / (n * lk[i, nbrs]) - 1.0))
    lam2 = network.lambda2()
    decay = n * lam2**k
    alpha_spectral = decay / (1.0 - decay) if decay < 1.0 else None
    return DirectBound(alpha_exact=alpha_exact, alpha_spectral=alpha_spectral,
                       k=k, gamma=gamma)


# ---------------------------------------------------------------------------
# stochastic method
# ---------------------------------------------------------------------------

@dataclass
class StochasticState:
    """Running average Upsilon_i of fused-sample outer products.

    Supports leading batch dimensions: upsilon has shape (..., N, n, n) and
    each batch entry evolves on its own sample path.
    """

    upsilon: np.ndarray      # (..., N, n, n)
    y: np.ndarray            # (N, n, n) factors
    k: int = 0               # samples folded into the average
    last_sample: np.ndarray | None = None  # (..., N, n) most recent fused sample


def stochastic_init(factors, batch_shape: tuple = ()) -> StochasticState:
    _, ys = _as_xy_stacks(factors)
    n_nodes, n = ys.shape[0], ys.shape[1]
    upsilon = np.zeros(batch_shape + (n_nodes, n, n))
    return StochasticState(upsilon=upsilon, y=ys)


def stochastic_round(state: StochasticState, network: ConsensusNetwork,
                     gamma: int, rng: np.random.Generator) -> np.ndarray:
    """Draw theta_i ~ N(0, I_n) per node, fuse Y_i^T theta_i for gamma rounds,
    and fold the outer product into the running average:
    Upsilon_k = (k-1)/k Upsilon_{k-1} + (1/k) v v^T."""
    if gamma < 1:
        raise QwsError("gamma must be >= 1")
    lead = state.upsilon.shape[:-3]
    n_nodes, n = state.y.shape[0], state.y.shape[1]
    theta = rng.standard_normal(lead + (n_nodes, n))
    v = np.einsum("nij,...ni->...nj", state.y, theta)
    for _ in range(gamma):
        v = np.einsum("ij,...jd->...id", network.weights, v)
    state.k += 1
    outer = np.einsum("...a,...b->...ab", v, v)
    state.upsilon = ((state.k - 1) * state.upsilon + outer) / state.k
    state.last_sample = v
    return state.upsilon


def _psd_rank(x: np.ndarray, rel_tol: float = 1e-10) -> int:
    w = np.linalg.eigvalsh(x)
    wmax = float(np.max(np.abs(w)))
    if wmax == 0.0:
        return 0
    return int(np.sum(w > rel_tol * wmax * x.shape[-1]))


@dataclass(frozen=True)
class MomentPrediction:
    inv_mean_scale: float   # E[Upsilon^+] = scale * X^+
    mse_forward: float      # E |Upsilon - X|_F^2
    mse_inverse: float      # E |Upsilon^+ - X^+|_F^2
    rank: int


def stochastic_moment_predictions(x_tilde: np.ndarray, k: int) -> MomentPrediction:
    """Closed-form moments of the running average after k samples.

    Valid for k > n + 3 (degrees of freedom of the inverse-Wishart moments).
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    check_symmetric(x_tilde, name="x_tilde")
    n = x_tilde.shape[-1]
    if k <= n + 3:
        raise QwsError(f"moment formulas require k > n+3 (got k={k}, n={n})")
    r = _psd_rank(x_tilde)
    tr = float(np.trace(x_tilde))
    tr2 = float(np.trace(x_tilde @ x_tilde))
    xp = sym_pinv(x_tilde)
    trp = float(np.trace(xp))
    trp2 = float(np.trace(xp @ xp))
    denom = (k - r - 3) * (k - r - 1) * (k - r)
    a1 = (k**2 + k * (r**2 + 2 * r + 3) - (r**3 + 4 * r**2 + 3 * r)) / denom
    a2 = k**2 / denom
    return MomentPrediction(
        inv_mean_scale=k / (k - r - 1),
        mse_forward=(tr2 + tr**2) / k,
        mse_inverse=a1 * trp2 + a2 * trp**2,
        rank=r,
    )
