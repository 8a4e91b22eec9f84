"""Sensor-network topologies and doubly stochastic consensus weight matrices.

Node indices are 0-based internally; the JSON graph format uses 1-based
indices. Weight matrices are Metropolis by default: l_ij = 1/(1+max(deg_i,
deg_j)) on edges, with the diagonal absorbing the remainder, which makes L
symmetric and doubly stochastic using only local degree information.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConsensusNetwork",
    "NetworkError",
    "metropolis_weights",
    "blend_weights",
    "build_random_geometric",
    "build_named_topology",
    "consensus_row",
    "spectral_data",
    "SpectralData",
    "network_to_json",
    "network_from_json",
]

STOCHASTIC_TOL = 1e-12
GEOMETRIC_RETRY_LIMIT = 100


class NetworkError(ValueError):
    """Raised for invalid topologies or weight matrices."""


def _normalize_edges(edges, n: int) -> frozenset[tuple[int, int]]:
    out = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            continue
        if not (0 <= i < n and 0 <= j < n):
            raise NetworkError(f"edge ({i},{j}) out of range for {n} nodes")
        out.add((min(i, j), max(i, j)))
    return frozenset(out)


def metropolis_weights(edges, node_count: int) -> np.ndarray:
    """Doubly stochastic Metropolis weight matrix for an undirected edge set."""
    edges = _normalize_edges(edges, node_count)
    deg = np.zeros(node_count, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    w = np.zeros((node_count, node_count))
    for i, j in edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return w


def blend_weights(weights: np.ndarray, eta: float) -> np.ndarray:
    """Return eta*I + (1-eta)*L; shifts confidence toward each node's own state."""
    if not 0.0 <= eta < 1.0:
        raise NetworkError(f"eta must lie in [0,1), got {eta}")
    weights = np.asarray(weights, dtype=float)
    out = eta * np.eye(weights.shape[0]) + (1.0 - eta) * weights
    _check_doubly_stochastic(out)
    return out


def _check_doubly_stochastic(w: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    n = w.shape[0]
    ones = np.ones(n)
    if np.max(np.abs(w @ ones - ones)) > tol or np.max(np.abs(ones @ w - ones)) > tol:
        raise NetworkError("weight matrix is not doubly stochastic within tolerance")
    if np.min(w) < -tol:
        raise NetworkError("weight matrix has negative entries")
    if np.max(np.abs(w - w.T)) > tol:
        raise NetworkError("weight matrix is not symmetric")


def _bfs_distances(adj: list[list[int]], start: int) -> list[int]:
    dist = [-1] * len(adj)
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@dataclass
class ConsensusNetwork:
    """Undirected weighted sensor network with a doubly stochastic weight matrix.

    Immutable after construction apart from the matrix-power cache, which is
    only an acceleration structure; pre-populate it (via ``power``) before
    sharing across threads.
    """

    node_count: int
    edges: frozenset[tuple[int, int]]
    weights: np.ndarray
    _powers: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.node_count, self.node_count):
            raise NetworkError("weight matrix shape does not match node count")
        self.edges = _normalize_edges(self.edges, self.node_count)
        _check_doubly_stochastic(self.weights)
        if np.any(np.diag(self.weights) <= 0.0):
            raise NetworkError("diagonal weights must be strictly positive")
        for i in range(self.node_count):
            for j in range(i + 1, self.node_count):
                on_edge = (i, j) in self.edges
                if on_edge != (self.weights[i, j] > 0.0):
                    raise NetworkError(
                        f"weight/edge mismatch at ({i},{j}): "
                        f"edge={on_edge}, weight={self.weights[i, j]}"
                    )

    @property
    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(self.node_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def power(self, k: int) -> np.ndarray:
        """L^k, cached; computed by repeated multiplication (k stays small)."""
        if k < 0:
            raise NetworkError("matrix power exponent must be >= 0")
        if k not in self._powers:
            if k == 0:
                self._powers[0] = np.eye(self.node_count)
            elif k == 1:
                self._powers[1] = self.weights
            else:
                self._powers[k] = self.power(k - 1) @ self.weights
        return self._powers[k]

    def consensus_row(self, i: int, k: int) -> np.ndarray:
        """Row i of L^k: the weights l_ij^(k) node i effectively applies."""
        return self.power(k)[i]

    def is_connected(self) -> bool:
        dist = _bfs_distances(self.adjacency, 0)
        return all(d >= 0 for d in dist)

    def diameter(self) -> int:
        adj = self.adjacency
        worst = 0
        for s in range(self.node_count):
            dist = _bfs_distances(adj, s)
            if any(d < 0 for d in dist):
                raise NetworkError("diameter undefined: graph is disconnected")
            worst = max(worst, max(dist))
        return worst

    def lambda2(self) -> float:
        """Second-largest absolute eigenvalue of L."""
        eig = np.sort(np.abs(np.linalg.eigvalsh(self.weights)))
        return float(eig[-2]) if self.node_count > 1 else 0.0

    def with_weights(self, weights: np.ndarray) -> "ConsensusNetwork":
        return ConsensusNetwork(self.node_count, self.edges, weights)

    def blended(self, eta: float) -> "ConsensusNetwork":
        if eta == 0.0:
            return self
        return self.with_weights(blend_weights(self.weights, eta))


def consensus_row(network: ConsensusNetwork, i: int, k: int) -> np.ndarray:
    return network.consensus_row(i, k)


@dataclass(frozen=True)
class SpectralData:
    lambda2: float
    diameter: int | None
    connected: bool


def spectral_data(network: ConsensusNetwork) -> SpectralData:
    """lambda2, BFS diameter, and connectivity; the spectral and BFS notions of
    connectivity must agree (simple eigenvalue 1 iff connected)."""
    connected = network.is_connected()
    lam2 = network.lambda2()
    spectral_connected = lam2 < 1.0 - 1e-9
    if connected != spectral_connected:
        raise NetworkError(
            f"connectivity mismatch: BFS says {connected}, lambda2={lam2:.12f}"
        )
    diam = network.diameter() if connected else None
    return SpectralData(lambda2=lam2, diameter=diam, connected=connected)


def build_random_geometric(
    node_count: int,
    side_length: float,
    comm_radius: float,
    rng_seed: int,
    max_retries: int = GEOMETRIC_RETRY_LIMIT,
) -> ConsensusNetwork:
    """Place nodes uniformly in a square, connect pairs within comm_radius,
    and regenerate until connected (bounded retries)."""
    if node_count < 2:
        raise NetworkError("node_count must be >= 2")
    if side_length <= 0 or comm_radius <= 0:
        raise NetworkError("side_length and comm_radius must be positive")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_retries):
        pts = rng.uniform(0.0, side_length, size=(node_count, 2))
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        edges = {
            (i, j)
            for i in range(node_count)
            for j in range(i + 1, node_count)
            if d2[i, j] <= comm_radius**2
        }
        net = ConsensusNetwork(node_count, frozenset(edges),
                               metropolis_weights(edges, node_count))
        if net.is_connected():
            return net
    raise NetworkError(f"disconnected after max retries ({max_retries})")


def _ring_lattice_edges(n: int, half_degree: int) -> set[tuple[int, int]]:
    edges = set()
    for i in range(n):
        for step in range(1, half_degree + 1):
            j = (i + step) % n
            edges.add((min(i, j), max(i, j)))
    return edges


def _small_world_edges(n: int, rng: np.random.Generator,
                       half_degree: int = 2, rewire_p: float = 0.2) -> set:
    """Watts-Strogatz rewiring of a degree-4 ring lattice."""
    edges = _ring_lattice_edges(n, half_degree)
    for i in range(n):
        for step in range(1, half_degree + 1):
            j = (i + step) % n
            e = (min(i, j), max(i, j))
            if e not in edges or rng.random() >= rewire_p:
                continue
            candidates = [
                t for t in range(n)
                if t != i and (min(i, t), max(i, t)) not in edges
            ]
            if candidates:
                t = int(rng.choice(candidates))
                edges.remove(e)
                edges.add((min(i, t), max(i, t)))
    return edges


def build_named_topology(kind: str, node_count: int,
                         rng_seed: int | None = None) -> ConsensusNetwork:
    """line | circle | small_world | complete, with Metropolis weights."""
    if node_count < 2:
        raise NetworkError("node_count must be >= 2")
    n = node_count
    if kind == "line":
        edges = {(i, i + 1) for i in range(n - 1)}
    elif kind == "circle":
        edges = {(i, (i + 1) % n) for i in range(n)}
        edges = {(min(i, j), max(i, j)) for i, j in edges}
    elif kind == "complete":
        edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
    elif kind == "small_world":
        rng = np.random.default_rng(rng_seed)
        for _ in range(GEOMETRIC_RETRY_LIMIT):
            edges = _small_world_edges(n, rng)
            net = ConsensusNetwork(n, frozenset(edges), metropolis_weights(edges, n))
            if net.is_connected():
                return net
        raise NetworkError("small_world generator failed to produce a connected graph")
    else:
        raise NetworkError(f"unknown topology kind: {kind!r}")
    return ConsensusNetwork(n, frozenset(edges), metropolis_weights(edges, n))


def network_to_json(network: ConsensusNetwork, weights: str | None = "explicit",
                    eta: float = 0.0) -> str:
    """Serialize with 1-based node indices. weights="metropolis" stores the
    rule instead of the matrix."""
    doc: dict = {
        "n": network.node_count,
        "edges": sorted([i + 1, j + 1] for i, j in network.edges),
        "eta": eta,
    }
    if weights == "metropolis":
        doc["weights"] = "metropolis"
    else:
        doc["weights"] = network.weights.tolist()
    return json.dumps(doc, indent=2)


def network_from_json(text: str) -> ConsensusNetwork:
    doc = json.loads(text)
    n = int(doc["n"])
    edges = {(int(i) - 1, int(j) - 1) for i, j in doc["edges"]}
    spec = doc.get("weights", "metropolis")
    if spec == "metropolis":
        weights = metropolis_weights(edges, n)
    else:
        weights = np.asarray(spec, dtype=float)
    net = ConsensusNetwork(n, frozenset(edges), weights)
    eta = float(doc.get("eta", 0.0))
    return net.blended(eta)
