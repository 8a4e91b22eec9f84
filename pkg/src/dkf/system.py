"""LTI plant and heterogeneous sensor suite: ground-truth trajectories and
noisy measurements.

The tracking benchmark uses a 4-state constant-velocity target
[p_x, v_x, p_y, v_y] with three sensor types: type 1 observes x position,
type 2 observes y position, type 3 has no sensing (zero observation row,
large nominal noise). Collective observability needs at least one node of
each of types 1 and 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import check_symmetric, is_observable, min_eig_sym, psd_sqrt

__all__ = [
    "PlantModel",
    "SensorSuite",
    "Trajectory",
    "ModelError",
    "make_tracking_model",
    "make_tracking_sensors",
    "sample_gaussian",
    "simulate",
    "TRACKING_X0_MEAN",
    "TRACKING_P0_SCALE",
]

TRACKING_X0_MEAN = (150.0, 0.0, 150.0, 0.0)
TRACKING_P0_SCALE = 100.0

SENSOR_TYPES = {
    1: (np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([[0.01]])),
    2: (np.array([[0.0, 0.0, 1.0, 0.0]]), np.array([[0.01]])),
    3: (np.zeros((1, 4)), np.array([[1e6]])),
}


class ModelError(ValueError):
    """Raised for invalid plant or sensor configurations."""


@dataclass
class PlantModel:
    """LTI pair (A, Q) with the initial-state prior N(x0_mean, P0)."""

    a: np.ndarray
    q: np.ndarray
    x0_mean: np.ndarray
    p0: np.ndarray
    a_invertible: bool = field(init=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.x0_mean = np.asarray(self.x0_mean, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        n = self.a.shape[0]
        if self.a.shape != (n, n) or self.q.shape != (n, n) or self.p0.shape != (n, n):
            raise ModelError("A, Q, P0 must be square with matching dimensions")
        if self.x0_mean.shape != (n,):
            raise ModelError("x0_mean dimension mismatch")
        check_symmetric(self.q, name="Q")
        check_symmetric(self.p0, name="P0")
        if min_eig_sym(self.q) <= 0:
            raise ModelError("Q must be positive definite")
        if min_eig_sym(self.p0) <= 0:
            raise ModelError("P0 must be positive definite")
        # HCRE theory needs invertible A; recorded so solvers can check it.
        self.a_invertible = bool(abs(np.linalg.det(self.a)) > 1e-12)

    @property
    def dim(self) -> int:
        return self.a.shape[0]


@dataclass
class SensorSuite:
    """Per-node observation matrices C_i and SPD noise covariances R_i."""

    c: list[np.ndarray]
    r: list[np.ndarray]
    node_types: list[int] | None = None

    def __post_init__(self):
        if len(self.c) != len(self.r):
            raise ModelError("C and R lists must have equal length")
        self.c = [np.atleast_2d(np.asarray(ci, dtype=float)) for ci in self.c]
        self.r = [np.atleast_2d(np.asarray(ri, dtype=float)) for ri in self.r]
        n = self.c[0].shape[1]
        for i, (ci, ri) in enumerate(zip(self.c, self.r)):
            if ci.shape[1] != n:
                raise ModelError(f"C_{i} state dimension mismatch")
            if ri.shape != (ci.shape[0], ci.shape[0]):
                raise ModelError(f"R_{i} dimension mismatch with C_{i}")
            check_symmetric(ri, name=f"R_{i}")
            if min_eig_sym(ri) <= 0:
                raise ModelError(f"R_{i} must be positive definite")

    @property
    def node_count(self) -> int:
        return len(self.c)

    @property
    def state_dim(self) -> int:
        return self.c[0].shape[1]

    def stacked_c(self) -> np.ndarray:
        return np.vstack(self.c)

    def info_matrices(self) -> np.ndarray:
        """Per-node C_i^T R_i^{-1} C_i, stacked (N, n, n)."""
        return np.stack([ci.T @ np.linalg.inv(ri) @ ci
                         for ci, ri in zip(self.c, self.r)])

    def collectively_observable(self, a: np.ndarray) -> bool:
        return is_observable(a, self.stacked_c())


@dataclass
class Trajectory:
    """Ground truth states x_0..x_K plus measurements y_{i,k} for k=1..K."""

    states: np.ndarray                 # (K+1, n)
    measurements: list[np.ndarray]     # per node: (K, m_i)
    rng_seed: int | None

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def measurement_at(self, k: int) -> list[np.ndarray]:
        """Measurements of step k (1-based, matching x_k)."""
        return [y[k - 1] for y in self.measurements]


def make_tracking_model(
    sampling_interval: float,
    x0_mean=TRACKING_X0_MEAN,
    p0_scale: float = TRACKING_P0_SCALE,
) -> PlantModel:
    """Constant-velocity tracking plant with block A = diag(a, a),
    a = [[1, T], [0, 1]], and Q assembled from G = [[T^3/3, T^2/2], [T^2/2, T]]
    as [[G, G/2], [G/2, G]]."""
    if sampling_interval <= 0:
        raise ModelError("sampling interval must be positive")
    t = float(sampling_interval)
    a_block = np.array([[1.0, t], [0.0, 1.0]])
    a = np.block([
        [a_block, np.zeros((2, 2))],
        [np.zeros((2, 2)), a_block],
    ])
    g = np.array([[t**3 / 3.0, t**2 / 2.0], [t**2 / 2.0, t]])
    q = np.block([[g, 0.5 * g], [0.5 * g, g]])
    return PlantModel(a=a, q=q, x0_mean=np.asarray(x0_mean, dtype=float),
                      p0=p0_scale * np.eye(4))


def make_tracking_sensors(type_assignment) -> SensorSuite:
    """Sensor suite for the tracking plant from a per-node list of types 1/2/3."""
    types = [int(t) for t in type_assignment]
    if any(t not in SENSOR_TYPES for t in types):
        raise ModelError(f"sensor types must be in {sorted(SENSOR_TYPES)}")
    c = [SENSOR_TYPES[t][0].copy() for t in types]
    r = [SENSOR_TYPES[t][1].copy() for t in types]
    suite = SensorSuite(c=c, r=r, node_types=types)
    a = make_tracking_model(0.1).a
    if not suite.collectively_observable(a):
        raise ModelError("collectively unobservable: need at least one node "
                         "each of types 1 and 2")
    return suite


def cycle_types(node_count: int, order=(1, 2, 3)) -> list[int]:
    """Default node-type assignment: cycle 1,2,3 across node indices."""
    return [order[i % len(order)] for i in range(node_count)]


def sample_gaussian(mean: np.ndarray, cov: np.ndarray,
                    rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov) via the symmetric PSD square root, so
    rank-deficient covariances are supported (degenerate normals)."""
    mean = np.asarray(mean, dtype=float)
    factor = psd_sqrt(cov)
    shape = (mean.shape[0],) if size is None else (size, mean.shape[0])
    z = rng.standard_normal(shape)
    return mean + z @ factor.T


def simulate(plant: PlantModel, sensors: SensorSuite, steps: int,
             rng_seed: int) -> Trajectory:
    """Generate one trajectory: x_0 ~ N(x0_mean, P0), x_{k+1} = A x_k + w_k,
    y_{i,k} = C_i x_k + v_{i,k}; all draws come from one seeded generator, so
    the result is a pure function of (plant, sensors, steps, seed)."""
    if steps < 1:
        raise ModelError("steps must be >= 1")
    if sensors.state_dim != plant.dim:
        raise ModelError("sensor and plant state dimensions differ")
    rng = np.random.default_rng(rng_seed)
    n = plant.dim
    x = np.empty((steps + 1, n))
    x[0] = sample_gaussian(plant.x0_mean, plant.p0, rng)
    w = rng.standard_normal((steps, n)) @ psd_sqrt(plant.q).T
    for k in range(steps):
        x[k + 1] = plant.a @ x[k] + w[k]
    measurements = []
    for ci, ri in zip(sensors.c, sensors.r):
        v = rng.standard_normal((steps, ci.shape[0])) @ psd_sqrt(ri).T
        measurements.append(x[1:] @ ci.T + v)
    return Trajectory(states=x, measurements=measurements, rng_seed=rng_seed)
