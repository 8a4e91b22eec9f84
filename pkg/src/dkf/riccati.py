"""Riccati-type fixed points governing steady-state filter performance.

* DARE  P = A (P^-1 + C^T R^-1 C)^-1 A^T + Q, solved by its recursion (DARR);
* HCRE  P_i = A (sum_j w_ij P_j^-1 + C_i^T R_i^-1 C_i)^-1 A^T + Q, solved by
  synchronous sweeps (HCRR);
* the block Lyapunov equation for the actual steady error covariance of the
  modified consensus-on-information filter;
* the SPD surrogate R_breve with C~^T R_breve^-1 C~ = C~^T R~^+ C~, which lets
  the solvers treat a rank-deficient fused covariance as a positive one.

All solvers iterate to a 1e-11 Frobenius step norm by default and verify the
defining fixed point to 10x the tolerance before returning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    is_observable,
    min_eig_sym,
    spectral_radius,
    sym_inv,
    sym_pinv,
    symmetrize,
)
from .system import PlantModel, SensorSuite

__all__ = [
    "RiccatiError",
    "DareProblem",
    "HcreProblem",
    "solve_dare",
    "solve_dare_info",
    "solve_hcre",
    "solve_hcre_info",
    "dare_residual",
    "breve_r",
    "ckf_steady_prior",
    "steady_modified_cm",
    "steady_modified_ci",
    "SteadyStatePrediction",
    "fused_observation",
    "property_order_preservation",
    "property_convergent_parameter",
    "OrderPreservationReport",
    "ConvergentParameterReport",
]

DEFAULT_TOL = 1e-11
MAX_ITER = 100_000


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True)
class DareProblem:
    a: np.ndarray
    c: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def info_term(self) -> np.ndarray:
        return self.c.T @ np.linalg.inv(self.r) @ self.c


@dataclass(frozen=True)
class HcreProblem:
    a: np.ndarray
    c: list[np.ndarray]
    r: list[np.ndarray]
    weights: np.ndarray  # (N, N) row-stochastic coupling weights
    q: np.ndarray

    def info_terms(self) -> np.ndarray:
        return np.stack([np.atleast_2d(ci).T @ np.linalg.inv(np.atleast_2d(ri))
                         @ np.atleast_2d(ci)
                         for ci, ri in zip(self.c, self.r)])


def solve_dare_info(a: np.ndarray, omega: np.ndarray, q: np.ndarray,
                    tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER,
                    p0: np.ndarray | None = None) -> np.ndarray:
    """Fixed point of P = A (P^-1 + Omega)^-1 A^T + Q by plain iteration,
    independent of the SPD start P0."""
    n = a.shape[0]
    p = np.eye(n) if p0 is None else np.asarray(p0, dtype=float)
    for _ in range(max_iter):
        p_next = symmetrize(a @ sym_inv(sym_inv(p) + omega) @ a.T + q)
        if np.linalg.norm(p_next - p, "fro") < tol:
            p = p_next
            break
        p = p_next
    else:
        raise RiccatiError(f"no convergence within max_iter={max_iter}")
    resid = np.linalg.norm(p - (a @ sym_inv(sym_inv(p) + omega) @ a.T + q), "fro")
    if resid > 10 * tol:
        raise RiccatiError(f"fixed-point residual {resid:.3e} exceeds 10*tol")
    return p


def solve_dare(problem: DareProblem, tol: float = DEFAULT_TOL,
               max_iter: int = MAX_ITER, p0: np.ndarray | None = None) -> np.ndarray:
    if not is_observable(problem.a, problem.c):
        raise RiccatiError("(A, C) must be observable")
    return solve_dare_info(problem.a, problem.info_term(), problem.q,
                           tol=tol, max_iter=max_iter, p0=p0)


def dare_residual(p: np.ndarray, a: np.ndarray, omega: np.ndarray,
                  q: np.ndarray) -> float:
    return float(np.linalg.norm(p - (a @ sym_inv(sym_inv(p) + omega) @ a.T + q), "fro"))


def solve_hcre_info(a: np.ndarray, omegas: np.ndarray, q: np.ndarray,
                    weights: np.ndarray, tol: float = DEFAULT_TOL,
                    max_iter: int = MAX_ITER,
                    p0: np.ndarray | None = None) -> np.ndarray:
    """Synchronous HCRR sweeps for the N coupled fixed points, (N, n, n)."""
    n_nodes = omegas.shape[0]
    n = a.shape[0]
    if abs(np.linalg.det(a)) <= 1e-12:
        raise RiccatiError("HCRE theory requires invertible A")
    p = np.broadcast_to(np.eye(n), (n_nodes, n, n)).copy() if p0 is None \
        else np.array(p0, dtype=float, copy=True)
    for _ in range(max_iter):
        p_inv = sym_inv(p)
        mixed = np.einsum("ij,jab->iab", weights, p_inv)
        p_next = symmetrize(
            np.einsum("ab,ibc,dc->iad", a, sym_inv(mixed + omegas), a) + q)
        step = np.max(np.linalg.norm(p_next - p, "fro", axis=(1, 2)))
        p = p_next
        if step < tol:
            break
    else:
        raise RiccatiError(f"no convergence within max_iter={max_iter}")
    p_inv = sym_inv(p)
    mixed = np.einsum("ij,jab->iab", weights, p_inv)
    resid = np.max(np.linalg.norm(
        p - (np.einsum("ab,ibc,dc->iad", a, sym_inv(mixed + omegas), a) + q),
        "fro", axis=(1, 2)))
    if resid > 10 * tol:
        raise RiccatiError(f"HCRE residual {resid:.3e} exceeds 10*tol")
    return p


def solve_hcre(problem: HcreProblem, tol: float = DEFAULT_TOL,
               max_iter: int = MAX_ITER, p0: np.ndarray | None = None) -> np.ndarray:
    if not is_observable(problem.a, np.vstack([np.atleast_2d(c) for c in problem.c])):
        raise RiccatiError("(A, col(C_i)) must be collectively observable")
    return solve_hcre_info(problem.a, problem.info_terms(), problem.q,
                           problem.weights, tol=tol, max_iter=max_iter, p0=p0)


def breve_r(c_tilde: np.ndarray, r_tilde: np.ndarray,
            rel_tol: float = 1e-10, check_tol: float = 1e-9) -> np.ndarray:
    """SPD surrogate with C~^T R_breve^-1 C~ = C~^T R~^+ C~.

    Built from the eigendecomposition of R~ (the right singular basis of any
    factor F with F^T F = R~): positive eigenvalues are kept, the null space
    is padded with ones. Requires range(C~) within range(R~), which the fused
    measurement structure guarantees; violated ranges are flagged.
    """
    r_tilde = symmetrize(np.asarray(r_tilde, dtype=float))
    c_tilde = np.asarray(c_tilde, dtype=float)
    w, v = np.linalg.eigh(r_tilde)
    wmax = float(np.max(np.abs(w))) if w.size else 0.0
    if wmax == 0.0:
        if np.max(np.abs(c_tilde)) > check_tol:
            raise RiccatiError("inconsistent ranges: R~ = 0 but C~ != 0")
        return np.eye(r_tilde.shape[0])
    pos = w > rel_tol * wmax * r_tilde.shape[0]
    if np.all(pos):
        return r_tilde
    null_basis = v[:, ~pos]
    scale = max(1.0, float(np.max(np.abs(c_tilde))))
    leak = float(np.max(np.abs(null_basis.T @ c_tilde)))
    if leak > check_tol * scale:
        raise RiccatiError(
            f"inconsistent ranges: C~ leaks {leak:.3e} outside range(R~)")
    w_padded = np.where(pos, w, 1.0)
    return symmetrize(np.einsum("ij,j,kj->ik", v, w_padded, v))


def fused_observation(network_weights_pow_gamma: np.ndarray,
                      sensors: SensorSuite) -> tuple[np.ndarray, np.ndarray]:
    """Per-node fused observation matrix C~_i = sum_j l_ij^(g) C_j^T R_j^-1 C_j
    and fused noise covariance R~_i = sum_j (l_ij^(g))^2 C_j^T R_j^-1 C_j."""
    infos = sensors.info_matrices()
    lg = network_weights_pow_gamma
    c_tilde = np.einsum("ij,jab->iab", lg, infos)
    r_tilde = np.einsum("ij,jab->iab", lg**2, infos)
    return c_tilde, r_tilde


def ckf_steady_prior(plant: PlantModel, sensors: SensorSuite,
                     tol: float = DEFAULT_TOL) -> np.ndarray:
    """Steady prior covariance of the centralized filter (stacked sensors)."""
    omega = sensors.info_matrices().sum(axis=0)
    if not is_observable(plant.a, sensors.stacked_c()):
        raise RiccatiError("collectively unobservable")
    return solve_dare_info(plant.a, omega, plant.q, tol=tol)


def modified_info_terms(c_tilde: np.ndarray, r_tilde: np.ndarray) -> np.ndarray:
    """Per-node C~^T R~^+ C~ computed through the SPD surrogate."""
    out = np.empty_like(c_tilde)
    for i in range(c_tilde.shape[0]):
        rb = breve_r(c_tilde[i], r_tilde[i])
        out[i] = symmetrize(c_tilde[i].T @ np.linalg.inv(rb) @ c_tilde[i])
    return out


def steady_modified_cm(plant: PlantModel, c_tilde: np.ndarray,
                       r_tilde: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Per-node steady prior covariance of the modified consensus-on-
    measurements filter: the DARE with information term C~^T R~^+ C~.

    By the matched-covariance property this is also the actual steady error
    covariance. Requires each (A, C~_i) observable.
    """
    bad = [i for i in range(c_tilde.shape[0])
           if not is_observable(plant.a, c_tilde[i])]
    if bad:
        raise RiccatiError(f"(A, C~_i) unobservable at nodes {bad}")
    omegas = modified_info_terms(c_tilde, r_tilde)
    return np.stack([solve_dare_info(plant.a, omegas[i], plant.q, tol=tol)
                     for i in range(c_tilde.shape[0])])


@dataclass
class SteadyStatePrediction:
    """Steady-state quantities of the modified consensus-on-information filter."""

    p: np.ndarray            # (N, n, n) estimated prior covariance (HCRE)
    p_tilde: np.ndarray      # (N, n, n) actual prior error covariance blocks
    p_bar: np.ndarray        # (N, n, n) estimated posterior covariance
    script_a: np.ndarray     # (N n, N n) closed-loop block matrix
    gamma_mat: np.ndarray    # (N n, sum m_j) noise injection blocks
    consistency_margin: np.ndarray  # (N,) min eig of (P_i - P~_i)
    script_a_radius: float


def steady_modified_ci(plant: PlantModel, weight_rows: np.ndarray,
                       c_tilde: np.ndarray, r_tilde: np.ndarray,
                       sensors: SensorSuite,
                       tol: float = DEFAULT_TOL,
                       max_iter: int = MAX_ITER) -> SteadyStatePrediction:
    """Solve the HCRE for the estimated covariance and the block Lyapunov
    equation for the actual steady error covariance.

    weight_rows are the effective fusion weights l_ij^(gamma).
    """
    a, q = plant.a, plant.q
    if not plant.a_invertible:
        raise RiccatiError("modified CI steady state requires invertible A")
    n_nodes, n = c_tilde.shape[0], a.shape[0]
    omegas = modified_info_terms(c_tilde, r_tilde)
    p = solve_hcre_info(a, omegas, q, weight_rows, tol=tol, max_iter=max_iter)

    p_inv = sym_inv(p)
    mixed = np.einsum("ij,jab->iab", weight_rows, p_inv)
    p_bar = sym_inv(mixed + omegas)

    r_tilde_pinv = sym_pinv(r_tilde)
    script_a = np.zeros((n_nodes * n, n_nodes * n))
    m_sizes = [c.shape[0] for c in sensors.c]
    m_total = sum(m_sizes)
    gamma_mat = np.zeros((n_nodes * n, m_total))
    offsets = np.concatenate([[0], np.cumsum(m_sizes)])
    for i in range(n_nodes):
        base = a @ p_bar[i]
        lead = base @ c_tilde[i].T @ r_tilde_pinv[i]
        for j in range(n_nodes):
            wij = weight_rows[i, j]
            if wij == 0.0:
                continue
            script_a[i * n:(i + 1) * n, j * n:(j + 1) * n] = wij * base @ p_inv[j]
            blk = wij * lead @ sensors.c[j].T @ np.linalg.inv(sensors.r[j])
            gamma_mat[i * n:(i + 1) * n, offsets[j]:offsets[j + 1]] = blk

    rho = spectral_radius(script_a)
    if rho >= 1.0:
        raise RiccatiError(f"closed-loop block matrix is not Schur stable "
                           f"(spectral radius {rho:.6f})")

    r_diag = np.zeros((m_total, m_total))
    for j in range(n_nodes):
        r_diag[offsets[j]:offsets[j + 1], offsets[j]:offsets[j + 1]] = sensors.r[j]
    const = symmetrize(gamma_mat @ r_diag @ gamma_mat.T
                       + np.kron(np.ones((n_nodes, n_nodes)), q))

    # plain iteration from 0 keeps memory at O((Nn)^2); geometric under Schur
    # stability
    big_p = np.zeros_like(const)
    scale = max(1.0, float(np.max(np.abs(const))))
    for _ in range(max_iter):
        nxt = symmetrize(script_a @ big_p @ script_a.T + const)
        if np.max(np.abs(nxt - big_p)) < tol * scale:
            big_p = nxt
            break
        big_p = nxt
    else:
        raise RiccatiError("Lyapunov iteration did not converge")

    p_tilde = np.stack([big_p[i * n:(i + 1) * n, i * n:(i + 1) * n]
                        for i in range(n_nodes)])
    margins = np.array([min_eig_sym(p[i] - p_tilde[i]) for i in range(n_nodes)])
    return SteadyStatePrediction(p=p, p_tilde=p_tilde, p_bar=p_bar,
                                 script_a=script_a, gamma_mat=gamma_mat,
                                 consistency_margin=margins,
                                 script_a_radius=rho)


# ---------------------------------------------------------------------------
# property checks (test harness operations)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrderPreservationReport:
    checked: int
    violations: int
    min_margin: float  # most negative eigenvalue of (P_larger - P_smaller)


def property_order_preservation(a: np.ndarray, c: np.ndarray, pairs,
                                slack: float = 1e-9,
                                tol: float = DEFAULT_TOL) -> OrderPreservationReport:
    """For (Q1, R1, Q2, R2) pairs with Q1 >= Q2, R1 >= R2, verify P1 >= P2."""
    violations = 0
    min_margin = np.inf
    for q1, r1, q2, r2 in pairs:
        p1 = solve_dare(DareProblem(a, c, q1, r1), tol=tol)
        p2 = solve_dare(DareProblem(a, c, q2, r2), tol=tol)
        margin = min_eig_sym(p1 - p2)
        min_margin = min(min_margin, margin)
        if margin < -slack:
            violations += 1
    return OrderPreservationReport(checked=len(pairs), violations=violations,
                                   min_margin=float(min_margin))


def property_order_preservation_hcre(a: np.ndarray, cs, weights: np.ndarray,
                                     pairs, slack: float = 1e-9,
                                     tol: float = DEFAULT_TOL) -> OrderPreservationReport:
    """HCRE analogue on (Q1, [R_i]1, Q2, [R_i]2) pairs."""
    violations = 0
    min_margin = np.inf
    for q1, rs1, q2, rs2 in pairs:
        p1 = solve_hcre(HcreProblem(a, cs, rs1, weights, q1), tol=tol)
        p2 = solve_hcre(HcreProblem(a, cs, rs2, weights, q2), tol=tol)
        for i in range(p1.shape[0]):
            margin = min_eig_sym(p1[i] - p2[i])
            min_margin = min(min_margin, margin)
            if margin < -slack:
                violations += 1
    return OrderPreservationReport(checked=len(pairs), violations=violations,
                                   min_margin=float(min_margin))


@dataclass(frozen=True)
class ConvergentParameterReport:
    gap: float       # |P_recursion - P_fixed| after the run
    steps: int
    converged: bool


def property_convergent_parameter(a: np.ndarray, c: np.ndarray, q: np.ndarray,
                                  r_limit: np.ndarray, r_of_k,
                                  steps: int = 400,
                                  gap_tol: float = 1e-6,
                                  tol: float = DEFAULT_TOL) -> ConvergentParameterReport:
    """Run the recursion with time-varying parameter R_k = r_of_k(k) and
    compare against the constant-parameter fixed point."""
    p_star = solve_dare(DareProblem(a, c, q, r_limit), tol=tol)
    p = np.eye(a.shape[0])
    for k in range(steps):
        rk = np.asarray(r_of_k(k), dtype=float)
        omega = c.T @ np.linalg.inv(rk) @ c
        p = symmetrize(a @ sym_inv(sym_inv(p) + omega) @ a.T + q)
    gap = float(np.linalg.norm(p - p_star, "fro"))
    return ConvergentParameterReport(gap=gap, steps=steps,
                                     converged=bool(gap < gap_tol))
