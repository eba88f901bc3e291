"""Matrix-function and Riccati primitives used by the exact kernels and oracles.

Everything here avoids explicit matrix inversion of the dynamics matrix:

* ``mat_exp``       scaling-and-squaring Taylor evaluation of exp(M t)
* ``phi1``          (1/t) int_0^t exp(M tau) dtau via a block exponential
* ``gram_integral`` (1/dt) int_0^dt exp(A u) exp(A^T u) du via a block exponential
* ``solve_care``    continuous-time Riccati solve for negative definite rewards
* ``solve_policy_lyapunov``  discounted Lyapunov equation for a fixed policy
* ``hautus_stabilizable`` / ``hautus_detectable``  PBH rank tests

The Riccati and Lyapunov conventions are the reward-maximization ones: Q and R
are symmetric negative definite, the value matrix P is negative definite, and
``beta`` is the continuous discount rate.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, NumericalError

__all__ = [
    "mat_exp",
    "phi1",
    "gram_integral",
    "solve_care",
    "solve_policy_lyapunov",
    "hautus_stabilizable",
    "hautus_detectable",
]

_CARE_RESIDUAL_TOL = 1e-11
_CARE_MAX_ITERS = 100


def _as_square(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ConfigError(f"{name} contains non-finite entries")
    return M


def _check_symmetric(M: np.ndarray, name: str, tol: float = 1e-10) -> np.ndarray:
    M = _as_square(M, name)
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > tol * scale:
        raise ConfigError(f"{name} must be symmetric")
    return 0.5 * (M + M.T)


def mat_exp(M: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(M t) by scaling and squaring with a truncated Taylor series.

    The scaled norm is brought below 0.5, terms are accumulated until they
    fall below 1e-16 relative to the running sum, and the result is squared
    back up.
    """
    M = _as_square(M, "M")
    t = float(t)
    Mt = M * t
    norm = np.linalg.norm(Mt, 1)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        Mt = Mt / (2.0 ** squarings)
    d = M.shape[0]
    result = np.eye(d)
    term = np.eye(d)
    for k in range(1, 60):
        term = term @ Mt / k
        result = result + term
        if np.linalg.norm(term, 1) < 1e-16 * max(1.0, np.linalg.norm(result, 1)):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def phi1(M: np.ndarray, t: float) -> np.ndarray:
    """(1/t) int_0^t exp(M tau) dtau, well defined for singular M.

    Uses exp([[M, I], [0, 0]] t) = [[exp(Mt), int_0^t exp(M tau) dtau], [0, I]],
    so no inverse of M is formed.  phi1(0, t) = I and M t phi1(M, t) =
    exp(M t) - I.
    """
    M = _as_square(M, "M")
    t = float(t)
    if t <= 0.0:
        raise ConfigError(f"t must be positive, got {t}")
    d = M.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = M
    block[:d, d:] = np.eye(d)
    E = mat_exp(block, t)
    return E[:d, d:] / t


def gram_integral(A: np.ndarray, dt: float) -> np.ndarray:
    """C_A = (1/dt) int_0^dt exp(A u) exp(A^T u) du, symmetric positive definite.

    Computed from exp([[A, I], [0, -A^T]] dt) = [[exp(A dt), Y], [0, exp(-A^T dt)]]
    where Y exp(A^T dt) is the integral; again inverse-free.  gram_integral(0, dt)
    equals the identity.
    """
    A = _as_square(A, "A")
    dt = float(dt)
    if dt <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    d = A.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = A
    block[:d, d:] = np.eye(d)
    block[d:, d:] = -A.T
    E = mat_exp(block, dt)
    X = E[:d, d:] @ E[:d, :d].T
    return 0.5 * (X + X.T) / dt


def hautus_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test: rank [A - lambda I, B] = d for every eigenvalue with Re >= 0."""
    A = _as_square(A, "A")
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise ConfigError(f"B must have shape ({A.shape[0]}, m), got {B.shape}")
    d = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < -tol:
            continue
        pencil = np.hstack([A - lam * np.eye(d), B.astype(complex)])
        sv = np.linalg.svd(pencil, compute_uv=False)
        if sv[-1] <= tol * max(1.0, sv[0]):
            return False
    return True


def hautus_detectable(A: np.ndarray, Q: np.ndarray, tol: float = 1e-9) -> bool:
    """Detectability of (A, Q) as stabilizability of the transposed pair."""
    Q = np.asarray(Q, dtype=float)
    return hautus_stabilizable(np.asarray(A, dtype=float).T, Q.T, tol=tol)


def _check_negative_definite(M: np.ndarray, name: str) -> np.ndarray:
    M = _check_symmetric(M, name)
    eigs = np.linalg.eigvalsh(M)
    if eigs.max() >= -1e-12 * max(1.0, abs(eigs.min())):
        raise ConfigError(f"{name} must be negative definite (max eigenvalue {eigs.max():.3e})")
    return M


def solve_care(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    beta: float = 0.0,
) -> np.ndarray:
    """Negative definite solution P of  beta P = Q - P B R^-1 B^T P + A^T P + P A.

    Q and R are symmetric negative definite (reward maximization).  The solve
    negates to the standard positive definite Riccati equation for the shifted
    matrix A - beta/2 I, takes the Schur-based solution as the starting point,
    and polishes with Newton-Kleinman iterations (symmetrizing each iterate)
    until the residual drops below 1e-11 * (1 + ||P||) or 100 iterations.
    """
    A = _as_square(A, "A")
    B = np.asarray(B, dtype=float)
    d = A.shape[0]
    if B.ndim != 2 or B.shape[0] != d:
        raise ConfigError(f"B must have shape ({d}, m), got {B.shape}")
    Q = _check_negative_definite(Q, "Q")
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] != B.shape[1]:
        raise ConfigError(f"R must have shape ({B.shape[1]}, {B.shape[1]}), got {R.shape}")
    R = _check_symmetric(R, "R")
    r_eigs = np.linalg.eigvalsh(R)
    if r_eigs.max() >= -1e-14 * max(1.0, abs(r_eigs.min())):
        raise NumericalError("R singular or not negative definite")
    beta = float(beta)

    A_shift = A - 0.5 * beta * np.eye(d)
    Qp = -Q
    Rp = -R
    if not hautus_stabilizable(A_shift, B):
        raise NumericalError("not stabilizable/detectable: (A - beta/2 I, B) fails the PBH test")
    if not hautus_detectable(A_shift, Qp):
        raise NumericalError("not stabilizable/detectable: (A - beta/2 I, Q) fails the PBH test")

    try:
        X = sla.solve_continuous_are(A_shift, B, Qp, Rp)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Riccati solve failed: {exc}") from exc
    X = 0.5 * (X + X.T)

    Rp_inv_Bt = np.linalg.solve(Rp, B.T)

    def residual(Xk: np.ndarray) -> np.ndarray:
        return A_shift.T @ Xk + Xk @ A_shift - Xk @ B @ Rp_inv_Bt @ Xk + Qp

    for _ in range(_CARE_MAX_ITERS):
        res = residual(X)
        if np.linalg.norm(res, "fro") < _CARE_RESIDUAL_TOL * (1.0 + np.linalg.norm(X, "fro")):
            break
        A_cl = A_shift - B @ (Rp_inv_Bt @ X)
        rhs = -(Qp + X @ B @ Rp_inv_Bt @ X)
        X = sla.solve_continuous_lyapunov(A_cl.T, rhs)
        X = 0.5 * (X + X.T)
    else:
        raise NumericalError("Riccati refinement did not reach the residual tolerance")

    closed_loop = A_shift - B @ (Rp_inv_Bt @ X)
    if np.linalg.eigvals(closed_loop).real.max() >= 0.0:
        raise NumericalError("Riccati solution does not stabilize the closed loop")
    if np.linalg.eigvalsh(X).min() <= 0.0:
        raise NumericalError("Riccati solution is not negative definite")
    return -X


def solve_policy_lyapunov(F: np.ndarray, M: np.ndarray, beta: float = 0.0) -> np.ndarray:
    """Solve  beta P = M + F^T P + P F  for the value matrix of a fixed policy.

    F is the closed-loop drift matrix and M the (negative definite) quadratic
    reward under the policy.  Requires beta > 2 max Re eig(F) (for beta = 0
    that is F Hurwitz); otherwise the policy value diverges and the solve
    raises.
    """
    F = _as_square(F, "F")
    M = _check_symmetric(M, "M")
    beta = float(beta)
    growth = float(np.linalg.eigvals(F).real.max())
    if beta <= 2.0 * growth + 1e-14:
        raise NumericalError(
            f"unstable closed loop: max Re eig(F) = {growth:.6g} with beta = {beta:.6g}"
        )
    F_shift = F - 0.5 * beta * np.eye(F.shape[0])
    P = sla.solve_continuous_lyapunov(F_shift.T, -M)
    return 0.5 * (P + P.T)
