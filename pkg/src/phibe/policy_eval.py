"""Value-function estimation from trajectory batches.

Two estimator families share the CoefficientVector / ValueEstimate types:

* phibe_policy_evaluation fits the order-i dynamics-based weak form.  At every
  window start s^j the next i states give drift and diffusion estimates, and
  the residual of beta*V - b.grad(V) - 0.5*Sigma:hess(V) = r is projected onto
  the basis, yielding a square linear system for the weights.
* be_policy_evaluation fits the one-step discounted fixed point
  V(s) = r*dt + gamma*V(s') in the same projected sense.

Both assemble the system A theta = rhs by summing rank-one contributions over
window starts (chunked so feature tensors stay bounded), then solve by
column-pivoted QR with a condition estimate read off the R diagonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coefficients import fd_coefficients
from .errors import ConfigError, NumericalError

__all__ = [
    "CoefficientVector",
    "ValueEstimate",
    "phibe_policy_evaluation",
    "be_policy_evaluation",
    "phibe_galerkin_from_estimates",
]

CONDITION_WARN_THRESHOLD = 1e10
_SINGULAR_RTOL = 1e-15
_CHUNK = 200_000


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    """Weight vector tied to the basis it weights."""

    basis: object
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != self.basis.size:
            raise ConfigError(
                f"weights length {w.shape[0]} does not match basis size {self.basis.size}"
            )
        if not np.all(np.isfinite(w)):
            raise ConfigError("coefficients contain non-finite entries")
        object.__setattr__(self, "weights", w)

    def __call__(self, states, actions=None) -> np.ndarray:
        if actions is None:
            feats = self.basis.value(states)
        else:
            feats = self.basis.value(states, actions)
        return feats @ self.weights


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    """Fitted value function plus solve diagnostics."""

    coeffs: CoefficientVector
    conditioning: float
    sample_count: int

    def value(self, states) -> np.ndarray:
        return self.coeffs(states)

    def gradient(self, states) -> np.ndarray:
        g = self.coeffs.basis.grad(states)
        return np.einsum("nqd,q->nd", g, self.coeffs.weights)

    def hessian(self, states) -> np.ndarray:
        h = self.coeffs.basis.hessian(states)
        return np.einsum("nqde,q->nde", h, self.coeffs.weights)


def _check_beta(beta) -> float:
    beta = float(beta)
    if not np.isfinite(beta) or beta < 0.0:
        raise ConfigError(f"beta must be finite and nonnegative, got {beta}")
    return beta


def _check_batch_dt(batch, dt) -> float:
    dt = float(dt)
    if dt <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if abs(dt - batch.dt) > 1e-12 * max(1.0, abs(batch.dt)):
        raise ConfigError(f"dt argument {dt} disagrees with the batch dt {batch.dt}")
    return dt


def _check_state_basis(batch, Phi) -> None:
    d = batch.states.shape[2]
    if Phi.state_dim != d:
        raise ConfigError(
            f"basis expects state dimension {Phi.state_dim}, batch has {d}"
        )


def _window_mask(lengths, n_slots, shift):
    """Boolean (L, n_slots) mask of valid window starts j <= lengths - shift."""
    j = np.arange(n_slots)
    return j[None, :] <= (np.asarray(lengths) - shift)[:, None]


def _drift_windows(batch, order, dt, with_diffusion):
    """Flatten windows j = 0..len_l - order into per-point arrays.

    Returns (s0, a0, r0, b_hat, sigma_hat); sigma_hat is None when the
    second-moment term is not requested.  Raises "batch too short" when no
    trajectory supplies a single full window.
    """
    states = batch.states
    L, n_states, d = states.shape
    n_steps = n_states - 1
    n_slots = n_steps - order + 1
    if n_slots < 1 or not np.any(batch.lengths >= order):
        raise NumericalError(
            f"batch too short: order {order} needs at least {order + 1} states "
            "in some trajectory"
        )
    mask = _window_mask(batch.lengths, n_slots, order)
    if not np.any(mask):
        raise NumericalError(
            f"batch too short: order {order} needs at least {order + 1} states "
            "in some trajectory"
        )
    s0 = states[:, :n_slots][mask]
    a0 = batch.actions[:, :n_slots][mask]
    r0 = batch.rewards[:, :n_slots][mask]
    coeffs = fd_coefficients(order)
    b_hat = np.zeros_like(s0)
    sigma_hat = np.zeros((s0.shape[0], d, d)) if with_diffusion else None
    for k in range(1, order + 1):
        delta = states[:, k:k + n_slots][mask] - s0
        b_hat += coeffs[k - 1] * delta
        if with_diffusion:
            sigma_hat += coeffs[k - 1] * (delta[:, :, None] * delta[:, None, :])
    b_hat /= dt
    if with_diffusion:
        sigma_hat /= dt
    return s0, a0, r0, b_hat, sigma_hat


def _transition_windows(batch, need_next_action=False):
    """Flatten one-step transitions; optionally require a recorded next action.

    Windows are j = 0..len_l - 1, or j = 0..len_l - 2 when the next action must
    itself be part of the record.
    """
    states = batch.states
    L, n_states, d = states.shape
    n_steps = n_states - 1
    shift = 2 if need_next_action else 1
    n_slots = n_steps - shift + 1
    if n_slots < 1:
        raise NumericalError("batch too short: need at least one full transition")
    mask = _window_mask(batch.lengths, n_slots, shift)
    if not np.any(mask):
        raise NumericalError("batch too short: need at least one full transition")
    s0 = states[:, :n_slots][mask]
    s1 = states[:, 1:n_slots + 1][mask]
    a0 = batch.actions[:, :n_slots][mask]
    r0 = batch.rewards[:, :n_slots][mask]
    a1 = batch.actions[:, 1:n_slots + 1][mask] if need_next_action else None
    return s0, a0, r0, s1, a1


def _solve_square(A, rhs, matrix_name="Galerkin matrix"):
    """Column-pivoted QR solve with a condition estimate from R's diagonal."""
    Q, R, piv = scipy.linalg.qr(A, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        raise NumericalError(f"singular {matrix_name} (empty system)")
    dmax = float(diag.max())
    dmin = float(diag.min())
    if dmax == 0.0 or dmin <= dmax * _SINGULAR_RTOL:
        cond = np.inf if dmin == 0.0 else dmax / dmin
        raise NumericalError(f"singular {matrix_name} (condition estimate {cond:.3e})")
    cond = dmax / dmin
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"{matrix_name} is ill-conditioned (estimate {cond:.3e})", RuntimeWarning
        )
    y = scipy.linalg.solve_triangular(R, Q.T @ rhs, lower=False)
    x = np.empty_like(y)
    x[piv] = y
    return x, cond


def _solve_least_squares(design, rhs, matrix_name="Gram matrix"):
    """Least-squares solve through a thin QR of the design matrix.

    Solves the same normal equations [design^T design] x = design^T rhs as
    _solve_square would, but factoring the tall matrix keeps the effective
    condition number at its square root, which matters for batches whose
    states span many orders of magnitude.  The reported condition estimate is
    the design factor's R-diagonal ratio.
    """
    if design.shape[0] < design.shape[1]:
        raise NumericalError(
            f"singular {matrix_name} ({design.shape[0]} rows for "
            f"{design.shape[1]} basis functions)"
        )
    Q, R, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        raise NumericalError(f"singular {matrix_name} (empty system)")
    dmax = float(diag.max())
    dmin = float(diag.min())
    if dmax == 0.0 or dmin <= dmax * _SINGULAR_RTOL:
        cond = np.inf if dmin == 0.0 else dmax / dmin
        raise NumericalError(f"singular {matrix_name} (condition estimate {cond:.3e})")
    cond = dmax / dmin
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"{matrix_name} is ill-conditioned (estimate {cond:.3e})", RuntimeWarning
        )
    y = scipy.linalg.solve_triangular(R, Q.T @ rhs, lower=False)
    x = np.empty_like(y)
    x[piv] = y
    return x, cond


def _assemble_phibe_system(states, rewards, b_hat, sigma_hat, Phi, beta, diffusion_mode):
    n = Phi.size
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    N = states.shape[0]
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        phi = Phi.value(states[sl])
        op = beta * phi - np.einsum("nqd,nd->nq", Phi.grad(states[sl]), b_hat[sl])
        if diffusion_mode == "empirical":
            op -= 0.5 * np.einsum(
                "nqde,nde->nq", Phi.hessian(states[sl]), sigma_hat[sl]
            )
        A += phi.T @ op
        rhs += rewards[sl] @ phi
    return A, rhs


def _check_diffusion_mode(diffusion_mode) -> str:
    if diffusion_mode not in ("zero", "empirical"):
        raise ConfigError(f"unknown diffusion_mode {diffusion_mode!r}")
    return diffusion_mode


def phibe_policy_evaluation(
    batch, Phi, beta, dt, order: int = 1, diffusion_mode: str = "empirical"
) -> ValueEstimate:
    """Order-i value evaluation from a batch generated under the target policy.

    Assembles A = sum Phi(s^j) [beta Phi - b_hat.grad(Phi) - 0.5 Sigma_hat:hess(Phi)]^T
    and rhs = sum r^j Phi(s^j) over windows j = 0..len-order in every
    trajectory, then solves A theta = rhs.  diffusion_mode="zero" drops the
    second-moment term (deterministic dynamics).
    """
    beta = _check_beta(beta)
    dt = _check_batch_dt(batch, dt)
    _check_state_basis(batch, Phi)
    _check_diffusion_mode(diffusion_mode)
    order = int(order)
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    s0, _, r0, b_hat, sigma_hat = _drift_windows(
        batch, order, dt, with_diffusion=(diffusion_mode == "empirical")
    )
    A, rhs = _assemble_phibe_system(s0, r0, b_hat, sigma_hat, Phi, beta, diffusion_mode)
    theta, cond = _solve_square(A, rhs)
    return ValueEstimate(
        coeffs=CoefficientVector(basis=Phi, weights=theta),
        conditioning=cond,
        sample_count=int(s0.shape[0]),
    )


def phibe_galerkin_from_estimates(
    states, rewards, b_hat, sigma_hat, Phi, beta, diffusion_mode: str = "empirical"
) -> ValueEstimate:
    """Same weak-form solve as phibe_policy_evaluation, but from precomputed
    per-point drift/diffusion estimates instead of sampled increments.

    Used by the exact-expectation mode, where the increments are replaced by
    their conditional moments at the same evaluation points.
    """
    beta = _check_beta(beta)
    _check_diffusion_mode(diffusion_mode)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rewards = np.asarray(rewards, dtype=float).reshape(-1)
    b_hat = np.atleast_2d(np.asarray(b_hat, dtype=float))
    if states.shape[0] != rewards.shape[0] or states.shape != b_hat.shape:
        raise ConfigError("states, rewards, and b_hat disagree on shape")
    if Phi.state_dim != states.shape[1]:
        raise ConfigError(
            f"basis expects state dimension {Phi.state_dim}, points have {states.shape[1]}"
        )
    if diffusion_mode == "empirical":
        d = states.shape[1]
        sigma_hat = np.asarray(sigma_hat, dtype=float).reshape(states.shape[0], d, d)
    A, rhs = _assemble_phibe_system(
        states, rewards, b_hat, sigma_hat, Phi, beta, diffusion_mode
    )
    theta, cond = _solve_square(A, rhs)
    return ValueEstimate(
        coeffs=CoefficientVector(basis=Phi, weights=theta),
        conditioning=cond,
        sample_count=int(states.shape[0]),
    )


def discount_factor(beta: float, dt: float, discount_choice: str) -> float:
    """Per-step discount: exp(-beta dt), or the rational choice 1/(1 + beta dt)."""
    if discount_choice == "exp":
        return float(np.exp(-beta * dt))
    if discount_choice == "optimal":
        return 1.0 / (1.0 + beta * dt)
    raise ConfigError(f"unknown discount_choice {discount_choice!r}")


def be_policy_evaluation(
    batch, Phi, beta, dt, discount_choice: str = "exp"
) -> ValueEstimate:
    """One-step discounted evaluation: the fixed point of V = r dt + gamma V'.

    Assembles A = sum Phi(s^j) [Phi(s^j) - gamma Phi(s^{j+1})]^T and
    rhs = sum r^j Phi(s^j) dt over all recorded transitions.
    """
    beta = _check_beta(beta)
    dt = _check_batch_dt(batch, dt)
    _check_state_basis(batch, Phi)
    gamma = discount_factor(beta, dt, discount_choice)
    s0, _, r0, s1, _ = _transition_windows(batch)
    n = Phi.size
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    N = s0.shape[0]
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        phi0 = Phi.value(s0[sl])
        phi1 = Phi.value(s1[sl])
        A += phi0.T @ (phi0 - gamma * phi1)
        rhs += (r0[sl] * dt) @ phi0
    theta, cond = _solve_square(A, rhs)
    return ValueEstimate(
        coeffs=CoefficientVector(basis=Phi, weights=theta),
        conditioning=cond,
        sample_count=int(N),
    )
