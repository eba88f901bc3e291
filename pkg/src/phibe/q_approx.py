"""State-action function estimation on top of a fitted value estimate.

The dynamics-based q target at a window start is

    target(s^j, a^j) = r^j + b_hat_i(s^j).grad(V)(s^j)
                          + 0.5 * Sigma_hat_i(s^j) : hess(V)(s^j)

with the same order-i drift/diffusion estimates the value step uses.  Fitting
omega amounts to least squares of target against the state-action features,
solved either directly from the normal equations (phibe_q_galerkin) or by
full-batch gradient descent on the quadratic loss (phibe_q_gradient_descent);
both share the assembled Gram matrix, so the GD fixed point is the direct
solution.

be_q_evaluation is the one-step discounted counterpart on state-action
features.  Its next-step feature reuses the current action by default (the
action is treated as held over the step); next_action="recorded_next" switches
to the recorded a^{j+1}, which is the only usable form when the discount
factor is exactly 1 and held-action difference columns cancel for
action-independent features.

The b_hat normalization is 1/dt throughout, matching the value-evaluation
convention; drift_convention="printed" drops that factor from b_hat only, for
comparison runs against the unnormalized form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .policy_eval import (
    CoefficientVector,
    ValueEstimate,
    _check_batch_dt,
    _check_beta,
    _drift_windows,
    _solve_least_squares,
    _solve_square,
    _transition_windows,
    discount_factor,
)

__all__ = [
    "QEstimate",
    "phibe_q_galerkin",
    "phibe_q_gradient_descent",
    "phibe_q_from_estimates",
    "be_q_evaluation",
]

GD_MAX_ITERS = 10_000
GD_GRAD_TOL = 1e-9
GD_DIVERGENCE_NORM = 1e8
_CHUNK = 200_000


@dataclass(frozen=True, eq=False)
class QEstimate:
    """Fitted q weights plus the method that produced them and its diagnostics."""

    coeffs: CoefficientVector
    method: str
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, states, actions) -> np.ndarray:
        return self.coeffs(states, actions)


def _check_q_basis(batch, Psi) -> None:
    d = batch.states.shape[2]
    m = batch.actions.shape[2]
    if Psi.state_dim != d or Psi.action_dim != m:
        raise ConfigError(
            f"basis expects dimensions (state {Psi.state_dim}, action {Psi.action_dim}), "
            f"batch has (state {d}, action {m})"
        )


def _check_drift_convention(drift_convention) -> str:
    if drift_convention not in ("normalized", "printed"):
        raise ConfigError(f"unknown drift_convention {drift_convention!r}")
    return drift_convention


def _check_hold(batch, order) -> None:
    if batch.hold_steps < order:
        warnings.warn(
            f"actions are re-drawn every {batch.hold_steps} step(s) but order "
            f"{order} windows span {order} steps; drift estimates mix actions",
            RuntimeWarning,
        )


def _phibe_q_targets(s0, r0, b_hat, sigma_hat, value, diffusion_mode):
    targets = r0 + np.einsum("nd,nd->n", b_hat, value.gradient(s0))
    if diffusion_mode == "empirical":
        targets = targets + 0.5 * np.einsum(
            "nde,nde->n", sigma_hat, value.hessian(s0)
        )
    return targets


def _assemble_gram(s0, a0, targets, Psi):
    n = Psi.size
    G = np.zeros((n, n))
    t = np.zeros(n)
    N = s0.shape[0]
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        psi = Psi.value(s0[sl], a0[sl])
        G += psi.T @ psi
        t += targets[sl] @ psi
    return G, t


def _design_matrix(s0, a0, Psi):
    N = s0.shape[0]
    design = np.empty((N, Psi.size))
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        design[sl] = Psi.value(s0[sl], a0[sl])
    return design


def _prepare_phibe_q(batch, Psi, value, dt, order, diffusion_mode, drift_convention):
    if not isinstance(value, ValueEstimate):
        raise ConfigError("value must be a ValueEstimate")
    dt = _check_batch_dt(batch, dt)
    _check_q_basis(batch, Psi)
    _check_drift_convention(drift_convention)
    order = int(order)
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    if diffusion_mode not in ("zero", "empirical"):
        raise ConfigError(f"unknown diffusion_mode {diffusion_mode!r}")
    _check_hold(batch, order)
    s0, a0, r0, b_hat, sigma_hat = _drift_windows(
        batch, order, dt, with_diffusion=(diffusion_mode == "empirical")
    )
    if drift_convention == "printed":
        b_hat = b_hat * dt
    targets = _phibe_q_targets(s0, r0, b_hat, sigma_hat, value, diffusion_mode)
    return s0, a0, targets


def phibe_q_galerkin(
    batch,
    Psi,
    value: ValueEstimate,
    dt,
    order: int = 1,
    diffusion_mode: str = "empirical",
    drift_convention: str = "normalized",
) -> QEstimate:
    """Least-squares q fit: [sum Psi Psi^T] omega = [sum target * Psi]."""
    s0, a0, targets = _prepare_phibe_q(
        batch, Psi, value, dt, order, diffusion_mode, drift_convention
    )
    omega, cond = _solve_least_squares(
        _design_matrix(s0, a0, Psi), targets, matrix_name="Gram matrix"
    )
    return QEstimate(
        coeffs=CoefficientVector(basis=Psi, weights=omega),
        method="galerkin",
        diagnostics={"conditioning": cond, "sample_count": int(s0.shape[0])},
    )


def phibe_q_from_estimates(
    states,
    actions,
    rewards,
    b_hat,
    sigma_hat,
    Psi,
    value: ValueEstimate,
    diffusion_mode: str = "empirical",
) -> QEstimate:
    """Same q fit from precomputed per-point drift/diffusion estimates."""
    if not isinstance(value, ValueEstimate):
        raise ConfigError("value must be a ValueEstimate")
    if diffusion_mode not in ("zero", "empirical"):
        raise ConfigError(f"unknown diffusion_mode {diffusion_mode!r}")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    rewards = np.asarray(rewards, dtype=float).reshape(-1)
    b_hat = np.atleast_2d(np.asarray(b_hat, dtype=float))
    if states.shape[0] != actions.shape[0] or states.shape[0] != rewards.shape[0]:
        raise ConfigError("states, actions, and rewards disagree on N")
    if Psi.state_dim != states.shape[1] or Psi.action_dim != actions.shape[1]:
        raise ConfigError(
            f"basis expects dimensions (state {Psi.state_dim}, action {Psi.action_dim}), "
            f"points have (state {states.shape[1]}, action {actions.shape[1]})"
        )
    if diffusion_mode == "empirical":
        d = states.shape[1]
        sigma_hat = np.asarray(sigma_hat, dtype=float).reshape(states.shape[0], d, d)
    targets = _phibe_q_targets(states, rewards, b_hat, sigma_hat, value, diffusion_mode)
    omega, cond = _solve_least_squares(
        _design_matrix(states, actions, Psi), targets, matrix_name="Gram matrix"
    )
    return QEstimate(
        coeffs=CoefficientVector(basis=Psi, weights=omega),
        method="galerkin",
        diagnostics={"conditioning": cond, "sample_count": int(states.shape[0])},
    )


def phibe_q_gradient_descent(
    batch,
    Psi,
    value: ValueEstimate,
    omega0=None,
    alpha: float = None,
    dt=None,
    order: int = 1,
    diffusion_mode: str = "empirical",
    max_iters: int = GD_MAX_ITERS,
    grad_tol: float = GD_GRAD_TOL,
    drift_convention: str = "normalized",
) -> QEstimate:
    """Full-batch gradient descent on the q least-squares loss.

    The gradient of the mean squared residual is (G omega - t) / N with the
    same Gram matrix and target vector the direct solve uses, so iterating

        omega <- omega - alpha * (G omega - t) / N

    is exactly the update sum[target - omega^T Psi](-Psi)/N and converges to
    the direct solution whenever alpha < 2 / lambda_max(G/N).  alpha=None
    picks 1 / lambda_max(G/N).  Iteration stops when the gradient norm falls
    below grad_tol or after max_iters; a weight norm above 1e8 aborts.
    """
    s0, a0, targets = _prepare_phibe_q(
        batch, Psi, value, dt, order, diffusion_mode, drift_convention
    )
    G, t = _assemble_gram(s0, a0, targets, Psi)
    N = s0.shape[0]

    if omega0 is None:
        omega = np.zeros(Psi.size)
    elif isinstance(omega0, CoefficientVector):
        omega = omega0.weights.copy()
    else:
        omega = np.asarray(omega0, dtype=float).reshape(-1).copy()
    if omega.shape[0] != Psi.size:
        raise ConfigError(
            f"omega0 length {omega.shape[0]} does not match basis size {Psi.size}"
        )

    if alpha is None:
        lam_max = float(np.linalg.eigvalsh((G + G.T) / 2.0).max()) / N
        if lam_max <= 0.0:
            raise NumericalError("singular Gram matrix (zero spectrum)")
        alpha = 1.0 / lam_max
    alpha = float(alpha)
    if alpha <= 0.0:
        raise ConfigError(f"alpha must be positive, got {alpha}")

    max_iters = int(max_iters)
    grad_norm = np.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        grad = (G @ omega - t) / N
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < grad_tol:
            break
        omega -= alpha * grad
        if np.linalg.norm(omega) > GD_DIVERGENCE_NORM:
            raise NumericalError(
                f"step size too large: weights diverged after {iters} iterations "
                f"(alpha {alpha:.3e})"
            )
    loss = float(np.mean((targets - _predict(Psi, s0, a0, omega)) ** 2))
    return QEstimate(
        coeffs=CoefficientVector(basis=Psi, weights=omega),
        method="gradient_descent",
        diagnostics={
            "iterations": iters,
            "grad_norm": grad_norm,
            "final_loss": loss,
            "alpha": alpha,
            "sample_count": int(N),
        },
    )


def _predict(Psi, s0, a0, omega):
    N = s0.shape[0]
    out = np.empty(N)
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        out[sl] = Psi.value(s0[sl], a0[sl]) @ omega
    return out


def be_q_evaluation(
    batch,
    Psi,
    beta,
    dt,
    discount_choice: str = "exp",
    next_action: str = "hold",
) -> QEstimate:
    """One-step discounted q evaluation on state-action features.

    Solves sum Psi(s^j, a^j) [Psi(s^j, a^j) - gamma Psi(s^{j+1}, a_next)]^T
    omega = sum r^j Psi(s^j, a^j) dt, where a_next is a^j (next_action="hold")
    or the recorded a^{j+1} ("recorded_next").
    """
    beta = _check_beta(beta)
    dt = _check_batch_dt(batch, dt)
    _check_q_basis(batch, Psi)
    if next_action not in ("hold", "recorded_next"):
        raise ConfigError(f"unknown next_action {next_action!r}")
    gamma = discount_factor(beta, dt, discount_choice)
    need_next = next_action == "recorded_next"
    s0, a0, r0, s1, a1 = _transition_windows(batch, need_next_action=need_next)
    a_next = a1 if need_next else a0
    n = Psi.size
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    N = s0.shape[0]
    for start in range(0, N, _CHUNK):
        sl = slice(start, min(start + _CHUNK, N))
        psi0 = Psi.value(s0[sl], a0[sl])
        psi1 = Psi.value(s1[sl], a_next[sl])
        A += psi0.T @ (psi0 - gamma * psi1)
        rhs += (r0[sl] * dt) @ psi0
    omega, cond = _solve_square(A, rhs, matrix_name="Gram matrix")
    return QEstimate(
        coeffs=CoefficientVector(basis=Psi, weights=omega),
        method="be",
        diagnostics={"conditioning": cond, "gamma": gamma, "sample_count": int(N)},
    )
