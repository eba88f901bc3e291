"""Closed-form and semi-analytic ground truths for the linear-quadratic and
portfolio problems.

These are the reference solutions the estimators are measured against:

* lqr_optimal / lqr_optimal_1d: the continuous-time optimum (Riccati).
* lqr_policy_value: the true discounted value of a fixed linear policy
  (Lyapunov equation), used for evaluation-error curves.
* phibe_effective_dynamics / phibe_optimal: the exact drift pair (A_hat_i,
  B_hat_i) that the order-i estimators recover from interval-dt observations
  of a linear system, and the optimum of the LQR with those dynamics.  At
  beta = 0 that optimum coincides with the true one for every dt.
* be_optimal_1d / be_optimal: the fixed point of one-step discounted policy
  iteration on the same data, via the modified Riccati equation; its gap from
  the true optimum is O(dt) and does not vanish at beta = 0.
* merton_optimal / merton_policy_value: constant-allocation closed forms.

l2_distance_on_box is the shared error metric (composite trapezoid on a
uniform grid, 601 points in 1D and 201 per axis in 2D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coefficients import fd_coefficients
from .environments import LqrSystem, MertonMarket
from .errors import ConfigError, NumericalError
from .matcore import mat_exp, phi1, solve_care, solve_policy_lyapunov
from .policy_iteration import LinearPolicy

__all__ = [
    "QuadraticValue",
    "EffectiveDynamics",
    "lqr_optimal",
    "lqr_optimal_1d",
    "lqr_policy_value",
    "phibe_effective_dynamics",
    "phibe_optimal",
    "be_optimal_1d",
    "be_optimal",
    "merton_optimal",
    "merton_policy_value",
    "l2_distance_on_box",
    "lqr_error_oracle",
    "merton_error_oracle",
]

_BE_RICCATI_TOL = 1e-10
_BE_RICCATI_MAX_ITERS = 500


@dataclass(frozen=True, eq=False)
class QuadraticValue:
    """V(s) = s^T P s + constant."""

    P: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim == 0:
            P = P.reshape(1, 1)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ConfigError(f"P must be square, got shape {P.shape}")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "constant", float(self.constant))

    def evaluate(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        return np.einsum("ni,ij,nj->n", s, self.P, s) + self.constant

    __call__ = evaluate


@dataclass(frozen=True, eq=False)
class EffectiveDynamics:
    """Exact drift pair recovered by the order-i estimators at interval dt."""

    A_hat: np.ndarray
    B_hat: np.ndarray
    order: int
    dt: float


def _value_constant(sys: LqrSystem, P: np.ndarray) -> float:
    if sys.sigma > 0.0:
        return float(sys.sigma ** 2 * np.trace(P) / sys.beta)
    return 0.0


def lqr_optimal(sys: LqrSystem) -> tuple[LinearPolicy, QuadraticValue]:
    """Continuous-time optimum: P from the Riccati equation, K = -R^-1 B^T P."""
    P = solve_care(sys.A, sys.B, sys.Q, sys.R, sys.beta)
    K = -np.linalg.solve(sys.R, sys.B.T @ P)
    return LinearPolicy(K=K), QuadraticValue(P=P, constant=_value_constant(sys, P))


def lqr_optimal_1d(sys: LqrSystem) -> LinearPolicy:
    """Scalar closed form K = ((beta/2 - A) - sqrt((beta/2 - A)^2 + Q B^2/R))/B."""
    if sys.state_dim != 1 or sys.action_dim != 1:
        raise ConfigError("closed-form gain requires a 1D system")
    A = float(sys.A[0, 0])
    B = float(sys.B[0, 0])
    if B == 0.0:
        raise ConfigError("B must be nonzero")
    Q = float(sys.Q[0, 0])
    R = float(sys.R[0, 0])
    half = sys.beta / 2.0 - A
    K = (half - np.sqrt(half ** 2 + Q * B ** 2 / R)) / B
    return LinearPolicy(K=np.array([[K]]))


def lqr_policy_value(sys: LqrSystem, policy: LinearPolicy) -> QuadraticValue:
    """True discounted value of a fixed linear policy (Lyapunov equation)."""
    if np.any(policy.offset):
        raise ConfigError("policy values are quadratic only for zero-offset policies")
    F = sys.A + sys.B @ policy.K
    M = sys.Q + policy.K.T @ sys.R @ policy.K
    P = solve_policy_lyapunov(F, M, sys.beta)
    return QuadraticValue(P=P, constant=_value_constant(sys, P))


def phibe_effective_dynamics(sys: LqrSystem, dt: float, order: int = 1) -> EffectiveDynamics:
    """A_hat_i = (1/dt) sum_j a_j (e^{A j dt} - I);  B_hat_i via the phi-function
    route (1/dt) sum_j a_j * j dt * phi1(A, j dt) * B, which admits singular A."""
    dt = float(dt)
    if dt <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    coeffs = fd_coefficients(order)
    d = sys.state_dim
    A_hat = np.zeros((d, d))
    B_hat = np.zeros((d, sys.action_dim))
    eye = np.eye(d)
    for j, a_j in enumerate(coeffs, start=1):
        A_hat += a_j * (mat_exp(sys.A, j * dt) - eye)
        B_hat += a_j * (j * dt) * (phi1(sys.A, j * dt) @ sys.B)
    A_hat /= dt
    B_hat /= dt
    # commutation identity A B_hat = A_hat B (B_hat is a power series in A times B)
    gap = np.abs(sys.A @ B_hat - A_hat @ sys.B).max()
    scale = max(1.0, np.abs(A_hat).max() * max(1.0, np.abs(sys.B).max()))
    if gap > 1e-10 * scale:
        raise NumericalError(
            f"effective dynamics violate the commutation identity (gap {gap:.3e})"
        )
    return EffectiveDynamics(A_hat=A_hat, B_hat=B_hat, order=int(order), dt=dt)


def phibe_optimal(sys: LqrSystem, dt: float, order: int = 1) -> LinearPolicy:
    """Optimum of the LQR with the order-i effective dynamics."""
    eff = phibe_effective_dynamics(sys, dt, order)
    P = solve_care(eff.A_hat, eff.B_hat, sys.Q, sys.R, sys.beta)
    K = -np.linalg.solve(sys.R, eff.B_hat.T @ P)
    return LinearPolicy(K=K)


def _be_transformed(sys: LqrSystem, dt: float, discount_choice: str):
    """Per-step discount and the rescaled (beta, Q, R) of the one-step problem.

    The one-step fixed point with discount gamma and per-step rewards
    (Q_t, R_t) is, in continuous-style variables, an effective-dynamics LQR
    with beta_eff = (1/gamma - 1)/dt, Q_eff = Q_t/(gamma dt), and
    R_eff = R_t/(gamma dt).  The rational choice gamma = 1/(beta dt + 1) with
    (Q_t, R_t) = gamma dt (Q, R) makes those collapse to (beta, Q, R) exactly;
    the default exponential discount with (Q_t, R_t) = dt (Q, R) leaves the
    residual rescaling Q/gamma, R/gamma and beta_eff = (e^{beta dt} - 1)/dt.
    """
    if discount_choice == "exp":
        gamma = float(np.exp(-sys.beta * dt))
        Q_t = sys.Q * dt
        R_t = sys.R * dt
    elif discount_choice == "optimal":
        gamma = 1.0 / (sys.beta * dt + 1.0)
        Q_t = gamma * dt * sys.Q
        R_t = gamma * dt * sys.R
    else:
        raise ConfigError(f"unknown discount_choice {discount_choice!r}")
    beta_eff = (1.0 / gamma - 1.0) / dt
    Q_eff = Q_t / (gamma * dt)
    R_eff = R_t / (gamma * dt)
    return gamma, beta_eff, Q_eff, R_eff, Q_t, R_t


def _be_gain(P, A_hat, B_hat, R_eff, dt):
    lhs = R_eff + B_hat.T @ P @ B_hat * dt
    rhs = B_hat.T @ P + B_hat.T @ P @ A_hat * dt
    return -np.linalg.solve(lhs, rhs)


def _be_riccati_residual(P, A_hat, B_hat, beta_eff, Q_eff, R_eff, dt):
    shifted = A_hat - beta_eff / 2.0 * np.eye(A_hat.shape[0])
    gain_rhs = B_hat.T @ P + B_hat.T @ P @ A_hat * dt
    mid = np.linalg.solve(R_eff + B_hat.T @ P @ B_hat * dt, gain_rhs)
    return (
        shifted.T @ P
        + P @ shifted
        - gain_rhs.T @ mid
        + Q_eff
        + A_hat.T @ P @ A_hat * dt
    )


def be_optimal_1d(sys: LqrSystem, dt: float, discount_choice: str = "exp") -> LinearPolicy:
    """Scalar one-step optimum from the quadratic the modified Riccati reduces to."""
    if sys.state_dim != 1 or sys.action_dim != 1:
        raise ConfigError("the scalar route requires a 1D system")
    eff = phibe_effective_dynamics(sys, dt, 1)
    a_h = float(eff.A_hat[0, 0])
    b_h = float(eff.B_hat[0, 0])
    _, beta_eff, Q_eff, R_eff, _, _ = _be_transformed(sys, dt, discount_choice)
    q = float(Q_eff[0, 0])
    r = float(R_eff[0, 0])
    c2 = -(1.0 + beta_eff * dt) * b_h ** 2
    c1 = (2.0 * a_h - beta_eff) * r + q * b_h ** 2 * dt + a_h ** 2 * r * dt
    c0 = q * r
    disc = c1 ** 2 - 4.0 * c2 * c0
    P = (-c1 + np.sqrt(disc)) / (2.0 * c2)
    if P >= 0.0:
        P = (-c1 - np.sqrt(disc)) / (2.0 * c2)
    K = float(-(b_h * P + b_h * P * a_h * dt) / (r + b_h ** 2 * P * dt))
    return LinearPolicy(K=np.array([[K]]))


def be_optimal(sys: LqrSystem, dt: float, discount_choice: str = "exp") -> LinearPolicy:
    """One-step optimum in any dimension via the modified Riccati equation.

    The solve goes through the equivalent discounted discrete-time Riccati
    (one-step transition e^{A dt}, input B_hat_1 dt, per-step rewards and
    discount per discount_choice), then the result is verified against the
    modified Riccati residual and polished by policy iteration if needed.
    """
    eff = phibe_effective_dynamics(sys, dt, 1)
    A_hat, B_hat = eff.A_hat, eff.B_hat
    gamma, beta_eff, Q_eff, R_eff, Q_t, R_t = _be_transformed(sys, dt, discount_choice)
    A_t = mat_exp(sys.A, dt)
    B_t = B_hat * dt
    sq = np.sqrt(gamma)
    try:
        X = scipy.linalg.solve_discrete_are(sq * A_t, sq * B_t, -Q_t, -R_t)
        P = -X
    except Exception as exc:
        raise NumericalError(f"one-step Riccati solve failed: {exc}") from exc

    scale = 1.0 + float(np.abs(P).max())
    for _ in range(_BE_RICCATI_MAX_ITERS):
        res = _be_riccati_residual(P, A_hat, B_hat, beta_eff, Q_eff, R_eff, dt)
        if np.abs(res).max() < _BE_RICCATI_TOL * scale:
            break
        # policy-iteration polish on the discounted discrete problem
        K = -gamma * np.linalg.solve(R_t + gamma * B_t.T @ P @ B_t, B_t.T @ P @ A_t)
        F = A_t + B_t @ K
        P = scipy.linalg.solve_discrete_lyapunov(sq * F.T, Q_t + K.T @ R_t @ K)
        scale = 1.0 + float(np.abs(P).max())
    else:
        raise NumericalError(
            f"one-step Riccati iteration did not reach residual {_BE_RICCATI_TOL:g} "
            f"after {_BE_RICCATI_MAX_ITERS} iterations"
        )
    return LinearPolicy(K=_be_gain(P, A_hat, B_hat, R_eff, dt))


def merton_optimal(market: MertonMarket) -> float:
    """Constant optimal allocation (branch logic lives on the market)."""
    return float(market.optimal_allocation())


def merton_policy_value(market: MertonMarket, allocation: float) -> float:
    """Coefficient c with V(W) = c W^{1-gamma} for a constant allocation."""
    denom = market.value_denominator(allocation)
    if denom <= 0.0:
        raise NumericalError(
            f"divergent value: discounted utility of allocation {allocation} "
            f"does not converge (denominator {denom:.3e})"
        )
    p = 1.0 - market.gamma_risk
    return float(1.0 / (p * denom))


def l2_distance_on_box(f, g, box, grid_points: int = None) -> float:
    """Composite-trapezoid L2 distance of two scalar fields on a box.

    box is (lo, hi) in 1D or ((lo, hi), (lo, hi)) in 2D; f and g take (N, d)
    arrays of points and return (N,) values.  Default grids: 601 points in 1D,
    201 per axis in 2D.
    """
    box = np.asarray(box, dtype=float)
    if box.shape == (2,):
        n = 601 if grid_points is None else int(grid_points)
        xs = np.linspace(box[0], box[1], n)
        pts = xs[:, None]
        diff2 = np.asarray(f(pts) - g(pts), dtype=float) ** 2
        return float(np.sqrt(np.trapezoid(diff2, xs)))
    if box.shape == (2, 2):
        n = 201 if grid_points is None else int(grid_points)
        xs = np.linspace(box[0, 0], box[0, 1], n)
        ys = np.linspace(box[1, 0], box[1, 1], n)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        diff2 = (np.asarray(f(pts) - g(pts), dtype=float) ** 2).reshape(n, n)
        inner = np.trapezoid(diff2, ys, axis=1)
        return float(np.sqrt(np.trapezoid(inner, xs)))
    raise ConfigError(f"box must be (2,) or (2, 2), got shape {box.shape}")


def lqr_error_oracle(sys: LqrSystem, box=(-3.0, 3.0), grid_points: int = None):
    """Per-iteration error callable for the policy-iteration trace.

    Records the gain gap to the true optimum, the L2 distance of the fitted
    value to V*, and the L2 distance of the policy's true value to V* (the
    latter is infinite when the closed loop is not stable enough for the
    discounted value to exist).
    """
    pol_star, val_star = lqr_optimal(sys)
    if sys.state_dim == 2:
        box = np.asarray(box, dtype=float)
        if box.shape == (2,):
            box = np.stack([box, box])

    def oracle(policy: LinearPolicy, value_estimate) -> dict:
        out = {"policy_gap": float(np.abs(policy.K - pol_star.K).max())}
        if value_estimate is not None:
            out["value_error_estimate"] = l2_distance_on_box(
                value_estimate.value, val_star.evaluate, box, grid_points
            )
        try:
            pv = lqr_policy_value(sys, policy)
            out["value_error_policy"] = l2_distance_on_box(
                pv.evaluate, val_star.evaluate, box, grid_points
            )
        except NumericalError:
            out["value_error_policy"] = float("inf")
        return out

    return oracle


def merton_error_oracle(market: MertonMarket):
    """Per-iteration error callable for portfolio runs: allocation gap and the
    gap of the policy's closed-form value coefficient to the optimal one."""
    a_star = merton_optimal(market)
    c_star = merton_policy_value(market, a_star)

    def oracle(policy: LinearPolicy, value_estimate) -> dict:
        a = float(policy.offset[0])
        out = {"allocation_gap": abs(a - a_star)}
        try:
            out["value_coeff_gap"] = abs(merton_policy_value(market, a) - c_star)
        except NumericalError:
            out["value_coeff_gap"] = float("inf")
        if value_estimate is not None:
            out["value_coeff_estimate"] = float(value_estimate.coeffs.weights[0])
        return out

    return oracle
