"""Policy iteration drivers and closed-form policy improvement.

The policy class is linear feedback a = K s + offset; constant policies
(portfolio allocations) use K = 0.  Policy improvement reads the quadratic
block structure of a fitted q estimate and maximizes in closed form, so no
numeric optimizer is involved: for quadratic state-action bases the argmax is
linear in s, for the portfolio basis it is the parabola vertex projected onto
the admissible box.

IterationTrace records one entry per policy-iteration round (policy, value
coefficients, q coefficients, oracle errors, wall time) and serializes to JSON
and to long-format CSV.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from zlib import crc32

import numpy as np

from .basis import MertonQBasis, QuadraticStateActionBasis
from .coefficients import fd_coefficients
from .environments import (
    MertonMarket,
    TrajectoryBatch,
    lqr_held_moments,
    lqr_policy_moments,
    merton_held_moments,
    sample_lqr_batch,
    sample_merton_batch,
    sample_policy_lqr_batch,
    sample_policy_merton_batch,
    spawn_rng,
)
from .errors import ConfigError, NumericalError
from .policy_eval import (
    ValueEstimate,
    be_policy_evaluation,
    phibe_galerkin_from_estimates,
    phibe_policy_evaluation,
)
from .q_approx import (
    QEstimate,
    be_q_evaluation,
    phibe_q_from_estimates,
    phibe_q_galerkin,
    phibe_q_gradient_descent,
)

__all__ = [
    "LinearPolicy",
    "BatchPlan",
    "IterationTrace",
    "improve_policy",
    "optimal_phibe_pi",
    "optimal_be_pi",
]

DEFAULT_MERTON_ACTION_CAP = 5.0


@dataclass(frozen=True, eq=False)
class LinearPolicy:
    """Feedback law a = K s + offset; constant policies have K = 0."""

    K: np.ndarray
    offset: np.ndarray = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 0:
            K = K.reshape(1, 1)
        if K.ndim != 2:
            raise ConfigError(f"K must be a matrix, got shape {K.shape}")
        offset = self.offset
        if offset is None:
            offset = np.zeros(K.shape[0])
        offset = np.asarray(offset, dtype=float).reshape(-1)
        if offset.shape[0] != K.shape[0]:
            raise ConfigError(
                f"offset length {offset.shape[0]} does not match K rows {K.shape[0]}"
            )
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(offset))):
            raise ConfigError("policy contains non-finite entries")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def constant(cls, value: float, state_dim: int = 1) -> "LinearPolicy":
        return cls(K=np.zeros((1, state_dim)), offset=np.array([float(value)]))

    def __call__(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        return s @ self.K.T + self.offset

    def is_constant(self) -> bool:
        return not np.any(self.K)


def improve_policy(q: QEstimate, action_box=None) -> LinearPolicy:
    """Closed-form argmax of a fitted quadratic-in-action q estimate.

    Raises "non-concave q in action" when the action-quadratic block is not
    negative definite: that signals a bad q fit and silently clamping it would
    hide the failure.
    """
    basis = q.coeffs.basis
    w = q.coeffs.weights
    if isinstance(basis, MertonQBasis):
        w2 = w[basis.quad_index]
        if w2 >= 0.0:
            raise NumericalError(f"non-concave q in action (quadratic weight {w2:.3e})")
        vertex = -w[basis.linear_index] / (2.0 * w2)
        lo, hi = (0.0, DEFAULT_MERTON_ACTION_CAP) if action_box is None else map(float, action_box)
        return LinearPolicy.constant(float(np.clip(vertex, lo, hi)))
    if isinstance(basis, QuadraticStateActionBasis):
        Waa, Wsa = basis.action_blocks(w)
        eigs = np.linalg.eigvalsh(Waa)
        if eigs.max() >= 0.0:
            raise NumericalError(
                f"non-concave q in action (max eigenvalue {eigs.max():.3e})"
            )
        K = -0.5 * np.linalg.solve(Waa, Wsa.T)
        if action_box is not None:
            raise ConfigError("action constraints are not supported for linear-quadratic policies")
        return LinearPolicy(K=K)
    raise ConfigError(f"no closed-form policy improvement for basis {type(basis).__name__}")


@dataclass(frozen=True, eq=False)
class BatchPlan:
    """Data-generation plan for one policy-iteration run.

    q_num_traj/q_steps size the exploration batch used for q estimation
    (generated once, actions held ``order`` steps); pi_num_traj/pi_steps size
    the per-iteration policy batch.  ``application`` selects how the policy
    batch applies the policy (piecewise per step, or exactly closed-loop).
    """

    q_num_traj: int
    q_steps: int
    pi_num_traj: int
    pi_steps: int
    init_box: tuple = (-3.0, 3.0)
    action_box: tuple = (-3.0, 3.0)
    application: str = "piecewise"

    def __post_init__(self):
        for name in ("q_num_traj", "q_steps", "pi_num_traj", "pi_steps"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.application not in ("piecewise", "continuous"):
            raise ConfigError(f"unknown application mode {self.application!r}")


@dataclass(eq=False)
class IterationTrace:
    """Per-iteration records of a policy-iteration run."""

    records: list = field(default_factory=list)

    def append(self, iteration, policy, value_coeffs, q_coeffs, errors, wall_time, seed):
        self.records.append({
            "iteration": int(iteration),
            "policy_K": np.asarray(policy.K, dtype=float).tolist(),
            "policy_offset": np.asarray(policy.offset, dtype=float).tolist(),
            "value_coeffs": None if value_coeffs is None else np.asarray(value_coeffs).tolist(),
            "q_coeffs": None if q_coeffs is None else np.asarray(q_coeffs).tolist(),
            "errors": {k: float(v) for k, v in (errors or {}).items()},
            "wall_time": float(wall_time),
            "seed": seed,
        })

    def __len__(self):
        return len(self.records)

    def final_policy_matrix(self) -> np.ndarray:
        return np.asarray(self.records[-1]["policy_K"])

    def error_series(self, name: str) -> np.ndarray:
        return np.array([r["errors"].get(name, np.nan) for r in self.records])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"records": self.records}, indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "IterationTrace":
        return cls(records=json.loads(Path(path).read_text())["records"])

    def to_csv(self, path) -> None:
        """Long format: iteration, metric, value (policies flattened entrywise)."""
        lines = ["iteration,metric,value"]
        for rec in self.records:
            it = rec["iteration"]
            K = np.asarray(rec["policy_K"]).ravel()
            for idx, v in enumerate(K):
                lines.append(f"{it},policy_K_{idx},{float(v)!r}")
            for idx, v in enumerate(rec["policy_offset"]):
                lines.append(f"{it},policy_offset_{idx},{float(v)!r}")
            if rec["value_coeffs"] is not None:
                for idx, v in enumerate(np.asarray(rec["value_coeffs"]).ravel()):
                    lines.append(f"{it},value_coeff_{idx},{float(v)!r}")
            for name, v in rec["errors"].items():
                lines.append(f"{it},{name},{float(v)!r}")
            lines.append(f"{it},wall_time,{float(rec['wall_time'])!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def _resolve_beta(env, beta):
    if beta is None:
        return env.beta
    beta = float(beta)
    if abs(beta - env.beta) > 1e-12:
        raise ConfigError(
            f"beta argument {beta} disagrees with the environment's beta {env.beta}"
        )
    return beta


def _run_oracle(oracle, policy, value_estimate) -> dict:
    if oracle is None:
        return {}
    out = oracle(policy, value_estimate)
    return dict(out) if out else {}


def _policy_gap(policy_a: LinearPolicy, policy_b: LinearPolicy) -> float:
    return float(
        np.abs(policy_a.K - policy_b.K).max()
        + np.abs(policy_a.offset - policy_b.offset).max()
    )


def optimal_phibe_pi(
    env,
    dt: float,
    Phi,
    Psi,
    pi0: LinearPolicy,
    order: int = 1,
    q_method: str = "galerkin",
    gd_alpha: float = None,
    batch_plan: BatchPlan = None,
    iterations: int = 15,
    seed: int = 0,
    oracle=None,
    beta: float = None,
    diffusion_mode_value: str = None,
    diffusion_mode_q: str = None,
    exact_expectation: bool = False,
    stop_tol: float = None,
) -> tuple[LinearPolicy, ValueEstimate, IterationTrace]:
    """Order-i policy iteration driven by the drift/diffusion estimators.

    The exploration batch for q estimation is generated once before the loop
    (actions re-drawn every ``order`` steps); each round then samples a fresh
    policy batch, evaluates the value by the order-i Galerkin method, fits q
    against the evaluated value on the exploration batch, and improves the
    policy in closed form.  With exact_expectation the sampled increments are
    replaced by their conditional moments at the same (s, a) points, which
    isolates discretization bias from Monte-Carlo noise.

    Default diffusion modes: the value step uses the empirical second-moment
    term only when the environment is noisy; the q step omits it for LQR
    (deterministic formulation) and keeps it for the portfolio problem.
    """
    if batch_plan is None:
        raise ConfigError("batch_plan is required")
    beta = _resolve_beta(env, beta)
    order = int(order)
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    if q_method not in ("galerkin", "gd"):
        raise ConfigError(f"unknown q_method {q_method!r}")
    is_merton = isinstance(env, MertonMarket)
    if diffusion_mode_value is None:
        if is_merton:
            diffusion_mode_value = "empirical"
        else:
            diffusion_mode_value = "empirical" if env.sigma > 0 else "zero"
    if diffusion_mode_q is None:
        diffusion_mode_q = "empirical" if is_merton else "zero"

    trace = IterationTrace()
    policy = pi0
    value = None
    q_weights = None

    # exploration data for the q step, generated once
    if exact_expectation:
        q_states, q_actions, q_rewards, q_bhat, q_sigma = _exact_q_inputs(
            env, dt, order, batch_plan, seed
        )
    else:
        if is_merton:
            q_batch = sample_merton_batch(
                env, dt, batch_plan.q_num_traj, batch_plan.q_steps,
                batch_plan.init_box, batch_plan.action_box,
                hold_steps=order, seed=_derived(seed, "q"),
            )
        else:
            q_batch = sample_lqr_batch(
                env, dt, batch_plan.q_num_traj, batch_plan.q_steps,
                batch_plan.init_box, batch_plan.action_box,
                hold_steps=order, seed=_derived(seed, "q"),
            )

    for k in range(int(iterations)):
        t0 = time.perf_counter()
        iter_seed = _derived(seed, "pi", k)
        try:
            value = _phibe_evaluate_policy(
                env, dt, policy, Phi, beta, order, diffusion_mode_value,
                batch_plan, iter_seed, exact_expectation,
            )
            if exact_expectation:
                q = phibe_q_from_estimates(
                    q_states, q_actions, q_rewards, q_bhat, q_sigma,
                    Psi, value, diffusion_mode_q,
                )
            elif q_method == "galerkin":
                q = phibe_q_galerkin(q_batch, Psi, value, dt, order, diffusion_mode_q)
            else:
                omega0 = q_weights if q_weights is not None else np.zeros(Psi.size)
                q = phibe_q_gradient_descent(
                    q_batch, Psi, value, omega0=omega0,
                    alpha=gd_alpha, dt=dt, order=order,
                    diffusion_mode=diffusion_mode_q,
                )
            q_weights = q.coeffs.weights
            new_policy = improve_policy(
                q, action_box=(batch_plan.action_box if is_merton else None)
            )
        except NumericalError as exc:
            raise NumericalError(f"iteration {k}: {exc}") from exc
        wall = time.perf_counter() - t0
        errors = _run_oracle(oracle, new_policy, value)
        trace.append(k, new_policy, value.coeffs.weights, q_weights, errors, wall, iter_seed)
        converged = stop_tol is not None and _policy_gap(new_policy, policy) < stop_tol
        policy = new_policy
        if converged:
            break

    value = _phibe_evaluate_policy(
        env, dt, policy, Phi, beta, order, diffusion_mode_value,
        batch_plan, _derived(seed, "pi", int(iterations)), exact_expectation,
    )
    return policy, value, trace


def _derived(seed: int, *tags) -> int:
    """Stable per-purpose integer seeds from the master seed."""
    h = int(seed) & 0xFFFFFFFF
    for t in tags:
        word = crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF
        h = crc32(h.to_bytes(4, "little") + word.to_bytes(4, "little"))
    return h


def _exact_q_inputs(env, dt, order, plan: BatchPlan, seed):
    """Uniform (s, a) design points with closed-form increment moments."""
    n_points = plan.q_num_traj * plan.q_steps
    rng_states = spawn_rng(_derived(seed, "q", "design"))
    is_merton = isinstance(env, MertonMarket)
    d = 1 if is_merton else env.state_dim
    m = 1 if is_merton else env.action_dim
    lo, hi = np.asarray(plan.init_box, dtype=float)
    alo, ahi = np.asarray(plan.action_box, dtype=float)
    states = rng_states.uniform(lo, hi, size=(n_points, d))
    actions = rng_states.uniform(alo, ahi, size=(n_points, m))
    coeffs = fd_coefficients(order)
    b_hat = np.zeros((n_points, d))
    sigma_hat = np.zeros((n_points, d, d))
    for k in range(1, order + 1):
        if is_merton:
            dm, d2 = merton_held_moments(env, dt, k, states[:, 0], actions[:, 0])
        else:
            dm, d2 = lqr_held_moments(env, dt, k, states, actions)
        b_hat += coeffs[k - 1] * dm
        sigma_hat += coeffs[k - 1] * d2
    b_hat /= dt
    sigma_hat /= dt
    if is_merton:
        rewards = env.reward(states[:, 0])
    else:
        rewards = env.reward(states, actions)
    return states, actions, rewards, b_hat, sigma_hat


def _exact_pi_inputs(env, dt, order, policy, plan: BatchPlan, seed):
    n_points = plan.pi_num_traj * plan.pi_steps
    rng = spawn_rng(_derived(seed, "design"))
    is_merton = isinstance(env, MertonMarket)
    d = 1 if is_merton else env.state_dim
    lo, hi = np.asarray(plan.init_box, dtype=float)
    states = rng.uniform(lo, hi, size=(n_points, d))
    coeffs = fd_coefficients(order)
    b_hat = np.zeros((n_points, d))
    sigma_hat = np.zeros((n_points, d, d))
    if is_merton:
        alloc = float(np.asarray(policy.offset).reshape(()))
        actions = np.full((n_points, 1), alloc)
        for k in range(1, order + 1):
            dm, d2 = merton_held_moments(env, dt, k, states[:, 0], actions[:, 0])
            b_hat += coeffs[k - 1] * dm
            sigma_hat += coeffs[k - 1] * d2
        rewards = env.reward(states[:, 0])
    else:
        actions = policy(states)
        for k in range(1, order + 1):
            dm, d2 = lqr_policy_moments(env, dt, k, states, policy, plan.application)
            b_hat += coeffs[k - 1] * dm
            sigma_hat += coeffs[k - 1] * d2
        rewards = env.reward(states, actions)
    return states, rewards, b_hat / dt, sigma_hat / dt


def _phibe_evaluate_policy(env, dt, policy, Phi, beta, order, diffusion_mode,
                           plan: BatchPlan, seed, exact_expectation):
    if exact_expectation:
        states, rewards, b_hat, sigma_hat = _exact_pi_inputs(
            env, dt, order, policy, plan, seed
        )
        return phibe_galerkin_from_estimates(
            states, rewards, b_hat, sigma_hat, Phi, beta, diffusion_mode
        )
    if isinstance(env, MertonMarket):
        batch = sample_policy_merton_batch(
            env, dt, policy, plan.pi_num_traj, plan.pi_steps,
            plan.init_box, seed=seed,
        )
    else:
        batch = sample_policy_lqr_batch(
            env, dt, policy, plan.pi_num_traj, plan.pi_steps,
            plan.init_box, seed=seed, application=plan.application,
        )
    return phibe_policy_evaluation(batch, Phi, beta, dt, order, diffusion_mode)


def optimal_be_pi(
    env,
    dt: float,
    Phi,
    Psi,
    pi0: LinearPolicy,
    batch_plan: BatchPlan = None,
    iterations: int = 15,
    seed: int = 0,
    oracle=None,
    beta: float = None,
    discount_choice: str = "exp",
    stop_tol: float = None,
) -> tuple[LinearPolicy, ValueEstimate, IterationTrace]:
    """One-step Bellman policy iteration (the discrete-time MDP baseline).

    Per round: sample a batch whose first action is uniformly random and whose
    later steps follow the current policy, fit Q by the one-step temporal
    difference system, improve greedily.  The final value is estimated from a
    fresh policy batch.  When the discount factor reaches 1 (beta = 0) the
    held-action temporal-difference columns for action-only features vanish
    identically, so the solver switches to the recorded next action; see
    q_approx.be_q_evaluation.
    """
    if batch_plan is None:
        raise ConfigError("batch_plan is required")
    beta = _resolve_beta(env, beta)
    if discount_choice not in ("exp", "optimal"):
        raise ConfigError(f"unknown discount_choice {discount_choice!r}")
    is_merton = isinstance(env, MertonMarket)
    gamma = float(np.exp(-beta * dt)) if discount_choice == "exp" else 1.0 / (beta * dt + 1.0)
    next_action = "recorded_next" if gamma >= 1.0 - 1e-12 else "hold"

    trace = IterationTrace()
    policy = pi0
    value = None
    for k in range(int(iterations)):
        t0 = time.perf_counter()
        iter_seed = _derived(seed, "be", k)
        if is_merton:
            batch = sample_merton_batch(
                env, dt, batch_plan.q_num_traj, batch_plan.q_steps,
                batch_plan.init_box, batch_plan.action_box,
                hold_steps=1, seed=iter_seed,
            )
            batch = _merton_follow_policy(env, dt, batch, policy, iter_seed)
        else:
            batch = sample_policy_lqr_batch(
                env, dt, policy, batch_plan.q_num_traj, batch_plan.q_steps,
                batch_plan.init_box, seed=iter_seed,
                explore_first=True, action_box=batch_plan.action_box,
            )
        try:
            q = be_q_evaluation(batch, Psi, beta, dt, discount_choice=discount_choice,
                                next_action=next_action)
            new_policy = improve_policy(
                q, action_box=(batch_plan.action_box if is_merton else None)
            )
        except NumericalError as exc:
            raise NumericalError(f"iteration {k}: {exc}") from exc
        wall = time.perf_counter() - t0
        errors = _run_oracle(oracle, new_policy, value)
        trace.append(k, new_policy, None, q.coeffs.weights, errors, wall, iter_seed)
        converged = stop_tol is not None and _policy_gap(new_policy, policy) < stop_tol
        policy = new_policy
        if converged:
            break

    # final value of the converged policy from a fresh policy batch
    if is_merton:
        final_batch = sample_policy_merton_batch(
            env, dt, policy, batch_plan.pi_num_traj, batch_plan.pi_steps,
            batch_plan.init_box, seed=_derived(seed, "be", int(iterations)),
        )
    else:
        final_batch = sample_policy_lqr_batch(
            env, dt, policy, batch_plan.pi_num_traj, batch_plan.pi_steps,
            batch_plan.init_box, seed=_derived(seed, "be", int(iterations)),
        )
    value = be_policy_evaluation(final_batch, Phi, beta, dt, discount_choice=discount_choice)
    return policy, value, trace


def _merton_follow_policy(env, dt, batch, policy, seed):
    """Rebuild a portfolio batch so steps after the first follow the policy."""
    alloc = float(np.asarray(policy.offset).reshape(()))
    actions = batch.actions.copy()
    actions[:, 1:, :] = alloc
    rng = spawn_rng(_derived(seed, "refollow"))
    L, I = actions.shape[:2]
    states = batch.states.copy()
    sqrt_dt = np.sqrt(batch.dt)
    for j in range(1, I):
        W = states[:, j, 0]
        m, v = env.drift_vol(actions[:, j, 0])
        z = rng.standard_normal(L)
        states[:, j + 1, 0] = W * np.exp((m - 0.5 * v ** 2) * batch.dt + v * sqrt_dt * z)
    rewards = env.reward(states[:, :I, 0])
    return TrajectoryBatch(dt=batch.dt, states=states, actions=actions, rewards=rewards,
                           seed=batch.seed, hold_steps=1, lengths=None)
