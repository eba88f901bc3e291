"""LQR and portfolio environments with exact discrete-time transition sampling.

Data is generated from the exact transition law of the continuous dynamics
under piecewise-constant actions, never from an Euler scheme, so any error in
downstream estimates is attributable to the learning method rather than to
simulation.  For the linear system ds = (As + Ba)dt + sigma dB the one-step
law is Gaussian with mean e^{A dt} s + dt phi1(A, dt) B a and covariance
sigma^2 dt gram_integral(A, dt); for the wealth process the step is the exact
log-normal map.

Trajectory batches are stored as dense (L, I+1, d) / (L, I, m) / (L, I)
arrays with per-trajectory valid lengths, and serialize to a columnar CSV
plus a JSON header.

The closed-form k-step conditional moments (`lqr_held_moments`,
`lqr_policy_moments`, `merton_held_moments`) back the exact-expectation mode
of the iteration drivers, replacing sampled increments by their conditional
expectations.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from zlib import crc32

import numpy as np

from .errors import ConfigError, NumericalError
from .matcore import (
    gram_integral,
    hautus_detectable,
    hautus_stabilizable,
    mat_exp,
    phi1,
)

__all__ = [
    "LqrSystem",
    "MertonMarket",
    "TransitionKernel",
    "TrajectoryBatch",
    "spawn_rng",
    "lqr_exact_transition",
    "sample_lqr_batch",
    "sample_policy_lqr_batch",
    "merton_step",
    "sample_merton_batch",
    "sample_policy_merton_batch",
    "lqr_held_moments",
    "lqr_policy_moments",
    "merton_held_moments",
]

BLOWUP_LIMIT = 1e8
WEALTH_FLOOR = 1e-12


def spawn_rng(seed, *tags) -> np.random.Generator:
    """Counter-based generator keyed by an integer seed plus string/int tags.

    Tags are hashed into the seed sequence, so independent streams (per
    iteration, per purpose) are reproducible from the one master seed.
    """
    entropy = [int(seed)]
    for t in tags:
        entropy.append(crc32(t.encode()) if isinstance(t, str) else int(t))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _matrix(value, shape, name: str) -> np.ndarray:
    out = np.asarray(value, dtype=float)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    if out.shape != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{name} contains non-finite entries")
    return out


def _negative_definite(M: np.ndarray, name: str) -> np.ndarray:
    if np.abs(M - M.T).max() > 1e-10 * max(1.0, np.abs(M).max()):
        raise ConfigError(f"{name} must be symmetric")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M).max() >= 0.0:
        raise ConfigError(f"{name} must be negative definite")
    return M


@dataclass(frozen=True, eq=False)
class LqrSystem:
    """Linear dynamics ds = (As + Ba)dt + sigma dB with reward s'Qs + a'Ra.

    Q and R are symmetric negative definite (reward maximization), beta is the
    discount rate.  A positive noise level requires beta > 0, otherwise the
    discounted value integral diverges.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    sigma: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 0:
            A = A.reshape(1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"A must be square, got shape {A.shape}")
        d = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 0:
            B = B.reshape(1, 1)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != d:
            raise ConfigError(f"B must have {d} rows, got shape {B.shape}")
        m = B.shape[1]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", _negative_definite(_matrix(self.Q, (d, d), "Q"), "Q"))
        object.__setattr__(self, "R", _negative_definite(_matrix(self.R, (m, m), "R"), "R"))
        sigma = float(self.sigma)
        beta = float(self.beta)
        if sigma < 0.0:
            raise ConfigError(f"sigma must be nonnegative, got {sigma}")
        if beta < 0.0:
            raise ConfigError(f"beta must be nonnegative, got {beta}")
        if sigma > 0.0 and beta <= 0.0:
            raise ConfigError("beta must be positive when sigma > 0 (value diverges otherwise)")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "beta", beta)
        A_shift = A - 0.5 * beta * np.eye(d)
        if not hautus_stabilizable(A_shift, B):
            raise ConfigError("(A - beta/2 I, B) is not stabilizable")
        if not hautus_detectable(A_shift, self.Q):
            raise ConfigError("(A - beta/2 I, Q) is not detectable")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    def reward(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        return np.einsum("ni,ij,nj->n", s, self.Q, s) + np.einsum(
            "nk,kl,nl->n", a, self.R, a
        )


@dataclass(frozen=True, eq=False)
class MertonMarket:
    """Wealth dynamics for the two-rate portfolio problem with power utility.

    The allocation a >= 0 is the fraction of wealth in the risky asset; the
    drift is a*mu + (1-a)*r while a <= 1 (lending) and a*mu - (a-1)*r_b above
    (borrowing at the higher rate r_b).  Reward flow is W^(1-gamma)/(1-gamma).
    """

    r: float
    r_b: float
    mu: float
    sigma: float
    gamma_risk: float
    beta: float

    def __post_init__(self):
        for name in ("r", "r_b", "mu", "sigma", "gamma_risk", "beta"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.r_b > self.r:
            raise ConfigError(f"r_b must exceed r, got r={self.r}, r_b={self.r_b}")
        if self.sigma <= 0.0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.gamma_risk <= 0.0 or self.gamma_risk == 1.0:
            raise ConfigError(f"gamma_risk must be positive and not 1, got {self.gamma_risk}")
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        a_star = self.optimal_allocation()
        if self.value_denominator(a_star) <= 0.0:
            raise ConfigError(
                "discounted value diverges at the optimal allocation "
                f"(denominator {self.value_denominator(a_star):.3e})"
            )

    def drift_vol(self, allocation) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(allocation, dtype=float)
        if np.any(a < 0.0):
            raise ConfigError("allocations must be nonnegative")
        m = np.where(a <= 1.0, a * self.mu + (1.0 - a) * self.r,
                     a * self.mu - (a - 1.0) * self.r_b)
        return m, self.sigma * a

    def reward(self, wealth) -> np.ndarray:
        W = np.asarray(wealth, dtype=float)
        p = 1.0 - self.gamma_risk
        return W ** p / p

    def value_denominator(self, allocation) -> float:
        """beta - (1-gamma) m + gamma (1-gamma) v^2 / 2 for a constant allocation."""
        m, v = self.drift_vol(allocation)
        p = 1.0 - self.gamma_risk
        return float(self.beta - p * m + self.gamma_risk * p * v ** 2 / 2.0)

    def optimal_allocation(self) -> float:
        lend = (self.mu - self.r) / (self.gamma_risk * self.sigma ** 2)
        if lend <= 1.0:
            return float(lend)
        borrow = (self.mu - self.r_b) / (self.gamma_risk * self.sigma ** 2)
        return float(max(1.0, borrow))


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """One-step law s' ~ N(state_map s + action_map a, covariance)."""

    state_map: np.ndarray
    action_map: np.ndarray
    covariance: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "state_map", np.asarray(self.state_map, dtype=float))
        object.__setattr__(self, "action_map", np.asarray(self.action_map, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "covariance", cov)
        if np.any(np.linalg.eigvalsh(cov) < -1e-12):
            raise ConfigError("covariance must be positive semidefinite")
        if np.abs(cov).max() == 0.0:
            chol = None
        else:
            # tiny jitter-free square root via eigen decomposition, robust to
            # semidefinite covariances
            w, V = np.linalg.eigh(cov)
            chol = V * np.sqrt(np.clip(w, 0.0, None))
        object.__setattr__(self, "_sqrt", chol)

    @property
    def is_deterministic(self) -> bool:
        return self._sqrt is None

    def mean(self, states, actions) -> np.ndarray:
        return states @ self.state_map.T + actions @ self.action_map.T

    def sample(self, states, actions, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean(states, actions)
        if self._sqrt is None:
            return mean
        z = rng.standard_normal(mean.shape)
        return mean + z @ self._sqrt.T


def lqr_exact_transition(sys: LqrSystem, dt: float) -> TransitionKernel:
    """Exact one-step kernel for action held constant over [0, dt)."""
    dt = float(dt)
    if dt <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    state_map = mat_exp(sys.A, dt)
    action_map = dt * phi1(sys.A, dt) @ sys.B
    cov = sys.sigma ** 2 * dt * gram_integral(sys.A, dt)
    return TransitionKernel(state_map, action_map, cov, dt)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Dense trajectory storage: states (L, I+1, d), actions (L, I, m), rewards (L, I).

    ``lengths`` holds the number of valid transitions per trajectory (equal to
    I except when a trajectory was truncated, e.g. by the wealth floor); rows
    past a trajectory's length are padding and are skipped by estimators and
    serialization.
    """

    dt: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    seed: int | None = None
    hold_steps: int = 1
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        actions = np.asarray(self.actions, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        if states.ndim != 3:
            raise ConfigError(f"states must be (L, I+1, d), got shape {states.shape}")
        L, Ip1, d = states.shape
        if actions.ndim != 3 or actions.shape[:2] != (L, Ip1 - 1):
            raise ConfigError(
                f"actions must be ({L}, {Ip1 - 1}, m), got shape {actions.shape}"
            )
        if rewards.shape != (L, Ip1 - 1):
            raise ConfigError(
                f"rewards must be ({L}, {Ip1 - 1}), got shape {rewards.shape}"
            )
        if float(self.dt) <= 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        lengths = self.lengths
        if lengths is None:
            lengths = np.full(L, Ip1 - 1, dtype=int)
        else:
            lengths = np.asarray(lengths, dtype=int)
            if lengths.shape != (L,) or np.any(lengths < 0) or np.any(lengths > Ip1 - 1):
                raise ConfigError("lengths must be per-trajectory counts within [0, I]")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "hold_steps", int(self.hold_steps))

    @property
    def num_traj(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def to_csv(self, csv_path, header_path=None) -> None:
        csv_path = Path(csv_path)
        header_path = Path(header_path) if header_path else csv_path.with_suffix(".json")
        d, m = self.state_dim, self.action_dim
        header = {
            "dt": self.dt,
            "seed": self.seed,
            "hold_steps": self.hold_steps,
            "num_traj": self.num_traj,
            "steps": self.steps,
            "state_dim": d,
            "action_dim": m,
            "lengths": self.lengths.tolist(),
        }
        header_path.write_text(json.dumps(header, indent=1) + "\n")
        cols = (["traj_id", "step"] + [f"s_{i + 1}" for i in range(d)]
                + [f"a_{k + 1}" for k in range(m)] + ["reward"])
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for l in range(self.num_traj):
                n = int(self.lengths[l])
                for j in range(n + 1):
                    row = [l, j] + [repr(float(x)) for x in self.states[l, j]]
                    if j < n:
                        row += [repr(float(x)) for x in self.actions[l, j]]
                        row.append(repr(float(self.rewards[l, j])))
                    else:
                        row += ["nan"] * (m + 1)
                    writer.writerow(row)

    @classmethod
    def from_csv(cls, csv_path, header_path=None) -> "TrajectoryBatch":
        csv_path = Path(csv_path)
        header_path = Path(header_path) if header_path else csv_path.with_suffix(".json")
        header = json.loads(header_path.read_text())
        L, I = header["num_traj"], header["steps"]
        d, m = header["state_dim"], header["action_dim"]
        states = np.zeros((L, I + 1, d))
        actions = np.zeros((L, I, m))
        rewards = np.zeros((L, I))
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        for row in data:
            l, j = int(row[0]), int(row[1])
            states[l, j] = row[2:2 + d]
            if j < I and not math.isnan(row[2 + d]):
                actions[l, j] = row[2 + d:2 + d + m]
                rewards[l, j] = row[2 + d + m]
        return cls(
            dt=header["dt"], states=states, actions=actions, rewards=rewards,
            seed=header["seed"], hold_steps=header["hold_steps"],
            lengths=np.asarray(header["lengths"], dtype=int),
        )


def _box_bounds(box, dim: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        lo = np.full(dim, arr[0])
        hi = np.full(dim, arr[1])
    elif arr.shape == (dim, 2):
        lo, hi = arr[:, 0].copy(), arr[:, 1].copy()
    else:
        raise ConfigError(f"{name} must be (low, high) or a ({dim}, 2) array, got {arr.shape}")
    if np.any(hi <= lo):
        raise ConfigError(f"{name} must have high > low")
    return lo, hi


def _check_counts(num_traj: int, steps: int, hold_steps: int) -> tuple[int, int, int]:
    for name, value in (("num_traj", num_traj), ("steps", steps), ("hold_steps", hold_steps)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(num_traj), int(steps), int(hold_steps)


def _held_actions(rng, lo, hi, L: int, I: int, hold_steps: int) -> np.ndarray:
    """Uniform actions redrawn every hold_steps steps and held in between."""
    m = lo.shape[0]
    blocks = -(-I // hold_steps)
    draws = rng.uniform(lo, hi, size=(L, blocks, m))
    return np.repeat(draws, hold_steps, axis=1)[:, :I, :]


def sample_lqr_batch(
    sys: LqrSystem,
    dt: float,
    num_traj: int,
    steps: int,
    init_box,
    action_box,
    hold_steps: int = 1,
    seed: int = 0,
) -> TrajectoryBatch:
    """Exploration batch: uniform initial states, uniform held actions, exact kernel.

    Each action entry is drawn uniformly from action_box and held constant for
    ``hold_steps`` consecutive steps (batches destined for an order-i
    estimator use hold_steps = i).
    """
    L, I, hold = _check_counts(num_traj, steps, hold_steps)
    kernel = lqr_exact_transition(sys, dt)
    d, m = sys.state_dim, sys.action_dim
    s_lo, s_hi = _box_bounds(init_box, d, "init_box")
    a_lo, a_hi = _box_bounds(action_box, m, "action_box")
    rng = spawn_rng(seed, "lqr-explore")
    states = np.empty((L, I + 1, d))
    states[:, 0] = rng.uniform(s_lo, s_hi, size=(L, d))
    actions = _held_actions(rng, a_lo, a_hi, L, I, hold)
    for j in range(I):
        states[:, j + 1] = kernel.sample(states[:, j], actions[:, j], rng)
    rewards = _lqr_rewards(sys, states, actions)
    return TrajectoryBatch(dt=dt, states=states, actions=actions, rewards=rewards,
                           seed=seed, hold_steps=hold)


def _lqr_rewards(sys: LqrSystem, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    I = actions.shape[1]
    return (np.einsum("lji,ik,ljk->lj", states[:, :I], sys.Q, states[:, :I])
            + np.einsum("ljp,pq,ljq->lj", actions, sys.R, actions))


def _policy_arrays(policy, d: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(policy, "K"):
        K = np.asarray(policy.K, dtype=float)
        offset = np.asarray(getattr(policy, "offset", np.zeros(m)), dtype=float)
    else:
        K = np.asarray(policy, dtype=float)
        offset = np.zeros(m)
    if K.ndim == 0:
        K = K.reshape(1, 1)
    if K.shape != (m, d):
        raise ConfigError(f"policy matrix must have shape ({m}, {d}), got {K.shape}")
    offset = offset.reshape(m)
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(offset))):
        raise ConfigError("policy contains non-finite entries")
    return K, offset


def sample_policy_lqr_batch(
    sys: LqrSystem,
    dt: float,
    policy,
    num_traj: int,
    steps: int,
    init_box,
    seed: int = 0,
    application: str = "piecewise",
    explore_first: bool = False,
    action_box=None,
) -> TrajectoryBatch:
    """Batch generated by running a linear policy from uniform initial states.

    application = "piecewise" recomputes the action at every step and holds it
    over the interval (the sampled-data reading of "apply policy pi");
    "continuous" evolves the closed loop ds = (A + BK)s dt + sigma dB exactly,
    recording a^j = K s^j as the action in force at the window start.  With
    explore_first the first step's action is drawn uniformly from action_box
    (the shape required by the one-step Bellman batches).
    """
    L, I, _ = _check_counts(num_traj, steps, 1)
    if application not in ("piecewise", "continuous"):
        raise ConfigError(f"unknown application mode {application!r}")
    d, m = sys.state_dim, sys.action_dim
    K, offset = _policy_arrays(policy, d, m)
    s_lo, s_hi = _box_bounds(init_box, d, "init_box")
    rng = spawn_rng(seed, "lqr-policy")
    kernel = lqr_exact_transition(sys, dt)
    if application == "continuous":
        G = sys.A + sys.B @ K
        state_map = mat_exp(G, dt)
        drive = dt * phi1(G, dt) @ (sys.B @ offset)
        cov = sys.sigma ** 2 * dt * gram_integral(G, dt)
        closed_kernel = TransitionKernel(state_map, np.zeros((d, 1)), cov, dt)
    states = np.empty((L, I + 1, d))
    states[:, 0] = rng.uniform(s_lo, s_hi, size=(L, d))
    actions = np.empty((L, I, m))
    for j in range(I):
        s = states[:, j]
        if explore_first and j == 0:
            if action_box is None:
                raise ConfigError("explore_first requires an action_box")
            a_lo, a_hi = _box_bounds(action_box, m, "action_box")
            a = rng.uniform(a_lo, a_hi, size=(L, m))
            s_next = kernel.sample(s, a, rng)
        else:
            a = s @ K.T + offset
            if application == "continuous":
                s_next = closed_kernel.sample(s, np.zeros((L, 1)), rng) + drive
            else:
                s_next = kernel.sample(s, a, rng)
        worst = np.abs(s_next).max(axis=1)
        if np.any(worst > BLOWUP_LIMIT):
            bad = int(np.argmax(worst))
            raise NumericalError(
                f"closed-loop blow-up in trajectory {bad} at step {j + 1}"
            )
        actions[:, j] = a
        states[:, j + 1] = s_next
    rewards = _lqr_rewards(sys, states, actions)
    return TrajectoryBatch(dt=dt, states=states, actions=actions, rewards=rewards,
                           seed=seed, hold_steps=1)


def merton_step(market: MertonMarket, W: float, a: float, dt: float, noise: float) -> float:
    """Exact one-step wealth update W' = W exp((m - v^2/2) dt + v sqrt(dt) noise)."""
    if W <= 0.0:
        raise ConfigError(f"wealth must be positive, got {W}")
    m, v = market.drift_vol(a)
    return float(W * np.exp((m - 0.5 * v ** 2) * dt + v * np.sqrt(dt) * noise))


def _merton_rollout(market, dt, wealth0, actions, rng, wealth_floor):
    """Shared trajectory engine: exact log-normal steps with floor truncation."""
    L, I = actions.shape[:2]
    states = np.empty((L, I + 1, 1))
    states[:, 0, 0] = wealth0
    lengths = np.full(L, I, dtype=int)
    alive = np.ones(L, dtype=bool)
    sqrt_dt = np.sqrt(dt)
    for j in range(I):
        W = states[:, j, 0]
        m, v = market.drift_vol(actions[:, j, 0])
        z = rng.standard_normal(L)
        W_next = np.where(
            alive, W * np.exp((m - 0.5 * v ** 2) * dt + v * sqrt_dt * z), W
        )
        floored = alive & (W_next < wealth_floor)
        if np.any(floored):
            lengths[floored] = j
            alive &= ~floored
            W_next = np.where(floored, W, W_next)
        states[:, j + 1, 0] = W_next
    if np.any(lengths < I):
        warnings.warn(
            f"{int(np.sum(lengths < I))} trajectories truncated at the wealth floor "
            f"{wealth_floor:g}", RuntimeWarning,
        )
    rewards = market.reward(states[:, :I, 0])
    return states, rewards, lengths


def sample_merton_batch(
    market: MertonMarket,
    dt: float,
    num_traj: int,
    steps: int,
    init_wealth_box,
    action_box,
    hold_steps: int = 1,
    seed: int = 0,
    wealth_floor: float = WEALTH_FLOOR,
) -> TrajectoryBatch:
    """Exploration batch for the portfolio problem: uniform wealth and allocations."""
    L, I, hold = _check_counts(num_traj, steps, hold_steps)
    if float(dt) <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    w_lo, w_hi = _box_bounds(init_wealth_box, 1, "init_wealth_box")
    if w_lo[0] <= 0.0:
        raise ConfigError("init_wealth_box must be strictly positive")
    a_lo, a_hi = _box_bounds(action_box, 1, "action_box")
    if a_lo[0] < 0.0:
        raise ConfigError("action_box must be nonnegative (admissible allocations)")
    rng = spawn_rng(seed, "merton-explore")
    wealth0 = rng.uniform(w_lo[0], w_hi[0], size=L)
    actions = _held_actions(rng, a_lo, a_hi, L, I, hold)
    states, rewards, lengths = _merton_rollout(market, float(dt), wealth0, actions, rng, wealth_floor)
    return TrajectoryBatch(dt=float(dt), states=states, actions=actions, rewards=rewards,
                           seed=seed, hold_steps=hold, lengths=lengths)


def sample_policy_merton_batch(
    market: MertonMarket,
    dt: float,
    allocation,
    num_traj: int,
    steps: int,
    init_wealth_box,
    seed: int = 0,
    wealth_floor: float = WEALTH_FLOOR,
) -> TrajectoryBatch:
    """Constant-allocation rollout (the portfolio analogue of a policy batch)."""
    if hasattr(allocation, "offset"):
        allocation = float(np.asarray(allocation.offset).reshape(()))
    a = float(allocation)
    if a < 0.0:
        raise ConfigError(f"allocation must be nonnegative, got {a}")
    L, I, _ = _check_counts(num_traj, steps, 1)
    if float(dt) <= 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    w_lo, w_hi = _box_bounds(init_wealth_box, 1, "init_wealth_box")
    if w_lo[0] <= 0.0:
        raise ConfigError("init_wealth_box must be strictly positive")
    rng = spawn_rng(seed, "merton-policy")
    wealth0 = rng.uniform(w_lo[0], w_hi[0], size=L)
    actions = np.full((L, I, 1), a)
    states, rewards, lengths = _merton_rollout(market, float(dt), wealth0, actions, rng, wealth_floor)
    return TrajectoryBatch(dt=float(dt), states=states, actions=actions, rewards=rewards,
                           seed=seed, hold_steps=1, lengths=lengths)


def lqr_held_moments(sys: LqrSystem, dt: float, steps_ahead: int, states, actions):
    """E[s_k - s_0] and E[(s_k - s_0)(s_k - s_0)^T] with the action held k steps.

    Returns (delta_mean (N, d), delta_second (N, d, d)).
    """
    k = int(steps_ahead)
    if k < 1:
        raise ConfigError(f"steps_ahead must be >= 1, got {steps_ahead}")
    t = k * float(dt)
    s = np.atleast_2d(np.asarray(states, dtype=float))
    a = np.atleast_2d(np.asarray(actions, dtype=float))
    d = sys.state_dim
    M = mat_exp(sys.A, t) - np.eye(d)
    N_map = t * phi1(sys.A, t) @ sys.B
    delta_mean = s @ M.T + a @ N_map.T
    cov = sys.sigma ** 2 * t * gram_integral(sys.A, t)
    delta_second = cov[None, :, :] + np.einsum("ni,nj->nij", delta_mean, delta_mean)
    return delta_mean, delta_second


def lqr_policy_moments(
    sys: LqrSystem, dt: float, steps_ahead: int, states, policy,
    application: str = "piecewise",
):
    """Conditional k-step increment moments under a linear policy.

    piecewise: the policy is re-evaluated each step, so the mean map is the
    k-fold composition of (state_map + action_map K) and the covariance
    accumulates stepwise.  continuous: the closed loop (A + BK) evolves
    exactly over k dt.
    """
    k = int(steps_ahead)
    if k < 1:
        raise ConfigError(f"steps_ahead must be >= 1, got {steps_ahead}")
    if application not in ("piecewise", "continuous"):
        raise ConfigError(f"unknown application mode {application!r}")
    s = np.atleast_2d(np.asarray(states, dtype=float))
    d, m = sys.state_dim, sys.action_dim
    K, offset = _policy_arrays(policy, d, m)
    dt = float(dt)
    if application == "continuous":
        G = sys.A + sys.B @ K
        t = k * dt
        mean = s @ mat_exp(G, t).T + (t * phi1(G, t) @ (sys.B @ offset))[None, :]
        cov = sys.sigma ** 2 * t * gram_integral(G, t)
    else:
        kernel = lqr_exact_transition(sys, dt)
        M = kernel.state_map + kernel.action_map @ K
        drive = kernel.action_map @ offset
        mean = s.copy()
        cov = np.zeros((d, d))
        for _ in range(k):
            mean = mean @ M.T + drive[None, :]
            cov = M @ cov @ M.T + kernel.covariance
    delta_mean = mean - s
    delta_second = cov[None, :, :] + np.einsum("ni,nj->nij", delta_mean, delta_mean)
    return delta_mean, delta_second


def merton_held_moments(market: MertonMarket, dt: float, steps_ahead: int, wealth, actions):
    """Closed-form log-normal increment moments for a held allocation.

    E[W_k - W] = W (e^{m k dt} - 1) and
    E[(W_k - W)^2] = W^2 (e^{(2m + v^2) k dt} - 2 e^{m k dt} + 1).
    """
    k = int(steps_ahead)
    if k < 1:
        raise ConfigError(f"steps_ahead must be >= 1, got {steps_ahead}")
    t = k * float(dt)
    W = np.asarray(wealth, dtype=float).reshape(-1)
    a = np.asarray(actions, dtype=float).reshape(-1)
    if W.shape != a.shape:
        raise ConfigError("wealth and actions must align")
    m, v = market.drift_vol(a)
    growth = np.exp(m * t)
    delta_mean = (W * (growth - 1.0))[:, None]
    second = (W ** 2 * (np.exp((2.0 * m + v ** 2) * t) - 2.0 * growth + 1.0))[:, None, None]
    return delta_mean, second
