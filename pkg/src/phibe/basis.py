"""Feature bases for value and q-function approximation.

Two families:

* quadratic monomials in the state, and in the joint state-action pair, for
  the linear-quadratic problems;
* power-law features in wealth for the portfolio problem, where the value
  function is a multiple of s^p.

Bases evaluate vectorized: states are (N, d) arrays, actions (N, m), and the
returned feature matrix is (N, n).  Gradients and Hessians are taken with
respect to the state only; state-action bases accept the action array so
cross terms differentiate correctly.  Each quadratic basis carries its term
layout (constant slot, action-quadratic pairs, state-action pairs,
state-quadratic pairs) so policy improvement can read coefficient blocks
without re-deriving the ordering.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

__all__ = [
    "QuadraticStateBasis",
    "QuadraticStateActionBasis",
    "MertonValueBasis",
    "MertonQBasis",
    "quadratic_state_basis",
    "quadratic_state_action_basis",
    "merton_value_basis",
    "merton_q_basis",
]


def _check_dim(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value}")
    return int(value)


def _as_points(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if dim == 1:
            x = x[:, None]
        elif x.shape[0] == dim:
            x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigError(f"{name} must have shape (N, {dim}), got {np.asarray(x).shape}")
    return x


def _symmetric_pairs(dim: int) -> list[tuple[int, int]]:
    """Diagonal pairs first, then off-diagonal pairs in lexicographic order."""
    return [(i, i) for i in range(dim)] + [
        (i, j) for i in range(dim) for j in range(i + 1, dim)
    ]


class QuadraticStateBasis:
    """Monomials {s_i s_j : i <= j} with an optional leading constant.

    Ordering: constant (if requested), then s_1^2 .. s_d^2, then the cross
    terms s_i s_j for i < j.  For d = 2 with a constant that is
    {1, s1^2, s2^2, s1 s2}.
    """

    def __init__(self, dim: int, include_constant: bool = False):
        self.state_dim = _check_dim(dim, "dim")
        self.action_dim = 0
        self.include_constant = bool(include_constant)
        self.const_index = 0 if self.include_constant else None
        self.ss_pairs = _symmetric_pairs(self.state_dim)
        offset = 1 if self.include_constant else 0
        self.ss_slice = slice(offset, offset + len(self.ss_pairs))
        self.size = offset + len(self.ss_pairs)

    def __repr__(self):
        return f"QuadraticStateBasis(dim={self.state_dim}, include_constant={self.include_constant})"

    def value(self, states) -> np.ndarray:
        s = _as_points(states, self.state_dim, "states")
        cols = []
        if self.include_constant:
            cols.append(np.ones(s.shape[0]))
        for i, j in self.ss_pairs:
            cols.append(s[:, i] * s[:, j])
        return np.stack(cols, axis=1)

    def grad(self, states) -> np.ndarray:
        s = _as_points(states, self.state_dim, "states")
        N, d = s.shape
        out = np.zeros((N, self.size, d))
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            out[:, idx, i] += s[:, j]
            out[:, idx, j] += s[:, i]
        return out

    def hessian(self, states) -> np.ndarray:
        s = _as_points(states, self.state_dim, "states")
        N, d = s.shape
        out = np.zeros((N, self.size, d, d))
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            out[:, idx, i, j] += 1.0
            out[:, idx, j, i] += 1.0
        return out

    def matrix_from_coefficients(self, weights) -> tuple[np.ndarray, float]:
        """Split a weight vector into (P, constant) with value = s^T P s + constant."""
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.size,):
            raise ConfigError(f"weights must have shape ({self.size},), got {w.shape}")
        P = np.zeros((self.state_dim, self.state_dim))
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            if i == j:
                P[i, i] = w[idx]
            else:
                P[i, j] = P[j, i] = 0.5 * w[idx]
        const = float(w[self.const_index]) if self.include_constant else 0.0
        return P, const

    def coefficients_from_matrix(self, P, constant: float = 0.0) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if P.shape != (self.state_dim, self.state_dim):
            raise ConfigError(
                f"P must have shape ({self.state_dim}, {self.state_dim}), got {P.shape}"
            )
        w = np.zeros(self.size)
        if self.include_constant:
            w[self.const_index] = constant
        elif constant != 0.0:
            raise ConfigError("constant term given but the basis has no constant feature")
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            w[idx] = P[i, i] if i == j else P[i, j] + P[j, i]
        return w


class QuadraticStateActionBasis:
    """Monomials {a_k a_l} ∪ {s_i a_k} ∪ {s_i s_j} with an optional constant.

    Ordering: constant (if requested), action quadratics (diagonal then cross),
    state-action products in row-major (i, k) order, state quadratics
    (diagonal then cross).  For d = m = 1 without a constant that is
    {a^2, s a, s^2}.
    """

    def __init__(self, state_dim: int, action_dim: int, include_constant: bool = False):
        self.state_dim = _check_dim(state_dim, "state_dim")
        self.action_dim = _check_dim(action_dim, "action_dim")
        self.include_constant = bool(include_constant)
        self.const_index = 0 if self.include_constant else None
        d, m = self.state_dim, self.action_dim
        self.aa_pairs = _symmetric_pairs(m)
        self.sa_pairs = [(i, k) for i in range(d) for k in range(m)]
        self.ss_pairs = _symmetric_pairs(d)
        offset = 1 if self.include_constant else 0
        self.aa_slice = slice(offset, offset + len(self.aa_pairs))
        offset += len(self.aa_pairs)
        self.sa_slice = slice(offset, offset + len(self.sa_pairs))
        offset += len(self.sa_pairs)
        self.ss_slice = slice(offset, offset + len(self.ss_pairs))
        self.size = offset + len(self.ss_pairs)

    def __repr__(self):
        return (
            f"QuadraticStateActionBasis(state_dim={self.state_dim}, "
            f"action_dim={self.action_dim}, include_constant={self.include_constant})"
        )

    def value(self, states, actions) -> np.ndarray:
        s = _as_points(states, self.state_dim, "states")
        a = _as_points(actions, self.action_dim, "actions")
        if s.shape[0] != a.shape[0]:
            raise ConfigError(
                f"states and actions disagree on N: {s.shape[0]} vs {a.shape[0]}"
            )
        cols = []
        if self.include_constant:
            cols.append(np.ones(s.shape[0]))
        for k, l in self.aa_pairs:
            cols.append(a[:, k] * a[:, l])
        for i, k in self.sa_pairs:
            cols.append(s[:, i] * a[:, k])
        for i, j in self.ss_pairs:
            cols.append(s[:, i] * s[:, j])
        return np.stack(cols, axis=1)

    def grad(self, states, actions) -> np.ndarray:
        """Gradient with respect to the state; action enters the cross terms."""
        s = _as_points(states, self.state_dim, "states")
        a = _as_points(actions, self.action_dim, "actions")
        N, d = s.shape
        out = np.zeros((N, self.size, d))
        for idx, (i, k) in enumerate(self.sa_pairs, start=self.sa_slice.start):
            out[:, idx, i] = a[:, k]
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            out[:, idx, i] += s[:, j]
            out[:, idx, j] += s[:, i]
        return out

    def hessian(self, states, actions) -> np.ndarray:
        s = _as_points(states, self.state_dim, "states")
        N, d = s.shape
        out = np.zeros((N, self.size, d, d))
        for idx, (i, j) in enumerate(self.ss_pairs, start=self.ss_slice.start):
            out[:, idx, i, j] += 1.0
            out[:, idx, j, i] += 1.0
        return out

    def action_blocks(self, weights) -> tuple[np.ndarray, np.ndarray]:
        """Split weights into (W_aa, W_sa) with q = a^T W_aa a + s^T W_sa a + ...

        W_aa is the full symmetric matrix (off-diagonal coefficients halved),
        W_sa the d x m cross-term matrix.
        """
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.size,):
            raise ConfigError(f"weights must have shape ({self.size},), got {w.shape}")
        m = self.action_dim
        Waa = np.zeros((m, m))
        for idx, (k, l) in enumerate(self.aa_pairs, start=self.aa_slice.start):
            if k == l:
                Waa[k, k] = w[idx]
            else:
                Waa[k, l] = Waa[l, k] = 0.5 * w[idx]
        Wsa = np.zeros((self.state_dim, m))
        for idx, (i, k) in enumerate(self.sa_pairs, start=self.sa_slice.start):
            Wsa[i, k] = w[idx]
        return Waa, Wsa


def _check_power(power: float) -> float:
    power = float(power)
    if not np.isfinite(power) or power <= 0.0 or power >= 1.0:
        raise ConfigError(f"power must lie in (0, 1), got {power}")
    return power


def _positive_wealth(states) -> np.ndarray:
    s = _as_points(states, 1, "states")
    if np.any(s <= 0.0):
        raise ConfigError("wealth features require strictly positive states")
    return s


class MertonValueBasis:
    """Single feature s^p on s > 0 (p = 1 - gamma, default 1/2 so the feature is sqrt(s))."""

    def __init__(self, power: float = 0.5):
        self.power = _check_power(power)
        self.state_dim = 1
        self.action_dim = 0
        self.size = 1
        self.const_index = None

    def __repr__(self):
        return f"MertonValueBasis(power={self.power})"

    def value(self, states) -> np.ndarray:
        s = _positive_wealth(states)
        return s ** self.power

    def grad(self, states) -> np.ndarray:
        s = _positive_wealth(states)
        p = self.power
        return (p * s ** (p - 1.0))[:, :, None]

    def hessian(self, states) -> np.ndarray:
        s = _positive_wealth(states)
        p = self.power
        return (p * (p - 1.0) * s ** (p - 2.0))[:, :, None, None]


class MertonQBasis:
    """Features {s^p, s^p a, s^p a^2} on s > 0; quadratic in the scalar allocation.

    Index layout: 0 constant-in-a, 1 linear, 2 quadratic, so the vertex of the
    action parabola is -w[1] / (2 w[2]).
    """

    linear_index = 1
    quad_index = 2

    def __init__(self, power: float = 0.5):
        self.power = _check_power(power)
        self.state_dim = 1
        self.action_dim = 1
        self.size = 3
        self.const_index = None

    def __repr__(self):
        return f"MertonQBasis(power={self.power})"

    def value(self, states, actions) -> np.ndarray:
        s = _positive_wealth(states)
        a = _as_points(actions, 1, "actions")
        if s.shape[0] != a.shape[0]:
            raise ConfigError(
                f"states and actions disagree on N: {s.shape[0]} vs {a.shape[0]}"
            )
        sp = s[:, 0] ** self.power
        return np.stack([sp, sp * a[:, 0], sp * a[:, 0] ** 2], axis=1)

    def grad(self, states, actions) -> np.ndarray:
        s = _positive_wealth(states)
        a = _as_points(actions, 1, "actions")
        p = self.power
        dsp = p * s[:, 0] ** (p - 1.0)
        return np.stack([dsp, dsp * a[:, 0], dsp * a[:, 0] ** 2], axis=1)[:, :, None]

    def hessian(self, states, actions) -> np.ndarray:
        s = _positive_wealth(states)
        a = _as_points(actions, 1, "actions")
        p = self.power
        d2sp = p * (p - 1.0) * s[:, 0] ** (p - 2.0)
        stacked = np.stack([d2sp, d2sp * a[:, 0], d2sp * a[:, 0] ** 2], axis=1)
        return stacked[:, :, None, None]


def quadratic_state_basis(dim: int, include_constant: bool = False) -> QuadraticStateBasis:
    return QuadraticStateBasis(dim, include_constant)


def quadratic_state_action_basis(
    state_dim: int, action_dim: int, include_constant: bool = False
) -> QuadraticStateActionBasis:
    return QuadraticStateActionBasis(state_dim, action_dim, include_constant)


def merton_value_basis(power: float = 0.5) -> MertonValueBasis:
    return MertonValueBasis(power)


def merton_q_basis(power: float = 0.5) -> MertonQBasis:
    return MertonQBasis(power)
