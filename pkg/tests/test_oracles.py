import numpy as np
import pytest
from numpy.testing import assert_allclose

from phibe.environments import LqrSystem, MertonMarket
from phibe.errors import ConfigError, NumericalError
from phibe.oracles import (
    EffectiveDynamics,
    QuadraticValue,
    be_optimal,
    be_optimal_1d,
    l2_distance_on_box,
    lqr_error_oracle,
    lqr_optimal,
    lqr_optimal_1d,
    lqr_policy_value,
    merton_optimal,
    merton_policy_value,
    phibe_effective_dynamics,
    phibe_optimal,
)
from phibe.policy_iteration import LinearPolicy


def sys_1d(A, B, Q=-1.0, R=-1.0, beta=0.0, sigma=0.0):
    return LqrSystem(
        A=np.array([[float(A)]]),
        B=np.array([[float(B)]]),
        Q=np.array([[float(Q)]]),
        R=np.array([[float(R)]]),
        sigma=sigma,
        beta=beta,
    )


# benchmark quartet: (system, dt)
CASES_1D = [
    (sys_1d(1.0, 1.0), 2.0),
    (sys_1d(1.0, 0.1), 1.0),
    (sys_1d(1.0, 1.0, Q=-100.0, R=-0.01), 0.1),
    (sys_1d(100.0, 1.0), 0.01),
]
CASES_1D_NOISY = [
    (sys_1d(1.0, 1.0, beta=0.01, sigma=1.0), 2.0),
    (sys_1d(1.0, 0.1, beta=0.01, sigma=1.0), 1.0),
    (sys_1d(1.0, 1.0, Q=-100.0, R=-0.01, beta=0.01, sigma=1.0), 0.1),
    (sys_1d(100.0, 1.0, beta=0.01, sigma=1.0), 0.01),
]

Q_2D = np.array([[-10.0, -2.0], [-2.0, -10.4]])
R_2D = np.array([[-12.0, -3.0], [-3.0, -8.0]])
CASE1_2D = LqrSystem(
    A=np.array([[-9.375, -3.125], [-3.125, -9.375]]),
    B=np.array([[10.0, 1.0], [1.0, 10.1]]),
    Q=Q_2D, R=R_2D, sigma=0.0, beta=0.0,
)
CASE2_2D = LqrSystem(
    A=np.array([[-1.875, -0.625], [-0.625, -1.875]]),
    B=np.array([[0.6, 0.2], [0.2, 0.6]]),
    Q=Q_2D, R=R_2D, sigma=0.0, beta=0.0,
)


def random_1d_systems(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        A = rng.uniform(-2.0, 2.0)
        B = rng.uniform(0.1, 2.0) * rng.choice([-1.0, 1.0])
        Q = -rng.uniform(0.1, 3.0)
        R = -rng.uniform(0.1, 3.0)
        beta = rng.uniform(0.0, 1.0)
        out.append(sys_1d(A, B, Q=Q, R=R, beta=beta))
    return out


class TestQuadraticValue:
    def test_evaluates_with_constant(self):
        val = QuadraticValue(P=np.array([[2.0, 0.5], [0.5, -1.0]]), constant=3.0)
        assert_allclose(val(np.array([[1.0, 2.0]])), [2.0 + 2.0 - 4.0 + 3.0])

    def test_symmetrizes_p(self):
        val = QuadraticValue(P=np.array([[0.0, 1.0], [0.0, 0.0]]))
        assert_allclose(val.P, [[0.0, 0.5], [0.5, 0.0]])

    def test_scalar_p_is_promoted(self):
        assert QuadraticValue(P=np.array(2.0)).P.shape == (1, 1)

    def test_rejects_non_square(self):
        with pytest.raises(ConfigError, match="square"):
            QuadraticValue(P=np.zeros((2, 3)))


class TestLqrOptimal:
    # benchmark gains and value coefficients, rounded as reported
    @pytest.mark.parametrize("idx,K,P,decimals", [
        (0, -2.4142, -2.4142, 4),
        (1, -20.050, -200.50, 3),
        (2, -101.00, -1.0100, 2),
        (3, -200.0050, -200.0050, 4),
    ])
    def test_noiseless_quartet(self, idx, K, P, decimals):
        pol, val = lqr_optimal(CASES_1D[idx][0])
        tol = 0.55 * 10.0 ** (-decimals)
        assert abs(pol.K[0, 0] - K) < tol
        assert abs(val.P[0, 0] - P) < max(tol, 0.55 * 10.0 ** (-2))
        assert val.constant == 0.0

    @pytest.mark.parametrize("idx,K,const", [
        (0, -2.4057, -240.57),
        (1, -19.95012, -19950.12),
        (2, -101.00, -101.0000),
        (3, -199.9950, -19999.50),
    ])
    def test_noisy_quartet(self, idx, K, const):
        pol, val = lqr_optimal(CASES_1D_NOISY[idx][0])
        assert abs(pol.K[0, 0] - K) < 5.5e-3
        assert abs(val.constant - const) / max(1.0, abs(const)) < 1e-4

    def test_planar_benchmark_matrix(self):
        pol, val = lqr_optimal(CASE1_2D)
        printed = np.array([[-0.3994, 0.1253], [0.1163, -0.5850]])
        assert np.abs(pol.K - printed).max() < 5.5e-5
        coeffs = np.array([val.P[0, 0], val.P[1, 1], 2.0 * val.P[0, 1]])
        assert_allclose(coeffs, [-0.4462, -0.4279, 0.0353], atol=5.5e-5)

    def test_matches_scalar_closed_form_on_random_systems(self):
        for sys in random_1d_systems(200):
            full = lqr_optimal(sys)[0].K[0, 0]
            scalar = lqr_optimal_1d(sys).K[0, 0]
            assert abs(full - scalar) < 1e-10

    def test_scalar_route_requires_1d(self):
        with pytest.raises(ConfigError, match="1D"):
            lqr_optimal_1d(CASE1_2D)

    def test_value_matches_discounted_reward_integral(self):
        # independent check: integrate e^{-beta t} r(s_t, K s_t) along the
        # closed-loop flow from s0 = 1 and compare with the Riccati value
        sys = sys_1d(-1.0, 0.5, beta=0.5)
        pol, val = lqr_optimal(sys)
        K = pol.K[0, 0]
        L = -1.0 + 0.5 * K
        t = np.linspace(0.0, 60.0, 600001)
        flow = np.exp(-sys.beta * t) * (-1.0 - K ** 2) * np.exp(2.0 * L * t)
        assert abs(np.trapezoid(flow, t) - val.P[0, 0]) < 1e-7


class TestPolicyValue:
    def test_optimal_policy_recovers_optimal_value(self):
        sys = sys_1d(-1.0, 0.5, beta=0.5)
        pol, val = lqr_optimal(sys)
        assert_allclose(lqr_policy_value(sys, pol).P, val.P, rtol=1e-12)

    def test_suboptimal_policy_value_is_lower(self):
        sys = sys_1d(-1.0, 0.5, beta=0.5)
        worse = lqr_policy_value(sys, LinearPolicy(K=np.array([[-2.0]])))
        best = lqr_optimal(sys)[1]
        assert worse.P[0, 0] < best.P[0, 0]

    def test_unstable_closed_loop_raises(self):
        with pytest.raises(NumericalError, match="unstable closed loop"):
            lqr_policy_value(CASES_1D[0][0], LinearPolicy(K=np.zeros((1, 1))))

    def test_offset_policies_rejected(self):
        sys = sys_1d(-1.0, 0.5, beta=0.5)
        with pytest.raises(ConfigError, match="zero-offset"):
            lqr_policy_value(sys, LinearPolicy(K=np.zeros((1, 1)),
                                               offset=np.array([1.0])))


class TestEffectiveDynamics:
    def test_benchmark_first_order_pair(self):
        eff = phibe_effective_dynamics(CASES_1D[0][0], 2.0, 1)
        expected = (np.e ** 2 - 1.0) / 2.0
        assert_allclose(eff.A_hat, [[expected]], rtol=1e-14)
        assert_allclose(eff.B_hat, [[expected]], rtol=1e-14)
        assert eff.order == 1 and eff.dt == 2.0

    def test_matches_eigenvalue_route_in_2d(self):
        dt = 2.0
        A = CASE1_2D.A
        lam, U = np.linalg.eigh(A)
        g1 = (np.exp(lam * dt) - 1.0) / dt
        expected_A = U @ np.diag(g1) @ U.T
        eff = phibe_effective_dynamics(CASE1_2D, dt, 1)
        assert_allclose(eff.A_hat, expected_A, atol=1e-12)
        assert_allclose(eff.B_hat, expected_A @ np.linalg.solve(A, CASE1_2D.B),
                        atol=1e-12)

    def test_commutation_identity_for_nonsymmetric_drift(self):
        sys = LqrSystem(A=np.array([[0.0, 1.0], [-2.0, -3.0]]),
                        B=np.eye(2), Q=-np.eye(2), R=-np.eye(2),
                        sigma=0.0, beta=0.1)
        for order in (1, 2, 3):
            eff = phibe_effective_dynamics(sys, 0.3, order)
            assert np.abs(sys.A @ eff.B_hat - eff.A_hat @ sys.B).max() < 1e-12

    def test_singular_drift_is_supported(self):
        sys = sys_1d(0.0, 1.0, beta=0.5)
        for order in (1, 2):
            eff = phibe_effective_dynamics(sys, 0.5, order)
            assert_allclose(eff.A_hat, [[0.0]], atol=1e-15)
            assert_allclose(eff.B_hat, [[1.0]], rtol=1e-14)

    def test_rejects_bad_dt(self):
        with pytest.raises(ConfigError, match="dt"):
            phibe_effective_dynamics(CASES_1D[0][0], 0.0, 1)


class TestUndiscountedExactRecovery:
    def test_first_order_exact_on_noiseless_quartet(self):
        for sys, dt in CASES_1D:
            k_true = lqr_optimal_1d(sys).K[0, 0]
            k_hat = phibe_optimal(sys, dt, 1).K[0, 0]
            assert abs(k_hat - k_true) < 1e-9

    def test_second_order_exact_when_interval_is_short_enough(self):
        # the order-2 drift map is monotone only for A dt < ln 3; the first
        # benchmark case (A dt = 2) sits outside and lands on the wrong root
        for sys, dt in CASES_1D[1:]:
            k_true = lqr_optimal_1d(sys).K[0, 0]
            k_hat = phibe_optimal(sys, dt, 2).K[0, 0]
            assert abs(k_hat - k_true) < 1e-9

    def test_second_order_wrong_root_is_stable(self):
        k_hat = phibe_optimal(CASES_1D[0][0], 2.0, 2).K[0, 0]
        assert_allclose(k_hat, np.sqrt(2.0) - 1.0, rtol=1e-12)

    def test_planar_gaps_persist_when_drift_and_value_do_not_commute(self):
        for sys, dt, lo, hi in ((CASE1_2D, 2.0, 1e-3, 1e-2),
                                (CASE2_2D, 1.0, 1e-4, 1e-2)):
            k_true = lqr_optimal(sys)[0].K
            for order in (1, 2):
                gap = np.abs(phibe_optimal(sys, dt, order).K - k_true).max()
                assert lo < gap < hi


class TestBeOptimal:
    def test_benchmark_fixed_point(self):
        pol = be_optimal_1d(CASES_1D[0][0], 2.0)
        assert_allclose(pol.K, [[-1.1444515495]], atol=1e-9)

    def test_matrix_route_agrees_with_scalar_route(self):
        for sys in random_1d_systems(60, seed=3):
            for dt in (0.1, 0.5):
                for choice in ("exp", "optimal"):
                    a = be_optimal_1d(sys, dt, choice).K[0, 0]
                    b = be_optimal(sys, dt, choice).K[0, 0]
                    assert abs(a - b) < 1e-9

    def test_first_order_interval_bias(self):
        sys = sys_1d(-1.0, 0.5, beta=1.0)
        k_true = lqr_optimal_1d(sys).K[0, 0]
        e_coarse = abs(be_optimal_1d(sys, 0.1).K[0, 0] - k_true)
        e_fine = abs(be_optimal_1d(sys, 0.01).K[0, 0] - k_true)
        assert 5.0 < e_coarse / e_fine < 20.0

    def test_optimal_discount_choice_removes_discount_bias(self):
        # the rational per-step discount makes the transformed problem share
        # beta, Q, R with the continuous one, leaving only the dynamics gap
        sys = sys_1d(-1.0, 0.5, beta=1.0)
        k_true = lqr_optimal_1d(sys).K[0, 0]
        e_exp = abs(be_optimal_1d(sys, 0.1, "exp").K[0, 0] - k_true)
        e_opt = abs(be_optimal_1d(sys, 0.1, "optimal").K[0, 0] - k_true)
        assert e_opt < e_exp

    def test_unknown_discount_choice(self):
        with pytest.raises(ConfigError, match="discount_choice"):
            be_optimal_1d(CASES_1D[0][0], 2.0, "linear")


class TestPhibeIntervalBias:
    def test_gain_error_shrinks_at_the_advertised_rates(self):
        sys = sys_1d(-1.0, 0.5, beta=1.0)
        k_true = lqr_optimal_1d(sys).K[0, 0]
        r1 = (abs(phibe_optimal(sys, 0.1, 1).K[0, 0] - k_true)
              / abs(phibe_optimal(sys, 0.01, 1).K[0, 0] - k_true))
        r2 = (abs(phibe_optimal(sys, 0.1, 2).K[0, 0] - k_true)
              / abs(phibe_optimal(sys, 0.01, 2).K[0, 0] - k_true))
        assert 5.0 < r1 < 20.0
        assert 50.0 < r2 < 200.0


MERTON_CASES = [
    (dict(r=0.02, r_b=0.05, mu=0.08, sigma=0.2, gamma_risk=0.5, beta=0.2),
     1.5, 12.2137),
    (dict(r=0.02, r_b=0.05, mu=0.06, sigma=0.3, gamma_risk=0.5, beta=0.15),
     0.888889, 15.2542),
    (dict(r=0.02, r_b=0.05, mu=0.07, sigma=0.3, gamma_risk=0.5, beta=0.2),
     1.0, 11.3475),
]


class TestMertonOracles:
    @pytest.mark.parametrize("params,a_star,c_star", MERTON_CASES)
    def test_benchmark_allocations_and_values(self, params, a_star, c_star):
        mkt = MertonMarket(**params)
        a = merton_optimal(mkt)
        assert abs(a - a_star) < 1.1e-4
        assert abs(merton_policy_value(mkt, a) - c_star) < 5.5e-5

    def test_optimal_allocation_maximizes_the_value(self):
        mkt = MertonMarket(**MERTON_CASES[0][0])
        c_star = merton_policy_value(mkt, merton_optimal(mkt))
        for a in (0.2, 0.8, 1.2, 1.9, 3.0):
            assert merton_policy_value(mkt, a) <= c_star + 1e-12


class TestL2Distance:
    def test_constant_distance_is_exact(self):
        one = lambda s: np.ones(s.shape[0])
        zero = lambda s: np.zeros(s.shape[0])
        assert_allclose(l2_distance_on_box(one, zero, (-3.0, 3.0)),
                        np.sqrt(6.0), rtol=1e-13)

    def test_linear_distance_on_interval(self):
        ident = lambda s: s[:, 0]
        zero = lambda s: np.zeros(s.shape[0])
        assert_allclose(l2_distance_on_box(ident, zero, (-3.0, 3.0)),
                        np.sqrt(18.0), rtol=1e-5)

    def test_linear_distance_on_square(self):
        first = lambda s: s[:, 0]
        zero = lambda s: np.zeros(s.shape[0])
        got = l2_distance_on_box(first, zero, ((-1.0, 1.0), (-1.0, 1.0)))
        assert_allclose(got, np.sqrt(4.0 / 3.0), rtol=1e-4)

    def test_grid_override_tightens_the_quadrature(self):
        ident = lambda s: s[:, 0]
        zero = lambda s: np.zeros(s.shape[0])
        coarse = abs(l2_distance_on_box(ident, zero, (-3.0, 3.0), 51)
                     - np.sqrt(18.0))
        fine = abs(l2_distance_on_box(ident, zero, (-3.0, 3.0), 5001)
                   - np.sqrt(18.0))
        assert fine < coarse

    def test_rejects_malformed_box(self):
        zero = lambda s: np.zeros(s.shape[0])
        with pytest.raises(ConfigError, match="box"):
            l2_distance_on_box(zero, zero, (1.0, 2.0, 3.0))


class TestErrorOracles:
    def test_reports_gap_and_both_value_errors(self):
        sys = sys_1d(-1.0, 0.5, beta=0.5)
        pol, val = lqr_optimal(sys)
        oracle = lqr_error_oracle(sys)
        out = oracle(pol, None)
        assert out["policy_gap"] < 1e-12
        assert out["value_error_policy"] < 1e-9
        assert "value_error_estimate" not in out

    def test_unstable_policy_reports_infinite_value_error(self):
        oracle = lqr_error_oracle(CASES_1D[0][0])
        out = oracle(LinearPolicy(K=np.zeros((1, 1))), None)
        assert np.isinf(out["value_error_policy"])
        assert np.isfinite(out["policy_gap"])
