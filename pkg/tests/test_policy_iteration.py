import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from phibe.basis import (
    merton_q_basis,
    merton_value_basis,
    quadratic_state_action_basis,
    quadratic_state_basis,
)
from phibe.environments import LqrSystem, MertonMarket
from phibe.errors import ConfigError, NumericalError
from phibe.oracles import (
    be_optimal_1d,
    lqr_error_oracle,
    merton_error_oracle,
    phibe_optimal,
)
from phibe.policy_eval import CoefficientVector, ValueEstimate
from phibe.policy_iteration import (
    BatchPlan,
    IterationTrace,
    LinearPolicy,
    improve_policy,
    optimal_be_pi,
    optimal_phibe_pi,
)
from phibe.q_approx import QEstimate


def q_estimate(weights, basis):
    return QEstimate(
        coeffs=CoefficientVector(basis=basis, weights=np.asarray(weights, float)),
        method="galerkin",
    )


def stable_1d(beta=0.5, sigma=0.0):
    return LqrSystem(
        A=np.array([[-1.0]]),
        B=np.array([[0.5]]),
        Q=np.array([[-1.0]]),
        R=np.array([[-1.0]]),
        sigma=sigma,
        beta=beta,
    )


def unstable_1d():
    # A = B = 1, Q = R = -1, undiscounted
    return LqrSystem(
        A=np.array([[1.0]]),
        B=np.array([[1.0]]),
        Q=np.array([[-1.0]]),
        R=np.array([[-1.0]]),
        sigma=0.0,
        beta=0.0,
    )


def small_plan(**overrides):
    kw = dict(q_num_traj=12, q_steps=5, pi_num_traj=12, pi_steps=5)
    kw.update(overrides)
    return BatchPlan(**kw)


BASES_1D = (quadratic_state_basis(1), quadratic_state_action_basis(1, 1))


def run_phibe(sys, dt=0.1, pi0=None, plan=None, **kw):
    Phi, Psi = BASES_1D
    if pi0 is None:
        pi0 = LinearPolicy(K=np.zeros((1, 1)))
    if plan is None:
        plan = small_plan()
    kw.setdefault("iterations", 12)
    kw.setdefault("seed", 4)
    return optimal_phibe_pi(sys, dt, Phi, Psi, pi0, batch_plan=plan, **kw)


class TestLinearPolicy:
    def test_scalar_gain_is_reshaped(self):
        pol = LinearPolicy(K=np.array(2.0))
        assert pol.K.shape == (1, 1)
        assert_allclose(pol(np.array([[3.0]])), [[6.0]])

    def test_constant_policy(self):
        pol = LinearPolicy.constant(1.5)
        assert pol.is_constant()
        assert_allclose(pol(np.array([[4.0], [-2.0]])), [[1.5], [1.5]])

    def test_feedback_with_offset(self):
        pol = LinearPolicy(K=np.array([[2.0, -1.0]]), offset=np.array([0.5]))
        assert_allclose(pol(np.array([[1.0, 1.0]])), [[1.5]])
        assert not pol.is_constant()

    def test_offset_length_mismatch(self):
        with pytest.raises(ConfigError, match="does not match"):
            LinearPolicy(K=np.eye(2), offset=np.array([1.0]))

    def test_non_finite_entries(self):
        with pytest.raises(ConfigError, match="non-finite"):
            LinearPolicy(K=np.array([[np.nan]]))

    def test_higher_rank_gain_rejected(self):
        with pytest.raises(ConfigError, match="matrix"):
            LinearPolicy(K=np.zeros((1, 1, 1)))


class TestImprovePolicy:
    def test_quadratic_vertex_gain(self):
        # q = -a^2 + 2sa - s^2 peaks at a = s
        q = q_estimate([-1.0, 2.0, -1.0], quadratic_state_action_basis(1, 1))
        pol = improve_policy(q)
        assert_allclose(pol.K, [[1.0]], atol=1e-14)
        assert_allclose(pol.offset, [0.0])

    def test_non_concave_action_block(self):
        q = q_estimate([1.0, 2.0, -1.0], quadratic_state_action_basis(1, 1))
        with pytest.raises(NumericalError, match="non-concave q in action"):
            improve_policy(q)

    def test_action_box_rejected_for_feedback_policies(self):
        q = q_estimate([-1.0, 2.0, -1.0], quadratic_state_action_basis(1, 1))
        with pytest.raises(ConfigError, match="action constraints"):
            improve_policy(q, action_box=(-1.0, 1.0))

    def test_portfolio_vertex(self):
        q = q_estimate([5.0, 3.0, -1.0], merton_q_basis())
        pol = improve_policy(q)
        assert pol.is_constant()
        assert_allclose(pol.offset, [1.5])

    def test_portfolio_clips_to_default_cap(self):
        q = q_estimate([5.0, 30.0, -1.0], merton_q_basis())
        assert_allclose(improve_policy(q).offset, [5.0])

    def test_portfolio_clips_to_given_box(self):
        q = q_estimate([5.0, 30.0, -1.0], merton_q_basis())
        assert_allclose(improve_policy(q, action_box=(0.0, 2.0)).offset, [2.0])

    def test_portfolio_non_concave(self):
        q = q_estimate([5.0, 3.0, 0.0], merton_q_basis())
        with pytest.raises(NumericalError, match="non-concave q in action"):
            improve_policy(q)

    def test_unknown_basis(self):
        q = q_estimate([1.0], quadratic_state_basis(1))
        with pytest.raises(ConfigError, match="no closed-form policy improvement"):
            improve_policy(q)


class TestBatchPlan:
    @pytest.mark.parametrize("field,value", [
        ("q_num_traj", 0),
        ("q_steps", -1),
        ("pi_num_traj", 1.5),
        ("pi_steps", True),
    ])
    def test_counts_must_be_positive_integers(self, field, value):
        with pytest.raises(ConfigError, match=field):
            small_plan(**{field: value})

    def test_unknown_application_mode(self):
        with pytest.raises(ConfigError, match="unknown application mode"):
            small_plan(application="midpoint")


class TestOptimalPhibePi:
    def test_batch_plan_is_required(self):
        Phi, Psi = BASES_1D
        with pytest.raises(ConfigError, match="batch_plan is required"):
            optimal_phibe_pi(stable_1d(), 0.1, Phi, Psi,
                             LinearPolicy(K=np.zeros((1, 1))))

    def test_beta_argument_must_agree_with_environment(self):
        with pytest.raises(ConfigError, match="disagrees"):
            run_phibe(stable_1d(beta=0.5), beta=0.7)

    def test_order_must_be_positive(self):
        with pytest.raises(ConfigError, match="order"):
            run_phibe(stable_1d(), order=0)

    def test_unknown_q_method(self):
        with pytest.raises(ConfigError, match="q_method"):
            run_phibe(stable_1d(), q_method="sgd")

    def test_deterministic_data_recovers_effective_gain(self):
        # noiseless one-step transitions make the drift windows exact, so the
        # iteration lands on the order-1 effective-dynamics optimum
        sys = stable_1d()
        target = phibe_optimal(sys, 0.1, 1).K
        pol, val, trace = run_phibe(sys, order=1)
        assert_allclose(pol.K, target, atol=1e-8)
        assert isinstance(val, ValueEstimate)
        assert np.all(np.isfinite(val.coeffs.weights))
        assert len(trace) == 12

    def test_exact_expectation_matches_effective_gain(self):
        sys = stable_1d()
        target = phibe_optimal(sys, 0.1, 1).K
        pol, _, _ = run_phibe(sys, order=1, exact_expectation=True)
        assert_allclose(pol.K, target, atol=1e-10)

    def test_second_order_moment_bias_decays_with_dt(self):
        # order-2 windows on a piecewise-applied policy batch mix actions, so
        # the fixed point misses the order-2 effective gain by O(dt)
        sys = stable_1d()
        gaps = {}
        for dt in (0.1, 0.01):
            target = phibe_optimal(sys, dt, 2).K[0, 0]
            pol, _, _ = run_phibe(sys, dt=dt, order=2, iterations=20,
                                  exact_expectation=True)
            gaps[dt] = abs(pol.K[0, 0] - target)
        assert gaps[0.01] < 0.05
        assert gaps[0.01] < gaps[0.1]

    def test_gradient_descent_agrees_with_direct_solve(self):
        pol_gd, _, _ = run_phibe(stable_1d(), q_method="gd", iterations=6)
        pol_direct, _, _ = run_phibe(stable_1d(), iterations=6)
        assert_allclose(pol_gd.K, pol_direct.K, atol=1e-8)

    def test_same_seed_reproduces_trace(self):
        def strip(trace):
            return json.dumps([
                {k: v for k, v in rec.items() if k != "wall_time"}
                for rec in trace.records
            ])

        _, _, a = run_phibe(stable_1d(), iterations=5, seed=7)
        _, _, b = run_phibe(stable_1d(), iterations=5, seed=7)
        _, _, c = run_phibe(stable_1d(), iterations=5, seed=8)
        assert strip(a) == strip(b)
        assert strip(a) != strip(c)

    def test_oracle_errors_recorded_per_iteration(self):
        sys = stable_1d()
        _, _, trace = run_phibe(sys, iterations=5, oracle=lqr_error_oracle(sys))
        series = trace.error_series("policy_gap")
        assert series.shape == (5,)
        assert np.all(np.isfinite(series))
        assert series[-1] < series[0]
        for key in ("policy_gap", "value_error_estimate", "value_error_policy"):
            assert key in trace.records[0]["errors"]

    def test_stop_tol_ends_early(self):
        _, _, trace = run_phibe(stable_1d(), iterations=15,
                                exact_expectation=True, stop_tol=1e-13)
        assert 2 <= len(trace) < 15

    def test_failures_carry_the_iteration_index(self):
        plan = small_plan(q_steps=1)
        with pytest.raises(NumericalError, match="iteration 0:.*batch too short"):
            run_phibe(stable_1d(), order=2, plan=plan)


class TestOptimalBePi:
    def test_batch_plan_is_required(self):
        Phi, Psi = BASES_1D
        with pytest.raises(ConfigError, match="batch_plan is required"):
            optimal_be_pi(unstable_1d(), 2.0, Phi, Psi,
                          LinearPolicy(K=np.zeros((1, 1))))

    def test_unknown_discount_choice(self):
        Phi, Psi = BASES_1D
        with pytest.raises(ConfigError, match="discount_choice"):
            optimal_be_pi(stable_1d(), 0.1, Phi, Psi,
                          LinearPolicy(K=np.zeros((1, 1))),
                          batch_plan=small_plan(), discount_choice="linear")

    def test_converges_to_discrete_riccati_gain(self):
        # undiscounted Case: the one-step temporal-difference iteration has its
        # own fixed point, distinct from the continuous-time optimum
        sys = unstable_1d()
        Phi, Psi = BASES_1D
        target = be_optimal_1d(sys, 2.0).K
        pol, val, trace = optimal_be_pi(
            sys, 2.0, Phi, Psi, LinearPolicy(K=np.array([[-1.2]])),
            batch_plan=small_plan(), iterations=12, seed=1,
        )
        assert_allclose(pol.K, target, atol=1e-6)
        assert isinstance(val, ValueEstimate)
        assert len(trace) == 12

    def test_destabilizing_start_fails_concavity(self):
        sys = unstable_1d()
        Phi, Psi = BASES_1D
        with pytest.raises(NumericalError, match="iteration 0:.*non-concave"):
            optimal_be_pi(sys, 2.0, Phi, Psi, LinearPolicy(K=np.array([[-1.5]])),
                          batch_plan=small_plan(), iterations=4, seed=0)

    def test_same_seed_reproduces_trace(self):
        sys = unstable_1d()
        Phi, Psi = BASES_1D

        def run(seed):
            _, _, trace = optimal_be_pi(
                sys, 2.0, Phi, Psi, LinearPolicy(K=np.array([[-1.2]])),
                batch_plan=small_plan(), iterations=4, seed=seed,
            )
            return json.dumps([
                {k: v for k, v in rec.items() if k != "wall_time"}
                for rec in trace.records
            ])

        assert run(3) == run(3)
        assert run(3) != run(4)


CASE1_MARKET = dict(r=0.02, r_b=0.05, mu=0.08, sigma=0.2, gamma_risk=0.5, beta=0.2)


class TestPortfolioIteration:
    def test_exact_moments_recover_leveraged_allocation(self):
        # action design inside the borrowing branch keeps the q target exactly
        # quadratic in the allocation; third-order moments remove the O(dt)
        # variance bias at the monthly step
        mkt = MertonMarket(**CASE1_MARKET)
        plan = BatchPlan(q_num_traj=300, q_steps=5, pi_num_traj=300, pi_steps=5,
                         init_box=(0.5, 3.0), action_box=(1.0, 2.0))
        pol, val, _ = optimal_phibe_pi(
            mkt, 1.0 / 12.0, merton_value_basis(), merton_q_basis(),
            LinearPolicy.constant(0.5), order=3, batch_plan=plan,
            iterations=8, seed=3, exact_expectation=True,
        )
        assert abs(pol.offset[0] - 1.5) < 1e-3
        assert abs(val.coeffs.weights[0] - 12.2137) < 0.01

    def test_sampled_run_approaches_allocation(self):
        mkt = MertonMarket(**CASE1_MARKET)
        plan = BatchPlan(q_num_traj=10000, q_steps=5, pi_num_traj=10000,
                         pi_steps=5, init_box=(0.5, 3.0), action_box=(0.0, 2.0))
        pol, val, trace = optimal_phibe_pi(
            mkt, 1.0 / 12.0, merton_value_basis(), merton_q_basis(),
            LinearPolicy.constant(0.5), order=1, batch_plan=plan,
            iterations=5, seed=0, oracle=merton_error_oracle(mkt),
        )
        assert abs(pol.offset[0] - 1.5) < 0.3
        assert len(trace) == 5
        for key in ("allocation_gap", "value_coeff_gap", "value_coeff_estimate"):
            assert key in trace.records[-1]["errors"]


class TestIterationTrace:
    def make_trace(self):
        trace = IterationTrace()
        pol = LinearPolicy(K=np.array([[1.0]]), offset=np.array([0.5]))
        trace.append(0, pol, np.array([2.0]), np.array([1.0, -1.0]),
                     {"policy_gap": 0.25}, 0.01, 11)
        trace.append(1, pol, None, np.array([1.0, -1.0]), {}, 0.02, 12)
        return trace

    def test_round_trip_through_json(self, tmp_path):
        trace = self.make_trace()
        path = tmp_path / "trace.json"
        trace.to_json(path)
        loaded = IterationTrace.from_json(path)
        assert loaded.records == trace.records

    def test_error_series_fills_missing_with_nan(self):
        series = self.make_trace().error_series("policy_gap")
        assert_allclose(series[0], 0.25)
        assert np.isnan(series[1])

    def test_final_policy_matrix(self):
        assert_allclose(self.make_trace().final_policy_matrix(), [[1.0]])

    def test_csv_is_long_format_with_wall_times(self, tmp_path):
        path = tmp_path / "trace.csv"
        self.make_trace().to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,metric,value"
        assert "0,policy_K_0,1.0" in lines
        assert "0,policy_gap,0.25" in lines
        assert sum(1 for ln in lines if ",wall_time," in ln) == 2
