import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chplanner.game import ENV, PolicyTable
from chplanner.inference import build_kernel, init_belief
from chplanner.planner import (
    DecisionProfile,
    NoRobustPlanError,
    PlanResult,
    constraint_probability,
    expected_reward,
    lift_reward,
    maximin_plan,
    optimize,
    project_to_simplex,
    receding_horizon_step,
)
from chplanner.planner import _CompiledHorizon, _stage_masks

from conftest import make_spec
from oracles import profile_value_oracle, random_game, random_policy


def _random_instance(rng, nx=None, nu1=None, nu2=None, horizon=None, num_levels=2):
    nx = nx or int(rng.integers(2, 7))
    nu1 = nu1 or int(rng.integers(2, 4))
    nu2 = nu2 or int(rng.integers(2, 4))
    horizon = horizon or int(rng.integers(1, 4))
    spec, table, r1, r2, safe = random_game(rng, nx, nu1, nu2, horizon=horizon)
    policies = {
        k: random_policy(rng, k, ENV, nx, nu2) for k in range(1, num_levels + 1)
    }
    kernel = build_kernel(spec, policies)
    prior = rng.dirichlet(np.ones(num_levels))
    belief = init_belief(int(rng.integers(0, nx)), prior, nx)
    stages = rng.dirichlet(np.ones(nu1), size=horizon)
    return spec, table, r1, safe, policies, kernel, prior, belief, stages


def test_decision_profile_validation():
    with pytest.raises(ValueError):
        DecisionProfile(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        DecisionProfile(np.array([0.5, 0.5]))
    p = DecisionProfile.uniform(3, 4)
    assert p.horizon == 3 and p.num_actions == 4
    d = DecisionProfile.deterministic([2, 0], 3)
    assert d.stages[0, 2] == 1.0 and d.stages[1, 0] == 1.0


def test_expected_reward_single_step_deterministic():
    table = np.array([[[1]], [[1]]])
    spec = make_spec(table, [0.0, 5.0], [0.0, 0.0], [True, True], horizon=1)
    kernel = build_kernel(spec, {1: PolicyTable(1, ENV, np.ones((2, 1)))})
    belief = init_belief(0, [1.0], 2)
    profile = DecisionProfile.deterministic([0], 1)
    value = expected_reward(kernel, lift_reward([0.0, 5.0], 1), belief, profile, 0.9)
    assert value == pytest.approx(5.0, abs=1e-12)


def test_expected_reward_zero_vector_gives_zero():
    rng = np.random.default_rng(0)
    _, _, _, _, _, kernel, _, belief, stages = _random_instance(rng, horizon=3)
    value = expected_reward(
        kernel, np.zeros(kernel.num_augmented), belief, DecisionProfile(stages), 0.9
    )
    assert value == 0.0


def test_expected_reward_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    spec, _, r1, safe, policies, kernel, prior, belief, stages = _random_instance(
        rng, nx=4, nu1=2, nu2=2, horizon=2
    )
    start = int(np.flatnonzero(belief.probs)[0] % spec.num_states)
    value = expected_reward(
        kernel, lift_reward(r1, 2), belief, DecisionProfile(stages), spec.discount
    )
    oracle, _ = profile_value_oracle(
        spec, policies, prior, start, stages, [safe] * 2, lambda s: r1[s], spec.discount
    )
    assert value == pytest.approx(oracle, abs=1e-10)


def test_constraint_probability_all_safe_is_one():
    rng = np.random.default_rng(2)
    spec, _, _, _, _, kernel, _, belief, stages = _random_instance(rng, horizon=3)
    prob = constraint_probability(
        kernel, lambda t: np.ones(spec.num_states, bool), belief, DecisionProfile(stages)
    )
    assert prob == pytest.approx(1.0, abs=1e-12)


def test_constraint_probability_single_step_violation_mass():
    # One-step game: env splits 0.3/0.7 between an unsafe and a safe state.
    table = np.array([[[1, 2]], [[1, 1]], [[2, 2]]])
    spec = make_spec(table, np.zeros(3), np.zeros(3), [True, False, True], horizon=1)
    policy = PolicyTable(1, ENV, np.array([[0.3, 0.7], [0.5, 0.5], [0.5, 0.5]]))
    kernel = build_kernel(spec, {1: policy})
    belief = init_belief(0, [1.0], 3)
    prob = constraint_probability(
        kernel, spec.safe_sets, belief, DecisionProfile.deterministic([0], 1)
    )
    assert prob == pytest.approx(0.7, abs=1e-12)


def test_constraint_probability_zeroing_matches_path_enumeration():
    # Three-step chains where states can violate at different depths; the
    # violation mass must be counted exactly once per trajectory.
    rng = np.random.default_rng(3)
    for _ in range(10):
        spec, _, r1, safe, policies, kernel, prior, belief, stages = _random_instance(
            rng, nx=4, nu1=2, nu2=2, horizon=3, num_levels=2
        )
        start = int(np.flatnonzero(belief.probs)[0] % spec.num_states)
        prob = constraint_probability(
            kernel, spec.safe_sets, belief, DecisionProfile(stages)
        )
        _, oracle = profile_value_oracle(
            spec, policies, prior, start, stages, [safe] * 3, lambda s: 0.0, spec.discount
        )
        assert prob == pytest.approx(oracle, abs=1e-12)


def test_constraint_probability_monotone_in_safe_sets():
    rng = np.random.default_rng(4)
    spec, _, _, safe, _, kernel, _, belief, stages = _random_instance(rng, horizon=3)
    prob_small = constraint_probability(
        kernel, lambda t: safe, belief, DecisionProfile(stages)
    )
    bigger = safe.copy()
    bigger[np.flatnonzero(~bigger)[:1]] = True
    prob_big = constraint_probability(
        kernel, lambda t: bigger, belief, DecisionProfile(stages)
    )
    assert prob_big >= prob_small - 1e-12


def test_objective_affine_per_stage():
    """Three-point collinearity: fixing other stages, J is affine in one stage."""
    rng = np.random.default_rng(5)
    spec, _, r1, safe, _, kernel, _, belief, stages = _random_instance(
        rng, nx=5, nu1=3, nu2=2, horizon=3
    )
    reward_aug = lift_reward(r1, 2)
    for tau in range(3):
        a = rng.dirichlet(np.ones(3))
        b = rng.dirichlet(np.ones(3))
        vals = []
        for gamma in (a, b, 0.5 * (a + b)):
            s = stages.copy()
            s[tau] = gamma
            r = expected_reward(kernel, reward_aug, belief, DecisionProfile(s), spec.discount)
            p = constraint_probability(kernel, lambda t: safe, belief, DecisionProfile(s))
            vals.append((r, p))
        assert vals[2][0] == pytest.approx(0.5 * (vals[0][0] + vals[1][0]), abs=1e-10)
        assert vals[2][1] == pytest.approx(0.5 * (vals[0][1] + vals[1][1]), abs=1e-10)


def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    spec, _, r1, safe, _, kernel, _, belief, stages = _random_instance(
        rng, nx=5, nu1=3, nu2=2, horizon=3
    )
    reward_aug = lift_reward(r1, 2)
    masks = _stage_masks(lambda t: safe, 0, 3, spec.num_states)
    compiled = _CompiledHorizon(kernel, reward_aug, masks, belief, spec.discount)
    grad_r, grad_p = compiled.gradients(stages)
    h = 1e-5
    for tau in range(3):
        for u in range(3):
            for w in range(3):
                if w == u:
                    continue
                direction = np.zeros(3)
                direction[u], direction[w] = 1.0, -1.0
                plus, minus = stages.copy(), stages.copy()
                plus[tau] = stages[tau] + h * direction
                minus[tau] = stages[tau] - h * direction
                fd_r = (compiled.evaluate(plus)[0] - compiled.evaluate(minus)[0]) / (2 * h)
                fd_p = (compiled.evaluate(plus)[1] - compiled.evaluate(minus)[1]) / (2 * h)
                assert fd_r == pytest.approx(grad_r[tau, u] - grad_r[tau, w], abs=1e-4)
                assert fd_p == pytest.approx(grad_p[tau, u] - grad_p[tau, w], abs=1e-4)


def test_optimize_unconstrained_attains_best_vertex():
    rng = np.random.default_rng(7)
    spec, _, r1, safe, _, kernel, _, belief, _ = _random_instance(
        rng, nx=5, nu1=3, nu2=2, horizon=3
    )
    reward_aug = lift_reward(r1, 2)
    result = optimize(kernel, reward_aug, lambda t: safe, belief, 1.0, spec.discount, 3)
    assert result.feasible
    best = -np.inf
    for actions in itertools.product(range(3), repeat=3):
        profile = DecisionProfile.deterministic(actions, 3)
        best = max(best, expected_reward(kernel, reward_aug, belief, profile, spec.discount))
    assert result.expected_reward >= best - 1e-6


def test_optimize_empty_safe_set_reports_infeasible():
    rng = np.random.default_rng(8)
    spec, _, r1, _, _, kernel, _, belief, _ = _random_instance(rng, horizon=2)
    empty = np.zeros(spec.num_states, bool)
    result = optimize(
        kernel, lift_reward(r1, 2), lambda t: empty, belief, 0.01, spec.discount, 2
    )
    assert not result.feasible
    assert result.fallback
    assert result.constraint_probability == 0.0


def test_optimize_concentrates_on_dominant_safe_action():
    # Action 0 leads to a safe, high-reward state; action 1 to an unsafe,
    # low-reward one.  The optimum is the pure safe action.
    table = np.array([[[1], [2]], [[1], [1]], [[2], [2]]])
    spec = make_spec(table, [0.0, 10.0, 2.0], np.zeros(3), [True, True, False], horizon=3)
    kernel = build_kernel(spec, {1: PolicyTable(1, ENV, np.ones((3, 1)))})
    belief = init_belief(0, [1.0], 3)
    result = optimize(
        kernel, lift_reward([0.0, 10.0, 2.0], 1), spec.safe_sets, belief,
        0.01, spec.discount, 3,
    )
    assert result.feasible
    assert result.profile.stages[0, 0] >= 0.99


def test_optimize_randomizes_at_the_constraint_boundary():
    # The unsafe action is worth more; the optimum mixes it in with mass
    # epsilon, beating every feasible vertex.
    table = np.array([[[1], [2]], [[1], [1]], [[2], [2]]])
    spec = make_spec(table, [0.0, 1.0, 100.0], np.zeros(3), [True, True, False], horizon=1)
    kernel = build_kernel(spec, {1: PolicyTable(1, ENV, np.ones((3, 1)))})
    belief = init_belief(0, [1.0], 3)
    result = optimize(
        kernel, lift_reward([0.0, 1.0, 100.0], 1), spec.safe_sets, belief,
        0.05, spec.discount, 1,
    )
    assert result.feasible
    assert result.constraint_probability == pytest.approx(0.95, abs=1e-6)
    assert result.profile.stages[0, 1] == pytest.approx(0.05, abs=1e-6)
    assert result.expected_reward > 1.0 + 1e-6  # better than the safe vertex


def test_optimize_is_deterministic():
    rng = np.random.default_rng(9)
    spec, _, r1, safe, _, kernel, _, belief, _ = _random_instance(
        rng, nx=5, nu1=3, nu2=2, horizon=3
    )
    args = (kernel, lift_reward(r1, 2), lambda t: safe, belief, 0.1, spec.discount, 3)
    a = optimize(*args)
    b = optimize(*args)
    assert np.array_equal(a.profile.stages, b.profile.stages)
    assert (a.expected_reward, a.constraint_probability, a.feasible, a.iterations) == (
        b.expected_reward, b.constraint_probability, b.feasible, b.iterations
    )


def test_optimize_result_honors_feasibility_invariant():
    # Whenever feasible is reported, the exact probability meets 1 - epsilon.
    rng = np.random.default_rng(21)
    for _ in range(15):
        spec, _, r1, safe, _, kernel, _, belief, _ = _random_instance(rng)
        epsilon = float(rng.choice([0.0, 0.01, 0.2, 0.5, 1.0]))
        result = optimize(
            kernel, lift_reward(r1, 2), lambda t: safe, belief,
            epsilon, spec.discount, spec.horizon,
        )
        assert 0.0 <= result.constraint_probability <= 1.0
        if result.feasible:
            assert result.constraint_probability >= 1.0 - epsilon
        else:
            assert result.fallback


def test_optimize_rejects_bad_epsilon():
    rng = np.random.default_rng(10)
    spec, _, r1, safe, _, kernel, _, belief, _ = _random_instance(rng, horizon=2)
    with pytest.raises(ValueError):
        optimize(kernel, lift_reward(r1, 2), lambda t: safe, belief, 1.5, spec.discount, 2)


class _StubPlanner:
    def __init__(self, stages):
        self.result = PlanResult(
            profile=DecisionProfile(np.asarray(stages, float)),
            expected_reward=0.0,
            constraint_probability=1.0,
            feasible=True,
        )

    def plan(self, belief, t=0):
        return self.result


def test_receding_horizon_step_one_hot_is_deterministic():
    planner = _StubPlanner([[0.0, 1.0], [1.0, 0.0]])
    rng = np.random.default_rng(0)
    actions = {receding_horizon_step(planner, None, 0, rng)[0] for _ in range(20)}
    assert actions == {1}


def test_receding_horizon_step_seed_reproducibility():
    planner = _StubPlanner([[0.25, 0.75]])
    seq1 = [
        receding_horizon_step(planner, None, 0, np.random.default_rng(42))[0]
        for _ in range(10)
    ]
    rng = np.random.default_rng(42)
    # A fresh generator restarted per draw must reproduce the first element.
    assert seq1[0] == receding_horizon_step(planner, None, 0, np.random.default_rng(42))[0]
    seq2 = [receding_horizon_step(planner, None, 0, rng)[0] for _ in range(10)]
    rng = np.random.default_rng(42)
    seq3 = [receding_horizon_step(planner, None, 0, rng)[0] for _ in range(10)]
    assert seq2 == seq3


def test_receding_horizon_step_sampling_frequencies():
    planner = _StubPlanner([[0.25, 0.75]])
    rng = np.random.default_rng(123)
    n = 100_000
    draws = np.array([receding_horizon_step(planner, None, 0, rng)[0] for _ in range(n)])
    assert abs((draws == 1).mean() - 0.75) < 0.01


def test_maximin_single_agent_coincides_with_exhaustive_optimum():
    rng = np.random.default_rng(11)
    nx, nu1 = 5, 3
    table1 = rng.integers(0, nx, size=(nx, nu1))
    table = np.repeat(table1[:, :, None], 2, axis=2)  # opponent irrelevant
    r1 = rng.normal(size=nx)
    spec = make_spec(table, r1, np.zeros(nx), np.ones(nx, bool), horizon=3)
    seq = maximin_plan(spec, 0)

    def value(actions):
        x, total, disc = 0, 0.0, 1.0
        for u in actions:
            x = int(table[x, u, 0])
            total += disc * r1[x]
            disc *= spec.discount
        return total

    best = max(value(a) for a in itertools.product(range(nu1), repeat=3))
    assert value(seq) == pytest.approx(best, abs=1e-12)


def test_maximin_matches_matrix_minimax():
    # One-step simultaneous game: outcome states encode the payoff matrix.
    payoff = np.array([[1.0, -1.0], [-2.0, 3.0]])
    table = np.zeros((5, 2, 2), dtype=int)
    rewards = np.zeros(5)
    for i in range(2):
        for j in range(2):
            table[0, i, j] = 1 + 2 * i + j
            rewards[1 + 2 * i + j] = payoff[i, j]
    spec = make_spec(table, rewards, np.zeros(5), np.ones(5, bool), horizon=1)
    seq = maximin_plan(spec, 0)
    achieved = min(rewards[table[0, seq[0], j]] for j in range(2))
    assert achieved == pytest.approx(payoff.min(axis=1).max(), abs=1e-12)


def test_maximin_single_safe_action():
    table = np.array([[[1], [2]], [[1], [1]], [[2], [2]]])
    spec = make_spec(table, [0.0, 1.0, 50.0], np.zeros(3), [True, True, False], horizon=1)
    assert maximin_plan(spec, 0) == (0,)


def test_maximin_raises_when_everything_violates():
    table = np.array([[[1], [1]], [[1], [1]]])
    spec = make_spec(table, [0.0, 0.0], [0.0, 0.0], [True, False], horizon=2)
    with pytest.raises(NoRobustPlanError):
        maximin_plan(spec, 0)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_project_to_simplex_returns_simplex_point(values):
    out = project_to_simplex(np.asarray(values))
    assert out.min() >= 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-9)


def test_project_to_simplex_fixed_point():
    v = np.array([0.2, 0.3, 0.5])
    assert np.allclose(project_to_simplex(v), v, atol=1e-12)
