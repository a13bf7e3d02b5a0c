"""Chance-constrained optimization of randomized open-loop action profiles.

The decision variable is a profile of per-stage distributions over ego
actions.  Two exact evaluators drive the solver:

* the expected discounted sum of successor-state rewards under the
  level-mixture opponent model, computed by propagating the predicted
  augmented-state distribution forward and taking reward inner products; and
* the probability that the whole predicted trajectory stays inside the safe
  sets, computed by the propagate / accumulate-violation / zero-out
  recursion, so that trajectories are never double counted once they have
  left the safe region.

Both quantities are multilinear in the profile, which gives exact
coordinate gradients from stage-forced evaluations.  The solver enumerates
all deterministic profiles (vertices of the simplex product) and improves
on them with projected gradient ascent only when the chance constraint
binds; randomization can beat every vertex only near the constraint
boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .game import EGO, ROW_SUM_TOL, GameSpec, reward_table, safe_mask, tabulate_transitions
from .inference import AugmentedKernel, Belief

__all__ = [
    "DecisionProfile",
    "PlanResult",
    "Planner",
    "NoRobustPlanError",
    "expected_reward",
    "constraint_probability",
    "optimize",
    "receding_horizon_step",
    "maximin_plan",
    "project_to_simplex",
    "lift_reward",
]


class NoRobustPlanError(RuntimeError):
    """Every open-loop ego sequence violates the safe sets under some opponent."""


@dataclass(frozen=True)
class DecisionProfile:
    """Sequence of per-stage probability distributions over the ego action set."""

    stages: np.ndarray

    def __post_init__(self):
        stages = np.asarray(self.stages, dtype=float)
        if stages.ndim != 2:
            raise ValueError("profile must be 2-D (stages x ego actions)")
        if stages.min(initial=0.0) < -1e-12 or stages.max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("profile entries must lie in [0, 1]")
        sums = stages.sum(axis=1)
        if np.abs(sums - 1.0).max(initial=0.0) > ROW_SUM_TOL:
            raise ValueError(f"profile stages must sum to 1 within {ROW_SUM_TOL}")
        object.__setattr__(self, "stages", stages)

    @property
    def horizon(self) -> int:
        return self.stages.shape[0]

    @property
    def num_actions(self) -> int:
        return self.stages.shape[1]

    @staticmethod
    def uniform(horizon: int, num_actions: int) -> "DecisionProfile":
        return DecisionProfile(np.full((horizon, num_actions), 1.0 / num_actions))

    @staticmethod
    def deterministic(actions: Sequence[int], num_actions: int) -> "DecisionProfile":
        stages = np.zeros((len(actions), num_actions))
        stages[np.arange(len(actions)), list(actions)] = 1.0
        return DecisionProfile(stages)


@dataclass(frozen=True)
class PlanResult:
    """Solver output: the chosen profile plus its exact evaluations."""

    profile: DecisionProfile
    expected_reward: float
    constraint_probability: float
    feasible: bool
    iterations: int = 0
    fallback: bool = False


class _Step(NamedTuple):
    """One unrolled stage: sparse local transitions plus stage metadata."""

    src: np.ndarray      # local index of the source state per entry
    u_idx: np.ndarray    # ego action per entry
    dst: np.ndarray      # local index of the target state per entry
    probs: np.ndarray    # transition probability per entry
    n_next: int          # size of the next stage's local index space
    rewards: np.ndarray  # reward per next-stage local state
    safe: np.ndarray     # safe-set membership per next-stage local state


class _CompiledHorizon:
    """Reachable-set propagation graph for one planning instance.

    Unrolls the kernel over the states reachable from the belief support
    within the horizon, with per-step local index spaces.  Evaluating a
    profile then costs one gather + bincount pass per stage, independent of
    the full augmented-space size.
    """

    def __init__(
        self,
        kernel: AugmentedKernel,
        reward_aug: np.ndarray,
        safe_masks: Sequence[np.ndarray],
        belief: Belief,
        discount: float,
    ):
        horizon = len(safe_masks)
        nu = kernel.num_ego_actions
        nx = kernel.num_states
        if reward_aug.shape != (kernel.num_augmented,):
            raise ValueError(
                f"reward vector length {reward_aug.size} does not match the "
                f"augmented space ({kernel.num_augmented})"
            )
        if belief.probs.size != kernel.num_augmented:
            raise ValueError("belief does not match the kernel's augmented space")
        self.horizon = horizon
        self.num_actions = nu
        self.discount = discount
        support = np.flatnonzero(belief.probs)
        self.p0 = belief.probs[support]
        self.steps: list[_Step] = []
        reach = support
        for tau in range(horizon):
            rows = (reach[:, None] * nu + np.arange(nu, dtype=np.int64)[None, :]).ravel()
            which, targets, probs = kernel.expand_rows(rows)
            uniq, dst_local = np.unique(targets, return_inverse=True)
            mask = np.asarray(safe_masks[tau], dtype=bool)
            if mask.shape != (nx,):
                raise ValueError(
                    f"safe mask at stage {tau} has shape {mask.shape}, expected ({nx},)"
                )
            self.steps.append(
                _Step(
                    src=which // nu,
                    u_idx=which % nu,
                    dst=dst_local,
                    probs=probs,
                    n_next=uniq.size,
                    rewards=reward_aug[uniq],
                    safe=mask[uniq % nx],
                )
            )
            reach = uniq

    def evaluate(self, stages: np.ndarray) -> tuple[float, float]:
        """Exact ``(expected reward, joint safe probability)`` of a profile."""
        d = self.p0
        dv = self.p0
        reward = 0.0
        violation = 0.0
        disc = 1.0
        for tau, step in enumerate(self.steps):
            w = step.probs * stages[tau][step.u_idx]
            d = np.bincount(step.dst, weights=w * d[step.src], minlength=step.n_next)
            dv = np.bincount(step.dst, weights=w * dv[step.src], minlength=step.n_next)
            reward += disc * float(d @ step.rewards)
            violation += float(dv[~step.safe].sum())
            if tau + 1 < self.horizon:
                dv = np.where(step.safe, dv, 0.0)
            disc *= self.discount
        return reward, min(max(1.0 - violation, 0.0), 1.0)

    def gradients(self, stages: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact profile gradients of reward and constraint probability.

        By multilinearity, the partial derivative with respect to one stage
        coordinate equals the evaluation with that stage forced to the
        corresponding vertex.
        """
        grad_r = np.empty_like(stages)
        grad_p = np.empty_like(stages)
        forced = np.array(stages, copy=True)
        for tau in range(self.horizon):
            saved = forced[tau].copy()
            for u in range(self.num_actions):
                forced[tau] = 0.0
                forced[tau, u] = 1.0
                grad_r[tau, u], grad_p[tau, u] = self.evaluate(forced)
            forced[tau] = saved
        return grad_r, grad_p


def lift_reward(reward_x: np.ndarray, num_levels: int) -> np.ndarray:
    """Tile a per-physical-state reward vector over the level axis."""
    return np.tile(np.asarray(reward_x, dtype=float), num_levels)


def _stage_masks(safe_sets: Callable[[int], np.ndarray], t: int, horizon: int,
                 num_states: int) -> list[np.ndarray]:
    masks = []
    for tau in range(horizon):
        mask = np.asarray(safe_sets(t + tau + 1), dtype=bool)
        if mask.shape != (num_states,):
            raise ValueError(
                f"safe set at t={t + tau + 1} has shape {mask.shape}, "
                f"expected ({num_states},)"
            )
        masks.append(mask)
    return masks


def expected_reward(
    kernel: AugmentedKernel,
    reward_aug: np.ndarray,
    belief: Belief,
    profile: DecisionProfile,
    discount: float,
) -> float:
    """Expected discounted sum of successor-state rewards under a profile.

    Stage ``tau`` contributes ``discount^tau * r' pi_{tau+1}`` where
    ``pi_{tau+1}`` is the predicted augmented-state distribution.
    """
    trivial = [np.ones(kernel.num_states, dtype=bool)] * profile.horizon
    compiled = _CompiledHorizon(kernel, np.asarray(reward_aug, float), trivial, belief, discount)
    reward, _ = compiled.evaluate(profile.stages)
    return reward


def constraint_probability(
    kernel: AugmentedKernel,
    safe_sets: Callable[[int], np.ndarray],
    belief: Belief,
    profile: DecisionProfile,
    t: int = 0,
) -> float:
    """Probability that all of the next ``horizon`` predicted states are safe.

    Evaluated by the exact forward recursion: propagate, add the mass that
    falls outside the stage's safe set to the violation total, zero that
    mass, continue.  The zeroing prevents double counting of trajectories
    that have already violated.
    """
    masks = _stage_masks(safe_sets, t, profile.horizon, kernel.num_states)
    reward0 = np.zeros(kernel.num_augmented)
    compiled = _CompiledHorizon(kernel, reward0, masks, belief, 1.0)
    _, prob = compiled.evaluate(profile.stages)
    return prob


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.flatnonzero(u * np.arange(1, v.size + 1) > (css - 1.0))
    if rho.size == 0:
        out = np.zeros_like(v)
        out[int(np.argmax(v))] = 1.0
        return out
    theta = (css[rho[-1]] - 1.0) / (rho[-1] + 1.0)
    out = np.maximum(v - theta, 0.0)
    s = out.sum()
    return out / s if s > 0 else np.full_like(v, 1.0 / v.size)


def _project_stages(stages: np.ndarray) -> np.ndarray:
    return np.vstack([project_to_simplex(row) for row in stages])


def _penalized(reward: float, prob: float, threshold: float, rho: float) -> float:
    return reward + rho * min(0.0, prob - threshold)


def _ascend(
    compiled: _CompiledHorizon,
    stages: np.ndarray,
    threshold: float,
    rho: float,
    max_iters: int,
) -> tuple[np.ndarray, int]:
    """Projected gradient ascent on the penalized objective."""
    stages = stages.copy()
    reward, prob = compiled.evaluate(stages)
    phi = _penalized(reward, prob, threshold, rho)
    iters = 0
    for _ in range(max_iters):
        iters += 1
        grad_r, grad_p = compiled.gradients(stages)
        grad = grad_r + (rho * grad_p if prob < threshold else 0.0)
        scale = np.abs(grad).max()
        if scale <= 0.0:
            break
        lr = 0.5 / scale
        improved = False
        for _ in range(12):
            cand = _project_stages(stages + lr * grad)
            r_c, p_c = compiled.evaluate(cand)
            phi_c = _penalized(r_c, p_c, threshold, rho)
            if phi_c > phi + 1e-12:
                stages, reward, prob, phi = cand, r_c, p_c, phi_c
                improved = True
                break
            lr *= 0.5
        if not improved:
            break
    return stages, iters


def _bisect_feasible(
    compiled: _CompiledHorizon,
    stages: np.ndarray,
    anchor: np.ndarray,
    threshold: float,
) -> np.ndarray:
    """Smallest mix toward a feasible anchor that restores feasibility."""
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        cand = (1.0 - mid) * stages + mid * anchor
        _, p = compiled.evaluate(cand)
        if p >= threshold:
            hi = mid
        else:
            lo = mid
    return (1.0 - hi) * stages + hi * anchor


def optimize(
    kernel: AugmentedKernel,
    reward_aug: np.ndarray,
    safe_sets: Callable[[int], np.ndarray],
    belief: Belief,
    epsilon: float,
    discount: float,
    horizon: int,
    t: int = 0,
    max_iters: int = 40,
) -> PlanResult:
    """Maximize expected reward subject to the time-joint chance constraint.

    All deterministic profiles are enumerated first; their best feasible
    member both warm-starts and lower-bounds the solution.  If no profile
    can reach ``1 - epsilon`` joint-safety probability (the maximum of a
    multilinear function over a product of simplices is attained at a
    vertex, so vertex enumeration decides this exactly), the result carries
    ``feasible=False`` and the probability-maximizing profile, ties broken
    by expected reward -- the caller chooses what to do with it.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon out of [0, 1]: {epsilon!r}")
    reward_aug = np.asarray(reward_aug, dtype=float)
    masks = _stage_masks(safe_sets, t, horizon, kernel.num_states)
    compiled = _CompiledHorizon(kernel, reward_aug, masks, belief, discount)
    nu = kernel.num_ego_actions
    threshold = 1.0 - epsilon

    vertices = list(itertools.product(range(nu), repeat=horizon))
    vertex_r = np.empty(len(vertices))
    vertex_p = np.empty(len(vertices))
    stages_buf = np.zeros((horizon, nu))
    for i, actions in enumerate(vertices):
        stages_buf[:] = 0.0
        stages_buf[np.arange(horizon), actions] = 1.0
        vertex_r[i], vertex_p[i] = compiled.evaluate(stages_buf)

    feasible = vertex_p >= threshold
    if not feasible.any():
        # Exact infeasibility: no profile (randomized or not) can do better
        # than the best vertex probability.
        best_p = vertex_p.max()
        near = vertex_p >= best_p - 1e-15
        pick = int(np.flatnonzero(near)[np.argmax(vertex_r[near])])
        return PlanResult(
            profile=DecisionProfile.deterministic(vertices[pick], nu),
            expected_reward=float(vertex_r[pick]),
            constraint_probability=float(vertex_p[pick]),
            feasible=False,
            iterations=0,
            fallback=True,
        )

    feas_idx = np.flatnonzero(feasible)
    best_feas = int(feas_idx[np.argmax(vertex_r[feas_idx])])
    best_stages = np.zeros((horizon, nu))
    best_stages[np.arange(horizon), vertices[best_feas]] = 1.0
    best_r = float(vertex_r[best_feas])
    best_p = float(vertex_p[best_feas])

    if best_r >= vertex_r.max() - 1e-15:
        # The unconstrained optimum is feasible; randomization cannot improve
        # on it (multilinear objective attains its maximum at a vertex).
        return PlanResult(
            profile=DecisionProfile(best_stages),
            expected_reward=best_r,
            constraint_probability=best_p,
            feasible=True,
            iterations=0,
        )

    reward_span = float(vertex_r.max() - vertex_r.min())
    iterations = 0
    candidates = [(best_r, best_p, best_stages)]
    for start in (best_stages, np.full((horizon, nu), 1.0 / nu)):
        rho = max(10.0 * reward_span, 1.0) / max(epsilon, 1e-6)
        stages = start
        for _ in range(2):
            stages, used = _ascend(compiled, stages, threshold, rho, max_iters)
            iterations += used
            _, p_end = compiled.evaluate(stages)
            if p_end >= threshold:
                break
            rho *= 10.0
        r_end, p_end = compiled.evaluate(stages)
        if p_end < threshold:
            stages = _bisect_feasible(compiled, stages, best_stages, threshold)
            r_end, p_end = compiled.evaluate(stages)
        if p_end >= threshold:
            candidates.append((r_end, p_end, stages))

    # Boundary polish: the constrained optimum mixes the best feasible point
    # with the reward-maximizing (infeasible) vertex; push as much mass
    # toward the latter as the constraint allows.
    r_best, _, stages_best = max(candidates, key=lambda c: c[0])
    top = int(np.argmax(vertex_r))
    top_stages = np.zeros((horizon, nu))
    top_stages[np.arange(horizon), vertices[top]] = 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cand = (1.0 - mid) * stages_best + mid * top_stages
        r_c, p_c = compiled.evaluate(cand)
        if p_c >= threshold:
            lo = mid
            if r_c > r_best:
                candidates.append((r_c, p_c, cand))
                r_best = r_c
        else:
            hi = mid

    r_fin, p_fin, stages_fin = max(candidates, key=lambda c: c[0])
    return PlanResult(
        profile=DecisionProfile(stages_fin),
        expected_reward=float(r_fin),
        constraint_probability=float(p_fin),
        feasible=True,
        iterations=iterations,
    )


@dataclass(frozen=True)
class Planner:
    """Bundle of everything :func:`optimize` needs except the belief and time."""

    kernel: AugmentedKernel
    reward_aug: np.ndarray
    safe_sets: Callable[[int], np.ndarray]
    epsilon: float
    discount: float
    horizon: int
    max_iters: int = 40

    def plan(self, belief: Belief, t: int = 0) -> PlanResult:
        return optimize(
            self.kernel,
            self.reward_aug,
            self.safe_sets,
            belief,
            self.epsilon,
            self.discount,
            self.horizon,
            t=t,
            max_iters=self.max_iters,
        )


def receding_horizon_step(
    planner: Planner, belief: Belief, t: int, rng: np.random.Generator
) -> tuple[int, PlanResult]:
    """Plan at time ``t`` and sample the executed action from the first stage."""
    result = planner.plan(belief, t)
    gamma0 = result.profile.stages[0]
    action = int(rng.choice(gamma0.size, p=gamma0 / gamma0.sum()))
    return action, result


def maximin_plan(
    spec: GameSpec,
    state: int,
    horizon: int | None = None,
    discount: float | None = None,
    t: int = 0,
) -> tuple[int, ...]:
    """Robust open-loop baseline: best ego sequence against the worst opponent.

    Enumerates all ego action sequences; each is scored by its worst-case
    discounted reward over all opponent sequences, with any sequence pair
    that leaves a safe set scored as minus infinity.  Ties go to the
    lexicographically smallest ego sequence.

    Raises
    ------
    NoRobustPlanError
        If every ego sequence can be forced to violate the safe sets.
    """
    horizon = spec.horizon if horizon is None else horizon
    discount = spec.discount if discount is None else discount
    if not 0 <= state < spec.num_states:
        raise ValueError(f"state {state} out of range")
    table = tabulate_transitions(spec)
    rewards = reward_table(spec, EGO)
    masks = [safe_mask(spec, t + tau + 1) for tau in range(horizon)]
    env_seqs = list(itertools.product(range(spec.num_env_actions), repeat=horizon))

    best_val = -np.inf
    best_seq: tuple[int, ...] | None = None
    for ego_seq in itertools.product(range(spec.num_ego_actions), repeat=horizon):
        worst = np.inf
        for env_seq in env_seqs:
            x = state
            val = 0.0
            disc = 1.0
            for tau in range(horizon):
                x = int(table[x, ego_seq[tau], env_seq[tau]])
                if not masks[tau][x]:
                    val = -np.inf
                    break
                val += disc * float(rewards[x])
                disc *= discount
            if val < worst:
                worst = val
                if worst == -np.inf:
                    break
        if worst > best_val:
            best_val = worst
            best_seq = ego_seq
    if best_seq is None or best_val == -np.inf:
        raise NoRobustPlanError(
            f"no ego sequence of length {horizon} is safe against every opponent"
        )
    return best_seq
