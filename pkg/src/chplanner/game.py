"""Finite two-player dynamic-game primitives.

States and actions are dense integer indices; domain layers supply codecs
between indices and physical values.  Transitions are deterministic: all
stochasticity in the planning stack enters through the opponent's policy.
Every object here is immutable after construction, so specs, policies and
the tables derived from them are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "EGO",
    "ENV",
    "ROW_SUM_TOL",
    "GameSpec",
    "PolicyTable",
    "ValidationReport",
    "reward_table",
    "safe_mask",
    "step",
    "tabulate_transitions",
    "validate_game",
]

EGO = 1
ENV = 2

# Tolerance for "rows of a stochastic table sum to one".
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GameSpec:
    """Two-player dynamic game ``<X, U1 x U2, T, {R1, R2}, {X_t}, discount, horizon>``.

    ``transition`` must be total: it has to return a valid state index for
    every in-range ``(state, u1, u2)`` triple.  Rewards are functions of the
    successor state only; the general ``(state, u1, u2)`` reward form is out
    of scope.  ``safe_sets`` maps an absolute time ``t`` to a boolean
    membership mask over states; time-invariant games return the same mask
    for every ``t``.

    The optional ``*_table`` fields let constructors that already hold
    vectorized tables share them with the numeric layers; when absent the
    tables are built on demand from the callables.
    """

    num_states: int
    num_ego_actions: int
    num_env_actions: int
    transition: Callable[[int, int, int], int]
    ego_reward: Callable[[int], float]
    env_reward: Callable[[int], float]
    safe_sets: Callable[[int], np.ndarray]
    discount: float
    horizon: int
    transition_table: np.ndarray | None = field(default=None, repr=False, compare=False)
    ego_reward_table: np.ndarray | None = field(default=None, repr=False, compare=False)
    env_reward_table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def num_actions(self, player: int) -> int:
        if player == EGO:
            return self.num_ego_actions
        if player == ENV:
            return self.num_env_actions
        raise ValueError(f"player must be {EGO} or {ENV}, got {player}")


@dataclass(frozen=True)
class PolicyTable:
    """Stochastic state-to-action map for one player at one reasoning level.

    ``probs[x, u]`` is the probability that the player picks action ``u`` in
    state ``x``.  Rows must sum to one within ``ROW_SUM_TOL``; construction
    fails otherwise, so a ``PolicyTable`` instance is row-stochastic by
    contract.
    """

    level: int
    player: int
    probs: np.ndarray

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"policy level must be >= 0, got {self.level}")
        if self.player not in (EGO, ENV):
            raise ValueError(f"player must be {EGO} or {ENV}, got {self.player}")
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D (states x actions)")
        if probs.min(initial=0.0) < -1e-12 or probs.max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("policy probabilities must lie in [0, 1]")
        rowsum = probs.sum(axis=1)
        bad = np.abs(rowsum - 1.0) > ROW_SUM_TOL
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"policy rows must sum to 1 within {ROW_SUM_TOL}; "
                f"row {i} sums to {rowsum[i]!r}"
            )
        object.__setattr__(self, "probs", probs)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_game`: ``ok`` plus human-readable problems."""

    ok: bool
    problems: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.ok


def tabulate_transitions(spec: GameSpec) -> np.ndarray:
    """Dense successor table ``T[x, u1, u2] -> next state index``.

    Returns the precomputed table when the spec carries one, otherwise
    evaluates the transition callable over the whole product space.
    """
    if spec.transition_table is not None:
        return spec.transition_table
    table = np.empty(
        (spec.num_states, spec.num_ego_actions, spec.num_env_actions), dtype=np.int64
    )
    for x in range(spec.num_states):
        for u1 in range(spec.num_ego_actions):
            for u2 in range(spec.num_env_actions):
                table[x, u1, u2] = spec.transition(x, u1, u2)
    return table


def reward_table(spec: GameSpec, player: int) -> np.ndarray:
    """Vector of per-state reward values ``R^player(x)`` over all states."""
    if player == EGO and spec.ego_reward_table is not None:
        return spec.ego_reward_table
    if player == ENV and spec.env_reward_table is not None:
        return spec.env_reward_table
    fn = spec.ego_reward if player == EGO else spec.env_reward
    if player not in (EGO, ENV):
        raise ValueError(f"player must be {EGO} or {ENV}, got {player}")
    return np.fromiter(
        (fn(x) for x in range(spec.num_states)), dtype=float, count=spec.num_states
    )


def safe_mask(spec: GameSpec, t: int) -> np.ndarray:
    """Boolean membership mask of the safe set ``X_t``."""
    mask = np.asarray(spec.safe_sets(t), dtype=bool)
    if mask.shape != (spec.num_states,):
        raise ValueError(
            f"safe set at t={t} has shape {mask.shape}, expected ({spec.num_states},)"
        )
    return mask


def step(spec: GameSpec, state: int, u1: int, u2: int) -> tuple[int, float, float]:
    """Advance the game one step.

    Returns ``(next_state, ego_reward, env_reward)`` with both rewards
    evaluated at the successor state.

    Raises
    ------
    ValueError
        If ``state``, ``u1`` or ``u2`` is out of range.
    """
    if not 0 <= state < spec.num_states:
        raise ValueError(f"state {state} out of range [0, {spec.num_states})")
    if not 0 <= u1 < spec.num_ego_actions:
        raise ValueError(f"ego action {u1} out of range [0, {spec.num_ego_actions})")
    if not 0 <= u2 < spec.num_env_actions:
        raise ValueError(f"env action {u2} out of range [0, {spec.num_env_actions})")
    nxt = int(spec.transition(state, u1, u2))
    return nxt, float(spec.ego_reward(nxt)), float(spec.env_reward(nxt))


def validate_game(spec: GameSpec, check_time_steps: int = 1) -> ValidationReport:
    """Diagnostic check of the :class:`GameSpec` invariants.

    Never raises for invariant violations; collects them into the report
    instead.  ``check_time_steps`` controls how many safe-set masks are
    inspected (time-invariant games only need one).
    """
    problems: list[str] = []
    if spec.num_states < 1:
        problems.append(f"num_states must be >= 1, got {spec.num_states}")
    if spec.num_ego_actions < 1 or spec.num_env_actions < 1:
        problems.append("both players need at least one action")
    if not 0.0 < spec.discount <= 1.0:
        problems.append(f"discount out of (0,1]: {spec.discount!r}")
    if spec.horizon < 1:
        problems.append(f"horizon must be >= 1, got {spec.horizon}")
    if problems:
        return ValidationReport(False, tuple(problems))

    table = tabulate_transitions(spec)
    bad = (table < 0) | (table >= spec.num_states)
    if bad.any():
        for x, u1, u2 in np.argwhere(bad)[:5]:
            problems.append(
                f"transition out of range at (state={x}, u1={u1}, u2={u2}): "
                f"-> {table[x, u1, u2]}"
            )
        extra = int(bad.sum()) - min(5, int(bad.sum()))
        if extra > 0:
            problems.append(f"... and {extra} more out-of-range transitions")

    for player, name in ((EGO, "ego"), (ENV, "env")):
        rewards = reward_table(spec, player)
        if not np.isfinite(rewards).all():
            idx = int(np.argmax(~np.isfinite(rewards)))
            problems.append(f"{name}_reward not finite at state {idx}")

    for t in range(check_time_steps):
        try:
            safe_mask(spec, t)
        except ValueError as exc:
            problems.append(str(exc))

    return ValidationReport(not problems, tuple(problems))
