"""Recursive construction of level-k softmax policies for both players.

A level-k policy is the softmax of a Q-table computed against the opponent's
level-(k-1) policy.  The Q-value of ``(x, u)`` is the best expected
discounted reward over *open-loop* continuations: the maximization runs over
fixed action sequences (first action pinned to ``u``) and sits outside the
expectation over opponent behavior.  A closed-loop dynamic program would in
general give different (larger) values and is intentionally not what is
computed here.

Hard state constraints are never imposed during hierarchy construction;
safety enters only through whatever penalties the game's reward functions
carry.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .game import (
    EGO,
    ENV,
    GameSpec,
    PolicyTable,
    reward_table,
    tabulate_transitions,
)

__all__ = [
    "QTable",
    "Hierarchy",
    "softmax_policy",
    "compute_q",
    "build_hierarchy",
    "hierarchy_content_hash",
    "save_hierarchy",
    "load_hierarchy",
]

CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class QTable:
    """State-action values for one player at one reasoning level."""

    level: int
    player: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("Q-table must be 2-D (states x actions)")
        if not np.isfinite(values).all():
            raise ValueError("Q-table contains non-finite entries")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class Hierarchy:
    """Ladder of policies ``level 0..k_max`` for both players.

    ``provenance`` records, per constructed table, which lower-level table
    it was built from; the two level-0 anchors are marked as supplied.
    """

    k_max: int
    ego_policies: tuple[PolicyTable, ...]
    env_policies: tuple[PolicyTable, ...]
    provenance: tuple[str, ...]

    def ego(self, k: int) -> PolicyTable:
        return self.ego_policies[k]

    def env(self, k: int) -> PolicyTable:
        return self.env_policies[k]


def softmax_policy(q: QTable, temperature: float = 1.0) -> PolicyTable:
    """Row-wise softmax of a Q-table, computed with max subtraction.

    With the default unit temperature the action probabilities are
    proportional to ``exp(Q(x, u))``; reward scaling therefore controls how
    sharp the resulting policy is.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = q.values / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return PolicyTable(level=q.level, player=q.player, probs=probs)


def _own_major_table(spec: GameSpec, player: int) -> np.ndarray:
    """Successor table with the player's own action on axis 1."""
    table = tabulate_transitions(spec)
    if player == EGO:
        return table
    return table.transpose(0, 2, 1)


def _suffix_values(
    succ: np.ndarray, opp_probs: np.ndarray, rewards: np.ndarray,
    discount: float, depth: int,
) -> Iterator[np.ndarray]:
    """Yield one expected-value vector per own-action suffix of ``depth`` steps.

    For a suffix ``(a_1, ..., a_d)`` the yielded vector holds, per start
    state, the expected value of ``sum_j discount^(j-1) R(x_j)`` when the
    player executes the suffix and the opponent draws from ``opp_probs`` at
    each visited state independently.  Shared suffix tails are evaluated
    once (depth-first enumeration), keeping the cost at
    ``sum_d |U_own|^d`` vectorized backups.
    """
    if depth == 0:
        yield np.zeros(succ.shape[0])
        return
    n_own = succ.shape[1]
    for tail in _suffix_values(succ, opp_probs, rewards, discount, depth - 1):
        for u in range(n_own):
            nxt = succ[:, u, :]
            yield (opp_probs * (rewards[nxt] + discount * tail[nxt])).sum(axis=1)


def compute_q(spec: GameSpec, player: int, opponent_policy: PolicyTable) -> QTable:
    """Open-loop expectimax Q-table for ``player`` against a fixed opponent policy.

    ``Q[x, u]`` is the maximum over the player's own action sequences of
    length ``horizon - 1`` (the first action being ``u``) of the exact
    expected discounted reward over ``horizon`` steps, with the opponent
    sampling independently per visited state from ``opponent_policy`` and
    states evolving through the game transition.  The expectation enumerates
    all opponent branches; nothing is sampled.
    """
    if player not in (EGO, ENV):
        raise ValueError(f"player must be {EGO} or {ENV}, got {player}")
    if opponent_policy.player == player:
        raise ValueError("opponent_policy belongs to the same player")
    n_own = spec.num_actions(player)
    n_opp = spec.num_actions(opponent_policy.player)
    if opponent_policy.probs.shape != (spec.num_states, n_opp):
        raise ValueError(
            f"opponent policy shape {opponent_policy.probs.shape} does not match "
            f"({spec.num_states}, {n_opp})"
        )
    succ = _own_major_table(spec, player)
    rewards = reward_table(spec, player)
    opp_probs = opponent_policy.probs
    values = np.full((spec.num_states, n_own), -np.inf)
    for tail in _suffix_values(succ, opp_probs, rewards, spec.discount, spec.horizon - 1):
        for u in range(n_own):
            nxt = succ[:, u, :]
            v = (opp_probs * (rewards[nxt] + spec.discount * tail[nxt])).sum(axis=1)
            np.maximum(values[:, u], v, out=values[:, u])
    return QTable(level=opponent_policy.level + 1, player=player, values=values)


def build_hierarchy(
    spec: GameSpec,
    k_max: int,
    level0_ego: PolicyTable,
    level0_env: PolicyTable,
    temperature: float = 1.0,
) -> Hierarchy:
    """Build softmax policies for levels ``1..k_max`` from the level-0 anchors.

    Level ``k`` of one player responds to level ``k-1`` of the other:
    ``env[k] = softmax(Q(env | ego[k-1]))`` and symmetrically for the ego
    side.  The construction is deterministic: identical inputs reproduce the
    tables bit for bit.
    """
    if k_max < 0:
        raise ValueError(f"k_max must be >= 0, got {k_max}")
    for policy, player, name in ((level0_ego, EGO, "level0_ego"), (level0_env, ENV, "level0_env")):
        if policy.player != player:
            raise ValueError(f"{name} carries player={policy.player}")
        if policy.level != 0:
            raise ValueError(f"{name} carries level={policy.level}")
        if policy.probs.shape != (spec.num_states, spec.num_actions(player)):
            raise ValueError(f"{name} shape {policy.probs.shape} does not match the game")

    ego_policies = [level0_ego]
    env_policies = [level0_env]
    provenance = ["ego[0]: supplied", "env[0]: supplied"]
    for k in range(1, k_max + 1):
        env_k = softmax_policy(compute_q(spec, ENV, ego_policies[k - 1]), temperature)
        ego_k = softmax_policy(compute_q(spec, EGO, env_policies[k - 1]), temperature)
        env_policies.append(env_k)
        ego_policies.append(ego_k)
        provenance.append(f"env[{k}]: softmax(Q vs ego[{k - 1}])")
        provenance.append(f"ego[{k}]: softmax(Q vs env[{k - 1}])")
    return Hierarchy(
        k_max=k_max,
        ego_policies=tuple(ego_policies),
        env_policies=tuple(env_policies),
        provenance=tuple(provenance),
    )


def _hash_array(h, arr: np.ndarray, dtype: str) -> None:
    a = np.ascontiguousarray(arr.astype(dtype))
    h.update(np.asarray(a.shape, dtype="<i8").tobytes())
    h.update(a.tobytes())


def hierarchy_content_hash(
    spec: GameSpec,
    k_max: int,
    level0_ego: PolicyTable,
    level0_env: PolicyTable,
    temperature: float = 1.0,
) -> str:
    """Content hash identifying a hierarchy build.

    Covers the tabulated game (transitions, rewards, discount, horizon), the
    level-0 anchors, ``k_max`` and the softmax temperature.  Arrays are
    hashed in fixed little-endian layout so the hash is platform independent.
    """
    h = hashlib.sha256()
    h.update(b"chplanner-hierarchy-v%d" % CACHE_FORMAT_VERSION)
    header = np.array(
        [spec.num_states, spec.num_ego_actions, spec.num_env_actions, spec.horizon, k_max],
        dtype="<i8",
    )
    h.update(header.tobytes())
    h.update(np.array([spec.discount, temperature], dtype="<f8").tobytes())
    _hash_array(h, tabulate_transitions(spec), "<i8")
    _hash_array(h, reward_table(spec, EGO), "<f8")
    _hash_array(h, reward_table(spec, ENV), "<f8")
    _hash_array(h, level0_ego.probs, "<f8")
    _hash_array(h, level0_env.probs, "<f8")
    return h.hexdigest()


def save_hierarchy(path, hierarchy: Hierarchy, content_hash: str) -> None:
    """Write a hierarchy to ``path`` as an ``.npz`` archive.

    The format is versioned; arrays are stored as little-endian float64.
    """
    meta = {
        "format_version": CACHE_FORMAT_VERSION,
        "k_max": hierarchy.k_max,
        "content_hash": content_hash,
        "provenance": list(hierarchy.provenance),
    }
    arrays = {"meta_json": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, pol in enumerate(hierarchy.ego_policies):
        arrays[f"ego_{k}"] = pol.probs.astype("<f8")
    for k, pol in enumerate(hierarchy.env_policies):
        arrays[f"env_{k}"] = pol.probs.astype("<f8")
    np.savez(path, **arrays)


def load_hierarchy(path) -> tuple[Hierarchy, str]:
    """Load a hierarchy cache written by :func:`save_hierarchy`.

    Returns the hierarchy and the content hash it was saved under.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
        if meta["format_version"] != CACHE_FORMAT_VERSION:
            raise ValueError(
                f"unsupported hierarchy cache version {meta['format_version']}"
            )
        k_max = int(meta["k_max"])
        ego = tuple(
            PolicyTable(level=k, player=EGO, probs=data[f"ego_{k}"].astype(float))
            for k in range(k_max + 1)
        )
        env = tuple(
            PolicyTable(level=k, player=ENV, probs=data[f"env_{k}"].astype(float))
            for k in range(k_max + 1)
        )
    hierarchy = Hierarchy(
        k_max=k_max,
        ego_policies=ego,
        env_policies=env,
        provenance=tuple(meta["provenance"]),
    )
    return hierarchy, meta["content_hash"]
