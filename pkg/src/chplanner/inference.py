"""Belief propagation over the augmented state space (physical state x level).

The opponent's reasoning level is a hidden, static component of the state.
Conditioned on it, the opponent's action is a stochastic disturbance drawn
from the corresponding level-k policy, which makes the joint system a Markov
chain per ego action.  This module builds that chain as a sparse kernel,
propagates predicted distributions through it, and performs the Bayesian
posterior update from the observed physical state and the executed ego
action.

Augmented states are indexed level-major: ``aug = level_index * |X| + x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .game import ENV, ROW_SUM_TOL, GameSpec, PolicyTable, tabulate_transitions

__all__ = [
    "AugmentedState",
    "Belief",
    "History",
    "AugmentedKernel",
    "InconsistentObservationError",
    "build_kernel",
    "predict",
    "bayes_update",
    "init_belief",
]


class InconsistentObservationError(ValueError):
    """The observed state has zero predicted probability under the prior."""


@dataclass(frozen=True)
class AugmentedState:
    """Physical state index paired with the opponent's (hidden) level index."""

    state: int
    level: int


@dataclass(frozen=True)
class History:
    """Observations ``y_0..y_t`` and executed ego actions ``u_0..u_{t-1}``."""

    observations: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                "history must hold exactly one more observation than actions; "
                f"got {len(self.observations)} observations, {len(self.actions)} actions"
            )

    def extended(self, action: int, observation: int) -> "History":
        return History(self.observations + (observation,), self.actions + (action,))


@dataclass(frozen=True)
class Belief:
    """Probability vector over augmented states at one decision step."""

    probs: np.ndarray
    num_states: int
    time_stamp: int = 0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size % self.num_states != 0:
            raise ValueError(
                f"belief length {probs.size} not a multiple of num_states={self.num_states}"
            )
        if probs.min(initial=0.0) < -1e-12:
            raise ValueError("belief entries must be nonnegative")
        if abs(probs.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"belief must sum to 1 within {ROW_SUM_TOL}, got {probs.sum()!r}")
        object.__setattr__(self, "probs", probs)

    @property
    def num_levels(self) -> int:
        return self.probs.size // self.num_states

    def level_marginals(self) -> np.ndarray:
        """Posterior mass per level (the quantity the planner conditions on)."""
        return self.probs.reshape(self.num_levels, self.num_states).sum(axis=1)


@dataclass(frozen=True)
class AugmentedKernel:
    """Sparse transition kernel ``P(aug' | aug, u1)`` in compressed row form.

    Row ``aug * num_ego_actions + u1`` stores the successor augmented states
    and their probabilities.  The level component is conserved exactly: a
    row's targets always carry the source row's level.  Each row sums to one
    within ``ROW_SUM_TOL`` and duplicate successors are merged.
    """

    num_states: int
    num_ego_actions: int
    levels: tuple[int, ...]
    indptr: np.ndarray
    targets: np.ndarray
    probs: np.ndarray

    @property
    def num_augmented(self) -> int:
        return self.num_states * len(self.levels)

    def row(self, aug: int, u1: int) -> tuple[np.ndarray, np.ndarray]:
        """Successors and probabilities for one (augmented state, ego action)."""
        r = aug * self.num_ego_actions + u1
        lo, hi = self.indptr[r], self.indptr[r + 1]
        return self.targets[lo:hi], self.probs[lo:hi]

    def expand_rows(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate the entries of several rows.

        Returns ``(which_row, targets, probs)`` where ``which_row[i]`` is the
        position in ``rows`` that entry ``i`` belongs to.
        """
        rows = np.asarray(rows, dtype=np.int64)
        starts = self.indptr[rows]
        counts = self.indptr[rows + 1] - starts
        total = int(counts.sum())
        which = np.repeat(np.arange(rows.size), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        flat = np.repeat(starts, counts) + offsets
        return which, self.targets[flat], self.probs[flat]


def build_kernel(spec: GameSpec, env_policies: Mapping[int, PolicyTable]) -> AugmentedKernel:
    """Assemble the augmented kernel from one env policy per hypothesized level.

    ``P((x', k) | (x, k), u1)`` sums the policy mass of every env action
    ``u2`` with ``T(x, u1, u2) = x'``; transitions across levels have zero
    probability and are not stored.
    """
    if not env_policies:
        raise ValueError("env_policies must contain at least one level")
    levels = tuple(sorted(env_policies))
    nx = spec.num_states
    nu1 = spec.num_ego_actions
    nu2 = spec.num_env_actions
    table = tabulate_transitions(spec)

    row_chunks: list[np.ndarray] = []
    tgt_chunks: list[np.ndarray] = []
    prob_chunks: list[np.ndarray] = []
    for li, level in enumerate(levels):
        policy = env_policies[level]
        if policy.player != ENV:
            raise ValueError(f"policy for level {level} belongs to player {policy.player}")
        if policy.probs.shape != (nx, nu2):
            raise ValueError(
                f"policy for level {level} has shape {policy.probs.shape}, "
                f"expected ({nx}, {nu2})"
            )
        base = li * nx
        rows = ((base + np.arange(nx, dtype=np.int64))[:, None, None] * nu1
                + np.arange(nu1, dtype=np.int64)[None, :, None])
        rows = np.broadcast_to(rows, (nx, nu1, nu2)).ravel()
        targets = (base + table.astype(np.int64)).ravel()
        probs = np.broadcast_to(policy.probs[:, None, :], (nx, nu1, nu2)).ravel()
        keep = probs > 0.0
        row_chunks.append(rows[keep])
        tgt_chunks.append(targets[keep])
        prob_chunks.append(probs[keep])

    rows = np.concatenate(row_chunks)
    targets = np.concatenate(tgt_chunks)
    probs = np.concatenate(prob_chunks)

    # Merge duplicate (row, target) pairs so each successor appears once.
    order = np.lexsort((targets, rows))
    rows, targets, probs = rows[order], targets[order], probs[order]
    new_group = np.empty(rows.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = (rows[1:] != rows[:-1]) | (targets[1:] != targets[:-1])
    starts = np.flatnonzero(new_group)
    sums = np.add.reduceat(probs, starts)
    grp_rows = rows[starts]
    grp_targets = targets[starts]

    num_rows = nx * len(levels) * nu1
    counts = np.bincount(grp_rows, minlength=num_rows)
    indptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    kernel = AugmentedKernel(
        num_states=nx,
        num_ego_actions=nu1,
        levels=levels,
        indptr=indptr,
        targets=grp_targets.astype(np.int64),
        probs=sums,
    )
    rowsums = np.add.reduceat(kernel.probs, kernel.indptr[:-1][counts > 0])
    if rowsums.size and np.abs(rowsums - 1.0).max() > ROW_SUM_TOL:
        raise ValueError("kernel rows do not sum to 1; env policies are inconsistent")
    if (counts == 0).any():
        raise ValueError("kernel has empty rows; env policies assign no mass somewhere")
    return kernel


def _as_probs(dist) -> np.ndarray:
    if isinstance(dist, Belief):
        return dist.probs
    return np.asarray(dist, dtype=float)


def predict(kernel: AugmentedKernel, dist, gamma) -> np.ndarray:
    """One-step predicted distribution over augmented states.

    ``next(i) = sum_j sum_l gamma(l) P(i | j, l) dist(j)`` -- the sparse form
    of the dense one-step matrix recursion.  ``dist`` may be a
    :class:`Belief` or a raw probability vector; the result is a raw vector.
    """
    p = _as_probs(dist)
    if p.size != kernel.num_augmented:
        raise ValueError(
            f"distribution length {p.size} does not match kernel ({kernel.num_augmented})"
        )
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (kernel.num_ego_actions,):
        raise ValueError(
            f"gamma length {gamma.size} does not match {kernel.num_ego_actions} ego actions"
        )
    out = np.zeros(kernel.num_augmented)
    support = np.flatnonzero(p)
    for u1 in range(kernel.num_ego_actions):
        g = gamma[u1]
        if g == 0.0:
            continue
        which, targets, probs = kernel.expand_rows(support * kernel.num_ego_actions + u1)
        np.add.at(out, targets, probs * (g * p[support][which]))
    return out


def _level_likelihoods(
    kernel: AugmentedKernel, prior: Belief, executed_u1: int, observed_y: int
) -> np.ndarray:
    """Unnormalized posterior mass arriving at ``(observed_y, k)`` per level."""
    nx = kernel.num_states
    masses = np.zeros(len(kernel.levels))
    support = np.flatnonzero(prior.probs)
    if support.size == 0:
        return masses
    which, targets, probs = kernel.expand_rows(support * kernel.num_ego_actions + executed_u1)
    hit = (targets % nx) == observed_y
    if hit.any():
        np.add.at(
            masses,
            targets[hit] // nx,
            probs[hit] * prior.probs[support][which[hit]],
        )
    return masses


def bayes_update(
    kernel: AugmentedKernel,
    prior: Belief,
    executed_u1: int,
    observed_y: int,
    floor: float = 0.0,
) -> Belief:
    """Posterior belief after executing ``u1`` and observing the next state.

    The posterior is supported on ``{observed_y} x K`` with each level's mass
    proportional to the one-step predicted probability of reaching
    ``(observed_y, k)`` from the prior.  With the default ``floor=0`` an
    observation whose total predicted mass is zero raises
    :class:`InconsistentObservationError`; a positive ``floor`` instead lifts
    every level's mass to at least ``floor`` before renormalizing, which
    keeps all levels alive under model mismatch.
    """
    if not 0 <= observed_y < kernel.num_states:
        raise ValueError(f"observed state {observed_y} out of range")
    if not 0 <= executed_u1 < kernel.num_ego_actions:
        raise ValueError(f"executed action {executed_u1} out of range")
    if prior.probs.size != kernel.num_augmented:
        raise ValueError("prior does not match the kernel's augmented space")
    masses = _level_likelihoods(kernel, prior, executed_u1, observed_y)
    if floor > 0.0:
        masses = np.maximum(masses, floor)
    total = masses.sum()
    if total <= 0.0:
        raise InconsistentObservationError(
            f"observation y={observed_y} has zero predicted probability "
            f"under action u1={executed_u1}"
        )
    probs = np.zeros(kernel.num_augmented)
    probs[np.arange(len(kernel.levels)) * kernel.num_states + observed_y] = masses / total
    return Belief(probs=probs, num_states=kernel.num_states, time_stamp=prior.time_stamp + 1)


def init_belief(
    physical_state: int, level_prior: Sequence[float], num_states: int
) -> Belief:
    """Point-mass belief on ``physical_state`` with the given prior over levels."""
    prior = np.asarray(level_prior, dtype=float)
    if prior.ndim != 1 or prior.size == 0:
        raise ValueError("level_prior must be a nonempty vector")
    if prior.min(initial=0.0) < 0.0:
        raise ValueError("level_prior entries must be nonnegative")
    if abs(prior.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"level_prior must sum to 1 within {ROW_SUM_TOL}")
    if not 0 <= physical_state < num_states:
        raise ValueError(f"physical state {physical_state} out of range [0, {num_states})")
    probs = np.zeros(num_states * prior.size)
    probs[np.arange(prior.size) * num_states + physical_state] = prior
    return Belief(probs=probs, num_states=num_states, time_stamp=0)
