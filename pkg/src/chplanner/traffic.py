"""Driving scenarios: grids, kinematics, rewards, safe sets, level-0 drivers.

Three two-vehicle scenarios are provided: an unsignalized intersection
crossing, a two-lane overtaking maneuver, and a forced merge that must
happen inside a bounded road section.  Each scenario discretizes both
vehicles onto position/speed/lane grids that are closed under the
kinematics (no rounding drift), composes the joint transition table, and
installs the scenario's reward functions and safe set.

Each vehicle's state is expressed in its own travel frame: ``s_x`` is the
longitudinal position along its direction of travel, ``s_y`` the lateral
lane-center offset, ``v`` the longitudinal speed.  A per-vehicle heading
maps travel-frame states to world coordinates, which is where the safety
predicates live.

Leaving the modeled road section sends a vehicle into an absorbing "done"
cell with zero reward that is always safe; episodes normally terminate
before anyone reaches it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Sequence

import numpy as np
import yaml

from .game import EGO, ENV, GameSpec, PolicyTable
from .hierarchy import softmax_policy, QTable

__all__ = [
    "SCENARIO_NAMES",
    "LANE_COMMANDS",
    "VehicleState",
    "VehicleGrid",
    "ScenarioConfig",
    "Scenario",
    "vehicle_step",
    "make_scenario",
    "level0_policy",
    "default_config",
    "load_config",
    "episode_complete",
    "classify_outcome",
]

SCENARIO_NAMES = ("intersection", "overtaking", "merging")
LANE_COMMANDS = ("keep", "left", "right")
CONFIG_SCHEMA_VERSION = 1

# Sentinels used for absorbed vehicles when evaluating pairwise geometry;
# they keep every done pairing trivially far apart.
_DONE_EGO_XY = (1.0e9, 1.0e9)
_DONE_HUMAN_XY = (-1.0e9, -1.0e9)


@dataclass(frozen=True)
class VehicleState:
    """Travel-frame kinematic state: longitudinal position, lane center, speed."""

    s_x: float
    s_y: float
    v: float


def vehicle_step(
    state: VehicleState,
    accel: float,
    lane_cmd: str,
    *,
    dt: float = 1.0,
    v_max: float = 12.0,
    lane_centers: Sequence[float] = (1.8,),
) -> VehicleState:
    """Advance one vehicle by one sampling period.

    Speed integrates the commanded acceleration and saturates at ``0`` and
    ``v_max``; the position advances by ``dt * (v + v') / 2``, which equals
    the unsaturated second-order update whenever no clamp triggers and stays
    kinematically consistent when one does.  Lane changes complete within
    the step.

    Raises
    ------
    ValueError
        If ``lane_cmd`` is unknown or targets a lane that does not exist.
    """
    if lane_cmd not in LANE_COMMANDS:
        raise ValueError(f"unknown lane command {lane_cmd!r}")
    centers = sorted(lane_centers)
    try:
        lane_idx = next(i for i, c in enumerate(centers) if math.isclose(c, state.s_y))
    except StopIteration:
        raise ValueError(f"s_y={state.s_y} is not a lane center of {centers}") from None
    if lane_cmd == "left":
        lane_idx += 1
    elif lane_cmd == "right":
        lane_idx -= 1
    if not 0 <= lane_idx < len(centers):
        raise ValueError(f"no lane to the {lane_cmd} of s_y={state.s_y}")
    v_next = min(max(state.v + dt * accel, 0.0), v_max)
    s_next = state.s_x + dt * (state.v + v_next) / 2.0
    return VehicleState(s_x=s_next, s_y=centers[lane_idx], v=v_next)


@dataclass(frozen=True)
class VehicleGrid:
    """Discretization of one vehicle onto a position/speed/lane lattice."""

    pos_min: float
    pos_max: float
    pos_step: float
    v_max: float
    v_step: float
    lane_centers: tuple[float, ...]
    heading: str  # "east" or "north"

    @property
    def positions(self) -> np.ndarray:
        n = int(round((self.pos_max - self.pos_min) / self.pos_step)) + 1
        return self.pos_min + self.pos_step * np.arange(n)

    @property
    def speeds(self) -> np.ndarray:
        n = int(round(self.v_max / self.v_step)) + 1
        return self.v_step * np.arange(n)

    @property
    def num_cells(self) -> int:
        return self.positions.size * self.speeds.size * len(self.lane_centers)

    @property
    def done_code(self) -> int:
        return self.num_cells

    @property
    def num_codes(self) -> int:
        return self.num_cells + 1

    def encode(self, state: VehicleState) -> int:
        pos_idx = (state.s_x - self.pos_min) / self.pos_step
        v_idx = state.v / self.v_step
        if abs(pos_idx - round(pos_idx)) > 1e-6 or abs(v_idx - round(v_idx)) > 1e-6:
            raise ValueError(f"{state} is not on the grid")
        pos_idx, v_idx = int(round(pos_idx)), int(round(v_idx))
        if not 0 <= pos_idx < self.positions.size or not 0 <= v_idx < self.speeds.size:
            raise ValueError(f"{state} lies outside the grid bounds")
        lane_idx = next(
            (i for i, c in enumerate(self.lane_centers) if math.isclose(c, state.s_y)), None
        )
        if lane_idx is None:
            raise ValueError(f"s_y={state.s_y} is not a lane center of {self.lane_centers}")
        return (pos_idx * self.speeds.size + v_idx) * len(self.lane_centers) + lane_idx

    def decode(self, code: int) -> VehicleState | None:
        """Travel-frame state for a cell code; ``None`` for the done cell."""
        if code == self.done_code:
            return None
        n_lanes = len(self.lane_centers)
        lane_idx = code % n_lanes
        rest = code // n_lanes
        v_idx = rest % self.speeds.size
        pos_idx = rest // self.speeds.size
        return VehicleState(
            s_x=float(self.positions[pos_idx]),
            s_y=self.lane_centers[lane_idx],
            v=float(self.speeds[v_idx]),
        )

    def world_xy(self, state: VehicleState) -> tuple[float, float]:
        if self.heading == "east":
            return state.s_x, state.s_y
        if self.heading == "north":
            return state.s_y, state.s_x
        raise ValueError(f"unknown heading {self.heading!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Full parameterization of one traffic scenario."""

    name: str
    dt: float
    car_length: float
    lane_width: float
    accel_set: tuple[float, ...]
    v_step: float
    pos_step: float
    ego_pos_min: float
    ego_pos_max: float
    ego_v_max: float
    ego_lane_change: bool
    ego_start: tuple[float, float, int]  # (position, speed, lane index)
    human_pos_min: float
    human_pos_max: float
    human_v_max: float
    human_lane_change: bool
    human_start: tuple[float, float, int]
    horizon: int
    epsilon: float
    discount: float
    on_infeasible: str
    levels: tuple[int, ...]
    level_prior: tuple[float, ...]
    collision_penalty: float
    softmax_temperature: float
    level0_softmax: bool
    likelihood_floor: float
    step_cap: int
    seed: int

    def validate(self) -> None:
        if self.name not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario {self.name!r}; expected one of {SCENARIO_NAMES}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon out of [0,1]: {self.epsilon!r}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount out of (0,1]: {self.discount!r}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.step_cap < 1:
            raise ValueError(f"step_cap must be >= 1, got {self.step_cap}")
        if self.dt <= 0 or self.pos_step <= 0 or self.v_step <= 0:
            raise ValueError("dt, pos_step and v_step must be positive")
        if self.on_infeasible not in ("abort", "fallback"):
            raise ValueError(f"on_infeasible must be 'abort' or 'fallback', got {self.on_infeasible!r}")
        if len(self.levels) != len(self.level_prior):
            raise ValueError("level_prior length must match levels")
        if any(k < 0 for k in self.levels) or sorted(set(self.levels)) != list(self.levels):
            raise ValueError("levels must be strictly increasing and nonnegative")
        if abs(sum(self.level_prior) - 1.0) > 1e-9 or min(self.level_prior) < 0:
            raise ValueError("level_prior must be a probability vector")
        if 0.0 not in self.accel_set:
            raise ValueError("accel_set must contain 0")
        if self.name == "intersection" and (self.ego_lane_change or self.human_lane_change):
            raise ValueError("intersection has no lane changes")
        for v_max, who in ((self.ego_v_max, "ego"), (self.human_v_max, "human")):
            if v_max <= 0 or abs(v_max / self.v_step - round(v_max / self.v_step)) > 1e-9:
                raise ValueError(f"{who} v_max must be a positive multiple of v_step")
        for lo, hi, who in (
            (self.ego_pos_min, self.ego_pos_max, "ego"),
            (self.human_pos_min, self.human_pos_max, "human"),
        ):
            span = (hi - lo) / self.pos_step
            if hi <= lo or abs(span - round(span)) > 1e-9:
                raise ValueError(f"{who} position range must span a whole number of grid steps")
        self._check_grid_closure()

    def _check_grid_closure(self) -> None:
        """Every (speed, acceleration) pair must land back on the grids."""
        v_max = max(self.ego_v_max, self.human_v_max)
        speeds = self.v_step * np.arange(int(round(v_max / self.v_step)) + 1)
        for v in speeds:
            for a in self.accel_set:
                for cap in (self.ego_v_max, self.human_v_max):
                    if v > cap:
                        continue
                    v2 = min(max(v + self.dt * a, 0.0), cap)
                    if abs(v2 / self.v_step - round(v2 / self.v_step)) > 1e-9:
                        raise ValueError(
                            f"grid closure violated: v={v}, a={a} gives speed {v2} "
                            f"off the v grid"
                        )
                    disp = self.dt * (v + v2) / 2.0
                    if abs(disp / self.pos_step - round(disp / self.pos_step)) > 1e-9:
                        raise ValueError(
                            f"grid closure violated: v={v}, a={a} gives displacement "
                            f"{disp} off the position grid"
                        )

    @property
    def k_max(self) -> int:
        return max(self.levels)


def _lane_centers(config: ScenarioConfig, who: str) -> tuple[float, ...]:
    w = config.lane_width
    if config.name == "intersection":
        # Right-hand traffic: the eastbound ego keeps south of the center
        # line, the northbound human keeps east of it.
        return (-w / 2.0,) if who == "ego" else (w / 2.0,)
    if config.name == "overtaking":
        return (w / 2.0, 3.0 * w / 2.0) if who == "ego" else (w / 2.0,)
    # merging: ego starts in the right lane, the human occupies the left lane
    return (w / 2.0, 3.0 * w / 2.0) if who == "ego" else (3.0 * w / 2.0,)


def _grids(config: ScenarioConfig) -> tuple[VehicleGrid, VehicleGrid]:
    ego = VehicleGrid(
        pos_min=config.ego_pos_min,
        pos_max=config.ego_pos_max,
        pos_step=config.pos_step,
        v_max=config.ego_v_max,
        v_step=config.v_step,
        lane_centers=_lane_centers(config, "ego"),
        heading="east",
    )
    human = VehicleGrid(
        pos_min=config.human_pos_min,
        pos_max=config.human_pos_max,
        pos_step=config.pos_step,
        v_max=config.human_v_max,
        v_step=config.v_step,
        lane_centers=_lane_centers(config, "human"),
        heading="north" if config.name == "intersection" else "east",
    )
    return ego, human


def _actions(config: ScenarioConfig, lane_change: bool) -> tuple[tuple[float, str], ...]:
    cmds = LANE_COMMANDS if lane_change else ("keep",)
    return tuple((a, cmd) for a in config.accel_set for cmd in cmds)


def _vehicle_successors(
    grid: VehicleGrid, actions: Sequence[tuple[float, str]], dt: float
) -> np.ndarray:
    """Per-vehicle successor codes, shape ``(num_codes, len(actions))``.

    A lane command whose target lane does not exist degrades to "keep";
    leaving the position range maps to the done cell, which is absorbing.
    """
    n_pos = grid.positions.size
    n_v = grid.speeds.size
    n_lanes = len(grid.lane_centers)
    codes = np.arange(grid.num_cells)
    lane_idx = codes % n_lanes
    v_idx = (codes // n_lanes) % n_v
    pos_idx = codes // (n_lanes * n_v)
    v = grid.speeds[v_idx]
    pos = grid.positions[pos_idx]

    out = np.empty((grid.num_codes, len(actions)), dtype=np.int64)
    for j, (a, cmd) in enumerate(actions):
        v2 = np.clip(v + dt * a, 0.0, grid.v_max)
        v2_idx = np.rint(v2 / grid.v_step).astype(np.int64)
        pos2 = pos + dt * (v + v2) / 2.0
        pos2_idx = np.rint((pos2 - grid.pos_min) / grid.pos_step).astype(np.int64)
        in_range = (pos2 >= grid.pos_min - 1e-9) & (pos2 <= grid.pos_max + 1e-9)
        shift = {"keep": 0, "left": 1, "right": -1}[cmd]
        lane2 = np.clip(lane_idx + shift, 0, n_lanes - 1)
        code2 = (pos2_idx * n_v + v2_idx) * n_lanes + lane2
        out[:-1, j] = np.where(in_range, code2, grid.done_code)
    out[-1, :] = grid.done_code
    return out


def _world_tables(grid: VehicleGrid, done_xy: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """World x/y per cell code, with the done cell at a far-away sentinel."""
    n_lanes = len(grid.lane_centers)
    codes = np.arange(grid.num_cells)
    lat = np.asarray(grid.lane_centers)[codes % n_lanes]
    pos = grid.positions[codes // (n_lanes * grid.speeds.size)]
    if grid.heading == "east":
        wx, wy = pos, lat
    else:
        wx, wy = lat, pos
    return (
        np.append(wx.astype(float), done_xy[0]),
        np.append(wy.astype(float), done_xy[1]),
    )


@dataclass(frozen=True)
class Scenario:
    """Everything the planner and the simulator need for one traffic game."""

    config: ScenarioConfig
    spec: GameSpec
    ego_grid: VehicleGrid
    human_grid: VehicleGrid
    ego_actions: tuple[tuple[float, str], ...]
    env_actions: tuple[tuple[float, str], ...]
    ego_objective: np.ndarray  # raw (unpenalized) per-state planner reward
    env_objective: np.ndarray
    safe_joint: np.ndarray  # bool over joint states
    initial_state: int

    @property
    def name(self) -> str:
        return self.config.name

    def split(self, state: int) -> tuple[int, int]:
        n_h = self.human_grid.num_codes
        return state // n_h, state % n_h

    def join(self, ego_code: int, human_code: int) -> int:
        return ego_code * self.human_grid.num_codes + human_code

    def decode(self, state: int) -> tuple[VehicleState | None, VehicleState | None]:
        e, h = self.split(state)
        return self.ego_grid.decode(e), self.human_grid.decode(h)

    def encode(self, ego: VehicleState | None, human: VehicleState | None) -> int:
        e = self.ego_grid.done_code if ego is None else self.ego_grid.encode(ego)
        h = self.human_grid.done_code if human is None else self.human_grid.encode(human)
        return self.join(e, h)

    def is_safe(self, state: int) -> bool:
        return bool(self.safe_joint[state])


def _pairwise_safe(config: ScenarioConfig, ego_grid: VehicleGrid,
                   human_grid: VehicleGrid) -> np.ndarray:
    """Safe-set membership on the (ego code x human code) product grid."""
    ex, ey = _world_tables(ego_grid, _DONE_EGO_XY)
    hx, hy = _world_tables(human_grid, _DONE_HUMAN_XY)
    dx = np.abs(ex[:, None] - hx[None, :])
    dy = np.abs(ey[:, None] - hy[None, :])
    l_car = config.car_length
    w = config.lane_width
    if config.name == "intersection":
        safe = dx**2 + dy**2 >= (1.2 * l_car) ** 2
    else:
        safe = (dx >= 1.6 * l_car) | (dy >= w)
        if config.name == "merging":
            right = w / 2.0
            left = 3.0 * w / 2.0
            in_right = np.isclose(ey, right)
            in_left = np.isclose(ey, left)
            section = (
                ((ex <= 20.0) & in_right)
                | ((ex > 20.0) & (ex <= 100.0))
                | ((ex > 100.0) & in_left)
            )
            safe = safe & section[:, None]
    ego_done = np.zeros(ego_grid.num_codes, dtype=bool)
    ego_done[ego_grid.done_code] = True
    human_done = np.zeros(human_grid.num_codes, dtype=bool)
    human_done[human_grid.done_code] = True
    safe[ego_done, :] = True
    safe[:, human_done] = True
    return safe


def _vehicle_objective(config: ScenarioConfig, grid: VehicleGrid) -> np.ndarray:
    """Raw per-cell reward of one vehicle (done cell earns nothing)."""
    n_lanes = len(grid.lane_centers)
    codes = np.arange(grid.num_cells)
    lat = np.asarray(grid.lane_centers)[codes % n_lanes]
    pos = grid.positions[codes // (n_lanes * grid.speeds.size)]
    if config.name == "intersection":
        r = pos.astype(float)
    elif config.name == "overtaking":
        r = 8.0 * pos - lat
    else:
        r = pos + 10.0 * lat
    return np.append(r, 0.0)


def make_scenario(config: ScenarioConfig) -> Scenario:
    """Build the full game for one scenario configuration."""
    config.validate()
    ego_grid, human_grid = _grids(config)
    ego_actions = _actions(config, config.ego_lane_change)
    env_actions = _actions(config, config.human_lane_change)

    succ_e = _vehicle_successors(ego_grid, ego_actions, config.dt)
    succ_h = _vehicle_successors(human_grid, env_actions, config.dt)
    n_h = human_grid.num_codes
    num_states = ego_grid.num_codes * n_h

    e_of = np.arange(num_states) // n_h
    h_of = np.arange(num_states) % n_h
    table = succ_e[e_of][:, :, None] * n_h + succ_h[h_of][:, None, :]

    safe_pair = _pairwise_safe(config, ego_grid, human_grid)
    safe_joint = safe_pair.ravel()

    ego_obj = _vehicle_objective(config, ego_grid)[e_of]
    env_obj = _vehicle_objective(config, human_grid)[h_of]
    penalty = config.collision_penalty
    ego_pen = ego_obj + np.where(safe_joint, 0.0, penalty)
    env_pen = env_obj + np.where(safe_joint, 0.0, penalty)

    spec = GameSpec(
        num_states=num_states,
        num_ego_actions=len(ego_actions),
        num_env_actions=len(env_actions),
        transition=lambda x, u1, u2: int(table[x, u1, u2]),
        ego_reward=lambda x: float(ego_pen[x]),
        env_reward=lambda x: float(env_pen[x]),
        safe_sets=lambda t: safe_joint,
        discount=config.discount,
        horizon=config.horizon,
        transition_table=table,
        ego_reward_table=ego_pen,
        env_reward_table=env_pen,
    )

    ego_start = VehicleState(
        s_x=config.ego_start[0],
        s_y=ego_grid.lane_centers[config.ego_start[2]],
        v=config.ego_start[1],
    )
    human_start = VehicleState(
        s_x=config.human_start[0],
        s_y=human_grid.lane_centers[config.human_start[2]],
        v=config.human_start[1],
    )
    initial = ego_grid.encode(ego_start) * n_h + human_grid.encode(human_start)

    return Scenario(
        config=config,
        spec=spec,
        ego_grid=ego_grid,
        human_grid=human_grid,
        ego_actions=ego_actions,
        env_actions=env_actions,
        ego_objective=ego_obj,
        env_objective=env_obj,
        safe_joint=safe_joint,
        initial_state=initial,
    )


def level0_policy(scenario: Scenario, player: int) -> PolicyTable:
    """Non-strategic anchor policy: optimize against a frozen other vehicle.

    For every joint state the vehicle solves its finite-horizon problem
    under the assumption that the other vehicle never moves, maximizing the
    scenario reward plus the collision penalty.  The default policy is the
    deterministic best first action, ties broken toward coasting
    (zero acceleration, keep lane) and then the lowest action index; the
    ``level0_softmax`` config flag switches to a softmax over the same
    values.
    """
    config = scenario.config
    spec = scenario.spec
    n_h = scenario.human_grid.num_codes
    e_of = np.arange(spec.num_states) // n_h
    h_of = np.arange(spec.num_states) % n_h
    if player == EGO:
        succ = _vehicle_successors(scenario.ego_grid, scenario.ego_actions, config.dt)
        frozen = succ[e_of] * n_h + h_of[:, None]
        rewards = spec.ego_reward_table
        actions = scenario.ego_actions
    elif player == ENV:
        succ = _vehicle_successors(scenario.human_grid, scenario.env_actions, config.dt)
        frozen = e_of[:, None] * n_h + succ[h_of]
        rewards = spec.env_reward_table
        actions = scenario.env_actions
    else:
        raise ValueError(f"player must be {EGO} or {ENV}, got {player}")

    values = np.zeros(spec.num_states)
    q = np.empty_like(frozen, dtype=float)
    for _ in range(config.horizon):
        q = rewards[frozen] + config.discount * values[frozen]
        values = q.max(axis=1)

    if config.level0_softmax:
        return softmax_policy(
            QTable(level=0, player=player, values=q), config.softmax_temperature
        )

    best = q.max(axis=1)
    pick = q.argmax(axis=1)
    preferred = actions.index((0.0, "keep"))
    coast_ok = q[:, preferred] == best
    pick = np.where(coast_ok, preferred, pick)
    probs = np.zeros_like(q)
    probs[np.arange(spec.num_states), pick] = 1.0
    return PolicyTable(level=0, player=player, probs=probs)


# ---------------------------------------------------------------------------
# Episode semantics: completion tests and outcome classification.


def _cross_marks(config: ScenarioConfig) -> tuple[float, float]:
    """Conflict-point coordinates the two vehicles must pass (intersection)."""
    w = config.lane_width
    return w / 2.0, -w / 2.0  # ego passes the human's lane; human passes the ego's


def episode_complete(scenario: Scenario, state: int) -> bool:
    """True once the scenario's region of interest has been resolved."""
    ego, human = scenario.decode(state)
    config = scenario.config
    if ego is None and human is None:
        return True
    if config.name == "intersection":
        if ego is None or human is None:
            return True
        ego_mark, human_mark = _cross_marks(config)
        clear = 1.2 * config.car_length
        return ego.s_x >= ego_mark + clear and human.s_x >= human_mark + clear
    if config.name == "overtaking":
        if ego is None or human is None:
            return True
        left = 3.0 * config.lane_width / 2.0
        return (
            not math.isclose(ego.s_y, left)
            and ego.s_x - human.s_x >= 1.6 * config.car_length
        )
    # merging: resolved the moment the ego occupies the left lane
    if ego is None:
        return True
    return math.isclose(ego.s_y, 3.0 * config.lane_width / 2.0)


def classify_outcome(scenario: Scenario, states: Sequence[int]) -> dict:
    """Summary of an episode trajectory (list of joint state indices)."""
    config = scenario.config
    decoded = [scenario.decode(s) for s in states]
    violated = any(not scenario.is_safe(s) for s in states)
    out: dict = {"scenario": config.name, "violation": violated}

    if config.name == "intersection":
        ego_mark, human_mark = _cross_marks(config)
        ego_step = next(
            (t for t, (e, _) in enumerate(decoded) if e is None or e.s_x > ego_mark), None
        )
        human_step = next(
            (t for t, (_, h) in enumerate(decoded) if h is None or h.s_x > human_mark), None
        )
        ego_first = ego_step is not None and (human_step is None or ego_step < human_step)
        out.update(
            ego_crossed_first=ego_first,
            ego_cross_step=ego_step,
            human_cross_step=human_step,
        )
    elif config.name == "overtaking":
        left = 3.0 * config.lane_width / 2.0
        step = next(
            (
                t
                for t, (e, h) in enumerate(decoded)
                if e is not None
                and h is not None
                and not math.isclose(e.s_y, left)
                and e.s_x - h.s_x >= 1.6 * config.car_length
            ),
            None,
        )
        out.update(completed=step is not None, completion_step=step)
    else:
        left = 3.0 * config.lane_width / 2.0
        step = next(
            (
                t
                for t, (e, _) in enumerate(decoded)
                if e is not None and math.isclose(e.s_y, left)
            ),
            None,
        )
        merged_ahead = None
        in_section = None
        if step is not None:
            e, h = decoded[step]
            merged_ahead = h is None or e.s_x > h.s_x
            in_section = 20.0 < e.s_x <= 100.0
        out.update(
            merged=step is not None,
            merge_step=step,
            merged_ahead=merged_ahead,
            merged_in_section=in_section,
        )
    return out


# ---------------------------------------------------------------------------
# Configuration files.


def _cfg_get(tree: dict, path: str):
    node = tree
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            raise ValueError(f"config is missing required key {path!r}")
        node = node[key]
    return node


def config_from_dict(tree: dict) -> ScenarioConfig:
    """Parse and validate the nested config-file structure."""
    version = _cfg_get(tree, "schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema_version {version!r}")

    def start(who: str) -> tuple[float, float, int]:
        node = _cfg_get(tree, f"{who}.start")
        return (float(node["pos"]), float(node["v"]), int(node.get("lane", 0)))

    config = ScenarioConfig(
        name=str(_cfg_get(tree, "scenario")),
        dt=float(_cfg_get(tree, "kinematics.dt")),
        car_length=float(_cfg_get(tree, "kinematics.car_length")),
        lane_width=float(_cfg_get(tree, "kinematics.lane_width")),
        accel_set=tuple(float(a) for a in _cfg_get(tree, "kinematics.accel_set")),
        v_step=float(_cfg_get(tree, "kinematics.v_step")),
        pos_step=float(_cfg_get(tree, "kinematics.pos_step")),
        ego_pos_min=float(_cfg_get(tree, "ego.pos_min")),
        ego_pos_max=float(_cfg_get(tree, "ego.pos_max")),
        ego_v_max=float(_cfg_get(tree, "ego.v_max")),
        ego_lane_change=bool(_cfg_get(tree, "ego.lane_change")),
        ego_start=start("ego"),
        human_pos_min=float(_cfg_get(tree, "human.pos_min")),
        human_pos_max=float(_cfg_get(tree, "human.pos_max")),
        human_v_max=float(_cfg_get(tree, "human.v_max")),
        human_lane_change=bool(_cfg_get(tree, "human.lane_change")),
        human_start=start("human"),
        horizon=int(_cfg_get(tree, "planning.horizon")),
        epsilon=float(_cfg_get(tree, "planning.epsilon")),
        discount=float(_cfg_get(tree, "planning.discount")),
        on_infeasible=str(tree.get("planning", {}).get("on_infeasible", "fallback")),
        levels=tuple(int(k) for k in _cfg_get(tree, "inference.levels")),
        level_prior=tuple(float(p) for p in _cfg_get(tree, "inference.prior")),
        collision_penalty=float(_cfg_get(tree, "hierarchy.collision_penalty")),
        softmax_temperature=float(tree.get("hierarchy", {}).get("temperature", 1.0)),
        level0_softmax=bool(tree.get("hierarchy", {}).get("level0_softmax", False)),
        likelihood_floor=float(tree.get("inference", {}).get("likelihood_floor", 1e-9)),
        step_cap=int(tree.get("episode", {}).get("step_cap", 30)),
        seed=int(tree.get("seed", 0)),
    )
    config.validate()

    # Start states must sit on their grids; encoding checks everything.
    ego_grid, human_grid = _grids(config)
    for grid, (pos, v, lane), who in (
        (ego_grid, config.ego_start, "ego"),
        (human_grid, config.human_start, "human"),
    ):
        if not 0 <= lane < len(grid.lane_centers):
            raise ValueError(f"{who} start lane index {lane} out of range")
        grid.encode(VehicleState(s_x=pos, s_y=grid.lane_centers[lane], v=v))
    return config


def default_config(name: str) -> ScenarioConfig:
    """Packaged default configuration for one of the named scenarios."""
    if name not in SCENARIO_NAMES:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
    text = resources.files("chplanner.configs").joinpath(f"{name}.yaml").read_text()
    return config_from_dict(yaml.safe_load(text))


def load_config(path_or_name: str) -> ScenarioConfig:
    """Load a config from a YAML file path or a packaged scenario name."""
    if path_or_name in SCENARIO_NAMES:
        return default_config(path_or_name)
    with open(path_or_name, "r") as fh:
        tree = yaml.safe_load(fh)
    if not isinstance(tree, dict):
        raise ValueError(f"config file {path_or_name!r} does not hold a mapping")
    return config_from_dict(tree)


def with_overrides(config: ScenarioConfig, **kwargs) -> ScenarioConfig:
    """Copy of a config with fields replaced and re-validated."""
    out = replace(config, **kwargs)
    out.validate()
    return out
