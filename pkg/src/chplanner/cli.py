"""Command-line harness: build policy caches, run seeded episodes, evaluate.

Subcommands
-----------
``build``
    Construct the scenario and its policy hierarchy, write the versioned
    cache, print the content hash.
``simulate``
    Run one closed-loop episode (planning ego vs. a simulated level-k
    human), writing a per-step CSV log, a long-format belief CSV, a JSON
    summary and optional per-step SVG snapshots.
``evaluate``
    Run a batch of seeds per human level and write an aggregate report.

Exit codes: 0 ok, 2 configuration error, 3 aborted on an infeasible plan.

Episodes are reproducible: the master seed spawns two independent
generators (human sampling, ego sampling), so identical
(config, level, seed) triples give byte-identical CSV logs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import EGO, ENV
from .hierarchy import (
    Hierarchy,
    build_hierarchy,
    hierarchy_content_hash,
    load_hierarchy,
    save_hierarchy,
)
from .inference import (
    AugmentedKernel,
    InconsistentObservationError,
    bayes_update,
    build_kernel,
    init_belief,
)
from .planner import Planner, lift_reward, maximin_plan, receding_horizon_step
from .render import render_step
from .traffic import (
    Scenario,
    ScenarioConfig,
    VehicleState,
    classify_outcome,
    episode_complete,
    level0_policy,
    load_config,
    make_scenario,
)

__all__ = [
    "EpisodeLog",
    "StepRecord",
    "InfeasiblePlanAbort",
    "build_artifacts",
    "run_episode",
    "write_episode_csv",
    "write_belief_csv",
    "evaluate_batch",
    "main",
    "entry",
]

DEFAULT_CACHE_DIR = ".chplanner-cache"

EPISODE_CSV_COLUMNS = (
    "t", "ego_x", "ego_y", "ego_v", "human_x", "human_y", "human_v",
    "ego_action", "human_action",
)
# ... followed by one "posterior_level_<k>" column per level, then:
EPISODE_CSV_TAIL = (
    "expected_reward", "constraint_probability", "feasible", "fallback", "safe",
)


class InfeasiblePlanAbort(RuntimeError):
    """Raised when the plan is infeasible and the abort policy is active."""


@dataclass
class StepRecord:
    t: int
    state: int
    ego: VehicleState | None
    human: VehicleState | None
    posteriors: tuple[float, ...]
    ego_action: int | None
    human_action: int | None
    expected_reward: float | None
    constraint_probability: float | None
    feasible: bool | None
    fallback: bool
    safe: bool
    wall_ms: float


@dataclass
class EpisodeLog:
    scenario: str
    human_level: int
    seed: int
    records: list[StepRecord]
    outcome: dict
    violated: bool
    end_reason: str

    @property
    def num_steps(self) -> int:
        return len(self.records) - 1

    def final_posteriors(self) -> tuple[float, ...]:
        return self.records[-1].posteriors


def build_artifacts(
    config: ScenarioConfig, cache_dir: str | Path = DEFAULT_CACHE_DIR
) -> tuple[Scenario, Hierarchy, str]:
    """Scenario plus its (possibly cached) policy hierarchy and content hash."""
    scenario = make_scenario(config)
    anchor_ego = level0_policy(scenario, EGO)
    anchor_env = level0_policy(scenario, ENV)
    content_hash = hierarchy_content_hash(
        scenario.spec, config.k_max, anchor_ego, anchor_env, config.softmax_temperature
    )
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"hierarchy-{content_hash[:16]}.npz"
    if path.exists():
        hierarchy, stored = load_hierarchy(path)
        if stored == content_hash and hierarchy.k_max == config.k_max:
            return scenario, hierarchy, content_hash
    hierarchy = build_hierarchy(
        scenario.spec, config.k_max, anchor_ego, anchor_env, config.softmax_temperature
    )
    save_hierarchy(path, hierarchy, content_hash)
    return scenario, hierarchy, content_hash


def scenario_kernel(scenario: Scenario, hierarchy: Hierarchy) -> AugmentedKernel:
    """Augmented kernel over the configured hypothesis levels."""
    env_policies = {k: hierarchy.env(k) for k in scenario.config.levels}
    return build_kernel(scenario.spec, env_policies)


def scenario_planner(scenario: Scenario, kernel: AugmentedKernel) -> Planner:
    """Planner over the raw scenario objective (safety lives in the constraint)."""
    return Planner(
        kernel=kernel,
        reward_aug=lift_reward(scenario.ego_objective, len(kernel.levels)),
        safe_sets=scenario.spec.safe_sets,
        epsilon=scenario.config.epsilon,
        discount=scenario.config.discount,
        horizon=scenario.config.horizon,
    )


def _sample(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(rng.choice(probs.size, p=probs / probs.sum()))


def run_episode(
    scenario: Scenario,
    hierarchy: Hierarchy,
    kernel: AugmentedKernel,
    human_level: int,
    seed: int,
    step_cap: int | None = None,
    on_infeasible: str | None = None,
    snapshot_dir: str | Path | None = None,
    ego_controller: str = "planner",
) -> EpisodeLog:
    """One closed-loop episode of the planning ego against a level-k human.

    ``ego_controller`` selects the ego's decision rule: the chance-constrained
    planner (default) or the robust ``"maximin"`` baseline.
    """
    config = scenario.config
    if human_level > hierarchy.k_max or human_level < 1:
        raise ValueError(f"human level {human_level} not in the built hierarchy")
    step_cap = config.step_cap if step_cap is None else step_cap
    on_infeasible = config.on_infeasible if on_infeasible is None else on_infeasible
    if on_infeasible not in ("abort", "fallback"):
        raise ValueError(f"on_infeasible must be 'abort' or 'fallback': {on_infeasible!r}")
    if ego_controller not in ("planner", "maximin"):
        raise ValueError(f"unknown ego controller {ego_controller!r}")

    human_probs = hierarchy.env(human_level).probs
    children = np.random.SeedSequence(seed).spawn(2)
    human_rng = np.random.default_rng(children[0])
    ego_rng = np.random.default_rng(children[1])

    planner = scenario_planner(scenario, kernel)
    state = scenario.initial_state
    belief = init_belief(state, config.level_prior, scenario.spec.num_states)

    records: list[StepRecord] = []
    states_seen = [state]
    end_reason = "step_cap"
    snapshots: list[tuple[int, int]] = [(0, state)]

    for t in range(step_cap):
        if not scenario.is_safe(state):
            end_reason = "violation"
            break
        if episode_complete(scenario, state):
            end_reason = "complete"
            break
        tic = time.perf_counter()
        if ego_controller == "maximin":
            seq = maximin_plan(scenario.spec, state, config.horizon, config.discount, t=t)
            u1 = int(seq[0])
            plan = None
        else:
            u1, plan = receding_horizon_step(planner, belief, t, ego_rng)
            if not plan.feasible and on_infeasible == "abort":
                raise InfeasiblePlanAbort(
                    f"no feasible plan at t={t} (best probability "
                    f"{plan.constraint_probability:.6f})"
                )
        wall_ms = (time.perf_counter() - tic) * 1000.0
        u2 = _sample(human_rng, human_probs[state])
        ego_v, human_v = scenario.decode(state)
        records.append(
            StepRecord(
                t=t,
                state=state,
                ego=ego_v,
                human=human_v,
                posteriors=tuple(belief.level_marginals()),
                ego_action=u1,
                human_action=u2,
                expected_reward=None if plan is None else plan.expected_reward,
                constraint_probability=None if plan is None else plan.constraint_probability,
                feasible=None if plan is None else plan.feasible,
                fallback=plan is not None and not plan.feasible,
                safe=scenario.is_safe(state),
                wall_ms=wall_ms,
            )
        )
        next_state = int(scenario.spec.transition_table[state, u1, u2])
        try:
            belief = bayes_update(kernel, belief, u1, next_state)
        except InconsistentObservationError:
            belief = bayes_update(
                kernel, belief, u1, next_state, floor=config.likelihood_floor
            )
        state = next_state
        states_seen.append(state)
        snapshots.append((t + 1, state))

    ego_v, human_v = scenario.decode(state)
    records.append(
        StepRecord(
            t=len(records),
            state=state,
            ego=ego_v,
            human=human_v,
            posteriors=tuple(belief.level_marginals()),
            ego_action=None,
            human_action=None,
            expected_reward=None,
            constraint_probability=None,
            feasible=None,
            fallback=False,
            safe=scenario.is_safe(state),
            wall_ms=0.0,
        )
    )

    if snapshot_dir is not None:
        out = Path(snapshot_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, s in snapshots:
            ego_s, human_s = scenario.decode(s)
            (out / f"step_{t:03d}.svg").write_text(render_step(scenario, ego_s, human_s, t))

    outcome = classify_outcome(scenario, states_seen)
    return EpisodeLog(
        scenario=config.name,
        human_level=human_level,
        seed=seed,
        records=records,
        outcome=outcome,
        violated=bool(outcome["violation"]),
        end_reason=end_reason,
    )


# ---------------------------------------------------------------------------
# Serialization.  Numeric formats are frozen so identical runs give
# byte-identical files; wall-clock timings deliberately stay out of the CSV.


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9f}"


def episode_csv_header(levels: tuple[int, ...]) -> list[str]:
    cols = list(EPISODE_CSV_COLUMNS)
    cols += [f"posterior_level_{k}" for k in levels]
    cols += list(EPISODE_CSV_TAIL)
    return cols


def write_episode_csv(path: str | Path, scenario: Scenario, log: EpisodeLog) -> None:
    lines = [",".join(episode_csv_header(scenario.config.levels))]
    for rec in log.records:
        ego_xy = None if rec.ego is None else scenario.ego_grid.world_xy(rec.ego)
        human_xy = None if rec.human is None else scenario.human_grid.world_xy(rec.human)
        row = [
            _fmt(rec.t),
            _fmt(None if ego_xy is None else ego_xy[0]),
            _fmt(None if ego_xy is None else ego_xy[1]),
            _fmt(None if rec.ego is None else rec.ego.v),
            _fmt(None if human_xy is None else human_xy[0]),
            _fmt(None if human_xy is None else human_xy[1]),
            _fmt(None if rec.human is None else rec.human.v),
            _fmt(rec.ego_action),
            _fmt(rec.human_action),
        ]
        row += [_fmt(p) for p in rec.posteriors]
        row += [
            _fmt(rec.expected_reward),
            _fmt(rec.constraint_probability),
            _fmt(rec.feasible),
            _fmt(rec.fallback),
            _fmt(rec.safe),
        ]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_belief_csv(path: str | Path, scenario: Scenario, log: EpisodeLog) -> None:
    lines = ["t,level,posterior"]
    for rec in log.records:
        for k, p in zip(scenario.config.levels, rec.posteriors):
            lines.append(f"{rec.t},{k},{p:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def episode_summary(log: EpisodeLog) -> dict:
    """Deterministic episode summary; wall-clock stats live in the log only."""
    return {
        "scenario": log.scenario,
        "human_level": log.human_level,
        "seed": log.seed,
        "steps": log.num_steps,
        "end_reason": log.end_reason,
        "violated": log.violated,
        "outcome": log.outcome,
        "final_posteriors": list(log.final_posteriors()),
    }


def mean_plan_ms(log: EpisodeLog) -> float:
    plan_ms = [r.wall_ms for r in log.records[:-1]]
    return (sum(plan_ms) / len(plan_ms)) if plan_ms else 0.0


def evaluate_batch(
    scenario: Scenario,
    hierarchy: Hierarchy,
    kernel: AugmentedKernel,
    seeds: list[int],
    levels: tuple[int, ...] | None = None,
) -> dict:
    """Seed batch per human level: outcome frequencies and safety statistics."""
    config = scenario.config
    levels = config.levels if levels is None else levels
    report: dict = {"scenario": config.name, "seeds": list(seeds), "per_level": {}}
    for level in levels:
        level_idx = config.levels.index(level)
        episodes = []
        failures = []
        for seed in seeds:
            try:
                log = run_episode(scenario, hierarchy, kernel, level, seed)
            except Exception as exc:  # keep the batch alive; record the loss
                failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            episodes.append(log)
        n = len(episodes)
        stats: dict = {
            "episodes": n,
            "failed_seeds": failures,
            "violation_rate": (sum(e.violated for e in episodes) / n) if n else None,
            "mean_steps": (sum(e.num_steps for e in episodes) / n) if n else None,
            "mean_final_posterior_true": (
                sum(e.final_posteriors()[level_idx] for e in episodes) / n if n else None
            ),
            "mean_plan_ms": (sum(mean_plan_ms(e) for e in episodes) / n if n else None),
        }
        if n:
            if config.name == "intersection":
                stats["ego_crossed_first_rate"] = (
                    sum(bool(e.outcome["ego_crossed_first"]) for e in episodes) / n
                )
            elif config.name == "overtaking":
                done = [e for e in episodes if e.outcome["completed"]]
                stats["completed_rate"] = len(done) / n
                stats["mean_completion_step"] = (
                    sum(e.outcome["completion_step"] for e in done) / len(done)
                    if done
                    else None
                )
            else:
                merged = [e for e in episodes if e.outcome["merged"]]
                stats["merged_rate"] = len(merged) / n
                stats["merged_ahead_rate"] = (
                    sum(bool(e.outcome["merged_ahead"]) for e in merged) / len(merged)
                    if merged
                    else None
                )
                stats["merged_in_section_rate"] = (
                    sum(bool(e.outcome["merged_in_section"]) for e in merged) / len(merged)
                    if merged
                    else None
                )
        report["per_level"][str(level)] = stats
    return report


# ---------------------------------------------------------------------------
# Command implementations.


def _load_config_or_exit(path: str) -> ScenarioConfig:
    try:
        return load_config(path)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(2) from exc


def cmd_build(args: argparse.Namespace) -> int:
    config = _load_config_or_exit(args.config)
    _, _, content_hash = build_artifacts(config, args.cache_dir)
    print(content_hash)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config_or_exit(args.config)
    scenario, hierarchy, _ = build_artifacts(config, args.cache_dir)
    kernel = scenario_kernel(scenario, hierarchy)
    human_level = args.human_level
    if human_level not in config.levels:
        print(f"config error: human level {human_level} not in {config.levels}",
              file=sys.stderr)
        return 2
    seed = config.seed if args.seed is None else args.seed
    try:
        log = run_episode(
            scenario,
            hierarchy,
            kernel,
            human_level,
            seed,
            step_cap=args.steps,
            on_infeasible=args.on_infeasible,
            snapshot_dir=args.snapshots,
        )
    except InfeasiblePlanAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_episode_csv(prefix.with_suffix(".csv"), scenario, log)
    write_belief_csv(prefix.parent / f"{prefix.name}_beliefs.csv", scenario, log)
    summary = episode_summary(log)
    (prefix.parent / f"{prefix.name}_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    print(json.dumps(summary["outcome"], sort_keys=True))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config_or_exit(args.config)
    base = config.seed if args.seed is None else args.seed
    seeds = [base + i for i in range(args.seeds)]
    levels = config.levels if args.human_level is None else (args.human_level,)
    if any(level not in config.levels for level in levels):
        print(f"config error: human level {args.human_level} not in {config.levels}",
              file=sys.stderr)
        return 2
    if args.seeds == 0:
        report = {"scenario": config.name, "seeds": [], "per_level": {}}
    else:
        scenario, hierarchy, _ = build_artifacts(config, args.cache_dir)
        kernel = scenario_kernel(scenario, hierarchy)
        report = evaluate_batch(scenario, hierarchy, kernel, seeds, levels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    for level, stats in report["per_level"].items():
        print(f"level {level}: {json.dumps(stats, sort_keys=True)}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chplanner",
        description=(
            "Chance-constrained receding-horizon driving simulator with "
            "online inference of the other driver's reasoning level"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", required=True,
        help="path to a YAML config, or a builtin scenario name "
             "(intersection, overtaking, merging)",
    )
    common.add_argument("--cache-dir", default=DEFAULT_CACHE_DIR,
                        help="directory for hierarchy caches")

    p_build = sub.add_parser("build", parents=[common],
                             help="build and cache the policy hierarchy")
    p_build.set_defaults(func=cmd_build)

    p_sim = sub.add_parser("simulate", parents=[common], help="run one episode")
    p_sim.add_argument("--human-level", type=int, default=1,
                       help="reasoning level of the simulated human driver")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="master seed (default: config seed)")
    p_sim.add_argument("--steps", type=int, default=None,
                       help="step cap (default: config step_cap)")
    p_sim.add_argument("--snapshots", default=None, metavar="DIR",
                       help="write one top-down SVG per step into DIR")
    p_sim.add_argument("--on-infeasible", choices=("abort", "fallback"), default=None,
                       help="what to do when no feasible plan exists")
    p_sim.add_argument("--out", default="episode",
                       help="output prefix for CSV/JSON logs")
    p_sim.set_defaults(func=cmd_simulate)

    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="run a seed batch per human level")
    p_eval.add_argument("--seeds", type=int, default=100,
                        help="number of consecutive seeds to run")
    p_eval.add_argument("--seed", type=int, default=None,
                        help="first seed of the batch (default: config seed)")
    p_eval.add_argument("--human-level", type=int, default=None,
                        help="restrict the batch to one human level")
    p_eval.add_argument("--out", default="evaluation.json",
                        help="aggregate report path")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
