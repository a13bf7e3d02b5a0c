import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chplanner.cli import build_artifacts, scenario_kernel
from chplanner.game import GameSpec
from chplanner.traffic import default_config


def make_spec(table, r1, r2, safe, discount=0.9, horizon=3) -> GameSpec:
    """GameSpec from plain arrays (transition table, rewards, safe mask)."""
    table = np.asarray(table)
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    safe = np.asarray(safe, dtype=bool)
    return GameSpec(
        num_states=table.shape[0],
        num_ego_actions=table.shape[1],
        num_env_actions=table.shape[2],
        transition=lambda x, u1, u2: int(table[x, u1, u2]),
        ego_reward=lambda x: float(r1[x]),
        env_reward=lambda x: float(r2[x]),
        safe_sets=lambda t: safe,
        discount=discount,
        horizon=horizon,
    )


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("hierarchy-cache")


@pytest.fixture(scope="session")
def built_scenarios(cache_dir):
    """Scenario + hierarchy + kernel per name, built once per session."""
    store = {}

    def get(name):
        if name not in store:
            config = default_config(name)
            scenario, hierarchy, content_hash = build_artifacts(config, cache_dir)
            kernel = scenario_kernel(scenario, hierarchy)
            store[name] = (scenario, hierarchy, kernel, content_hash)
        return store[name]

    return get
