from pathlib import Path

import pytest

from iwverify.scenario import ScenarioConfig, load_scenario, validate_scenario


CONFIGS = Path(__file__).parent.parent / "configs"


def scenario_doc() -> dict:
    """A small one-dimensional jump-diffusion with a two-term field."""
    return {
        "dimensions": {"state": 1, "wiener": 1, "mark": 1},
        "horizon": 1.0,
        "steps": 8,
        "levels": 3,
        "n_paths": 4,
        "master_seed": 42,
        "initial_state": [0.3],
        "state": {
            "drift": {"breakpoints": [0.5], "values": [[0.4], [-0.2]]},
            "diffusion": [[0.5]],
            "jump": {"matrix": [[0.2]], "offset": [0.1], "bound": 0.3},
        },
        "jump_law": {
            "intensity": 4.0,
            "marks": {"kind": "uniform-box", "low": [-1.0], "high": [1.0]},
        },
        "field": {
            "state_box": 20.0,
            "basis": [
                {
                    "family": "gaussian-bump",
                    "center": [0.0],
                    "width": 1.0,
                    "c0": 1.0,
                    "q": 0.3,
                    "d": [0.2],
                    "jump": {"weights": [0.1], "offset": 0.05, "bound": 0.15},
                },
                {
                    "family": "polynomial",
                    "powers": [2],
                    "c0": 0.5,
                    "q": {"breakpoints": [0.25], "values": [0.1, -0.1]},
                    "d": [-0.1],
                    "jump": {"weights": [0.0], "offset": 0.2, "bound": 0.2},
                },
            ],
        },
    }


def jump_free_doc() -> dict:
    doc = scenario_doc()
    doc["jump_law"]["intensity"] = 0.0
    for element in doc["field"]["basis"]:
        element["jump"] = {"weights": [0.0], "offset": 0.0, "bound": 0.0}
    return doc


@pytest.fixture
def small_cfg() -> ScenarioConfig:
    return validate_scenario(ScenarioConfig.from_config(scenario_doc()))


@pytest.fixture
def jump_free_cfg() -> ScenarioConfig:
    return validate_scenario(ScenarioConfig.from_config(jump_free_doc()))


@pytest.fixture
def zero_cfg() -> ScenarioConfig:
    return load_scenario(CONFIGS / "zero.yaml")


@pytest.fixture
def jump_only_cfg() -> ScenarioConfig:
    return load_scenario(CONFIGS / "jump_only.yaml")


@pytest.fixture
def smooth_cfg() -> ScenarioConfig:
    return load_scenario(CONFIGS / "smooth_field.yaml")
