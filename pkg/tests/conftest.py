import numpy as np
import pytest

from animer.bodymodel import build_toy_template
from animer.datagen import GenConfig, build_dataset, toy_templates


@pytest.fixture(scope="session")
def quad_template():
    return build_toy_template("quadruped", 6, 4, 40, seed=0)


@pytest.fixture(scope="session")
def bird_template():
    return build_toy_template("avian", 6, 4, 40, seed=0)


@pytest.fixture(scope="session")
def small_gen_config():
    return GenConfig(counts={"quadruped": 12, "avian": 12}, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_gen_config):
    templates = toy_templates(small_gen_config)
    manifest, records = build_dataset(small_gen_config, templates)
    return templates, manifest, records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             if getattr(rep, "when", "") == "call"
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
