from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from cdrcontain.cdr import Area, AreaRegistry, CdrRecord, Tower, TowerRegistry, build_trajectories
from cdrcontain.synthetic import GeneratorConfig, generate_synthetic_cdr

T0 = datetime(2014, 3, 3, 12, 0, tzinfo=timezone.utc)  # a Monday


def make_towers(areas=("A", "B", "C", "D"), spacing=0.1):
    """One tower per area along the equator, ``spacing`` degrees apart."""
    return TowerRegistry(Tower(f"t{a}", 0.0, i * spacing, a) for i, a in enumerate(areas))


def make_records(user_paths: dict, towers: TowerRegistry, start=T0, step=timedelta(hours=1)):
    """Records for ``{user: [area, area, ...]}``, one event per ``step``."""
    out = []
    for user, path in user_paths.items():
        for k, area in enumerate(path):
            out.append(CdrRecord(user, None, start + k * step, 0, "sms", f"t{area}"))
    return out


def make_trajectories(user_paths: dict, areas=("A", "B", "C", "D"), **kw):
    towers = make_towers(areas)
    return build_trajectories(make_records(user_paths, towers, **kw), towers)


@pytest.fixture
def towers():
    return make_towers()


@pytest.fixture
def areas():
    return AreaRegistry(Area(a, f"area {a}", 1000) for a in ("A", "B", "C", "D"))


SMALL_GENERATOR = GeneratorConfig(n_users=200, n_areas=12, n_days=28, jump_prob=0.05,
                                  exploration_prob=0.2, total_population=120_000)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic_cdr(SMALL_GENERATOR, 3, out)


@pytest.fixture(scope="session")
def small_experiment(small_dataset):
    """Config file pointing at the small synthetic dataset."""
    import yaml

    path = small_dataset.cdr_path.parent / "experiment.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump({
            "seed": 11,
            "data": {"cdr": "cdr.csv", "towers": "towers.csv", "areas": "areas.csv"},
            "simulation": {"horizon": 40, "runs": 4, "mode": "stochastic"},
            "scenarios": [
                {"kind": "none"},
                {"kind": "geo_placerank", "k": 2, "delay": 3},
                {"kind": "indiv_progmosis", "fraction": 0.2, "delay": 3},
            ],
        }, fh, sort_keys=True)
    return path


@pytest.fixture(scope="session")
def small_inputs(small_experiment):
    from cdrcontain.config import build_inputs, load_config

    return build_inputs(load_config(small_experiment))


# (criterion, title, passed, detail) lines collected by tests/test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  C{number:<2d} {title}: {detail}")
