import pytest

from dac_retrieval import dataio, training

# (criterion, passed, detail) rows collected by tests/test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_acceptance():
    def record(name: str, passed: bool, detail: str = ""):
        ACCEPTANCE.append((name, bool(passed), detail))
        print(f"[acceptance] {'PASS' if passed else 'FAIL'} {name} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def small_cfg():
    return dataio.SynthConfig(seen=3, unseen=3, items_per_class=6, views=3, dim=16, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    ds, _, _ = dataio.generate(small_cfg)
    return ds


@pytest.fixture(scope="session")
def default_dataset():
    ds, _, _ = dataio.generate(dataio.SynthConfig())
    return ds


@pytest.fixture(scope="session")
def default_runs(default_dataset):
    """Seed-7 training runs of the three adapter modes on the default dataset."""
    out = {}
    for mode in ("frozen", "plain_lora", "ablora"):
        out[mode] = training.train(default_dataset, training.TrainConfig(lora_mode=mode))
    return out
