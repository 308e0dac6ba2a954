import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protodrift.harness import FinetuneConfig, PretrainConfig, pretrain_base
from protodrift.protostore import extract_store
from protodrift.synth import WorldConfig, generate_world, sample_kshot


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldConfig(seed=0))


@pytest.fixture(scope="session")
def base_ckpt(world):
    return pretrain_base(world, PretrainConfig(), 0)


@pytest.fixture(scope="session")
def store(world, base_ckpt):
    return extract_store(base_ckpt, world.train.only(world.base_ids))


@pytest.fixture(scope="session")
def support(world):
    return sample_kshot(world.train, world.novel_ids, 10, 0)


@pytest.fixture
def short_finetune():
    return FinetuneConfig(iterations=30)


# one PASS/FAIL line per acceptance criterion, shown after the test run
ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
