import numpy as np
import pytest

from mome.backbone import ModelConfig, MoMETransformer
from mome.data import generate_corpus, make_batch
from mome.training import prepare_pairs


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def corpus64():
    return generate_corpus(64, seed=0)


@pytest.fixture(scope="session")
def pairs64(corpus64, tiny_config):
    return prepare_pairs(corpus64, tiny_config)


@pytest.fixture
def model(tiny_config):
    return MoMETransformer(tiny_config, seed=0)


@pytest.fixture
def batch8(pairs64):
    patches, tokens = pairs64
    return make_batch(list(zip(patches[:8], tokens[:8])), num_workers=2, mask_prob=0.3,
                      rng=np.random.default_rng(0))


# one summary line per acceptance criterion, whatever the -s / -v flags
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if rep.when != "call" and outcome != "error" or not name.startswith("test_criterion_"):
                continue
            n = int(name.split("_")[2])
            lines.append((n, "PASS" if outcome == "passed" else "FAIL", VERDICTS.get(n, "")))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
