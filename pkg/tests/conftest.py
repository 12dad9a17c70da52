import numpy as np
import pytest

from edgeseg.unet import UNetConfig, build


def tiny_config(seed=0, **kw):
    return UNetConfig(depth=2, filters=(4, 8, 16), seed=seed, **kw)


def randomize_bn(model, rng):
    """Give every batch norm non-trivial affine terms and running statistics."""
    for l in model.layers:
        if l.kind == "bn":
            g, b, m, v = l.params
            c = model.params[g].shape[0]
            model.params[g] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            model.params[b] = rng.normal(0, 0.2, c).astype(np.float32)
            model.params[m] = rng.normal(0, 0.2, c).astype(np.float32)
            model.params[v] = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return model


@pytest.fixture
def tiny():
    return build(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria append "[PASS] ..." style lines here; they are echoed
# in the terminal summary so a plain `pytest` run shows one line each.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
