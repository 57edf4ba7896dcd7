import numpy as np
import pytest

from gcnet.tensor import BatchNormStats, ConvKernel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_kernel(rng, c_out, c_in, k, stride=1, padding=None, dtype=np.float64):
    padding = k // 2 if padding is None else padding
    return ConvKernel(rng.normal(size=(c_out, c_in, k, k)).astype(dtype),
                      rng.normal(size=c_out).astype(dtype), stride, padding)


def random_bn(rng, c, dtype=np.float64):
    return BatchNormStats(rng.normal(size=c).astype(dtype), rng.uniform(0.2, 2.0, c).astype(dtype),
                          rng.uniform(0.5, 1.5, c).astype(dtype), rng.normal(size=c).astype(dtype))


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def randomize_bn(rng, stats):
    c = stats.channels
    dt = stats.gamma.dtype
    stats.mean[:] = rng.normal(size=c)
    stats.var[:] = rng.uniform(0.2, 2.0, c)
    stats.gamma[:] = rng.uniform(0.5, 1.5, c)
    stats.beta[:] = rng.normal(size=c)
    assert stats.gamma.dtype == dt


def random_gcblock(rng, c_in, c_out, stride, n_paths, dtype=np.float64):
    """Training-form block with random weights and random running statistics."""
    from gcnet.blocks import make_gcblock

    block = make_gcblock(c_in, c_out, stride, n_paths, rng, dtype)
    for p in block.paths:
        if p.bn is not None:
            randomize_bn(rng, p.bn)
        for u in p.convs:
            randomize_bn(rng, u.bn)
            u.conv.bias[:] = rng.normal(size=u.conv.out_channels)
    return block


def randomize_unit(rng, unit):
    """Random weights and running stats for a ConvBN in place."""
    unit.conv.weight[:] = rng.normal(0, 0.5, unit.conv.weight.shape)
    if unit.bn is not None:
        randomize_bn(rng, unit.bn)
    else:
        unit.conv.bias[:] = rng.normal(size=unit.conv.out_channels)


@pytest.fixture(scope="session")
def toy_run():
    """One full default toy training run, shared by every test that needs a trained model."""
    import time

    from gcnet.train import ToyConfig, toy_train_run

    t0 = time.perf_counter()
    net, trace = toy_train_run(ToyConfig(), seed=0, iters=1000)
    return net, trace, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run, uncaptured."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
