import numpy as np
import pytest

from bagnet.model import TINY_CONFIG, init_params
from bagnet.tensor import ConvParams, Tensor


def make_conv(weight, bias=None, bn=False, dtype=np.float64):
    """ConvParams from a plain weight array; BN at gamma 1, beta 0 when requested."""
    w = np.asarray(weight, dtype=dtype)
    co = w.shape[0]
    b = np.zeros((1, co, 1, 1), dtype) if bias is None else np.asarray(bias, dtype).reshape(1, co, 1, 1)
    p = ConvParams(weight=Tensor(w, requires_grad=True), bias=Tensor(b, requires_grad=True))
    if bn:
        p.bn_gamma = Tensor(np.ones((1, co, 1, 1), dtype), requires_grad=True)
        p.bn_beta = Tensor(np.zeros((1, co, 1, 1), dtype), requires_grad=True)
        p.bn_running_mean = np.zeros(co, dtype)
        p.bn_running_var = np.ones(co, dtype)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return init_params(TINY_CONFIG, seed=0, dtype=np.float64)


@pytest.fixture(scope="session")
def synth8(tmp_path_factory):
    """Eight synthetic 32x32 samples shared by the slower tests."""
    from bagnet.data import synth_dataset

    out = tmp_path_factory.mktemp("synth8")
    synth_dataset(8, (32, 32), seed=3, out_dir=out)
    return out


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion."""
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
