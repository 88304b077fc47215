import pytest

from hpusim.config import load_config
from hpusim.model import DeviceSpec, ModelConfig


@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture(scope="session")
def llama(cfg):
    return cfg.model("llama2-7b")


@pytest.fixture(scope="session")
def a100(cfg):
    return cfg.device("a100-pcie")


@pytest.fixture(scope="session")
def l40s(cfg):
    return cfg.device("l40s")


@pytest.fixture(scope="session")
def proto(cfg):
    return cfg.device("hpu-prototype")


@pytest.fixture
def tiny():
    """Two-layer GQA model small enough for exhaustive timelines."""
    return ModelConfig("tiny", num_layers=2, hidden_dim=256, num_q_heads=4, num_kv_heads=2,
                       head_dim=64, ffn_dim=512)


def make_device(name="dev", kind="gpu", bw=1e12, cap=1 << 34, flops=1e14, link=16e9,
                lat=1e-6, tdp=100.0):
    return DeviceSpec(name, kind, bw, cap, flops, link, lat, tdp)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
