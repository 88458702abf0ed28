import pytest

from packprefetch.config import load_hardware, load_model
from packprefetch.hardware import HardwareSpec
from packprefetch.workload import ModelSpec


def toy_hw(prefetch: int = 0, compute_buffer: int = 1, bandwidth: float = 4.0) -> HardwareSpec:
    """Unit systolic tiles at 2 flop/s (GEMM time = m*k*n s), 16 flop/s vector, 4 B/s HBM.

    A 1-byte compute buffer disables fusion so every byte is visible in the timeline.
    """
    return HardwareSpec("toy", 2.0, (1, 1, 1), (2, 2, 2), compute_buffer, prefetch, bandwidth, 1 << 20)


def toy_spec(layers: int = 1) -> ModelSpec:
    return ModelSpec("toy", layers, 1, 1, 1, 1, 1, 1, bytes_per_value=1, max_context=64)


@pytest.fixture(scope="session")
def llama8b():
    return load_model("llama3.1-8b")


@pytest.fixture(scope="session")
def llama70b():
    return load_model("llama3.1-70b")


@pytest.fixture(scope="session")
def v6e():
    return load_hardware("tpuv6e-like")


@pytest.fixture(scope="session")
def v7():
    return load_hardware("tpuv7-like")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
