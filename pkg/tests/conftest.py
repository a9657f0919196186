import numpy as np
import pytest

from ptqrobust import dataset as dsmod


def textured(seed: int, size: int = 64) -> np.ndarray:
    """Smooth gradient plus mid-frequency noise; every 8x8 block has structure."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    base = np.stack([xx * 3, yy * 3, (xx + yy) * 2], axis=-1).astype(np.float64)
    base += rng.normal(0, 25, size=base.shape)
    return np.clip(base, 0, 255).astype(np.uint8)


@pytest.fixture(scope="session")
def small_synth():
    return dsmod.generate_synth_shapes(dsmod.SynthShapesConfig(num_images=12, seed=11))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Records one PASS/FAIL line for the calling acceptance test."""
    state = {"name": request.node.name.removeprefix("test_")}
    yield state
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    line = f"{'PASS' if ok else 'FAIL'}  {state['name']}" + (f"  ({state['detail']})" if "detail" in state else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
