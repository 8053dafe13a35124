import numpy as np
import pytest

from nashmerge.tensor_store import Expert, ExpertStack, Layer

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def f32(a):
    return np.asarray(a, dtype=np.float32)


def make_layer(base, experts, index=0, routing=None, curvature=None, name="w"):
    """Single-tensor layer from plain arrays."""
    return Layer(
        index,
        {name: f32(base)},
        [Expert(f"e{i}", {name: f32(e)}) for i, e in enumerate(experts)],
        None if routing is None else np.asarray(routing, dtype=np.float64),
        curvature,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pair_stack():
    """Two layers whose layer-0 Gram matrix is [[1, 1], [1, 2]]."""
    l0 = make_layer([0, 0], [[1, 0], [1, 1]], index=0)
    l1 = make_layer([0, 0], [[2, 0], [0, 3]], index=1)
    return ExpertStack([l0, l1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
