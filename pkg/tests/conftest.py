import numpy as np
import pytest
import torch

from gcame import ExplanationTarget, build_toy_detector, forward_with_capture
from gcame.toy import compose_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy():
    return build_toy_detector()


@pytest.fixture(scope="session")
def random_toy():
    return build_toy_detector(checkpoint=None)


@pytest.fixture(scope="session")
def square_scene():
    # one 24 px square centered at (64, 64)
    return compose_scene([(1, 52, 52, 24)], rng=np.random.default_rng(3))


@pytest.fixture(scope="session")
def square_target(toy, square_scene):
    dets, _ = forward_with_capture(toy, square_scene.image)
    assert dets, "bundled toy detector missed the square"
    return ExplanationTarget(dets[0])


def top_row_target(detector, image):
    """Target on the most confident dense row, no threshold."""
    dets, session = forward_with_capture(detector, image, threshold=0.0)
    return ExplanationTarget(dets[0]), session


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion; printed in the summary."""
    state = {}

    def note(number, title, detail=""):
        state.update(number=number, title=title, detail=detail)

    yield note
    if state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {state['number']:>2}: {state['title']}"
        if state["detail"]:
            line += f" ({state['detail']})"
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
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
