import numpy as np
import pytest
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences (float64)."""
    x = x.detach().clone().double()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        with torch.no_grad():
            fp = float(f(x))
        flat[i] = old - h
        with torch.no_grad():
            fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def random_unit_rows(rng: np.random.Generator, b: int, d: int) -> torch.Tensor:
    x = rng.standard_normal((b, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# acceptance criteria: one PASS/FAIL line each in the terminal summary
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    num, title = marker.args
    if rep.failed or rep.when == "call":
        prev = _CRITERIA.get(num, (title, True))
        _CRITERIA[num] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {title}")
