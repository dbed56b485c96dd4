import numpy as np
import pytest
import torch

from metagp.tensor import DTYPE


def central_difference(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (g,) = torch.autograd.grad(out, x)
    return g


def rel_err(a, b) -> float:
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def random_spd(n: int, rng: np.random.Generator) -> torch.Tensor:
    a = rng.standard_normal((n, n))
    return torch.as_tensor(a @ a.T + n * np.eye(n), dtype=DTYPE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion.

    Usage: ``with criterion("3. sinusoid ranking") as note: ...; note("detail")``
    """
    from contextlib import contextmanager

    @contextmanager
    def record(name: str):
        details: list[str] = []
        ok = False
        try:
            yield details.append
            ok = True
        finally:
            status = "PASS" if ok else "FAIL"
            line = f"[{status}] {name}" + (f" :: {'; '.join(details)}" if details else "")
            ACCEPTANCE_LINES.append(line)
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
