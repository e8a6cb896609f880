import numpy as np
import pytest

from supernas import autodiff as ad
from supernas.space import build_search_space

TOY_OPTIONS = [[4, 8, 12, 16]] * 6


def project(out: ad.Tensor, r: np.ndarray) -> ad.Tensor:
    """Scalar <out, r>; a fixed random projection so every output entry matters."""
    return ad._result(np.asarray((out.data * r).sum()), (out,), lambda g: (g * r,), "project")


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, tensors, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``tensors``.

    ``build()`` must return a scalar loss Tensor computed from ``tensors``.
    """
    for t in tensors:
        t.grad = None
    build().backward()
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    """Values with |x| >= margin so kinked ops are differentiable at every entry."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


@pytest.fixture
def toy_space():
    return build_search_space(TOY_OPTIONS, "relu", 5, (3, 8, 8), stem_width=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
