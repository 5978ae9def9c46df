import numpy as np
import pytest

from pma import store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def meta(step=0, tokens=0, **extra):
    return {"step": str(step), "tokens": str(tokens), **extra}


def random_container(rng, path, n_tensors=3, dtype="f32", max_dim=5, step=0):
    tensors = {}
    for i in range(n_tensors):
        ndim = int(rng.integers(0, 3))
        shape = tuple(int(s) for s in rng.integers(0, max_dim, size=ndim))
        tensors[f"t{i}.{rng.integers(1000)}"] = (dtype, shape, rng.standard_normal(shape))
    store.write_container(tensors, meta(step=step, tokens=step * 10), path)
    return tensors


_acceptance_lines: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

    def record(ac: str, ok: bool, detail: str) -> bool:
        _acceptance_lines.append(f"{ac}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_acceptance_lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split(":")[0].split("-")[1])):
            terminalreporter.write_line(line)
