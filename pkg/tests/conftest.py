import numpy as np
import pytest

from anast.data import parse_manifest

ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def synthetic_doc(n_tasks=4, classes_per_task=2, per_class=200, dim=20, sep=10.0, std=0.5,
                  seed=7, output_dim=1000, gamma=0.01):
    classes = n_tasks * classes_per_task
    return {
        "name": f"synthetic-{n_tasks}task",
        "gamma": gamma,
        "split_ratio": 0.8,
        "split_seed": 0,
        "expansion": {"output_dim": output_dim, "seed": 0},
        "sources": {
            "synth": {
                "synthetic": {
                    "classes": classes, "per_class": per_class, "dim": dim,
                    "separation": sep, "std": std, "seed": seed,
                }
            }
        },
        "tasks": [
            {
                "name": f"t{i}",
                "classes": [f"c{classes_per_task * i + k}" for k in range(classes_per_task)],
                "source": "synth",
            }
            for i in range(n_tasks)
        ],
    }


@pytest.fixture(scope="session")
def standard_manifest():
    """8 classes, separation 10, std 0.5, 4 tasks, 200 samples/class."""
    return parse_manifest(synthetic_doc())
