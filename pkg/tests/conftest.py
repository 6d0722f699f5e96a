import numpy as np
import pytest

from halide.dataset import DatasetManifest, Trajectory
from halide.pipeline import RunConfig
from halide.synthetic import GeneratorSpec, generate

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    """Print a criterion verdict and repeat it in the terminal summary."""
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_synth():
    """Small mixed-quality dataset (16 trajectories, 4 cohorts) and its ground truth."""
    return generate(GeneratorSpec(N=16, T_min=40, T_max=60, seed=1))


@pytest.fixture
def fast_config():
    """Hierarchical config cut down so a fit takes about a second."""
    return RunConfig(K=2, em={"m_steps": 30, "max_em_iter": 8, "em_restarts": 1, "init_restarts": 2},
                     seg={"max_ticc_iter": 8}, irl_steps=50)


def make_traj(tid, states, actions, times=None, weights=None, cohort="S21", pre=None, post=None):
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    T = len(states)
    times = np.arange(T, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    return Trajectory(tid, cohort, times, states, np.asarray(actions), weights,
                      pretest=pre, posttest=post)


def make_dataset(trajs, m=None, A=3):
    m = trajs[0].states.shape[1] if m is None else m
    return DatasetManifest(m, A, list(trajs))
