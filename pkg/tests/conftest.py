import dataclasses

import pytest

from gpc_phs.experiment import ExperimentConfig


def tiny_config(**overrides) -> ExperimentConfig:
    """A few-second version of the full experiment for plumbing tests."""
    cfg = ExperimentConfig()
    cfg.sampling = dataclasses.replace(cfg.sampling, n_points=60, dt=1e-2)
    # start near the optimum so a few iterations give a usable model
    cfg.training = dataclasses.replace(
        cfg.training,
        restarts=1,
        max_iters=40,
        screen_size=None,
        sigma_f=9.0,
        lengthscales=(0.6, 0.11, 0.13),
        b=0.5,
        noise=(0.027, 0.027, 0.027),
    )
    cfg.design = dataclasses.replace(cfg.design, grid=(5, 5, 5))
    cfg.open_loop = dataclasses.replace(cfg.open_loop, dt=5e-2)
    cfg.closed_loop = dataclasses.replace(cfg.closed_loop, t_end=1.0, dt=1e-2)
    cfg.sweep = dataclasses.replace(cfg.sweep, sizes=(40, 60))
    for section, values in overrides.items():
        if isinstance(values, dict):
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
        else:
            setattr(cfg, section, values)
    return cfg


@pytest.fixture
def tiny():
    return tiny_config()


# -- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
