import pytest

from unifier.config import RunConfig


def tiny_config(**overrides):
    """A seconds-scale run: small encoder, few samples, one epoch per task."""
    cfg = RunConfig()
    cfg.model.depth, cfg.model.d1, cfg.model.d2, cfg.model.heads, cfg.model.hidden = 2, 16, 4, 2, 16
    cfg.model.c_max = 8
    cfg.schedule.epochs_initial = cfg.schedule.epochs_later = 1
    cfg.schedule.pretrain_samples, cfg.schedule.pretrain_epochs = 16, 1
    cfg.data.n_train, cfg.data.n_test = 8, 4
    for key, value in overrides.items():
        section, _, name = key.rpartition("__")
        setattr(getattr(cfg, section) if section else cfg, name, value)
    return cfg.validate()


@pytest.fixture
def tiny():
    return tiny_config


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance line for the summary."""

    def record(n, passed, detail):
        _CRITERIA[n] = (passed, detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
