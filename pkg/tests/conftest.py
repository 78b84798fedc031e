import pytest
import torch

from swinsit.training import TrainConfig

# registry filled by the acceptance suite; printed in the terminal summary
ACCEPTANCE_RESULTS = []


def record_acceptance(criterion, detail):
    ACCEPTANCE_RESULTS.append((criterion, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[PASS] criterion {criterion}: {detail}")


def tiny_train_config(variant="full", **overrides):
    """Small codec for fast unit tests (not the acceptance toy model)."""
    defaults = dict(
        variant=variant,
        image_size=(16, 16),
        rate=0.3,
        channels=[8, 16],
        num_heads=[2, 2],
        depths=[1, 1],
        window_size=2,
        batch_size=16,
        epochs=1,
        lr=1e-3,
        seed=0,
        pilot_len=16,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture
def tiny_config():
    return tiny_train_config()


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(1234)
