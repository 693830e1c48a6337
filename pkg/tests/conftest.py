import pytest

from prolora import training


@pytest.fixture(scope="session")
def ablation_results():
    """Full ablation comparison, computed once per test session."""
    return training.ablation_suite(seed=0)
