import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from outfitrank.catalog import CatalogConfig, generate_dataset
from outfitrank.layers import BackboneConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# a dataset small enough for unit tests: 2 users, 16px images, few outfits
TINY = CatalogConfig(n_users=2, items_per_category=40, image_size=16, positives=(6, 2, 3), candidate_multiplier=5)
TINY_BACKBONE = BackboneConfig(image_size=16, feature_dim=8, widths=(4, 4, 4))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    _CRITERIA[number] = line
    return line


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow on a cold cache)")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
