import pytest

from mmt import diffcore


@pytest.fixture(autouse=True)
def _clean_tape():
    diffcore.reset_default_tape()
    yield
    diffcore.reset_default_tape()
