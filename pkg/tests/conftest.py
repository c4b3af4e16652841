import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


from hypothesis import settings  # noqa: E402

# same examples on every run so the suite output is reproducible
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")
