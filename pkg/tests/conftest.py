import os

os.environ.setdefault("SENC_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("senc", max_examples=40, deadline=None)
settings.load_profile("senc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
