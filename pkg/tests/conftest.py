import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scap.harness import example_store  # noqa: E402
from scap.session import KeyPair  # noqa: E402


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def store():
    return example_store()


@pytest.fixture
def server_keys():
    return KeyPair.from_secret(bytes(range(100, 132)))


@pytest.fixture
def client_keys():
    return KeyPair.from_secret(bytes(range(1, 33)))
