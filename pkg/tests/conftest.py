import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from treepcr import Digest, Platform, SHA1


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


def make_platform(leaves, depth, config=SHA1, **kwargs) -> Platform:
    """Platform with the given raw leaf values extended in order."""
    platform = Platform(depth, config=config, **kwargs)
    for raw in leaves:
        platform.extend(Digest(raw))
    return platform
