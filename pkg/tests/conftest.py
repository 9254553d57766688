import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from errmon.core import NetworkConfig, ip_to_int


@pytest.fixture
def cfg():
    return NetworkConfig(
        internal_prefixes=["10.1.0.0/24"],
        telescope_prefixes=["10.1.0.240/28"],
        anonymization_key=0x1234ABCD,
    )


def make_cfg(**kwargs):
    defaults = dict(
        internal_prefixes=["10.1.0.0/24"],
        telescope_prefixes=["10.1.0.240/28"],
        anonymization_key=0x1234ABCD,
    )
    defaults.update(kwargs)
    return NetworkConfig(**defaults)


@pytest.fixture
def imp_cfg():
    """Config with one impersonated TCP endpoint 10.1.0.9:8022."""
    return make_cfg(
        impersonation_set={(ip_to_int("10.1.0.9"), 8022, 6)},
    )
