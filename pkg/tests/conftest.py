import functools

import pytest

from posattest import crypto
from posattest.crypto import KeyRole


@functools.cache
def cached_keys(role: KeyRole, seed: int, bits: int = 512) -> crypto.Keypair:
    return crypto.keygen(role, seed, bits)


@pytest.fixture
def group_keys():
    return cached_keys(KeyRole.POS_GROUP, 11)


@pytest.fixture
def user_keys():
    return cached_keys(KeyRole.USER_APP, 7)


@pytest.fixture
def mail_keys():
    return cached_keys(KeyRole.MAIL_SERVER, 3)
