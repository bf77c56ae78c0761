from __future__ import annotations

import random

import pytest

import support


@pytest.fixture
def rng() -> random.Random:
    return random.Random(17)


@pytest.fixture
def admitted():
    return support.admitted_envelope()


@pytest.fixture
def resolved():
    return support.resolved_envelope()


@pytest.fixture
def finalized():
    return support.finalized_envelope()
