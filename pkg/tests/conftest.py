"""Shared fixtures and the acceptance PASS/FAIL summary."""

from __future__ import annotations

import pytest

from adaudit import synth
from adaudit.features import load_taxonomy
from adaudit.ingest import build_cohort
from adaudit.llm_client import LLMClient, MemoryCache, mock_backend

# criterion number -> (ok, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture(scope="session")
def fixture_data():
    return synth.fixture_cohort()


@pytest.fixture(scope="session")
def fixture_cohort(fixture_data):
    impressions, profiles = fixture_data
    return build_cohort(impressions, profiles)


@pytest.fixture
def mock_client():
    return LLMClient(mock_backend(seed=0), MemoryCache())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
