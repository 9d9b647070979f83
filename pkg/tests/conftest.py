"""Shared fixtures: the bundled demo line, once per session."""
from __future__ import annotations

import pytest

from railsched import fixtures as fixture_lib


@pytest.fixture(scope="session")
def fx():
    """The cached service fixture (model, timetable, OD, start states)."""
    return fixture_lib.service_fixture()


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    """The same fixture written out as files; returns the path mapping."""
    out = tmp_path_factory.mktemp("linefiles")
    return fixture_lib.service_fixture().write_files(str(out))
