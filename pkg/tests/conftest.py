from __future__ import annotations

import pytest

from dotsbench import demo_bank_path
from dotsbench.cases import load_bank
from dotsbench.dialogue import DoctorEndpoint
from dotsbench.gateway import ScriptedProvider


@pytest.fixture(scope="session")
def demo_bank():
    return load_bank(demo_bank_path())


@pytest.fixture
def demo_doctor_factory():
    """Fresh scripted doctor per (case, run): replays the case's stock dialogue."""

    def factory(case, run_index=0):
        path = demo_bank_path() / "replays" / f"{case.id}.doctor.json"
        return DoctorEndpoint(ScriptedProvider.from_file(path), name=f"scripted:{case.id}")

    return factory


@pytest.fixture
def store(tmp_path):
    from dotsbench.runstore import RunStore

    return RunStore(tmp_path / "store")
