"""Simulation-based evaluation and quality monitoring for dialogue doctors.

Runs step-limited consultations against a fact-constrained simulated
patient, extracts the final recommendations with evidence anchoring,
scores them with the D.O.T.S. metric family (Diagnosis, Observations,
Treatment, Steps), aggregates and statistically compares runs, and
continuously monitors deployed versions with trap probes and escalation.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def demo_bank_path() -> Path:
    """Directory of the packaged demo case bank."""
    return Path(resources.files("dotsbench") / "data" / "demo_bank")
