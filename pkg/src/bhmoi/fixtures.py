"""Bundled example trials."""

from __future__ import annotations

from importlib import resources

from .engine import BinaryTrialData
from .formats import read_binary_csv

FIXTURES = {
    # imatinib phase II trial across ten sarcoma subtypes
    "sarcoma": "sarcoma.csv",
    # ten subgroups of 25 patients with responses spread from 2 to 13
    "heterogeneous10": "heterogeneous10.csv",
}

# subgroups with the highest observed response rates in the sarcoma trial
SARCOMA_HIGH = ("leiomyosarcoma", "liposarcoma", "osteosarcoma")


def fixture_path(name: str):
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {', '.join(sorted(FIXTURES))}")
    return resources.files("bhmoi") / "data" / FIXTURES[name]


def load_fixture(name: str) -> BinaryTrialData:
    with resources.as_file(fixture_path(name)) as path:
        return read_binary_csv(path)
