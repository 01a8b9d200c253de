from __future__ import annotations

import random
from pathlib import Path

import pytest

from atc_coder.knowledge import load_definitions
from atc_coder.ontology import load_ontology

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

CHAIN_TSV = "A\tAlimentary tract and metabolism\nA10\tDiabetes medication\nA10B\tBlood glucose lowering drug\nA10BA\tBiguanides\nA10BA02\tmetformin\n"


@pytest.fixture(scope="session")
def sample_ontology():
    return load_ontology(FIXTURES / "atc_sample.tsv")


@pytest.fixture(scope="session")
def sample_definitions():
    return load_definitions(FIXTURES / "definitions.tsv")


@pytest.fixture
def chain_ontology(tmp_path):
    path = tmp_path / "chain.tsv"
    path.write_text(CHAIN_TSV, encoding="utf-8")
    return load_ontology(path)


@pytest.fixture
def rng():
    return random.Random(42)


# acceptance criteria report -------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_RANK = {"SKIP": 0, "PASS": 1, "FAIL": 2}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        number, title = marker.args
        if call.excinfo is None:
            outcome = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        prev = _ACCEPTANCE.get(number)
        # any failure fails the criterion; a data-dependent skip does not hide a pass
        if prev is None or _RANK[outcome] > _RANK[prev[0]]:
            _ACCEPTANCE[number] = (outcome, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        outcome, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{outcome}] {number:2d}. {title}")
