from __future__ import annotations

import random
from pathlib import Path

import pytest

from cdtl.crypto import ClientKey
from cdtl.dataset import Attribute, PersonDataset, Schema

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
DATA = ROOT / "data"

_acceptance: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str = ""):
    _acceptance[criterion] = ("PASS" if passed else "FAIL") + (f"  {detail}" if detail else "")


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda s: int(s.split()[0].lstrip("AC"))):
        terminalreporter.write_line(f"{name}: {_acceptance[name]}")


@pytest.fixture
def key():
    return ClientKey.from_seed("tests")


def small_schema(sensitive_domain=None) -> Schema:
    return Schema(
        (Attribute("age", "numeric"), Attribute("zip"), Attribute("sex"),
         Attribute("disease", domain=sensitive_domain), Attribute("cls")),
        sensitive="disease", class_attr="cls")


def make_dataset(n: int, seed: int, n_values: int = 4) -> PersonDataset:
    """Random person records whose sensitive value is eligible at l = 2."""
    rng = random.Random(seed)
    values = [f"d{i}" for i in range(n_values)]
    rows = []
    for i in range(n):
        d = values[i % n_values]
        rows.append((float(rng.randint(20, 70)), rng.choice("ABC"), rng.choice("MF"), d,
                     "yes" if d in ("d0", "d1") or rng.random() < 0.2 else "no"))
    rng.shuffle(rows)
    return PersonDataset(small_schema(), tuple(rows))


@pytest.fixture
def small_ds():
    return make_dataset(60, seed=3)
