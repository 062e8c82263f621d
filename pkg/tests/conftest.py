import json
from importlib.resources import files
from pathlib import Path

import pytest

from clausechain.schema import get_question, load_dataset, load_question_bank

FIXTURES = Path(__file__).parent / "fixtures"
BUNDLED_DATASET = Path(str(files("clausechain.data") / "fixture_dataset.jsonl"))


@pytest.fixture(scope="session")
def bank():
    return load_question_bank()


@pytest.fixture(scope="session")
def q1(bank):
    return get_question(bank, "Q1")


@pytest.fixture(scope="session")
def q2(bank):
    return get_question(bank, "Q2")


@pytest.fixture(scope="session")
def q4(bank):
    return get_question(bank, "Q4")


@pytest.fixture(scope="session")
def dataset(bank):
    return load_dataset(BUNDLED_DATASET, bank)


@pytest.fixture
def write_jsonl(tmp_path):
    def write(records, name="data.jsonl"):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        return path

    return write
