import json
from pathlib import Path

import pytest

from ekarag.retrieval import LEXICAL, RetrieverConfig, build_index, ingest_corpus

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "ekarag" / "data" / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"

Q_EKA = "Which film has the director born later, I'll Tell The World or Saranggola?"
Q_BASE = "Which film has the director born later, I'Ll Tell The World or Saranggola?"


def read_records(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


@pytest.fixture(scope="session")
def case_index():
    return build_index(ingest_corpus(FIXTURES / "case_study_corpus.jsonl"), RetrieverConfig(LEXICAL))


@pytest.fixture(scope="session")
def multihop_index():
    return build_index(ingest_corpus(FIXTURES / "multihop_corpus.jsonl"), RetrieverConfig(LEXICAL))


@pytest.fixture(scope="session")
def multihop_records():
    return read_records(FIXTURES / "multihop.jsonl")


def write_corpus(path, docs):
    path.write_text("".join(json.dumps({"id": i, "title": i, "text": t}) + "\n" for i, t in docs),
                    encoding="utf-8")
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
