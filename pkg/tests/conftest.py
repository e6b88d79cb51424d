import json

import pytest

from moma.agents import AgentClient, AgentConfig
from moma.data import SEVERITY_CLASSES, TaskSpec


CHEST = TaskSpec("chest", "multiclass", [list(SEVERITY_CLASSES)])
ALCOHOL = TaskSpec("alcohol", "binary", [["Negative", "Positive"]])
MULTI = TaskSpec("trauma", "multitask", [list(SEVERITY_CLASSES), list(SEVERITY_CLASSES)],
                 subtasks=("chest", "spine"))


def encounter_dict(eid="e1", ts="2018-05-01", text="note.", modalities=(), label=0, sex="female", race="white"):
    return {
        "encounter_id": eid,
        "timestamp": ts,
        "text_docs": [{"kind": "ed_note", "content": text}] if text is not None else [],
        "modalities": list(modalities),
        "labels": {"chest": label},
        "demographics": {"sex": sex, "race": race, "age": 40},
    }


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def client():
    c = AgentClient(sleep=lambda s: None)
    yield c
    c.close()


@pytest.fixture
def mock_agents():
    return {
        "cxr": AgentConfig("cxr", model_name="file-caption", supports_vision=True),
        "lab": AgentConfig("lab", model_name="table-digest"),
        "agg": AgentConfig("agg", model_name="echo"),
        "pred": AgentConfig("pred", model_name="hash", embedding_dim=8),
    }


# one line per acceptance criterion, appended by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
