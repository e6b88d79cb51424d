"""Synthetic encounter corpora with a planted image signal.

The label is recoverable only from a finding phrase written into each
encounter's "image" file. The mock vision specialist reads that file back as
its summary, so the signal reaches the predictor only through the specialist
branch and disappears when images are ablated.
"""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path

import numpy as np

from .data import SEVERITY_CLASSES, map_ais_to_severity
from .prompts import PromptTemplate, format_template_file

FINDINGS = {
    0: "no acute cardiopulmonary abnormality",
    1: "nondisplaced rib fracture",
    2: "flail segment with hemopneumothorax",
}

NOTE_TEMPLATES = (
    "Patient presents to the emergency department after a motor vehicle collision. Vitals stable.",
    "Patient brought in following a fall from standing height. Alert and oriented.",
    "Trauma activation for a bicycle accident. Airway intact, breathing unlabored.",
    "Patient seen after an assault. Complains of pain, ambulatory on arrival.",
)

INCIDENTAL = (
    "mild degenerative changes of the thoracic spine",
    "calcified granuloma in the left upper lobe",
    "small hiatal hernia",
    "stable cardiomediastinal silhouette",
    "no pleural effusion",
    "healed remote clavicle fracture",
    "prominent pulmonary vasculature",
    "surgical clips in the right upper quadrant",
)

NOTE_DETAILS = (
    "History of hypertension.",
    "Takes no daily medications.",
    "Reports mild nausea.",
    "Denies loss of consciousness.",
    "Tetanus status up to date.",
    "Smoker, one pack per day.",
    "Allergic to penicillin.",
    "Lives alone, independent at baseline.",
    "Family at bedside.",
    "Pain controlled with acetaminophen.",
)

# AIS draws give roughly 63% Negative, 12% Moderate, 25% Serious, in line with
# the label mix of a real chest trauma cohort.
AIS_PROBS = np.array([0.633, 0.06, 0.055, 0.12, 0.07, 0.04, 0.022])

DEFAULT_CUTOFF = "2019-01-01"

# The mock aggregator echoes its prompt, so a long fixed instruction block would
# dominate every bag-of-words embedding. This template passes m_text through.
PASSTHROUGH_AGGREGATOR = PromptTemplate("passthrough_aggregator", "{{clinical_and_summaries}}")


def make_planted_corpus(root: str | Path, n: int = 600, seed: int = 0, embedding_dim: int = 128,
                        with_labs: bool = False) -> Path:
    """Write images, ``dataset.jsonl`` and ``config.json`` under ``root``; returns the config path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start = dt.date(2015, 1, 1)
    span = (dt.date(2019, 12, 31) - start).days
    lines = []
    for i in range(n):
        eid = f"enc{i:04d}"
        ais = int(rng.choice(7, p=AIS_PROBS))
        severity = map_ais_to_severity(ais)
        img = root / "images" / f"{eid}.img"
        extras = [INCIDENTAL[j] for j in sorted(rng.choice(len(INCIDENTAL), size=int(rng.integers(0, 3)),
                                                              replace=False))]
        img.write_text("Impression: " + "; ".join([FINDINGS[severity]] + extras) + ".\n", encoding="utf-8")
        details = [NOTE_DETAILS[j] for j in rng.choice(len(NOTE_DETAILS), size=int(rng.integers(1, 4)),
                                                        replace=False)]
        note = " ".join([NOTE_TEMPLATES[int(rng.integers(len(NOTE_TEMPLATES)))]] + details)
        modalities = [{"modality_id": "cxr", "kind": "image", "image_ref": f"images/{eid}.img"}]
        if with_labs:
            modalities.append({"modality_id": "labs", "kind": "table", "table_rows": [
                {"name": "hemoglobin", "value": round(float(rng.normal(13.5, 1.2)), 1), "unit": "g/dL",
                 "taken_at": "admission"}]})
        lines.append({
            "encounter_id": eid,
            "timestamp": (start + dt.timedelta(days=int(rng.integers(0, span + 1)))).isoformat(),
            "text_docs": [{"kind": "ed_note", "content": note}],
            "modalities": modalities,
            "labels": {"chest": SEVERITY_CLASSES[severity]},
            "demographics": {"sex": str(rng.choice(["female", "male"])),
                             "race": "white" if rng.random() < 0.7 else "black",
                             "age": int(rng.integers(18, 90))},
        })
    with (root / "dataset.jsonl").open("w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")
    (root / "templates").mkdir(exist_ok=True)
    (root / "templates" / "passthrough_aggregator.txt").write_text(
        format_template_file(PASSTHROUGH_AGGREGATOR), encoding="utf-8")

    specialists = [{"kind": "image", "agent_id": "cxr", "template_id": "cxr_specialist"}]
    agents = {
        "cxr": {"backend": "mock", "model_name": "file-caption", "supports_vision": True},
        "agg": {"backend": "mock", "model_name": "echo"},
        "pred": {"backend": "mock", "model_name": "bow", "embedding_dim": embedding_dim},
    }
    if with_labs:
        specialists.append({"kind": "table", "agent_id": "lab", "template_id": "alcohol_lab_specialist"})
        agents["lab"] = {"backend": "mock", "model_name": "table-digest"}
    config = {
        "dataset": "dataset.jsonl",
        "task": {"name": "chest", "kind": "multiclass", "classes": [list(SEVERITY_CLASSES)]},
        "agents": agents,
        "templates": {"passthrough_aggregator": "templates/passthrough_aggregator.txt"},
        "pipeline": {
            "specialists": specialists,
            "aggregator": {"agent_id": "agg", "template_id": "passthrough_aggregator"},
            "predictor": {"agent_id": "pred", "head_id": "head"},
        },
        "train": {"max_steps": 500, "batch_size": 16, "warmup_steps": 2, "learning_rate": 0.02,
                  "weight_decay": 0.01},
        "bootstrap": {"replicates": 200, "ci_level": 0.95},
        "evaluation": {"axes": ["sex", "race"], "min_subgroup_size": 10},
        "split": {"cutoff": DEFAULT_CUTOFF},
        "cache_dir": "cache",
        "output_dir": "out",
        "seed": seed,
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return cfg_path
