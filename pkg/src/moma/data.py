"""Encounter data model, JSONL ingestion and temporal splitting."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

TEXT_DOC_KINDS = frozenset({"ed_note", "radiology_report", "progress_note", "discharge_summary", "other"})
MODALITY_KINDS = frozenset({"image", "table"})
SEX_VALUES = ("female", "male", "other/unknown")
TASK_KINDS = ("binary", "multiclass", "multitask")

SEVERITY_CLASSES = ("Negative", "Moderate", "Serious")


class DatasetError(ValueError):
    """Raised when an encounter file cannot be parsed or violates the schema."""

    def __init__(self, message: str, line: int | None = None, encounter_id: str | None = None,
                 field_name: str | None = None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if encounter_id is not None:
            parts.append(f"encounter {encounter_id!r}")
        if field_name is not None:
            parts.append(f"field {field_name!r}")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.encounter_id = encounter_id
        self.field_name = field_name


@dataclass(frozen=True)
class TaskSpec:
    """A prediction task.

    ``classes`` holds one list of class names per subtask. Binary and
    multiclass tasks have exactly one subtask, named after the task unless
    ``subtasks`` says otherwise. Labels in encounter files are keyed by
    subtask name.
    """

    name: str
    kind: str
    classes: tuple[tuple[str, ...], ...]
    subtasks: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(tuple(c) for c in self.classes))
        subtasks = tuple(self.subtasks) or ((self.name,) if len(self.classes) == 1 else ())
        object.__setattr__(self, "subtasks", subtasks)
        if not self.name:
            raise ValueError("task name must be nonempty")
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "multitask":
            if len(self.classes) < 2:
                raise ValueError("multitask task needs at least 2 subtasks")
        elif len(self.classes) != 1:
            raise ValueError(f"{self.kind} task needs exactly one class list")
        if self.kind == "binary" and len(self.classes[0]) != 2:
            raise ValueError("binary task needs exactly 2 classes")
        if any(len(c) < 2 for c in self.classes):
            raise ValueError("every subtask needs at least 2 classes")
        if len(self.subtasks) != len(self.classes):
            raise ValueError("subtasks must name every class list")
        if len(set(self.subtasks)) != len(self.subtasks):
            raise ValueError("subtask names must be unique")

    @property
    def num_classes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.classes)

    @property
    def num_logits(self) -> int:
        """Width of the predictor output: one logit for binary, one per class otherwise."""
        if self.kind == "binary":
            return 1
        return sum(self.num_classes)

    @property
    def default_loss(self) -> str:
        return {"binary": "bce_with_logits", "multiclass": "categorical_ce",
                "multitask": "multitask_ce_sum"}[self.kind]

    def resolve_label(self, subtask: str, value: Any) -> int:
        idx = self.subtasks.index(subtask)
        names = self.classes[idx]
        if isinstance(value, bool):
            raise ValueError(f"label must be int or class name, got {value!r}")
        if isinstance(value, int):
            if not 0 <= value < len(names):
                raise ValueError(f"label index {value} out of range for {len(names)} classes")
            return value
        if isinstance(value, str):
            lowered = [n.lower() for n in names]
            if value.lower() in lowered:
                return lowered.index(value.lower())
            raise ValueError(f"unknown class name {value!r}; expected one of {list(names)}")
        raise ValueError(f"label must be int or class name, got {value!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind,
                "classes": [list(c) for c in self.classes], "subtasks": list(self.subtasks)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(name=d["name"], kind=d["kind"], classes=d["classes"],
                   subtasks=tuple(d.get("subtasks") or ()))


@dataclass(frozen=True)
class TextDoc:
    kind: str
    content: str


@dataclass(frozen=True)
class LabRow:
    name: str
    value: float
    unit: str
    taken_at: str


@dataclass(frozen=True)
class ModalityPayload:
    modality_id: str
    kind: str
    image_ref: str | None = None
    table_rows: tuple[LabRow, ...] | None = None

    def table_text(self) -> str:
        """Tab-separated rendering of lab rows, used as specialist input."""
        if self.table_rows is None:
            return ""
        lines = ["name\tvalue\tunit\ttaken_at"]
        lines += [f"{r.name}\t{r.value!r}\t{r.unit}\t{r.taken_at}" for r in self.table_rows]
        return "\n".join(lines)


@dataclass(frozen=True)
class Demographics:
    sex: str = "other/unknown"
    race: str = ""
    age: int | None = None


@dataclass(frozen=True)
class Encounter:
    encounter_id: str
    timestamp: dt.date | None
    text_docs: tuple[TextDoc, ...] = ()
    modalities: tuple[ModalityPayload, ...] = ()
    labels: dict[str, int] = field(default_factory=dict)
    demographics: Demographics = field(default_factory=Demographics)

    def modality_kinds(self) -> set[str]:
        return {m.kind for m in self.modalities}


@dataclass(frozen=True)
class Dataset(Sequence):
    """Ordered, validated collection of encounters for one task."""

    encounters: tuple[Encounter, ...]
    task: TaskSpec

    def __len__(self) -> int:
        return len(self.encounters)

    def __getitem__(self, i):
        return self.encounters[i]

    def __iter__(self) -> Iterator[Encounter]:
        return iter(self.encounters)

    def ids(self) -> list[str]:
        return [e.encounter_id for e in self.encounters]

    def by_id(self) -> dict[str, Encounter]:
        return {e.encounter_id: e for e in self.encounters}

    def subset(self, encounters: Iterable[Encounter]) -> "Dataset":
        return Dataset(tuple(encounters), self.task)


def normalize_sex(value: Any) -> str:
    v = str(value or "").strip().lower()
    if v in ("f", "female", "woman"):
        return "female"
    if v in ("m", "male", "man"):
        return "male"
    return "other/unknown"


def _require(d: dict, key: str, typ, eid=None, line=None, prefix=""):
    if key not in d:
        raise DatasetError("missing required field", line, eid, prefix + key)
    value = d[key]
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise DatasetError(f"expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}",
                           line, eid, prefix + key)
    return value


def encounter_from_dict(d: dict, task: TaskSpec, line: int | None = None) -> Encounter:
    """Build and validate one encounter from its JSON object."""
    if not isinstance(d, dict):
        raise DatasetError("expected a JSON object", line)
    eid = _require(d, "encounter_id", str, line=line)
    if not eid:
        raise DatasetError("must be nonempty", line, None, "encounter_id")

    ts_raw = d.get("timestamp")
    timestamp = None
    if ts_raw is not None:
        if not isinstance(ts_raw, str):
            raise DatasetError("expected ISO-8601 date string", line, eid, "timestamp")
        try:
            timestamp = dt.date.fromisoformat(ts_raw[:10])
        except ValueError:
            raise DatasetError(f"invalid date {ts_raw!r}", line, eid, "timestamp") from None

    docs = []
    for i, doc in enumerate(d.get("text_docs", [])):
        p = f"text_docs[{i}]."
        if not isinstance(doc, dict):
            raise DatasetError("expected object", line, eid, f"text_docs[{i}]")
        kind = _require(doc, "kind", str, eid, line, p)
        if kind not in TEXT_DOC_KINDS:
            raise DatasetError(f"unknown document kind {kind!r}", line, eid, p + "kind")
        docs.append(TextDoc(kind, _require(doc, "content", str, eid, line, p)))

    modalities = []
    seen_mods: set[str] = set()
    for i, mod in enumerate(d.get("modalities", [])):
        p = f"modalities[{i}]."
        if not isinstance(mod, dict):
            raise DatasetError("expected object", line, eid, f"modalities[{i}]")
        mid = _require(mod, "modality_id", str, eid, line, p)
        if not mid:
            raise DatasetError("must be nonempty", line, eid, p + "modality_id")
        if mid in seen_mods:
            raise DatasetError(f"duplicate modality_id {mid!r}", line, eid, p + "modality_id")
        seen_mods.add(mid)
        kind = _require(mod, "kind", str, eid, line, p)
        if kind not in MODALITY_KINDS:
            raise DatasetError(f"unknown modality kind {kind!r}", line, eid, p + "kind")
        has_img, has_rows = "image_ref" in mod, "table_rows" in mod
        if kind == "image":
            if has_rows or not has_img:
                raise DatasetError("image modality needs image_ref and no table_rows", line, eid, p + "image_ref")
            modalities.append(ModalityPayload(mid, kind, image_ref=_require(mod, "image_ref", str, eid, line, p)))
        else:
            if has_img or not has_rows:
                raise DatasetError("table modality needs table_rows and no image_ref", line, eid, p + "table_rows")
            rows = []
            for j, row in enumerate(_require(mod, "table_rows", list, eid, line, p)):
                rp = f"{p}table_rows[{j}]."
                if not isinstance(row, dict):
                    raise DatasetError("expected object", line, eid, rp[:-1])
                name = _require(row, "name", str, eid, line, rp)
                if not name:
                    raise DatasetError("must be nonempty", line, eid, rp + "name")
                value = _require(row, "value", (int, float), eid, line, rp)
                if value != value or value in (float("inf"), float("-inf")):
                    raise DatasetError("must be finite", line, eid, rp + "value")
                rows.append(LabRow(name, float(value), _require(row, "unit", str, eid, line, rp),
                                   _require(row, "taken_at", str, eid, line, rp)))
            modalities.append(ModalityPayload(mid, kind, table_rows=tuple(rows)))

    labels = {}
    raw_labels = d.get("labels", {})
    if not isinstance(raw_labels, dict):
        raise DatasetError("expected object", line, eid, "labels")
    for key, value in raw_labels.items():
        if key not in task.subtasks:
            raise DatasetError(f"unknown task {key!r}", line, eid, f"labels.{key}")
        try:
            labels[key] = task.resolve_label(key, value)
        except ValueError as exc:
            raise DatasetError(str(exc), line, eid, f"labels.{key}") from None
    if labels and set(labels) != set(task.subtasks):
        missing = sorted(set(task.subtasks) - set(labels))
        raise DatasetError(f"labels missing for {missing}", line, eid, "labels")

    demo = d.get("demographics", {}) or {}
    if not isinstance(demo, dict):
        raise DatasetError("expected object", line, eid, "demographics")
    age = demo.get("age")
    if age is not None:
        if not isinstance(age, int) or isinstance(age, bool) or not 0 <= age <= 130:
            raise DatasetError(f"age must be an integer in [0, 130], got {age!r}", line, eid, "demographics.age")
    demographics = Demographics(normalize_sex(demo.get("sex")), str(demo.get("race") or ""), age)

    return Encounter(eid, timestamp, tuple(docs), tuple(modalities), labels, demographics)


def encounter_to_dict(enc: Encounter) -> dict:
    mods = []
    for m in enc.modalities:
        item: dict[str, Any] = {"modality_id": m.modality_id, "kind": m.kind}
        if m.kind == "image":
            item["image_ref"] = m.image_ref
        else:
            item["table_rows"] = [{"name": r.name, "value": r.value, "unit": r.unit, "taken_at": r.taken_at}
                                  for r in m.table_rows or ()]
        mods.append(item)
    demo: dict[str, Any] = {"sex": enc.demographics.sex, "race": enc.demographics.race}
    if enc.demographics.age is not None:
        demo["age"] = enc.demographics.age
    return {
        "encounter_id": enc.encounter_id,
        "timestamp": enc.timestamp.isoformat() if enc.timestamp else None,
        "text_docs": [{"kind": t.kind, "content": t.content} for t in enc.text_docs],
        "modalities": mods,
        "labels": dict(enc.labels),
        "demographics": demo,
    }


def parse_lines(lines: Iterable[str], task: TaskSpec) -> Dataset:
    encounters = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines, 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
        enc = encounter_from_dict(obj, task, lineno)
        if enc.encounter_id in seen:
            raise DatasetError("duplicate encounter_id", lineno, enc.encounter_id, "encounter_id")
        seen.add(enc.encounter_id)
        encounters.append(enc)
    return Dataset(tuple(encounters), task)


def load_dataset(path: str | Path, task: TaskSpec) -> Dataset:
    """Read a JSONL encounter file, validating every line against ``task``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(encoding="utf-8") as fh:
        return parse_lines(fh, task)


def dumps_encounter(enc: Encounter) -> str:
    return json.dumps(encounter_to_dict(enc), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_dataset(dataset: Iterable[Encounter], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for enc in dataset:
            fh.write(dumps_encounter(enc) + "\n")


def temporal_split(dataset: Dataset, cutoff: dt.date) -> tuple[Dataset, Dataset]:
    """Split into (development, test); the cutoff date itself goes to test."""
    dev, test = [], []
    for enc in dataset:
        if enc.timestamp is None:
            raise DatasetError("missing timestamp", encounter_id=enc.encounter_id, field_name="timestamp")
        (dev if enc.timestamp < cutoff else test).append(enc)
    return dataset.subset(dev), dataset.subset(test)


def map_ais_to_severity(ais: int) -> int:
    """Abbreviated Injury Scale score to severity class (0 Negative, 1 Moderate, 2 Serious)."""
    if isinstance(ais, bool) or not isinstance(ais, int) or not 0 <= ais <= 6:
        raise ValueError(f"AIS must be an integer in [0, 6], got {ais!r}")
    if ais == 0:
        return 0
    if ais <= 2:
        return 1
    return 2
