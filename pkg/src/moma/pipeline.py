"""Specialist -> aggregator -> predictor composition over encounters."""

from __future__ import annotations

import json
import logging
import re
import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import prompts
from .agents import AgentClient, AgentConfig, AgentRequest, ConfigError
from .cache import SummaryCache, cache_key, canonical_json, check_record, file_digest, new_record
from .data import Dataset, Encounter, ModalityPayload
from .head import LinearHead, ShapeError, forward, predict_from_logits, split_logits

log = logging.getLogger(__name__)

SUMMARY_HEADER = "[SUMMARY:{}]\n"
AGGREGATOR_INPUT = "clinical_and_summaries"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentBinding:
    agent_id: str
    template_id: str


@dataclass(frozen=True)
class SpecialistRule:
    """Routes modalities to a specialist by kind or by a glob over modality_id."""

    agent_id: str
    template_id: str
    kind: str | None = None
    pattern: str | None = None

    def __post_init__(self):
        if (self.kind is None) == (self.pattern is None):
            raise ConfigError("specialist rule needs exactly one of kind / pattern")

    def matches(self, mod: ModalityPayload) -> bool:
        if self.kind is not None:
            return mod.kind == self.kind
        return fnmatchcase(mod.modality_id, self.pattern)


@dataclass(frozen=True)
class PredictorBinding:
    agent_id: str
    head_id: str = "head"


@dataclass(frozen=True)
class PipelineSpec:
    aggregator: AgentBinding
    predictor: PredictorBinding
    specialists: tuple[SpecialistRule, ...] = ()
    text_specialist: AgentBinding | None = None
    separator: str = "\n\n"
    modality_mask: frozenset[str] = frozenset({"image", "table"})

    def __post_init__(self):
        object.__setattr__(self, "specialists", tuple(self.specialists))
        object.__setattr__(self, "modality_mask", frozenset(self.modality_mask))

    def enabled(self, mod: ModalityPayload) -> bool:
        return mod.kind in self.modality_mask or mod.modality_id in self.modality_mask

    def agent_ids(self) -> set[str]:
        ids = {self.aggregator.agent_id, self.predictor.agent_id}
        ids |= {r.agent_id for r in self.specialists}
        if self.text_specialist:
            ids.add(self.text_specialist.agent_id)
        return ids

    def template_ids(self) -> set[str]:
        ids = {self.aggregator.template_id} | {r.template_id for r in self.specialists}
        if self.text_specialist:
            ids.add(self.text_specialist.template_id)
        return ids

    def to_dict(self) -> dict:
        return {
            "aggregator": vars(self.aggregator),
            "predictor": vars(self.predictor),
            "specialists": [{k: v for k, v in vars(r).items() if v is not None} for r in self.specialists],
            "text_specialist": vars(self.text_specialist) if self.text_specialist else None,
            "separator": self.separator,
            "modality_mask": sorted(self.modality_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        try:
            text_spec = d.get("text_specialist")
            return cls(
                aggregator=AgentBinding(**d["aggregator"]),
                predictor=PredictorBinding(**d["predictor"]),
                specialists=tuple(SpecialistRule(**r) for r in d.get("specialists", [])),
                text_specialist=AgentBinding(**text_spec) if text_spec else None,
                separator=d.get("separator", "\n\n"),
                modality_mask=frozenset(d.get("modality_mask", ["image", "table"])),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid pipeline spec: {exc}") from None


def ablate(spec: PipelineSpec, drop: str) -> PipelineSpec:
    """Same pipeline with one modality kind (or id) removed from the mask."""
    if drop not in spec.modality_mask:
        raise ValueError(f"{drop!r} is not enabled in modality mask {sorted(spec.modality_mask)}")
    return replace(spec, modality_mask=spec.modality_mask - {drop})


@dataclass(frozen=True)
class Span:
    source: str
    start: int
    end: int


@dataclass(frozen=True)
class ComposedInput:
    m_text: str
    parts: tuple[Span, ...]

    def reconstruct(self) -> str:
        return "".join(self.m_text[p.start:p.end] for p in self.parts)


def compose_input(enc: Encounter, summaries: Sequence[tuple[str, str]], spec: PipelineSpec,
                  clinical_text: str | None = None) -> ComposedInput:
    """Concatenate clinical text with headed specialist summaries.

    Text documents are joined with the separator, unless ``clinical_text``
    (a text-specialist output) replaces them. Each summary contributes
    separator + ``[SUMMARY:<modality_id>]`` + newline + text. Spans cover the
    result exactly, in order.
    """
    pieces: list[tuple[str, str]] = []
    if clinical_text is not None:
        pieces.append(("text_specialist", clinical_text))
    else:
        for i, doc in enumerate(enc.text_docs):
            pieces.append((f"text:{i}:{doc.kind}", (spec.separator if i else "") + doc.content))
    for modality_id, text in summaries:
        pieces.append((f"summary:{modality_id}", spec.separator + SUMMARY_HEADER.format(modality_id) + text))
    parts, pos = [], 0
    for source, piece in pieces:
        parts.append(Span(source, pos, pos + len(piece)))
        pos += len(piece)
    return ComposedInput("".join(p for _, p in pieces), tuple(parts))


@dataclass(frozen=True)
class PredictionResult:
    encounter_id: str
    logits: list[list[float]]
    pred: list[int]
    prob: float | None = None

    def to_dict(self) -> dict:
        d = {"encounter_id": self.encounter_id, "logits": self.logits, "pred": self.pred}
        if self.prob is not None:
            d["prob"] = self.prob
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionResult":
        return cls(d["encounter_id"], d["logits"], d["pred"], d.get("prob"))


@dataclass
class EncounterTrace:
    """Everything produced for one encounter; the transparency artifacts."""

    encounter_id: str
    specialist_records: list[tuple[str, dict]] = field(default_factory=list)
    composed: ComposedInput | None = None
    aggregate_record: dict | None = None
    prediction: PredictionResult | None = None

    @property
    def aggregated(self) -> str | None:
        return self.aggregate_record["text"] if self.aggregate_record else None


@dataclass(frozen=True)
class Failure:
    encounter_id: str
    stage: str
    error: str


@dataclass
class RunResult:
    traces: list[EncounterTrace]
    failures: list[Failure]

    @property
    def results(self) -> list[PredictionResult]:
        return [t.prediction for t in self.traces if t.prediction is not None]

    @property
    def ok(self) -> bool:
        return not self.failures


class MomaPipeline:
    """Binds a PipelineSpec to concrete agents, templates, a cache and a client."""

    def __init__(self, spec: PipelineSpec, agents: Mapping[str, AgentConfig],
                 templates: Mapping[str, prompts.PromptTemplate] | None = None,
                 cache: SummaryCache | None = None, client: AgentClient | None = None,
                 data_root: str | Path | None = None):
        self.spec = spec
        self.agents = dict(agents)
        self.templates = dict(templates or {})
        self.cache = cache if cache is not None else SummaryCache()
        self.client = client if client is not None else AgentClient()
        self.data_root = Path(data_root) if data_root is not None else None
        self.validate()

    def validate(self) -> None:
        missing = sorted(self.spec.agent_ids() - set(self.agents))
        if missing:
            raise ConfigError(f"pipeline references unknown agents {missing}")
        for tid in self.spec.template_ids():
            self.template(tid)
        agg = self.template(self.spec.aggregator.template_id)
        if agg.required_placeholders != {AGGREGATOR_INPUT}:
            raise ConfigError(f"aggregator template {agg.template_id!r} must have exactly the "
                              f"{{{{{AGGREGATOR_INPUT}}}}} placeholder")

    def template(self, template_id: str) -> prompts.PromptTemplate:
        if template_id in self.templates:
            return self.templates[template_id]
        try:
            return prompts.preset(template_id)
        except KeyError:
            raise ConfigError(f"unknown template {template_id!r}") from None

    def with_spec(self, spec: PipelineSpec) -> "MomaPipeline":
        return MomaPipeline(spec, self.agents, self.templates, self.cache, self.client, self.data_root)

    # -- agent calls ---------------------------------------------------------

    def _resolve(self, ref: str) -> str:
        p = Path(ref)
        if not p.is_absolute() and self.data_root is not None:
            p = self.data_root / p
        return str(p)

    def _generate(self, agent_id: str, prompt: str, attachments: Sequence[str], source: dict) -> dict:
        cfg = self.agents[agent_id]
        digests = [file_digest(a) for a in attachments]
        key = cache_key(cfg, prompt, digests)

        def produce():
            resp = self.client.complete(cfg, AgentRequest(prompt, tuple(attachments)))
            return new_record(key, cfg, prompt, source, text=resp.text)

        record, created = self.cache.get_or_create(key, produce)
        if not created:
            check_record(record, cfg, prompt)
        return record

    def _render(self, template_id: str, available: Mapping[str, str]) -> str:
        tpl = self.template(template_id)
        unknown = tpl.required_placeholders - set(available)
        if unknown:
            raise ConfigError(f"template {template_id!r} needs bindings {sorted(unknown)}; "
                              f"available here: {sorted(available)}")
        return prompts.render(tpl, {k: available[k] for k in tpl.required_placeholders})

    def _match(self, mod: ModalityPayload) -> SpecialistRule:
        hits = [r for r in self.spec.specialists if r.matches(mod)]
        if len(hits) != 1:
            what = "no specialist rule" if not hits else f"{len(hits)} specialist rules"
            raise PipelineError(f"modality {mod.modality_id!r} ({mod.kind}) matches {what}")
        return hits[0]

    def specialist_records(self, enc: Encounter) -> list[tuple[str, dict]]:
        """(modality_id, record) per enabled modality, in specialist-rule order."""
        jobs = []
        for mod in (m for m in enc.modalities if self.spec.enabled(m)):
            rule = self._match(mod)
            order = self.spec.specialists.index(rule)
            if mod.kind == "image":
                attachments = [self._resolve(mod.image_ref)]
                data = mod.image_ref
            else:
                attachments = []
                data = mod.table_text()
            prompt = self._render(rule.template_id, {"modality_id": mod.modality_id, "modality_data": data})
            jobs.append((order, mod.modality_id, rule.agent_id, prompt, attachments))
        jobs.sort(key=lambda j: j[0])

        def run(job):
            _, mid, agent_id, prompt, attachments = job
            try:
                return mid, self._generate(agent_id, prompt, attachments, {"agent_id": agent_id, "modality_id": mid})
            except Exception as exc:
                raise PipelineError(f"specialist for modality {mid!r} failed: {exc}") from exc

        if len(jobs) <= 1:
            return [run(j) for j in jobs]
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            return list(pool.map(run, jobs))

    def run_specialists(self, enc: Encounter) -> list[tuple[str, str]]:
        return [(mid, rec["text"]) for mid, rec in self.specialist_records(enc)]

    def compose(self, enc: Encounter, summaries: Sequence[tuple[str, str]]) -> ComposedInput:
        clinical = None
        ts = self.spec.text_specialist
        if ts is not None:
            joined = self.spec.separator.join(d.content for d in enc.text_docs)
            prompt = self._render(ts.template_id, {"clinical_text": joined})
            clinical = self._generate(ts.agent_id, prompt, [], {"agent_id": ts.agent_id, "modality_id": "text"})["text"]
        return compose_input(enc, summaries, self.spec, clinical)

    def aggregate_record(self, composed: ComposedInput) -> dict:
        agg = self.spec.aggregator
        prompt = self._render(agg.template_id, {AGGREGATOR_INPUT: composed.m_text})
        return self._generate(agg.agent_id, prompt, [], {"agent_id": agg.agent_id, "modality_id": "aggregate"})

    def aggregate(self, composed: ComposedInput) -> str:
        return self.aggregate_record(composed)["text"]

    def embed(self, summary: str, expected_dim: int | None = None) -> np.ndarray:
        cfg = self.agents[self.spec.predictor.agent_id]
        key = cache_key(cfg, summary, route="embedding")

        def produce():
            resp = self.client.embed_last_hidden(cfg, summary, expected_dim)
            return new_record(key, cfg, summary, {"agent_id": cfg.agent_id, "modality_id": "embedding"},
                              vector=list(resp.vector))

        record, created = self.cache.get_or_create(key, produce)
        if not created:
            check_record(record, cfg, summary)
        vec = np.asarray(record["vector"], dtype=np.float64)
        if expected_dim is not None and vec.shape != (expected_dim,):
            raise ShapeError(f"embedding dim {vec.shape[0]} != head input dim {expected_dim}")
        return vec

    def predict(self, summary: str, head: LinearHead, encounter_id: str = "") -> PredictionResult:
        vec = self.embed(summary, head.input_dim)
        logits = forward(head, vec)
        pred, prob = predict_from_logits(head, logits)
        return PredictionResult(encounter_id, split_logits(head, logits), pred, prob)

    # -- batch -------------------------------------------------------------

    def process(self, enc: Encounter, head: LinearHead | None = None) -> tuple[EncounterTrace, Failure | None]:
        trace = EncounterTrace(enc.encounter_id)
        stage = "specialists"
        try:
            trace.specialist_records = self.specialist_records(enc)
            stage = "compose"
            summaries = [(mid, rec["text"]) for mid, rec in trace.specialist_records]
            trace.composed = self.compose(enc, summaries)
            stage = "aggregate"
            trace.aggregate_record = self.aggregate_record(trace.composed)
            if head is not None:
                stage = "predict"
                trace.prediction = self.predict(trace.aggregated, head, enc.encounter_id)
        except Exception as exc:
            log.warning("encounter %s failed at %s: %s", enc.encounter_id, stage, exc)
            return trace, Failure(enc.encounter_id, stage, f"{type(exc).__name__}: {exc}")
        return trace, None

    def run(self, dataset: Sequence[Encounter], head: LinearHead | None = None, workers: int = 4) -> RunResult:
        """Process every encounter; failures are collected and the batch continues."""
        encounters = list(dataset)
        if workers <= 1 or len(encounters) <= 1:
            outcomes = [self.process(e, head) for e in encounters]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(lambda e: self.process(e, head), encounters))
        return RunResult([t for t, _ in outcomes], [f for _, f in outcomes if f is not None])


def run_pipeline(dataset: Dataset, pipeline: MomaPipeline, head: LinearHead | None = None,
                 out_dir: str | Path | None = None, workers: int = 4) -> RunResult:
    result = pipeline.run(dataset, head, workers)
    if out_dir is not None:
        write_bundle(out_dir, result)
    return result


# -- artifact bundle -----------------------------------------------------------

_SAFE = re.compile(r"^[A-Za-z0-9._-]+$")
_BUNDLE_FIELDS = ("cache_key", "agent_id", "model_name", "sampling", "prompt_sha256", "backend_fingerprint", "text")


def safe_name(encounter_id: str) -> str:
    if _SAFE.match(encounter_id) and encounter_id not in (".", ".."):
        return encounter_id
    return urllib.parse.quote(encounter_id, safe="")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def bundle_record(record: dict) -> dict:
    # Wall-clock and first-producer fields stay in the cache; bundles must be reproducible.
    return {k: record[k] for k in _BUNDLE_FIELDS}


def write_bundle(out_dir: str | Path, result: RunResult, predictions: bool | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for trace in result.traces:
        name = safe_name(trace.encounter_id)
        records = [rec for _, rec in trace.specialist_records]
        if trace.aggregate_record:
            records.append(trace.aggregate_record)
        for rec in records:
            _write(out / "summaries" / f"{rec['cache_key']}.json", canonical_json(bundle_record(rec)) + "\n")
        if trace.composed is not None:
            _write(out / "composed" / f"{name}.txt", trace.composed.m_text)
        if trace.aggregate_record is not None:
            _write(out / "aggregated" / f"{name}.txt", trace.aggregated)
        manifest.append({
            "encounter_id": trace.encounter_id,
            "specialists": [{"modality_id": mid, "cache_key": rec["cache_key"]} for mid, rec in trace.specialist_records],
            "parts": [[p.source, p.start, p.end] for p in trace.composed.parts] if trace.composed else None,
            "aggregate_key": trace.aggregate_record["cache_key"] if trace.aggregate_record else None,
        })
    _write(out / "manifest.jsonl", "".join(canonical_json(m) + "\n" for m in manifest))
    _write(out / "failures.jsonl", "".join(canonical_json(vars(f)) + "\n" for f in result.failures))
    if predictions or (predictions is None and any(t.prediction for t in result.traces)):
        write_predictions(out / "predictions.jsonl", result.results)


def write_predictions(path: str | Path, results: Sequence[PredictionResult]) -> None:
    _write(Path(path), "".join(json.dumps(r.to_dict()) + "\n" for r in results))


def read_predictions(path: str | Path) -> list[PredictionResult]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_manifest(bundle: str | Path) -> list[dict]:
    with open(Path(bundle) / "manifest.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
