"""Prompt templates, guideline-driven prompt builders and built-in presets.

Placeholders use ``{{name}}``. Substitution is a single pass: text bound to a
placeholder is inserted literally and never re-expanded, so clinical text that
happens to contain braces cannot inject new placeholders.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from . import _preset_texts as texts

PLACEHOLDER = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")

PHI_CLAUSE = "Do not include any Protected Health Information (PHI) in your response."


class TemplateError(ValueError):
    pass


def placeholders_in(body: str) -> frozenset[str]:
    return frozenset(PLACEHOLDER.findall(body))


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str] | None = None

    def __post_init__(self):
        found = placeholders_in(self.body)
        declared = found if self.required_placeholders is None else frozenset(self.required_placeholders)
        if declared != found:
            raise TemplateError(
                f"template {self.template_id!r}: declared placeholders {sorted(declared)} "
                f"do not match body placeholders {sorted(found)}")
        object.__setattr__(self, "required_placeholders", declared)


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder; bindings must match the placeholders exactly."""
    missing = template.required_placeholders - set(bindings)
    if missing:
        raise TemplateError(f"template {template.template_id!r}: missing binding(s) {sorted(missing)}")
    extra = set(bindings) - template.required_placeholders
    if extra:
        raise TemplateError(f"template {template.template_id!r}: unexpected binding(s) {sorted(extra)}")
    return PLACEHOLDER.sub(lambda m: bindings[m.group(1)], template.body)


# -- guidelines ------------------------------------------------------------

ROLE_STEP_COUNTS = {"text_specialist": 6, "nontext_specialist": 3, "aggregator": 4}
ROLE_INPUT = {
    "text_specialist": "clinical_text",
    "nontext_specialist": "modality_data",
    "aggregator": "clinical_and_summaries",
}


@dataclass(frozen=True)
class GuidelineSpec:
    role: str
    steps: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if self.role not in ROLE_STEP_COUNTS:
            raise TemplateError(f"unknown guideline role {self.role!r}")
        object.__setattr__(self, "steps", tuple((str(t), str(i)) for t, i in self.steps))


TEXT_SPECIALIST_GUIDELINE = GuidelineSpec("text_specialist", (
    ("Identify Relevant Points",
     "Read the whole note and mark every statement that bears directly on the prediction target."),
    ("Apply Specified Criteria",
     "Check the marked statements against the stated thresholds or diagnostic criteria."),
    ("Incorporate Additional Patient Attributes",
     "Note coexisting conditions or other factors that could explain or overlap with the findings."),
    ("Maintain Clarity and Flow",
     "Write one coherent summary: definitive evidence first, then uncertain items, then confounders."),
    ("Professional Language and Confidentiality",
     "Use objective clinical terminology, leave out protected health information and do not speculate."),
    ("Final Structured Review",
     "Close with confirmed evidence, partial or absent findings and relevant confounders; "
     "if nothing meets the criteria, say explicitly that no direct evidence was found."),
))

NONTEXT_SPECIALIST_GUIDELINE = GuidelineSpec("nontext_specialist", (
    ("Identify Relevant Indicators",
     "Look for direct measurements or findings tied to the prediction target."),
    ("Evaluate Indirect Evidence",
     "Check secondary measurements that point to the target indirectly and say whether they do."),
    ("Summarize Concisely",
     "Give a short overview of the most pertinent findings without speculation."),
))

AGGREGATOR_GUIDELINE = GuidelineSpec("aggregator", (
    ("Gather Key Points from Agent-Generated Summaries",
     "Collect the relevant findings from each summary: clinical observations, lab results, imaging results."),
    ("Handle Contradicted Information",
     "Where sources contradict each other, machine-generated summaries must not override "
     "confirmed evidence from the clinical notes."),
    ("Exclude Confounding Information",
     "Drop findings that have an alternative cause unrelated to the prediction target."),
    ("Create a Unified Summary",
     "Integrate the remaining findings from all modalities into one summary for the prediction task."),
))

GUIDELINES = {g.role: g for g in (TEXT_SPECIALIST_GUIDELINE, NONTEXT_SPECIALIST_GUIDELINE, AGGREGATOR_GUIDELINE)}


def build_from_guideline(spec: GuidelineSpec, task_context: Mapping[str, object] | None = None) -> PromptTemplate:
    """Assemble a prompt whose sections follow the guideline's step order.

    Recognised context keys: ``persona``, ``focus``, ``template_id`` and
    ``notes`` (a mapping from step title to extra task-specific text).
    The input placeholder depends on the role (see ``ROLE_INPUT``).
    """
    expected = ROLE_STEP_COUNTS[spec.role]
    if len(spec.steps) != expected:
        raise TemplateError(f"{spec.role} guideline needs {expected} steps, got {len(spec.steps)}")
    ctx = dict(task_context or {})
    notes = dict(ctx.get("notes") or {})
    for value in [v for k, v in ctx.items() if k != "notes"] + list(notes.values()):
        if "{{" in str(value):
            raise TemplateError("task context may not contain placeholder markers")

    lines = []
    persona = ctx.get("persona")
    focus = ctx.get("focus")
    if persona:
        lines.append(f"You are {persona}.")
    if focus:
        lines.append(f"Your task concerns {focus}.")
    if lines:
        lines.append("")
    lines.append("Follow these steps:")
    lines.append("")
    for i, (title, instruction) in enumerate(spec.steps, 1):
        lines.append(f"{i}. {title}")
        lines.append(f"   {instruction}")
        if title in notes:
            lines.append(f"   {notes[title]}")
        lines.append("")
    if spec.role != "aggregator":
        lines.append(PHI_CLAUSE)
        lines.append("")
    lines.append("Input:")
    lines.append("{{" + ROLE_INPUT[spec.role] + "}}")
    template_id = str(ctx.get("template_id") or f"{spec.role}_guideline")
    return PromptTemplate(template_id, "\n".join(lines))


# -- presets ---------------------------------------------------------------

_PRESET_SOURCES = {
    "chest_aggregator": (texts.CHEST_AGGREGATOR, "clinical_and_summaries"),
    "multitask_aggregator": (texts.MULTITASK_AGGREGATOR, "clinical_and_summaries"),
    "alcohol_lab_specialist": (texts.ALCOHOL_LAB_SPECIALIST, "modality_data"),
    "alcohol_aggregator": (texts.ALCOHOL_AGGREGATOR, "clinical_and_summaries"),
    "llava_summarize_multitask": (texts.LLAVA_SUMMARIZE_MULTITASK, "clinical_notes"),
    "llava_summarize_chest": (texts.LLAVA_SUMMARIZE_CHEST, "clinical_notes"),
    "llava_classify_chest": (texts.LLAVA_CLASSIFY_CHEST, "note_summary"),
    "llava_classify_multitask": (texts.LLAVA_CLASSIFY_MULTITASK, "note_summary"),
}

# The chest radiograph specialist runs without instructions; the image is the whole request.
EMPTY_PRESET = "cxr_specialist"

PRESET_NAMES = tuple(_PRESET_SOURCES) + (EMPTY_PRESET,)


def preset_instructions(name: str) -> str:
    """The instruction text of a preset without its input placeholder."""
    if name == EMPTY_PRESET:
        return ""
    try:
        return _PRESET_SOURCES[name][0]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}") from None


def preset(name: str) -> PromptTemplate:
    """Built-in template: instructions, a blank line, then the input placeholder."""
    if name == EMPTY_PRESET:
        return PromptTemplate(name, "")
    body = preset_instructions(name)
    return PromptTemplate(name, f"{body}\n\n{{{{{_PRESET_SOURCES[name][1]}}}}}")


# -- template files ----------------------------------------------------------

def parse_template_file(text: str) -> PromptTemplate:
    """Parse a template file with a ``---`` delimited header.

    Header keys: ``template_id`` (required) and ``placeholders`` (comma
    separated, optional; checked against the body when given).
    """
    if not text.startswith("---\n"):
        raise TemplateError("template file must start with a '---' header")
    try:
        header, body = text[4:].split("\n---\n", 1)
    except ValueError:
        raise TemplateError("unterminated template header") from None
    meta = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise TemplateError(f"bad header line {line!r}")
        meta[key.strip()] = value.strip()
    if "template_id" not in meta:
        raise TemplateError("template header needs template_id")
    declared = None
    if "placeholders" in meta:
        declared = frozenset(p.strip() for p in meta["placeholders"].split(",") if p.strip())
    if body.endswith("\n"):
        body = body[:-1]
    return PromptTemplate(meta["template_id"], body, declared)


def load_template_file(path: str | Path) -> PromptTemplate:
    return parse_template_file(Path(path).read_text(encoding="utf-8"))


def format_template_file(template: PromptTemplate) -> str:
    names = ", ".join(sorted(template.required_placeholders))
    return f"---\ntemplate_id: {template.template_id}\nplaceholders: {names}\n---\n{template.body}\n"
