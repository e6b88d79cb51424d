"""Run configuration: one JSON document wiring data, agents, pipeline, training and evaluation."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .agents import AgentConfig, ConfigError, known_mock
from .data import TaskSpec
from .evaluation import BootstrapConfig
from .head import TrainConfig
from .pipeline import PipelineSpec
from .prompts import PromptTemplate, TemplateError, load_template_file

TOP_LEVEL_KEYS = {"dataset", "task", "agents", "pipeline", "templates", "train", "bootstrap", "evaluation",
                  "split", "cache_dir", "output_dir", "seed", "transcript"}


@dataclass(frozen=True)
class EvalSettings:
    axes: tuple[str, ...] = ("sex", "race")
    min_subgroup_size: int = 30
    metrics: tuple[str, ...] | None = None


@dataclass
class RunConfig:
    dataset: Path
    task: TaskSpec
    pipeline: PipelineSpec
    agents: dict[str, AgentConfig]
    templates: dict[str, PromptTemplate]
    train: TrainConfig
    bootstrap: BootstrapConfig
    evaluation: EvalSettings
    cache_dir: Path
    output_dir: Path
    seed: int
    split_cutoff: dt.date | None = None
    transcript: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def data_root(self) -> Path:
        return self.dataset.parent


def _only_known(name: str, d: dict, cls) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    return d


def parse_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    """Validate a config document; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    for key in ("dataset", "task", "agents", "pipeline"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")

    def path(p) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    seed = int(raw.get("seed", 0))
    try:
        task = TaskSpec.from_dict(raw["task"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from None
    agents = {}
    for agent_id, spec in raw["agents"].items():
        try:
            agents[agent_id] = AgentConfig.from_dict(agent_id, spec)
        except TypeError as exc:
            raise ConfigError(f"agent {agent_id!r}: {exc}") from None
        cfg = agents[agent_id]
        if cfg.backend == "mock" and not known_mock(cfg):
            raise ConfigError(f"agent {agent_id!r}: no mock model named {cfg.model_name!r}")
    pipeline = PipelineSpec.from_dict(raw["pipeline"])
    missing = sorted(pipeline.agent_ids() - set(agents))
    if missing:
        raise ConfigError(f"pipeline references undefined agents {missing}")

    templates = {}
    for tid, tpath in (raw.get("templates") or {}).items():
        try:
            tpl = load_template_file(path(tpath))
        except (OSError, TemplateError) as exc:
            raise ConfigError(f"template {tid!r}: {exc}") from None
        if tpl.template_id != tid:
            raise ConfigError(f"template file {tpath} declares id {tpl.template_id!r}, config says {tid!r}")
        templates[tid] = tpl

    try:
        train = TrainConfig(**_only_known("train", {"seed": seed, **(raw.get("train") or {})}, TrainConfig))
        boot = BootstrapConfig(**_only_known("bootstrap", {"seed": seed, **(raw.get("bootstrap") or {})},
                                             BootstrapConfig))
        ev = dict(raw.get("evaluation") or {})
        _only_known("evaluation", ev, EvalSettings)
        evaluation = EvalSettings(tuple(ev.get("axes", ("sex", "race"))), int(ev.get("min_subgroup_size", 30)),
                                  tuple(ev["metrics"]) if ev.get("metrics") else None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if train.loss_kind is not None and train.loss_kind != task.default_loss:
        raise ConfigError(f"train.loss_kind {train.loss_kind!r} does not fit a {task.kind} task")

    cutoff = None
    if raw.get("split"):
        try:
            cutoff = dt.date.fromisoformat(raw["split"]["cutoff"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"split.cutoff must be an ISO date: {exc}") from None

    return RunConfig(
        dataset=path(raw["dataset"]),
        task=task,
        pipeline=pipeline,
        agents=agents,
        templates=templates,
        train=train,
        bootstrap=boot,
        evaluation=evaluation,
        cache_dir=path(raw.get("cache_dir", "cache")),
        output_dir=path(raw.get("output_dir", "out")),
        seed=seed,
        split_cutoff=cutoff,
        transcript=path(raw["transcript"]) if raw.get("transcript") else None,
        raw=raw,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(raw, path.parent)


def version_string() -> str:
    """Package version, plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
