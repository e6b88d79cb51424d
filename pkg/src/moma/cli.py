"""``moma`` command line: summarize, train, predict, evaluate, ablate.

Exit codes: 0 success, 1 run failure (some encounters failed), 2 configuration
or missing-prerequisite error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import AgentClient, ConfigError
from .cache import SummaryCache
from .config import RunConfig, load_config, version_string
from .data import Dataset, DatasetError, load_dataset, temporal_split
from .evaluation import DEFAULT_METRICS, EvalInput, MetricReport, evaluate, subgroup_report, write_report
from .head import ShapeError, save_head, load_head, train_head
from .metrics import UndefinedMetricError
from .pipeline import (MomaPipeline, PredictionResult, ablate, read_predictions, run_pipeline,
                       safe_name, write_predictions)

log = logging.getLogger("moma")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class MissingPrerequisite(RuntimeError):
    pass


class Session:
    """Config, dataset and pipeline for one command invocation."""

    def __init__(self, cfg: RunConfig, out_dir: Path | None = None, client: AgentClient | None = None,
                 workers: int = 4):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir else cfg.output_dir
        self.workers = workers
        self.client = client or AgentClient(transcript_path=cfg.transcript)
        self.dataset = load_dataset(cfg.dataset, cfg.task)
        self.pipeline = MomaPipeline(cfg.pipeline, cfg.agents, cfg.templates, SummaryCache(cfg.cache_dir),
                                     self.client, cfg.data_root)
        self._calls_at_start = self.client.total_calls

    def split(self) -> tuple[Dataset, Dataset]:
        if self.cfg.split_cutoff is None:
            return self.dataset, self.dataset
        return temporal_split(self.dataset, self.cfg.split_cutoff)

    def aggregated(self, encounter_id: str) -> str:
        path = self.out / "aggregated" / f"{safe_name(encounter_id)}.txt"
        if not path.exists():
            raise MissingPrerequisite(f"aggregated summary {path} not found; run `moma summarize` first")
        return path.read_text(encoding="utf-8")

    def log_run(self, command: str, **extra) -> dict:
        entry = {
            "command": command,
            "config_digest": self.cfg.digest,
            "version": version_string(),
            "seed": self.cfg.seed,
            "backend_calls": self.client.total_calls - self._calls_at_start,
            **extra,
        }
        logs = self.out / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        with (logs / "run_log.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        log.info("%s: %d backend calls", command, entry["backend_calls"])
        return entry


def cmd_summarize(session: Session) -> int:
    result = run_pipeline(session.dataset, session.pipeline, None, session.out, session.workers)
    session.log_run("summarize", encounters=len(session.dataset), failures=len(result.failures))
    print(f"summarized {len(result.traces) - len(result.failures)}/{len(session.dataset)} encounters; "
          f"{session.client.total_calls - session._calls_at_start} backend calls", file=sys.stderr)
    return EXIT_FAILURE if result.failures else EXIT_OK


def _label_matrix(dataset: Dataset) -> np.ndarray:
    task = dataset.task
    rows = []
    for enc in dataset:
        if not enc.labels:
            raise MissingPrerequisite(f"encounter {enc.encounter_id!r} has no labels")
        rows.append([enc.labels[s] for s in task.subtasks])
    return np.asarray(rows, dtype=np.int64)


def cmd_train(session: Session) -> int:
    dev, _ = session.split()
    if len(dev) == 0:
        raise MissingPrerequisite("development split is empty")
    X = np.stack([session.pipeline.embed(session.aggregated(e.encounter_id)) for e in dev])
    Y = _label_matrix(dev)
    head, history = train_head(X, Y, session.cfg.task, session.cfg.train)
    session.out.mkdir(parents=True, exist_ok=True)
    save_head(head, session.out / "head.json", session.cfg.train)
    with (session.out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        for step, value in enumerate(history, 1):
            fh.write(json.dumps({"step": step, "loss": value}) + "\n")
    session.log_run("train", encounters=len(dev), final_loss=history[-1])
    return EXIT_OK


def cmd_predict(session: Session, checkpoint: Path | None = None) -> int:
    checkpoint = checkpoint or session.out / "head.json"
    if not checkpoint.exists():
        raise MissingPrerequisite(f"head checkpoint {checkpoint} not found; run `moma train` first")
    head = load_head(checkpoint)
    results, failures = [], 0
    for enc in session.dataset:
        summary = session.aggregated(enc.encounter_id)
        try:
            results.append(session.pipeline.predict(summary, head, enc.encounter_id))
        except ShapeError:
            raise
        except Exception as exc:
            failures += 1
            log.warning("prediction failed for %s: %s", enc.encounter_id, exc)
    write_predictions(session.out / "predictions.jsonl", results)
    session.log_run("predict", encounters=len(session.dataset), failures=failures)
    return EXIT_FAILURE if failures else EXIT_OK


def _softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def eval_inputs(dataset: Dataset, predictions: list[PredictionResult]) -> dict[str, EvalInput]:
    """Join predictions with labelled encounters; one EvalInput per subtask."""
    by_id = {p.encounter_id: p for p in predictions}
    task = dataset.task
    encs = [e for e in dataset if e.encounter_id in by_id]
    missing = len(dataset) - len(encs)
    if missing:
        log.warning("%d encounters have no prediction and are left out of evaluation", missing)
    if not encs:
        raise MissingPrerequisite("no predictions match the evaluation encounters")
    Y = _label_matrix(dataset.subset(encs))
    out = {}
    for s, name in enumerate(task.subtasks):
        preds = [by_id[e.encounter_id].pred[s] for e in encs]
        if task.kind == "binary":
            scores = np.array([by_id[e.encounter_id].prob for e in encs], dtype=np.float64)
        else:
            scores = np.stack([_softmax(by_id[e.encounter_id].logits[s]) for e in encs])
        out[name] = EvalInput(Y[:, s], preds, task.num_classes[s], scores,
                              [e.demographics.sex for e in encs], [e.demographics.race for e in encs])
    return out


def cmd_evaluate(session: Session, predictions_path: Path | None = None) -> int:
    predictions_path = predictions_path or session.out / "predictions.jsonl"
    if not predictions_path.exists():
        raise MissingPrerequisite(f"predictions file {predictions_path} not found; run `moma predict` first")
    _, test = session.split()
    inputs = eval_inputs(test, read_predictions(predictions_path))
    settings = session.cfg.evaluation
    names = settings.metrics or DEFAULT_METRICS["binary" if session.cfg.task.kind == "binary" else "multiclass"]
    reports: dict[str, MetricReport] = {}
    for subtask, inp in inputs.items():
        try:
            reports[subtask] = subgroup_report(inp, names, session.cfg.bootstrap, settings.axes,
                                               settings.min_subgroup_size)
        except (ValueError, UndefinedMetricError) as exc:
            log.warning("subgroup analysis skipped for %s: %s", subtask, exc)
            valid = []
            for n in names:
                try:
                    evaluate(inp, [n], session.cfg.bootstrap)
                    valid.append(n)
                except (ValueError, UndefinedMetricError):
                    pass
            reports[subtask], _ = evaluate(inp, valid, session.cfg.bootstrap)
            reports[subtask].flags["subgroups"] = f"skipped: {exc}"
    write_report(reports, session.out)
    session.log_run("evaluate", encounters=len(test))
    return EXIT_OK


def cmd_ablate(session: Session, drop: str) -> int:
    spec = ablate(session.cfg.pipeline, drop)
    cfg = replace(session.cfg, pipeline=spec)
    out = session.out.with_name(session.out.name + "-ablated")
    sub = Session(cfg, out, session.client, session.workers)
    code = cmd_summarize(sub)
    if code == EXIT_FAILURE:
        return code
    for step in (cmd_train, cmd_predict, cmd_evaluate):
        code = max(code, step(sub))
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moma", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("summarize", "train", "predict", "evaluate", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--workers", type=int, default=4)
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        if name == "predict":
            sp.add_argument("--checkpoint", type=Path, default=None)
        if name == "evaluate":
            sp.add_argument("--predictions", type=Path, default=None)
        if name == "ablate":
            sp.add_argument("--drop", required=True, help="modality kind to remove, e.g. image")
    return p


def run(argv: list[str] | None = None, client: AgentClient | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        session = Session(cfg, args.out, client, max(1, args.workers))
        if args.command == "summarize":
            return cmd_summarize(session)
        if args.command == "train":
            return cmd_train(session)
        if args.command == "predict":
            return cmd_predict(session, args.checkpoint)
        if args.command == "evaluate":
            return cmd_evaluate(session, args.predictions)
        return cmd_ablate(session, args.drop)
    except (ConfigError, DatasetError, MissingPrerequisite, ShapeError, FileNotFoundError) as exc:
        print(f"moma {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # e.g. ablating a modality kind that is not enabled
        print(f"moma {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
