"""Full pipeline vs. image-ablated pipeline on the planted-signal corpus.

The class label is decodable only from the image caption, so dropping the
image specialist should leave the head at the majority-class rate.

    python scripts/synthetic_ablation.py --root /tmp/ablation --n 600 --seed 0
"""

import argparse
import datetime as dt
import json
import sys
from pathlib import Path

import numpy as np

from moma.cli import EXIT_OK, run
from moma.config import load_config
from moma.data import SEVERITY_CLASSES, load_dataset, temporal_split
from moma.evaluation import Estimate, results_table
from moma.synthetic import DEFAULT_CUTOFF, make_planted_corpus


def estimates(out: Path) -> dict[str, Estimate]:
    metrics = json.loads((out / "report.json").read_text())["chest"]["metrics"]
    return {k: Estimate(v["point"], v["lo"], v["hi"]) for k, v in metrics.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("runs/synthetic_ablation"))
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args(argv)

    cfg = make_planted_corpus(args.root, n=args.n, seed=args.seed)
    common = ["--config", str(cfg), "--workers", str(args.workers)]
    for cmd in ("summarize", "train", "predict", "evaluate"):
        if run([cmd, *common]) != EXIT_OK:
            sys.exit(f"{cmd} failed")
    if run(["ablate", *common, "--drop", "image"]) != EXIT_OK:
        sys.exit("ablate failed")

    dev, test = temporal_split(load_dataset(args.root / "dataset.jsonl", load_config(cfg).task),
                               dt.date.fromisoformat(DEFAULT_CUTOFF))
    majority = int(np.bincount([e.labels["chest"] for e in dev], minlength=3).argmax())
    base = float(np.mean([e.labels["chest"] == majority for e in test]))

    rows = {"full pipeline": estimates(args.root / "out"),
            "image ablated": estimates(args.root / "out-ablated"),
            f"majority ({SEVERITY_CLASSES[majority]})": {"micro_f1": Estimate(base, None, None)}}
    print(f"dev n={len(dev)}  test n={len(test)}")
    print(results_table(rows, ["micro_f1", "macro_f1", "macro_auroc"]))


if __name__ == "__main__":
    main()
