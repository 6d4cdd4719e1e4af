"""Accuracy metrics, multi-seed aggregation, and report serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


def top_k_accuracy(logits, labels, class_ids: Sequence[int], k: int = 1) -> float:
    """Percentage of samples whose label is among the k largest logits.

    Equal logits rank by column order (earlier class first).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_cls = logits.shape[1]
    if len(class_ids) != n_cls:
        raise EvaluationError("class_ids must align with logit columns")
    if not 1 <= k <= n_cls:
        raise EvaluationError(f"k={k} outside [1, {n_cls}]")
    col = {int(c): i for i, c in enumerate(class_ids)}
    try:
        target = np.array([col[int(y)] for y in labels], dtype=np.int64)
    except KeyError as err:
        raise EvaluationError(f"label {err.args[0]} is not a learned class") from None
    if len(target) == 0:
        return 0.0
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hit = (order == target[:, None]).any(1)
    return float(hit.mean() * 100.0)


@dataclass
class RoundMetrics:
    round: int
    classes_seen: int
    top1: float
    top5: float


@dataclass
class SeedMetrics:
    seed: int
    rounds: list[RoundMetrics]
    avg: float = 0.0
    last: float = 0.0

    def __post_init__(self):
        self.rounds = [r if isinstance(r, RoundMetrics) else RoundMetrics(**r) for r in self.rounds]
        if self.rounds:
            self.avg = float(np.mean([r.top1 for r in self.rounds]))
            self.last = float(self.rounds[-1].top1)


@dataclass
class MetricsReport:
    seeds: list[SeedMetrics]
    config_hash: str = ""
    version: int = SCHEMA_VERSION
    mean_avg: float = 0.0
    std_avg: float = 0.0
    mean_last: float = 0.0
    std_last: float = 0.0
    avg_includes_initial_round: bool = True
    std_kind: str = "population"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["seeds"] = [SeedMetrics(s["seed"], s["rounds"]) for s in d["seeds"]]
        report = cls(**d)
        return report


def aggregate(per_seed: dict[int, list[RoundMetrics]], config_hash: str = "") -> MetricsReport:
    """Avg/Last per seed, then mean and population std across seeds."""
    if not per_seed:
        raise EvaluationError("no seeds to aggregate")
    lengths = {len(v) for v in per_seed.values()}
    if len(lengths) != 1 or 0 in lengths:
        raise EvaluationError(f"ragged or empty round lists across seeds: {sorted(lengths)}")
    seeds = [SeedMetrics(s, list(r)) for s, r in sorted(per_seed.items())]
    avgs = np.array([s.avg for s in seeds])
    lasts = np.array([s.last for s in seeds])
    return MetricsReport(
        seeds=seeds,
        config_hash=config_hash,
        mean_avg=float(avgs.mean()),
        std_avg=float(avgs.std()),
        mean_last=float(lasts.mean()),
        std_last=float(lasts.std()),
    )


def emit_report(report: MetricsReport, out_dir: str | Path, formats=("json", "csv", "tsv")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "metrics.json"
        p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        written.append(p)
    if "csv" in formats:
        p = out / "metrics.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "round", "classes_seen", "top1", "top5"])
            for s in report.seeds:
                for r in s.rounds:
                    w.writerow([s.seed, r.round, r.classes_seen, f"{r.top1:.4f}", f"{r.top5:.4f}"])
        written.append(p)
    if "tsv" in formats:
        # mean curve over seeds; rounds line up because aggregate rejects ragged input
        p = out / "curve.tsv"
        lines = ["classes_seen\ttop1_mean\ttop1_std"]
        for i, r in enumerate(report.seeds[0].rounds):
            ys = np.array([s.rounds[i].top1 for s in report.seeds])
            lines.append(f"{r.classes_seen}\t{ys.mean():.4f}\t{ys.std():.4f}")
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
    return written


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
