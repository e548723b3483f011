"""Wall-clock cost measurement and the tabular report bundle.

Timing uses a monotonic clock. Inference latency is measured over the
whole test set per trial (after one discarded warm-up pass) and reported
as mean and sample standard deviation of seconds per sample, reflecting
a serial gateway-style inference path.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import BenchError, ConsistencyError
from .explain import ExplainQualityReport, interpretability_rank
from .metrics import ConfusionMatrix, MetricsReport, RocResult
from .optim import TrainHistory

REPORT_SCHEMA_VERSION = 1


@dataclass
class BenchReport:
    """Training and inference cost for one model."""

    model: str
    train_wall_time_s: float
    inference_mean_s: float
    inference_std_s: float
    trials: int
    sample_count: int
    environment: str = ""

    def __post_init__(self) -> None:
        if self.train_wall_time_s < 0 or self.inference_mean_s < 0 or self.inference_std_s < 0:
            raise BenchError("timings must be non-negative")
        if self.trials < 1:
            raise BenchError(f"trials must be >= 1, got {self.trials}")

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchReport":
        return cls(**raw)


def time_training(closure: Callable[[], object]) -> tuple[float, object]:
    """Run the closure once; returns (wall seconds, closure result)."""
    t0 = time.perf_counter()
    result = closure()
    elapsed = time.perf_counter() - t0
    return elapsed, result


def time_inference(
    predict: Callable[[np.ndarray], object],
    images: np.ndarray,
    trials: int = 5,
) -> tuple[float, float]:
    """(mean, sample std) of seconds per sample over repeated full passes.

    One warm-up pass runs first and is discarded.

    Raises:
        BenchError: fewer than 3 trials or an empty test set.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise BenchError("cannot time inference on an empty test set")
    if trials < 3:
        raise BenchError(f"need at least 3 trials, got {trials}")
    predict(images)  # warm-up
    per_sample = np.empty(trials)
    for t in range(trials):
        t0 = time.perf_counter()
        predict(images)
        per_sample[t] = (time.perf_counter() - t0) / len(images)
    return float(per_sample.mean()), float(per_sample.std(ddof=1))


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def emit_report(
    metrics: Sequence[MetricsReport],
    bench: Sequence[BenchReport],
    quality: Sequence[ExplainQualityReport],
    histories: Mapping[str, TrainHistory],
    out_dir: str | Path,
    confusions: Mapping[str, ConfusionMatrix] | None = None,
    rocs: Mapping[str, RocResult] | None = None,
) -> dict:
    """Write the JSON report plus per-table and per-model CSV artifacts.

    Emits report.json, table3_cost.csv, table4_performance.csv,
    table5_reliability.csv, table8_ranking.csv, and per-model ROC /
    learning-curve / confusion CSVs. Field order and model order are fixed
    (models sorted by name), so identical inputs produce identical bytes.

    Raises:
        ConsistencyError: the inputs do not cover the same model names.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    names = sorted(m.model for m in metrics)
    for label, other in (
        ("bench", [b.model for b in bench]),
        ("quality", [q.model for q in quality]),
        ("histories", list(histories)),
    ):
        if sorted(other) != names:
            raise ConsistencyError(
                f"model names in {label} {sorted(other)} do not match metrics {names}"
            )

    by_name = {m.model: m for m in metrics}
    bench_by = {b.model: b for b in bench}
    quality_by = {q.model: q for q in quality}
    ranking = interpretability_rank(list(quality))

    _write_csv(
        out_dir / "table3_cost.csv",
        ("model", "train_time_s", "inference_mean_s", "inference_std_s", "trials", "samples"),
        [
            {
                "model": n,
                "train_time_s": bench_by[n].train_wall_time_s,
                "inference_mean_s": bench_by[n].inference_mean_s,
                "inference_std_s": bench_by[n].inference_std_s,
                "trials": bench_by[n].trials,
                "samples": bench_by[n].sample_count,
            }
            for n in names
        ],
    )
    _write_csv(
        out_dir / "table4_performance.csv",
        (
            "model", "accuracy", "precision_macro", "recall_macro", "f1_macro",
            "auc_macro", "se", "kappa", "hamming_loss",
        ),
        [
            {
                "model": n,
                "accuracy": by_name[n].accuracy,
                "precision_macro": by_name[n].precision_macro,
                "recall_macro": by_name[n].recall_macro,
                "f1_macro": by_name[n].f1_macro,
                "auc_macro": by_name[n].auc_macro,
                "se": by_name[n].se,
                "kappa": by_name[n].kappa,
                "hamming_loss": by_name[n].hamming_loss,
            }
            for n in names
        ],
    )
    _write_csv(
        out_dir / "table5_reliability.csv",
        ("model", "ci_lo", "ci_hi", "ci_metric", "mcc", "balanced_accuracy", "log_loss", "youden_macro"),
        [
            {
                "model": n,
                "ci_lo": by_name[n].ci95[0],
                "ci_hi": by_name[n].ci95[1],
                "ci_metric": by_name[n].ci_metric,
                "mcc": by_name[n].mcc,
                "balanced_accuracy": by_name[n].balanced_accuracy,
                "log_loss": by_name[n].log_loss,
                "youden_macro": by_name[n].youden_macro,
            }
            for n in names
        ],
    )
    _write_csv(
        out_dir / "table8_ranking.csv",
        ("rank", "model", "composite") + tuple(sorted(ranking[0].normalized)),
        [
            {"rank": e.rank, "model": e.model, "composite": e.composite, **{
                k: e.normalized[k] for k in sorted(e.normalized)
            }}
            for e in ranking
        ],
    )

    for n in names:
        histories[n].to_csv(out_dir / f"learning_curve_{n}.csv")
        if rocs and n in rocs:
            rows = [
                {"class": curve.class_name, "fpr": float(f), "tpr": float(t)}
                for curve in rocs[n].curves
                for f, t in zip(curve.fpr, curve.tpr)
            ]
            _write_csv(out_dir / f"roc_{n}.csv", ("class", "fpr", "tpr"), rows)
        if confusions and n in confusions:
            cm = confusions[n]
            with open(out_dir / f"confusion_{n}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["true\\predicted"] + list(cm.class_names))
                for i, cls in enumerate(cm.class_names):
                    writer.writerow([cls] + [int(v) for v in cm.counts[i]])

    bundle = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "models": {
            n: {
                "metrics": by_name[n].as_dict(),
                "bench": bench_by[n].as_dict(),
                "quality": quality_by[n].as_dict(),
                "history": histories[n].rows(),
            }
            for n in names
        },
        "ranking": [
            {"rank": e.rank, "model": e.model, "composite": e.composite, "normalized": e.normalized}
            for e in ranking
        ],
    }
    (out_dir / "report.json").write_text(json.dumps(bundle, indent=2, sort_keys=True))
    return bundle
