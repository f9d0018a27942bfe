"""The attack-then-detect study: one single-bias attack per output class.

For every sink class the trojaned model is checked against a manifest
committed on the clean model, and the accuracy drop is compared with the
drop predicted from per-sample baseline logits.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackSpec, attack_and_measure, choose_epsilon
from .checkpoint import Checkpoint, Dataset
from .guard import Verdict, commit, verify
from .merkle import Granularity
from .nn import forward


@dataclass(frozen=True)
class AttackRow:
    sink_class: int
    epsilon: float
    baseline_accuracy: float
    trojaned_accuracy: float
    accuracy_drop: float
    predicted_drop: float
    class_fraction: float
    sink_rate_before: float
    sink_rate_after: float
    budget_exceeded: bool
    verdict: str
    tampered_neurons: list[list[int]]
    localized: bool
    nodes_visited: int


@dataclass
class StudyResult:
    baseline_accuracy: float
    root: str
    leaf_count: int
    granularity: str
    rows: list[AttackRow] = field(default_factory=list)

    @property
    def detected(self) -> int:
        return sum(r.verdict == Verdict.TAMPERED.value for r in self.rows)

    @property
    def localized(self) -> int:
        return sum(r.localized for r in self.rows)

    def summary(self) -> dict:
        accs = [r.trojaned_accuracy for r in self.rows]
        return {
            "baseline_accuracy": self.baseline_accuracy,
            "trojaned_accuracy_min": min(accs) if accs else None,
            "trojaned_accuracy_max": max(accs) if accs else None,
            "attacks": len(self.rows),
            "detected": self.detected,
            "localized": self.localized,
            "max_sink_rate_after": max((r.sink_rate_after for r in self.rows), default=None),
            "root": self.root,
            "leaf_count": self.leaf_count,
            "granularity": self.granularity,
        }


def predicted_accuracy_drop(baseline_logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Accuracy lost when class ``k`` can never win.

    Samples labelled ``k`` that were classified correctly become wrong; samples
    the baseline wrongly called ``k`` are rescued when their runner-up class is
    the true label.
    """
    n = labels.shape[0]
    pred = np.argmax(baseline_logits, axis=1)
    masked = baseline_logits.astype(np.float64).copy()
    masked[:, k] = -np.inf
    runner_up = np.argmax(masked, axis=1)
    lost = np.sum((labels == k) & (pred == k))
    rescued = np.sum((labels != k) & (pred == k) & (runner_up == labels))
    return float(lost - rescued) / n


def run_study(
    model: Checkpoint,
    test: Dataset,
    granularity: Granularity = Granularity.NEURON,
    max_accuracy_drop: float = 1.0,
) -> StudyResult:
    manifest = commit(model, granularity)
    logits = forward(model, test.images)
    baseline = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    output_layer = len(model.layers) - 1
    result = StudyResult(baseline, manifest.root, manifest.leaf_count, Granularity(granularity).value)

    for k in range(model.layers[-1].out_dim):
        eps = choose_epsilon(model, test, output_layer, k)
        spec = AttackSpec(unit=k, epsilon=eps, max_accuracy_drop=max_accuracy_drop)
        trojaned, report = attack_and_measure(model, spec, test)
        check = verify(trojaned, manifest)
        coords = [list(c) for c in check.tampered_neurons]
        if Granularity(granularity) is Granularity.NEURON:
            localized = coords == [[output_layer, k]]
        else:
            localized = bool(coords) and all(c[0] == output_layer for c in coords)
        result.rows.append(
            AttackRow(
                sink_class=k,
                epsilon=eps,
                baseline_accuracy=report.baseline_accuracy,
                trojaned_accuracy=report.trojaned_accuracy,
                accuracy_drop=report.accuracy_drop,
                predicted_drop=predicted_accuracy_drop(logits, test.labels, k),
                class_fraction=float(np.mean(test.labels == k)),
                sink_rate_before=report.sink_rate_before,
                sink_rate_after=report.sink_rate_after,
                budget_exceeded=report.budget_exceeded,
                verdict=check.verdict.value,
                tampered_neurons=coords,
                localized=localized,
                nodes_visited=check.nodes_visited,
            )
        )
    return result


_CSV_COLUMNS = [
    "sink_class",
    "epsilon",
    "baseline_accuracy",
    "trojaned_accuracy",
    "accuracy_drop",
    "predicted_drop",
    "class_fraction",
    "sink_rate_before",
    "sink_rate_after",
    "budget_exceeded",
    "verdict",
    "localized",
    "nodes_visited",
]


def write_study(result: StudyResult, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write ``attacks.csv``, ``study.json`` and (optionally) PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "attacks.csv", "json": out_dir / "study.json"}

    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in result.rows:
            writer.writerow(asdict(row))

    doc = {"summary": result.summary(), "attacks": [asdict(r) for r in result.rows]}
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    if figures:
        from .plotting import plot_accuracy_by_sink_class, plot_drop_vs_class_share

        paths["accuracy_figure"] = plot_accuracy_by_sink_class(result, out_dir / "accuracy_by_sink_class.png")
        paths["drop_figure"] = plot_drop_vs_class_share(result, out_dir / "drop_vs_class_share.png")
    return paths
