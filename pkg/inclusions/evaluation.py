"""
Evaluation - Confusion Matrices, Experiment Reports, Figures

Turns predictions into confusion matrices (rows = actual class, columns = predicted class) and
writes experiment artifacts: report.json, one CSV and one SVG heatmap per evaluated split, and
timing.json. Wall time and run id live only in timing.json so that report.json depends on
(task, scale, seed) alone.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
from sklearn.metrics import confusion_matrix

from inclusions.shared import write_json

plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["svg.hashsalt"] = "inclusions"

REPORT_FORMATS = ("json", "csv", "svg")
REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray
    labels: List[int]

    def __post_init__(self):
        n = len(self.labels)
        if self.counts.shape != (n, n):
            raise ValueError(f"Counts of shape {self.counts.shape} for {n} labels")
        if np.any(self.counts < 0):
            raise ValueError("Confusion counts must be non-negative")
        if self.total == 0:
            raise ValueError("Confusion matrix of zero samples")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=pd.Index(self.labels, name="actual"), columns=list(self.labels))

    def to_dict(self) -> Dict[str, Any]:
        return {"labels": list(self.labels), "counts": self.counts.tolist(), "total": self.total,
                "accuracy": self.accuracy}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConfusionMatrix":
        return cls(np.array(data["counts"], dtype=np.int64), [int(c) for c in data["labels"]])


def confusion(actual: Sequence[int], predicted: Sequence[int], n: int) -> ConfusionMatrix:
    """Counts C[i, j] of samples with actual class i+1 predicted as class j+1."""
    actual = np.asarray(actual, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if len(actual) != len(predicted):
        raise ValueError(f"{len(actual)} actual labels but {len(predicted)} predictions")
    if len(actual) == 0:
        raise ValueError("Cannot build a confusion matrix from empty label lists")
    for name, values in (("actual", actual), ("predicted", predicted)):
        bad = values[(values < 1) | (values > n)]
        if len(bad):
            raise ValueError(f"{name} label {int(bad[0])} outside 1..{n}")
    labels = list(range(1, n + 1))
    return ConfusionMatrix(confusion_matrix(actual, predicted, labels=labels).astype(np.int64), labels)


@dataclass
class ExperimentReport:
    task: str
    model_kind: str
    seed: int
    scale: float
    class_names: Dict[int, str]
    dataset: Dict[str, Any]
    split_sizes: Dict[str, int]
    test: ConfusionMatrix
    validation: Optional[ConfusionMatrix] = None
    training: Dict[str, Any] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    run_id: Optional[str] = None

    @property
    def test_accuracy(self) -> float:
        return self.test.accuracy

    @property
    def validation_accuracy(self) -> Optional[float]:
        return None if self.validation is None else self.validation.accuracy

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "model_kind": self.model_kind,
            "seed": self.seed,
            "scale": self.scale,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "dataset": self.dataset,
            "split_sizes": self.split_sizes,
            "test_accuracy": self.test_accuracy,
            "validation_accuracy": self.validation_accuracy,
            "confusion": {
                "test": self.test.to_dict(),
                "validation": None if self.validation is None else self.validation.to_dict(),
            },
            "training": self.training,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentReport":
        validation = data["confusion"].get("validation")
        return cls(
            task=data["task"],
            model_kind=data["model_kind"],
            seed=int(data["seed"]),
            scale=float(data["scale"]),
            class_names={int(k): v for k, v in data["class_names"].items()},
            dataset=data["dataset"],
            split_sizes=data["split_sizes"],
            test=ConfusionMatrix.from_dict(data["confusion"]["test"]),
            validation=None if validation is None else ConfusionMatrix.from_dict(validation),
            training=data.get("training", {}),
            notes=list(data.get("notes", [])),
        )


def load_report(directory: Path) -> ExperimentReport:
    with open(Path(directory) / REPORT_FILE, "r", encoding="utf-8") as fh:
        return ExperimentReport.from_dict(json.load(fh))

# ============================================================================
# Rendering
# ============================================================================


def write_table(frame: pd.DataFrame, path: Path, index: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, lineterminator="\n")
    return path


def render_confusion(matrix: ConfusionMatrix, path: Path, title: str,
                     class_names: Optional[Dict[int, str]] = None) -> Path:
    names = [class_names.get(c, str(c)) if class_names else str(c) for c in matrix.labels]
    size = max(4.0, 1.2 * len(names) + 2.0)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    sns.heatmap(matrix.counts, annot=True, fmt="d", cmap="Blues", linewidths=0.5, linecolor="black",
                xticklabels=names, yticklabels=names, cbar_kws={"label": "Count"}, ax=ax)
    ax.set_xlabel("Predicted class")
    ax.set_ylabel("Actual class")
    ax.set_title(f"{title} (Accuracy {100 * matrix.accuracy:.1f}%)")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    plt.setp(ax.get_yticklabels(), rotation=0)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_curve(table: pd.DataFrame, x: str, y: str, path: Path, title: str, chance: Optional[float] = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table[x], 100 * table[y], marker="o")
    if chance is not None:
        ax.axhline(100 * chance, color="grey", linestyle="--", label="Chance")
        ax.legend()
    ax.set_xlabel(x)
    ax.set_ylabel("Test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_heatmap(grid: pd.DataFrame, path: Path, title: str) -> Path:
    """Accuracy grid (rows M, columns E); NaN cells are left blank."""
    fig, ax = plt.subplots(figsize=(1.1 * len(grid.columns) + 3, 0.7 * len(grid.index) + 2))
    sns.heatmap(100 * grid.astype(float), annot=True, fmt=".1f", cmap="viridis", vmin=0, vmax=100,
                mask=grid.isna(), cbar_kws={"label": "Test accuracy (%)"}, ax=ax)
    ax.set_xlabel("Electrodes E")
    ax.set_ylabel("Measurements M")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_report(report: ExperimentReport, directory: Path,
                formats: Sequence[str] = REPORT_FORMATS) -> Dict[str, str]:
    """Writes the report artifacts into `directory` and returns their paths by name."""
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"Unknown report formats {sorted(unknown)}. Expected a subset of {REPORT_FORMATS}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}

    if "json" in formats:
        write_json(directory / REPORT_FILE, report.to_dict())
        written["report"] = str(directory / REPORT_FILE)

    splits = [("test", report.test), ("validation", report.validation)]
    for split_name, matrix in splits:
        if matrix is None:
            continue
        if "csv" in formats:
            written[f"{split_name}_csv"] = str(write_table(matrix.to_frame(), directory / f"confusion_{split_name}.csv"))
        if "svg" in formats:
            title = f"{report.task} {split_name} ({report.model_kind.upper()})"
            written[f"{split_name}_svg"] = str(render_confusion(matrix, directory / f"confusion_{split_name}.svg",
                                                                title, report.class_names))

    write_json(directory / TIMING_FILE, {"wall_time_seconds": report.wall_time, "run_id": report.run_id})
    written["timing"] = str(directory / TIMING_FILE)
    return written
