"""
InclusionSentinel Pipeline Orchestrator

Runs one classification experiment in phases:

Phase 1: Dataset      simulate (or load) the labeled D-N dataset
             ↓
Phase 2: Split        stratified train / validation / test indices, test isolation asserted
             ↓
Phase 3: Training     SVM (5-fold CV + one-vs-one fit) or ANN (SCG with early stopping)
             ↓
Phase 4: Evaluation   confusion matrices on validation and held-out test data
             ↓
Phase 5: Report       report.json + CSV tables, then SVG figures (figure failures do not abort)

Also runs the measurement-count and electrode-count sweeps. Every phase is written to the run
log under the same run_id.
"""

import json
import uuid
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
from uuid import UUID

import numpy as np
import pandas as pd

from inclusions.ann import MlpModel, TrainConfig, fit_ann, model_from_dict, model_to_dict, predict_batch
from inclusions.dataset import (
    MIN_PER_CLASS, Dataset, SplitIndices, generate_dataset, read_dataset, split, write_dataset,
)
from inclusions.evaluation import (
    ConfusionMatrix, ExperimentReport, confusion, emit_report, render_curve, render_heatmap, write_table,
)
from inclusions.phantom import TASKS
from inclusions.shared import (
    DEFAULT_ELECTRODES, InclusionSentinelError, load_config, log_stage_output, write_json,
)
from inclusions.svm import KernelSpec, OvoModel, cross_validate, ovo_from_dict, ovo_to_dict, predict_ovo, train_ovo

MODEL_KINDS = ("ann", "svm")
SEED_STRIDE = 1_000_000
CV_FOLDS = 5
SWEEP_MEASUREMENTS = (1, 2, 4, 8, 12, 16)
SWEEP_ELECTRODES = (2, 4, 8, 12, 16)
ELECTRODE_SWEEP_SAMPLES = 12000
SPLIT_POLICY = {"ann": "ann_80_10_10", "svm": "svm_90_10"}
DEFAULT_SCALES = {"ann": 0.25, "svm": 0.2}
RADII_NOTE = ("Simulated analog of the measured radii dataset: same four diameter classes, tank and "
              "conductivity law, with D-N matrices from the forward solver instead of the tank recordings.")


class TaskPlan(NamedTuple):
    per_class: int
    model: str
    pattern: str


# Per-class sample counts at scale 1.0 and the model used for each task.
TASK_PLANS: Dict[str, TaskPlan] = {
    "presence": TaskPlan(2400, "svm", "trig"),
    "count_small": TaskPlan(2000, "svm", "trig"),
    "count_large": TaskPlan(2000, "svm", "trig"),
    "radii": TaskPlan(6000, "ann", "opposite"),
    "iso_vs_aniso_both": TaskPlan(1000, "ann", "trig"),
    "iso_vs_aniso_inclusion": TaskPlan(1000, "ann", "trig"),
    "diag_vs_offdiag": TaskPlan(4000, "ann", "trig"),
    "iso_vs_spatial": TaskPlan(4000, "ann", "trig"),
}


def scaled_count(per_class: int, scale: float) -> int:
    if scale <= 0:
        raise ValueError(f"Scale must be positive, got {scale}")
    return max(MIN_PER_CLASS, int(round(per_class * scale)))


def sweep_cell_valid(electrodes: int, measurements: int) -> bool:
    """Opposite injection needs an even electrode count and at most one pattern per electrode."""
    return electrodes >= 2 and electrodes % 2 == 0 and 1 <= measurements <= electrodes

# ============================================================================
# Models
# ============================================================================

Model = Union[MlpModel, OvoModel]


def model_kind(model: Model) -> str:
    return "ann" if isinstance(model, MlpModel) else "svm"


def predict(model: Model, x: np.ndarray, seed: int = 0) -> np.ndarray:
    if isinstance(model, MlpModel):
        return predict_batch(model, x, seed)
    return np.asarray(predict_ovo(model, np.atleast_2d(x)))


def save_model(model: Model, path: Path) -> Path:
    payload = model_to_dict(model) if isinstance(model, MlpModel) else ovo_to_dict(model)
    write_json(Path(path), payload)
    return Path(path)


def load_model(path: Path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("kind") == "mlp":
        return model_from_dict(data)
    if data.get("kind") == "svm_ovo":
        return ovo_from_dict(data)
    raise ValueError(f"Unknown model kind {data.get('kind')!r} in {path}")


def check_isolation(parts: SplitIndices) -> None:
    """Raises if any test index also appears in the training or validation indices."""
    test = set(parts.test.tolist())
    leaked = test & (set(parts.train.tolist()) | set(parts.validation.tolist()))
    if leaked:
        raise InclusionSentinelError(f"{len(leaked)} test samples leaked into training/validation indices")


def train_model(dataset: Dataset, kind: str, parts: SplitIndices, seed: int = 0,
                workers: int = 1) -> Tuple[Model, Optional[ConfusionMatrix], Dict[str, Any]]:
    """Fits the task model on the training indices; returns (model, validation confusion, training info)."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    n = max(dataset.classes)
    x, y = dataset.features, dataset.labels
    classes = dataset.classes

    if kind == "svm":
        spec = KernelSpec("quadratic")
        cv = cross_validate(x[parts.train], y[parts.train], spec, k=CV_FOLDS, seed=seed, workers=workers)
        validation = confusion(y[parts.train], cv["predictions"], n)
        model = train_ovo(x[parts.train], y[parts.train], spec, classes=classes, workers=workers)
        info = {
            "kernel": spec.kind,
            "C": model.C,
            "cv_folds": CV_FOLDS,
            "fold_accuracies": cv["fold_accuracies"],
            "cv_mean_accuracy": cv["mean_accuracy"],
            "binary_machines": len(model.machines),
            "smo_iterations": {f"{a}-{b}": it for (a, b), it in sorted(model.iterations.items())},
        }
        return model, validation, info

    config = TrainConfig(seed=seed)
    has_validation = len(parts.validation) > 0
    model, history = fit_ann(
        x[parts.train], y[parts.train],
        x[parts.validation] if has_validation else None,
        y[parts.validation] if has_validation else None,
        config=config, classes=classes,
    )
    validation = None
    if has_validation:
        validation = confusion(y[parts.validation], predict_batch(model, x[parts.validation], seed), n)
    info = {
        "hidden_units": config.hidden,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "epochs": len(history),
        "final_train_loss": history[-1]["train_loss"] if history else None,
    }
    if has_validation and history:
        best = min(history, key=lambda h: h["val_loss"])
        info["best_epoch"] = best["epoch"]
        info["best_val_loss"] = best["val_loss"]
    return model, validation, info


def evaluate_model(model: Model, dataset: Dataset, indices: Optional[Sequence[int]] = None,
                   seed: int = 0) -> ConfusionMatrix:
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    n = max(dataset.classes)
    return confusion(dataset.labels[idx], predict(model, dataset.features[idx], seed), n)

# ============================================================================
# Experiment Runner
# ============================================================================


def _banner(text: str) -> None:
    print(f"{'='*80}")
    print(text)
    print(f"{'='*80}\n")


def _run_phase(results: Dict[str, Any], key: str, title: str, run_id: UUID, runs_dir: str,
               fn: Callable[[], Tuple[Any, Dict[str, Any]]], abort: bool = True) -> Any:
    """Runs one phase with banner, timing, run log entry and error capture."""
    _banner(title)
    start = datetime.now()
    try:
        value, summary = fn()
    except Exception as e:
        print(f"\n✗ {title} FAILED: {e}")
        results["errors"].append(f"{title}: {e}")
        results["phases"][key] = {"result": "failed", "error": str(e), "error_type": type(e).__name__}
        log_stage_output(key, run_id, results["phases"][key], f"{title} failed", runs_dir=runs_dir)
        if abort:
            raise
        return None
    duration = (datetime.now() - start).total_seconds()
    results["phases"][key] = dict(summary, result="success", duration_seconds=duration)
    log_stage_output(key, run_id, results["phases"][key], f"{title} completed", runs_dir=runs_dir)
    print(f"\n✓ {title} completed in {duration:.2f}s\n")
    return value


def default_out_dir(config: Dict[str, Any], task: str, scale: float, seed: int) -> Path:
    return Path(config["runs_dir"]) / f"{task}-scale{scale:g}-seed{seed}"


def run_task(task: str, scale: Optional[float] = None, seed: int = 0, model: Optional[str] = None,
             out: Optional[Union[str, Path]] = None, config: Optional[Dict[str, Any]] = None,
             dataset_dir: Optional[Union[str, Path]] = None, run_id: Optional[UUID] = None) -> ExperimentReport:
    """
    Runs one classification experiment end to end and writes its artifacts to `out`.

    With `dataset_dir` the dataset is loaded instead of simulated (scale is then ignored).
    """
    if task not in TASK_PLANS:
        raise ValueError(f"Unknown task {task!r}; expected one of {sorted(TASK_PLANS)}")
    config = config or load_config()
    plan = TASK_PLANS[task]
    kind = model or plan.model
    if kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    scale = DEFAULT_SCALES[plan.model] if scale is None else float(scale)
    out = Path(out) if out is not None else default_out_dir(config, task, scale, seed)
    run_id = run_id or uuid.uuid4()
    runs_dir = config["runs_dir"]
    start_time = datetime.now()

    print("\n" + "="*80)
    print(f"INCLUSIONSENTINEL EXPERIMENT: {task} ({kind.upper()})")
    print(f"Run ID: {run_id}")
    print(f"Scale: {scale:g}  Seed: {seed}  Output: {out}")
    print(f"Started: {start_time.isoformat()}")
    print("="*80 + "\n")

    results: Dict[str, Any] = {
        "run_id": str(run_id),
        "start_time": start_time.isoformat(),
        "task": task,
        "phases": {},
        "errors": [],
    }
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", dict(config, task=task, scale=scale, seed=seed, model=kind))

    try:
        def build_dataset():
            if dataset_dir is not None:
                ds = read_dataset(dataset_dir)
                if ds.manifest.get("task") != task:
                    raise ValueError(f"Dataset in {dataset_dir} is for task {ds.manifest.get('task')!r}, not {task!r}")
            else:
                ds = generate_dataset(
                    task, scaled_count(plan.per_class, scale), electrode_count=DEFAULT_ELECTRODES,
                    measurement_count=DEFAULT_ELECTRODES, pattern=plan.pattern, base_seed=seed * SEED_STRIDE,
                    noise_scale=config["noise_scale"], tank_radius=config["tank_radius"],
                    mesh_max_edge=config["mesh_max_edge"], flux_method=config["flux_method"],
                    refine_inclusions=config["refine_inclusions"], workers=config["workers"],
                    run_id=run_id, runs_dir=runs_dir,
                )
                write_dataset(ds, out / "dataset")
            return ds, {"samples": len(ds), "feature_length": int(ds.features.shape[1])}

        dataset = _run_phase(results, "phase_1", "PHASE 1: Dataset", run_id, runs_dir, build_dataset)

        def build_split():
            parts = split(dataset, SPLIT_POLICY[kind], seed=seed)
            check_isolation(parts)
            sizes = {"train": len(parts.train), "validation": len(parts.validation), "test": len(parts.test)}
            return parts, sizes

        parts = _run_phase(results, "phase_2", "PHASE 2: Split", run_id, runs_dir, build_split)

        def fit():
            fitted, validation_cm, info = train_model(dataset, kind, parts, seed, config["workers"])
            save_model(fitted, out / "model.json")
            return (fitted, validation_cm, info), {"model_kind": kind}

        fitted, validation_cm, training_info = _run_phase(
            results, "phase_3", f"PHASE 3: Training ({kind.upper()})", run_id, runs_dir, fit)

        def evaluate():
            test_cm = evaluate_model(fitted, dataset, parts.test, seed)
            summary = {"test_accuracy": test_cm.accuracy}
            if validation_cm is not None:
                summary["validation_accuracy"] = validation_cm.accuracy
            return test_cm, summary

        test_cm = _run_phase(results, "phase_4", "PHASE 4: Evaluation", run_id, runs_dir, evaluate)

        notes = [RADII_NOTE] if task == "radii" and dataset.manifest.get("source") == "simulated" else []
        report = ExperimentReport(
            task=task,
            model_kind=kind,
            seed=seed,
            scale=scale,
            class_names=dict(TASKS[task].classes),
            dataset=_dataset_summary(dataset),
            split_sizes={"train": len(parts.train), "validation": len(parts.validation), "test": len(parts.test)},
            test=test_cm,
            validation=validation_cm,
            training=training_info,
            notes=notes,
            run_id=str(run_id),
        )

        def write_report():
            report.wall_time = (datetime.now() - start_time).total_seconds()
            written = emit_report(report, out, formats=("json", "csv"))
            return written, {"files": sorted(written)}

        _run_phase(results, "phase_5", "PHASE 5: Report", run_id, runs_dir, write_report)

        def figures():
            written = emit_report(report, out, formats=("svg",))
            return written, {"files": sorted(written)}

        _run_phase(results, "phase_6", "PHASE 6: Figures", run_id, runs_dir, figures, abort=False)

        end_time = datetime.now()
        results["end_time"] = end_time.isoformat()
        results["total_duration_seconds"] = (end_time - start_time).total_seconds()
        results["status"] = "completed_with_errors" if results["errors"] else "success"
        write_json(out / "run.json", results)

        _banner(f"EXPERIMENT COMPLETE\nStatus: {results['status']}\n"
                f"Test accuracy: {100 * report.test_accuracy:.1f}%\n"
                f"Total Duration: {results['total_duration_seconds']:.2f}s")
        return report

    except Exception as e:
        end_time = datetime.now()
        results["end_time"] = end_time.isoformat()
        results["total_duration_seconds"] = (end_time - start_time).total_seconds()
        results["status"] = "failed"
        results["errors"].append(f"Experiment failure: {e}")
        write_json(out / "run.json", results)

        print(f"\n{'='*80}")
        print("EXPERIMENT FAILED")
        print(f"Error: {e}")
        print(f"{'='*80}\n")
        raise


def _dataset_summary(dataset: Dataset) -> Dict[str, Any]:
    m = dataset.manifest
    return {
        "source": m.get("source"),
        "task": m.get("task"),
        "samples": len(dataset),
        "classes": [{"label": c["label"], "count": c["count"]} for c in m.get("classes", [])],
        "electrode_count": m.get("electrode_count"),
        "measurement_count": dataset.measurement_count,
        "pattern": m.get("pattern"),
        "noise_scale": m.get("noise_scale"),
        "base_seed": m.get("base_seed"),
    }


def evaluate_saved(model_path: Union[str, Path], dataset_dir: Union[str, Path], test_only: bool = False,
                   seed: int = 0, out: Optional[Union[str, Path]] = None) -> ConfusionMatrix:
    """Scores a saved model on a saved dataset (all samples, or the held-out test split)."""
    model = load_model(Path(model_path))
    dataset = read_dataset(dataset_dir)
    indices = None
    if test_only:
        indices = split(dataset, SPLIT_POLICY[model_kind(model)], seed=seed).test
    matrix = evaluate_model(model, dataset, indices, seed)
    print(f"✓ Evaluated {matrix.total} samples: accuracy {100 * matrix.accuracy:.1f}%")
    if out is not None:
        out = Path(out)
        write_json(out / "evaluation.json", {"model": str(model_path), "dataset": str(dataset_dir),
                                             "test_only": test_only, "confusion": matrix.to_dict()})
        write_table(matrix.to_frame(), out / "confusion_eval.csv")
    return matrix

# ============================================================================
# Sweeps
# ============================================================================


def _sweep_cell(dataset: Dataset, m: int, seed: int) -> Dict[str, Any]:
    sub = dataset.with_measurements(m)
    parts = split(sub, SPLIT_POLICY["ann"], seed=seed)
    check_isolation(parts)
    fitted, validation_cm, info = train_model(sub, "ann", parts, seed)
    test_cm = evaluate_model(fitted, sub, parts.test, seed)
    return {
        "M": m,
        "feature_length": m * m,
        "test_accuracy": test_cm.accuracy,
        "validation_accuracy": None if validation_cm is None else validation_cm.accuracy,
        "epochs": info["epochs"],
    }


def run_measurement_sweep(measurements: Sequence[int] = SWEEP_MEASUREMENTS, seed: int = 0,
                          scale: float = DEFAULT_SCALES["ann"], out: Optional[Union[str, Path]] = None,
                          config: Optional[Dict[str, Any]] = None) -> pd.DataFrame:
    """
    Radii-task accuracy against the number of opposite-injection patterns M at E = 16.

    One 16-pattern dataset is simulated; each M trains on the leading M x M block of every sample.
    """
    config = config or load_config()
    measurements = sorted(set(int(m) for m in measurements))
    for m in measurements:
        if not sweep_cell_valid(DEFAULT_ELECTRODES, m):
            raise ValueError(f"M={m} is not valid for E={DEFAULT_ELECTRODES}")
    out = Path(out) if out is not None else Path(config["runs_dir"]) / f"sweep-measurements-seed{seed}"
    run_id = uuid.uuid4()

    _banner(f"MEASUREMENT SWEEP (E={DEFAULT_ELECTRODES}, M in {measurements})\nRun ID: {run_id}")
    dataset = generate_dataset(
        "radii", scaled_count(TASK_PLANS["radii"].per_class, scale), electrode_count=DEFAULT_ELECTRODES,
        measurement_count=max(measurements), pattern="opposite", base_seed=seed * SEED_STRIDE,
        noise_scale=config["noise_scale"], tank_radius=config["tank_radius"], mesh_max_edge=config["mesh_max_edge"],
        flux_method=config["flux_method"], refine_inclusions=config["refine_inclusions"],
        workers=config["workers"], run_id=run_id, runs_dir=config["runs_dir"],
    )

    with ThreadPoolExecutor(max_workers=max(1, config["workers"])) as executor:
        rows = list(executor.map(lambda m: _sweep_cell(dataset, m, seed), measurements))
    for row in rows:
        print(f"  ✓ M={row['M']:2d}: test accuracy {100 * row['test_accuracy']:.1f}%")

    table = pd.DataFrame(rows)
    write_table(table, out / "measurement_sweep.csv", index=False)
    try:
        render_curve(table, "M", "test_accuracy", out / "measurement_sweep.svg",
                     f"Radii accuracy vs measurements (E={DEFAULT_ELECTRODES})", chance=0.25)
    except Exception as e:
        print(f"✗ Measurement sweep figure failed: {e}")
    log_stage_output("measurement_sweep", run_id, {"rows": rows, "seed": seed, "scale": scale},
                     f"Measurement sweep over {len(rows)} values", runs_dir=config["runs_dir"])
    return table


def run_electrode_sweep(electrodes: Sequence[int] = SWEEP_ELECTRODES, seed: int = 0,
                        scale: float = DEFAULT_SCALES["ann"], measurements: Sequence[int] = SWEEP_MEASUREMENTS,
                        out: Optional[Union[str, Path]] = None,
                        config: Optional[Dict[str, Any]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Radii-task accuracy per electrode count E (with M = E) plus the (M, E) accuracy grid.

    Grid cells with M > E, and the E = 1 column, are NaN.
    """
    config = config or load_config()
    electrodes = sorted(set(int(e) for e in electrodes))
    for e in electrodes:
        if not sweep_cell_valid(e, e):
            raise ValueError(f"E={e} is not a valid electrode count (even, >= 2)")
    measurements = sorted(set(int(m) for m in measurements) | set(electrodes))
    out = Path(out) if out is not None else Path(config["runs_dir"]) / f"sweep-electrodes-seed{seed}"
    run_id = uuid.uuid4()
    per_class = scaled_count(ELECTRODE_SWEEP_SAMPLES // len(TASKS["radii"].classes), scale)

    _banner(f"ELECTRODE SWEEP (E in {electrodes})\nRun ID: {run_id}")
    grid = pd.DataFrame(np.nan, index=pd.Index(measurements, name="M"),
                        columns=pd.Index([1] + electrodes, name="E"))
    cells: List[Tuple[int, int]] = []
    datasets: Dict[int, Dataset] = {}
    for e in electrodes:
        datasets[e] = generate_dataset(
            "radii", per_class, electrode_count=e, measurement_count=e, pattern="opposite",
            base_seed=seed * SEED_STRIDE, noise_scale=config["noise_scale"], tank_radius=config["tank_radius"],
            mesh_max_edge=config["mesh_max_edge"], flux_method=config["flux_method"],
            refine_inclusions=config["refine_inclusions"], workers=config["workers"],
            run_id=run_id, runs_dir=config["runs_dir"],
        )
        cells.extend((e, m) for m in measurements if sweep_cell_valid(e, m))

    with ThreadPoolExecutor(max_workers=max(1, config["workers"])) as executor:
        scored = list(executor.map(lambda cell: _sweep_cell(datasets[cell[0]], cell[1], seed), cells))

    rows = []
    for (e, m), row in zip(cells, scored):
        grid.loc[m, e] = row["test_accuracy"]
        if m == e:
            rows.append(dict(row, E=e))
            print(f"  ✓ E={e:2d}: test accuracy {100 * row['test_accuracy']:.1f}%")

    table = pd.DataFrame(rows)[["E", "M", "feature_length", "test_accuracy", "validation_accuracy", "epochs"]]
    write_table(table, out / "electrode_sweep.csv", index=False)
    write_table(grid, out / "electrode_grid.csv")
    try:
        render_curve(table, "E", "test_accuracy", out / "electrode_sweep.svg",
                     "Radii accuracy vs electrodes (M = E)", chance=0.25)
        render_heatmap(grid, out / "electrode_grid.svg", "Radii accuracy over (M, E)")
    except Exception as e:
        print(f"✗ Electrode sweep figures failed: {e}")
    log_stage_output("electrode_sweep", run_id, {"rows": rows, "seed": seed, "scale": scale},
                     f"Electrode sweep over {len(rows)} electrode counts", runs_dir=config["runs_dir"])
    return table, grid
