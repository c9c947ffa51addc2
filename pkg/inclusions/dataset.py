"""
Dataset Builder - Labeled D-N Feature Sets

Simulation flow (per sample, data-parallel):
  1. Derive the sample seed (base_seed + index) and split it into scenario and noise seeds
  2. Draw the scenario for the sample's class and check ellipticity on the mesh
  3. Assemble the clean D-N matrix, add Gaussian noise, flatten row-major
  4. On placement/solver failure, regenerate with seed + total * attempt and record both seeds

Also handles persistence (manifest.json + samples.csv + provenance.jsonl), stratified splits,
K-fold partitions and ingestion of measured N-D matrices.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
from uuid import UUID

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold, train_test_split

from inclusions.forward import add_noise, dn_from_nd, dn_matrix, make_patterns
from inclusions.mesh import electrode_layout, generate_disk_mesh, mesh_quality
from inclusions.phantom import TASKS, sample_scenario, verify_ellipticity
from inclusions.shared import (
    EllipticityError, IngestError, InclusionSentinelError, MeshError, PlacementError,
    SingularMatrixError, SolverError, log_stage_output, write_json,
)

FORMAT_VERSION = 1
MESH_SEED = 0
MAX_REGENERATIONS = 10
MIN_PER_CLASS = 10
SPLIT_POLICIES = ("ann_80_10_10", "svm_90_10")
TEST_FRACTION = 0.1

MANIFEST_FILE = "manifest.json"
SAMPLES_FILE = "samples.csv"
PROVENANCE_FILE = "provenance.jsonl"


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    provenance: Dict[str, Any]


@dataclass(eq=False)
class Dataset:
    manifest: Dict[str, Any]
    features: np.ndarray
    labels: np.ndarray
    provenance: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        features = np.asarray(self.features, dtype=float)
        m = self.measurement_count
        if features.size != len(self.labels) * m * m:
            raise ValueError(f"{features.size} feature values do not fit {len(self.labels)} samples of length "
                             f"M^2 = {m * m}")
        self.features = features.reshape(len(self.labels), m * m)

    def __len__(self) -> int:
        return int(len(self.labels))

    @property
    def measurement_count(self) -> int:
        return int(self.manifest["measurement_count"])

    @property
    def classes(self) -> List[int]:
        return [int(c["label"]) for c in self.manifest["classes"]]

    @property
    def diagnostics(self) -> List[Dict[str, Any]]:
        return self.manifest.get("diagnostics", [])

    def samples(self):
        for i in range(len(self)):
            prov = self.provenance[i] if i < len(self.provenance) else {}
            yield Sample(self.features[i], int(self.labels[i]), prov)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        manifest = dict(self.manifest)
        manifest["classes"] = _class_entries(self.labels[indices], self.manifest["classes"])
        prov = [self.provenance[i] for i in indices] if self.provenance else []
        return Dataset(manifest, self.features[indices], self.labels[indices], prov)

    def with_measurements(self, m: int) -> "Dataset":
        """Leading principal m x m submatrix of every sample."""
        full = self.measurement_count
        if not 1 <= m <= full:
            raise ValueError(f"Measurement count must lie in 1..{full}, got {m}")
        cube = self.features.reshape(len(self), full, full)[:, :m, :m]
        manifest = dict(self.manifest, measurement_count=m)
        return Dataset(manifest, cube.reshape(len(self), m * m), self.labels.copy(), list(self.provenance))


def _class_entries(labels: np.ndarray, template: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    out = []
    for entry in template:
        label = int(entry["label"])
        out.append(dict(entry, count=int(np.sum(labels == label))))
    return out

# ============================================================================
# Simulation
# ============================================================================


def derive_seeds(sample_seed: int) -> Tuple[int, int]:
    """Independent (scenario, noise) seeds from one sample seed."""
    scenario, noise = np.random.SeedSequence(sample_seed).spawn(2)
    return int(scenario.generate_state(1)[0]), int(noise.generate_state(1)[0])


def _normalize_counts(task: str, counts: Union[int, Dict[int, int]]) -> Dict[int, int]:
    labels = TASKS[task].labels
    if isinstance(counts, int):
        counts = {label: counts for label in labels}
    counts = {int(k): int(v) for k, v in counts.items()}
    if sorted(counts) != labels:
        raise ValueError(f"Counts must cover exactly the classes {labels} of task {task}, got {sorted(counts)}")
    for label, count in counts.items():
        if count < 1:
            raise ValueError(f"Class {label} needs at least one sample, got {count}")
    return counts


def generate_dataset(task: str, counts: Union[int, Dict[int, int]], electrode_count: int = 16,
                     measurement_count: int = 16, pattern: str = "trig", base_seed: int = 0,
                     noise_scale: float = 0.01, tank_radius: float = 0.28, mesh_max_edge: float = 0.0138,
                     flux_method: str = "residual", refine_inclusions: bool = False, workers: int = 1,
                     run_id: Optional[UUID] = None, runs_dir: Optional[str] = None) -> Dataset:
    """
    Simulates exactly counts[label] noisy D-N samples per class.

    Sample i (classes in ascending label order) uses seed base_seed + i, so the bytes of the
    result do not depend on the worker count.
    """
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}; expected one of {sorted(TASKS)}")
    counts = _normalize_counts(task, counts)
    if not 1 <= measurement_count <= electrode_count:
        raise ValueError(f"Measurement count must lie in 1..E={electrode_count}, got {measurement_count}")
    layout = electrode_layout(electrode_count)
    patterns = make_patterns(pattern, measurement_count, electrode_count)

    plan = [label for label in sorted(counts) for _ in range(counts[label])]
    class_start = {label: plan.index(label) for label in counts}
    total = len(plan)
    shared_mesh = generate_disk_mesh(tank_radius, mesh_max_edge, seed=MESH_SEED)

    def simulate(index: int):
        label = plan[index]
        class_index = index - class_start[label]
        seed = base_seed + index
        regenerations = []
        for attempt in range(MAX_REGENERATIONS + 1):
            try:
                scenario_seed, noise_seed = derive_seeds(seed)
                spec = sample_scenario(task, label, scenario_seed, tank_radius, class_index)
                mesh = shared_mesh
                if refine_inclusions and spec.inclusions:
                    disks = [(inc.center, inc.radius) for inc in spec.inclusions]
                    mesh = generate_disk_mesh(tank_radius, mesh_max_edge, seed=MESH_SEED, refine_disks=disks)
                verify_ellipticity(spec, mesh.centroids())
                clean = dn_matrix(mesh, spec, layout, patterns, flux_method)
                noisy = add_noise(clean, noise_seed, noise_scale)
                provenance = {
                    "index": index,
                    "class_index": class_index,
                    "seed": seed,
                    "scenario_seed": scenario_seed,
                    "noise_seed": noise_seed,
                    "scenario": spec.to_dict(),
                }
                if regenerations:
                    provenance["regenerations"] = regenerations
                return noisy.flatten(), provenance
            except (PlacementError, MeshError, SolverError, EllipticityError) as e:
                next_seed = base_seed + index + total * (attempt + 1)
                regenerations.append({
                    "failed_seed": seed,
                    "next_seed": next_seed,
                    "error_type": type(e).__name__,
                    "message": str(e),
                })
                seed = next_seed
        raise InclusionSentinelError(
            f"Sample {index} (class {label}) failed {MAX_REGENERATIONS + 1} times; last error: "
            f"{regenerations[-1]['message']}"
        )

    print(f"Simulating {total} samples for task '{task}' (E={electrode_count}, M={measurement_count}, "
          f"{pattern} patterns, {workers} worker(s))...", flush=True)
    features = np.zeros((total, measurement_count * measurement_count))
    provenance: List[Dict[str, Any]] = []
    step = max(1, total // 10)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for i, (row, prov) in enumerate(executor.map(simulate, range(total))):
            features[i] = row
            provenance.append(prov)
            if (i + 1) % step == 0 or i + 1 == total:
                print(f"  ✓ {i + 1}/{total} samples", flush=True)

    regenerated = [p for p in provenance if "regenerations" in p]
    for prov in regenerated:
        for event in prov["regenerations"]:
            print(f"  ✗ Sample {prov['index']}: {event['error_type']} with seed {event['failed_seed']}, "
                  f"regenerated with seed {event['next_seed']}")
            if run_id is not None:
                log_stage_output("dataset_regeneration", run_id, dict(event, index=prov["index"]),
                                 f"Sample {prov['index']} regenerated", runs_dir=runs_dir)

    manifest = {
        "format_version": FORMAT_VERSION,
        "source": "simulated",
        "task": task,
        "electrode_count": electrode_count,
        "measurement_count": measurement_count,
        "pattern": pattern,
        "noise_scale": noise_scale,
        "base_seed": base_seed,
        "classes": [{"label": label, "name": TASKS[task].classes[label], "count": counts[label]}
                    for label in sorted(counts)],
        "tank_radius": tank_radius,
        "mesh_max_edge": mesh_max_edge,
        "mesh_seed": MESH_SEED,
        "flux_method": flux_method,
        "refine_inclusions": refine_inclusions,
        "mesh": mesh_quality(shared_mesh),
    }
    return Dataset(manifest, features, np.asarray(plan, dtype=np.int64), provenance)

# ============================================================================
# Persistence
# ============================================================================


def write_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / MANIFEST_FILE, dataset.manifest)

    m2 = dataset.features.shape[1]
    frame = pd.DataFrame(dataset.features, columns=[f"f_{i}" for i in range(1, m2 + 1)])
    frame.insert(0, "label", dataset.labels)
    frame.to_csv(directory / SAMPLES_FILE, index=False, float_format="%.17g", lineterminator="\n",
                 encoding="utf-8")

    with open(directory / PROVENANCE_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for entry in dataset.provenance:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"Unsupported dataset format version {manifest.get('format_version')} in {directory}")

    frame = pd.read_csv(directory / SAMPLES_FILE, float_precision="round_trip")
    labels = frame["label"].to_numpy(dtype=np.int64)
    features = frame.drop(columns="label").to_numpy(dtype=float)

    provenance = []
    prov_path = directory / PROVENANCE_FILE
    if prov_path.exists():
        with open(prov_path, "r", encoding="utf-8") as fh:
            provenance = [json.loads(line) for line in fh if line.strip()]
    return Dataset(manifest, features, labels, provenance)

# ============================================================================
# Splits
# ============================================================================


class SplitIndices(NamedTuple):
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split(dataset: Dataset, policy: str, seed: int = 0) -> SplitIndices:
    """
    Stratified partition of sample indices.

    ann_80_10_10: 10% test, then a validation set of the same size carved from the rest.
    svm_90_10:    10% test; validation is left to K-fold on the training part.
    """
    if policy not in SPLIT_POLICIES:
        raise ValueError(f"Unknown split policy {policy!r}; expected one of {SPLIT_POLICIES}")
    labels = dataset.labels
    for label in np.unique(labels):
        n = int(np.sum(labels == label))
        if n < MIN_PER_CLASS:
            raise ValueError(f"Class {int(label)} has {n} samples; splitting needs at least {MIN_PER_CLASS} per class")

    indices = np.arange(len(dataset))
    rest, test = train_test_split(indices, test_size=TEST_FRACTION, stratify=labels, random_state=seed)
    if policy == "svm_90_10":
        return SplitIndices(np.sort(rest), np.array([], dtype=np.int64), np.sort(test))
    train, validation = train_test_split(rest, test_size=len(test), stratify=labels[rest], random_state=seed)
    return SplitIndices(np.sort(train), np.sort(validation), np.sort(test))


def kfold(train_indices: Sequence[int], k: int = 5, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """K (fit, holdout) pairs over the given indices; fold sizes differ by at most one."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if k < 2:
        raise ValueError(f"K-fold needs K >= 2, got {k}")
    if k > len(train_indices):
        raise ValueError(f"K={k} exceeds the training set size {len(train_indices)}")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train_indices[fit], train_indices[hold]) for fit, hold in splitter.split(train_indices)]

# ============================================================================
# Measured N-D Records
# ============================================================================


def _parse_record(row: List[str], line_number: int) -> Tuple[int, np.ndarray]:
    if len(row) < 3:
        raise IngestError(f"line {line_number}: expected label, M and M*M values, got {len(row)} fields",
                          line_number)
    try:
        label = int(row[0])
        m = int(row[1])
    except ValueError:
        raise IngestError(f"line {line_number}: label and M must be integers", line_number)
    if m < 1:
        raise IngestError(f"line {line_number}: M must be positive, got {m}", line_number)
    if len(row) != 2 + m * m:
        raise IngestError(f"line {line_number}: expected {2 + m * m} fields for M={m}, got {len(row)}", line_number)
    try:
        values = np.array([float(v) for v in row[2:]])
    except ValueError:
        raise IngestError(f"line {line_number}: non-numeric matrix entry", line_number)
    if not np.all(np.isfinite(values)):
        raise IngestError(f"line {line_number}: non-finite matrix entry", line_number)
    return label, values.reshape(m, m)


def ingest_nd_records(path, task: str = "radii", electrode_count: Optional[int] = None) -> Dataset:
    """
    Reads `label, M, r_11, ..., r_MM` records, inverts each N-D matrix and flattens the D-N result.

    Malformed records are skipped and reported in the dataset diagnostics with their line number.
    """
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}; expected one of {sorted(TASKS)}")
    known = TASKS[task].classes
    labels: List[int] = []
    rows: List[np.ndarray] = []
    provenance: List[Dict[str, Any]] = []
    diagnostics: List[Dict[str, Any]] = []
    m_declared: Optional[int] = None

    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line_number, row in enumerate(csv.reader(fh), start=1):
            row = [cell.strip() for cell in row]
            if not row or all(not cell for cell in row) or row[0].startswith("#"):
                continue
            try:
                label, r = _parse_record(row, line_number)
                if label not in known:
                    raise IngestError(f"line {line_number}: label {label} is not a class of task {task} "
                                      f"(expected one of {sorted(known)})", line_number)
                if m_declared is not None and r.shape[0] != m_declared:
                    raise IngestError(f"line {line_number}: M={r.shape[0]} differs from M={m_declared} "
                                      f"of the first record", line_number)
                dn = dn_from_nd(r, name=f"at line {line_number}")
            except (IngestError, SingularMatrixError) as e:
                diagnostics.append({"line_number": line_number, "error_type": type(e).__name__, "message": str(e)})
                continue
            m_declared = r.shape[0]
            labels.append(label)
            rows.append(dn.flatten())
            provenance.append({"index": len(provenance), "line_number": line_number, "source": str(path)})

    if not rows:
        raise IngestError(f"No valid N-D records in {path} ({len(diagnostics)} rejected)")

    labels_arr = np.asarray(labels, dtype=np.int64)
    manifest = {
        "format_version": FORMAT_VERSION,
        "source": "measured",
        "task": task,
        "electrode_count": electrode_count or m_declared,
        "measurement_count": m_declared,
        "pattern": "measured",
        "noise_scale": 0.0,
        "base_seed": None,
        "classes": [{"label": int(c), "name": known.get(int(c), str(int(c))), "count": int(np.sum(labels_arr == c))}
                    for c in np.unique(labels_arr)],
        "diagnostics": diagnostics,
    }
    print(f"Ingested {len(rows)} N-D records from {path} ({len(diagnostics)} rejected)")
    return Dataset(manifest, np.vstack(rows), labels_arr, provenance)
