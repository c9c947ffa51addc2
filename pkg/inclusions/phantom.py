"""
Phantom Scenarios - Conductivity Tank Descriptions

Declarative tank + inclusion conductivity descriptions and the per-task samplers that draw them.

Tensor families:
  - iso_const:    lam * I
  - diag_const:   lam * diag(a, b)          a, b positive integers
  - sym_const:    lam * [[a, c], [c, b]]    symmetric positive definite
  - spatial_diag: lam * diag(x^2, y^2)      each entry clamped below at SPATIAL_CLAMP

Every task maps class labels to a scenario law; sampling is deterministic per seed.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from inclusions.shared import (
    PlacementError, EllipticityError,
    LAMBDA_TANK, LAMBDA_INC_RANGE, LAMBDA_INC_FIXED, MU_TANK, MU_INC, SPATIAL_CLAMP,
    RADIUS_CLASSES, BOUNDARY_CLEARANCE, INCLUSION_SPACING,
)

TENSOR_KINDS = ("iso_const", "diag_const", "sym_const", "spatial_diag")
DEFAULT_TANK_RADIUS = 0.28
MAX_PLACEMENT_RETRIES = 1000

# ============================================================================
# Tensor Specs
# ============================================================================


@dataclass(frozen=True)
class TensorSpec:
    kind: str
    lam: float = 1.0
    a: float = 1.0
    b: float = 1.0
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in TENSOR_KINDS:
            raise ValueError(f"Unknown tensor kind {self.kind!r}; expected one of {TENSOR_KINDS}")
        if not self.lam > 0:
            raise ValueError(f"{self.kind}: scalar factor must be positive, got {self.lam}")
        if self.kind == "diag_const":
            for name, value in (("a", self.a), ("b", self.b)):
                if value <= 0 or not float(value).is_integer():
                    raise ValueError(f"diag_const: {name} must be a positive integer, got {value}")
        if self.kind == "sym_const":
            if not (self.a > 0 and self.a * self.b - self.c * self.c > 0):
                raise ValueError(f"sym_const: [[{self.a}, {self.c}], [{self.c}, {self.b}]] is not positive definite")

    @classmethod
    def iso(cls, lam: float) -> "TensorSpec":
        return cls("iso_const", lam=lam)

    @classmethod
    def diag(cls, lam: float, a: float, b: float) -> "TensorSpec":
        return cls("diag_const", lam=lam, a=a, b=b)

    @classmethod
    def sym(cls, lam: float, a: float, b: float, c: float) -> "TensorSpec":
        return cls("sym_const", lam=lam, a=a, b=b, c=c)

    @classmethod
    def spatial(cls, lam: float = 1.0) -> "TensorSpec":
        return cls("spatial_diag", lam=lam)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Tensors at an (N, 2) array of points, shape (N, 2, 2)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros((len(points), 2, 2))
        if self.kind == "iso_const":
            out[:, 0, 0] = out[:, 1, 1] = self.lam
        elif self.kind == "diag_const":
            out[:, 0, 0] = self.lam * self.a
            out[:, 1, 1] = self.lam * self.b
        elif self.kind == "sym_const":
            out[:, 0, 0] = self.lam * self.a
            out[:, 1, 1] = self.lam * self.b
            out[:, 0, 1] = out[:, 1, 0] = self.lam * self.c
        else:
            out[:, 0, 0] = np.maximum(self.lam * points[:, 0] ** 2, SPATIAL_CLAMP)
            out[:, 1, 1] = np.maximum(self.lam * points[:, 1] ** 2, SPATIAL_CLAMP)
        return out

    def to_dict(self) -> Dict[str, Any]:
        params = {"iso_const": ("lam",), "diag_const": ("lam", "a", "b"),
                  "sym_const": ("lam", "a", "b", "c"), "spatial_diag": ("lam",)}[self.kind]
        return {"kind": self.kind, "parameters": {p: float(getattr(self, p)) for p in params}}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TensorSpec":
        return cls(data["kind"], **data.get("parameters", {}))


@dataclass(frozen=True)
class Inclusion:
    center: Tuple[float, float]
    radius: float
    conductivity: TensorSpec

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not self.radius > 0:
            raise ValueError(f"Inclusion radius must be positive, got {self.radius}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(points) - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius ** 2

    def to_dict(self) -> Dict[str, Any]:
        return {"center": list(self.center), "radius": float(self.radius),
                "conductivity": self.conductivity.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Inclusion":
        return cls(tuple(data["center"]), float(data["radius"]), TensorSpec.from_dict(data["conductivity"]))


@dataclass(frozen=True)
class ConductivitySpec:
    tank: TensorSpec
    inclusions: Tuple[Inclusion, ...] = ()
    label: int = 1
    task: Optional[str] = None
    tank_radius: float = DEFAULT_TANK_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))

    def validate(self) -> "ConductivitySpec":
        """Checks containment, clearance, spacing and the radius classes."""
        allowed = list(RADIUS_CLASSES.values())
        for i, inc in enumerate(self.inclusions):
            if not np.isclose(allowed, inc.radius, rtol=0, atol=1e-12).any():
                raise ValueError(f"Inclusion {i} radius {inc.radius} is not one of the radius classes {allowed}")
            reach = np.hypot(*inc.center) + inc.radius + BOUNDARY_CLEARANCE
            if reach > self.tank_radius + 1e-12:
                raise ValueError(f"Inclusion {i} violates the {BOUNDARY_CLEARANCE} m boundary clearance")
            for j in range(i):
                other = self.inclusions[j]
                gap = np.hypot(inc.center[0] - other.center[0], inc.center[1] - other.center[1])
                if gap < inc.radius + other.radius + INCLUSION_SPACING - 1e-12:
                    raise ValueError(f"Inclusions {j} and {i} are closer than the {INCLUSION_SPACING} m spacing")
        if self.task is not None:
            classes = TASKS[self.task].classes
            if self.label not in classes:
                raise ValueError(f"Label {self.label} is not a class of task {self.task}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "label": int(self.label),
            "tank_radius": float(self.tank_radius),
            "tank": self.tank.to_dict(),
            "inclusions": [inc.to_dict() for inc in self.inclusions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConductivitySpec":
        return cls(
            tank=TensorSpec.from_dict(data["tank"]),
            inclusions=tuple(Inclusion.from_dict(d) for d in data.get("inclusions", [])),
            label=int(data.get("label", 1)),
            task=data.get("task"),
            tank_radius=float(data.get("tank_radius", DEFAULT_TANK_RADIUS)),
        )

# ============================================================================
# Evaluation
# ============================================================================


def evaluate_tensor_field(spec: ConductivitySpec, points: np.ndarray) -> np.ndarray:
    """Vectorized evaluate_tensor over an (N, 2) array; inclusions override the tank."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(points, axis=1)
    outside = r > spec.tank_radius * (1.0 + 1e-9)
    if np.any(outside):
        bad = points[np.argmax(outside)]
        raise ValueError(f"Point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the tank of radius {spec.tank_radius}")

    tensors = spec.tank.evaluate(points)
    for inc in spec.inclusions:
        inside = inc.contains(points)
        if np.any(inside):
            tensors[inside] = inc.conductivity.evaluate(points[inside])
    return tensors


def evaluate_tensor(spec: ConductivitySpec, point: Sequence[float]) -> np.ndarray:
    return evaluate_tensor_field(spec, np.asarray(point, dtype=float).reshape(1, 2))[0]


def verify_ellipticity(spec: ConductivitySpec, sample_points: np.ndarray) -> Tuple[float, float]:
    """Returns (min, max) eigenvalue of the tensor field over the points."""
    sample_points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if sample_points.size == 0:
        raise ValueError("verify_ellipticity needs at least one sample point")
    eig = np.linalg.eigvalsh(evaluate_tensor_field(spec, sample_points))
    lowest = eig[:, 0]
    if np.any(lowest <= 0):
        k = int(np.argmin(lowest))
        point = tuple(float(v) for v in sample_points[k])
        raise EllipticityError(f"Non-positive eigenvalue {lowest[k]:.3e} at point {point}", point=point)
    return float(lowest.min()), float(eig[:, 1].max())

# ============================================================================
# Task Catalog
# ============================================================================


@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: Dict[int, str]
    description: str = ""

    @property
    def labels(self) -> List[int]:
        return sorted(self.classes)


TASKS: Dict[str, TaskSpec] = {
    "presence": TaskSpec("presence", {1: "no inclusion", 2: "one inclusion"},
                         "Is there an inclusion in the tank?"),
    "count_small": TaskSpec("count_small", {1: "1 inclusion", 2: "2 inclusions", 3: "3 inclusions"},
                            "How many 19.4 mm inclusions are in the tank?"),
    "count_large": TaskSpec("count_large", {1: "1 inclusion", 2: "2 inclusions", 3: "3 inclusions"},
                            "How many 38.8 mm inclusions are in the tank?"),
    "radii": TaskSpec("radii", {1: "19.4 mm", 2: "38.8 mm", 3: "58.2 mm", 4: "77.6 mm"},
                      "Which diameter does the inclusion have?"),
    "iso_vs_aniso_both": TaskSpec("iso_vs_aniso_both", {1: "isotropic", 2: "anisotropic"},
                                  "Tank and inclusion both isotropic or both diagonal anisotropic"),
    "iso_vs_aniso_inclusion": TaskSpec("iso_vs_aniso_inclusion", {1: "isotropic", 2: "anisotropic"},
                                       "Isotropic tank; isotropic or diagonal anisotropic inclusion"),
    "diag_vs_offdiag": TaskSpec("diag_vs_offdiag", {1: "diagonal", 2: "off-diagonal"},
                                "Diagonal versus full symmetric anisotropy"),
    "iso_vs_spatial": TaskSpec("iso_vs_spatial", {1: "isotropic", 2: "spatially varying"},
                               "Isotropic tank; isotropic or diag(x^2, y^2) inclusion"),
}

# Radius class per inclusion for the count tasks.
COUNT_RADIUS_CLASS = {"count_small": 1, "count_large": 2}


def place_inclusions(rng: np.random.Generator, radii: Sequence[float], tank_radius: float,
                     max_retries: int = MAX_PLACEMENT_RETRIES) -> List[Tuple[float, float]]:
    """
    Draws centers uniformly over the admissible disk of each inclusion and rejects whole
    configurations that break the spacing margin.
    """
    limits = [tank_radius - r - BOUNDARY_CLEARANCE for r in radii]
    if any(lim <= 0 for lim in limits):
        raise PlacementError(f"Inclusion radii {list(radii)} do not fit in a tank of radius {tank_radius}")

    for _ in range(max_retries):
        centers: List[Tuple[float, float]] = []
        for r, lim in zip(radii, limits):
            rho = lim * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            c = (rho * np.cos(phi), rho * np.sin(phi))
            if any(np.hypot(c[0] - o[0], c[1] - o[1]) < r + ro + INCLUSION_SPACING
                   for o, ro in zip(centers, radii)):
                break
            centers.append(c)
        if len(centers) == len(radii):
            return centers
    raise PlacementError(
        f"Could not place {len(radii)} inclusions of radii {list(radii)} after {max_retries} attempts"
    )


def _iso_inclusion_scenario(rng, label, task, tank_radius, n_inclusions, radius_class):
    radii = [RADIUS_CLASSES[radius_class]] * n_inclusions
    lams = rng.uniform(*LAMBDA_INC_RANGE, size=n_inclusions)
    centers = place_inclusions(rng, radii, tank_radius)
    inclusions = [Inclusion(c, r, TensorSpec.iso(float(lam))) for c, r, lam in zip(centers, radii, lams)]
    return ConductivitySpec(TensorSpec.iso(LAMBDA_TANK), tuple(inclusions), label, task, tank_radius)


def _single_inclusion(rng, tank_radius, conductivity: TensorSpec,
                      sample_index: Optional[int] = None) -> Tuple[Inclusion, ...]:
    if sample_index is None:
        radius_class = int(rng.integers(1, len(RADIUS_CLASSES) + 1))
    else:
        radius_class = sample_index % len(RADIUS_CLASSES) + 1
    radius = RADIUS_CLASSES[radius_class]
    (center,) = place_inclusions(rng, [radius], tank_radius)
    return (Inclusion(center, radius, conductivity),)


def _positive_definite_draw(rng) -> Tuple[int, int, int]:
    while True:
        a, b = (int(v) for v in rng.integers(6, 21, size=2))
        c = int(rng.integers(1, 6))
        if a * b - c * c > 0:
            return a, b, c


def sample_scenario(task: str, class_label: int, seed: int, tank_radius: float = DEFAULT_TANK_RADIUS,
                    sample_index: Optional[int] = None) -> ConductivitySpec:
    """
    Draws one scenario of the given task and class.

    For the anisotropy tasks, sample_index (the position of the sample within its class) cycles
    the inclusion radius through the four radius classes so every radius is equally represented.
    Without it the radius class is drawn from the seed.
    """
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}; expected one of {sorted(TASKS)}")
    if class_label not in TASKS[task].classes:
        raise ValueError(f"Label {class_label} is not valid for task {task}; classes are {TASKS[task].labels}")

    rng = np.random.default_rng(seed)
    iso_tank = TensorSpec.iso(LAMBDA_TANK)

    if task == "presence":
        if class_label == 1:
            return ConductivitySpec(iso_tank, (), class_label, task, tank_radius)
        radius_class = int(rng.integers(1, len(RADIUS_CLASSES) + 1))
        return _iso_inclusion_scenario(rng, class_label, task, tank_radius, 1, radius_class)

    if task in COUNT_RADIUS_CLASS:
        return _iso_inclusion_scenario(rng, class_label, task, tank_radius, class_label, COUNT_RADIUS_CLASS[task])

    if task == "radii":
        return _iso_inclusion_scenario(rng, class_label, task, tank_radius, 1, class_label)

    a, b = (int(v) for v in rng.integers(2, 11, size=2))

    if task == "iso_vs_aniso_both":
        if class_label == 1:
            tank, inc = iso_tank, TensorSpec.iso(LAMBDA_INC_FIXED)
        else:
            tank, inc = TensorSpec.diag(MU_TANK, a, b), TensorSpec.diag(MU_INC, a, b)
    elif task == "iso_vs_aniso_inclusion":
        tank = iso_tank
        inc = TensorSpec.iso(LAMBDA_INC_FIXED) if class_label == 1 else TensorSpec.diag(MU_INC, a, b)
    elif task == "diag_vs_offdiag":
        if class_label == 1:
            tank, inc = TensorSpec.diag(MU_TANK, a, b), TensorSpec.diag(MU_INC, a, b)
        else:
            a, b, c = _positive_definite_draw(rng)
            tank, inc = TensorSpec.sym(MU_TANK, a, b, c), TensorSpec.sym(MU_INC, a, b, c)
    else:
        tank = iso_tank
        inc = TensorSpec.iso(LAMBDA_INC_FIXED) if class_label == 1 else TensorSpec.spatial()

    return ConductivitySpec(tank, _single_inclusion(rng, tank_radius, inc, sample_index), class_label, task, tank_radius)
