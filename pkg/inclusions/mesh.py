"""
Disk Tank Mesher

Builds conforming P1 triangulations of the circular tank and exposes the boundary/electrode geometry
the forward solver needs.

Flow:
  1. Place boundary nodes equispaced in angle (node count a multiple of 96 so every even electrode
     count used by the sweeps receives the same number of nodes per arc)
  2. Fill the interior with concentric rings graded from the boundary spacing up to target_max_edge,
     each ring rotated by a seeded offset
  3. Optionally replace the rings around inclusion disks by a finer hexagonal lattice
  4. Delaunay-triangulate, orient counterclockwise, validate

Meshes never conform to inclusion boundaries; conductivity is assigned per element.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from inclusions.shared import MeshError

DEFAULT_MAX_EDGE = 0.0138
BOUNDARY_NODE_MULTIPLE = 96
BOUNDARY_SPACING_RATIO = 0.75
RING_GRADING = 1.2
MIN_TRIANGLE_AREA = 1e-14
ON_CIRCLE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulated disk; arrays are read-only after construction."""
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_nodes: np.ndarray
    radius: float

    def __post_init__(self):
        for name, dtype in (("vertices", float), ("triangles", np.int64),
                            ("boundary_edges", np.int64), ("boundary_nodes", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def boundary_angles(self) -> np.ndarray:
        """Angles in [0, 2pi) of the boundary nodes, in boundary_nodes order."""
        xy = self.vertices[self.boundary_nodes]
        return np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """E gapless electrodes; arc l is [start_l, start_l + 2pi/E) taken modulo 2pi."""
    electrode_count: int
    arcs: np.ndarray
    centers: np.ndarray

    @property
    def arc_width(self) -> float:
        return 2.0 * np.pi / self.electrode_count

    def arc_index(self, angles: np.ndarray) -> np.ndarray:
        """Electrode index owning each angle under the half-open convention."""
        shifted = np.mod(np.asarray(angles, dtype=float) + 0.5 * self.arc_width, 2.0 * np.pi)
        idx = np.floor(shifted / self.arc_width).astype(np.int64)
        return np.clip(idx, 0, self.electrode_count - 1)


def boundary_node_count(radius: float, target_max_edge: float) -> int:
    raw = 2.0 * np.pi * radius / (BOUNDARY_SPACING_RATIO * target_max_edge)
    return int(BOUNDARY_NODE_MULTIPLE * max(1, math.ceil(raw / BOUNDARY_NODE_MULTIPLE)))


def _ring_points(radius: float, target_max_edge: float, boundary_spacing: float,
                 rng: np.random.Generator) -> np.ndarray:
    rings = []
    r = radius
    s = boundary_spacing
    while True:
        s_next = min(target_max_edge, s * RING_GRADING)
        r_next = r - s_next * math.sqrt(3.0) / 2.0
        if r_next < 0.5 * s_next:
            break
        n = max(6, int(round(2.0 * np.pi * r_next / s_next)))
        offset = rng.uniform(0.0, 2.0 * np.pi / n)
        ang = offset + 2.0 * np.pi * np.arange(n) / n
        rings.append(np.column_stack([r_next * np.cos(ang), r_next * np.sin(ang)]))
        r, s = r_next, s_next
    rings.append(np.zeros((1, 2)))
    return np.vstack(rings)


def _hex_lattice(center: np.ndarray, extent: float, spacing: float) -> np.ndarray:
    row_step = spacing * math.sqrt(3.0) / 2.0
    n_rows = int(math.ceil(extent / row_step))
    n_cols = int(math.ceil(extent / spacing)) + 1
    pts = []
    for j in range(-n_rows, n_rows + 1):
        xs = center[0] + (j % 2) * spacing / 2.0 + spacing * np.arange(-n_cols, n_cols + 1)
        ys = np.full_like(xs, center[1] + j * row_step)
        pts.append(np.column_stack([xs, ys]))
    pts = np.vstack(pts)
    return pts[np.linalg.norm(pts - center, axis=1) <= extent]


def _refine_points(interior: np.ndarray, refine_disks: Sequence[Tuple[Sequence[float], float]],
                   radius: float, target_max_edge: float, boundary_spacing: float) -> np.ndarray:
    fine = target_max_edge / 2.0
    keep = np.ones(len(interior), dtype=bool)
    for center, disk_radius in refine_disks:
        c = np.asarray(center, dtype=float)
        keep &= np.linalg.norm(interior - c, axis=1) > disk_radius + target_max_edge
    kept = interior[keep]

    limit = radius - 0.8 * max(fine, boundary_spacing)
    lattice = [_hex_lattice(np.asarray(c, dtype=float), r + target_max_edge, fine) for c, r in refine_disks]
    lattice = np.vstack(lattice)
    lattice = lattice[np.linalg.norm(lattice, axis=1) <= limit]

    # overlapping disks produce near-duplicate lattice points
    if len(lattice):
        tree = cKDTree(lattice)
        drop = set()
        for i, j in sorted(tree.query_pairs(fine / 4.0)):
            if i not in drop:
                drop.add(j)
        lattice = np.delete(lattice, sorted(drop), axis=0)

    if len(kept) and len(lattice):
        dist, _ = cKDTree(kept).query(lattice)
        lattice = lattice[dist > fine / 2.0]
    return np.vstack([kept, lattice])


def generate_disk_mesh(radius: float, target_max_edge: float = DEFAULT_MAX_EDGE, seed: int = 0,
                       refine_disks: Optional[Sequence[Tuple[Sequence[float], float]]] = None) -> TriMesh:
    """
    Triangulates the disk of the given radius (meters).

    refine_disks is an optional list of (center, radius) pairs; interior points within
    radius + target_max_edge of a center are replaced by a lattice of spacing target_max_edge/2.
    The result is deterministic for fixed inputs.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not 0 < target_max_edge < radius:
        raise ValueError(f"target_max_edge must lie in (0, radius), got {target_max_edge}")

    rng = np.random.default_rng(seed)
    n_b = boundary_node_count(radius, target_max_edge)
    theta = (np.arange(n_b) + 0.5) * 2.0 * np.pi / n_b
    boundary = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    boundary_spacing = 2.0 * np.pi * radius / n_b

    interior = _ring_points(radius, target_max_edge, boundary_spacing, rng)
    if refine_disks:
        interior = _refine_points(interior, refine_disks, radius, target_max_edge, boundary_spacing)

    points = np.vstack([boundary, interior])
    simplices = Delaunay(points).simplices.astype(np.int64)

    p = points[simplices]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    flip = area < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    if np.any(np.abs(area) < MIN_TRIANGLE_AREA):
        bad = int(np.argmin(np.abs(area)))
        raise MeshError(f"Degenerate triangle {bad} with area {abs(area[bad]):.3e} m^2")

    nodes = np.arange(n_b)
    mesh = TriMesh(
        vertices=points,
        triangles=simplices,
        boundary_edges=np.column_stack([nodes, np.roll(nodes, -1)]),
        boundary_nodes=nodes,
        radius=float(radius),
    )
    validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: TriMesh, radius: Optional[float] = None) -> None:
    """Raises MeshError listing every violated TriMesh invariant."""
    radius = mesh.radius if radius is None else radius
    problems: List[str] = []

    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        problems.append(f"{int(np.sum(areas <= 0))} triangles with non-positive signed area")

    r_b = np.linalg.norm(mesh.vertices[mesh.boundary_nodes], axis=1)
    off = np.abs(r_b - radius) > ON_CIRCLE_TOLERANCE * radius
    if np.any(off):
        problems.append(f"{int(np.sum(off))} boundary nodes off the circle of radius {radius}")

    edges = mesh.boundary_edges
    successor = {int(a): int(b) for a, b in edges}
    if len(successor) != len(edges) or set(successor) != set(int(n) for n in mesh.boundary_nodes):
        problems.append("boundary edges do not visit every boundary node exactly once")
    elif len(edges):
        start = int(edges[0, 0])
        node, steps = successor[start], 1
        while node != start and steps <= len(edges):
            node, steps = successor.get(node, start), steps + 1
        if steps != len(edges):
            problems.append("boundary edges do not form a single closed loop")

    tri = mesh.triangles
    all_edges = np.sort(np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    unique, counts = np.unique(all_edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        problems.append(f"{int(np.sum(counts > 2))} edges shared by more than two triangles")
    hull = {tuple(e) for e in unique[counts == 1].tolist()}
    loop = {tuple(sorted(e)) for e in edges.tolist()}
    if hull != loop:
        problems.append("edges used by a single triangle differ from the boundary loop")

    if problems:
        raise MeshError("Invalid mesh: " + "; ".join(problems))


def electrode_layout(electrode_count: int) -> ElectrodeLayout:
    """Arcs of width 2pi/E centered on theta_l = 2pi*l/E, l = 0..E-1."""
    if int(electrode_count) != electrode_count or electrode_count < 2 or electrode_count % 2:
        raise ValueError(f"electrode count must be an even integer >= 2, got {electrode_count}")
    e = int(electrode_count)
    width = 2.0 * np.pi / e
    centers = width * np.arange(e)
    starts = np.mod(centers - 0.5 * width, 2.0 * np.pi)
    arcs = np.column_stack([starts, starts + width])
    return ElectrodeLayout(electrode_count=e, arcs=arcs, centers=centers)


def boundary_arc_nodes(mesh: TriMesh, layout: ElectrodeLayout, electrode: int) -> np.ndarray:
    """Boundary nodes of arc `electrode`, ordered counterclockwise from the arc start."""
    if not 0 <= electrode < layout.electrode_count:
        raise ValueError(f"electrode index {electrode} out of range 0..{layout.electrode_count - 1}")
    angles = mesh.boundary_angles()
    owner = layout.arc_index(angles)
    members = np.flatnonzero(owner == electrode)
    phase = np.mod(angles[members] - layout.arcs[electrode, 0], 2.0 * np.pi)
    # the arc containing angle 0 wraps; tiny negative phases land near 2pi
    phase[phase > layout.arc_width + np.pi] -= 2.0 * np.pi
    return mesh.boundary_nodes[members[np.argsort(phase, kind="stable")]]


def mesh_quality(mesh: TriMesh) -> Dict[str, float]:
    p = mesh.vertices[mesh.triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    circumradius = a * b * c / (4.0 * mesh.signed_areas())
    edges = np.concatenate([a, b, c])
    return {
        "triangles": mesh.n_triangles,
        "vertices": mesh.n_vertices,
        "boundary_nodes": int(len(mesh.boundary_nodes)),
        "min_edge": float(edges.min()),
        "max_edge": float(edges.max()),
        "max_circumradius": float(circumradius.max()),
        "area": float(mesh.signed_areas().sum()),
    }


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain-text export: header, vertex lines, triangle lines, boundary loop indices."""
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_triangles} boundary {len(mesh.boundary_nodes)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines += [str(int(n)) for n in mesh.boundary_nodes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path, radius: Optional[float] = None) -> TriMesh:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    header = text[0].split()
    if len(header) != 6 or header[0::2] != ["vertices", "triangles", "boundary"]:
        raise MeshError(f"Malformed mesh header in {path}: {text[0]!r}")
    n_v, n_t, n_b = int(header[1]), int(header[3]), int(header[5])
    body = text[1:]
    vertices = np.array([[float(v) for v in line.split()] for line in body[:n_v]])
    triangles = np.array([[int(v) for v in line.split()] for line in body[n_v:n_v + n_t]], dtype=np.int64)
    boundary = np.array([int(line) for line in body[n_v + n_t:n_v + n_t + n_b]], dtype=np.int64)
    if radius is None:
        radius = float(np.linalg.norm(vertices[boundary], axis=1).mean())
    return TriMesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.column_stack([boundary, np.roll(boundary, -1)]),
        boundary_nodes=boundary,
        radius=radius,
    )
