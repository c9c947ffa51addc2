"""
Forward Solver - P1 FEM and D-N Matrix Assembly

For each voltage pattern:
  1. Impose the pattern on the boundary nodes and solve div(sigma grad u) = 0 with Dirichlet data
  2. Recover the boundary current density J = sigma grad u . nu at every boundary node
  3. Average J over each electrode arc (J_hat) and read the pattern at the electrode centers (V_hat)

The D-N matrix entry (i, j) is the inner product of J_hat for pattern j with V_hat for pattern i.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from inclusions.mesh import TriMesh, ElectrodeLayout, MIN_TRIANGLE_AREA, boundary_arc_nodes
from inclusions.phantom import ConductivitySpec, evaluate_tensor_field
from inclusions.shared import MeshError, SolverError, SingularMatrixError, FLUX_METHODS

PATTERN_KINDS = ("trig", "opposite")
RESIDUAL_TOLERANCE = 1e-10
MAX_REFINEMENT_STEPS = 3
MAX_CONDITION_NUMBER = 1e12
DEFAULT_NOISE_SCALE = 0.01

# ============================================================================
# Voltage Patterns
# ============================================================================


@dataclass(frozen=True)
class VoltagePattern:
    """
    trig:     index k >= 1, V(theta) = cos((k+1) theta / 2) / sqrt(pi) for odd k,
              sin(k theta / 2) / sqrt(pi) for even k.
    opposite: index m >= 1, +1 on electrode m-1 and -1 on electrode m-1+E/2 (0-based, mod E).
    """
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"Unknown pattern kind {self.kind!r}; expected one of {PATTERN_KINDS}")
        if int(self.index) != self.index or self.index < 1:
            raise ValueError(f"Pattern index must be a positive integer, got {self.index}")

    @property
    def frequency(self) -> int:
        return (self.index + 1) // 2 if self.index % 2 else self.index // 2

    def _opposite_pair(self, layout: ElectrodeLayout):
        e = layout.electrode_count
        if self.index > e:
            raise ValueError(f"Opposite pattern {self.index} needs at least {self.index} electrodes, got {e}")
        source = self.index - 1
        return source, (source + e // 2) % e

    def boundary_values(self, angles: np.ndarray, layout: ElectrodeLayout) -> np.ndarray:
        """Pattern evaluated at boundary node angles."""
        angles = np.asarray(angles, dtype=float)
        if self.kind == "trig":
            wave = np.cos if self.index % 2 else np.sin
            return wave(self.frequency * angles) / np.sqrt(np.pi)
        source, sink = self._opposite_pair(layout)
        owner = layout.arc_index(angles)
        return (owner == source).astype(float) - (owner == sink).astype(float)


def _trig_at_centers(pattern: VoltagePattern, electrode_count: int) -> np.ndarray:
    # Phase in turns is n/E with n = f*l mod E; quarter turns are exact.
    n = (pattern.frequency * np.arange(electrode_count)) % electrode_count
    values = np.empty(electrode_count)
    exact = (4 * n) % electrode_count == 0
    quarter = (4 * n[exact]) // electrode_count
    if pattern.index % 2:
        values[exact] = np.array([1.0, 0.0, -1.0, 0.0])[quarter]
        values[~exact] = np.cos(2.0 * np.pi * n[~exact] / electrode_count)
    else:
        values[exact] = np.array([0.0, 1.0, 0.0, -1.0])[quarter]
        values[~exact] = np.sin(2.0 * np.pi * n[~exact] / electrode_count)
    return values / np.sqrt(np.pi)


def discretize_pattern(pattern: VoltagePattern, layout: ElectrodeLayout) -> np.ndarray:
    """V_hat: the pattern read at the E electrode centers."""
    if pattern.kind == "trig":
        return _trig_at_centers(pattern, layout.electrode_count)
    source, sink = pattern._opposite_pair(layout)
    v = np.zeros(layout.electrode_count)
    v[source], v[sink] = 1.0, -1.0
    return v


def trig_patterns(count: int) -> List[VoltagePattern]:
    return [VoltagePattern("trig", k) for k in range(1, count + 1)]


def opposite_patterns(count: int, electrode_count: int) -> List[VoltagePattern]:
    if count > electrode_count:
        raise ValueError(f"Unique opposite-injection patterns are not possible for M={count} > E={electrode_count}")
    return [VoltagePattern("opposite", m) for m in range(1, count + 1)]


def make_patterns(kind: str, count: int, electrode_count: int) -> List[VoltagePattern]:
    if kind == "trig":
        return trig_patterns(count)
    if kind == "opposite":
        return opposite_patterns(count, electrode_count)
    raise ValueError(f"Unknown pattern kind {kind!r}; expected one of {PATTERN_KINDS}")

# ============================================================================
# Stiffness Assembly & Dirichlet Solve
# ============================================================================


def element_gradients(mesh: TriMesh) -> np.ndarray:
    """Gradients of the three P1 hat functions per element, shape (M, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return np.stack([b, c], axis=-1) / (2.0 * mesh.signed_areas())[:, None, None]


def element_stiffness(mesh: TriMesh, spec: ConductivitySpec) -> np.ndarray:
    """Per-element 3x3 matrices area * G sigma G^T with sigma taken at the centroid."""
    area = mesh.signed_areas()
    if np.any(area < MIN_TRIANGLE_AREA):
        bad = int(np.argmin(area))
        raise MeshError(f"Degenerate triangle {bad} with area {area[bad]:.3e} m^2")
    grads = element_gradients(mesh)
    sigma = evaluate_tensor_field(spec, mesh.centroids())
    ke = area[:, None, None] * np.einsum("eia,eab,ejb->eij", grads, sigma, grads)
    return 0.5 * (ke + ke.transpose(0, 2, 1))


@dataclass(eq=False)
class FemSystem:
    mesh: TriMesh
    stiffness: sp.csr_matrix
    dirichlet_nodes: np.ndarray
    interior_nodes: np.ndarray

    @cached_property
    def k_ii(self) -> sp.csc_matrix:
        return self.stiffness[self.interior_nodes][:, self.interior_nodes].tocsc()

    @cached_property
    def k_ib(self) -> sp.csr_matrix:
        return self.stiffness[self.interior_nodes][:, self.dirichlet_nodes].tocsr()

    @cached_property
    def factor(self):
        return splu(self.k_ii)


def assemble_stiffness(mesh: TriMesh, spec: ConductivitySpec) -> FemSystem:
    ke = element_stiffness(mesh, spec)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    stiffness = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    dirichlet = np.asarray(mesh.boundary_nodes)
    interior = np.setdiff1d(np.arange(n), dirichlet)
    return FemSystem(mesh=mesh, stiffness=stiffness, dirichlet_nodes=dirichlet, interior_nodes=interior)


def solve_dirichlet(system: FemSystem, boundary_values: np.ndarray) -> np.ndarray:
    """
    Nodal solution with u = boundary_values on the Dirichlet nodes.

    Sparse LU on the reduced system followed by iterative refinement until the relative
    residual drops to RESIDUAL_TOLERANCE.
    """
    g = np.asarray(boundary_values, dtype=float)
    if g.shape != system.dirichlet_nodes.shape:
        raise ValueError(f"Expected {len(system.dirichlet_nodes)} boundary values, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("Boundary values must be finite")

    u = np.zeros(system.mesh.n_vertices)
    u[system.dirichlet_nodes] = g
    if len(system.interior_nodes) == 0:
        return u

    rhs = -(system.k_ib @ g)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return u

    x = system.factor.solve(rhs)
    history: List[float] = []
    for step in range(MAX_REFINEMENT_STEPS + 1):
        residual = rhs - system.k_ii @ x
        history.append(float(np.linalg.norm(residual) / rhs_norm))
        if history[-1] <= RESIDUAL_TOLERANCE:
            break
        if step == MAX_REFINEMENT_STEPS:
            raise SolverError(
                f"Dirichlet solve did not reach relative residual {RESIDUAL_TOLERANCE:g} "
                f"after {MAX_REFINEMENT_STEPS} refinement steps",
                residual_history=history,
            )
        x = x + system.factor.solve(residual)

    u[system.interior_nodes] = x
    return u

# ============================================================================
# Boundary Flux & Electrode Averages
# ============================================================================


def boundary_weights(mesh: TriMesh) -> np.ndarray:
    """Integral of each boundary hat function along the boundary polygon."""
    edges = mesh.boundary_edges
    lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    w = np.zeros(mesh.n_vertices)
    np.add.at(w, edges[:, 0], 0.5 * lengths)
    np.add.at(w, edges[:, 1], 0.5 * lengths)
    return w[mesh.boundary_nodes]


def _element_average_flux(mesh: TriMesh, spec: ConductivitySpec, u: np.ndarray) -> np.ndarray:
    grads = element_gradients(mesh)
    grad_u = np.einsum("eia,ei->ea", grads, u[mesh.triangles])
    sigma = evaluate_tensor_field(spec, mesh.centroids())
    current = np.einsum("eab,eb->ea", sigma, grad_u)

    xy = mesh.vertices[mesh.boundary_nodes]
    normals = xy / np.linalg.norm(xy, axis=1)[:, None]
    position = np.full(mesh.n_vertices, -1)
    position[mesh.boundary_nodes] = np.arange(len(mesh.boundary_nodes))

    total = np.zeros(len(mesh.boundary_nodes))
    count = np.zeros(len(mesh.boundary_nodes))
    for corner in range(3):
        slot = position[mesh.triangles[:, corner]]
        on_boundary = slot >= 0
        s = slot[on_boundary]
        np.add.at(total, s, np.einsum("ea,ea->e", current[on_boundary], normals[s]))
        np.add.at(count, s, 1.0)
    return total / count


def boundary_flux(mesh: TriMesh, spec: ConductivitySpec, u: np.ndarray, method: str = "residual",
                  system: Optional[FemSystem] = None) -> np.ndarray:
    """
    Current density sigma grad u . nu per boundary node (boundary_nodes order).

    residual:        (K u)_i divided by the boundary hat-function measure of node i
    element_average: mean of the element-constant sigma grad u . nu over the elements touching
                     node i, with nu the exact outward normal of the circle
                     (first order in h: centroids sit inside the circle, so high
                     frequencies read low)
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValueError(f"Expected {mesh.n_vertices} nodal values, got shape {u.shape}")
    if method not in FLUX_METHODS:
        raise ValueError(f"Unknown flux method {method!r}; expected one of {FLUX_METHODS}")
    if method == "element_average":
        return _element_average_flux(mesh, spec, u)
    system = system or assemble_stiffness(mesh, spec)
    return (system.stiffness @ u)[mesh.boundary_nodes] / boundary_weights(mesh)


@lru_cache(maxsize=32)
def electrode_weights(mesh: TriMesh, layout: ElectrodeLayout) -> np.ndarray:
    """
    (E, K) matrix W with J_hat = W @ J: exact integral of the periodic piecewise-linear
    interpolant of J over each arc, divided by the arc angle.

    This is the trapezoidal rule over the arc's ordered boundary nodes, closed at both arc ends
    with the interpolated value, divided by the arc length 2 pi R / E. Arc length is R times the
    arc angle, so the factors of R cancel.
    """
    angles = mesh.boundary_angles()
    k = len(angles)
    for l in range(layout.electrode_count):
        if len(boundary_arc_nodes(mesh, layout, l)) < 2:
            raise MeshError(f"Electrode {l} covers fewer than 2 boundary nodes; mesh too coarse for E={layout.electrode_count}")

    order = np.argsort(angles, kind="stable")
    shifts = np.arange(-1, 3)
    t = (angles[order][None, :] + 2.0 * np.pi * shifts[:, None]).ravel()
    idx = np.tile(order, len(shifts))

    w = np.zeros((layout.electrode_count, k))
    seg_lo, seg_hi = t[:-1], t[1:]
    width = seg_hi - seg_lo
    for l, (a, b) in enumerate(layout.arcs):
        lo = np.clip(seg_lo, a, b)
        hi = np.clip(seg_hi, a, b)
        active = hi > lo
        d = width[active]
        left = ((seg_hi[active] - lo[active]) ** 2 - (seg_hi[active] - hi[active]) ** 2) / (2.0 * d)
        right = ((hi[active] - seg_lo[active]) ** 2 - (lo[active] - seg_lo[active]) ** 2) / (2.0 * d)
        np.add.at(w[l], idx[:-1][active], left)
        np.add.at(w[l], idx[1:][active], right)
    w /= layout.arc_width
    w.setflags(write=False)
    return w


def electrode_average_flux(j: np.ndarray, mesh: TriMesh, layout: ElectrodeLayout) -> np.ndarray:
    """J_hat: arc average of the boundary current density for each electrode."""
    j = np.asarray(j, dtype=float)
    if j.shape != (len(mesh.boundary_nodes),):
        raise ValueError(f"Expected {len(mesh.boundary_nodes)} boundary values, got shape {j.shape}")
    return electrode_weights(mesh, layout) @ j

# ============================================================================
# D-N Matrices
# ============================================================================


@dataclass(frozen=True, eq=False)
class DNMatrix:
    entries: np.ndarray
    pattern: str
    electrode_count: int
    noisy: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"D-N matrix must be square, got shape {entries.shape}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    def flatten(self) -> np.ndarray:
        return self.entries.reshape(-1).copy()

    def leading(self, m: int) -> "DNMatrix":
        if not 1 <= m <= self.size:
            raise ValueError(f"Leading submatrix size must lie in 1..{self.size}, got {m}")
        return DNMatrix(self.entries[:m, :m], self.pattern, self.electrode_count, self.noisy, self.seed)


def dn_matrix(mesh: TriMesh, spec: ConductivitySpec, layout: ElectrodeLayout,
              patterns: Sequence[VoltagePattern], flux_method: str = "residual",
              system: Optional[FemSystem] = None) -> DNMatrix:
    """Clean D-N matrix for the given patterns."""
    m = len(patterns)
    if m == 0 or m > layout.electrode_count:
        raise ValueError(f"Pattern count must lie in 1..{layout.electrode_count}, got {m}")
    kinds = {p.kind for p in patterns}
    if len(kinds) != 1:
        raise ValueError(f"Patterns must share one kind, got {sorted(kinds)}")

    system = system or assemble_stiffness(mesh, spec)
    angles = mesh.boundary_angles()
    weights = electrode_weights(mesh, layout)

    v_hat = np.stack([discretize_pattern(p, layout) for p in patterns])
    j_hat = np.zeros((m, layout.electrode_count))
    for j, pattern in enumerate(patterns):
        try:
            u = solve_dirichlet(system, pattern.boundary_values(angles, layout))
        except SolverError as e:
            raise SolverError(f"Pattern {pattern.kind} {pattern.index}: {e}", e.residual_history) from e
        j_hat[j] = weights @ boundary_flux(mesh, spec, u, flux_method, system)

    return DNMatrix(v_hat @ j_hat.T, kinds.pop(), layout.electrode_count)


def add_noise(matrix: DNMatrix, seed: int, scale: float = DEFAULT_NOISE_SCALE) -> DNMatrix:
    """L' = L + scale * N with N i.i.d. standard normal; the input is left unchanged."""
    if scale < 0:
        raise ValueError(f"Noise scale must be non-negative, got {scale}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(matrix.entries.shape)
    return DNMatrix(matrix.entries + scale * noise, matrix.pattern, matrix.electrode_count, True, seed)


def dn_from_nd(r_matrix: np.ndarray, name: str = "R") -> DNMatrix:
    """Inverts a measured N-D matrix; measured data gets no noise."""
    r = np.asarray(r_matrix, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"N-D matrix {name} must be square, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError(f"N-D matrix {name} has non-finite entries")
    cond = np.linalg.cond(r)
    if not np.isfinite(cond) or cond > MAX_CONDITION_NUMBER:
        raise SingularMatrixError(f"N-D matrix {name} is singular (condition number {cond:.3e})")
    return DNMatrix(np.linalg.inv(r), "measured", r.shape[0])
