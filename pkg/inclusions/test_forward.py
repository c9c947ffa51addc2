import unittest

import numpy as np
from scipy.integrate import trapezoid

from inclusions.mesh import generate_disk_mesh, electrode_layout, boundary_arc_nodes
from inclusions.phantom import ConductivitySpec, Inclusion, TensorSpec
from inclusions.forward import (
    VoltagePattern, DNMatrix, assemble_stiffness, element_stiffness, solve_dirichlet, boundary_flux,
    boundary_weights, discretize_pattern, electrode_average_flux, dn_matrix, add_noise, dn_from_nd,
    trig_patterns, opposite_patterns,
)
from inclusions.shared import SingularMatrixError

RADIUS = 0.28
GAMMA = 1.45


def homogeneous(gamma: float = GAMMA) -> ConductivitySpec:
    return ConductivitySpec(TensorSpec.iso(gamma), tank_radius=RADIUS)


def oracle_diagonal(n: int, electrode_count: int = 16) -> float:
    """gamma n / R times the discrete trig norm (E / (2 pi)) and the arc-average factor."""
    x = n * np.pi / electrode_count
    return GAMMA * n / RADIUS * (electrode_count / (2.0 * np.pi)) * np.sin(x) / x


def worst_oracle_error(mesh) -> float:
    layout = electrode_layout(16)
    L = dn_matrix(mesh, homogeneous(), layout, trig_patterns(16)).entries
    errors = []
    for k in range(1, 15):
        n = (k + 1) // 2
        errors.append(abs(L[k - 1, k - 1] / oracle_diagonal(n) - 1.0))
    return max(errors)


class TestAssembly(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = generate_disk_mesh(RADIUS, 0.05, seed=2)

    def test_laplace_element_matrices_match_cotangent_formula(self):
        """sigma = I gives K_ij = -cot(angle opposite edge ij) / 2."""
        ke = element_stiffness(self.mesh, ConductivitySpec(TensorSpec.iso(1.0), tank_radius=RADIUS))
        rng = np.random.default_rng(0)
        for e in rng.choice(self.mesh.n_triangles, size=5, replace=False):
            p = self.mesh.vertices[self.mesh.triangles[e]]
            expected = np.zeros((3, 3))
            for k in range(3):
                i, j = (k + 1) % 3, (k + 2) % 3
                u, v = p[i] - p[k], p[j] - p[k]
                cot = np.dot(u, v) / abs(u[0] * v[1] - u[1] * v[0])
                expected[i, j] = expected[j, i] = -0.5 * cot
            for i in range(3):
                expected[i, i] = -expected[i].sum()
            np.testing.assert_allclose(ke[e], expected, rtol=1e-10, atol=1e-12)

    def test_constants_in_kernel_and_symmetry(self):
        system = assemble_stiffness(self.mesh, homogeneous())
        k = system.stiffness
        np.testing.assert_allclose(k @ np.ones(self.mesh.n_vertices), 0.0, atol=1e-10)
        self.assertLess(abs(k - k.T).max(), 1e-12)

    def test_linear_in_sigma(self):
        k1 = assemble_stiffness(self.mesh, homogeneous(1.0)).stiffness
        k2 = assemble_stiffness(self.mesh, homogeneous(2.0)).stiffness
        self.assertLess(abs(k2 - 2.0 * k1).max(), 1e-12)

    def test_reduced_matrix_positive_definite(self):
        self.assertLessEqual(self.mesh.n_vertices, 500)
        inc = Inclusion((0.05, 0.05), 0.0388, TensorSpec.sym(10.0, 6, 8, 3))
        system = assemble_stiffness(self.mesh, ConductivitySpec(TensorSpec.diag(1.45, 2, 5), (inc,), tank_radius=RADIUS))
        eig = np.linalg.eigvalsh(system.k_ii.toarray())
        self.assertGreater(eig.min(), 0.0)


class TestSolveDirichlet(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = generate_disk_mesh(RADIUS, 0.0138, seed=0)
        cls.system = assemble_stiffness(cls.mesh, homogeneous())
        cls.theta = cls.mesh.boundary_angles()

    def test_constant_boundary_data(self):
        u = solve_dirichlet(self.system, np.ones(len(self.theta)))
        np.testing.assert_allclose(u, 1.0, atol=1e-10)

    def test_cosine_matches_analytic(self):
        u = solve_dirichlet(self.system, np.cos(self.theta))
        np.testing.assert_array_equal(u[self.mesh.boundary_nodes], np.cos(self.theta))
        x = self.mesh.vertices[:, 0]
        self.assertLessEqual(np.max(np.abs(u - x / RADIUS)), 0.01)

    def test_sine_vanishes_at_center(self):
        u = solve_dirichlet(self.system, np.sin(self.theta))
        center = int(np.argmin(np.linalg.norm(self.mesh.vertices, axis=1)))
        self.assertLess(abs(u[center]), 1e-3)

    def test_discrete_maximum_principle(self):
        g = np.random.default_rng(4).uniform(-1, 1, size=len(self.theta))
        u = solve_dirichlet(self.system, g)
        self.assertLessEqual(u.max(), g.max() + 1e-9)
        self.assertGreaterEqual(u.min(), g.min() - 1e-9)

    def test_rejects_bad_boundary_values(self):
        with self.assertRaises(ValueError):
            solve_dirichlet(self.system, np.ones(3))
        g = np.ones(len(self.theta))
        g[0] = np.nan
        with self.assertRaises(ValueError):
            solve_dirichlet(self.system, g)


class TestBoundaryFlux(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = generate_disk_mesh(RADIUS, 0.0138, seed=0)
        cls.spec = homogeneous()
        cls.system = assemble_stiffness(cls.mesh, cls.spec)
        cls.theta = cls.mesh.boundary_angles()
        cls.layout = electrode_layout(16)

    def test_constant_potential_has_no_flux(self):
        u = np.ones(self.mesh.n_vertices)
        for method in ("residual", "element_average"):
            np.testing.assert_allclose(boundary_flux(self.mesh, self.spec, u, method, self.system), 0.0, atol=1e-9)

    def test_electrode_averages_match_harmonic_oracle(self):
        for n in range(1, 8):
            for wave in (np.cos, np.sin):
                u = solve_dirichlet(self.system, wave(n * self.theta))
                j_hat = electrode_average_flux(boundary_flux(self.mesh, self.spec, u, system=self.system),
                                               self.mesh, self.layout)
                x = n * np.pi / 16
                expected = GAMMA * n / RADIUS * wave(n * self.layout.centers) * np.sin(x) / x
                scale = GAMMA * n / RADIUS
                self.assertLessEqual(np.max(np.abs(j_hat - expected)) / scale, 0.02, f"n={n}")

    def test_element_average_exact_for_linear_potential(self):
        u = solve_dirichlet(self.system, np.cos(self.theta))
        j = boundary_flux(self.mesh, self.spec, u, "element_average")
        np.testing.assert_allclose(j, GAMMA * np.cos(self.theta) / RADIUS, atol=1e-7)

    def test_element_average_lags_oracle_at_high_frequency(self):
        """Element-constant currents sit inside the disk, so r^(n-1) decay biases them low."""
        u = solve_dirichlet(self.system, np.cos(7 * self.theta))
        x = 7 * np.pi / 16
        expected = GAMMA * 7 / RADIUS * np.cos(7 * self.layout.centers) * np.sin(x) / x
        errors = {}
        for method in ("residual", "element_average"):
            j_hat = electrode_average_flux(boundary_flux(self.mesh, self.spec, u, method, self.system),
                                           self.mesh, self.layout)
            errors[method] = np.max(np.abs(j_hat - expected)) / (GAMMA * 7 / RADIUS)
        self.assertLessEqual(errors["residual"], 0.02)
        self.assertGreater(errors["element_average"], 0.03)

    def test_conservation_with_inclusion(self):
        inc = Inclusion((0.08, -0.06), 0.0388, TensorSpec.iso(9.0))
        spec = ConductivitySpec(TensorSpec.iso(GAMMA), (inc,), tank_radius=RADIUS)
        system = assemble_stiffness(self.mesh, spec)
        w = boundary_weights(self.mesh)
        for pattern in opposite_patterns(4, 16):
            u = solve_dirichlet(system, pattern.boundary_values(self.theta, self.layout))
            j = boundary_flux(self.mesh, spec, u, system=system)
            self.assertLessEqual(abs(np.sum(w * j)) / np.sum(w * np.abs(j)), 0.02)

    def test_flux_doubles_with_conductivity(self):
        u = solve_dirichlet(self.system, np.cos(2 * self.theta))
        j1 = boundary_flux(self.mesh, self.spec, u, system=self.system)
        j2 = boundary_flux(self.mesh, homogeneous(2 * GAMMA), u)
        np.testing.assert_allclose(j2, 2 * j1, rtol=1e-10, atol=1e-10)

    def test_unknown_method_rejected(self):
        with self.assertRaises(ValueError):
            boundary_flux(self.mesh, self.spec, np.zeros(self.mesh.n_vertices), "gradient_patch")


class TestElectrodeAverages(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = generate_disk_mesh(RADIUS, 0.0138, seed=0)
        cls.layout = electrode_layout(16)
        cls.theta = cls.mesh.boundary_angles()

    def test_constant_density(self):
        np.testing.assert_allclose(electrode_average_flux(np.full(len(self.theta), 3.5), self.mesh, self.layout), 3.5,
                                   rtol=1e-12)

    def test_cosine_arc_average(self):
        j = GAMMA * np.cos(self.theta) / RADIUS
        j_hat = electrode_average_flux(j, self.mesh, self.layout)
        expected = GAMMA / RADIUS * np.cos(self.layout.centers) * np.sin(np.pi / 16) / (np.pi / 16)
        self.assertLessEqual(np.max(np.abs(j_hat - expected)), 0.01 * GAMMA / RADIUS)

    def test_odd_density_gives_antisymmetric_averages(self):
        j_hat = electrode_average_flux(np.sin(self.theta), self.mesh, self.layout)
        for l in range(1, 16):
            self.assertAlmostEqual(j_hat[l], -j_hat[16 - l], places=12)

    def test_matches_trapezoid_over_arc_nodes(self):
        rng = np.random.default_rng(6)
        j = rng.normal(size=len(self.theta))
        position = {int(v): k for k, v in enumerate(self.mesh.boundary_nodes)}
        order = np.argsort(self.theta)
        arc_length = 2.0 * np.pi * RADIUS / 16
        expected = np.zeros(16)
        for l in range(16):
            start, end = self.layout.arcs[l]
            nodes = [position[int(v)] for v in boundary_arc_nodes(self.mesh, self.layout, l)]
            phase = np.mod(self.theta[nodes] - start, 2.0 * np.pi)
            phase[phase > np.pi] -= 2.0 * np.pi
            ends = np.interp([start, end], self.theta[order], j[order], period=2.0 * np.pi)
            s = RADIUS * np.concatenate([[0.0], phase, [end - start]])
            values = np.concatenate([[ends[0]], j[nodes], [ends[1]]])
            expected[l] = trapezoid(values, s) / arc_length
        np.testing.assert_allclose(electrode_average_flux(j, self.mesh, self.layout), expected,
                                   rtol=1e-10, atol=1e-12)


class TestPatterns(unittest.TestCase):
    def test_first_trig_pattern_at_zero(self):
        v = discretize_pattern(VoltagePattern("trig", 1), electrode_layout(16))
        self.assertAlmostEqual(v[0], 0.564190, places=6)

    def test_sixteenth_trig_pattern_is_zero(self):
        v = discretize_pattern(VoltagePattern("trig", 16), electrode_layout(16))
        self.assertTrue(np.all(v == 0.0))

    def test_opposite_pattern(self):
        v = discretize_pattern(VoltagePattern("opposite", 1), electrode_layout(16))
        expected = np.zeros(16)
        expected[0], expected[8] = 1.0, -1.0
        np.testing.assert_array_equal(v, expected)

    def test_trig_orthogonality_at_centers(self):
        layout = electrode_layout(16)
        v = np.stack([discretize_pattern(p, layout) for p in trig_patterns(14)])
        np.testing.assert_allclose(v @ v.T, (8 / np.pi) * np.eye(14), atol=1e-12)

    def test_too_many_opposite_patterns(self):
        with self.assertRaises(ValueError):
            opposite_patterns(5, 4)


class TestDNMatrix(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = generate_disk_mesh(RADIUS, 0.0138, seed=0)
        cls.layout = electrode_layout(16)
        cls.L = dn_matrix(cls.mesh, homogeneous(), cls.layout, trig_patterns(16))

    def test_diagonal_matches_oracle(self):
        self.assertAlmostEqual(self.L.entries[0, 0], 13.19, delta=0.03 * 13.19)
        for k in range(1, 15):
            n = (k + 1) // 2
            self.assertLessEqual(abs(self.L.entries[k - 1, k - 1] / oracle_diagonal(n) - 1.0), 0.03, f"k={k}")

    def test_off_diagonal_small(self):
        d = np.abs(np.diag(self.L.entries))
        for i in range(14):
            for j in range(14):
                if i != j:
                    self.assertLessEqual(abs(self.L.entries[i, j]), 0.02 * max(d[i], d[j]), f"({i + 1}, {j + 1})")

    def test_row_sixteen_exactly_zero(self):
        self.assertTrue(np.all(self.L.entries[15] == 0.0))
        zero_rows = [i for i in range(16) if np.all(self.L.entries[i] == 0.0)]
        self.assertEqual(zero_rows, [15])

    def test_homogeneous_in_sigma(self):
        doubled = dn_matrix(self.mesh, homogeneous(2 * GAMMA), self.layout, trig_patterns(16))
        np.testing.assert_allclose(doubled.entries, 2 * self.L.entries, rtol=1e-8, atol=1e-8 * np.abs(self.L.entries).max())

    def test_refinement_reduces_oracle_error(self):
        coarse = worst_oracle_error(self.mesh)
        fine = worst_oracle_error(generate_disk_mesh(RADIUS, 0.0069, seed=0))
        self.assertGreaterEqual(coarse / fine, 1.5)

    def test_more_patterns_than_electrodes_rejected(self):
        with self.assertRaises(ValueError):
            dn_matrix(self.mesh, homogeneous(), electrode_layout(4), trig_patterns(5))

    def test_flatten_and_leading(self):
        flat = self.L.flatten()
        self.assertEqual(flat.shape, (256,))
        self.assertEqual(flat[1], self.L.entries[0, 1])
        np.testing.assert_array_equal(self.L.leading(4).entries, self.L.entries[:4, :4])


class TestNoise(unittest.TestCase):
    def test_zero_scale_is_identity(self):
        clean = DNMatrix(np.arange(16.0).reshape(4, 4), "trig", 16)
        np.testing.assert_array_equal(add_noise(clean, seed=1, scale=0.0).entries, clean.entries)

    def test_fixed_seed_is_deterministic(self):
        clean = DNMatrix(np.eye(16), "trig", 16)
        a, b = add_noise(clean, seed=7), add_noise(clean, seed=7)
        np.testing.assert_array_equal(a.entries, b.entries)
        np.testing.assert_array_equal(clean.entries, np.eye(16))
        self.assertTrue(a.noisy)

    def test_noise_moments(self):
        clean = DNMatrix(np.zeros((317, 317)), "trig", 16)
        delta = add_noise(clean, seed=2024).entries.ravel()
        self.assertGreaterEqual(delta.size, 100000)
        self.assertLessEqual(abs(delta.mean()), 3e-2 / np.sqrt(delta.size))
        self.assertAlmostEqual(delta.std() / 1e-2, 1.0, delta=0.02)

    def test_noise_is_absolute(self):
        small = DNMatrix(np.full((16, 16), 0.001), "trig", 16)
        large = DNMatrix(np.full((16, 16), 1000.0), "trig", 16)
        np.testing.assert_allclose(add_noise(large, seed=3).entries - large.entries,
                                   add_noise(small, seed=3).entries - small.entries, atol=1e-9)


class TestDnFromNd(unittest.TestCase):
    def test_identity(self):
        np.testing.assert_allclose(dn_from_nd(np.eye(3)).entries, np.eye(3))

    def test_diagonal(self):
        np.testing.assert_allclose(dn_from_nd(np.diag([2.0, 4.0])).entries, np.diag([0.5, 0.25]))

    def test_singular(self):
        with self.assertRaises(SingularMatrixError):
            dn_from_nd(np.array([[1.0, 1.0], [1.0, 1.0]]))

    def test_not_square(self):
        with self.assertRaises(ValueError):
            dn_from_nd(np.ones((2, 3)))


if __name__ == '__main__':
    unittest.main()
