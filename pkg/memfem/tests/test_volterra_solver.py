import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.integrate import quad, solve_ivp

from memfem.galerkin_spaces import AssembledPair, ScalarLaplace, build_space
from memfem.kernels import ExponentialKernel, PowerLawKernel, ZeroKernel
from memfem.mesh import DIRICHLET, NEUMANN, Mesh1D
from memfem.volterra_solver import (
    PicardCertificate,
    SemidiscreteSystem,
    Trajectory,
    bound_Z,
    bound_Z0,
    initial_coefficients,
    picard_solve,
    product_integration_weights,
    time_step_solve,
    to_first_order,
    to_integral_equation,
    trace_constant,
)


def scalar_system(stiffness, kernel, horizon, alpha0, velocity0, load=None, mass=1.0):
    pair = AssembledPair(sparse.csr_matrix([[mass]]), sparse.csr_matrix([[stiffness]]))
    return SemidiscreteSystem(pair, kernel, horizon, [alpha0], [velocity0], load=load)


def sine_modes(*amplitudes):
    def v(x):
        return sum(a * np.sin((k + 1) * np.pi * x) for k, a in enumerate(amplitudes))

    return v


def spectral_system(kernel, horizon, m=4, u0=None, u1=None):
    space = build_space((0.0, 1.0), kind="spectral", m=m)
    return SemidiscreteSystem.from_problem(
        space, ScalarLaplace(), kernel, horizon, u0=u0, u1=u1, projections=("fourier", "fourier")
    )


class InitialCoefficientsTest(unittest.TestCase):
    def test_spectral(self):
        space = build_space((0.0, 1.0), kind="spectral", m=4)
        for projection in ("l2", "ritz", "fourier"):
            alpha0, velocity0 = initial_coefficients(
                space, space.basis_function(0), None, (projection, "l2")
            )
            np.testing.assert_allclose(alpha0, [1, 0, 0, 0], atol=1e-12)
            np.testing.assert_array_equal(velocity0, np.zeros(4))

        alpha0, _ = initial_coefficients(space, sine_modes(1.0), None, ("fourier", "l2"))
        np.testing.assert_allclose(alpha0, [np.sqrt(2) / 2, 0, 0, 0], atol=1e-12)

    def test_fem(self):
        space = build_space(Mesh1D.uniform(8))
        expected = np.zeros(7)
        expected[2] = 1.0
        v = space.basis_function(2)

        alpha0, velocity0 = initial_coefficients(space, v, v, ("interpolation", "l2"))
        np.testing.assert_allclose(alpha0, expected, atol=1e-14)
        np.testing.assert_allclose(velocity0, expected, atol=1e-12)

        alpha0, _ = initial_coefficients(space, v, None, ("ritz", "l2"))
        np.testing.assert_allclose(alpha0, expected, atol=1e-7)

    def test_invalid(self):
        space = build_space(Mesh1D.uniform(8))
        v = sine_modes(1.0)
        self.assertRaises(ValueError, initial_coefficients, space, v, None, ("fourier", "l2"))
        self.assertRaises(ValueError, initial_coefficients, space, v, None, ("h1", "l2"))
        self.assertRaises(ValueError, initial_coefficients, space, v, None, ("l2",))


class SemidiscreteSystemTest(unittest.TestCase):
    def test_rejects_inadmissible_kernel(self):
        self.assertRaises(ValueError, scalar_system, 1.0, PowerLawKernel(0.5, 1.0), 1.0, 1.0, 0.0)
        self.assertRaises(ValueError, scalar_system, 1.0, ZeroKernel(), 0.0, 1.0, 0.0)

    def test_shape_mismatch(self):
        pair = AssembledPair(sparse.identity(2, format="csr"), sparse.identity(2, format="csr"))
        self.assertRaises(ValueError, SemidiscreteSystem, pair, ZeroKernel(), 1.0, [1.0], [0.0])

    def test_from_problem(self):
        system = spectral_system(ExponentialKernel(1.0, 2.0), 1.0, m=3, u0=sine_modes(0, 1.0))
        self.assertEqual(system.dimension, 3)
        np.testing.assert_allclose(system.alpha0, [0, np.sqrt(2) / 2, 0], atol=1e-12)
        np.testing.assert_array_equal(system.load_at(0.3), np.zeros(3))
        self.assertAlmostEqual(system.kappa, (1 - np.exp(-2)) / 2)


class FirstOrderTest(unittest.TestCase):
    def test_blocks(self):
        first_order = to_first_order(scalar_system(3.0, ZeroKernel(), 1.0, 1.0, 0.0, mass=2.0))
        np.testing.assert_allclose(first_order.block_mass.toarray(), 2 * np.eye(2))
        np.testing.assert_allclose(first_order.block_stiffness.toarray(), [[0, -2], [3, 0]])
        np.testing.assert_allclose(first_order.block_memory.toarray(), [[0, 0], [3, 0]])
        np.testing.assert_allclose(first_order.generator(), [[0, -1], [1.5, 0]])
        np.testing.assert_allclose(first_order.memory(), [[0, 0], [1.5, 0]])

    def test_memory_block_action(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 3))
        stiffness = a @ a.T + 3 * np.eye(3)
        pair = AssembledPair(sparse.identity(3, format="csr"), sparse.csr_matrix(stiffness))
        system = SemidiscreteSystem(pair, ZeroKernel(), 1.0, np.zeros(3), np.zeros(3))
        first_order = to_first_order(system)

        state = rng.normal(size=6)
        expected = np.concatenate((np.zeros(3), stiffness @ state[:3]))
        np.testing.assert_allclose(first_order.block_memory @ state, expected)

    def test_residual_of_exact_solution(self):
        kernel = ExponentialKernel(c=0.5, rate=1.0)
        stiffness = 3.0

        def memory(g, t):
            return quad(lambda s: kernel(t - s) * g(s), 0, t, epsabs=1e-14, epsrel=1e-13)[0]

        def load(t):
            return np.array([2 * np.cos(t) - stiffness * memory(np.cos, t)])

        system = scalar_system(stiffness, kernel, 1.0, 1.0, 0.0, load=load)
        first_order = to_first_order(system)
        for t in (0.0, 0.4, 0.9):
            state = np.array([np.cos(t), -np.sin(t)])
            rate = np.array([-np.sin(t), -np.cos(t)])
            memory_integral = np.array(
                [memory(np.cos, t), memory(lambda s: -np.sin(s), t)]
            )
            residual = first_order.residual(t, state, rate, memory_integral)
            np.testing.assert_allclose(residual, 0.0, atol=1e-8)


class IntegralEquationTest(unittest.TestCase):
    def test_kernel_matrix(self):
        ie = to_integral_equation(scalar_system(3.0, ZeroKernel(), 1.0, 1.0, 0.0))
        np.testing.assert_allclose(ie.kernel_matrix(0.7, 0.2), [[0, 1], [-3, 0]])
        self.assertRaises(ValueError, ie.kernel_matrix, 0.2, 0.7)

        kernel = PowerLawKernel.from_kappa(0.5, 0.5, 1.0)
        ie = to_integral_equation(scalar_system(3.0, kernel, 1.0, 1.0, 0.0))
        np.testing.assert_allclose(ie.kernel_matrix(0.6, 0.6), ie.constant_part)
        np.testing.assert_allclose(
            ie.kernel_matrix(1.0, 0.0), [[0, 1], [-3 + 3 * 0.5, 0]], atol=1e-12
        )

    def test_forcing(self):
        times = np.linspace(0, 1, 9)

        ie = to_integral_equation(scalar_system(3.0, ZeroKernel(), 1.0, 1.0, 2.0))
        np.testing.assert_array_equal(ie.forcing(times), np.tile([1.0, 2.0], (9, 1)))

        def load(t):
            return np.array([1.0])

        ie = to_integral_equation(scalar_system(3.0, ZeroKernel(), 1.0, 1.0, 2.0, load, 2.0))
        forcing = ie.forcing(times)
        np.testing.assert_allclose(forcing[:, 0], 1.0)
        np.testing.assert_allclose(forcing[:, 1], 2.0 + times / 2, atol=1e-14)


class PicardTest(unittest.TestCase):
    def test_constant_solution(self):
        ie = to_integral_equation(scalar_system(0.0, ZeroKernel(), 1.0, 1.0, 0.0))
        with self.assertWarns(UserWarning):
            result = picard_solve(ie, 16)
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 1)
        np.testing.assert_array_equal(result.trajectory.displacement, 1.0)

    def test_linear_solution(self):
        ie = to_integral_equation(scalar_system(0.0, ZeroKernel(), 1.0, 1.0, 1.0))
        with self.assertWarns(UserWarning):
            result = picard_solve(ie, 16)
        self.assertTrue(result.converged)
        self.assertLessEqual(result.iterations, 3)
        np.testing.assert_allclose(
            result.trajectory.displacement[:, 0], 1 + result.trajectory.times, atol=1e-14
        )
        np.testing.assert_allclose(result.trajectory.velocity, 1.0)

    def test_harmonic_oscillator(self):
        ie = to_integral_equation(scalar_system(4.0, ZeroKernel(), 1.0, 1.0, 0.0))
        errors = []
        for n_steps in (256, 512):
            result = picard_solve(ie, n_steps, max_iters=100)
            self.assertTrue(result.converged)
            times = result.trajectory.times
            errors.append(np.abs(result.trajectory.displacement[:, 0] - np.cos(2 * times)).max())
        self.assertLess(errors[0], 1e-4)
        self.assertGreater(errors[0] / errors[1], 3)

    def test_certificate(self):
        kernel = ExponentialKernel(1.0, 2.0)
        horizon = 4 / (1.5 * 16 * np.pi ** 2)
        system = spectral_system(
            kernel, horizon, u0=sine_modes(1.0, 0, 0.5), u1=sine_modes(0, 2.0)
        )
        z = bound_Z(system)
        self.assertLessEqual(z * horizon, 4)

        result = picard_solve(to_integral_equation(system), 256, max_iters=60)
        self.assertTrue(result.converged)
        self.assertLess(result.iterations, 40)

        certificate = result.certificate
        self.assertEqual(len(certificate.iterations), result.iterations)
        self.assertTrue(certificate.dominated(n_max=10))
        self.assertTrue(certificate.dominated())
        bounds = [it["bound"] for it in certificate.iterations]
        self.assertTrue(all(b > 0 for b in bounds))

    def test_uniqueness(self):
        system = scalar_system(4.0, ExponentialKernel(1.0, 2.0), 1.0, 1.0, 0.0)
        ie = to_integral_equation(system)
        reference = picard_solve(ie, 64, max_iters=100)

        times = np.linspace(0, 1, 65)
        perturbed = ie.forcing(times) + np.exp(-times)[:, None] * [0.3, -0.2]
        restarted = picard_solve(ie, 64, max_iters=100, initial_iterate=perturbed)

        self.assertTrue(reference.converged and restarted.converged)
        self.assertIsNone(restarted.certificate)
        np.testing.assert_allclose(
            restarted.trajectory.states, reference.trajectory.states, atol=1e-9
        )

    def test_not_converged(self):
        ie = to_integral_equation(scalar_system(4.0, ExponentialKernel(1.0, 2.0), 1.0, 1.0, 0.0))
        result = picard_solve(ie, 64, max_iters=2)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 2)
        self.assertGreater(result.last_increment, 1e-10)

    def test_invalid_arguments(self):
        ie = to_integral_equation(scalar_system(4.0, ZeroKernel(), 1.0, 1.0, 0.0))
        self.assertRaises(ValueError, picard_solve, ie, 4)
        self.assertRaises(ValueError, picard_solve, ie, 16, tol=0.0)
        self.assertRaises(ValueError, picard_solve, ie, 16, initial_iterate=np.zeros((3, 2)))


class BoundsTest(unittest.TestCase):
    def test_bound_Z(self):
        kernel = PowerLawKernel.from_kappa(0.5, 0.4, 1.0)
        system = spectral_system(kernel, 1.0, m=3)
        self.assertAlmostEqual(bound_Z(system), 1.4 * 9 * np.pi ** 2, places=8)

        self.assertEqual(bound_Z(scalar_system(5.0, ZeroKernel(), 1.0, 1.0, 0.0)), 5.0)

    def test_bound_Z_dominates_kernel_matrix(self):
        system = spectral_system(ExponentialKernel(1.0, 2.0), 0.5, m=4)
        ie = to_integral_equation(system)
        z = bound_Z(system)
        grid = np.linspace(0, 0.5, 50)
        sampled = max(
            np.abs(ie.kernel_matrix(t, s)).sum(axis=1).max()
            for t in grid
            for s in grid
            if s <= t
        )
        self.assertLessEqual(sampled, z)

    def test_bound_Z0_without_load(self):
        system = scalar_system(4.0, ZeroKernel(), 1.0, -2.0, 0.5)
        self.assertEqual(bound_Z0(system), 2.5)

        system = spectral_system(ZeroKernel(), 1.0, u0=sine_modes(1.0), u1=sine_modes(0, 0, 1.0))
        self.assertAlmostEqual(bound_Z0(system), np.sqrt(2), places=10)

    def test_bound_Z0_dominates_forcing(self):
        mesh = Mesh1D.uniform(8, boundary_markers=(DIRICHLET, NEUMANN))
        space = build_space(mesh)

        def f(x, t):
            return np.sin(np.pi * x) * np.cos(t)

        def g(x, t):
            return t * np.ones_like(x)

        system = SemidiscreteSystem.from_problem(
            space, ScalarLaplace(), ExponentialKernel(1.0, 2.0), 0.5, f=f, g=g
        )
        z0 = bound_Z0(system)
        forcing = to_integral_equation(system).forcing(np.linspace(0, 0.5, 65))
        self.assertGreater(z0, 0)
        self.assertLessEqual(np.abs(forcing).max(), z0)

    def test_trace_constant(self):
        self.assertEqual(trace_constant(build_space(Mesh1D.uniform(8))), 0.0)
        self.assertEqual(trace_constant(build_space((0.0, 1.0), kind="spectral", m=3)), 0.0)

        mesh = Mesh1D.uniform(8, boundary_markers=(DIRICHLET, NEUMANN))
        self.assertAlmostEqual(trace_constant(build_space(mesh)), np.sqrt(1 / 8), places=12)

    def test_certificate_bound(self):
        self.assertAlmostEqual(PicardCertificate.bound(2.0, 3.0, 1.0, 0), 6.0)
        self.assertAlmostEqual(PicardCertificate.bound(2.0, 3.0, 1.0, 2), 3.0 * 8 / 6)
        self.assertEqual(PicardCertificate.bound(0.0, 3.0, 1.0, 5), 0.0)
        # large n stays finite
        large = PicardCertificate.bound(50.0, 1.0, 2.0, 400)
        self.assertTrue(np.isfinite(large))
        self.assertLess(large, 1e-60)


class TimeSteppingTest(unittest.TestCase):
    def test_product_integration_weights(self):
        kernel = PowerLawKernel.from_kappa(0.5, 0.5, 1.0)
        weights = product_integration_weights(kernel, 1 / 64, 64)
        self.assertEqual(len(weights), 64)
        self.assertTrue(np.all(np.diff(weights) < 0))
        for n in (1, 10, 64):
            self.assertAlmostEqual(weights[:n].sum(), float(kernel.primitive(n / 64)), places=12)

    def test_harmonic_oscillator_order(self):
        system = scalar_system(4.0, ZeroKernel(), 1.0, 1.0, 0.0)
        for scheme in ("newmark", "trapezoidal"):
            errors = []
            for n_steps in (64, 128, 256):
                trajectory = time_step_solve(system, n_steps, scheme)
                errors.append(abs(trajectory.final_displacement[0] - np.cos(2.0)))
            orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
            self.assertTrue(np.all(orders >= 1.9))

    def test_schemes_agree(self):
        system = spectral_system(
            ExponentialKernel(1.0, 2.0), 0.5, u0=sine_modes(1.0, 0.5), u1=sine_modes(0, 0, 1.0)
        )
        newmark = time_step_solve(system, 128, "newmark")
        trapezoidal = time_step_solve(system, 128, "trapezoidal")
        np.testing.assert_allclose(trapezoidal.states, newmark.states, rtol=1e-8, atol=1e-10)

    def test_energy_conservation(self):
        space = build_space(Mesh1D.uniform(16))
        system = SemidiscreteSystem.from_problem(
            space, ScalarLaplace(), ZeroKernel(), 1.0, u0=sine_modes(1.0, 0.3), u1=sine_modes(0, 1.0)
        )
        for scheme in ("newmark", "trapezoidal"):
            energy = time_step_solve(system, 128, scheme).energy(system.pair)
            np.testing.assert_allclose(energy, energy[0], rtol=1e-9)

    def test_zero_kernel_matches_ode_integrator(self):
        system = spectral_system(ZeroKernel(), 0.8, m=3, u0=sine_modes(1.0, 0.2, 0.1))
        eigenvalues = system.pair.stiffness.diagonal()

        def rhs(t, y):
            return np.concatenate((y[3:], -eigenvalues * y[:3]))

        y0 = np.concatenate((system.alpha0, system.velocity0))
        reference = solve_ivp(rhs, (0, 0.8), y0, method="DOP853", rtol=1e-12, atol=1e-12)
        final = reference.y[:3, -1]

        errors = []
        for n_steps in (256, 512):
            trajectory = time_step_solve(system, n_steps)
            errors.append(np.abs(trajectory.final_displacement - final).max())
        self.assertLess(errors[0], 5e-3)
        self.assertGreater(errors[0] / errors[1], 3.5)

    def test_agrees_with_picard(self):
        system = spectral_system(ExponentialKernel(1.0, 2.0), 0.25, u0=sine_modes(1.0, 0.5))
        ie = to_integral_equation(system)
        differences = []
        for n_steps in (512, 1024):
            picard = picard_solve(ie, n_steps, max_iters=200)
            self.assertTrue(picard.converged)
            stepped = time_step_solve(system, n_steps)
            differences.append(np.abs(picard.trajectory.states - stepped.states).max())
        self.assertLess(differences[0], 1e-3)
        self.assertGreater(differences[0] / differences[1], 2)

    def test_power_law_kernel(self):
        kernel = PowerLawKernel.from_kappa(0.5, 0.5, 1.0)
        system = spectral_system(kernel, 1.0, m=2, u0=sine_modes(1.0, 0.5))
        finals = [time_step_solve(system, n).final_displacement for n in (128, 256, 512)]
        self.assertTrue(np.all(np.isfinite(finals)))
        coarse = np.abs(finals[0] - finals[1]).max()
        fine = np.abs(finals[1] - finals[2]).max()
        self.assertGreater(coarse / fine, 2)

    def test_invalid_arguments(self):
        system = scalar_system(4.0, ZeroKernel(), 1.0, 1.0, 0.0)
        self.assertRaises(ValueError, time_step_solve, system, 4)
        self.assertRaises(ValueError, time_step_solve, system, 16, "leapfrog")


class TrajectoryTest(unittest.TestCase):
    def test_csv(self):
        system = scalar_system(4.0, ZeroKernel(), 1.0, 1.0, 0.0)
        trajectory = time_step_solve(system, 16)
        with tempfile.TemporaryDirectory() as tmp:
            filename = Path(tmp) / "trajectory.csv"
            trajectory.to_csv(filename)
            header = filename.read_text().splitlines()[0]
            loaded = Trajectory.from_csv(filename)

        self.assertEqual(header, "time,alpha_0,velocity_0")
        np.testing.assert_allclose(loaded.times, trajectory.times)
        np.testing.assert_allclose(loaded.states, trajectory.states)

    def test_energy(self):
        trajectory = Trajectory([0.0, 1.0], [[1.0], [0.0]], [[0.0], [2.0]])
        pair = AssembledPair(sparse.csr_matrix([[1.0]]), sparse.csr_matrix([[4.0]]))
        np.testing.assert_allclose(trajectory.energy(pair), [2.0, 2.0])
        self.assertRaises(ValueError, Trajectory, [0.0], [[1.0], [0.0]], [[0.0], [2.0]])

    def test_certificate_json(self):
        certificate = PicardCertificate(Z=4.0, Z0=1.0, horizon=1.0)
        certificate.record(0, 0.5)
        certificate.record(1, 0.1)
        with tempfile.TemporaryDirectory() as tmp:
            filename = Path(tmp) / "certificate.json"
            certificate.to_json(filename)
            loaded = PicardCertificate.from_json(filename)

        self.assertEqual(loaded.Z, 4.0)
        self.assertEqual([it["n"] for it in loaded.iterations], [0, 1])
        self.assertAlmostEqual(loaded.iterations[1]["bound"], 8.0)
        self.assertTrue(loaded.dominated())


if __name__ == "__main__":
    unittest.main()
