import tempfile
import unittest
from pathlib import Path

import numpy as np

from memfem.convergence_lab import (
    REPORT_COLUMNS,
    ConvergenceReport,
    InitialDataPolicy,
    LevelResult,
    SpatialMode,
    TemporalProfile,
    TimePolicy,
    convergence_rates,
    error_norms,
    error_split,
    manufacture,
    manufacture_family,
    projection_study,
    quadrature_convolution,
    run_convergence,
    sup_l2_error,
)
from memfem.galerkin_spaces import Elasticity2D, build_space
from memfem.kernels import ExponentialKernel, PowerLawKernel, ZeroKernel
from memfem.mesh import Mesh1D
from memfem.volterra_solver import Trajectory

KERNELS = {
    "zero": ZeroKernel(),
    "exponential": ExponentialKernel(1.0, 2.0),
    "power_law": PowerLawKernel.from_kappa(0.5, 0.5, 1.0),
}


def zero_trajectory(space, horizon=1.0, n_times=5):
    zeros = np.zeros((n_times, space.dimension))
    return Trajectory(np.linspace(0, horizon, n_times), zeros, zeros)


class ManufactureTest(unittest.TestCase):
    def test_zero_kernel_load(self):
        problem = manufacture_family("sin_cos_1d", ZeroKernel(), 1.0)
        x = np.linspace(0, 1, 11)
        for t in (0.0, 0.3, 1.0):
            expected = (np.pi ** 2 - 1) * np.sin(np.pi * x) * np.cos(t)
            np.testing.assert_allclose(problem.f(x, t), expected, atol=1e-12)

    def test_quiescent(self):
        problem = manufacture_family("quiescent", KERNELS["exponential"], 1.0)
        x = np.linspace(0, 1, 11)
        np.testing.assert_array_equal(problem.f(x, 0.5), np.zeros(11))
        np.testing.assert_array_equal(problem.exact(x, 0.5), np.zeros(11))

    def test_exponential_closed_form(self):
        kernel = KERNELS["exponential"]
        profile = TemporalProfile(omega=1.0)
        for t in (0.1, 0.7, 1.0):
            np.testing.assert_allclose(
                profile.convolution(kernel, t),
                quadrature_convolution(kernel, profile.value, t),
                rtol=1e-10,
            )

    def test_residuals(self):
        rng = np.random.default_rng(11)
        for family in ("sin_cos_1d", "standing_wave_1d", "standing_wave_2d"):
            for kernel in KERNELS.values():
                problem = manufacture_family(family, kernel, 1.0)
                shape = (100,) if problem.dim == 1 else (100, 2)
                x = rng.uniform(0, 1, shape)
                for t in rng.uniform(0, 1, 5):
                    residual = problem.residual(x, t)
                    self.assertLessEqual(np.abs(residual).max(), 1e-8)

    def test_spatial_mode(self):
        mode = SpatialMode((1, 2))
        self.assertAlmostEqual(mode.eigenvalue, 5 * np.pi ** 2)
        x = np.array([[0.25, 0.125], [0.5, 0.5]])
        laplacian = mode.second_derivatives(x).sum(axis=1)
        np.testing.assert_allclose(-laplacian, mode.eigenvalue * mode.value(x), atol=1e-12)

    def test_invalid(self):
        self.assertRaises(ValueError, manufacture_family, "plucked_string", ZeroKernel(), 1.0)
        self.assertRaises(
            ValueError,
            manufacture,
            SpatialMode((1,)),
            TemporalProfile(),
            ZeroKernel(),
            1.0,
            form=Elasticity2D(),
        )
        self.assertRaises(
            ValueError, manufacture, SpatialMode((1, 1, 1)), TemporalProfile(), ZeroKernel(), 1.0
        )
        self.assertRaises(ValueError, manufacture, SpatialMode(), TemporalProfile(), ZeroKernel(), 0.0)


class ErrorNormsTest(unittest.TestCase):
    def setUp(self):
        self.problem = manufacture_family("sin_cos_1d", KERNELS["exponential"], 1.0)

    def test_exact_trajectory(self):
        space = build_space((0.0, 1.0), kind="spectral", m=4)
        times = np.linspace(0, 1, 9)
        coefficients = np.array([np.sqrt(2) / 2, 0, 0, 0])
        profile = self.problem.profile
        trajectory = Trajectory(
            times,
            np.outer(profile.value(times), coefficients),
            np.outer(profile.derivative(times), coefficients),
        )

        norms = error_norms(space, trajectory, self.problem)
        self.assertLess(norms.l2, 1e-12)
        self.assertLess(norms.energy, 1e-12)
        self.assertLess(norms.velocity, 1e-12)
        self.assertLess(sup_l2_error(space, trajectory, self.problem), 1e-7)

        split = error_split(space, trajectory, self.problem)
        self.assertLess(split.theta, 1e-12)
        self.assertLess(split.omega, 1e-12)

    def test_zero_trajectory(self):
        space = build_space(Mesh1D.uniform(16))
        norms = error_norms(space, zero_trajectory(space), self.problem)
        np.testing.assert_allclose(norms.l2, np.cos(1.0) / np.sqrt(2), rtol=1e-10)
        np.testing.assert_allclose(norms.energy, np.pi * np.cos(1.0) / np.sqrt(2), rtol=1e-10)
        np.testing.assert_allclose(norms.velocity, np.sin(1.0) / np.sqrt(2), rtol=1e-10)

        # the largest error on the grid is at t = 0, where G = 1
        sup = sup_l2_error(space, zero_trajectory(space), self.problem)
        np.testing.assert_allclose(sup, 1 / np.sqrt(2), rtol=1e-10)
        self.assertGreaterEqual(sup, norms.l2)

    def test_split(self):
        omegas, hs = [], []
        for n in (8, 16, 32, 64):
            space = build_space(Mesh1D.uniform(n))
            split = error_split(space, zero_trajectory(space), self.problem)
            self.assertTrue(split.triangle_holds)
            omegas.append(split.omega)
            hs.append(space.h)
        self.assertAlmostEqual(convergence_rates(hs, omegas)[-1], 2, delta=0.15)

    def test_mismatch(self):
        space = build_space(Mesh1D.uniform(8))
        other = build_space(Mesh1D.uniform(16))
        self.assertRaises(ValueError, error_norms, space, zero_trajectory(other), self.problem)
        self.assertRaises(
            ValueError, error_norms, space, zero_trajectory(space, horizon=0.5), self.problem
        )


class PolicyTest(unittest.TestCase):
    def test_time_policy(self):
        policy = TimePolicy()
        self.assertEqual(policy.n_steps(1 / 8, 2, 1.0), 8)
        self.assertEqual(policy.n_steps(1 / 16, 3, 1.0), 64)
        self.assertEqual(policy.n_steps(1.0, 2, 1.0), 8)
        self.assertEqual(TimePolicy(fixed_steps=2048).n_steps(1 / 8, 2, 1.0), 2048)
        self.assertEqual(TimePolicy(max_steps=100).n_steps(1e-3, 2, 1.0), 100)

    def test_initial_policy(self):
        self.assertEqual(InitialDataPolicy().projections, ("ritz", "l2"))
        self.assertRaises(ValueError, InitialDataPolicy, "h1", "l2")

    def test_rates(self):
        rates = convergence_rates([1.0, 0.5, 0.25], [1.0, 0.25, 0.0625])
        self.assertTrue(np.isnan(rates[0]))
        np.testing.assert_allclose(rates[1:], [2.0, 2.0])

        rates = convergence_rates([1.0, 0.5, 0.25], [1.0, 0.0, np.nan])
        self.assertTrue(np.all(np.isnan(rates)))


class ConvergenceStudyTest(unittest.TestCase):
    def test_p1_wave_equation(self):
        problem = manufacture_family("standing_wave_1d", ZeroKernel(), 1.0)
        report = run_convergence(problem, levels=4, base=8)
        self.assertEqual(len(report.levels), 4)
        self.assertFalse(any(level.failed for level in report.levels))
        self.assertAlmostEqual(report.final_rate("L2"), 2, delta=0.2)
        self.assertAlmostEqual(report.final_rate("H1"), 1, delta=0.15)

    def test_p1_exponential_kernel(self):
        problem = manufacture_family("sin_cos_1d", KERNELS["exponential"], 1.0)
        report = run_convergence(problem, levels=4, base=8)
        self.assertEqual(report.targets, {"L2": 2, "H1": 1, "vel": 2})
        self.assertAlmostEqual(report.final_rate("L2"), 2, delta=0.2)
        self.assertAlmostEqual(report.final_rate("H1"), 1, delta=0.2)
        self.assertAlmostEqual(report.final_rate("vel"), 2, delta=0.25)

        # every refinement reduces the error by at least 2**(rate - 0.3)
        errors = report.errors("L2")
        self.assertTrue(np.all(errors[:-1] / errors[1:] >= 2 ** 1.7))

        levels = report.levels
        self.assertTrue(all(level.theta <= level.e_L2 + level.omega + 1e-12 for level in levels))
        self.assertTrue(all(level.sup_L2 >= level.e_L2 - 1e-12 for level in levels))

        interpolated = run_convergence(
            problem, levels=4, base=8, initial_policy=InitialDataPolicy("interpolation", "l2")
        )
        self.assertLess(abs(interpolated.final_rate("L2") - report.final_rate("L2")), 0.2)

    def test_p2(self):
        problem = manufacture_family("sin_cos_1d", ZeroKernel(), 1.0)
        report = run_convergence(
            problem, degree=2, levels=3, base=4, time_policy=TimePolicy(ratio=0.5)
        )
        self.assertEqual(report.targets["L2"], 3)
        self.assertAlmostEqual(report.final_rate("L2"), 3, delta=0.25)

    def test_power_law_kernel(self):
        problem = manufacture_family("sin_cos_1d", KERNELS["power_law"], 1.0)
        report = run_convergence(problem, levels=3, base=8)
        self.assertTrue(all(level.n_steps == 2048 for level in report.levels))
        self.assertGreaterEqual(report.final_rate("L2"), 1.7)

    def test_threads_match_serial(self):
        problem = manufacture_family("sin_cos_1d", KERNELS["exponential"], 1.0)
        serial = run_convergence(problem, levels=3, base=4)
        threaded = run_convergence(problem, levels=3, base=4, nworkers=2)
        np.testing.assert_allclose(threaded.errors("L2"), serial.errors("L2"), rtol=1e-12)
        self.assertEqual([r.level for r in threaded.levels], [0, 1, 2])

    def test_failed_levels_are_reported(self):
        problem = manufacture_family("standing_wave_2d", ZeroKernel(), 1.0)
        report = run_convergence(problem, kind="spectral", levels=3, base=4)
        self.assertEqual(len(report.levels), 3)
        self.assertTrue(all(level.failed for level in report.levels))
        self.assertIn("1D", report.levels[0].message)
        self.assertTrue(np.isnan(report.final_rate("L2")))

    def test_invalid(self):
        problem = manufacture_family("sin_cos_1d", ZeroKernel(), 1.0)
        self.assertRaises(ValueError, run_convergence, problem, levels=2)
        self.assertRaises(ValueError, run_convergence, problem, kind="wavelet")

    def test_projection_rates(self):
        study = projection_study(
            lambda x: np.sin(np.pi * x), lambda x: np.pi * np.cos(np.pi * x), levels=4, base=8
        )
        self.assertAlmostEqual(study.rates("ritz_l2")[-1], 2, delta=0.15)
        self.assertAlmostEqual(study.rates("ritz_energy")[-1], 1, delta=0.15)
        self.assertAlmostEqual(study.rates("l2_l2")[-1], 2, delta=0.15)


class ReportTest(unittest.TestCase):
    def setUp(self):
        self.report = ConvergenceReport(
            "sin_cos_1d",
            "fem",
            1,
            [
                LevelResult(0, 0.125, 7, 8, 4e-3, 0.2, 5e-3),
                LevelResult(1, 0.0625, 15, 16, 1e-3, 0.1, 1.25e-3),
                LevelResult(2, 0.03125, 31, 32, 2.5e-4, 0.05, 3.125e-4),
            ],
        )
        self.tmp = tempfile.TemporaryDirectory()
        self.tmp_dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_rates(self):
        np.testing.assert_allclose(self.report.rates("L2")[1:], [2, 2])
        np.testing.assert_allclose(self.report.rates("H1")[1:], [1, 1])
        self.assertAlmostEqual(self.report.final_rate("vel"), 2)
        self.assertIn("rate_L2", self.report.summary())

    def test_csv(self):
        filename = self.tmp_dir / "report.csv"
        self.report.to_csv(filename)
        lines = filename.read_text().splitlines()
        self.assertEqual(lines[0], ",".join(REPORT_COLUMNS))
        self.assertEqual(len(lines), 4)
        data = np.loadtxt(filename, delimiter=",", skiprows=1)
        np.testing.assert_allclose(data[2, 3], 2.0)

    def test_json(self):
        filename = self.tmp_dir / "report.json"
        self.report.to_json(filename)
        loaded = ConvergenceReport.from_json(filename)
        self.assertEqual(loaded.family, "sin_cos_1d")
        np.testing.assert_allclose(loaded.errors("L2"), self.report.errors("L2"))
        self.assertEqual([r.n_steps for r in loaded.levels], [8, 16, 32])


if __name__ == "__main__":
    unittest.main()
