"""
Manufactured solutions, error norms and refinement studies.

The manufactured problems are separable, ``u(x, t) = X(x) G(t)``, with ``X`` a
Dirichlet eigenfunction of the Laplacian on the unit interval or square and
``G(t) = a cos(omega t)``. The load is then
``f = X (G'' + lambda G - lambda int_0^t K(t - s) G(s) ds)``, so the load
vector of every Galerkin space is a time factor times a fixed vector.
"""

import logging
import multiprocessing
from dataclasses import dataclass, field
from functools import partial
from math import ceil
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from monty.json import MSONable
from monty.serialization import dumpfn, loadfn
from scipy.integrate import quad
from scipy.special import gamma
from tabulate import tabulate

from memfem.galerkin_spaces import (
    EllipticForm,
    GalerkinSpace,
    ScalarLaplace,
    assemble,
    assemble_mass,
    build_space,
    inner_products,
    l2_norm,
    l2_project,
    ritz_project,
)
from memfem.kernels import ExponentialKernel, MemoryKernel, PowerLawKernel, ZeroKernel
from memfem.mesh import Mesh1D, TriMesh2D
from memfem.volterra_solver import (
    PROJECTIONS,
    SemidiscreteSystem,
    Trajectory,
    initial_coefficients,
    time_step_solve,
)

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("level", "h", "e_L2", "rate_L2", "e_H1", "rate_H1", "e_vel", "rate_vel")

# fixed step count used for weakly singular kernels
POWER_LAW_STEPS = 2048


@dataclass(frozen=True)
class SpatialMode(MSONable):
    """
    The eigenfunction ``X(x) = prod_i sin(k_i pi x_i)`` of ``-Laplace`` on the
    unit interval (one frequency) or unit square (two frequencies).

    Args:
        frequencies: The integers ``k_i``.
    """

    frequencies: Tuple[int, ...] = (1,)

    @property
    def dim(self) -> int:
        return len(self.frequencies)

    @property
    def eigenvalue(self) -> float:
        return float(np.pi ** 2 * sum(k ** 2 for k in self.frequencies))

    def _coordinates(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, 1) if self.dim == 1 else x.reshape(-1, self.dim)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._coordinates(x)
        k = np.pi * np.array(self.frequencies)
        return np.prod(np.sin(k * x), axis=1)

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = self._coordinates(x)
        k = np.pi * np.array(self.frequencies)
        sines = np.sin(k * x)
        out = np.empty_like(x)
        for i in range(self.dim):
            others = np.prod(np.delete(sines, i, axis=1), axis=1)
            out[:, i] = k[i] * np.cos(k[i] * x[:, i]) * others
        return out[:, 0] if self.dim == 1 else out

    def second_derivatives(self, x: np.ndarray) -> np.ndarray:
        """Get ``d^2 X / dx_i^2`` with the shape ``(n, dim)``."""
        x = self._coordinates(x)
        k = np.pi * np.array(self.frequencies)
        sines = np.sin(k * x)
        out = np.empty_like(x)
        for i in range(self.dim):
            others = np.prod(np.delete(sines, i, axis=1), axis=1)
            out[:, i] = -k[i] ** 2 * sines[:, i] * others
        return out


@dataclass(frozen=True)
class TemporalProfile(MSONable):
    """
    The time factor ``G(t) = amplitude * cos(omega * t)``.

    Args:
        omega: The angular frequency.
        amplitude: The amplitude; zero gives the quiescent solution.
    """

    omega: float = 1.0
    amplitude: float = 1.0

    def value(self, t):
        return self.amplitude * np.cos(self.omega * t)

    def derivative(self, t):
        return -self.amplitude * self.omega * np.sin(self.omega * t)

    def second_derivative(self, t):
        return -self.amplitude * self.omega ** 2 * np.cos(self.omega * t)

    def convolution(self, kernel: MemoryKernel, t: float) -> float:
        """
        Get ``int_0^t K(t - s) G(s) ds``.

        Exponential kernels use the closed form; other kernels use adaptive
        quadrature.
        """
        if self.amplitude == 0 or isinstance(kernel, ZeroKernel) or t == 0:
            return 0.0
        if isinstance(kernel, ExponentialKernel):
            g, w = kernel.rate, self.omega
            closed = g * np.cos(w * t) + w * np.sin(w * t) - g * np.exp(-g * t)
            return float(self.amplitude * kernel.c * closed / (g ** 2 + w ** 2))
        return quadrature_convolution(kernel, self.value, t)


def quadrature_convolution(kernel: MemoryKernel, g: Callable, t: float) -> float:
    """
    Get ``int_0^t K(t - s) g(s) ds`` by adaptive quadrature.

    Power-law kernels use an algebraic weight ``(t - s)**(alpha - 1)`` so the
    singularity at ``s = t`` is integrated exactly.

    Args:
        kernel: The memory kernel.
        g: A scalar function of time.
        t: The upper limit.

    Returns:
        The convolution.
    """
    if t == 0:
        return 0.0
    if isinstance(kernel, PowerLawKernel):
        value, _ = quad(g, 0, t, weight="alg", wvar=(0.0, kernel.alpha - 1), limit=200)
        value *= kernel.c / gamma(kernel.alpha)
    else:
        value, _ = quad(lambda s: kernel.evaluate(t - s) * g(s), 0, t, limit=200)
    if not np.isfinite(value):
        raise ValueError(
            "Cannot evaluate the convolution of {} at t={}".format(type(kernel).__name__, t)
        )
    return float(value)


@dataclass
class ManufacturedProblem(object):
    """
    The problem with the exact solution ``u(x, t) = X(x) G(t)``.

    Args:
        name: The family name.
        mode: The spatial factor.
        profile: The time factor.
        kernel: The memory kernel.
        horizon: The final time ``T``.
        coefficient: The diffusion coefficient of ``A = -coefficient Laplace``.
    """

    name: str
    mode: SpatialMode
    profile: TemporalProfile
    kernel: MemoryKernel
    horizon: float
    coefficient: float = 1.0

    @property
    def dim(self) -> int:
        return self.mode.dim

    @property
    def form(self) -> EllipticForm:
        return ScalarLaplace(self.coefficient)

    @property
    def eigenvalue(self) -> float:
        """The eigenvalue of ``A`` belonging to ``X``."""
        return self.coefficient * self.mode.eigenvalue

    def exact(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mode.value(x) * self.profile.value(t)

    def grad(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mode.grad(x) * self.profile.value(t)

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mode.value(x) * self.profile.derivative(t)

    def acceleration(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mode.value(x) * self.profile.second_derivative(t)

    def u0(self, x: np.ndarray) -> np.ndarray:
        return self.exact(x, 0.0)

    def u1(self, x: np.ndarray) -> np.ndarray:
        return self.velocity(x, 0.0)

    def grad_u0(self, x: np.ndarray) -> np.ndarray:
        return self.grad(x, 0.0)

    def grad_u1(self, x: np.ndarray) -> np.ndarray:
        return self.mode.grad(x) * self.profile.derivative(0.0)

    def time_factor(self, t: float) -> float:
        """Get ``G'' + lambda G - lambda (K * G)`` at ``t``."""
        lam = self.eigenvalue
        return float(
            self.profile.second_derivative(t)
            + lam * self.profile.value(t)
            - lam * self.profile.convolution(self.kernel, t)
        )

    def f(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mode.value(x) * self.time_factor(t)

    def residual(self, x: np.ndarray, t: float) -> np.ndarray:
        """
        Evaluate ``u'' + Au - int_0^t K(t - s) Au(s) ds - f`` at points ``x``.

        ``Au`` is formed from the second derivatives of ``X`` and the
        convolution is integrated by adaptive quadrature, independently of the
        closed forms used for ``f``.
        """
        laplacian = self.mode.second_derivatives(x).sum(axis=1)
        operator = -self.coefficient * laplacian
        history = quadrature_convolution(self.kernel, self.profile.value, t)
        return (
            self.acceleration(x, t)
            + operator * self.profile.value(t)
            - operator * history
            - self.f(x, t)
        )

    def load(self, space: GalerkinSpace) -> Callable[[float], np.ndarray]:
        """Get ``t -> F(t)`` with the spatial vector assembled once."""
        vector = inner_products(space, self.mode.value)
        return lambda t: self.time_factor(t) * vector

    def build_system(
        self, space: GalerkinSpace, initial_policy: Optional["InitialDataPolicy"] = None
    ) -> SemidiscreteSystem:
        """
        Build the semidiscrete system on a space.

        Args:
            space: The Galerkin space.
            initial_policy: The projections of the initial data; defaults to
                ``u_h(0) = R_h u0`` and ``u_h'(0) = P_h u1``.

        Returns:
            The system.
        """
        policy = initial_policy if initial_policy is not None else InitialDataPolicy()
        form = self.form
        alpha0, velocity0 = initial_coefficients(
            space,
            self.u0,
            self.u1,
            policy.projections,
            form=form,
            grad_u0=self.grad_u0,
            grad_u1=self.grad_u1,
        )
        return SemidiscreteSystem(
            pair=assemble(space, form),
            kernel=self.kernel,
            horizon=self.horizon,
            alpha0=alpha0,
            velocity0=velocity0,
            load=self.load(space),
            space=space,
            form=form,
            f=self.f,
            u0=self.u0,
            u1=self.u1,
        )


MANUFACTURED_FAMILIES: Dict[str, Tuple[SpatialMode, TemporalProfile]] = {
    "sin_cos_1d": (SpatialMode((1,)), TemporalProfile(omega=1.0)),
    "standing_wave_1d": (SpatialMode((1,)), TemporalProfile(omega=np.pi)),
    "standing_wave_2d": (SpatialMode((1, 1)), TemporalProfile(omega=np.pi * np.sqrt(2))),
    "quiescent": (SpatialMode((1,)), TemporalProfile(omega=1.0, amplitude=0.0)),
}


def manufacture(
    mode: SpatialMode,
    profile: TemporalProfile,
    kernel: MemoryKernel,
    horizon: float,
    form: Optional[EllipticForm] = None,
    name: str = "custom",
) -> ManufacturedProblem:
    """
    Manufacture the load for a separable exact solution.

    Args:
        mode: The spatial factor ``X``.
        profile: The time factor ``G``.
        kernel: The memory kernel.
        horizon: The final time.
        form: The elliptic form; only ``ScalarLaplace`` is supported.
        name: A label for reports.

    Returns:
        The manufactured problem.
    """
    form = form if form is not None else ScalarLaplace()
    if not isinstance(form, ScalarLaplace):
        raise ValueError(
            "Manufactured problems need a ScalarLaplace form; got {}".format(
                type(form).__name__
            )
        )
    if mode.dim not in (1, 2):
        raise ValueError("Spatial modes must be 1D or 2D; got {}D".format(mode.dim))
    if horizon <= 0:
        raise ValueError("Final time must be positive; got {}".format(horizon))

    problem = ManufacturedProblem(name, mode, profile, kernel, horizon, form.coefficient)
    if not np.isfinite(problem.time_factor(horizon)):
        raise ValueError("Cannot evaluate the load at t={}".format(horizon))
    return problem


def manufacture_family(name: str, kernel: MemoryKernel, horizon: float) -> ManufacturedProblem:
    """Manufacture one of the problems in ``MANUFACTURED_FAMILIES``."""
    if name not in MANUFACTURED_FAMILIES:
        raise ValueError(
            "Unknown manufactured family {!r}, valid options: {}".format(
                name, list(MANUFACTURED_FAMILIES)
            )
        )
    mode, profile = MANUFACTURED_FAMILIES[name]
    return manufacture(mode, profile, kernel, horizon, name=name)


@dataclass(frozen=True)
class ErrorNorms(MSONable):
    """Errors at the final time: L2 and energy displacement, L2 velocity."""

    l2: float
    energy: float
    velocity: float


@dataclass(frozen=True)
class ErrorSplit(MSONable):
    """
    The split ``e = theta + omega`` with ``theta = u_h - R_h u`` and
    ``omega = R_h u - u``, in the L2 norm at the final time.
    """

    theta: float
    omega: float
    error: float

    @property
    def triangle_holds(self) -> bool:
        return self.error <= (self.theta + self.omega) * (1 + 1e-10) + 1e-14


def discrete_error(
    space: GalerkinSpace,
    coefficients: np.ndarray,
    v: Callable,
    grad_v: Optional[Callable] = None,
    form: Optional[EllipticForm] = None,
) -> Tuple[float, float]:
    """
    Get the L2 and energy norms of ``v_h - v`` by element quadrature.

    Args:
        space: The Galerkin space.
        coefficients: The coefficients of ``v_h``.
        v: The exact function.
        grad_v: Its gradient; the energy norm is NaN without it.
        form: The form inducing the energy norm.

    Returns:
        The two norms.
    """
    q = space.quadrature()
    values, grads = space.evaluate_at_quadrature(coefficients, q)
    diff = values - np.asarray(v(q.flat_points), dtype=float).reshape(values.shape)
    l2 = float(np.sqrt(np.einsum("eq,eqc,eqc->", q.weights, diff, diff)))
    if grad_v is None:
        return l2, float("nan")

    form = form if form is not None else ScalarLaplace()
    gdiff = grads - np.asarray(grad_v(q.flat_points), dtype=float).reshape(grads.shape)
    energy = np.einsum("eq,eqcj,eqcj->", q.weights, form.flux(gdiff), gdiff)
    return l2, float(np.sqrt(max(energy, 0.0)))


def _check_trajectory(space: GalerkinSpace, trajectory: Trajectory, horizon: float):
    if trajectory.dimension != space.dimension:
        raise ValueError(
            "Trajectory has {} coefficients but the space has {}".format(
                trajectory.dimension, space.dimension
            )
        )
    if not np.isclose(trajectory.times[-1], horizon):
        raise ValueError(
            "Trajectory ends at t={} but errors are requested at t={}".format(
                trajectory.times[-1], horizon
            )
        )


def error_norms(
    space: GalerkinSpace,
    trajectory: Trajectory,
    problem: ManufacturedProblem,
    horizon: Optional[float] = None,
) -> ErrorNorms:
    """
    Get the errors of a trajectory against the exact solution at ``t = T``.

    Args:
        space: The Galerkin space.
        trajectory: The discrete solution; its last time must be ``T``.
        problem: The manufactured problem.
        horizon: The time ``T``; defaults to the problem's final time.

    Returns:
        The L2 and energy errors of the displacement and the L2 error of the
        velocity.
    """
    horizon = problem.horizon if horizon is None else horizon
    _check_trajectory(space, trajectory, horizon)
    l2, energy = discrete_error(
        space,
        trajectory.final_displacement,
        lambda x: problem.exact(x, horizon),
        lambda x: problem.grad(x, horizon),
        problem.form,
    )
    velocity, _ = discrete_error(
        space, trajectory.final_velocity, lambda x: problem.velocity(x, horizon)
    )
    return ErrorNorms(l2, energy, velocity)


def error_split(
    space: GalerkinSpace,
    trajectory: Trajectory,
    problem: ManufacturedProblem,
    horizon: Optional[float] = None,
) -> ErrorSplit:
    """
    Split the final displacement error into its ``theta`` and ``omega`` parts.

    Args:
        space: The Galerkin space.
        trajectory: The discrete solution.
        problem: The manufactured problem.
        horizon: The time ``T``.

    Returns:
        The L2 norms of ``theta``, ``omega`` and ``e``.
    """
    horizon = problem.horizon if horizon is None else horizon
    _check_trajectory(space, trajectory, horizon)

    def exact(x):
        return problem.exact(x, horizon)

    ritz = ritz_project(space, exact, problem.form, lambda x: problem.grad(x, horizon))
    theta = trajectory.final_displacement - ritz
    mass = assemble_mass(space)
    theta_norm = float(np.sqrt(max(theta @ (mass @ theta), 0.0)))
    omega_norm, _ = discrete_error(space, ritz, exact)
    error, _ = discrete_error(space, trajectory.final_displacement, exact)
    return ErrorSplit(theta_norm, omega_norm, error)


def sup_l2_error(
    space: GalerkinSpace, trajectory: Trajectory, problem: ManufacturedProblem
) -> float:
    """
    Get ``max_n ||u_h(t_n) - u(t_n)||`` over the trajectory grid.

    Uses ``||c - X G||^2 = c^T M c - 2 G (X, phi) . c + G^2 ||X||^2``.
    """
    mass = assemble_mass(space)
    coefficients = trajectory.displacement
    quadratic = np.einsum("ti,ti->t", coefficients, (mass @ coefficients.T).T)
    products = coefficients @ inner_products(space, problem.mode.value)
    norm_sq = l2_norm(space, problem.mode.value) ** 2
    g = problem.profile.value(trajectory.times)
    errors = quadratic - 2 * g * products + g ** 2 * norm_sq
    return float(np.sqrt(np.maximum(errors, 0.0)).max())


@dataclass(frozen=True)
class TimePolicy(MSONable):
    """
    The number of time steps used for a spatial level.

    Args:
        ratio: ``dt = ratio * h**(l / 2)``, i.e. ``dt ~ h`` for P1 and
            ``dt ~ h**1.5`` for P2.
        fixed_steps: Use this many steps on every level instead.
        min_steps: The smallest step count.
        max_steps: The largest step count.
    """

    ratio: float = 1.0
    fixed_steps: Optional[int] = None
    min_steps: int = 8
    max_steps: int = 65536

    def n_steps(self, h: float, order: int, horizon: float) -> int:
        if self.fixed_steps is not None:
            return max(self.min_steps, int(self.fixed_steps))
        dt = self.ratio * h ** (order / 2)
        steps = int(ceil(horizon / dt - 1e-9))
        return int(min(self.max_steps, max(self.min_steps, steps)))


@dataclass(frozen=True)
class InitialDataPolicy(MSONable):
    """
    The projections of the initial displacement and velocity.

    Args:
        displacement: One of ``l2``, ``ritz``, ``fourier``, ``interpolation``.
        velocity: As above.
    """

    displacement: str = "ritz"
    velocity: str = "l2"

    def __post_init__(self):
        for choice in self.projections:
            if choice not in PROJECTIONS:
                raise ValueError(
                    "Unknown projection {!r}, valid options: {}".format(choice, PROJECTIONS)
                )

    @property
    def projections(self) -> Tuple[str, str]:
        return self.displacement, self.velocity


@dataclass
class LevelResult(MSONable):
    """The errors on one refinement level; ``message`` is set on failure."""

    level: int
    h: float
    n_dofs: int = 0
    n_steps: int = 0
    e_L2: float = float("nan")
    e_H1: float = float("nan")
    e_vel: float = float("nan")
    sup_L2: float = float("nan")
    theta: float = float("nan")
    omega: float = float("nan")
    message: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.message is not None


def convergence_rates(h: np.ndarray, errors: np.ndarray) -> np.ndarray:
    """
    Get ``log(e_coarse / e_fine) / log(h_coarse / h_fine)`` between consecutive
    levels; the first entry is NaN.
    """
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    rates = np.full(len(h), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates[1:] = np.log(errors[:-1] / errors[1:]) / np.log(h[:-1] / h[1:])
    rates[~np.isfinite(rates)] = np.nan
    return rates


@dataclass
class ConvergenceReport(MSONable):
    """
    Errors and observed rates across refinement levels.

    Args:
        family: The manufactured family.
        kind: ``"fem"`` or ``"spectral"``.
        degree: The element degree ``l - 1``.
        levels: One result per level, ordered by level index.
    """

    family: str
    kind: str
    degree: int
    levels: List[LevelResult] = field(default_factory=list)

    @property
    def targets(self) -> Dict[str, int]:
        """The expected rates ``l``, ``l - 1`` and ``l``."""
        order = self.degree + 1
        return {"L2": order, "H1": order - 1, "vel": order}

    @property
    def h(self) -> np.ndarray:
        return np.array([r.h for r in self.levels])

    def errors(self, norm: str) -> np.ndarray:
        """Get the errors of ``"L2"``, ``"H1"``, ``"vel"`` or ``"sup_L2"``."""
        attr = norm if norm == "sup_L2" else "e_{}".format(norm)
        return np.array([getattr(r, attr) for r in self.levels])

    def rates(self, norm: str) -> np.ndarray:
        return convergence_rates(self.h, self.errors(norm))

    def final_rate(self, norm: str) -> float:
        """Get the rate between the two finest successful levels."""
        finite = self.rates(norm)[np.isfinite(self.rates(norm))]
        return float(finite[-1]) if len(finite) else float("nan")

    def rows(self) -> List[List[float]]:
        """Get the report rows in ``REPORT_COLUMNS`` order."""
        rates = {norm: self.rates(norm) for norm in ("L2", "H1", "vel")}
        return [
            [
                r.level,
                r.h,
                r.e_L2,
                rates["L2"][i],
                r.e_H1,
                rates["H1"][i],
                r.e_vel,
                rates["vel"][i],
            ]
            for i, r in enumerate(self.levels)
        ]

    def summary(self) -> str:
        return tabulate(self.rows(), headers=REPORT_COLUMNS, floatfmt=".4g")

    def to_csv(self, filename: Union[str, Path]):
        data = np.array(self.rows(), dtype=float).reshape(-1, len(REPORT_COLUMNS))
        fmt = ["%d"] + ["%.10e"] * (len(REPORT_COLUMNS) - 1)
        np.savetxt(
            filename, data, delimiter=",", header=",".join(REPORT_COLUMNS), comments="", fmt=fmt
        )

    def as_dict(self) -> dict:
        rows = [dict(zip(REPORT_COLUMNS, row)) for row in self.rows()]
        for row, level in zip(rows, self.levels):
            row.update(
                n_dofs=level.n_dofs,
                n_steps=level.n_steps,
                sup_L2=level.sup_L2,
                theta=level.theta,
                omega=level.omega,
                message=level.message,
            )
        return {
            "@module": self.__class__.__module__,
            "@class": self.__class__.__name__,
            "family": self.family,
            "kind": self.kind,
            "degree": self.degree,
            "targets": self.targets,
            "columns": list(REPORT_COLUMNS),
            "levels": rows,
        }

    @classmethod
    def from_dict(cls, d) -> "ConvergenceReport":
        levels = [
            LevelResult(
                level=int(row["level"]),
                h=row["h"],
                n_dofs=row.get("n_dofs", 0),
                n_steps=row.get("n_steps", 0),
                e_L2=row["e_L2"],
                e_H1=row["e_H1"],
                e_vel=row["e_vel"],
                sup_L2=row.get("sup_L2", float("nan")),
                theta=row.get("theta", float("nan")),
                omega=row.get("omega", float("nan")),
                message=row.get("message"),
            )
            for row in d["levels"]
        ]
        return cls(d["family"], d["kind"], d["degree"], levels)

    def to_json(self, filename: Union[str, Path]):
        dumpfn(self.as_dict(), filename, indent=2)

    @classmethod
    def from_json(cls, filename: Union[str, Path]) -> "ConvergenceReport":
        return cls.from_dict(loadfn(filename, cls=None))


def level_space(
    problem: ManufacturedProblem, kind: str, degree: int, base: int, level: int
) -> GalerkinSpace:
    """Get the space of a refinement level, ``base * 2**level`` cells per side."""
    n = base * 2 ** level
    if kind == "spectral":
        if problem.dim != 1:
            raise ValueError("Spectral spaces are only available in 1D")
        return build_space((0.0, 1.0), kind="spectral", m=n)
    if problem.dim == 1:
        return build_space(Mesh1D.uniform(n), degree=degree)
    return build_space(TriMesh2D.unit_square(n), degree=degree)


def _run_level(
    problem: ManufacturedProblem,
    kind: str,
    degree: int,
    base: int,
    time_policy: TimePolicy,
    initial_policy: InitialDataPolicy,
    scheme: str,
    level: int,
) -> LevelResult:
    h = float("nan")
    try:
        space = level_space(problem, kind, degree, base, level)
        h = space.h
        n_steps = time_policy.n_steps(h, space.l, problem.horizon)
        system = problem.build_system(space, initial_policy)
        trajectory = time_step_solve(system, n_steps, scheme)
        norms = error_norms(space, trajectory, problem)
        split = error_split(space, trajectory, problem)
        sup = sup_l2_error(space, trajectory, problem)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        logger.warning("Level {} failed: {}".format(level, exc))
        return LevelResult(level=level, h=h, message=str(exc))

    logger.info(
        "Level {}: h={:.4g}, {} dofs, {} steps, e_L2={:.3e}".format(
            level, h, space.dimension, n_steps, norms.l2
        )
    )
    return LevelResult(
        level=level,
        h=h,
        n_dofs=space.dimension,
        n_steps=n_steps,
        e_L2=norms.l2,
        e_H1=norms.energy,
        e_vel=norms.velocity,
        sup_L2=sup,
        theta=split.theta,
        omega=split.omega,
    )


def run_convergence(
    problem: ManufacturedProblem,
    kind: str = "fem",
    degree: int = 1,
    levels: int = 4,
    base: int = 8,
    time_policy: Optional[TimePolicy] = None,
    initial_policy: Optional[InitialDataPolicy] = None,
    scheme: str = "newmark",
    nworkers: int = 1,
) -> ConvergenceReport:
    """
    Run a spatial refinement study.

    Args:
        problem: The manufactured problem.
        kind: ``"fem"`` or ``"spectral"``.
        degree: The element degree, 1 or 2.
        levels: The number of levels, at least 3.
        base: Cells per side (or modes) on the coarsest level.
        time_policy: The time step policy. Defaults to ``dt = h**(l/2)``, or
            ``T / 2048`` for power-law kernels.
        initial_policy: The initial data projections, by default
            ``u_h(0) = R_h u0`` and ``u_h'(0) = P_h u1``.
        scheme: The time stepping scheme.
        nworkers: The number of threads used to run levels; ``-1`` uses every
            processor.

    Returns:
        The report; failed levels carry a message instead of errors.
    """
    if levels < 3:
        raise ValueError("A convergence study needs at least 3 levels; got {}".format(levels))
    if kind not in ("fem", "spectral"):
        raise ValueError("Unknown space kind {!r}".format(kind))

    if time_policy is None:
        if isinstance(problem.kernel, PowerLawKernel):
            time_policy = TimePolicy(fixed_steps=POWER_LAW_STEPS)
        else:
            time_policy = TimePolicy()
    if initial_policy is None:
        initial_policy = InitialDataPolicy()

    nworkers = multiprocessing.cpu_count() if nworkers == -1 else nworkers
    run_level = partial(
        _run_level, problem, kind, degree, base, time_policy, initial_policy, scheme
    )
    if nworkers > 1:
        with ThreadPool(min(nworkers, levels)) as pool:
            results = pool.map(run_level, range(levels))
    else:
        results = [run_level(level) for level in range(levels)]

    report = ConvergenceReport(
        problem.name, kind, degree, sorted(results, key=lambda r: r.level)
    )
    for norm in ("L2", "H1", "vel"):
        logger.info(
            "Observed {} rate {:.3f} (target {})".format(
                norm, report.final_rate(norm), report.targets[norm]
            )
        )
    return report


@dataclass
class ProjectionStudy(MSONable):
    """
    Projection errors across refinement levels.

    Args:
        h: The mesh sizes.
        ritz_l2: ``||R_h v - v||``.
        ritz_energy: ``||R_h v - v||_V``.
        l2_l2: ``||P_h v - v||``.
    """

    h: List[float]
    ritz_l2: List[float]
    ritz_energy: List[float]
    l2_l2: List[float]

    def rates(self, name: str) -> np.ndarray:
        return convergence_rates(self.h, getattr(self, name))


def projection_study(
    v: Callable,
    grad_v: Callable,
    degree: int = 1,
    levels: int = 4,
    base: int = 8,
    form: Optional[EllipticForm] = None,
    interval: Tuple[float, float] = (0.0, 1.0),
) -> ProjectionStudy:
    """
    Measure the Ritz and L2 projection errors on uniform 1D meshes.

    Args:
        v: The function to project.
        grad_v: Its derivative.
        degree: The element degree.
        levels: The number of levels.
        base: Elements on the coarsest level.
        form: The elliptic form; defaults to the Laplacian.
        interval: The interval.

    Returns:
        The errors per level.
    """
    form = form if form is not None else ScalarLaplace()
    study = ProjectionStudy([], [], [], [])
    for level in range(levels):
        mesh = Mesh1D.uniform(base * 2 ** level, *interval)
        space = build_space(mesh, degree=degree)
        ritz = ritz_project(space, v, form, grad_v)
        ritz_l2, ritz_energy = discrete_error(space, ritz, v, grad_v, form)
        l2_l2, _ = discrete_error(space, l2_project(space, v), v)
        study.h.append(space.h)
        study.ritz_l2.append(ritz_l2)
        study.ritz_energy.append(ritz_energy)
        study.l2_l2.append(l2_l2)
    return study
