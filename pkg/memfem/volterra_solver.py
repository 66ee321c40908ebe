"""
This module contains the solvers for the semidiscrete Galerkin system

    M a(t) + S alpha(t) - S int_0^t K(t - s) alpha(s) ds = F(t),

where ``a`` is the second time derivative of the coefficient vector ``alpha``.

Two routes are provided. The first reduces the system to a first-order block
system for ``D = [alpha; alpha']`` and then to a Volterra integral equation of
the second kind, solved by Picard iteration with a certificate comparing the
measured increments with the factorial bound. The second is a time stepper
(trapezoidal rule or average-acceleration Newmark) with product integration of
the memory term using exact kernel moments.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from monty.json import MSONable
from monty.serialization import dumpfn, loadfn
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.signal import fftconvolve
from scipy.special import gammaln

from memfem.galerkin_spaces import (
    AssembledPair,
    EllipticForm,
    GalerkinSpace,
    ScalarLaplace,
    assemble,
    assemble_boundary_mass,
    assemble_load,
    fourier_project,
    l2_project,
    l2_norm,
    ritz_project,
)
from memfem.kernels import MemoryKernel
from memfem.linalg import SPDSolver

logger = logging.getLogger(__name__)

SpaceTimeFunction = Callable[[np.ndarray, float], np.ndarray]
LoadFunction = Callable[[float], np.ndarray]

PROJECTIONS = ("l2", "ritz", "fourier", "interpolation")
SCHEMES = ("newmark", "trapezoidal")

# absolute slack allowed when comparing measured Picard increments to the bound
CERTIFICATE_SLACK = 1e-9

# Gauss points per grid interval used to integrate the load into the forcing
_FORCING_POINTS = 4


def _dense(matrix) -> np.ndarray:
    return matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)


def initial_coefficients(
    space: GalerkinSpace,
    u0: Optional[Callable] = None,
    u1: Optional[Callable] = None,
    projections: Sequence[str] = ("ritz", "l2"),
    form: Optional[EllipticForm] = None,
    grad_u0: Optional[Callable] = None,
    grad_u1: Optional[Callable] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Get the initial coefficient vectors ``alpha(0)`` and ``alpha'(0)``.

    Args:
        space: The Galerkin space.
        u0: The initial displacement, or ``None`` for zero.
        u1: The initial velocity, or ``None`` for zero.
        projections: The projection used for ``u0`` and ``u1``, each one of
            ``"l2"``, ``"ritz"``, ``"fourier"`` (spectral spaces only) or
            ``"interpolation"`` (FEM spaces only).
        form: The elliptic form used by the Ritz projection. Defaults to the
            scalar Laplacian.
        grad_u0: The gradient of ``u0`` for the Ritz projection.
        grad_u1: The gradient of ``u1`` for the Ritz projection.

    Returns:
        The coefficient vectors ``(alpha0, velocity0)``.
    """
    if len(projections) != 2:
        raise ValueError("Need one projection per initial datum; got {}".format(projections))

    form = form if form is not None else ScalarLaplace()
    coefficients = []
    for v, grad_v, choice in zip((u0, u1), (grad_u0, grad_u1), projections):
        if choice not in PROJECTIONS:
            raise ValueError(
                "Unknown projection {!r}, valid options: {}".format(choice, PROJECTIONS)
            )
        if v is None:
            coefficients.append(np.zeros(space.dimension))
        elif choice == "l2":
            coefficients.append(l2_project(space, v))
        elif choice == "ritz":
            coefficients.append(ritz_project(space, v, form, grad_v))
        elif choice == "fourier":
            coefficients.append(fourier_project(space, v))
        else:
            coefficients.append(space.interpolate(v))
    return coefficients[0], coefficients[1]


@dataclass
class SemidiscreteSystem(object):
    """
    The matrix system ``M alpha'' + S alpha - S int K alpha = F(t)``.

    Args:
        pair: The mass and stiffness matrices.
        kernel: The memory kernel; must be admissible on ``(0, horizon)``.
        horizon: The final time ``T``.
        alpha0: The initial coefficients.
        velocity0: The initial velocity coefficients.
        load: The load vector ``F(t)``, or ``None`` for ``F = 0``.
        space: The Galerkin space the system was built on, if any.
        form: The elliptic form the system was built with, if any.
        f: The volume load ``f(x, t)`` behind ``F``, used by ``bound_Z0``.
        g: The Neumann datum ``g(x, t)`` behind ``F``, used by ``bound_Z0``.
        u0: The initial displacement behind ``alpha0``.
        u1: The initial velocity behind ``velocity0``.
    """

    pair: AssembledPair
    kernel: MemoryKernel
    horizon: float
    alpha0: np.ndarray
    velocity0: np.ndarray
    load: Optional[LoadFunction] = None
    space: Optional[GalerkinSpace] = None
    form: Optional[EllipticForm] = None
    f: Optional[SpaceTimeFunction] = None
    g: Optional[SpaceTimeFunction] = None
    u0: Optional[Callable] = None
    u1: Optional[Callable] = None
    _mass_solver: Optional[SPDSolver] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.alpha0 = np.asarray(self.alpha0, dtype=float)
        self.velocity0 = np.asarray(self.velocity0, dtype=float)
        m = self.pair.dimension
        if self.pair.stiffness.shape != (m, m):
            raise ValueError("Mass and stiffness matrices must have the same shape")
        if self.alpha0.shape != (m,) or self.velocity0.shape != (m,):
            raise ValueError(
                "Initial coefficients must have length {}; got {} and {}".format(
                    m, self.alpha0.shape, self.velocity0.shape
                )
            )
        if self.horizon <= 0:
            raise ValueError("Final time must be positive; got {}".format(self.horizon))

        validation = self.kernel.validate(self.horizon)
        if not validation.passed:
            raise ValueError(
                "Kernel is not admissible on (0, {}): {}".format(
                    self.horizon, "; ".join(validation.messages)
                )
            )

    @classmethod
    def from_problem(
        cls,
        space: GalerkinSpace,
        form: EllipticForm,
        kernel: MemoryKernel,
        horizon: float,
        f: Optional[SpaceTimeFunction] = None,
        g: Optional[SpaceTimeFunction] = None,
        u0: Optional[Callable] = None,
        u1: Optional[Callable] = None,
        projections: Sequence[str] = ("ritz", "l2"),
        grad_u0: Optional[Callable] = None,
        grad_u1: Optional[Callable] = None,
    ) -> "SemidiscreteSystem":
        """
        Build the semidiscrete system of a continuous problem.

        Args:
            space: The Galerkin space.
            form: The elliptic form.
            kernel: The memory kernel.
            horizon: The final time.
            f: The volume load ``f(x, t)``.
            g: The Neumann datum ``g(x, t)``.
            u0: The initial displacement.
            u1: The initial velocity.
            projections: The projections used for ``u0`` and ``u1``.
            grad_u0: The gradient of ``u0``.
            grad_u1: The gradient of ``u1``.

        Returns:
            The system.
        """
        pair = assemble(space, form)
        alpha0, velocity0 = initial_coefficients(
            space, u0, u1, projections, form=form, grad_u0=grad_u0, grad_u1=grad_u1
        )

        load = None
        if f is not None or g is not None:

            def load(t):
                volume = (lambda x: f(x, t)) if f is not None else None
                surface = (lambda x: g(x, t)) if g is not None else None
                return assemble_load(space, volume, surface)

        return cls(
            pair,
            kernel,
            horizon,
            alpha0,
            velocity0,
            load=load,
            space=space,
            form=form,
            f=f,
            g=g,
            u0=u0,
            u1=u1,
        )

    @property
    def dimension(self) -> int:
        return self.pair.dimension

    @property
    def kappa(self) -> float:
        return self.kernel.l1_norm(self.horizon)

    @property
    def mass_solver(self) -> SPDSolver:
        if self._mass_solver is None:
            self._mass_solver = SPDSolver(self.pair.mass)
        return self._mass_solver

    def load_at(self, t: float) -> np.ndarray:
        """Get ``F(t)``."""
        if self.load is None:
            return np.zeros(self.dimension)
        return np.asarray(self.load(t), dtype=float)

    def mass_inverse_stiffness(self) -> np.ndarray:
        """Get the dense matrix ``M^-1 S``."""
        return self.mass_solver.solve(_dense(self.pair.stiffness))


@dataclass
class FirstOrderSystem(object):
    """
    The block system
    ``Mt D' + St D - Stt int_0^t K(t - s) D(s) ds = [0; F(t)]`` with
    ``D = [alpha; alpha']``.

    Args:
        system: The second-order system.
        block_mass: ``Mt = blockdiag(M, M)``.
        block_stiffness: ``St = [[0, -M], [S, 0]]``.
        block_memory: ``Stt = [[0, 0], [S, 0]]``.
    """

    system: SemidiscreteSystem
    block_mass: sparse.csr_matrix
    block_stiffness: sparse.csr_matrix
    block_memory: sparse.csr_matrix

    @property
    def dimension(self) -> int:
        return self.block_mass.shape[0]

    def generator(self) -> np.ndarray:
        """Get ``Mt^-1 St = [[0, -I], [M^-1 S, 0]]``."""
        m = self.system.dimension
        minv_s = self.system.mass_inverse_stiffness()
        out = np.zeros((2 * m, 2 * m))
        out[:m, m:] = -np.eye(m)
        out[m:, :m] = minv_s
        return out

    def memory(self) -> np.ndarray:
        """Get ``Mt^-1 Stt = [[0, 0], [M^-1 S, 0]]``."""
        m = self.system.dimension
        out = np.zeros((2 * m, 2 * m))
        out[m:, :m] = self.system.mass_inverse_stiffness()
        return out

    def forcing_rate(self, t: float) -> np.ndarray:
        """Get ``Mt^-1 [0; F(t)]``."""
        m = self.system.dimension
        out = np.zeros(2 * m)
        out[m:] = self.system.mass_solver.solve(self.system.load_at(t))
        return out

    def residual(
        self, t: float, state: np.ndarray, rate: np.ndarray, memory_integral: np.ndarray
    ) -> np.ndarray:
        """
        Evaluate ``D' + Mt^-1 St D - Mt^-1 Stt int K D - Mt^-1 [0; F]``.

        Args:
            t: The time.
            state: ``D(t)``.
            rate: ``D'(t)``.
            memory_integral: ``int_0^t K(t - s) D(s) ds``.

        Returns:
            The residual, zero for an exact solution.
        """
        return (
            rate
            + self.generator() @ state
            - self.memory() @ memory_integral
            - self.forcing_rate(t)
        )


def to_first_order(system: SemidiscreteSystem) -> FirstOrderSystem:
    """
    Write the second-order system in first-order block form.

    Args:
        system: The semidiscrete system.

    Returns:
        The block system.
    """
    mass = sparse.csr_matrix(system.pair.mass)
    stiffness = sparse.csr_matrix(system.pair.stiffness)
    zero = sparse.csr_matrix(mass.shape)
    block_mass = sparse.bmat([[mass, None], [None, mass]], format="csr")
    block_stiffness = sparse.bmat([[zero, -mass], [stiffness, zero]], format="csr")
    block_memory = sparse.bmat([[zero, zero], [stiffness, zero]], format="csr")
    return FirstOrderSystem(system, block_mass, block_stiffness, block_memory)


@dataclass
class VolterraIE(object):
    """
    The integral equation ``D(t) = int_0^t Kt(t, s) D(s) ds + Ft(t)``.

    The kernel matrix is ``Kt(t, s) = A + P(t - s) B`` where
    ``A = -Mt^-1 St``, ``B = Mt^-1 Stt`` and ``P`` is the primitive of the
    memory kernel. It is continuous up to ``s = t`` because ``P(0) = 0``.

    Args:
        system: The semidiscrete system.
        constant_part: The matrix ``A``.
        memory_part: The matrix ``B``.
        initial_state: ``D(0) = [alpha0; velocity0]``.
        forcing_rate: ``t -> Mt^-1 [0; F(t)]``.
    """

    system: SemidiscreteSystem
    constant_part: np.ndarray
    memory_part: np.ndarray
    initial_state: np.ndarray
    forcing_rate: Callable[[float], np.ndarray]

    @property
    def dimension(self) -> int:
        return len(self.initial_state)

    @property
    def kernel(self) -> MemoryKernel:
        return self.system.kernel

    @property
    def horizon(self) -> float:
        return self.system.horizon

    def kernel_matrix(self, t: float, s: float) -> np.ndarray:
        """Evaluate ``Kt(t, s)`` for ``0 <= s <= t``."""
        if s > t or s < 0:
            raise ValueError("Kernel matrix needs 0 <= s <= t; got t={}, s={}".format(t, s))
        return self.constant_part + self.kernel.primitive(t - s) * self.memory_part

    def forcing(self, times: np.ndarray) -> np.ndarray:
        """
        Evaluate ``Ft`` on an increasing time grid starting at zero.

        The load is integrated with a Gauss-Legendre rule on each grid interval.

        Returns:
            The forcing with the shape ``(len(times), 2m)``.
        """
        times = np.asarray(times, dtype=float)
        out = np.tile(self.initial_state, (len(times), 1))
        if self.system.load is None:
            return out

        x, w = np.polynomial.legendre.leggauss(_FORCING_POINTS)
        increments = np.zeros((len(times), self.dimension))
        for i in range(1, len(times)):
            half = (times[i] - times[i - 1]) / 2
            nodes = times[i - 1] + half * (x + 1)
            increments[i] = half * sum(
                wk * self.forcing_rate(tk) for wk, tk in zip(w, nodes)
            )
        return out + np.cumsum(increments, axis=0)


def to_integral_equation(system: SemidiscreteSystem) -> VolterraIE:
    """
    Integrate the first-order system in time to obtain a Volterra integral
    equation of the second kind.

    Args:
        system: The semidiscrete system.

    Returns:
        The integral equation.
    """
    first_order = to_first_order(system)
    return VolterraIE(
        system=system,
        constant_part=-first_order.generator(),
        memory_part=first_order.memory(),
        initial_state=np.concatenate((system.alpha0, system.velocity0)),
        forcing_rate=first_order.forcing_rate,
    )


def bound_Z(system: SemidiscreteSystem) -> float:
    """
    Get ``Z = |M^-1 S|_inf (1 + kappa)``.

    For spectral spaces this is ``(1 + kappa) max_k lambda_k``.

    Args:
        system: The semidiscrete system.

    Returns:
        The bound ``Z``.
    """
    row_norm = float(np.abs(system.mass_inverse_stiffness()).sum(axis=1).max())
    z = row_norm * (1 + system.kappa)
    if z < 1:
        warnings.warn(
            "|M^-1 S|_inf (1 + kappa) = {:.3g} < 1; the identity block of the kernel "
            "matrix dominates and Z does not bound it".format(z)
        )
    return z


def trace_constant(space: GalerkinSpace, form: Optional[EllipticForm] = None) -> float:
    """
    Get ``max_k ||phi_k||_{Neumann boundary} / ||phi_k||_V``.

    Args:
        space: The Galerkin space.
        form: The form inducing the energy norm; defaults to the Laplacian.

    Returns:
        The constant, zero when there is no Neumann boundary.
    """
    boundary = assemble_boundary_mass(space)
    if boundary.nnz == 0:
        return 0.0
    form = form if form is not None else ScalarLaplace()
    stiffness = assemble(space, form).stiffness
    ratios = np.sqrt(boundary.diagonal() / stiffness.diagonal())
    return float(ratios.max())


def _time_l1(norm_at: Callable[[float], float], horizon: float, n_points: int = 32) -> float:
    x, w = np.polynomial.legendre.leggauss(n_points)
    nodes = horizon / 2 * (x + 1)
    return float(horizon / 2 * sum(wk * norm_at(tk) for wk, tk in zip(w, nodes)))


def _boundary_norm(space: GalerkinSpace, g: Callable) -> float:
    q = space.boundary_quadrature()
    if q is None:
        raise ValueError("A Neumann datum was given but the mesh has no Neumann boundary")
    values = np.asarray(g(q.flat_points), dtype=float).reshape(q.weights.shape + (-1,))
    return float(np.sqrt(np.einsum("eq,eqc,eqc->", q.weights, values, values)))


def bound_Z0(system: SemidiscreteSystem, trace_const: Optional[float] = None) -> float:
    """
    Get a bound ``Z0`` on ``sup_t |Ft(t)|_inf``.

    When the continuous data ``f`` and ``g`` are known, the load term is
    ``|M^-1|_inf (||f||_L1 + ||g||_L1) max_k(||phi_k|| + C_Trace ||phi_k||_V)``;
    otherwise it is the time integral of ``|M^-1 F(t)|_inf``. Spectral systems
    with known ``u0`` and ``u1`` use ``||u0|| + ||u1||`` for the initial term.

    Args:
        system: The semidiscrete system.
        trace_const: ``C_Trace``; computed by ``trace_constant`` if omitted.

    Returns:
        The bound ``Z0``.
    """
    space = system.space
    spectral = space is not None and space.is_spectral
    if spectral and system.u0 is not None and system.u1 is not None:
        initial = l2_norm(space, system.u0) + l2_norm(space, system.u1)
    else:
        initial = float(np.abs(system.alpha0).max() + np.abs(system.velocity0).max())

    if system.load is None:
        return initial

    horizon = system.horizon
    if space is None or (system.f is None and system.g is None):

        def rate(t):
            return float(np.abs(system.mass_solver.solve(system.load_at(t))).max())

        return initial + _time_l1(rate, horizon)

    f_l1 = 0.0
    if system.f is not None:
        f_l1 = _time_l1(lambda t: l2_norm(space, lambda x: system.f(x, t)), horizon)
    g_l1 = 0.0
    if system.g is not None:
        g_l1 = _time_l1(lambda t: _boundary_norm(space, lambda x: system.g(x, t)), horizon)

    if trace_const is None:
        trace_const = trace_constant(space, system.form)
    mass = system.pair.mass
    stiffness = system.pair.stiffness
    basis = np.sqrt(mass.diagonal()) + trace_const * np.sqrt(stiffness.diagonal())
    mass_inverse = np.abs(system.mass_solver.solve(np.eye(system.dimension))).sum(axis=1).max()
    return initial + float(mass_inverse) * (f_l1 + g_l1) * float(basis.max())


@dataclass
class Trajectory(MSONable):
    """
    Coefficient vectors on a time grid.

    Args:
        times: The time grid.
        displacement: ``alpha`` with the shape ``(len(times), m)``.
        velocity: ``alpha'`` with the shape ``(len(times), m)``.
    """

    times: np.ndarray
    displacement: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.displacement = np.asarray(self.displacement, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.displacement.shape != self.velocity.shape or len(self.times) != len(
            self.displacement
        ):
            raise ValueError("Trajectory arrays have inconsistent shapes")

    @classmethod
    def from_states(cls, times: np.ndarray, states: np.ndarray) -> "Trajectory":
        """Split first-order states ``D = [alpha; alpha']``."""
        m = states.shape[1] // 2
        return cls(times, states[:, :m], states[:, m:])

    @property
    def dimension(self) -> int:
        return self.displacement.shape[1]

    @property
    def states(self) -> np.ndarray:
        return np.hstack((self.displacement, self.velocity))

    @property
    def final_displacement(self) -> np.ndarray:
        return self.displacement[-1]

    @property
    def final_velocity(self) -> np.ndarray:
        return self.velocity[-1]

    def energy(self, pair: AssembledPair) -> np.ndarray:
        """Get ``1/2 v^T M v + 1/2 alpha^T S alpha`` at every time."""
        kinetic = np.einsum("ti,ti->t", self.velocity, (pair.mass @ self.velocity.T).T)
        potential = np.einsum(
            "ti,ti->t", self.displacement, (pair.stiffness @ self.displacement.T).T
        )
        return 0.5 * (kinetic + potential)

    def to_csv(self, filename: Union[str, Path]):
        """
        Write the trajectory as CSV with the columns ``time``, ``alpha_0`` ...
        ``alpha_{m-1}``, ``velocity_0`` ... ``velocity_{m-1}``.
        """
        m = self.dimension
        header = ["time"]
        header += ["alpha_{}".format(i) for i in range(m)]
        header += ["velocity_{}".format(i) for i in range(m)]
        data = np.column_stack((self.times, self.displacement, self.velocity))
        np.savetxt(filename, data, delimiter=",", header=",".join(header), comments="")

    @classmethod
    def from_csv(cls, filename: Union[str, Path]) -> "Trajectory":
        data = np.atleast_2d(np.loadtxt(filename, delimiter=",", skiprows=1))
        m = (data.shape[1] - 1) // 2
        return cls(data[:, 0], data[:, 1 : 1 + m], data[:, 1 + m :])


@dataclass
class PicardCertificate(MSONable):
    """
    Measured Picard increments next to the bound
    ``Z^(n+1) T^(n+1) / (n+1)! Z0``.

    Args:
        Z: The kernel matrix bound.
        Z0: The forcing bound.
        horizon: The final time ``T``.
        iterations: One ``{"n", "measured", "bound"}`` record per iteration.
    """

    Z: float
    Z0: float
    horizon: float
    iterations: List[Dict[str, float]] = field(default_factory=list)

    @staticmethod
    def bound(Z: float, Z0: float, horizon: float, n: int) -> float:
        """Get ``Z^(n+1) T^(n+1) / (n+1)! Z0``, evaluated in log space."""
        scale = Z * horizon
        if scale == 0 or Z0 == 0:
            return 0.0
        return float(np.exp((n + 1) * np.log(scale) - gammaln(n + 2)) * Z0)

    def record(self, n: int, measured: float):
        self.iterations.append(
            {
                "n": n,
                "measured": float(measured),
                "bound": self.bound(self.Z, self.Z0, self.horizon, n),
            }
        )

    def dominated(self, slack: float = CERTIFICATE_SLACK, n_max: Optional[int] = None) -> bool:
        """
        Check every measured increment is below its bound plus ``slack``.

        Args:
            slack: The absolute slack.
            n_max: Only check iterations ``n <= n_max``.
        """
        return all(
            it["measured"] <= it["bound"] + slack
            for it in self.iterations
            if n_max is None or it["n"] <= n_max
        )

    def as_dict(self) -> dict:
        return {
            "@module": self.__class__.__module__,
            "@class": self.__class__.__name__,
            "Z": self.Z,
            "Z0": self.Z0,
            "horizon": self.horizon,
            "iterations": [dict(it) for it in self.iterations],
        }

    @classmethod
    def from_dict(cls, d) -> "PicardCertificate":
        return PicardCertificate(
            Z=d["Z"],
            Z0=d["Z0"],
            horizon=d.get("horizon", 0.0),
            iterations=[
                {"n": int(it["n"]), "measured": it["measured"], "bound": it["bound"]}
                for it in d["iterations"]
            ],
        )

    def to_json(self, filename: Union[str, Path]):
        dumpfn(self.as_dict(), filename, indent=2)

    @classmethod
    def from_json(cls, filename: Union[str, Path]) -> "PicardCertificate":
        return cls.from_dict(loadfn(filename, cls=None))


@dataclass
class PicardResult(object):
    """
    The outcome of Picard iteration.

    Args:
        trajectory: The last iterate on the time grid.
        iterations: The number of sweeps performed.
        converged: Whether the increment fell below the tolerance.
        last_increment: The sup-norm of the last increment.
        certificate: The bound comparison; ``None`` when the iteration was
            started from a custom iterate.
    """

    trajectory: Trajectory
    iterations: int
    converged: bool
    last_increment: float
    certificate: Optional[PicardCertificate] = None


def picard_solve(
    ie: VolterraIE,
    n_steps: int,
    max_iters: int = 60,
    tol: float = 1e-10,
    initial_iterate: Optional[np.ndarray] = None,
    trace_const: Optional[float] = None,
) -> PicardResult:
    """
    Solve the integral equation by Picard iteration on a uniform grid.

    Each sweep evaluates ``int_0^t Kt(t, s) D(s) ds`` with the composite
    trapezoidal rule; the memory part is a discrete convolution computed with
    FFTs.

    Args:
        ie: The integral equation.
        n_steps: The number of grid intervals ``N >= 8``.
        max_iters: The maximum number of sweeps.
        tol: Stop when the sup-norm of the increment is at most ``tol``.
        initial_iterate: A replacement for the first iterate ``D0 = Ft``, with
            the shape ``(N + 1, 2m)``. No certificate is produced in this case.
        trace_const: Passed to ``bound_Z0``.

    Returns:
        The result, reported rather than raised when not converged.
    """
    if n_steps < 8:
        raise ValueError("Picard iteration needs at least 8 intervals; got {}".format(n_steps))
    if tol <= 0:
        raise ValueError("tol must be positive; got {}".format(tol))

    horizon = ie.horizon
    times = np.linspace(0, horizon, n_steps + 1)
    h = horizon / n_steps
    forcing = ie.forcing(times)

    certificate = None
    if initial_iterate is None:
        iterate = forcing.copy()
        certificate = PicardCertificate(
            Z=bound_Z(ie.system), Z0=bound_Z0(ie.system, trace_const), horizon=horizon
        )
    else:
        iterate = np.array(initial_iterate, dtype=float)
        if iterate.shape != forcing.shape:
            raise ValueError(
                "Initial iterate must have the shape {}; got {}".format(
                    forcing.shape, iterate.shape
                )
            )

    primitive = np.asarray(ie.kernel.primitive(times), dtype=float)
    constant_t = ie.constant_part.T
    memory_t = ie.memory_part.T

    increment = np.inf
    converged = False
    n = 0
    for n in range(max_iters):
        integral = cumulative_trapezoid(iterate, dx=h, axis=0, initial=0)
        convolution = h * fftconvolve(primitive[:, None], iterate, axes=0)[: n_steps + 1]
        convolution -= 0.5 * h * primitive[:, None] * iterate[0]
        update = integral @ constant_t + convolution @ memory_t + forcing

        increment = float(np.abs(update - iterate).max())
        iterate = update
        if certificate is not None:
            certificate.record(n, increment)
        if increment <= tol:
            converged = True
            break

    iterations = n + 1
    if converged:
        logger.info("Picard iteration converged in {} sweeps".format(iterations))
    else:
        logger.warning(
            "Picard iteration did not converge in {} sweeps; last increment {:.3e}".format(
                iterations, increment
            )
        )

    return PicardResult(
        trajectory=Trajectory.from_states(times, iterate),
        iterations=iterations,
        converged=converged,
        last_increment=increment,
        certificate=certificate,
    )


def product_integration_weights(
    kernel: MemoryKernel, dt: float, n_steps: int
) -> np.ndarray:
    """
    Get the exact kernel moments ``w_k = int_{k dt}^{(k+1) dt} K`` for
    ``k = 0 ... n_steps - 1``.

    The weights telescope, so the first ``n`` of them sum to ``P(n dt)``.
    """
    grid = dt * np.arange(n_steps + 1)
    return np.diff(np.asarray(kernel.primitive(grid), dtype=float))


def time_step_solve(
    system: SemidiscreteSystem, n_steps: int, scheme: str = "newmark"
) -> Trajectory:
    """
    Integrate the system in time on a uniform grid.

    The memory term at ``t_{n+1}`` is approximated by
    ``sum_j w_{n-j} (alpha_j + alpha_{j+1}) / 2`` with the exact moments
    ``w`` of ``product_integration_weights``, so the kernel is never
    evaluated at zero.

    Args:
        system: The semidiscrete system.
        n_steps: The number of steps ``N >= 8``.
        scheme: ``"newmark"`` (average acceleration) or ``"trapezoidal"``
            (trapezoidal rule on the first-order form).

    Returns:
        The trajectory on ``N + 1`` grid points.
    """
    if n_steps < 8:
        raise ValueError("Time stepping needs at least 8 steps; got {}".format(n_steps))
    if scheme not in SCHEMES:
        raise ValueError("Unknown scheme {!r}, valid options: {}".format(scheme, SCHEMES))

    h = system.horizon / n_steps
    times = np.linspace(0, system.horizon, n_steps + 1)
    weights = product_integration_weights(system.kernel, h, n_steps)
    implicit = 0.5 * weights[0]

    mass = system.pair.mass
    stiffness = system.pair.stiffness
    m = system.dimension

    if scheme == "newmark":
        step_matrix = (4 / h ** 2) * mass + (1 - implicit) * stiffness
    else:
        step_matrix = (2 / h) * mass + (h / 2) * (1 - implicit) * stiffness
    step_solver = SPDSolver(step_matrix)

    alpha = np.zeros((n_steps + 1, m))
    velocity = np.zeros((n_steps + 1, m))
    averages = np.zeros((n_steps, m))
    alpha[0] = system.alpha0
    velocity[0] = system.velocity0

    load = system.load_at(0.0)
    accel = system.mass_solver.solve(load - stiffness @ alpha[0])
    rate = load - stiffness @ alpha[0]

    for n in range(n_steps):
        history = implicit * alpha[n]
        if n > 0:
            history = history + weights[n:0:-1] @ averages[:n]
        next_load = system.load_at(times[n + 1])
        rhs_history = stiffness @ history

        if scheme == "newmark":
            rhs = (
                next_load
                + rhs_history
                + mass @ ((4 / h ** 2) * alpha[n] + (4 / h) * velocity[n] + accel)
            )
            alpha[n + 1] = step_solver.solve(rhs)
            next_accel = (
                (4 / h ** 2) * (alpha[n + 1] - alpha[n]) - (4 / h) * velocity[n] - accel
            )
            velocity[n + 1] = velocity[n] + 0.5 * h * (accel + next_accel)
            accel = next_accel
        else:
            rhs = (
                mass @ ((2 / h) * alpha[n] + 2 * velocity[n])
                + 0.5 * h * (rate + next_load + rhs_history)
            )
            alpha[n + 1] = step_solver.solve(rhs)
            velocity[n + 1] = (2 / h) * (alpha[n + 1] - alpha[n]) - velocity[n]
            memory = implicit * alpha[n + 1] + history
            rate = next_load - stiffness @ alpha[n + 1] + stiffness @ memory

        averages[n] = 0.5 * (alpha[n] + alpha[n + 1])

    logger.info(
        "Integrated {} dofs over {} {} steps of size {:.3e}".format(m, n_steps, scheme, h)
    )
    return Trajectory(times, alpha, velocity)
