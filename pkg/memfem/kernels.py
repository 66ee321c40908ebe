"""
This module contains the memory kernels that weight the history term of the
integro-differential equation, together with the derived function ξ used to
check the positive-type property.

An admissible kernel is nonnegative, nonincreasing and has an L1 norm
``kappa < 1`` on the time horizon of interest. Every kernel here has an
analytic primitive, which is what the solvers integrate against.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np
from monty.json import MSONable
from scipy.special import gamma

ArrayLike = Union[float, np.ndarray]

# number of halvings of T used by the geometric validation grid
_GEOMETRIC_LEVELS = 40


@dataclass(frozen=True)
class KernelValidation(MSONable):
    """
    The result of checking a kernel against the admissibility conditions.

    Args:
        kernel: The kernel that was checked.
        horizon: The final time the kernel was checked against.
        kappa: The L1 norm of the kernel on ``(0, horizon)``.
        nonnegative: Whether ``K(t) >= 0`` held on the sample grid.
        nonincreasing: Whether ``K`` was nonincreasing on the sample grid.
        kappa_below_one: Whether ``kappa < 1``.
    """

    kernel: "MemoryKernel"
    horizon: float
    kappa: float
    nonnegative: bool
    nonincreasing: bool
    kappa_below_one: bool

    @property
    def passed(self) -> bool:
        return self.nonnegative and self.nonincreasing and self.kappa_below_one

    @property
    def messages(self) -> List[str]:
        """Get one line per checked property."""
        messages = [
            "K >= 0: {}".format("pass" if self.nonnegative else "fail"),
            "K nonincreasing: {}".format("pass" if self.nonincreasing else "fail"),
        ]
        if self.kappa_below_one:
            messages.append("kappa = {:.4f} < 1: pass".format(self.kappa))
        else:
            messages.append("kappa = {:.4f} >= 1: fail".format(self.kappa))
        return messages


@dataclass(frozen=True)
class MemoryKernel(MSONable):
    """
    Base class for convolution kernels.

    Subclasses implement ``_evaluate`` and ``primitive``; everything else
    (moments, L1 norm, validation) is derived from those two.
    """

    variant = "base"

    def evaluate(self, t: ArrayLike) -> ArrayLike:
        """
        Evaluate the kernel.

        Args:
            t: The time(s) at which to evaluate the kernel.

        Returns:
            The kernel values ``K(t)``, with the same shape as ``t``.
        """
        t_arr = np.asarray(t, dtype=float)
        self._check_domain(t_arr)
        values = self._evaluate(t_arr)
        return float(values) if np.ndim(values) == 0 else values

    __call__ = evaluate

    def _check_domain(self, t: np.ndarray):
        if np.any(t < 0):
            raise ValueError(
                "Kernels are only defined for t >= 0; got t={}".format(np.min(t))
            )

    def _evaluate(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, t: ArrayLike) -> ArrayLike:
        """Get the time derivative of the kernel."""
        raise NotImplementedError

    def primitive(self, t: ArrayLike) -> ArrayLike:
        """
        Get the antiderivative of the kernel from zero.

        Args:
            t: Upper integration limit(s), ``t >= 0``.

        Returns:
            The integral of the kernel over ``(0, t)``.
        """
        raise NotImplementedError

    def moment(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        """Get the integral of the kernel over ``(a, b)``."""
        return self.primitive(b) - self.primitive(a)

    def l1_norm(self, horizon: float) -> float:
        """
        Get the L1 norm of the kernel on ``(0, horizon)``.

        The kernel is nonnegative so the norm is the primitive at the horizon.
        """
        if horizon <= 0:
            raise ValueError("Horizon must be positive; got {}".format(horizon))
        return float(self.primitive(horizon))

    def validate(self, horizon: float) -> KernelValidation:
        """
        Check the kernel is admissible on ``(0, horizon]``.

        The sign and monotonicity are sampled on a geometric grid clustered
        at zero, ``horizon * 2**-j``, merged with a uniform grid.

        Args:
            horizon: The final time.

        Returns:
            The validation report. A failed check is reported, not raised.
        """
        if horizon <= 0:
            raise ValueError("Horizon must be positive; got {}".format(horizon))

        geometric = horizon * 2.0 ** -np.arange(_GEOMETRIC_LEVELS + 1)
        uniform = np.linspace(0, horizon, 201)[1:]
        grid = np.unique(np.concatenate((geometric, uniform)))

        values = np.asarray(self.evaluate(grid))
        scale = max(float(np.max(np.abs(values))), 1.0)
        nonnegative = bool(np.all(values >= 0))
        nonincreasing = bool(np.all(np.diff(values) <= 1e-14 * scale))

        kappa = self.l1_norm(horizon)
        return KernelValidation(
            kernel=self,
            horizon=horizon,
            kappa=kappa,
            nonnegative=nonnegative,
            nonincreasing=nonincreasing,
            kappa_below_one=kappa < 1,
        )

    def to_spec(self) -> Dict[str, Union[str, float]]:
        """Get the kernel in the key-value form used by experiment configs."""
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialKernel(MemoryKernel):
    """
    The smooth kernel ``K(t) = c * exp(-gamma * t)``.

    Args:
        c: The amplitude.
        rate: The decay rate ``gamma``.
    """

    c: float = 1.0
    rate: float = 1.0

    variant = "exponential"

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive; got {}".format(self.c))
        if self.rate <= 0:
            raise ValueError("gamma must be positive; got {}".format(self.rate))

    def _evaluate(self, t: np.ndarray) -> np.ndarray:
        return self.c * np.exp(-self.rate * t)

    def derivative(self, t: ArrayLike) -> ArrayLike:
        return -self.rate * self.evaluate(t)

    def primitive(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        values = -self.c * np.expm1(-self.rate * t) / self.rate
        return float(values) if np.ndim(values) == 0 else values

    def to_spec(self) -> Dict[str, Union[str, float]]:
        return {"variant": self.variant, "c": self.c, "gamma": self.rate}


@dataclass(frozen=True)
class PowerLawKernel(MemoryKernel):
    """
    The weakly singular kernel ``K(t) = c * t**(alpha - 1) / Gamma(alpha)``.

    Args:
        alpha: The exponent, ``0 < alpha < 1``.
        c: The scale. ``c = 1`` gives the fractional-order kernel, which is not
            admissible on long horizons; see ``from_kappa``.
    """

    alpha: float = 0.5
    c: float = 1.0

    variant = "power_law"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0,1); got {}".format(self.alpha))
        if self.c <= 0:
            raise ValueError("c must be positive; got {}".format(self.c))

    @classmethod
    def from_kappa(cls, alpha: float, kappa: float, horizon: float) -> "PowerLawKernel":
        """
        Get the power-law kernel whose L1 norm on ``(0, horizon)`` is ``kappa``.

        Args:
            alpha: The exponent.
            kappa: The target L1 norm.
            horizon: The final time.

        Returns:
            The scaled kernel.
        """
        if kappa <= 0:
            raise ValueError("kappa must be positive; got {}".format(kappa))
        c = kappa * gamma(alpha + 1) / horizon ** alpha
        return cls(alpha=alpha, c=c)

    def _check_domain(self, t: np.ndarray):
        if np.any(t <= 0):
            raise ValueError(
                "PowerLaw kernel is singular at t=0; got t={}".format(np.min(t))
            )

    def _evaluate(self, t: np.ndarray) -> np.ndarray:
        return self.c * t ** (self.alpha - 1) / gamma(self.alpha)

    def derivative(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        self._check_domain(t)
        values = self.c * (self.alpha - 1) * t ** (self.alpha - 2) / gamma(self.alpha)
        return float(values) if np.ndim(values) == 0 else values

    def primitive(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        values = self.c * t ** self.alpha / gamma(self.alpha + 1)
        return float(values) if np.ndim(values) == 0 else values

    def to_spec(self) -> Dict[str, Union[str, float]]:
        return {"variant": self.variant, "alpha": self.alpha, "c": self.c}


@dataclass(frozen=True)
class ZeroKernel(MemoryKernel):
    """The kernel ``K = 0``, which reduces the problem to the wave equation."""

    variant = "zero"

    def _evaluate(self, t: np.ndarray) -> np.ndarray:
        return np.zeros_like(t)

    def derivative(self, t: ArrayLike) -> ArrayLike:
        return self.evaluate(t)

    def primitive(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        return 0.0 if np.ndim(t) == 0 else np.zeros_like(t)

    def to_spec(self) -> Dict[str, Union[str, float]]:
        return {"variant": self.variant}


KERNEL_VARIANTS = {
    "exponential": ExponentialKernel,
    "power_law": PowerLawKernel,
    "zero": ZeroKernel,
}


def kernel_from_dict(spec: Dict, horizon: Optional[float] = None) -> MemoryKernel:
    """
    Build a kernel from its key-value specification.

    Args:
        spec: A dictionary with a ``variant`` key plus parameters: ``c`` and
            ``gamma`` for exponential kernels; ``alpha`` and either ``c`` or
            ``kappa`` for power-law kernels.
        horizon: The final time; required when a power-law kernel is given by
            its ``kappa``.

    Returns:
        The kernel.
    """
    variant = spec.get("variant")
    if variant not in KERNEL_VARIANTS:
        raise ValueError(
            "Unknown kernel variant {!r}, valid options: {}".format(
                variant, list(KERNEL_VARIANTS)
            )
        )

    if variant == "exponential":
        return ExponentialKernel(c=spec.get("c", 1.0), rate=spec.get("gamma", 1.0))

    if variant == "power_law":
        alpha = spec.get("alpha", 0.5)
        if "kappa" in spec:
            if horizon is None:
                raise ValueError("A horizon is needed to scale a kernel by kappa")
            return PowerLawKernel.from_kappa(alpha, spec["kappa"], horizon)
        return PowerLawKernel(alpha=alpha, c=spec.get("c", 1.0))

    return ZeroKernel()


@dataclass(frozen=True)
class XiFunction(MSONable):
    """
    The function ``xi(t) = kappa - int_0^t K = int_t^T K`` on ``[0, T]``.

    ``xi`` is nonincreasing with ``xi(0) = kappa`` and ``xi(T) = 0``.

    Args:
        kernel: The memory kernel.
        horizon: The final time ``T``.
    """

    kernel: MemoryKernel
    horizon: float

    @property
    def kappa(self) -> float:
        return self.kernel.l1_norm(self.horizon)

    def evaluate(self, t: ArrayLike) -> ArrayLike:
        """
        Evaluate ``xi`` using the analytic primitive of the kernel.

        Args:
            t: Time(s) in ``[0, T]``.

        Returns:
            The values of ``xi``.
        """
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0) or np.any(t_arr > self.horizon):
            raise ValueError(
                "xi is defined on [0, {}]; got t in [{}, {}]".format(
                    self.horizon, np.min(t_arr), np.max(t_arr)
                )
            )
        values = self.kernel.primitive(self.horizon) - self.kernel.primitive(t_arr)
        values = np.maximum(values, 0.0)
        return float(values) if np.ndim(values) == 0 else values

    __call__ = evaluate


def positive_type_check(
    xi: XiFunction,
    phi: np.ndarray,
    n_intervals: int = 64,
    n_points: int = 4,
) -> float:
    """
    Evaluate ``int_0^T int_0^t xi(t - s) phi(t) phi(s) ds dt``.

    The triangle integral is half the integral of ``xi(|t - s|)`` over the
    square. The square is integrated with a tensor Gauss-Legendre rule, which
    keeps the discrete quadratic form positive semi-definite whenever ``xi``
    (extended by zero past ``T``) is a positive definite function.

    Args:
        xi: The function ``xi``.
        phi: Samples of ``phi`` at equally spaced nodes on ``[0, T]``
            (including both ends); ``phi`` is taken piecewise linear.
        n_intervals: The number of quadrature intervals, at least 16.
        n_points: Gauss points per interval.

    Returns:
        The value of the double integral.
    """
    if n_intervals < 16:
        raise ValueError("At least 16 intervals are needed; got {}".format(n_intervals))

    phi = np.asarray(phi, dtype=float)
    if np.all(phi == 0):
        return 0.0

    horizon = xi.horizon
    ref_points, ref_weights = np.polynomial.legendre.leggauss(n_points)
    edges = np.linspace(0, horizon, n_intervals + 1)
    half = np.diff(edges)[:, None] / 2
    points = (edges[:-1, None] + half * (ref_points + 1)).ravel()
    weights = (half * ref_weights).ravel()

    sample_nodes = np.linspace(0, horizon, len(phi))
    phi_q = np.interp(points, sample_nodes, phi)

    lags = np.abs(points[:, None] - points[None, :])
    gram = xi.evaluate(np.minimum(lags, horizon))
    v = weights * phi_q
    return 0.5 * float(v @ gram @ v)


def random_piecewise_linear(
    rng: np.random.Generator, n_nodes: int = 17, amplitude: float = 1.0
) -> np.ndarray:
    """
    Draw samples of a random piecewise-linear function.

    Args:
        rng: The random generator.
        n_nodes: The number of equally spaced nodes.
        amplitude: Samples are drawn uniformly from ``[-amplitude, amplitude]``.

    Returns:
        The samples.
    """
    return rng.uniform(-amplitude, amplitude, size=n_nodes)
