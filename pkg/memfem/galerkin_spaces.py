"""
This module implements the Galerkin spaces used to semidiscretise the problem
in space: continuous P1/P2 Lagrange finite elements on 1D and 2D meshes, and
the spectral space spanned by the first ``m`` Dirichlet eigenfunctions of the
Laplacian on an interval.

All integrals (mass, stiffness, loads, projections and error norms) go through
``GalerkinSpace.quadrature``, which returns basis values and gradients at
element-wise quadrature points. The spectral space exposes the same interface
with panels of the interval playing the role of elements.

User functions take an array of points ``x`` with the shape ``(n,)`` in 1D or
``(n, 2)`` in 2D and return values with the shape ``(n,)`` (scalar) or
``(n, 2)`` (vector). Gradients are returned as ``(n,)`` in 1D, ``(n, 2)`` for
scalar 2D functions and ``(n, 2, 2)`` for vector functions (component, then
derivative direction).
"""

import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from monty.json import MSONable
from scipy import sparse
from scipy.linalg import LinAlgError, cholesky

from memfem.linalg import SPDSolver
from memfem.mesh import DIRICHLET, NEUMANN, Mesh, Mesh1D, TriMesh2D

logger = logging.getLogger(__name__)

SpatialFunction = Callable[[np.ndarray], np.ndarray]

# Gauss points per panel and minimum panel count for spectral quadrature
_SPECTRAL_POINTS = 10
_SPECTRAL_MIN_PANELS = 16


def gauss_interval(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Get a Gauss-Legendre rule on ``[0, 1]`` exact for polynomials of a degree.

    Returns:
        The points with the shape ``(n, 1)`` and the weights.
    """
    n = max(1, int(ceil((degree + 1) / 2)))
    x, w = np.polynomial.legendre.leggauss(n)
    return (0.5 * (x + 1))[:, None], 0.5 * w


def gauss_triangle(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Get a collapsed Gauss-Legendre rule on the reference triangle.

    The unit square is mapped onto the triangle ``(0,0), (1,0), (0,1)`` by
    ``(u, v) -> (u, v (1 - u))``. The Jacobian ``1 - u`` raises the degree in
    ``u`` by one.

    Returns:
        The points with the shape ``(n, 2)`` and the weights.
    """
    n = max(1, int(ceil((degree + 2) / 2)))
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    points = np.stack((u.ravel(), (v * (1 - u)).ravel()), axis=1)
    weights = (wu * wv * (1 - u)).ravel()
    return points, weights


@dataclass(frozen=True)
class LagrangeElement(object):
    """
    Lagrange shape functions on the reference interval ``[0, 1]`` or the
    reference triangle ``(0,0), (1,0), (0,1)``.

    Local node order is vertices first, then edge midpoints: ``(0, 1, mid)`` on
    the interval and ``(0, 1, 2, m01, m12, m20)`` on the triangle.

    Args:
        dim: The reference dimension, 1 or 2.
        degree: The polynomial degree, 1 or 2.
    """

    dim: int
    degree: int

    def __post_init__(self):
        if self.dim not in (1, 2) or self.degree not in (1, 2):
            raise ValueError(
                "Unsupported element: dim={}, degree={}".format(self.dim, self.degree)
            )

    @property
    def n_local(self) -> int:
        return {(1, 1): 2, (1, 2): 3, (2, 1): 3, (2, 2): 6}[(self.dim, self.degree)]

    def shape(self, points: np.ndarray) -> np.ndarray:
        """Get the shape functions at reference points, ``(n_points, n_local)``."""
        if self.dim == 1:
            x = points[:, 0]
            if self.degree == 1:
                return np.stack((1 - x, x), axis=1)
            return np.stack(((1 - x) * (1 - 2 * x), x * (2 * x - 1), 4 * x * (1 - x)), axis=1)

        bary = _barycentric(points)
        if self.degree == 1:
            return bary
        l0, l1, l2 = bary.T
        return np.stack(
            (
                l0 * (2 * l0 - 1),
                l1 * (2 * l1 - 1),
                l2 * (2 * l2 - 1),
                4 * l0 * l1,
                4 * l1 * l2,
                4 * l2 * l0,
            ),
            axis=1,
        )

    def grad(self, points: np.ndarray) -> np.ndarray:
        """Get the reference gradients, ``(n_points, n_local, dim)``."""
        if self.dim == 1:
            x = points[:, 0]
            if self.degree == 1:
                return np.stack((-np.ones_like(x), np.ones_like(x)), axis=1)[..., None]
            return np.stack((4 * x - 3, 4 * x - 1, 4 - 8 * x), axis=1)[..., None]

        dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        if self.degree == 1:
            return np.broadcast_to(dl, (len(points), 3, 2)).copy()

        bary = _barycentric(points)
        grads = np.empty((len(points), 6, 2))
        for i in range(3):
            grads[:, i] = (4 * bary[:, i] - 1)[:, None] * dl[i]
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            grads[:, 3 + k] = 4 * (bary[:, j, None] * dl[i] + bary[:, i, None] * dl[j])
        return grads

    def reference_rule(self, degree: int) -> Tuple[np.ndarray, np.ndarray]:
        return gauss_interval(degree) if self.dim == 1 else gauss_triangle(degree)


def _barycentric(points: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    return np.stack((1 - x - y, x, y), axis=1)


@dataclass
class QuadratureData(object):
    """
    Basis data at element-wise quadrature points.

    Args:
        points: Physical points, ``(n_elements, n_points, dim)``.
        weights: Weights including the Jacobian, ``(n_elements, n_points)``.
        values: Basis values, ``(n_elements, n_points, n_local)``.
        grads: Physical basis gradients, ``(n_elements, n_points, n_local, dim)``.
        local_nodes: Node indices of each element, ``(n_elements, n_local)``.
    """

    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    local_nodes: np.ndarray

    @property
    def flat_points(self) -> np.ndarray:
        """The points in the shape passed to user functions."""
        pts = self.points.reshape(-1, self.points.shape[-1])
        return pts[:, 0] if pts.shape[1] == 1 else pts


@dataclass(frozen=True)
class EllipticForm(MSONable):
    """Base class for the symmetric coercive bilinear form ``a(u, v)``."""

    n_components = 1

    def flux(self, grad: np.ndarray) -> np.ndarray:
        """
        Get the flux paired with test gradients, so that
        ``a(u, v) = int flux(grad u) : grad v``.

        Args:
            grad: Gradients with the shape ``(..., n_components, dim)``.

        Returns:
            The flux with the same shape.
        """
        raise NotImplementedError


@dataclass(frozen=True)
class ScalarLaplace(EllipticForm):
    """
    The form ``a(u, v) = coefficient * int grad u . grad v``.

    Args:
        coefficient: The diffusion coefficient.
    """

    coefficient: float = 1.0

    def __post_init__(self):
        if self.coefficient <= 0:
            raise ValueError("coefficient must be positive; got {}".format(self.coefficient))

    def flux(self, grad: np.ndarray) -> np.ndarray:
        return self.coefficient * grad


@dataclass(frozen=True)
class Elasticity2D(EllipticForm):
    """
    The linear elasticity form
    ``a(u, v) = int 2 mu eps(u) : eps(v) + lambda div u div v``.

    Args:
        lame_lambda: The first Lamé constant.
        lame_mu: The shear modulus.
    """

    lame_lambda: float = 1.0
    lame_mu: float = 1.0

    n_components = 2

    def __post_init__(self):
        if self.lame_lambda < 0 or self.lame_mu < 0:
            raise ValueError("Lamé constants must be nonnegative")
        if self.lame_lambda + self.lame_mu <= 0:
            raise ValueError("lambda + mu must be positive")

    def flux(self, grad: np.ndarray) -> np.ndarray:
        strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
        trace = np.trace(grad, axis1=-2, axis2=-1)
        return 2 * self.lame_mu * strain + self.lame_lambda * trace[..., None, None] * np.eye(2)


@dataclass
class GalerkinSpace(object):
    """
    A finite-dimensional subspace ``V_h`` of the energy space.

    Use ``build_space`` to construct one.

    Args:
        kind: ``"fem"`` or ``"spectral"``.
        domain: The mesh (FEM) or the interval ``(a, b)`` (spectral).
        degree: The polynomial degree of FEM spaces.
        m: The number of modes of spectral spaces.
        n_components: 1 for scalar problems, 2 for 2D elasticity.
    """

    kind: str
    domain: Union[Mesh, Tuple[float, float]]
    degree: int = 1
    m: int = 0
    n_components: int = 1
    node_coordinates: np.ndarray = field(init=False, repr=False)
    element_nodes: np.ndarray = field(init=False, repr=False)
    dirichlet_nodes: np.ndarray = field(init=False, repr=False)
    free_dofs: np.ndarray = field(init=False, repr=False)
    _cache: Dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.kind == "fem":
            self._setup_fem()
        elif self.kind == "spectral":
            self._setup_spectral()
        else:
            raise ValueError("Unknown space kind {!r}".format(self.kind))

    def _setup_fem(self):
        mesh = self.domain
        if not isinstance(mesh, (Mesh1D, TriMesh2D)):
            raise ValueError("FEM spaces need a Mesh1D or TriMesh2D")
        if self.degree not in (1, 2):
            raise ValueError("Element degree must be 1 or 2; got {}".format(self.degree))
        if self.n_components == 2 and mesh.dimension != 2:
            raise ValueError("Vector spaces are only supported on 2D meshes")

        self.element = LagrangeElement(mesh.dimension, self.degree)
        n_vertices = len(mesh.coordinates)
        dirichlet = set(mesh.boundary_vertices(DIRICHLET))

        if self.degree == 1:
            coords = mesh.coordinates
            element_nodes = mesh.elements
        elif mesh.dimension == 1:
            mids = 0.5 * (mesh.vertices[1:] + mesh.vertices[:-1])
            coords = np.concatenate((mesh.vertices, mids))[:, None]
            element_nodes = np.column_stack(
                (mesh.elements, n_vertices + np.arange(mesh.n_elements))
            )
        else:
            edges = mesh.edges
            mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            coords = np.concatenate((mesh.vertices, mids))
            element_nodes = np.column_stack(
                (mesh.triangles, n_vertices + mesh.element_edges())
            )
            lookup = {tuple(e): n_vertices + i for i, e in enumerate(edges)}
            for i, j in mesh.marked_edges(DIRICHLET):
                dirichlet.add(lookup[tuple(sorted((i, j)))])

        self.node_coordinates = coords
        self.element_nodes = np.asarray(element_nodes, dtype=int)
        self.dirichlet_nodes = np.array(sorted(dirichlet), dtype=int)

        is_free = np.ones(len(coords), dtype=bool)
        is_free[self.dirichlet_nodes] = False
        nc = self.n_components
        dof_free = np.repeat(is_free, nc)
        self.free_dofs = np.flatnonzero(dof_free)

    def _setup_spectral(self):
        a, b = self.domain
        if not b > a:
            raise ValueError("Spectral interval must satisfy a < b")
        if self.m < 1:
            raise ValueError("Spectral spaces need m >= 1; got {}".format(self.m))
        if self.n_components != 1:
            raise ValueError("Spectral spaces are scalar")
        self.domain = (float(a), float(b))
        self.node_coordinates = np.empty((0, 1))
        self.element_nodes = np.empty((0, self.m), dtype=int)
        self.dirichlet_nodes = np.empty(0, dtype=int)
        self.free_dofs = np.arange(self.m)

    @property
    def is_spectral(self) -> bool:
        return self.kind == "spectral"

    @property
    def dim(self) -> int:
        return 1 if self.is_spectral else self.domain.dimension

    @property
    def dimension(self) -> int:
        """The number of basis functions (free degrees of freedom)."""
        return len(self.free_dofs)

    @property
    def n_full_dofs(self) -> int:
        if self.is_spectral:
            return self.m
        return len(self.node_coordinates) * self.n_components

    @property
    def h(self) -> float:
        """The mesh size; for spectral spaces the shortest half wavelength."""
        if self.is_spectral:
            a, b = self.domain
            return (b - a) / self.m
        return self.domain.h

    @property
    def l(self) -> int:
        """The order ``l`` of the space, one more than the polynomial degree."""
        return self.degree + 1

    @property
    def eigenvalues(self) -> np.ndarray:
        """The Laplacian eigenvalues ``(j pi / L)**2`` of the spectral basis."""
        self._require_spectral("eigenvalues")
        a, b = self.domain
        return (np.arange(1, self.m + 1) * np.pi / (b - a)) ** 2

    def _require_spectral(self, what: str):
        if not self.is_spectral:
            raise ValueError("{} needs a spectral space".format(what))

    def _spectral_basis(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.domain
        length = b - a
        freq = np.arange(1, self.m + 1) * np.pi / length
        phase = np.multiply.outer(x - a, freq)
        norm = np.sqrt(2 / length)
        return norm * np.sin(phase), norm * freq * np.cos(phase)

    def quadrature(self, degree: Optional[int] = None) -> QuadratureData:
        """
        Get basis data at quadrature points.

        Args:
            degree: The polynomial degree the element rule must integrate
                exactly. Defaults to ``2 * degree + 4``. Ignored by spectral
                spaces, which use a fixed composite Gauss-Legendre rule.

        Returns:
            The quadrature data.
        """
        if degree is None:
            degree = 2 * self.degree + 4
        key = ("quadrature", degree)
        if key not in self._cache:
            if self.is_spectral:
                self._cache[key] = self._spectral_quadrature()
            else:
                self._cache[key] = self._fem_quadrature(degree)
        return self._cache[key]

    def _fem_quadrature(self, degree: int) -> QuadratureData:
        mesh = self.domain
        ref_points, ref_weights = self.element.reference_rule(degree)
        ref_values = self.element.shape(ref_points)
        ref_grads = self.element.grad(ref_points)

        corners = mesh.coordinates[mesh.elements]  # (ne, dim + 1, dim)
        origin = corners[:, 0]
        jac = np.stack([corners[:, k + 1] - origin for k in range(mesh.dimension)], axis=2)
        det = np.abs(np.linalg.det(jac))
        inv = np.linalg.inv(jac)

        points = origin[:, None, :] + np.einsum("eij,qj->eqi", jac, ref_points)
        weights = det[:, None] * ref_weights[None, :]
        n_elements = len(corners)
        values = np.broadcast_to(ref_values, (n_elements,) + ref_values.shape)
        grads = np.einsum("qak,eki->eqai", ref_grads, inv)
        return QuadratureData(points, weights, values, grads, self.element_nodes)

    def _spectral_quadrature(self) -> QuadratureData:
        a, b = self.domain
        n_panels = max(_SPECTRAL_MIN_PANELS, 2 * self.m)
        x, w = np.polynomial.legendre.leggauss(_SPECTRAL_POINTS)
        edges = np.linspace(a, b, n_panels + 1)
        half = np.diff(edges)[:, None] / 2
        points = edges[:-1, None] + half * (x + 1)
        weights = half * w
        values, derivs = self._spectral_basis(points)
        local = np.broadcast_to(np.arange(self.m), (n_panels, self.m))
        return QuadratureData(points[..., None], weights, values, derivs[..., None], local)

    def expand(self, coefficients: np.ndarray) -> np.ndarray:
        """Get the full dof vector, with zeros at Dirichlet dofs."""
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape[-1] != self.dimension:
            raise ValueError(
                "Expected {} coefficients; got {}".format(
                    self.dimension, coefficients.shape[-1]
                )
            )
        full = np.zeros(coefficients.shape[:-1] + (self.n_full_dofs,))
        full[..., self.free_dofs] = coefficients
        return full

    def local_coefficients(self, coefficients: np.ndarray, q: QuadratureData) -> np.ndarray:
        """Gather coefficients per element, ``(n_elements, n_local, n_components)``."""
        full = self.expand(coefficients).reshape(-1, self.n_components)
        return full[q.local_nodes]

    def evaluate_at_quadrature(
        self, coefficients: np.ndarray, q: QuadratureData
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Evaluate a discrete function at quadrature points.

        Returns:
            The values ``(n_elements, n_points, n_components)`` and gradients
            ``(n_elements, n_points, n_components, dim)``.
        """
        local = self.local_coefficients(coefficients, q)
        values = np.einsum("eqa,eac->eqc", q.values, local)
        grads = np.einsum("eqaj,eac->eqcj", q.grads, local)
        return values, grads

    def interpolate(self, v: SpatialFunction) -> np.ndarray:
        """
        Get the nodal interpolant of ``v`` (FEM spaces only).

        Args:
            v: The function to interpolate.

        Returns:
            The coefficients of the interpolant.
        """
        if self.is_spectral:
            raise ValueError("Nodal interpolation needs a FEM space")
        coords = self.node_coordinates
        values = np.asarray(v(coords[:, 0] if self.dim == 1 else coords), dtype=float)
        return values.reshape(-1)[self.free_dofs]

    def evaluate(self, coefficients: np.ndarray, x: np.ndarray) -> np.ndarray:
        """
        Evaluate a discrete function at arbitrary points of the domain.

        Args:
            coefficients: The coefficients in the free-dof basis.
            x: The points, ``(n,)`` in 1D or ``(n, 2)`` in 2D.

        Returns:
            The values, ``(n,)`` for scalar spaces or ``(n, 2)`` otherwise.
        """
        x = np.asarray(x, dtype=float)
        if self.is_spectral:
            values, _ = self._spectral_basis(x)
            return values @ np.asarray(coefficients, dtype=float)

        mesh = self.domain
        if mesh.dimension == 1:
            element = np.clip(
                np.searchsorted(mesh.vertices, x, side="right") - 1, 0, mesh.n_elements - 1
            )
            left = mesh.vertices[element]
            width = mesh.vertices[element + 1] - left
            ref = ((x - left) / width)[:, None]
        else:
            element, ref = _locate_points(mesh, x.reshape(-1, 2))

        shape = self.element.shape(ref)
        full = self.expand(coefficients).reshape(-1, self.n_components)
        local = full[self.element_nodes[element]]  # (n, n_local, n_components)
        values = np.einsum("na,nac->nc", shape, local)
        return values[:, 0] if self.n_components == 1 else values

    def basis_function(self, k: int) -> SpatialFunction:
        """Get the ``k``-th basis function as a callable."""
        unit = np.zeros(self.dimension)
        unit[k] = 1.0
        return lambda x: self.evaluate(unit, x)

    def boundary_quadrature(self, degree: Optional[int] = None) -> Optional[QuadratureData]:
        """
        Get basis data on the Neumann boundary, or ``None`` if there is none.

        In 1D the Neumann boundary is a set of end points with unit weight.
        """
        if self.is_spectral:
            return None
        mesh = self.domain
        if degree is None:
            degree = 2 * self.degree + 4

        if mesh.dimension == 1:
            nodes = mesh.boundary_vertices(NEUMANN)
            if not nodes:
                return None
            local = np.array(nodes, dtype=int)[:, None]
            points = self.node_coordinates[local]
            ones = np.ones((len(nodes), 1))
            return QuadratureData(
                points, ones, ones[..., None], np.zeros((len(nodes), 1, 1, 1)), local
            )

        edges = mesh.marked_edges(NEUMANN)
        if len(edges) == 0:
            return None
        edge_element = LagrangeElement(1, self.degree)
        ref_points, ref_weights = gauss_interval(degree)
        start = mesh.vertices[edges[:, 0]]
        end = mesh.vertices[edges[:, 1]]
        lengths = np.linalg.norm(end - start, axis=1)
        points = start[:, None, :] + ref_points[None, :, :] * (end - start)[:, None, :]
        weights = lengths[:, None] * ref_weights[None, :]
        values = np.broadcast_to(
            edge_element.shape(ref_points), (len(edges), len(ref_weights), edge_element.n_local)
        )
        local = edges
        if self.degree == 2:
            n_vertices = len(mesh.vertices)
            lookup = {tuple(e): n_vertices + i for i, e in enumerate(mesh.edges)}
            mids = [lookup[tuple(sorted((i, j)))] for i, j in edges]
            local = np.column_stack((edges, mids))
        grads = np.zeros(values.shape + (2,))
        return QuadratureData(points, weights, values, grads, np.asarray(local, dtype=int))


def _locate_points(mesh: TriMesh2D, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Find a containing triangle and the reference coordinates of each point."""
    corners = mesh.vertices[mesh.triangles]
    origin = corners[:, 0]
    jac = np.stack((corners[:, 1] - origin, corners[:, 2] - origin), axis=2)
    inv = np.linalg.inv(jac)

    elements = np.empty(len(x), dtype=int)
    refs = np.empty((len(x), 2))
    for i, point in enumerate(x):
        ref = np.einsum("eij,ej->ei", inv, point - origin)
        inside = (ref[:, 0] >= -1e-12) & (ref[:, 1] >= -1e-12) & (ref.sum(axis=1) <= 1 + 1e-12)
        if not np.any(inside):
            raise ValueError("Point {} lies outside the mesh".format(point))
        e = int(np.argmax(inside))
        elements[i] = e
        refs[i] = ref[e]
    return elements, refs


def build_space(
    domain: Union[Mesh, Tuple[float, float]],
    kind: str = "fem",
    degree: int = 1,
    m: int = 0,
    n_components: int = 1,
) -> GalerkinSpace:
    """
    Build a Galerkin space.

    Args:
        domain: A ``Mesh1D`` or ``TriMesh2D`` for FEM spaces, or an interval
            ``(a, b)`` for spectral spaces (homogeneous Dirichlet at both ends).
        kind: ``"fem"`` or ``"spectral"``.
        degree: The FEM polynomial degree, 1 or 2.
        m: The number of spectral modes.
        n_components: 2 for vector-valued (elasticity) spaces.

    Returns:
        The space. Free dofs are numbered by node index, then component.
    """
    return GalerkinSpace(kind, domain, degree=degree, m=m, n_components=n_components)


@dataclass
class AssembledPair(object):
    """
    The mass matrix ``M = ((phi_j, phi_k))`` and stiffness matrix
    ``S = (a(phi_j, phi_k))`` restricted to the free dofs.

    Args:
        mass: The mass matrix.
        stiffness: The stiffness matrix.
    """

    mass: sparse.csr_matrix
    stiffness: sparse.csr_matrix

    @property
    def dimension(self) -> int:
        return self.mass.shape[0]

    def is_symmetric(self, rtol: float = 1e-14) -> bool:
        """Check both matrices are symmetric to a relative tolerance."""
        for matrix in (self.mass, self.stiffness):
            scale = abs(matrix).max() if matrix.nnz else 1.0
            asym = abs(matrix - matrix.T)
            if asym.nnz and asym.max() > rtol * scale:
                return False
        return True

    def is_spd(self) -> bool:
        """Check symmetry and that both Cholesky factorisations succeed."""
        if not self.is_symmetric():
            return False
        try:
            for matrix in (self.mass, self.stiffness):
                cholesky(matrix.toarray())
        except LinAlgError:
            return False
        return True

    def export_coordinates(self, filename: Union[str, Path], which: str = "mass"):
        """
        Write a matrix as ``row col value`` lines.

        Args:
            filename: The output file.
            which: ``"mass"`` or ``"stiffness"``.
        """
        matrix = {"mass": self.mass, "stiffness": self.stiffness}[which].tocoo()
        data = np.column_stack((matrix.row, matrix.col, matrix.data))
        np.savetxt(filename, data, fmt=["%d", "%d", "%.17g"], header="row col value")


def _check_form(space: GalerkinSpace, form: EllipticForm):
    if form.n_components != space.n_components:
        raise ValueError(
            "Dimension mismatch: {} needs {} components, space has {}".format(
                type(form).__name__, form.n_components, space.n_components
            )
        )
    if isinstance(form, Elasticity2D) and space.dim != 2:
        raise ValueError("Dimension mismatch: Elasticity2D needs a 2D space")
    if space.is_spectral and not isinstance(form, ScalarLaplace):
        raise ValueError("Spectral spaces only support ScalarLaplace")


def _element_dofs(space: GalerkinSpace, local_nodes: np.ndarray) -> np.ndarray:
    nc = space.n_components
    dofs = local_nodes[..., None] * nc + np.arange(nc)
    return dofs.reshape(len(local_nodes), -1)


def _scatter_matrix(space: GalerkinSpace, local_nodes: np.ndarray, blocks: np.ndarray):
    """Sum element matrices into a global matrix restricted to the free dofs."""
    dofs = _element_dofs(space, local_nodes)
    n_local = dofs.shape[1]
    blocks = blocks.reshape(len(dofs), n_local, n_local)
    rows = np.repeat(dofs, n_local, axis=1).ravel()
    cols = np.tile(dofs, (1, n_local)).ravel()
    n = space.n_full_dofs
    full = sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    free = space.free_dofs
    return full[free][:, free].tocsr()


def _scatter_vector(space: GalerkinSpace, local_nodes: np.ndarray, local: np.ndarray):
    """Sum element vectors ``(n_elements, n_local, n_components)`` into free dofs."""
    dofs = _element_dofs(space, local_nodes)
    full = np.bincount(
        dofs.ravel(), weights=local.reshape(len(dofs), -1).ravel(), minlength=space.n_full_dofs
    )
    return full[space.free_dofs]


def _mass_blocks(space: GalerkinSpace, q: QuadratureData) -> np.ndarray:
    scalar = np.einsum("eq,eqa,eqb->eab", q.weights, q.values, q.values)
    eye = np.eye(space.n_components)
    return np.einsum("eab,cd->eacbd", scalar, eye)


def assemble_mass(space: GalerkinSpace) -> sparse.csr_matrix:
    """Assemble the mass matrix on the free dofs."""
    if "mass" not in space._cache:
        if space.is_spectral:
            space._cache["mass"] = sparse.identity(space.m, format="csr")
        else:
            q = space.quadrature(2 * space.degree)
            space._cache["mass"] = _scatter_matrix(
                space, q.local_nodes, _mass_blocks(space, q)
            )
    return space._cache["mass"]


def assemble_stiffness(space: GalerkinSpace, form: EllipticForm) -> sparse.csr_matrix:
    """Assemble the stiffness matrix of a form on the free dofs."""
    _check_form(space, form)
    key = ("stiffness", form)
    if key not in space._cache:
        if space.is_spectral:
            matrix = sparse.diags(form.coefficient * space.eigenvalues, format="csr")
        else:
            q = space.quadrature(max(2 * (space.degree - 1), 0))
            nc = space.n_components
            trial = np.einsum("eqbj,dc->eqbdcj", q.grads, np.eye(nc))
            flux = form.flux(trial)
            blocks = np.einsum("eq,eqbdcj,eqaj->eacbd", q.weights, flux, q.grads)
            matrix = _scatter_matrix(space, q.local_nodes, blocks)
        space._cache[key] = matrix
    return space._cache[key]


def assemble(space: GalerkinSpace, form: EllipticForm) -> AssembledPair:
    """
    Assemble the mass and stiffness matrices.

    FEM matrices use Gauss rules exact for the polynomial integrands; the
    spectral space returns ``M = I`` and ``S = diag(lambda_1, ..., lambda_m)``.

    Args:
        space: The Galerkin space.
        form: The elliptic form.

    Returns:
        The assembled pair on the free dofs.
    """
    _check_form(space, form)
    return AssembledPair(assemble_mass(space), assemble_stiffness(space, form))


def assemble_boundary_mass(space: GalerkinSpace) -> sparse.csr_matrix:
    """
    Assemble ``((phi_j, phi_k)_{Neumann boundary})`` on the free dofs; zero when
    there is no Neumann boundary.
    """
    n = space.dimension
    q = space.boundary_quadrature(2 * space.degree)
    if q is None:
        return sparse.csr_matrix((n, n))
    return _scatter_matrix(space, q.local_nodes, _mass_blocks(space, q))


def _as_components(values: np.ndarray, q: QuadratureData, n_components: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values.reshape(q.weights.shape + (n_components,))


def inner_products(
    space: GalerkinSpace, v: SpatialFunction, degree: Optional[int] = None
) -> np.ndarray:
    """
    Get the vector ``((v, phi_k))_k`` by quadrature.

    Args:
        space: The Galerkin space.
        v: The function.
        degree: The element rule degree; defaults to ``2 * degree + 4``.

    Returns:
        The inner products with the free basis functions.
    """
    q = space.quadrature(degree)
    values = _as_components(v(q.flat_points), q, space.n_components)
    local = np.einsum("eq,eqc,eqa->eac", q.weights, values, q.values)
    if space.is_spectral:
        return local.sum(axis=0)[:, 0]
    return _scatter_vector(space, q.local_nodes, local)


def _finite_difference_gradient(v: SpatialFunction, dim: int, n_components: int):
    """Central-difference gradient of ``v`` in the layout documented above."""

    def grad(x):
        x = np.asarray(x, dtype=float)
        step = 1e-6 * max(1.0, float(np.max(np.abs(x))))
        if dim == 1:
            return (np.asarray(v(x + step)) - np.asarray(v(x - step))) / (2 * step)
        parts = []
        for j in range(dim):
            shift = np.zeros(dim)
            shift[j] = step
            diff = (np.asarray(v(x + shift)) - np.asarray(v(x - shift))) / (2 * step)
            parts.append(diff)
        return np.stack(parts, axis=-1)

    return grad


def energy_products(
    space: GalerkinSpace,
    v: SpatialFunction,
    form: EllipticForm,
    grad_v: Optional[SpatialFunction] = None,
    degree: Optional[int] = None,
) -> np.ndarray:
    """
    Get the vector ``(a(v, phi_k))_k`` by quadrature.

    Args:
        space: The Galerkin space.
        v: The function.
        form: The elliptic form.
        grad_v: The gradient of ``v``. If omitted, a central-difference
            gradient is used.
        degree: The element rule degree.

    Returns:
        The energy products with the free basis functions.
    """
    _check_form(space, form)
    if grad_v is None:
        grad_v = _finite_difference_gradient(v, space.dim, space.n_components)

    q = space.quadrature(degree)
    grads = np.asarray(grad_v(q.flat_points), dtype=float)
    grads = grads.reshape(q.weights.shape + (space.n_components, space.dim))
    flux = form.flux(grads)
    local = np.einsum("eq,eqcj,eqaj->eac", q.weights, flux, q.grads)
    if space.is_spectral:
        return local.sum(axis=0)[:, 0]
    return _scatter_vector(space, q.local_nodes, local)


def assemble_load(
    space: GalerkinSpace,
    f: Optional[SpatialFunction],
    g: Optional[SpatialFunction] = None,
) -> np.ndarray:
    """
    Assemble ``F_k = (f, phi_k) + (g, phi_k)_{Neumann boundary}``.

    Args:
        space: The Galerkin space.
        f: The volume load at a fixed time, or ``None`` for ``f = 0``.
        g: The Neumann datum at a fixed time, or ``None``.

    Returns:
        The load vector.
    """
    load = np.zeros(space.dimension)
    if f is not None:
        load += inner_products(space, f)

    if g is not None:
        q = space.boundary_quadrature()
        if q is None:
            raise ValueError("A Neumann datum was given but the mesh has no Neumann boundary")
        values = _as_components(g(q.flat_points), q, space.n_components)
        local = np.einsum("eq,eqc,eqa->eac", q.weights, values, q.values)
        load += _scatter_vector(space, q.local_nodes, local)

    return load


def l2_project(space: GalerkinSpace, v: SpatialFunction) -> np.ndarray:
    """
    Get the coefficients of the L2 projection ``(P_h v, chi) = (v, chi)``.

    Args:
        space: The Galerkin space.
        v: The function.

    Returns:
        The solution of ``M c = ((v, phi_k))``.
    """
    b = inner_products(space, v)
    if space.is_spectral:
        return b
    return SPDSolver(assemble_mass(space)).solve(b)


def ritz_project(
    space: GalerkinSpace,
    v: SpatialFunction,
    form: EllipticForm,
    grad_v: Optional[SpatialFunction] = None,
) -> np.ndarray:
    """
    Get the coefficients of the Ritz projection ``a(R_h v, chi) = a(v, chi)``.

    Args:
        space: The Galerkin space.
        v: The function.
        form: The elliptic form.
        grad_v: The gradient of ``v``. Spectral spaces without a gradient use
            ``a(v, phi_j) = lambda_j (v, phi_j)``, valid for ``v`` vanishing at
            the ends of the interval.

    Returns:
        The solution of ``S c = (a(v, phi_k))``.
    """
    stiffness = assemble_stiffness(space, form)
    if space.is_spectral:
        if grad_v is None:
            b = stiffness.diagonal() * inner_products(space, v)
        else:
            b = energy_products(space, v, form, grad_v)
        return b / stiffness.diagonal()
    b = energy_products(space, v, form, grad_v)
    return SPDSolver(stiffness).solve(b)


def fourier_project(space: GalerkinSpace, v: SpatialFunction) -> np.ndarray:
    """
    Get the truncated Fourier coefficients ``c_j = (v, phi_j)``.

    Args:
        space: A spectral space.
        v: The function.

    Returns:
        The coefficients.
    """
    if not space.is_spectral:
        raise ValueError("The Fourier projection needs a spectral space")
    return inner_products(space, v)


def l2_norm(space: GalerkinSpace, v: SpatialFunction, degree: Optional[int] = None) -> float:
    """Get ``||v||`` by quadrature on the space's elements."""
    q = space.quadrature(degree)
    values = _as_components(v(q.flat_points), q, space.n_components)
    return float(np.sqrt(np.einsum("eq,eqc,eqc->", q.weights, values, values)))
