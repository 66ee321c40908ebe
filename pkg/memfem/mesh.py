"""
Meshes for the finite element spaces.

``Mesh1D`` is a partition of an interval; ``TriMesh2D`` is a conforming
triangulation whose boundary edges carry a Dirichlet or Neumann marker. Both
can be written to and read from a plain-text format::

    # memfem mesh
    dimension 2
    vertices <n>
    <x> <y>
    ...
    elements <k>
    <i> <j> <l>
    ...
    boundary <e>
    <i> <j> <marker>
    ...

One-dimensional meshes use one coordinate per vertex line, two vertex indices
per element line and a single vertex index per boundary line.
"""

import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from monty.json import MSONable

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
_MARKERS = (DIRICHLET, NEUMANN)


@dataclass
class Mesh1D(MSONable):
    """
    A partition of an interval ``[a, b]``.

    Args:
        vertices: The strictly increasing vertex coordinates.
        boundary_markers: The markers of the left and right end points.
    """

    vertices: np.ndarray
    boundary_markers: Tuple[str, str] = (DIRICHLET, DIRICHLET)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.boundary_markers = tuple(self.boundary_markers)
        if self.vertices.ndim != 1 or len(self.vertices) < 3:
            raise ValueError("A 1D mesh needs at least two elements")
        if np.any(np.diff(self.vertices) <= 0):
            raise ValueError("Mesh vertices must be strictly increasing")
        if any(m not in _MARKERS for m in self.boundary_markers):
            raise ValueError("Unknown boundary marker in {}".format(self.boundary_markers))

    @classmethod
    def uniform(
        cls,
        n_elements: int,
        a: float = 0.0,
        b: float = 1.0,
        boundary_markers: Tuple[str, str] = (DIRICHLET, DIRICHLET),
    ) -> "Mesh1D":
        """
        Get a uniform mesh.

        Args:
            n_elements: The number of elements.
            a: The left end point.
            b: The right end point.
            boundary_markers: The markers of the end points.

        Returns:
            The mesh.
        """
        return cls(np.linspace(a, b, n_elements + 1), boundary_markers)

    dimension = 1

    @property
    def n_elements(self) -> int:
        return len(self.vertices) - 1

    @property
    def elements(self) -> np.ndarray:
        """The element vertex indices with the shape ``(n_elements, 2)``."""
        idx = np.arange(self.n_elements)
        return np.stack((idx, idx + 1), axis=1)

    @property
    def h(self) -> float:
        """The maximum element diameter."""
        return float(np.max(np.diff(self.vertices)))

    @property
    def coordinates(self) -> np.ndarray:
        return self.vertices[:, None]

    def boundary_vertices(self, marker: str) -> List[int]:
        """Get the end points carrying a marker."""
        ends = (0, len(self.vertices) - 1)
        return [v for v, m in zip(ends, self.boundary_markers) if m == marker]

    def refine(self) -> "Mesh1D":
        """Split every element in two."""
        mids = 0.5 * (self.vertices[1:] + self.vertices[:-1])
        vertices = np.empty(2 * len(self.vertices) - 1)
        vertices[::2] = self.vertices
        vertices[1::2] = mids
        return Mesh1D(vertices, self.boundary_markers)

    def to_text(self) -> str:
        lines = ["# memfem mesh", "dimension 1", "vertices {}".format(len(self.vertices))]
        lines += ["{:.17g}".format(x) for x in self.vertices]
        lines.append("elements {}".format(self.n_elements))
        lines += ["{} {}".format(i, j) for i, j in self.elements]
        lines.append("boundary 2")
        ends = (0, len(self.vertices) - 1)
        lines += ["{} {}".format(v, m) for v, m in zip(ends, self.boundary_markers)]
        return "\n".join(lines) + "\n"


@dataclass
class TriMesh2D(MSONable):
    """
    A conforming triangulation of a polygonal domain.

    Args:
        vertices: The vertex coordinates with the shape ``(n_vertices, 2)``.
        triangles: The counter-clockwise vertex indices of each triangle with the
            shape ``(n_triangles, 3)``.
        boundary_edges: The vertex indices of each boundary edge with the shape
            ``(n_edges, 2)``.
        boundary_markers: The marker of each boundary edge.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: List[str]
    _edges: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    dimension = 2

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=int).reshape(-1, 2)
        self.boundary_markers = list(self.boundary_markers)
        self._check()

    def _check(self):
        if len(self.boundary_markers) != len(self.boundary_edges):
            raise ValueError("Every boundary edge needs exactly one marker")
        if any(m not in _MARKERS for m in self.boundary_markers):
            raise ValueError("Unknown boundary marker")

        areas = self.areas
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise ValueError(
                "Triangle {} has non-positive area {}".format(bad, areas[bad])
            )

        counts = Counter(tuple(sorted(e)) for e in self._triangle_edges())
        if any(c > 2 for c in counts.values()):
            raise ValueError("Mesh is not conforming: an edge is shared by >2 triangles")

        open_edges = {e for e, c in counts.items() if c == 1}
        marked = [tuple(sorted(e)) for e in self.boundary_edges]
        if len(set(marked)) != len(marked):
            raise ValueError("A boundary edge is marked more than once")
        if set(marked) != open_edges:
            raise ValueError(
                "Boundary edges do not match the mesh boundary (hanging nodes or "
                "unmarked edges): {} marked, {} on the boundary".format(
                    len(marked), len(open_edges)
                )
            )

    def _triangle_edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate((t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]))

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def elements(self) -> np.ndarray:
        return self.triangles

    @property
    def coordinates(self) -> np.ndarray:
        return self.vertices

    @property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def h(self) -> float:
        """The maximum triangle diameter (longest edge)."""
        p = self.vertices[self._triangle_edges()]
        return float(np.max(np.linalg.norm(p[:, 1] - p[:, 0], axis=1)))

    @property
    def edges(self) -> np.ndarray:
        """
        The unique edges sorted lexicographically, with shape ``(n_edges, 2)``.
        """
        if self._edges is None:
            self._edges = np.unique(np.sort(self._triangle_edges(), axis=1), axis=0)
        return self._edges

    def element_edges(self) -> np.ndarray:
        """
        Get the global edge index of the local edges ``(0,1), (1,2), (2,0)`` of
        each triangle, with the shape ``(n_triangles, 3)``.
        """
        lookup = {tuple(e): i for i, e in enumerate(self.edges)}
        local = self._triangle_edges().reshape(3, -1, 2).transpose(1, 0, 2)
        return np.array(
            [[lookup[tuple(sorted(e))] for e in tri] for tri in local], dtype=int
        )

    def boundary_vertices(self, marker: str) -> List[int]:
        """Get the vertices lying on edges that carry a marker."""
        edges = self.marked_edges(marker)
        return sorted(set(edges.ravel().tolist()))

    def marked_edges(self, marker: str) -> np.ndarray:
        mask = np.array([m == marker for m in self.boundary_markers], dtype=bool)
        return self.boundary_edges[mask].reshape(-1, 2)

    @classmethod
    def unit_square(cls, n: int, neumann_sides: Sequence[str] = ()) -> "TriMesh2D":
        """
        Get a structured mesh of the unit square.

        Each of the ``n x n`` squares is split into two triangles along the
        diagonal from its lower-left to its upper-right corner.

        Args:
            n: The number of squares along each side.
            neumann_sides: Sides (``"left"``, ``"right"``, ``"bottom"``,
                ``"top"``) that carry a Neumann marker; the rest are Dirichlet.

        Returns:
            The mesh.
        """
        cells = list(itertools.product(range(n), range(n)))
        return _structured_mesh(n, cells, 0.0, 1.0 / n, neumann_sides)

    @classmethod
    def l_shape(cls, n: int) -> "TriMesh2D":
        """
        Get a structured mesh of ``(-1, 1)^2`` minus the upper-right quadrant.

        Args:
            n: The number of squares along half a side.

        Returns:
            The mesh, with Dirichlet markers on every boundary edge.
        """
        cells = [
            (i, j)
            for i, j in itertools.product(range(2 * n), range(2 * n))
            if not (i >= n and j >= n)
        ]
        return _structured_mesh(2 * n, cells, -1.0, 1.0 / n, ())

    def refine(self) -> "TriMesh2D":
        """
        Refine by quadrisection: every triangle is split into four by joining
        its edge midpoints. Boundary markers are inherited by both halves of a
        boundary edge.
        """
        n_vertices = len(self.vertices)
        edges = self.edges
        mids = 0.5 * (self.vertices[edges[:, 0]] + self.vertices[edges[:, 1]])
        vertices = np.concatenate((self.vertices, mids))

        lookup = {tuple(e): n_vertices + i for i, e in enumerate(edges)}
        t = self.triangles
        m01 = np.array([lookup[tuple(sorted(e))] for e in t[:, [0, 1]]])
        m12 = np.array([lookup[tuple(sorted(e))] for e in t[:, [1, 2]]])
        m20 = np.array([lookup[tuple(sorted(e))] for e in t[:, [2, 0]]])
        triangles = np.concatenate(
            (
                np.stack((t[:, 0], m01, m20), axis=1),
                np.stack((m01, t[:, 1], m12), axis=1),
                np.stack((m20, m12, t[:, 2]), axis=1),
                np.stack((m01, m12, m20), axis=1),
            )
        )

        boundary_edges = []
        markers = []
        for (i, j), marker in zip(self.boundary_edges, self.boundary_markers):
            mid = lookup[tuple(sorted((i, j)))]
            boundary_edges.extend([(i, mid), (mid, j)])
            markers.extend([marker, marker])

        return TriMesh2D(vertices, triangles, boundary_edges, markers)

    def to_text(self) -> str:
        lines = ["# memfem mesh", "dimension 2", "vertices {}".format(len(self.vertices))]
        lines += ["{:.17g} {:.17g}".format(x, y) for x, y in self.vertices]
        lines.append("elements {}".format(len(self.triangles)))
        lines += ["{} {} {}".format(*tri) for tri in self.triangles]
        lines.append("boundary {}".format(len(self.boundary_edges)))
        lines += [
            "{} {} {}".format(i, j, m)
            for (i, j), m in zip(self.boundary_edges, self.boundary_markers)
        ]
        return "\n".join(lines) + "\n"


Mesh = Union[Mesh1D, TriMesh2D]


def _structured_mesh(
    n: int,
    cells: List[Tuple[int, int]],
    origin: float,
    spacing: float,
    neumann_sides: Sequence[str],
) -> TriMesh2D:
    """Triangulate a set of grid cells, renumbering the used vertices."""
    unknown = set(neumann_sides) - {"left", "right", "bottom", "top"}
    if unknown:
        raise ValueError("Unknown sides: {}".format(sorted(unknown)))

    def grid_index(i, j):
        return j * (n + 1) + i

    raw_triangles = []
    for i, j in cells:
        v00, v10 = grid_index(i, j), grid_index(i + 1, j)
        v01, v11 = grid_index(i, j + 1), grid_index(i + 1, j + 1)
        raw_triangles.append((v00, v10, v11))
        raw_triangles.append((v00, v11, v01))

    used = np.unique(np.array(raw_triangles).ravel())
    renumber = {int(v): k for k, v in enumerate(used)}
    triangles = np.array([[renumber[v] for v in tri] for tri in raw_triangles])
    vertices = np.array(
        [
            (origin + (v % (n + 1)) * spacing, origin + (v // (n + 1)) * spacing)
            for v in used
        ]
    )

    counts = Counter(
        tuple(sorted(e))
        for tri in triangles
        for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))
    )
    boundary_edges = sorted(e for e, c in counts.items() if c == 1)

    lo, hi = origin, origin + n * spacing
    tol = 1e-12 * max(1.0, abs(hi))
    markers = []
    for i, j in boundary_edges:
        (x0, y0), (x1, y1) = vertices[i], vertices[j]
        side = None
        if abs(x0 - lo) < tol and abs(x1 - lo) < tol:
            side = "left"
        elif abs(x0 - hi) < tol and abs(x1 - hi) < tol:
            side = "right"
        elif abs(y0 - lo) < tol and abs(y1 - lo) < tol:
            side = "bottom"
        elif abs(y0 - hi) < tol and abs(y1 - hi) < tol:
            side = "top"
        markers.append(NEUMANN if side in neumann_sides else DIRICHLET)

    return TriMesh2D(vertices, triangles, boundary_edges, markers)


def write_mesh(mesh: Mesh, filename: Union[str, Path]):
    """Write a mesh in the plain-text format."""
    Path(filename).write_text(mesh.to_text())


def read_mesh(filename: Union[str, Path]) -> Mesh:
    """Read a mesh written by ``write_mesh``."""
    return parse_mesh(Path(filename).read_text())


def parse_mesh(text: str) -> Mesh:
    """
    Parse the plain-text mesh format.

    Args:
        text: The mesh text.

    Returns:
        A ``Mesh1D`` or ``TriMesh2D``.
    """
    lines = [
        line.strip()
        for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    ]
    sections: Dict[str, List[List[str]]] = {}
    dimension = None
    pos = 0
    while pos < len(lines):
        key, *rest = lines[pos].split()
        if key == "dimension":
            dimension = int(rest[0])
            pos += 1
            continue
        if key not in ("vertices", "elements", "boundary"):
            raise ValueError("Unexpected mesh section {!r}".format(key))
        count = int(rest[0])
        sections[key] = [line.split() for line in lines[pos + 1 : pos + 1 + count]]
        pos += 1 + count

    if dimension == 1:
        vertices = [float(v[0]) for v in sections["vertices"]]
        markers = {int(b[0]): b[1] for b in sections["boundary"]}
        ends = (0, len(vertices) - 1)
        return Mesh1D(np.array(vertices), tuple(markers[e] for e in ends))

    if dimension == 2:
        vertices = [[float(x) for x in v] for v in sections["vertices"]]
        triangles = [[int(i) for i in t] for t in sections["elements"]]
        boundary = sections.get("boundary", [])
        edges = [(int(b[0]), int(b[1])) for b in boundary]
        markers = [b[2] for b in boundary]
        return TriMesh2D(np.array(vertices), np.array(triangles), edges, markers)

    raise ValueError("Unsupported mesh dimension {}".format(dimension))
