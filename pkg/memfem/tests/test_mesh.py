import tempfile
import unittest
from pathlib import Path

import numpy as np

from memfem.mesh import (
    DIRICHLET,
    NEUMANN,
    Mesh1D,
    TriMesh2D,
    parse_mesh,
    read_mesh,
    write_mesh,
)


class Mesh1DTest(unittest.TestCase):
    def test_uniform(self):
        mesh = Mesh1D.uniform(4)
        self.assertEqual(mesh.n_elements, 4)
        self.assertAlmostEqual(mesh.h, 0.25)
        np.testing.assert_array_equal(mesh.elements[1], [1, 2])
        self.assertEqual(mesh.coordinates.shape, (5, 1))
        self.assertEqual(mesh.boundary_vertices(DIRICHLET), [0, 4])
        self.assertEqual(mesh.boundary_vertices(NEUMANN), [])

    def test_refine(self):
        mesh = Mesh1D.uniform(4, boundary_markers=(DIRICHLET, NEUMANN)).refine()
        self.assertEqual(mesh.n_elements, 8)
        self.assertAlmostEqual(mesh.h, 0.125)
        self.assertEqual(mesh.boundary_vertices(NEUMANN), [8])

    def test_invalid(self):
        self.assertRaises(ValueError, Mesh1D, [0.0, 0.5])
        self.assertRaises(ValueError, Mesh1D, [0.0, 0.6, 0.5, 1.0])
        self.assertRaises(ValueError, Mesh1D, [0.0, 0.5, 1.0], ("dirichlet", "robin"))


class TriMesh2DTest(unittest.TestCase):
    def test_unit_square(self):
        mesh = TriMesh2D.unit_square(2)
        self.assertEqual(mesh.n_elements, 8)
        self.assertEqual(len(mesh.vertices), 9)
        self.assertEqual(len(mesh.boundary_edges), 8)
        self.assertEqual(len(mesh.edges), 16)
        self.assertTrue(all(m == DIRICHLET for m in mesh.boundary_markers))
        self.assertAlmostEqual(mesh.h, np.sqrt(2) / 2)
        self.assertAlmostEqual(mesh.areas.sum(), 1.0)
        self.assertTrue(np.all(mesh.areas > 0))

    def test_neumann_sides(self):
        mesh = TriMesh2D.unit_square(2, neumann_sides=("right",))
        neumann = mesh.marked_edges(NEUMANN)
        self.assertEqual(len(neumann), 2)
        np.testing.assert_allclose(mesh.vertices[neumann.ravel(), 0], 1.0)
        self.assertEqual(len(mesh.boundary_vertices(NEUMANN)), 3)
        self.assertRaises(ValueError, TriMesh2D.unit_square, 2, ("front",))

    def test_element_edges(self):
        mesh = TriMesh2D.unit_square(2)
        element_edges = mesh.element_edges()
        self.assertEqual(element_edges.shape, (8, 3))
        for tri, edges in zip(mesh.triangles, element_edges):
            np.testing.assert_array_equal(mesh.edges[edges[0]], sorted(tri[[0, 1]]))
            np.testing.assert_array_equal(mesh.edges[edges[1]], sorted(tri[[1, 2]]))
            np.testing.assert_array_equal(mesh.edges[edges[2]], sorted(tri[[2, 0]]))

    def test_refine(self):
        mesh = TriMesh2D.unit_square(2, neumann_sides=("top",)).refine()
        self.assertEqual(mesh.n_elements, 32)
        self.assertEqual(len(mesh.vertices), 25)
        self.assertEqual(len(mesh.boundary_edges), 16)
        self.assertEqual(len(mesh.marked_edges(NEUMANN)), 4)
        self.assertAlmostEqual(mesh.areas.sum(), 1.0)
        self.assertAlmostEqual(mesh.h, np.sqrt(2) / 4)

    def test_l_shape(self):
        mesh = TriMesh2D.l_shape(1)
        self.assertEqual(mesh.n_elements, 6)
        self.assertAlmostEqual(mesh.areas.sum(), 3.0)
        self.assertEqual(len(mesh.boundary_edges), 8)
        self.assertEqual(mesh.refine().n_elements, 24)

    def test_invalid(self):
        vertices = [[0, 0], [1, 0], [0, 1]]
        edges = [(0, 1), (1, 2), (2, 0)]

        # clockwise orientation
        self.assertRaises(ValueError, TriMesh2D, vertices, [[0, 2, 1]], edges, [DIRICHLET] * 3)

        # an open edge without a marker
        self.assertRaises(ValueError, TriMesh2D, vertices, [[0, 1, 2]], edges[:2], [DIRICHLET] * 2)

        # marker count mismatch
        self.assertRaises(ValueError, TriMesh2D, vertices, [[0, 1, 2]], edges, [DIRICHLET] * 2)

        # hanging node: the midpoint of the hypotenuse splits only one side
        vertices = [[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]]
        triangles = [[0, 1, 4], [0, 4, 2], [1, 3, 2]]
        boundary = [(0, 1), (1, 3), (3, 2), (2, 0)]
        self.assertRaises(ValueError, TriMesh2D, vertices, triangles, boundary, [DIRICHLET] * 4)


class MeshFileTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.tmp_dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_1d(self):
        mesh = Mesh1D.uniform(5, 0.0, 2.0, (NEUMANN, DIRICHLET))
        filename = self.tmp_dir / "interval.mesh"
        write_mesh(mesh, filename)

        loaded = read_mesh(filename)
        self.assertIsInstance(loaded, Mesh1D)
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        self.assertEqual(loaded.boundary_markers, mesh.boundary_markers)

    def test_2d(self):
        mesh = TriMesh2D.unit_square(3, neumann_sides=("left", "bottom"))
        filename = self.tmp_dir / "square.mesh"
        write_mesh(mesh, filename)

        loaded = read_mesh(filename)
        self.assertIsInstance(loaded, TriMesh2D)
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
        np.testing.assert_array_equal(loaded.boundary_edges, mesh.boundary_edges)
        self.assertEqual(loaded.boundary_markers, mesh.boundary_markers)

    def test_bad_text(self):
        self.assertRaises(ValueError, parse_mesh, "dimension 3\nvertices 0\n")
        self.assertRaises(ValueError, parse_mesh, "dimension 1\nfaces 2\n")


if __name__ == "__main__":
    unittest.main()
