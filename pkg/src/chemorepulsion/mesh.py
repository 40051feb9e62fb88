"""Conforming triangulations of 2D polygonal domains.

Vertices are stored as an ``(nv, 2)`` float array and triangles as an
``(nt, 3)`` integer array of counterclockwise vertex indices.  Edges are
derived once at construction; each edge knows its two adjacent triangles
(``-1`` marks the missing neighbour of a boundary edge).
"""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

# local edge j of a triangle joins these local vertices; the P2 edge dofs
# follow the same order
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class Mesh:
    """Immutable simplicial triangulation with derived edge topology.

    Parameters
    ----------
    vertices : array_like, shape (nv, 2)
    triangles : array_like, shape (nt, 3)
        Vertex indices, 0-based.  Clockwise triangles are reoriented;
        zero-area triangles raise ``ValueError``.
    """

    def __init__(self, vertices, triangles):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size == 0:
            raise ValueError("mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            bad = np.flatnonzero(((triangles < 0) | (triangles >= len(vertices))).any(axis=1))[0]
            raise ValueError(f"triangle {bad} references a missing vertex: {triangles[bad].tolist()}")

        signed = _signed_areas(vertices, triangles)
        scale = np.max(np.ptp(vertices, axis=0)) ** 2
        degenerate = np.flatnonzero(np.abs(signed) <= 1e-14 * scale)
        if degenerate.size:
            raise ValueError(f"degenerate triangle {degenerate[0]} (zero area)")
        flipped = signed < 0
        if flipped.any():
            logger.info("reorienting %d clockwise triangles", flipped.sum())
            triangles[flipped] = triangles[flipped][:, [0, 2, 1]]
            signed = np.abs(signed)

        self.vertices = vertices
        self.triangles = triangles
        self.areas = signed
        self._build_edges()
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False

    def _build_edges(self):
        nt = len(self.triangles)
        local = self.triangles[:, LOCAL_EDGES]  # (nt, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.bincount(inverse, minlength=len(edges))
        if counts.max() > 2:
            bad = np.flatnonzero(counts > 2)[0]
            raise ValueError(f"non-manifold edge {edges[bad].tolist()} shared by {counts[bad]} triangles")

        owner = np.repeat(np.arange(nt), 3)
        edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]
        edge_triangles[sorted_edges[first], 0] = owner[order][first]
        edge_triangles[sorted_edges[~first], 1] = owner[order][~first]

        self.edges = edges
        self.edge_triangles = edge_triangles
        self.triangle_edges = inverse.reshape(nt, 3)
        self.boundary_edges = np.flatnonzero(edge_triangles[:, 1] < 0)
        self._boundary_lookup = {int(e): i for i, e in enumerate(self.boundary_edges)}
        self.boundary_normals = self._outward_normals(self.boundary_edges)

    def _outward_normals(self, edge_ids):
        a, b = self.vertices[self.edges[edge_ids, 0]], self.vertices[self.edges[edge_ids, 1]]
        tangent = b - a
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        # third vertex of the owning triangle lies on the inner side
        tri = self.triangles[self.edge_triangles[edge_ids, 0]]
        centroid = self.vertices[tri].mean(axis=1)
        inward = np.einsum("ij,ij->i", centroid - a, normal) > 0
        normal[inward] *= -1
        return normal

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def interior_edges(self):
        return np.flatnonzero(self.edge_triangles[:, 1] >= 0)

    @property
    def h_max(self):
        """Largest element diameter (longest edge)."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return float(np.sqrt((d**2).sum(axis=1)).max())

    def jacobians(self):
        """Affine-map data for every triangle.

        Returns ``(J, det, inv_T)`` with ``J[t]`` mapping reference
        coordinates to physical ones, ``det = 2 * area`` and ``inv_T`` the
        inverse transpose used to push reference gradients forward.
        """
        p = self.vertices[self.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv_T = np.empty_like(J)
        inv_T[:, 0, 0] = J[:, 1, 1]
        inv_T[:, 0, 1] = -J[:, 1, 0]
        inv_T[:, 1, 0] = -J[:, 0, 1]
        inv_T[:, 1, 1] = J[:, 0, 0]
        inv_T /= det[:, None, None]
        return J, det, inv_T

    def element_geometry(self, t):
        """Jacobian, determinant and inverse-transpose of triangle ``t``."""
        if not 0 <= t < self.n_triangles:
            raise IndexError(f"triangle index {t} out of range")
        p = self.vertices[self.triangles[t]]
        J = np.column_stack([p[1] - p[0], p[2] - p[0]])
        det = float(np.linalg.det(J))
        if det <= 0:
            raise ValueError(f"degenerate triangle {t}")
        return J, det, np.linalg.inv(J).T

    def boundary_normal(self, e):
        """Outward unit normal of boundary edge ``e`` (an index into ``edges``)."""
        try:
            return self.boundary_normals[self._boundary_lookup[int(e)]].copy()
        except KeyError:
            raise ValueError(f"edge {e} is not a boundary edge") from None

    def to_reference(self, t, points):
        """Map physical points inside triangle ``t`` to reference coordinates."""
        J, _, _ = self.element_geometry(t)
        return np.linalg.solve(J, (np.atleast_2d(points) - self.vertices[self.triangles[t, 0]]).T).T


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def unit_square_mesh(m):
    """Uniform ``m x m`` mesh of the unit square.

    Each cell is cut along its lower-left to upper-right diagonal, giving
    ``(m+1)**2`` vertices and ``2 m**2`` right triangles.  Vertex ``(i, j)``
    (column ``i``, row ``j``) has index ``j*(m+1) + i``.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m!r}")
    m = int(m)
    s = np.linspace(0.0, 1.0, m + 1)
    X, Y = np.meshgrid(s, s)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.divmod(np.arange(m * m), m)
    v00 = j * (m + 1) + i
    v10, v01 = v00 + 1, v00 + m + 1
    v11 = v01 + 1
    triangles = np.concatenate([np.column_stack([v00, v10, v11]),
                                np.column_stack([v00, v11, v01])])
    return Mesh(vertices, triangles)


def write_mesh(mesh, path):
    """Write the plain-text ``V T`` / ``x y`` / ``i j k`` format."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        nv, nt = int(lines[0][0]), int(lines[0][1])
        vertices = [[float(a) for a in ln[:2]] for ln in lines[1:1 + nv]]
        triangles = [[int(a) for a in ln[:3]] for ln in lines[1 + nv:1 + nv + nt]]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed mesh file ({exc})") from exc
    if len(vertices) != nv or len(triangles) != nt:
        raise ValueError(f"{path}: expected {nv} vertices and {nt} triangles")
    return Mesh(vertices, triangles)
