"""Space-time meshes for parabolic boundary-control problems.

The spatial domain is triangulated (structured meshes of the unit square are
built in), time is partitioned into slabs, and the product of the two is the
prismatic mesh on which the control lives.  All vertex and triangle data are
plain numpy arrays; nothing here depends on the rest of the package.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger("dbc.mesh")


class MeshError(ValueError):
    """Raised for malformed mesh input."""


class Triangulation:
    """Conforming triangle mesh of a polygonal domain.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates.
    triangles : (nt, 3) array_like
        Vertex indices per triangle, counterclockwise.
    validate : bool
        Check positive areas and edge conformity.  Disable only to build
        deliberately broken meshes in tests.

    Attributes
    ----------
    boundary_vertex_flags : (nv,) bool array
        True for vertices lying on the domain boundary, derived from edge
        incidence (an edge on the boundary belongs to exactly one triangle).
    h : float
        Longest edge over all triangles.
    cell_width : float or None
        Structured-grid cell width 1/n; set by ``unit_square_mesh`` and used
        as the mesh size reported in convergence tables.
    """

    def __init__(self, vertices, triangles, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (nt, 3) array")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise MeshError("triangle refers to a vertex that does not exist")

        v = self.vertices
        t = self.triangles
        d1 = v[t[:, 1]] - v[t[:, 0]]
        d2 = v[t[:, 2]] - v[t[:, 0]]
        self.signed_areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if validate:
            bad = np.flatnonzero(self.signed_areas <= 0)
            if bad.size:
                raise MeshError(
                    f"triangle {bad[0]} has non-positive area "
                    f"{self.signed_areas[bad[0]]:.3e} (vertices {t[bad[0]]})"
                )

        edges = np.sort(
            np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1
        )
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if validate and counts.max(initial=1) > 2:
            raise MeshError("non-conforming mesh: an edge is shared by >2 triangles")
        boundary_edges = uniq[counts == 1]
        flags = np.zeros(len(v), dtype=bool)
        flags[boundary_edges.ravel()] = True
        self.boundary_vertex_flags = flags

        edge_len = np.stack(
            [
                np.linalg.norm(v[t[:, 1]] - v[t[:, 0]], axis=1),
                np.linalg.norm(v[t[:, 2]] - v[t[:, 1]], axis=1),
                np.linalg.norm(v[t[:, 0]] - v[t[:, 2]], axis=1),
            ]
        )
        self.h = float(edge_len.max(initial=0.0))
        self.n = None
        self.cell_width = None

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def areas(self):
        return self.signed_areas

    @property
    def interior_indices(self):
        """Indices of vertices not on the boundary, in vertex order."""
        return np.flatnonzero(~self.boundary_vertex_flags)

    @property
    def num_interior(self):
        return len(self.interior_indices)


def unit_square_mesh(n):
    """Structured triangulation of (0,1)^2 with n subdivisions per side.

    Vertices are ordered lexicographically by (y, x); each grid cell is split
    along the diagonal from its lower-left to its upper-right corner, giving
    2 n^2 congruent right triangles with counterclockwise orientation.
    """
    if int(n) != n or n < 1:
        raise MeshError(f"subdivision count must be a positive integer, got {n!r}")
    n = int(n)
    side = np.arange(n + 1) / n
    X, Y = np.meshgrid(side, side)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.concatenate([np.stack([lower, upper], axis=1).reshape(-1, 3)])

    tri = Triangulation(vertices, triangles)
    tri.n = n
    tri.cell_width = 1.0 / n
    return tri


class TimePartition:
    """Partition 0 = t_0 < t_1 < ... < t_M = T of the time interval.

    Attributes
    ----------
    points : (M+1,) array
    steps : (M,) array of slab lengths k_m
    k : float, the largest step
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=float)
        if self.points.ndim != 1 or len(self.points) < 2:
            raise MeshError("time partition needs at least two points")
        if self.points[0] != 0.0:
            raise MeshError(f"time partition must start at 0, got {self.points[0]!r}")
        self.steps = np.diff(self.points)
        if np.any(self.steps <= 0):
            raise MeshError("time points must be strictly increasing")
        self.k = float(self.steps.max())

    @property
    def num_steps(self):
        return len(self.steps)

    @property
    def final_time(self):
        return float(self.points[-1])


def uniform_time_partition(num_steps, final_time=1.0):
    """M equal slabs on [0, T]; endpoints are exact in floating point."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise MeshError(f"step count must be a positive integer, got {num_steps!r}")
    if final_time <= 0:
        raise MeshError(f"final time must be positive, got {final_time!r}")
    M = int(num_steps)
    return TimePartition(final_time * np.arange(M + 1) / M)


class SpaceTimeMesh:
    """Prismatic product of a triangulation and a time partition.

    ``sigma = sqrt(width^2 + k^2)`` combines the spatial cell width (1/n on
    structured meshes, else the element diameter) with the largest time step;
    it is the single discretization parameter of the control space.
    """

    def __init__(self, triangulation, time_partition):
        self.triangulation = triangulation
        self.time_partition = time_partition
        width = triangulation.cell_width
        if width is None:
            width = triangulation.h
        self.width = width
        self.sigma = float(np.hypot(width, time_partition.k))
        ratio = time_partition.k / width
        if not 0.25 <= ratio <= 4.0:
            log.warning(
                "skewed prisms: k/h = %.3g outside [0.25, 4]; error constants "
                "may degrade",
                ratio,
            )

    @property
    def num_slabs(self):
        return self.time_partition.num_steps

    @property
    def num_nodes(self):
        return self.triangulation.num_vertices

    @property
    def num_interior(self):
        return self.triangulation.num_interior

    @property
    def num_prisms(self):
        return self.triangulation.num_triangles * self.time_partition.num_steps

    @property
    def num_control_levels(self):
        """Interior time levels t_1 .. t_{M-1} carrying control DOFs."""
        return self.time_partition.num_steps - 1


def refine(mesh, spatial_factor=2, temporal_factor=2):
    """Uniformly refined copy of a structured space-time mesh.

    Both factors must be positive integers; the coarse vertices are a subset
    of the fine ones.  Only meshes built by ``unit_square_mesh`` carry the
    structure needed to refine.
    """
    tri = mesh.triangulation
    if tri.n is None:
        raise MeshError("refine requires a structured unit-square mesh")
    for name, f in (("spatial", spatial_factor), ("temporal", temporal_factor)):
        if int(f) != f or f < 1:
            raise MeshError(f"{name} refinement factor must be a positive integer")
    fine_tri = unit_square_mesh(tri.n * int(spatial_factor))
    tp = mesh.time_partition
    fine_tp = uniform_time_partition(
        tp.num_steps * int(temporal_factor), tp.final_time
    )
    return SpaceTimeMesh(fine_tri, fine_tp)


def write_mesh_text(triangulation, stream):
    """Dump a triangulation as text: one "x y flag" line per vertex, then one
    "i j k" line per triangle.  ``stream`` is a writable text file object."""
    for (x, y), flag in zip(
        triangulation.vertices, triangulation.boundary_vertex_flags
    ):
        stream.write(f"{x:.17g} {y:.17g} {int(flag)}\n")
    for i, j, k in triangulation.triangles:
        stream.write(f"{i} {j} {k}\n")
