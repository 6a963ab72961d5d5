"""Discrete fields on a space-time mesh.

State and adjoint live in the piecewise-constant-in-time, P1-in-space test
space with zero trace on the spatial boundary: one coefficient vector per
slab, indexed by interior vertices.  The control lives in the space of
prismatic multilinear functions (P1 in time times P1 in space) that vanish at
t = 0 and t = T: one coefficient vector per interior time level, indexed by
all vertices.  Box constraints apply only to control DOFs sitting on the
spatial boundary.
"""

from __future__ import annotations

import numpy as np


class OutOfDomainError(ValueError):
    """Point evaluation outside the space-time cylinder."""


class FieldShapeError(ValueError):
    """Coefficient array does not match the mesh."""


class StateField:
    """dG(0) x P1 field with homogeneous Dirichlet data.

    ``values[m]`` holds the interior-vertex coefficients on slab
    I_{m+1} = (t_m, t_{m+1}]; boundary vertices are implicitly zero.
    """

    def __init__(self, mesh, values=None):
        shape = (mesh.num_slabs, mesh.num_interior)
        if values is None:
            values = np.zeros(shape)
        else:
            values = np.asarray(values, dtype=float)
            if values.shape != shape:
                raise FieldShapeError(
                    f"state values must have shape {shape}, got {values.shape}"
                )
        self.mesh = mesh
        self.values = values

    def copy(self):
        return type(self)(self.mesh, self.values.copy())

    def full_values(self):
        """Coefficients on all vertices, zeros on the boundary; shape (M, nv)."""
        full = np.zeros((self.mesh.num_slabs, self.mesh.num_nodes))
        full[:, self.mesh.triangulation.interior_indices] = self.values
        return full


class AdjointField(StateField):
    """Same layout as StateField; runs backward in time, with the value past
    the final slab implicitly zero."""


class ControlField:
    """Multilinear prismatic field, zero at the initial and final time.

    ``values[l]`` holds the all-vertex coefficients at level t_{l+1},
    l = 0 .. M-2.  ``ravel()`` flattens level-major, matching the Kronecker
    ordering of the control operators.
    """

    def __init__(self, mesh, values=None):
        shape = (mesh.num_control_levels, mesh.num_nodes)
        if values is None:
            values = np.zeros(shape)
        else:
            values = np.asarray(values, dtype=float)
            if values.shape != shape:
                raise FieldShapeError(
                    f"control values must have shape {shape}, got {values.shape}"
                )
        self.mesh = mesh
        self.values = values

    def copy(self):
        return ControlField(self.mesh, self.values.copy())

    def ravel(self):
        return self.values.ravel()

    @classmethod
    def from_flat(cls, mesh, flat):
        flat = np.asarray(flat, dtype=float)
        return cls(mesh, flat.reshape(mesh.num_control_levels, mesh.num_nodes))

    def padded_values(self):
        """Level coefficients including the zero rows at t_0 and t_M;
        shape (M+1, nv)."""
        M = self.mesh.num_slabs
        nv = self.mesh.num_nodes
        padded = np.zeros((M + 1, nv))
        padded[1:M] = self.values
        return padded


def interpolate_control(mesh, g):
    """Nodal interpolant of g(x, y, t) in the control space.

    g must accept numpy arrays for x and y and a scalar t.  Values at t = 0
    and t = T are dropped (the space vanishes there).
    """
    xy = mesh.triangulation.vertices
    levels = mesh.time_partition.points[1:-1]
    values = np.empty((len(levels), mesh.num_nodes))
    for l, t in enumerate(levels):
        values[l] = np.broadcast_to(
            np.asarray(g(xy[:, 0], xy[:, 1], t), dtype=float), (mesh.num_nodes,)
        )
    return ControlField(mesh, values)


def _locate_triangle(tri, x, y, tol=1e-12):
    """Barycentric coordinates of (x, y) in the first triangle containing it."""
    v = tri.vertices
    t = tri.triangles
    x1, y1 = v[t[:, 0], 0], v[t[:, 0], 1]
    x2, y2 = v[t[:, 1], 0], v[t[:, 1], 1]
    x3, y3 = v[t[:, 2], 0], v[t[:, 2], 1]
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    l1 = ((y2 - y3) * (x - x3) + (x3 - x2) * (y - y3)) / det
    l2 = ((y3 - y1) * (x - x3) + (x1 - x3) * (y - y3)) / det
    l3 = 1.0 - l1 - l2
    inside = (l1 >= -tol) & (l2 >= -tol) & (l3 >= -tol)
    hits = np.flatnonzero(inside)
    if not hits.size:
        raise OutOfDomainError(f"point ({x}, {y}) lies outside the triangulation")
    idx = hits[0]
    return idx, np.array([l1[idx], l2[idx], l3[idx]])


def _slab_of(time_partition, t):
    pts = time_partition.points
    if not pts[0] < t <= pts[-1]:
        raise OutOfDomainError(f"time {t} outside ({pts[0]}, {pts[-1]}]")
    return int(np.searchsorted(pts, t, side="left")) - 1


def eval_state(field, x, y, t):
    """Point value of a state or adjoint field at (x, y) and time t in (0, T]."""
    mesh = field.mesh
    m = _slab_of(mesh.time_partition, t)
    idx, lam = _locate_triangle(mesh.triangulation, x, y)
    nodes = mesh.triangulation.triangles[idx]
    full = np.zeros(mesh.num_nodes)
    full[mesh.triangulation.interior_indices] = field.values[m]
    return float(lam @ full[nodes])


class BoundSet:
    """Admissible set for the control: box constraints on the control
    portion of the lateral boundary, homogeneous values on the rest.

    By default every boundary vertex carries the box constraint.  When a
    ``control_nodes`` predicate is given, only boundary vertices selected
    by it are box-constrained; the remaining boundary vertices are held
    at zero (they belong to the homogeneous-trace part of the admissible
    set).  Interior-vertex control DOFs are never constrained.  Requires
    lower <= 0 <= upper so the zero control is admissible.
    """

    def __init__(self, mesh, lower, upper, control_nodes=None):
        lower = float(lower)
        upper = float(upper)
        if not lower <= 0.0 <= upper:
            raise ValueError(
                f"bounds must satisfy lower <= 0 <= upper, got [{lower}, {upper}]"
            )
        self.mesh = mesh
        self.lower = lower
        self.upper = upper
        tri = mesh.triangulation
        flags = tri.boundary_vertex_flags
        if control_nodes is None:
            boxed = flags.copy()
        else:
            x, y = tri.vertices[:, 0], tri.vertices[:, 1]
            boxed = flags & np.asarray(control_nodes(x, y), dtype=bool)
        fixed = flags & ~boxed
        levels = mesh.num_control_levels
        self.mask = np.tile(boxed, (levels, 1))
        self.fixed_mask = np.tile(fixed, (levels, 1))
        self.constrained_indices = np.flatnonzero(self.mask.ravel())
        self.fixed_indices = np.flatnonzero(self.fixed_mask.ravel())

    @property
    def num_constrained(self):
        return len(self.constrained_indices)


def project_onto_bounds(control, bounds):
    """Clamp the box-constrained DOFs of a control into [lower, upper]
    and zero out the fixed (homogeneous-trace) DOFs.

    Interior-vertex DOFs pass through untouched.  Idempotent."""
    values = control.values.copy()
    m = bounds.mask
    values[m] = np.clip(values[m], bounds.lower, bounds.upper)
    values[bounds.fixed_mask] = 0.0
    return ControlField(control.mesh, values)
