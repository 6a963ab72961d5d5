"""Finite-element operators for the space-time discretization.

Spatial P1 mass/stiffness matrices, 1-D temporal P1 matrices, the Kronecker
operators acting on the control (space-time seminorm and mass), the coupling
between boundary control and interior state, and quadrature-based load
vectors.  Matrices are scipy CSR assembled from vectorized per-element
triplets; slab system factorizations are cached per time-step size.

Conventions: control coefficient arrays have shape (M-1, num_nodes) with
level l (0-based) sitting at time t_{l+1}; state-type arrays have shape
(M, num_interior) with row m on slab (t_m, t_{m+1}].  Flattened control
vectors are level-major, matching kron(time, space) ordering.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .spaces import ControlField


class AssemblyError(ValueError):
    """Raised for geometry or data that cannot be assembled."""


class SlabIndexError(IndexError):
    """Slab index outside 1..M."""


# 6-point triangle rule, exact to polynomial degree 4.  Barycentric points
# and weights normalized to sum to one; multiply by the element area.
_TRI4_A1, _TRI4_B1, _TRI4_W1 = 0.108103018168070, 0.445948490915965, 0.223381589678011
_TRI4_A2, _TRI4_B2, _TRI4_W2 = 0.816847572980459, 0.091576213509771, 0.109951743655322
_TRI_RULE_4 = (
    np.array(
        [
            [_TRI4_A1, _TRI4_B1, _TRI4_B1],
            [_TRI4_B1, _TRI4_A1, _TRI4_B1],
            [_TRI4_B1, _TRI4_B1, _TRI4_A1],
            [_TRI4_A2, _TRI4_B2, _TRI4_B2],
            [_TRI4_B2, _TRI4_A2, _TRI4_B2],
            [_TRI4_B2, _TRI4_B2, _TRI4_A2],
        ]
    ),
    np.array([_TRI4_W1] * 3 + [_TRI4_W2] * 3),
)

def _collapsed_triangle_rule(points_per_axis):
    """Tensor-product Gauss rule collapsed onto the reference triangle.

    The square-to-triangle map (u, v) -> (u(1-v), v) with Jacobian (1-v)
    turns an n x n Gauss grid into a triangle rule exact for total degree
    2n - 2: the map raises the v-degree of a monomial by at most one plus
    the Jacobian.  Nodes and weights derive from leggauss, so the rule is
    accurate to rounding rather than to transcribed-table precision.
    Weights are normalized to sum to one (multiply by the element area).
    """
    x, w = np.polynomial.legendre.leggauss(points_per_axis)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    U, V = np.meshgrid(u, u)
    WU, WV = np.meshgrid(wu, wu)
    lam2 = (U * (1.0 - V)).ravel()
    lam3 = V.ravel()
    bary = np.column_stack([1.0 - lam2 - lam3, lam2, lam3])
    weights = 2.0 * (WU * WV * (1.0 - V)).ravel()
    return bary, weights


# 25-point rule, exact to degree 8; used for oracle-grade integration only.
_TRI_RULE_8 = _collapsed_triangle_rule(5)


def reference_triangle_rule(degree):
    """Barycentric points and unit-sum weights for the requested degree."""
    if degree <= 4:
        return _TRI_RULE_4
    if degree <= 8:
        return _TRI_RULE_8
    raise AssemblyError(f"no triangle rule of degree {degree}")


def gauss_interval(num_points, a, b):
    """Gauss-Legendre points and weights on (a, b)."""
    x, w = np.polynomial.legendre.leggauss(num_points)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def triangle_geometry(tri):
    """Per-triangle P1 shape gradients and areas.

    Returns (grads, areas) with grads[t, i] the constant gradient of the hat
    function of local vertex i on triangle t; shape (nt, 3, 2).
    """
    v = tri.vertices
    t = tri.triangles
    p1, p2, p3 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    areas = tri.signed_areas
    inv2a = 1.0 / (2.0 * areas)
    grads = np.empty((len(t), 3, 2))
    grads[:, 0, 0] = (p2[:, 1] - p3[:, 1]) * inv2a
    grads[:, 0, 1] = (p3[:, 0] - p2[:, 0]) * inv2a
    grads[:, 1, 0] = (p3[:, 1] - p1[:, 1]) * inv2a
    grads[:, 1, 1] = (p1[:, 0] - p3[:, 0]) * inv2a
    grads[:, 2, 0] = (p1[:, 1] - p2[:, 1]) * inv2a
    grads[:, 2, 1] = (p2[:, 0] - p1[:, 0]) * inv2a
    return grads, areas


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass_stiffness(tri):
    """Spatial P1 mass and stiffness matrices over all vertices (CSR)."""
    bad = np.flatnonzero(tri.signed_areas <= 0)
    if bad.size:
        raise AssemblyError(
            f"cannot assemble on triangle {bad[0]}: non-positive area "
            f"{tri.signed_areas[bad[0]]:.3e}"
        )
    grads, areas = triangle_geometry(tri)
    stiff_loc = areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    mass_loc = areas[:, None, None] * _MASS_REF

    t = tri.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    nv = tri.num_vertices
    stiffness = sp.coo_matrix(
        (stiff_loc.reshape(-1), (rows, cols)), shape=(nv, nv)
    ).tocsr()
    mass = sp.coo_matrix((mass_loc.reshape(-1), (rows, cols)), shape=(nv, nv)).tocsr()
    return mass, stiffness


def time_mass_stiffness(points):
    """1-D P1 mass and stiffness on a time partition, all M+1 levels (CSR)."""
    points = np.asarray(points, dtype=float)
    steps = np.diff(points)
    if np.any(steps <= 0):
        raise AssemblyError("time points must be strictly increasing")
    M = len(steps)
    i = np.arange(M)
    rows = np.concatenate([i, i, i + 1, i + 1])
    cols = np.concatenate([i, i + 1, i, i + 1])
    mvals = np.concatenate([steps / 3, steps / 6, steps / 6, steps / 3])
    svals = np.concatenate([1 / steps, -1 / steps, -1 / steps, 1 / steps])
    shape = (M + 1, M + 1)
    mass = sp.coo_matrix((mvals, (rows, cols)), shape=shape).tocsr()
    stiff = sp.coo_matrix((svals, (rows, cols)), shape=shape).tocsr()
    return mass, stiff


def _interior_time_blocks(mesh):
    mt, st = time_mass_stiffness(mesh.time_partition.points)
    M = mesh.num_slabs
    return mt[1:M, 1:M], st[1:M, 1:M]


def assemble_control_seminorm(mesh):
    """Space-time H1 seminorm matrix on the control space.

    kron(time mass, spatial stiffness) + kron(time stiffness, spatial mass)
    with the t_0 and t_M levels eliminated; symmetric positive definite.
    """
    mass, stiffness = assemble_mass_stiffness(mesh.triangulation)
    mt, st = _interior_time_blocks(mesh)
    return (sp.kron(mt, stiffness) + sp.kron(st, mass)).tocsr()


def assemble_control_mass(mesh):
    """Space-time L2 mass matrix on the control space (CSR)."""
    mass, _ = assemble_mass_stiffness(mesh.triangulation)
    mt, _ = _interior_time_blocks(mesh)
    return sp.kron(mt, mass).tocsr()


class EnergyExtension:
    """Exact solver for the interior-vertex block of the control seminorm.

    The control is optimized through its boundary trace; interior-vertex
    DOFs follow by minimizing the space-time H1 seminorm, which means
    solving with A_ii, the seminorm matrix restricted to interior-vertex
    DOFs.  A_ii = kron(Mt, S_ii) + kron(St, M_ii) is separable, so instead
    of factoring one large space-time operator we eigen-decompose the small
    interior time pencil St Z = Mt Z diag(theta) (Z^T Mt Z = I) and factor
    the 2-D operator S_ii + theta_j M_ii once per time mode.
    """

    def __init__(self, disc):
        mt, st = _interior_time_blocks(disc.mesh)
        theta, modes = sla.eigh(st.toarray(), mt.toarray())
        self.modes = modes
        self._solvers = [
            spla.splu((disc.stiff_ii + th * disc.mass_ii).tocsc()) for th in theta
        ]

    def solve(self, rhs):
        """Solve A_ii X = rhs for rhs of shape (levels, num_interior)."""
        transformed = self.modes.T @ rhs
        solved = np.empty_like(transformed)
        for j, solver in enumerate(self._solvers):
            solved[j] = solver.solve(transformed[j])
        return self.modes @ solved


def spatial_load_vector(tri, g, t, rule=None):
    """All-vertex load vector of x, y -> g(x, y, t) by triangle quadrature."""
    if rule is None:
        rule = _TRI_RULE_4
    bary, weights = rule
    tt = tri.triangles
    v = tri.vertices
    p1, p2, p3 = v[tt[:, 0]], v[tt[:, 1]], v[tt[:, 2]]
    areas = tri.signed_areas
    out = np.zeros(tri.num_vertices)
    for lam, w in zip(bary, weights):
        px = lam[0] * p1[:, 0] + lam[1] * p2[:, 0] + lam[2] * p3[:, 0]
        py = lam[0] * p1[:, 1] + lam[1] * p2[:, 1] + lam[2] * p3[:, 1]
        vals = np.broadcast_to(
            np.asarray(g(px, py, t), dtype=float), areas.shape
        ) * (w * areas)
        for i in range(3):
            np.add.at(out, tt[:, i], vals * lam[i])
    return out


# Factorize slab systems directly below this many interior unknowns; fall
# back to Jacobi-CG above it.
_DIRECT_LIMIT = 200_000


class _IterativeSlabSolver:
    def __init__(self, matrix):
        self.matrix = matrix.tocsr()
        d = self.matrix.diagonal()
        self.precond = spla.LinearOperator(
            matrix.shape, matvec=lambda x: x / d
        )

    def solve(self, rhs):
        x, info = spla.cg(self.matrix, rhs, rtol=1e-13, atol=0.0, M=self.precond)
        if info != 0:
            raise AssemblyError(f"slab CG failed to converge (info={info})")
        return x


class Discretization:
    """All assembled operators for one space-time mesh.

    Heavy objects (matrices, slab factorizations, quadrature geometry) are
    built once and shared by the forward, adjoint and optimization routines.
    Instances are immutable after construction, so concurrent reads are safe.
    """

    def __init__(self, mesh, quad_degree=4, time_quad_points=2):
        self.mesh = mesh
        tri = mesh.triangulation
        self.mass, self.stiffness = assemble_mass_stiffness(tri)
        idx = tri.interior_indices
        self.interior = idx
        self.mass_ii = self.mass[idx][:, idx].tocsr()
        self.stiff_ii = self.stiffness[idx][:, idx].tocsr()
        self.mass_if = self.mass[idx, :].tocsr()
        self.stiff_if = self.stiffness[idx, :].tocsr()
        self.mass_fi = self.mass_if.T.tocsr()
        self.stiff_fi = self.stiff_if.T.tocsr()
        self.seminorm = assemble_control_seminorm(mesh)
        self.control_mass = assemble_control_mass(mesh)
        self.tri_rule = reference_triangle_rule(quad_degree)
        self.time_quad_points = time_quad_points
        self.grads, self.areas = triangle_geometry(tri)
        self._slab_factor = {}

    # -- slab systems ------------------------------------------------------

    def slab_matrix(self, k):
        return self.mass_ii + k * self.stiff_ii

    def slab_solver(self, k):
        """Cached solver for M + k*S on the interior space; key is k itself,
        so uniform partitions factorize exactly once."""
        key = float(k)
        solver = self._slab_factor.get(key)
        if solver is None:
            matrix = self.slab_matrix(k)
            if matrix.shape[0] <= _DIRECT_LIMIT:
                solver = spla.splu(matrix.tocsc())
            else:
                solver = _IterativeSlabSolver(matrix)
            self._slab_factor[key] = solver
        return solver

    # -- control coupling and pairings --------------------------------------

    def coupling_all(self, control_values):
        """Slab loads of the control: row m is M(q_m - q_{m-1}) +
        (k_m/2) S (q_{m-1} + q_m) on interior test functions; (M, ni)."""
        M = self.mesh.num_slabs
        pad = np.zeros((M + 1, self.mesh.num_nodes))
        pad[1:M] = control_values
        diff = pad[1:] - pad[:-1]
        ssum = pad[1:] + pad[:-1]
        k = self.mesh.time_partition.steps
        return (self.mass_if @ diff.T).T + 0.5 * k[:, None] * (
            self.stiff_if @ ssum.T
        ).T

    def coupling_transpose(self, slab_values):
        """Adjoint of coupling_all: state-type (M, ni) -> control-type
        (M-1, nv)."""
        phi = slab_values
        k = self.mesh.time_partition.steps
        w = k[:, None] * phi
        out = (self.mass_fi @ (phi[:-1] - phi[1:]).T).T
        out += 0.5 * (self.stiff_fi @ (w[:-1] + w[1:]).T).T
        return out

    def pair_state_control(self, slab_values):
        """L2(space-time) pairing of a state-type field with every control
        basis function; (M, ni) -> (M-1, nv)."""
        wk = self.mesh.time_partition.steps[:, None] * slab_values
        return 0.5 * (self.mass_fi @ (wk[:-1] + wk[1:]).T).T

    def control_mass_apply(self, control_flat):
        return self.control_mass @ control_flat

    # -- quadrature loads ----------------------------------------------------

    def slab_time_rule(self, m):
        """Gauss points/weights on slab m (0-based)."""
        pts = self.mesh.time_partition.points
        return gauss_interval(self.time_quad_points, pts[m], pts[m + 1])

    def source_slabs(self, f):
        """Slab-integrated source loads on interior vertices; (M, ni)."""
        M = self.mesh.num_slabs
        out = np.zeros((M, self.mesh.num_interior))
        if f is None:
            return out
        tri = self.mesh.triangulation
        for m in range(M):
            tq, wq = self.slab_time_rule(m)
            for t, w in zip(tq, wq):
                out[m] += w * spatial_load_vector(tri, f, t, self.tri_rule)[
                    self.interior
                ]
        return out

    def control_pairing(self, g):
        """L2(space-time) pairing of a function g(x, y, t) with every control
        basis function; (M-1, nv)."""
        M = self.mesh.num_slabs
        pts = self.mesh.time_partition.points
        out = np.zeros((M - 1, self.mesh.num_nodes))
        if g is None:
            return out
        tri = self.mesh.triangulation
        for m in range(M):
            k = pts[m + 1] - pts[m]
            tq, wq = self.slab_time_rule(m)
            for t, w in zip(tq, wq):
                load = spatial_load_vector(tri, g, t, self.tri_rule)
                lo = (pts[m + 1] - t) / k
                hi = (t - pts[m]) / k
                if m >= 1:
                    out[m - 1] += (w * lo) * load
                if m + 1 <= M - 1:
                    out[m] += (w * hi) * load
        return out

    def project_initial(self, u0):
        """L2 projection of u0 onto the interior P1 space; (ni,)."""
        if u0 is None:
            return np.zeros(self.mesh.num_interior)
        tri = self.mesh.triangulation
        rhs = spatial_load_vector(tri, lambda x, y, t: u0(x, y), 0.0, self.tri_rule)
        # The mass solve is the k = 0 slab system, so it shares the cache.
        return self.slab_solver(0.0).solve(rhs[self.interior])

    def misfit_quadrature(self, state_values, control_values, u_d):
        """|| (w + q) - u_d ||^2 over the space-time cylinder by quadrature."""
        tri = self.mesh.triangulation
        tt = tri.triangles
        v = tri.vertices
        p = [v[tt[:, i]] for i in range(3)]
        M = self.mesh.num_slabs
        pts = self.mesh.time_partition.points
        full = np.zeros((M, self.mesh.num_nodes))
        full[:, self.interior] = state_values
        pad = np.zeros((M + 1, self.mesh.num_nodes))
        if control_values is not None:
            pad[1:M] = control_values
        bary, weights = self.tri_rule
        total = 0.0
        for m in range(M):
            k = pts[m + 1] - pts[m]
            tq, wq = self.slab_time_rule(m)
            for t, wt in zip(tq, wq):
                lo = (pts[m + 1] - t) / k
                hi = (t - pts[m]) / k
                nodal = full[m] + lo * pad[m] + hi * pad[m + 1]
                for lam, ws in zip(bary, weights):
                    px = sum(lam[i] * p[i][:, 0] for i in range(3))
                    py = sum(lam[i] * p[i][:, 1] for i in range(3))
                    uh = sum(lam[i] * nodal[tt[:, i]] for i in range(3))
                    diff = uh - (0.0 if u_d is None else u_d(px, py, t))
                    total += wt * ws * float(self.areas @ (diff * diff))
        return total


# -- single-slab operations (1-based slab index m) ---------------------------


def _check_slab(mesh, m):
    if not 1 <= m <= mesh.num_slabs:
        raise SlabIndexError(f"slab {m} outside 1..{mesh.num_slabs}")


def assemble_coupling(disc, control, m):
    """Coupling load of a control on slab m (1-based); (ni,) vector."""
    _check_slab(disc.mesh, m)
    values = control.values if isinstance(control, ControlField) else control
    return disc.coupling_all(values)[m - 1]


def assemble_source(disc, f, m):
    """Source load on slab m (1-based); (ni,) vector."""
    _check_slab(disc.mesh, m)
    return disc.source_slabs(f)[m - 1] if f is not None else np.zeros(
        disc.mesh.num_interior
    )


def assemble_tracking(disc, u_d, state, control, m):
    """Tracking load int_{I_m} (u_kh - u_d, phi_i) with u_kh = w + q."""
    _check_slab(disc.mesh, m)
    i = m - 1
    k = disc.mesh.time_partition.steps[i]
    out = k * (disc.mass_ii @ state.values[i])
    if control is not None:
        pad = control.padded_values()
        out += 0.5 * k * (disc.mass_if @ (pad[i] + pad[i + 1]))
    if u_d is not None:
        tri = disc.mesh.triangulation
        tq, wq = disc.slab_time_rule(i)
        for t, w in zip(tq, wq):
            out -= w * spatial_load_vector(tri, u_d, t, disc.tri_rule)[disc.interior]
    return out


def l2_project_initial(disc, u0):
    """L2 projection of the initial datum onto the zero-trace P1 space."""
    return disc.project_initial(u0)


# -- dense bilinear form (diagnostics and tests) -----------------------------


def bilinear_form(disc, v_values, w_values):
    """B(v, w) for dG(0) x P1 fields given as (M, ni) coefficient arrays.

    Sum of slab stiffness terms, inter-slab jumps paired with the later
    slab value, and the initial pairing; evaluated directly from the
    matrices, no quadrature."""
    V = np.asarray(v_values, dtype=float)
    W = np.asarray(w_values, dtype=float)
    k = disc.mesh.time_partition.steps
    total = float(V[0] @ (disc.mass_ii @ W[0]))
    for m in range(len(k)):
        total += k[m] * float(V[m] @ (disc.stiff_ii @ W[m]))
        if m >= 1:
            total += float((V[m] - V[m - 1]) @ (disc.mass_ii @ W[m]))
    return total


def coercivity_gap(disc, v_values):
    """B(v, v) minus the slab-summed gradient seminorm; nonnegative for every
    discrete state."""
    V = np.asarray(v_values, dtype=float)
    k = disc.mesh.time_partition.steps
    grad = sum(
        k[m] * float(V[m] @ (disc.stiff_ii @ V[m])) for m in range(len(k))
    )
    return bilinear_form(disc, V, V) - grad


def control_state_form(disc, control, v_values):
    """B(q, v) of a control against a state-type field: the coupling pairing
    sum_m C_m(q)^T v_m."""
    values = control.values if isinstance(control, ControlField) else control
    return float(np.sum(disc.coupling_all(values) * np.asarray(v_values)))


def export_matrix_market(disc, directory):
    """Write mass, stiffness and control seminorm in Matrix Market format."""
    import os

    import scipy.io as sio

    os.makedirs(directory, exist_ok=True)
    sio.mmwrite(os.path.join(directory, "mass.mtx"), disc.mass)
    sio.mmwrite(os.path.join(directory, "stiffness.mtx"), disc.stiffness)
    sio.mmwrite(os.path.join(directory, "control_seminorm.mtx"), disc.seminorm)
