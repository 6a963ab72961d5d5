"""Assembled operators against symbolic and quadrature oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

import _symbolic
from dbc.assembly import (
    AssemblyError,
    Discretization,
    EnergyExtension,
    SlabIndexError,
    assemble_control_mass,
    assemble_control_seminorm,
    assemble_coupling,
    assemble_mass_stiffness,
    assemble_source,
    bilinear_form,
    coercivity_gap,
    control_state_form,
    export_matrix_market,
    gauss_interval,
    reference_triangle_rule,
    spatial_load_vector,
    time_mass_stiffness,
)
from dbc.manufactured import build_space_time_mesh
from dbc.mesh import SpaceTimeMesh, TimePartition, Triangulation, unit_square_mesh
from dbc.spaces import ControlField, interpolate_control


@pytest.fixture
def disc():
    return Discretization(build_space_time_mesh(3, 3))


# -- element matrices vs symbolic integration ---------------------------------


@pytest.mark.parametrize(
    "coords",
    [
        [("0", "0"), ("1", "0"), ("0", "1")],
        [("0.25", "0.125"), ("1.5", "0.5"), ("0.375", "1.25")],
    ],
)
def test_triangle_matrices_match_symbolic(coords):
    tri = Triangulation(
        np.array(coords, dtype=float), [[0, 1, 2]]
    )
    mass, stiff = assemble_mass_stiffness(tri)
    mass_ref, stiff_ref = _symbolic.triangle_matrices(coords)
    assert np.abs(mass.toarray() - mass_ref).max() < 1e-14
    assert np.abs(stiff.toarray() - stiff_ref).max() < 1e-14


def test_global_matrices_structure():
    tri = unit_square_mesh(3)
    mass, stiff = assemble_mass_stiffness(tri)
    assert np.abs((mass - mass.T).toarray()).max() < 1e-15
    assert np.abs((stiff - stiff.T).toarray()).max() < 1e-15
    ones = np.ones(tri.num_vertices)
    # Constants lie in the stiffness kernel; mass row sums integrate to one.
    assert np.abs(stiff @ ones).max() < 1e-14
    assert float(ones @ (mass @ ones)) == pytest.approx(1.0, abs=1e-14)
    eigs = np.linalg.eigvalsh(mass.toarray())
    assert eigs.min() > 0


def test_assemble_rejects_degenerate_triangles():
    flipped = Triangulation(
        [[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], validate=False
    )
    with pytest.raises(AssemblyError):
        assemble_mass_stiffness(flipped)


def test_time_matrices_match_symbolic():
    points = ["0", "0.25", "0.75", "1.5"]
    mass, stiff = time_mass_stiffness(np.array(points, dtype=float))
    mass_ref, stiff_ref = _symbolic.time_matrices(points)
    assert np.abs(mass.toarray() - mass_ref).max() < 1e-14
    assert np.abs(stiff.toarray() - stiff_ref).max() < 1e-14
    with pytest.raises(AssemblyError):
        time_mass_stiffness([0.0, 0.5, 0.5])


# -- quadrature rules ----------------------------------------------------------


@pytest.mark.parametrize("degree", [4, 8])
def test_triangle_rule_integrates_monomials_exactly(degree):
    bary, weights = reference_triangle_rule(degree)
    assert weights.sum() == pytest.approx(1.0, abs=1e-14)
    # Reference triangle (0,0)-(1,0)-(0,1): x = lambda_2, y = lambda_3.
    x, y = bary[:, 1], bary[:, 2]
    area = 0.5
    for p in range(degree + 1):
        for q in range(degree + 1 - p):
            approx = area * float(weights @ (x**p * y**q))
            exact = _symbolic.monomial_triangle_integral(p, q)
            assert approx == pytest.approx(exact, rel=1e-13, abs=1e-16)


def test_triangle_rule_unavailable_degree():
    with pytest.raises(AssemblyError):
        reference_triangle_rule(9)


def test_gauss_interval_exactness():
    pts, wts = gauss_interval(2, 0.25, 1.75)
    for p in range(4):  # two points integrate cubics exactly
        exact = (1.75 ** (p + 1) - 0.25 ** (p + 1)) / (p + 1)
        assert float(wts @ pts**p) == pytest.approx(exact, rel=1e-14)


# -- control-space operators ---------------------------------------------------


def zero_scalar(x, y, t):
    return np.zeros_like(x)


def zero_pair(x, y, t):
    return np.zeros_like(x), np.zeros_like(x)


def test_control_seminorm_matches_quadrature(disc):
    """q^T A q must equal the space-time H1 seminorm of the prismatic field."""
    from dbc.manufactured import bump_case, control_error
    import dataclasses

    mesh = disc.mesh
    q = interpolate_control(
        mesh, lambda x, y, t: np.sin(x + 0.3) * (y + 0.2) * (t + 0.1)
    )
    quad_form = float(q.ravel() @ (disc.seminorm @ q.ravel()))
    # control_error against a zero exact control returns |q|_{1, Omega x I};
    # the integrand is polynomial of low degree, so quadrature is exact.
    zero_case = dataclasses.replace(
        bump_case(), control_t=zero_scalar, control_grad=zero_pair
    )
    seminorm = control_error(disc, zero_case, q)
    assert seminorm**2 == pytest.approx(quad_form, rel=1e-12)


def test_control_mass_matches_constant_integral():
    mesh = build_space_time_mesh(2, 4)
    mass = assemble_control_mass(mesh)
    # The field equal to 1 at every node of every interior level is the
    # standard time hat profile: integral of its square over the cylinder is
    # the 1-D mass quadratic form of (0, 1, 1, 1, 0) times |Omega| = 1.
    ones = np.ones(mesh.num_control_levels * mesh.num_nodes)
    tmass, _ = time_mass_stiffness(mesh.time_partition.points)
    profile = np.zeros(mesh.num_slabs + 1)
    profile[1:-1] = 1.0
    exact = float(profile @ (tmass @ profile))
    assert float(ones @ (mass @ ones)) == pytest.approx(exact, rel=1e-14)


def test_seminorm_positive_definite(disc):
    flat = np.random.default_rng(0).standard_normal(disc.seminorm.shape[0])
    assert float(flat @ (disc.seminorm @ flat)) > 0


def test_energy_extension_solves_interior_block():
    for mesh in (
        build_space_time_mesh(4, 3),
        SpaceTimeMesh(unit_square_mesh(3), TimePartition([0, 0.2, 0.5, 0.7, 1.3])),
    ):
        disc = Discretization(mesh)
        M = mesh.num_slabs
        tmass, tstiff = time_mass_stiffness(mesh.time_partition.points)
        mt, st = tmass[1:M, 1:M], tstiff[1:M, 1:M]
        block = sp.kron(mt, disc.stiff_ii) + sp.kron(st, disc.mass_ii)
        rng = np.random.default_rng(7)
        rhs = rng.standard_normal((mesh.num_control_levels, mesh.num_interior))
        x = EnergyExtension(disc).solve(rhs)
        residual = block @ x.ravel() - rhs.ravel()
        assert np.linalg.norm(residual) < 1e-10 * np.linalg.norm(rhs)


# -- coupling, pairings, loads --------------------------------------------------


def _quadrature_coupling_form(disc, control, v_values):
    """(d_t q, v)_I + (grad q, grad v)_I by per-slab quadrature, independent
    of the assembled coupling path."""
    mesh = disc.mesh
    tri = mesh.triangulation
    tt = tri.triangles
    pts = mesh.time_partition.points
    pad = control.padded_values()
    full = np.zeros((mesh.num_slabs, mesh.num_nodes))
    full[:, disc.interior] = v_values
    bary, ws = disc.tri_rule
    total = 0.0
    for m in range(mesh.num_slabs):
        k = pts[m + 1] - pts[m]
        dt_nodal = (pad[m + 1] - pad[m]) / k
        v_nodal = full[m]
        tq, wq = gauss_interval(2, pts[m], pts[m + 1])
        for t, wt in zip(tq, wq):
            lo = (pts[m + 1] - t) / k
            hi = (t - pts[m]) / k
            q_nodal = lo * pad[m] + hi * pad[m + 1]
            qx = np.einsum("ti,ti->t", q_nodal[tt], disc.grads[:, :, 0])
            qy = np.einsum("ti,ti->t", q_nodal[tt], disc.grads[:, :, 1])
            vx = np.einsum("ti,ti->t", v_nodal[tt], disc.grads[:, :, 0])
            vy = np.einsum("ti,ti->t", v_nodal[tt], disc.grads[:, :, 1])
            total += wt * float(disc.areas @ (qx * vx + qy * vy))
            for lam, w in zip(bary, ws):
                dq = sum(lam[i] * dt_nodal[tt[:, i]] for i in range(3))
                vv = sum(lam[i] * v_nodal[tt[:, i]] for i in range(3))
                total += wt * w * float(disc.areas @ (dq * vv))
    return total


def test_coupling_matches_quadrature(disc):
    rng = np.random.default_rng(4)
    mesh = disc.mesh
    q = ControlField(
        mesh, rng.standard_normal((mesh.num_control_levels, mesh.num_nodes))
    )
    v = rng.standard_normal((mesh.num_slabs, mesh.num_interior))
    assembled = control_state_form(disc, q, v)
    oracle = _quadrature_coupling_form(disc, q, v)
    assert assembled == pytest.approx(oracle, rel=1e-12)


def test_coupling_transpose_is_exact_adjoint(disc):
    rng = np.random.default_rng(5)
    mesh = disc.mesh
    q = rng.standard_normal((mesh.num_control_levels, mesh.num_nodes))
    v = rng.standard_normal((mesh.num_slabs, mesh.num_interior))
    lhs = float(np.sum(disc.coupling_all(q) * v))
    rhs = float(np.sum(disc.coupling_transpose(v) * q))
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_pair_state_control_is_l2_pairing(disc):
    """The pairing of a dG(0) field with control hats equals the space-time
    L2 product, computable through the control mass of the interpolant."""
    rng = np.random.default_rng(6)
    mesh = disc.mesh
    v = rng.standard_normal((mesh.num_slabs, mesh.num_interior))
    q = rng.standard_normal((mesh.num_control_levels, mesh.num_nodes))
    paired = float(np.sum(disc.pair_state_control(v) * q))
    # Oracle: (v, q)_I with v constant per slab and q linear in time reduces
    # per slab to k_m/2 * (v_m, q_{m-1} + q_m)_{L2(Omega)}.
    pad = np.zeros((mesh.num_slabs + 1, mesh.num_nodes))
    pad[1:-1] = q
    full = np.zeros((mesh.num_slabs, mesh.num_nodes))
    full[:, disc.interior] = v
    k = mesh.time_partition.steps
    oracle = sum(
        0.5 * k[m] * float(full[m] @ (disc.mass @ (pad[m] + pad[m + 1])))
        for m in range(mesh.num_slabs)
    )
    assert paired == pytest.approx(oracle, rel=1e-13)


def test_spatial_load_vector_constant():
    tri = unit_square_mesh(4)
    load = spatial_load_vector(tri, lambda x, y, t: np.ones_like(x), 0.0)
    # Loads of 1 are the hat-function integrals; they sum to the area.
    assert load.sum() == pytest.approx(1.0, rel=1e-14)
    interior = tri.interior_indices
    assert np.allclose(load[interior], 1.0 / 16.0)


def test_source_slabs_constant(disc):
    k = disc.mesh.time_partition.steps[0]
    n = disc.mesh.triangulation.n
    slabs = disc.source_slabs(lambda x, y, t: np.ones_like(x))
    assert slabs.shape == (3, disc.mesh.num_interior)
    assert np.allclose(slabs, k / n**2)
    assert not disc.source_slabs(None).any()


def test_control_pairing_matches_mass_for_discrete_function(disc):
    """Pairing a function that already lies in the control space must agree
    with the control mass applied to its interpolant."""
    mesh = disc.mesh
    pts = mesh.time_partition.points
    profile = np.zeros(len(pts))
    profile[1:-1] = [0.7, -0.4]  # hat coefficients; zero at t = 0 and t = T

    def g_disc(x, y, t):
        # P1 in space times the piecewise-linear time profile: exactly
        # representable in the control space.
        return (0.5 + 0.25 * x) * np.interp(t, pts, profile)

    paired = disc.control_pairing(g_disc).ravel()
    oracle = disc.control_mass @ interpolate_control(mesh, g_disc).ravel()
    assert np.allclose(paired, oracle, rtol=1e-12, atol=1e-15)
    assert disc.control_pairing(None).shape == (2, mesh.num_nodes)
    assert not disc.control_pairing(None).any()


def test_project_initial(disc):
    assert not disc.project_initial(None).any()

    def u0(x, y):
        return np.sin(np.pi * x) * np.sin(np.pi * y)

    proj = disc.project_initial(u0)
    # Galerkin property: the projection error is mass-orthogonal to the
    # interior space, so the projected coefficients reproduce the load.
    rhs = spatial_load_vector(
        disc.mesh.triangulation, lambda x, y, t: u0(x, y), 0.0, disc.tri_rule
    )[disc.interior]
    assert np.allclose(disc.mass_ii @ proj, rhs, rtol=1e-12, atol=1e-15)


def test_misfit_quadrature_analytic_cases(disc):
    M = disc.mesh.num_slabs
    ni = disc.mesh.num_interior
    zero_state = np.zeros((M, ni))
    one = disc.misfit_quadrature(
        zero_state, None, lambda x, y, t: np.ones_like(x)
    )
    assert one == pytest.approx(1.0, rel=1e-14)  # |Omega| * T
    poly = disc.misfit_quadrature(zero_state, None, lambda x, y, t: x + y)
    assert poly == pytest.approx(7.0 / 6.0, rel=1e-13)
    assert disc.misfit_quadrature(zero_state, None, None) == 0.0


# -- bilinear form and coercivity -----------------------------------------------


def test_bilinear_form_gap_closed_form(disc):
    """B(v,v) - sum_m k_m |grad v_m|^2 telescopes to half the squared mass
    norms of the first value, the jumps, and the final value."""
    rng = np.random.default_rng(8)
    M = disc.mesh.num_slabs
    v = rng.standard_normal((M, disc.mesh.num_interior))
    gap = coercivity_gap(disc, v)
    expected = 0.5 * float(v[0] @ (disc.mass_ii @ v[0]))
    expected += 0.5 * float(v[-1] @ (disc.mass_ii @ v[-1]))
    for m in range(1, M):
        jump = v[m] - v[m - 1]
        expected += 0.5 * float(jump @ (disc.mass_ii @ jump))
    assert gap == pytest.approx(expected, rel=1e-12)
    assert gap >= 0.0


def test_bilinear_form_is_bilinear(disc):
    rng = np.random.default_rng(9)
    shape = (disc.mesh.num_slabs, disc.mesh.num_interior)
    v, w1, w2 = (rng.standard_normal(shape) for _ in range(3))
    lhs = bilinear_form(disc, v, 2.0 * w1 - 3.0 * w2)
    rhs = 2.0 * bilinear_form(disc, v, w1) - 3.0 * bilinear_form(disc, v, w2)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- slab helpers and caching ----------------------------------------------------


def test_slab_solver_cache_and_accuracy(disc):
    assert disc.slab_solver(0.5) is disc.slab_solver(0.5)
    assert disc.slab_solver(0.5) is not disc.slab_solver(0.25)
    rng = np.random.default_rng(10)
    rhs = rng.standard_normal(disc.mesh.num_interior)
    x = disc.slab_solver(0.3).solve(rhs)
    dense = np.linalg.solve(disc.slab_matrix(0.3).toarray(), rhs)
    assert np.allclose(x, dense, rtol=1e-12, atol=1e-14)


def test_single_slab_helpers_match_batch(disc):
    rng = np.random.default_rng(11)
    mesh = disc.mesh
    q = ControlField(
        mesh, rng.standard_normal((mesh.num_control_levels, mesh.num_nodes))
    )

    def f(x, y, t):
        return x + t * y

    for m in range(1, mesh.num_slabs + 1):
        assert np.allclose(
            assemble_coupling(disc, q, m), disc.coupling_all(q.values)[m - 1]
        )
        assert np.allclose(assemble_source(disc, f, m), disc.source_slabs(f)[m - 1])
    with pytest.raises(SlabIndexError):
        assemble_coupling(disc, q, 0)
    with pytest.raises(SlabIndexError):
        assemble_source(disc, f, mesh.num_slabs + 1)


def test_export_matrix_market(disc, tmp_path):
    import scipy.io as sio

    export_matrix_market(disc, tmp_path)
    for name, matrix in (
        ("mass.mtx", disc.mass),
        ("stiffness.mtx", disc.stiffness),
        ("control_seminorm.mtx", disc.seminorm),
    ):
        path = tmp_path / name
        assert path.is_file()
        loaded = sio.mmread(path)
        assert np.abs((loaded - matrix).toarray()).max() < 1e-15
