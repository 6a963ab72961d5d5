"""Adjoint (backward) solver and the discrete duality identity.

The adjoint of the dG(0) state discretization marches the same slab systems
backward: (M + k_m S) z_m = M z_{m+1} + G_m with z_{M+1} = 0 and tracking
load G_m = int_{I_m} (u_kh - u_d, phi_i), u_kh = w + q.  Because the slab
matrices are symmetric, the backward sweep is the exact transpose of the
forward sweep, which is what the identity check exercises.
"""

from __future__ import annotations

import numpy as np

from .forward import _checked_solve, solve_state_sensitivity
from .spaces import AdjointField, ControlField


def sweep_backward(disc, slab_rhs):
    """March the slab systems backward; slab_rhs has shape (M, ni)."""
    mesh = disc.mesh
    steps = mesh.time_partition.steps
    out = np.empty((mesh.num_slabs, mesh.num_interior))
    nxt = np.zeros(mesh.num_interior)
    for m in reversed(range(mesh.num_slabs)):
        rhs = disc.mass_ii @ nxt + slab_rhs[m]
        out[m] = _checked_solve(disc, steps[m], rhs, m + 1)
        nxt = out[m]
    return out


def tracking_slabs(disc, state_values, control_values, u_d):
    """Slab loads int_{I_m} (w + q - u_d, phi_i); (M, ni)."""
    mesh = disc.mesh
    k = mesh.time_partition.steps
    out = k[:, None] * (disc.mass_ii @ state_values.T).T
    if control_values is not None:
        M = mesh.num_slabs
        pad = np.zeros((M + 1, mesh.num_nodes))
        pad[1:M] = control_values
        out += 0.5 * k[:, None] * (disc.mass_if @ (pad[:-1] + pad[1:]).T).T
    if u_d is not None:
        from .assembly import spatial_load_vector

        tri = mesh.triangulation
        for m in range(mesh.num_slabs):
            tq, wq = disc.slab_time_rule(m)
            for t, w in zip(tq, wq):
                out[m] -= w * spatial_load_vector(tri, u_d, t, disc.tri_rule)[
                    disc.interior
                ]
    return out


def solve_adjoint(disc, state, control=None, u_d=None):
    """Solve the adjoint equation with tracking data u_kh - u_d."""
    cv = control.values if control is not None else None
    rhs = tracking_slabs(disc, state.values, cv, u_d)
    return AdjointField(disc.mesh, sweep_backward(disc, rhs))


def adjoint_identity_check(disc, seed=0):
    """Discrepancy of the forward/backward duality for random data.

    Draws a control perturbation dq and a state-type tracking field g, and
    returns |<s, g>_I + sum_m C_m(dq)^T z_m| where s is the state sensitivity
    of dq and z the backward sweep of g's tracking load.  Exact transposition
    makes this vanish to rounding."""
    rng = np.random.default_rng(seed)
    mesh = disc.mesh
    dq = ControlField(
        mesh, rng.standard_normal((mesh.num_control_levels, mesh.num_nodes))
    )
    g = rng.standard_normal((mesh.num_slabs, mesh.num_interior))

    s = solve_state_sensitivity(disc, dq)
    k = mesh.time_partition.steps
    inner = float(
        np.sum(k[:, None] * g * (disc.mass_ii @ s.values.T).T)
    )
    z = sweep_backward(disc, k[:, None] * (disc.mass_ii @ g.T).T)
    pairing = float(np.sum(disc.coupling_all(dq.values) * z))
    return abs(inner + pairing)
