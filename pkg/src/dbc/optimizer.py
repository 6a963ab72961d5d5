"""Reduced-space optimization: gradient, Hessian action, and the
primal-dual active set (PDAS) solver for box-constrained boundary control.

The reduced objective is j(q) = 1/2 ||u(q) - u_d||^2 + lam/2 |q - q_d|_1^2
with u(q) = w(q) + q the affine discrete state map.  The optimization
unknowns are the control's boundary-trace DOFs: interior-vertex DOFs carry
no constraint and at any optimum must be stationary for the regularizer
(the misfit sees only the state, and the state equation is driven by the
control as data), so they are eliminated exactly by the minimal-seminorm
extension about q_d.  That leaves a dense-free quadratic in the trace
values q = E v + anchor, with grad j = H v - b constant-shifted, which the
PDAS loop exploits: every outer iteration costs two Hessian applications
plus a warm-started CG solve on the inactive set, preconditioned by the
diagonal of lam * seminorm (restricted to the trace).

Full-space gradient and Hessian actions (the variational-inequality form
on the whole prismatic control space) remain available as
``reduced_gradient`` / ``hessian_vec``; the trace machinery composes them
with the extension and its transpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adjoint import sweep_backward, tracking_slabs
from .assembly import EnergyExtension
from .forward import sweep_forward
from .spaces import AdjointField, ControlField, StateField, interpolate_control

log = logging.getLogger("dbc.optimizer")


class CGBreakdownError(RuntimeError):
    """Conjugate gradients lost positive definiteness or stalled."""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} CG iterations)")
        self.iterations = iterations


class PdasNonconvergence(RuntimeError):
    """Active sets failed to settle within the outer iteration budget."""

    def __init__(self, diagnostics):
        super().__init__(
            f"PDAS did not converge in {diagnostics.outer_iterations} outer "
            f"iterations (stationarity {diagnostics.stationarity:.3e}, "
            f"complementarity {diagnostics.complementarity:.3e})"
        )
        self.diagnostics = diagnostics


@dataclass
class KKTDiagnostics:
    """Residuals of the discrete optimality system at the returned control.

    All residuals are nonnegative maxima over DOFs: stationarity over the
    inactive DOFs, complementarity as the wrong-sign multiplier magnitude on
    the active sets, infeasibility as the bound violation."""

    stationarity: float
    complementarity: float
    infeasibility: float
    num_lower_active: int
    num_upper_active: int
    outer_iterations: int
    cg_iterations: int
    objective_history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "stationarity": self.stationarity,
            "complementarity": self.complementarity,
            "infeasibility": self.infeasibility,
            "num_lower_active": self.num_lower_active,
            "num_upper_active": self.num_upper_active,
            "outer_iterations": self.outer_iterations,
            "cg_iterations": self.cg_iterations,
            "objective_history": list(self.objective_history),
        }


@dataclass
class MultiplierField:
    """Discrete multiplier: gradient values on the constrained DOFs, indexed
    into the flat control vector."""

    dof_indices: np.ndarray
    values: np.ndarray


@dataclass
class PdasResult:
    control: ControlField
    adjoint: AdjointField
    state: StateField
    diagnostics: KKTDiagnostics
    multiplier: MultiplierField


class ReducedProblem:
    """Precomputed reduced problem on one discretization.

    Two layers share the sweeps.  The full-space layer (``hessian_apply``,
    ``full_gradient``) realizes the quadratic in all prismatic control DOFs
    and backs the variational-inequality checks.  The trace layer eliminates
    the unconstrained DOFs: boundary vertices outside the control boundary
    are pinned to zero, interior vertices follow the trace through the
    minimal-seminorm extension anchored at q_d, and the optimization runs in
    the remaining trace unknowns v with q = extend(v).  ``trace_dim``,
    ``trace_b`` and ``trace_hessian`` describe that quadratic; ``dim`` stays
    the full control-space dimension."""

    def __init__(self, disc, lam, bounds, f=None, u0=None, u_d=None, q_d=None):
        if not lam > 0:
            raise ValueError(f"regularization parameter must be positive, got {lam}")
        self.disc = disc
        self.lam = float(lam)
        self.bounds = bounds
        self.u_d = u_d
        mesh = disc.mesh
        self.dim = mesh.num_control_levels * mesh.num_nodes

        self._source = disc.source_slabs(f)
        self._w0 = disc.project_initial(u0)
        self.state_base = sweep_forward(disc, self._source, self._w0)
        self.adjoint_base = sweep_backward(
            disc, tracking_slabs(disc, self.state_base, None, u_d)
        )
        self._target_pairing = disc.control_pairing(u_d).ravel()
        if q_d is not None:
            self.q_shift = interpolate_control(mesh, q_d).ravel()
        else:
            self.q_shift = np.zeros(self.dim)

        grad0 = (
            -self.lam * (disc.seminorm @ self.q_shift)
            - disc.coupling_transpose(self.adjoint_base).ravel()
            + disc.pair_state_control(self.state_base).ravel()
            - self._target_pairing
        )
        self.b = -grad0

        # Trace layer: index split, extension solver, anchored affine map.
        levels = mesh.num_control_levels
        interior = ~mesh.triangulation.boundary_vertex_flags
        self.trace_indices = bounds.constrained_indices
        self.pinned_indices = bounds.fixed_indices
        self.interior_indices = np.flatnonzero(np.tile(interior, (levels, 1)).ravel())
        self.trace_dim = len(self.trace_indices)
        self.extension = EnergyExtension(disc)
        A = disc.seminorm.tocsr()
        self._A_interior_rows = A[self.interior_indices]
        self._A_interior_trace = self._A_interior_rows[:, self.trace_indices].tocsr()
        self._num_interior = len(np.flatnonzero(interior))

        self.anchor = self.extend(np.zeros(self.trace_dim))
        anchor_h, sens, second = self.hessian_apply(self.anchor, want_fields=True)
        self.state_anchor = self.state_base + sens
        self.adjoint_anchor = self.adjoint_base + second
        self.trace_b = self.restrict_gradient(self.b - anchor_h)
        self.objective_at_anchor = self.objective(
            ControlField.from_flat(mesh, self.anchor)
        )

    # -- full-space layer ----------------------------------------------------

    def hessian_apply(self, flat, want_fields=False):
        """Full-space H v via one sensitivity and one second-adjoint sweep."""
        disc = self.disc
        mesh = disc.mesh
        values = flat.reshape(mesh.num_control_levels, mesh.num_nodes)
        sens = sweep_forward(disc, -disc.coupling_all(values))
        second = sweep_backward(disc, tracking_slabs(disc, sens, values, None))
        out = self.lam * (disc.seminorm @ flat)
        out += disc.control_mass @ flat
        out += disc.pair_state_control(sens).ravel()
        out -= disc.coupling_transpose(second).ravel()
        if want_fields:
            return out, sens, second
        return out

    def full_gradient(self, flat):
        """Full-space grad j(q) = H q - b, plus the state/adjoint at q."""
        hq, sens, second = self.hessian_apply(flat, want_fields=True)
        return hq - self.b, self.state_base + sens, self.adjoint_base + second

    # -- trace layer -----------------------------------------------------------

    def _interior_solve(self, rhs_flat):
        levels = self.disc.mesh.num_control_levels
        return self.extension.solve(
            rhs_flat.reshape(levels, self._num_interior)
        ).ravel()

    def extend(self, trace_values):
        """Full control vector for trace unknowns v: pinned DOFs zero,
        interior DOFs at the minimal-seminorm extension about q_d."""
        q = np.zeros(self.dim)
        q[self.trace_indices] = trace_values
        offset = q - self.q_shift
        offset[self.interior_indices] = 0.0
        rhs = -(self._A_interior_rows @ offset)
        q[self.interior_indices] = (
            self.q_shift[self.interior_indices] + self._interior_solve(rhs)
        )
        return q

    def extend_direction(self, trace_values):
        """Homogeneous extension (the linear part of ``extend``)."""
        q = np.zeros(self.dim)
        q[self.trace_indices] = trace_values
        rhs = -(self._A_interior_rows @ q)
        q[self.interior_indices] = self._interior_solve(rhs)
        return q

    def restrict_gradient(self, full_grad):
        """Transpose of ``extend_direction``: trace components of a gradient."""
        lifted = self._interior_solve(full_grad[self.interior_indices])
        return full_grad[self.trace_indices] - self._A_interior_trace.T @ lifted

    def trace_hessian(self, trace_values, want_fields=False):
        """Reduced Hessian E^T H E applied to trace unknowns."""
        full = self.hessian_apply(
            self.extend_direction(trace_values), want_fields=want_fields
        )
        if want_fields:
            out, sens, second = full
            return self.restrict_gradient(out), sens, second
        return self.restrict_gradient(full)

    def trace_seminorm(self, trace_values):
        """E^T A E applied to trace unknowns (the reduced seminorm)."""
        return self.restrict_gradient(
            self.disc.seminorm @ self.extend_direction(trace_values)
        )

    def trace_gradient(self, trace_values):
        """Trace-space grad j(v) = H_t v - b_t, plus the state/adjoint."""
        hv, sens, second = self.trace_hessian(trace_values, want_fields=True)
        return (
            hv - self.trace_b,
            self.state_anchor + sens,
            self.adjoint_anchor + second,
        )

    def objective(self, control):
        """j(q) by an actual forward solve and space-time quadrature.

        Accepts a full ControlField, or a trace vector which is extended
        first.  Deliberately independent of the gradient path so
        finite-difference checks of the gradient test the adjoint, not a
        shared shortcut."""
        if isinstance(control, ControlField):
            values = control.values
        else:
            flat = np.asarray(control, dtype=float).ravel()
            if flat.size != self.trace_dim:
                raise ValueError(
                    f"expected a ControlField or a trace vector of length "
                    f"{self.trace_dim}, got length {flat.size}"
                )
            values = self.extend(flat).reshape(
                self.disc.mesh.num_control_levels, self.disc.mesh.num_nodes
            )
        rhs = self._source - self.disc.coupling_all(values)
        w = sweep_forward(self.disc, rhs, self._w0)
        misfit = self.disc.misfit_quadrature(w, values, self.u_d)
        dq = values.ravel() - self.q_shift
        return 0.5 * misfit + 0.5 * self.lam * float(dq @ (self.disc.seminorm @ dq))

    def _quadratic_objective(self, trace_values, trace_hessian_values):
        return (
            0.5 * float(trace_values @ trace_hessian_values)
            - float(self.trace_b @ trace_values)
            + self.objective_at_anchor
        )


def reduced_gradient(problem, control):
    """Full-space gradient of the reduced objective as a ControlField."""
    g, _, _ = problem.full_gradient(control.ravel())
    return ControlField.from_flat(problem.disc.mesh, g)


def hessian_vec(problem, delta):
    """Full-space reduced Hessian applied to a direction, as a ControlField."""
    return ControlField.from_flat(
        problem.disc.mesh, problem.hessian_apply(delta.ravel())
    )


def _pcg(apply_op, rhs, precond_diag, rel_tol, max_iter):
    """Preconditioned CG from the zero start; returns (x, iterations).

    Stops when the residual norm falls below rel_tol times the initial
    residual norm (plus a tiny absolute floor for already-converged calls)."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    norm0 = np.linalg.norm(r)
    target = rel_tol * norm0 + 1e-300
    if norm0 == 0.0:
        return x, 0
    z = r / precond_diag
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        hp = apply_op(p)
        php = float(p @ hp)
        if php <= 0.0:
            raise CGBreakdownError("curvature lost positive definiteness", it)
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        if np.linalg.norm(r) <= target:
            return x, it
        z = r / precond_diag
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    raise CGBreakdownError(
        f"residual {np.linalg.norm(r):.3e} above target {target:.3e}", max_iter
    )


def pdas_solve(
    problem,
    q_init=None,
    tol=1e-9,
    max_outer=50,
    cg_tol=None,
    active_set_scale=None,
):
    """Primal-dual active set solve of the box-constrained reduced problem.

    Every optimization unknown is a box-constrained trace DOF.  The
    multiplier estimate is the trace gradient; a DOF joins the lower/upper
    active set when v - mu/c falls strictly outside the bounds (ties stay
    inactive), with c = lam by default.  Active DOFs are fixed at their
    bound and the remaining inactive block is solved matrix-free by
    preconditioned CG.  Convergence is declared when the active sets repeat
    and the stationarity and complementarity residuals are below tol.

    The fixed points of the set update are the KKT points for every c > 0,
    but small c classifies aggressively far from the solution and can cycle
    (the indicator swings DOFs bound-to-bound).  When an active-set pair
    recurs without convergence the scale is raised tenfold and the iterate
    reclassified; this breaks cycles without changing the solution."""
    if cg_tol is None:
        cg_tol = min(1e-10, 1e-2 * tol)
    c = problem.lam if active_set_scale is None else float(active_set_scale)
    bounds = problem.bounds
    mesh = problem.disc.mesh
    qa, qb = bounds.lower, bounds.upper
    dim = problem.trace_dim
    precond = (
        problem.lam * problem.disc.seminorm.diagonal()[problem.trace_indices]
    )

    if q_init is None:
        v = np.zeros(dim)
    else:
        flat = q_init.ravel() if isinstance(q_init, ControlField) else (
            np.asarray(q_init, dtype=float).ravel()
        )
        if flat.size == problem.dim:
            flat = flat[problem.trace_indices]
        v = np.clip(flat, qa, qb)

    lower_prev = None
    upper_prev = None
    solves = 0
    total_cg = 0
    history = []
    seen_sets = set()

    for _ in range(max_outer + 1):
        hv, sens, second = problem.trace_hessian(v, want_fields=True)
        mu = hv - problem.trace_b
        while True:
            indicator = v - mu / c
            lower = indicator < qa
            upper = indicator > qb
            key = (lower.tobytes(), upper.tobytes())
            stable_now = (
                lower_prev is not None
                and np.array_equal(lower, lower_prev)
                and np.array_equal(upper, upper_prev)
            )
            if stable_now or key not in seen_sets:
                seen_sets.add(key)
                break
            if c > 1e12 / max(problem.lam, 1.0):
                break
            c *= 10.0
            seen_sets.clear()
            log.info("pdas revisited an active-set pair; raising scale to %.3e", c)
        inactive = ~(lower | upper)

        stationarity = float(np.abs(mu[inactive]).max(initial=0.0))
        complementarity = 0.0
        if lower.any():
            complementarity = max(complementarity, float((-mu[lower]).max()))
        if upper.any():
            complementarity = max(complementarity, float(mu[upper].max()))
        complementarity = max(complementarity, 0.0)
        infeasibility = max(
            0.0,
            float((qa - v).max(initial=0.0)),
            float((v - qb).max(initial=0.0)),
        )
        history.append(problem._quadratic_objective(v, hv))

        diagnostics = KKTDiagnostics(
            stationarity=stationarity,
            complementarity=complementarity,
            infeasibility=infeasibility,
            num_lower_active=int(lower.sum()),
            num_upper_active=int(upper.sum()),
            outer_iterations=solves,
            cg_iterations=total_cg,
            objective_history=history,
        )
        log.info(
            "pdas outer=%d lower=%d upper=%d stat=%.3e comp=%.3e cg=%d j=%.9e",
            solves,
            diagnostics.num_lower_active,
            diagnostics.num_upper_active,
            stationarity,
            complementarity,
            total_cg,
            history[-1],
        )

        sets_stable = (
            lower_prev is not None
            and np.array_equal(lower, lower_prev)
            and np.array_equal(upper, upper_prev)
        )
        if sets_stable and stationarity < tol and complementarity < tol:
            control = ControlField.from_flat(mesh, problem.extend(v))
            state = StateField(mesh, problem.state_anchor + sens)
            adjoint = AdjointField(mesh, problem.adjoint_anchor + second)
            multiplier = MultiplierField(problem.trace_indices.copy(), mu.copy())
            return PdasResult(control, adjoint, state, diagnostics, multiplier)

        if solves >= max_outer:
            raise PdasNonconvergence(diagnostics)

        v[lower] = qa
        v[upper] = qb
        defect = problem.trace_b - problem.trace_hessian(v)
        ii = np.flatnonzero(inactive)

        def op(x_inactive):
            d = np.zeros(dim)
            d[ii] = x_inactive
            return problem.trace_hessian(d)[ii]

        delta, iters = _pcg(
            op,
            defect[ii],
            precond[ii],
            cg_tol,
            max_iter=min(dim + 10, 30_000),
        )
        v[ii] += delta
        total_cg += iters
        solves += 1
        lower_prev, upper_prev = lower, upper

    raise AssertionError("unreachable")
