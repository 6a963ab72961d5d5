"""Manufactured benchmark with a known optimal triple, energy-norm errors,
and the convergence-study driver.

The built-in case optimizes a tracking objective whose exact optimal state,
adjoint and boundary control are closed-form polynomials-times-exponentials
on the unit square with T = 1.  The shifted regularizer |q - q_d| with
q_d equal to the exact control makes that triple optimal while keeping the
box constraints partially active, so the study exercises the full
variational-inequality path.  Errors are measured in the norms the estimates
are stated in: spatial energy norm for state and adjoint, full space-time
H1 seminorm for the control, against the combined parameter
sigma = sqrt(h^2 + k^2).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import Discretization, gauss_interval, reference_triangle_rule
from .mesh import SpaceTimeMesh, uniform_time_partition, unit_square_mesh
from .optimizer import PdasNonconvergence, ReducedProblem, pdas_solve
from .forward import SolverError
from .spaces import BoundSet

log = logging.getLogger("dbc.study")


class MeshMismatchError(ValueError):
    """Fields passed to an error norm live on a different mesh."""


@dataclass
class ManufacturedCase:
    """Closed-form optimal triple plus the data that produces it.

    All callables are vectorized over x and y (numpy arrays) with scalar t;
    gradients return (d/dx, d/dy) tuples.  ``initial`` may be None when the
    exact initial state vanishes."""

    name: str
    lam: float
    q_a: float
    q_b: float
    state: Callable
    state_grad: Callable
    adjoint: Callable
    adjoint_grad: Callable
    control: Callable
    control_t: Callable
    control_grad: Callable
    source: Callable
    target: Callable
    control_shift: Optional[Callable]
    initial: Optional[Callable] = None
    control_boundary: Optional[Callable] = None
    """Predicate (x, y) -> bool mask selecting the boundary vertices that
    carry the box constraints; the other boundary vertices are held at zero.
    None means the whole spatial boundary is box-constrained."""


def _u(x, y, t):
    return x * (1.0 - x) * np.exp(y) * (1.0 - y) * t * (1.0 - t)


def _u_t(x, y, t):
    return x * (1.0 - x) * np.exp(y) * (1.0 - y) * (1.0 - 2.0 * t)


def _u_grad(x, y, t):
    tau = t * (1.0 - t)
    ux = (1.0 - 2.0 * x) * np.exp(y) * (1.0 - y) * tau
    uy = -x * (1.0 - x) * y * np.exp(y) * tau
    return ux, uy


def _f(x, y, t):
    # du/dt - Laplace u for _u; d2/dy2 of exp(y)(1-y) is -(1+y)exp(y).
    tau = t * (1.0 - t)
    ey = np.exp(y)
    return ey * (
        x * (1.0 - x) * (1.0 - y) * (1.0 - 2.0 * t)
        + (2.0 * (1.0 - y) + x * (1.0 - x) * (1.0 + y)) * tau
    )


def _phi(x, y, t):
    return (x * x - x**3) * (y * y - y**3) * t * (1.0 - t)


def _phi_grad(x, y, t):
    tau = t * (1.0 - t)
    px = (2.0 * x - 3.0 * x * x) * (y * y - y**3) * tau
    py = (x * x - x**3) * (2.0 * y - 3.0 * y * y) * tau
    return px, py


def _u_target(x, y, t):
    # u + d(phi)/dt + Laplace(phi): the adjoint equation then holds exactly.
    tau = t * (1.0 - t)
    a = x * x - x**3
    b = y * y - y**3
    lap = (2.0 - 6.0 * x) * b + a * (2.0 - 6.0 * y)
    return _u(x, y, t) + a * b * (1.0 - 2.0 * t) + lap * tau


def _bottom_edge(x, y):
    # Open bottom edge of the unit square: corners belong to the
    # homogeneous part of the boundary.
    return (y == 0.0) & (x > 0.0) & (x < 1.0)


def bump_case():
    """The bundled benchmark: lam = 1e-3, bounds [0, 0.8], exact control
    equal to the exact state (a smooth bump vanishing on three sides),
    controlled from the bottom edge of the square."""
    return ManufacturedCase(
        name="bump",
        lam=1e-3,
        q_a=0.0,
        q_b=0.8,
        state=_u,
        state_grad=_u_grad,
        adjoint=_phi,
        adjoint_grad=_phi_grad,
        control=_u,
        control_t=_u_t,
        control_grad=_u_grad,
        source=_f,
        target=_u_target,
        control_shift=_u,
        initial=None,  # _u(x, y, 0) = 0
        control_boundary=_bottom_edge,
    )


CASES = {"bump": bump_case}


# -- energy-norm errors ------------------------------------------------------


def _check_same_mesh(disc, *fields):
    for f in fields:
        if f is not None and f.mesh is not disc.mesh:
            raise MeshMismatchError("field mesh differs from the discretization")


def _quad_setup(disc, quad_degree, time_points):
    rule = (
        disc.tri_rule
        if quad_degree is None
        else reference_triangle_rule(quad_degree)
    )
    tqn = disc.time_quad_points if time_points is None else time_points
    return rule, tqn


def _triangle_points(tri, lam):
    v = tri.vertices
    t = tri.triangles
    px = lam[0] * v[t[:, 0], 0] + lam[1] * v[t[:, 1], 0] + lam[2] * v[t[:, 2], 0]
    py = lam[0] * v[t[:, 0], 1] + lam[1] * v[t[:, 1], 1] + lam[2] * v[t[:, 2], 1]
    return px, py


def energy_error_state(disc, case, state, control=None, quad_degree=None,
                       time_points=None):
    """|| grad(u_exact - (w + q)) || over the space-time cylinder."""
    _check_same_mesh(disc, state, control)
    rule, tqn = _quad_setup(disc, quad_degree, time_points)
    return _grad_error(disc, case.state_grad, state.full_values(),
                       control.padded_values() if control is not None else None,
                       rule, tqn)


def energy_error_adjoint(disc, case, adjoint, quad_degree=None, time_points=None):
    """|| grad(z_exact - z_kh) || over the space-time cylinder."""
    _check_same_mesh(disc, adjoint)
    rule, tqn = _quad_setup(disc, quad_degree, time_points)
    return _grad_error(disc, case.adjoint_grad, adjoint.full_values(), None,
                       rule, tqn)


def _grad_error(disc, grad_exact, slab_full, control_pad, rule, tqn):
    mesh = disc.mesh
    tri = mesh.triangulation
    tt = tri.triangles
    pts = mesh.time_partition.points
    bary, ws = rule
    total = 0.0
    for m in range(mesh.num_slabs):
        k = pts[m + 1] - pts[m]
        tq, wq = gauss_interval(tqn, pts[m], pts[m + 1])
        for t, wt in zip(tq, wq):
            nodal = slab_full[m].copy()
            if control_pad is not None:
                lo = (pts[m + 1] - t) / k
                hi = (t - pts[m]) / k
                nodal += lo * control_pad[m] + hi * control_pad[m + 1]
            coef = nodal[tt]
            gx = np.einsum("ti,ti->t", coef, disc.grads[:, :, 0])
            gy = np.einsum("ti,ti->t", coef, disc.grads[:, :, 1])
            for lam, w in zip(bary, ws):
                px, py = _triangle_points(tri, lam)
                ex, ey = grad_exact(px, py, t)
                dx = ex - gx
                dy = ey - gy
                total += wt * w * float(disc.areas @ (dx * dx + dy * dy))
    return math.sqrt(total)


def control_error(disc, case, control, quad_degree=None, time_points=None):
    """Space-time H1 seminorm of q_exact - q_sigma."""
    _check_same_mesh(disc, control)
    rule, tqn = _quad_setup(disc, quad_degree, time_points)
    mesh = disc.mesh
    tri = mesh.triangulation
    tt = tri.triangles
    pts = mesh.time_partition.points
    pad = control.padded_values()
    bary, ws = rule
    total = 0.0
    for m in range(mesh.num_slabs):
        k = pts[m + 1] - pts[m]
        dt_nodal = (pad[m + 1] - pad[m]) / k
        dt_coef = dt_nodal[tt]
        tq, wq = gauss_interval(tqn, pts[m], pts[m + 1])
        for t, wt in zip(tq, wq):
            lo = (pts[m + 1] - t) / k
            hi = (t - pts[m]) / k
            nodal = lo * pad[m] + hi * pad[m + 1]
            coef = nodal[tt]
            gx = np.einsum("ti,ti->t", coef, disc.grads[:, :, 0])
            gy = np.einsum("ti,ti->t", coef, disc.grads[:, :, 1])
            for lam, w in zip(bary, ws):
                px, py = _triangle_points(tri, lam)
                dval = (
                    lam[0] * dt_coef[:, 0]
                    + lam[1] * dt_coef[:, 1]
                    + lam[2] * dt_coef[:, 2]
                )
                dt_err = case.control_t(px, py, t) - dval
                ex, ey = case.control_grad(px, py, t)
                dx = ex - gx
                dy = ey - gy
                total += wt * w * float(
                    disc.areas @ (dt_err * dt_err + dx * dx + dy * dy)
                )
    return math.sqrt(total)


# -- convergence study -------------------------------------------------------


def eoc(errors, parameters):
    """Experimental order of convergence between consecutive levels.

    rate_l = log(e_l / e_{l-1}) / log(p_l / p_{l-1}); the first entry is None.
    """
    out = [None]
    for i in range(1, len(errors)):
        out.append(
            math.log(errors[i] / errors[i - 1])
            / math.log(parameters[i] / parameters[i - 1])
        )
    return out


@dataclass
class LevelRecord:
    n: int
    M: int
    h: float
    k: float
    sigma: float
    err_state: float
    err_adjoint: float
    err_control: float
    kkt: dict = field(default_factory=dict)


@dataclass
class StudyReport:
    case_name: str
    records: list
    rate_state_h: list = field(default_factory=list)
    rate_adjoint_h: list = field(default_factory=list)
    rate_state_k: list = field(default_factory=list)
    rate_adjoint_k: list = field(default_factory=list)
    rate_control_sigma: list = field(default_factory=list)
    failure: Optional[str] = None

    def compute_rates(self):
        hs = [r.h for r in self.records]
        ks = [r.k for r in self.records]
        sig = [r.sigma for r in self.records]
        es = [r.err_state for r in self.records]
        ea = [r.err_adjoint for r in self.records]
        ec = [r.err_control for r in self.records]
        if self.records:
            self.rate_state_h = eoc(es, hs)
            self.rate_adjoint_h = eoc(ea, hs)
            self.rate_state_k = eoc(es, ks)
            self.rate_adjoint_k = eoc(ea, ks)
            self.rate_control_sigma = eoc(ec, sig)

    def write_csv(self, path):
        def num(x):
            return f"{x:.8g}"

        def rate(x):
            return "" if x is None else f"{x:.8g}"

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["n", "M", "h", "k", "sigma", "err_state", "rate_state",
                 "err_adjoint", "rate_adjoint", "err_control", "rate_control"]
            )
            for i, r in enumerate(self.records):
                writer.writerow(
                    [r.n, r.M, num(r.h), num(r.k), num(r.sigma),
                     num(r.err_state), rate(self.rate_state_h[i]),
                     num(r.err_adjoint), rate(self.rate_adjoint_h[i]),
                     num(r.err_control), rate(self.rate_control_sigma[i])]
                )

    def as_dict(self):
        return {
            "case": self.case_name,
            "failure": self.failure,
            "levels": [
                {
                    "n": r.n,
                    "M": r.M,
                    "h": r.h,
                    "k": r.k,
                    "sigma": r.sigma,
                    "err_state": r.err_state,
                    "err_adjoint": r.err_adjoint,
                    "err_control": r.err_control,
                    "kkt": r.kkt,
                }
                for r in self.records
            ],
            "rates": {
                "state_h": self.rate_state_h,
                "adjoint_h": self.rate_adjoint_h,
                "state_k": self.rate_state_k,
                "adjoint_k": self.rate_adjoint_k,
                "control_sigma": self.rate_control_sigma,
            },
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_space_time_mesh(n, M, final_time=1.0):
    return SpaceTimeMesh(
        unit_square_mesh(n), uniform_time_partition(M, final_time)
    )


def setup_problem(n, M, case, quad_degree=4):
    """Discretization + reduced problem for one level of a case."""
    mesh = build_space_time_mesh(n, M)
    disc = Discretization(mesh, quad_degree=quad_degree)
    bounds = BoundSet(mesh, case.q_a, case.q_b, control_nodes=case.control_boundary)
    problem = ReducedProblem(
        disc,
        case.lam,
        bounds,
        f=case.source,
        u0=case.initial,
        u_d=case.target,
        q_d=case.control_shift,
    )
    return problem


def _study_level(args):
    n, M, case, tol, max_outer, quad_degree = args
    problem = setup_problem(n, M, case, quad_degree)
    disc = problem.disc
    result = pdas_solve(problem, tol=tol, max_outer=max_outer)
    record = LevelRecord(
        n=n,
        M=M,
        h=disc.mesh.width,
        k=disc.mesh.time_partition.k,
        sigma=disc.mesh.sigma,
        err_state=energy_error_state(disc, case, result.state, result.control),
        err_adjoint=energy_error_adjoint(disc, case, result.adjoint),
        err_control=control_error(disc, case, result.control),
        kkt=result.diagnostics.as_dict(),
    )
    return record


def run_study(levels, case, tol=1e-9, max_outer=50, jobs=1, quad_degree=4):
    """Solve every (n, M) level and collect errors, rates and diagnostics.

    A solver failure stops the study; the report keeps the completed levels
    and carries the failure message."""
    levels = list(levels)
    report = StudyReport(case_name=case.name, records=[])
    tasks = [(n, M, case, tol, max_outer, quad_degree) for (n, M) in levels]
    try:
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for record in pool.map(_study_level, tasks):
                    report.records.append(record)
                    log.info("level n=%d M=%d done", record.n, record.M)
        else:
            for task in tasks:
                record = _study_level(task)
                report.records.append(record)
                log.info("level n=%d M=%d done", record.n, record.M)
    except (PdasNonconvergence, SolverError) as err:
        done = len(report.records)
        n, M = levels[done] if done < len(levels) else (-1, -1)
        report.failure = f"level (n={n}, M={M}): {err}"
        log.error("study aborted: %s", report.failure)
    report.compute_rates()
    return report
