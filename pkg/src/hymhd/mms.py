"""Manufactured solutions, forcing synthesis, error norms, EOC, diagnostics."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .hybrid import HybridSpace, HybridVectorField
from .mesh import Mesh, compute_geometry
from .solver import (Problem, SolverConfig, Trajectory, assemble_coupling,
                     assemble_vector_gram)

TWO_PI = 2.0 * np.pi


class ExactSolution2D:
    """The decaying trigonometric solution on the unit square.

    u = -e^{-t/2} (sin 2pi x sin 2pi y, cos 2pi x cos 2pi y)
    b = -e^{-t/2} (cos 2pi x cos 2pi y, sin 2pi x sin 2pi y)
    p =  e^{-t/2} sin 2pi x cos 2pi y
    r =  e^{-t/2} cos 2pi x sin 2pi y

    Both vector fields are divergence-free for every t; all first and second
    space derivatives and the time derivatives are available in closed form.
    """

    @staticmethod
    def _trig(X):
        x, y = X[..., 0], X[..., 1]
        return (np.sin(TWO_PI * x), np.cos(TWO_PI * x),
                np.sin(TWO_PI * y), np.cos(TWO_PI * y))

    @staticmethod
    def _decay(t):
        return np.exp(-0.5 * t)

    def u(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return -self._decay(t) * np.stack([sx * sy, cx * cy], axis=-1)

    def b(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return -self._decay(t) * np.stack([cx * cy, sx * sy], axis=-1)

    def p(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return self._decay(t) * sx * cy

    def r(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return self._decay(t) * cx * sy

    def du_dt(self, t, X):
        return -0.5 * self.u(t, X)

    def db_dt(self, t, X):
        return -0.5 * self.b(t, X)

    def grad_u(self, t, X):
        """(..., 2, 2) with entry [c, d] = d_d u_c."""
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        E = self._decay(t) * TWO_PI
        return -E * np.stack([
            np.stack([cx * sy, sx * cy], axis=-1),
            np.stack([-sx * cy, -cx * sy], axis=-1)], axis=-2)

    def grad_b(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        E = self._decay(t) * TWO_PI
        return -E * np.stack([
            np.stack([-sx * cy, -cx * sy], axis=-1),
            np.stack([cx * sy, sx * cy], axis=-1)], axis=-2)

    def lap_u(self, t, X):
        return -2.0 * TWO_PI**2 * self.u(t, X)

    def lap_b(self, t, X):
        return -2.0 * TWO_PI**2 * self.b(t, X)

    def grad_p(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return self._decay(t) * TWO_PI * np.stack([cx * cy, -sx * sy], axis=-1)

    def grad_r(self, t, X):
        sx, cx, sy, cy = self._trig(np.asarray(X, dtype=float))
        return self._decay(t) * TWO_PI * np.stack([-sx * sy, cx * cy], axis=-1)


def forcing_terms_2d(nu: float, mu: float, exact: ExactSolution2D | None = None):
    """Closed-form (f, g) making `exact` solve the modified MHD system.

    f = du/dt - nu lap(u) + (u.grad)u - (b.grad)b + grad p and the analogous
    g with mu, the roles of u and b swapped in the transport terms, and
    grad r.  The cross products collapse to single-harmonic terms.
    """
    ex = exact or ExactSolution2D()

    def f(t, X):
        X = np.asarray(X, dtype=float)
        sx, cx, sy, cy = ExactSolution2D._trig(X)
        E = ExactSolution2D._decay(t)
        lead = (0.5 - 2.0 * TWO_PI**2 * nu) * E
        out = lead * np.stack([sx * sy, cx * cy], axis=-1)
        out += 4.0 * np.pi * E * E * np.stack([sx * cx, -sy * cy], axis=-1)
        out += TWO_PI * E * np.stack([cx * cy, -sx * sy], axis=-1)
        return out

    def g(t, X):
        X = np.asarray(X, dtype=float)
        sx, cx, sy, cy = ExactSolution2D._trig(X)
        E = ExactSolution2D._decay(t)
        lead = (0.5 - 2.0 * TWO_PI**2 * mu) * E
        out = lead * np.stack([cx * cy, sx * sy], axis=-1)
        out += 4.0 * np.pi * E * E * np.stack([-sy * cy, sx * cx], axis=-1)
        out += TWO_PI * E * np.stack([-sx * sy, cx * cy], axis=-1)
        return out

    return f, g


def manufactured_problem(nu: float, mu: float) -> Problem:
    """The full Problem record of the 2D manufactured test."""
    ex = ExactSolution2D()
    f, g = forcing_terms_2d(nu, mu, ex)
    return Problem(forcing_u=f, forcing_b=g,
                   initial_u=lambda X: ex.u(0.0, X),
                   initial_b=lambda X: ex.b(0.0, X),
                   dirichlet_u=ex.u, dirichlet_b=ex.b)


@dataclass
class ErrorReport:
    """Energy-norm error of a trajectory against the exact solution."""

    energy_error: float
    max_u_sq: float
    max_b_sq: float
    visc_u_sq: float
    visc_b_sq: float
    jump_u_sq: float
    jump_b_sq: float
    h: float
    num_dofs: int
    wall_time: float
    pressure_l2: float
    magnetic_pressure_l2: float

    def components_sq(self):
        return (self.max_u_sq, self.max_b_sq, self.visc_u_sq, self.visc_b_sq,
                self.jump_u_sq, self.jump_b_sq)


def _field_difference(a: HybridVectorField, interp: HybridVectorField
                      ) -> HybridVectorField:
    return HybridVectorField(a.k, a.elem - interp.elem, a.face - interp.face,
                             homogeneous_bc=True)


def _average_fields(a: HybridVectorField, b: HybridVectorField
                    ) -> HybridVectorField:
    return HybridVectorField(a.k, 0.5 * (a.elem + b.elem),
                             0.5 * (a.face + b.face), homogeneous_bc=True)


def energy_error(traj: Trajectory, exact: ExactSolution2D,
                 config: SolverConfig) -> ErrorReport:
    """Discrete-grid energy error against the interpolated exact solution.

    The max-in-time L2 parts are taken over the time nodes.  The time
    integrals of the diffusion and jump seminorms are evaluated per step on
    the averaged error field (e^n + e^{n+1})/2, the state the Crank-Nicolson
    energy identity controls; sampling at the nodes instead would pick up
    the scheme's undamped odd-even transient of the stiff modes, an O(dt)
    artifact orthogonal to the spatial accuracy being measured.
    """
    sp = traj.space
    tstart = time.perf_counter()
    max_u = max_b = 0.0
    p_err = r_err = 0.0
    err_u, err_b = [], []
    for i, st in enumerate(traj.states):
        iu = sp.interpolate_velocity(lambda X: exact.u(st.t, X))
        ib = sp.interpolate_velocity(lambda X: exact.b(st.t, X))
        eu = _field_difference(st.u, iu)
        eb = _field_difference(st.b, ib)
        err_u.append(eu)
        err_b.append(eb)
        max_u = max(max_u, sp.norm_0T_squared(eu).sum())
        max_b = max(max_b, sp.norm_0T_squared(eb).sum())
        if i > 0:
            ip = sp.interpolate_pressure(lambda X: exact.p(st.t, X),
                                         zero_mean=True)
            ir = sp.interpolate_pressure(lambda X: exact.r(st.t, X),
                                         zero_mean=True)
            p_err = max(p_err, float(np.linalg.norm(st.p.elem - ip.elem)))
            r_err = max(r_err, float(np.linalg.norm(st.r.elem - ir.elem)))
    vu = vb = ju = jb = 0.0
    for i in range(len(traj.states) - 1):
        dt = traj.states[i + 1].t - traj.states[i].t
        beta = traj.states[i + 1].beta
        gamma = traj.states[i + 1].gamma
        eu = _average_fields(err_u[i], err_u[i + 1])
        eb = _average_fields(err_b[i], err_b[i + 1])
        vu += dt * config.nu * sp.norm_1T_squared(eu).sum()
        vb += dt * config.mu * sp.norm_1T_squared(eb).sum()
        ju += dt * sp.upwind_seminorm(beta, eu) ** 2
        jb += dt * sp.upwind_seminorm(gamma, eb) ** 2
    total = np.sqrt(max_u + max_b + vu + vb + ju + jb)
    ndofs = int(traj.space.mesh.num_elements * (2 * sp.n_rtn + 2 * sp.n_pk)
                + traj.space.mesh.num_faces * (2 * sp.n_fv + 2 * sp.n_pf) + 2)
    return ErrorReport(energy_error=float(total),
                       max_u_sq=float(max_u), max_b_sq=float(max_b),
                       visc_u_sq=vu, visc_b_sq=vb, jump_u_sq=ju, jump_b_sq=jb,
                       h=sp.geom.h, num_dofs=ndofs,
                       wall_time=time.perf_counter() - tstart,
                       pressure_l2=p_err, magnetic_pressure_l2=r_err)


def compute_eoc(errors, hs):
    """Experimental orders: log(e_i/e_{i+1}) / log(h_i/h_{i+1})."""
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    if errors.shape != hs.shape or errors.ndim != 1:
        raise ValueError("errors and hs must be 1D sequences of equal length")
    return list(np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:]))


def estimate_infsup_constant(mesh: Mesh, k: int,
                             space: HybridSpace | None = None) -> float:
    """Smallest generalized singular value of B_h on the zero-mean pressures.

    Measured between ||.||_{1,h} on U^k_{h,0} and the weighted pressure norm
    (L2 plus the h_T-scaled discrete gradients), via the dense eigenproblem
    of the pressure Schur complement.
    """
    if space is None:
        space = HybridSpace(mesh, compute_geometry(mesh), k)
    N1, _, _ = assemble_vector_gram(space, "norm1")
    B, W, mean, utotal, ptotal = assemble_coupling(space)
    lu = spla.splu(N1.tocsc())
    Bd = B.toarray()
    S = Bd @ lu.solve(Bd.T)
    Z = sla.null_space(mean[None, :])   # orthonormal basis of zero-mean pressures
    A = Z.T @ S @ Z
    Wz = Z.T @ (W.toarray() @ Z)
    vals = sla.eigh(A, Wz, eigvals_only=True)
    return float(np.sqrt(max(vals[0], 0.0)))


@dataclass
class PecletReport:
    peclet: np.ndarray     # (E,) local Peclet numbers
    chi: float


def peclet_report(space: HybridSpace, eta: float, w: HybridVectorField,
                  alpha: np.ndarray) -> PecletReport:
    """Local Peclet numbers (alpha_T + |w|_inf) h_T / eta and the chi factor."""
    wsup = space.element_sup(w)
    alpha = np.asarray(alpha, dtype=float)
    pe = (alpha + wsup) * space.geom.diameter / eta
    over = pe > 1.0
    chi = float((wsup[over] / alpha[over]).max()) if over.any() else 0.0
    return PecletReport(peclet=pe, chi=chi)
