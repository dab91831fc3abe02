"""Coupled MHD system: global assembly, time stepping, Newton, condensation.

Unknown ordering follows [element u | element b | element p | element r |
face u | face b | face p | face r | two mean multipliers]; boundary u/b face
slots live in the same vector but hold Dirichlet data and are excluded from
the solved system.  The zero-mean conditions on the two pressures are
enforced through scalar Lagrange multipliers, which keeps the saddle system
square without pinning.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .hybrid import HybridScalarField, HybridSpace, HybridVectorField
from .mesh import Mesh, compute_geometry


class SolverError(RuntimeError):
    """Newton or linear-solver failure, carrying the offending step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class SolverConfig:
    k: int
    nu: float
    mu: float
    t_final: float = 1.0
    c_stab: float = 1.0
    newton_rtol: float = 1e-8
    newton_atol: float = 1e-12   # roundoff floor for already-converged states
    newton_max_iter: int = 25
    condense: bool = True
    include_convection: bool = True
    compare_condensed: bool = False   # cross-check both solve paths per iterate

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.nu <= 0 or self.mu <= 0:
            raise ValueError("diffusivities must be positive")
        if self.t_final <= 0:
            raise ValueError("final time must be positive")
        if self.c_stab < 0:
            raise ValueError("C_stab must be nonnegative")
        if not 0 < self.newton_rtol < 1:
            raise ValueError("newton_rtol must lie in (0, 1)")


@dataclass
class Problem:
    """Data of one initial boundary value problem on the unit time interval."""

    forcing_u: object = None      # f(t, X) -> (n, 2)
    forcing_b: object = None
    initial_u: object = None      # u0(X) -> (n, 2)
    initial_b: object = None
    dirichlet_u: object = None    # g(t, X) -> (n, 2); None = homogeneous
    dirichlet_b: object = None


@dataclass
class SimulationState:
    n: int
    t: float
    u: HybridVectorField
    b: HybridVectorField
    p: HybridScalarField
    r: HybridScalarField
    beta: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray


@dataclass
class Trajectory:
    space: HybridSpace
    config: SolverConfig
    dt: float
    states: list
    energies: list
    newton_iters: list
    div_reports: list
    condensation_gaps: list
    wall_time: float = 0.0

    @property
    def times(self):
        return [s.t for s in self.states]


def time_step_count(h: float, k: int) -> int:
    """max{10, ceil(h^{-(k+1)/2})}, guarded against float ceil artifacts."""
    x = float(h) ** (-(k + 1) / 2.0)
    return max(10, math.ceil(round(x, 9)))


def upwind_coefficients(space: HybridSpace, u: HybridVectorField,
                        b: HybridVectorField, c_stab: float):
    """Per-element upwind weights from the previous-step field magnitudes."""
    s = space.element_sup(u) + space.element_sup(b)
    beta = c_stab * np.maximum(1e-4, s)
    return beta, beta.copy()


class DofMap:
    """Global index bookkeeping over the full vector (data slots included)."""

    def __init__(self, space: HybridSpace):
        mesh = space.mesh
        E, F = mesh.num_elements, mesh.num_faces
        n_rtn, n_pk = space.n_rtn, space.n_pk
        n_fv, n_pf = space.n_fv, space.n_pf
        sizes = [E * n_rtn, E * n_rtn, E * n_pk, E * n_pk,
                 F * n_fv, F * n_fv, F * n_pf, F * n_pf, 2]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        (self.off_ue, self.off_be, self.off_pe, self.off_re, self.off_uf,
         self.off_bf, self.off_pf, self.off_rf, self.off_mult, self.N) = offs

        ef = mesh.element_faces
        ar = np.arange

        def vec_idx(off_e, off_f):
            elem = off_e + (ar(E)[:, None] * n_rtn + ar(n_rtn)[None, :])
            face = off_f + (ef[:, :, None] * n_fv + ar(n_fv)).reshape(E, -1)
            return np.concatenate([elem, face], axis=1)

        def sc_idx(off_e, off_f):
            elem = off_e + (ar(E)[:, None] * n_pk + ar(n_pk)[None, :])
            face = off_f + (ef[:, :, None] * n_pf + ar(n_pf)).reshape(E, -1)
            return np.concatenate([elem, face], axis=1)

        self.gid_u = vec_idx(self.off_ue, self.off_uf)   # (E, nu_loc)
        self.gid_b = vec_idx(self.off_be, self.off_bf)
        self.gid_p = sc_idx(self.off_pe, self.off_pf)    # (E, np_loc)
        self.gid_r = sc_idx(self.off_re, self.off_rf)
        mult = np.broadcast_to([self.off_mult, self.off_mult + 1], (E, 2))
        self.gid_ext = np.concatenate(
            [self.gid_u, self.gid_b, self.gid_p, self.gid_r, mult], axis=1)

        self.unknown = np.ones(self.N, dtype=bool)
        bdry = np.where(mesh.boundary)[0]
        for off in (self.off_uf, self.off_bf):
            cols = off + (bdry[:, None] * n_fv + ar(n_fv)).reshape(-1)
            self.unknown[cols] = False

        # extended local layout: [u_loc | b_loc | p_loc | r_loc | zp | zr]
        nu, npl = space.nu_loc, space.np_loc
        self.nl = 2 * nu + 2 * npl + 2
        iu = ar(n_rtn)
        ib = nu + ar(n_rtn)
        ip = 2 * nu + ar(n_pk)
        ir = 2 * nu + npl + ar(n_pk)
        self.interior = np.concatenate([iu, ib, ip, ir])
        self.kept = np.setdiff1d(ar(self.nl), self.interior)
        self.p_const_loc = 2 * nu
        self.r_const_loc = 2 * nu + npl

        kg = self.gid_ext[:, self.kept]
        self.kept_gid = kg
        ku = np.where(self.unknown)[0]
        ku = ku[np.isin(ku, kg.ravel())]
        self.kept_unknown_ids = ku
        pos = np.searchsorted(ku, kg)
        pos[pos >= len(ku)] = 0
        self.kept_pos = np.where(ku[pos] == kg, pos, -1)
        self.kept_pos[kg == -1] = -1

        self.p_const_ids = self.off_pe + ar(E) * n_pk
        self.r_const_ids = self.off_re + ar(E) * n_pk

    def vector_field(self, X, which, space, homogeneous=False):
        mesh = space.mesh
        off_e = self.off_ue if which == "u" else self.off_be
        off_f = self.off_uf if which == "u" else self.off_bf
        elem = X[off_e:off_e + mesh.num_elements * space.n_rtn].reshape(
            mesh.num_elements, space.n_rtn)
        face = X[off_f:off_f + mesh.num_faces * space.n_fv].reshape(
            mesh.num_faces, space.n_fv)
        return HybridVectorField(space.k, elem, face, homogeneous)

    def scalar_field(self, X, which, space):
        mesh = space.mesh
        off_e = self.off_pe if which == "p" else self.off_re
        off_f = self.off_pf if which == "p" else self.off_rf
        elem = X[off_e:off_e + mesh.num_elements * space.n_pk].reshape(
            mesh.num_elements, space.n_pk)
        face = X[off_f:off_f + mesh.num_faces * space.n_pf].reshape(
            mesh.num_faces, space.n_pf)
        return HybridScalarField(space.k, elem, face, True)


@dataclass
class StepContext:
    """Everything frozen over one Crank-Nicolson step."""

    t_new: float
    dt: float
    beta: np.ndarray
    gamma: np.ndarray
    mat_u: np.ndarray     # (E, nu, nu) time + diffusion + upwind
    mat_b: np.ndarray
    const_u: np.ndarray   # (E, nu) state-n spatial terms minus loads
    const_b: np.ndarray
    ell: np.ndarray       # (N,) boundary-flux data on constraint rows


class MHDSystem:
    """Assembler for the fully discrete system on one HybridSpace."""

    def __init__(self, space: HybridSpace, config: SolverConfig):
        self.space = space
        self.config = config
        self.dofs = DofMap(space)
        self.sqrt_area = np.sqrt(space.geom.area)
        ops = space.ops
        nu, npl, n_rtn = space.nu_loc, space.np_loc, space.n_rtn
        E = space.mesh.num_elements
        self.Ghat = np.zeros((E, nu, npl))
        self.Ghat[:, :n_rtn, :] = ops.pressure_grad

    # -- per-step data -----------------------------------------------------

    def element_load(self, f, t: float) -> np.ndarray:
        """Volume load of a forcing field against the element RTN basis."""
        sp = self.space
        E = sp.mesh.num_elements
        if f is None:
            return np.zeros((E, sp.n_rtn))
        fv = np.asarray(f(t, sp.vq_pts.reshape(-1, 2)), dtype=float)
        fv = fv.reshape(E, -1, 2)
        return np.einsum("eqc,emqc,eq->em", fv, sp.rtn_v, sp.vq_w,
                         optimize=True)

    def boundary_face_coeffs(self, g, t: float) -> np.ndarray:
        """pi^k_F of Dirichlet data on boundary faces: (n_bdry, n_fv)."""
        sp = self.space
        if g is None:
            return np.zeros((int(sp.mesh.boundary.sum()), sp.n_fv))
        return sp.project_face_vector(lambda X: g(t, X))[sp.mesh.boundary]

    def _constraint_data(self, g, t: float, off_f: int) -> np.ndarray:
        """Boundary normal-flux moments feeding the solenoidal rows."""
        sp, dofs = self.space, self.dofs
        out = np.zeros(dofs.N)
        if g is None:
            return out
        bmask = sp.mesh.boundary
        b = np.where(bmask)[0]
        qi = sp.fi_pts.shape[1]
        vv = np.asarray(g(t, sp.fi_pts[b].reshape(-1, 2)),
                        dtype=float).reshape(len(b), qi, 2)
        eb, lb = sp.face_side[b, 0, 0], sp.face_side[b, 0, 1]
        gn = np.einsum("fqc,fc->fq", vv, sp.geom.normals[eb, lb])
        mom = np.einsum("fjq,fq,fq->fj", sp.psi_fi[b], gn, sp.fi_w[b])
        cols = off_f + (b[:, None] * sp.n_pf + np.arange(sp.n_pf)).reshape(-1)
        out[cols] = mom.reshape(-1)
        return out

    def prepare_step(self, state: SimulationState, dt: float, problem: Problem,
                     load_override=None) -> StepContext:
        sp, cfg = self.space, self.config
        ops = sp.ops
        t_new = state.t + dt
        beta, gamma = upwind_coefficients(sp, state.u, state.b, cfg.c_stab)

        mat_u = ops.mass0 / dt + 0.5 * cfg.nu * ops.diff \
            + 0.5 * beta[:, None, None] * ops.jump
        mat_b = ops.mass0 / dt + 0.5 * cfg.mu * ops.diff \
            + 0.5 * gamma[:, None, None] * ops.jump

        xu_n = sp.gather_vector(state.u)
        xb_n = sp.gather_vector(state.b)
        const_u = (mat_u - 2.0 / dt * ops.mass0) @ xu_n[:, :, None]
        const_b = (mat_b - 2.0 / dt * ops.mass0) @ xb_n[:, :, None]
        const_u, const_b = const_u[:, :, 0], const_b[:, :, 0]
        if cfg.include_convection:
            const_u += 0.5 * (sp.conv_residual(state.u.elem, xu_n)
                              - sp.conv_residual(state.b.elem, xb_n))
            const_b += 0.5 * (sp.conv_residual(state.u.elem, xb_n)
                              - sp.conv_residual(state.b.elem, xu_n))
        if load_override is not None:
            lf, lg = load_override
        else:
            lf = 0.5 * (self.element_load(problem.forcing_u, state.t)
                        + self.element_load(problem.forcing_u, t_new))
            lg = 0.5 * (self.element_load(problem.forcing_b, state.t)
                        + self.element_load(problem.forcing_b, t_new))
        const_u[:, :sp.n_rtn] -= lf
        const_b[:, :sp.n_rtn] -= lg

        ell = self._constraint_data(problem.dirichlet_u, t_new, self.dofs.off_pf)
        ell += self._constraint_data(problem.dirichlet_b, t_new, self.dofs.off_rf)
        return StepContext(t_new=t_new, dt=dt, beta=beta, gamma=gamma,
                           mat_u=mat_u, mat_b=mat_b, const_u=const_u,
                           const_b=const_b, ell=ell)

    # -- residual and Jacobian ----------------------------------------------

    def residual(self, X: np.ndarray, ctx: StepContext) -> np.ndarray:
        sp, dofs = self.space, self.dofs
        u = dofs.vector_field(X, "u", sp)
        b = dofs.vector_field(X, "b", sp)
        p = dofs.scalar_field(X, "p", sp)
        r = dofs.scalar_field(X, "r", sp)
        xu, xb = sp.gather_vector(u), sp.gather_vector(b)
        pl, rl = sp.gather_scalar(p), sp.gather_scalar(r)
        zp, zr = X[dofs.off_mult], X[dofs.off_mult + 1]

        Ru = (ctx.mat_u @ xu[:, :, None])[:, :, 0] + ctx.const_u
        Rb = (ctx.mat_b @ xb[:, :, None])[:, :, 0] + ctx.const_b
        if self.config.include_convection:
            Ru += 0.5 * (sp.conv_residual(u.elem, xu)
                         - sp.conv_residual(b.elem, xb))
            Rb += 0.5 * (sp.conv_residual(u.elem, xb)
                         - sp.conv_residual(b.elem, xu))
        Ru += (self.Ghat @ pl[:, :, None])[:, :, 0]
        Rb += (self.Ghat @ rl[:, :, None])[:, :, 0]

        Rp = np.einsum("ema,em->ea", sp.ops.pressure_grad, u.elem)
        Rr = np.einsum("ema,em->ea", sp.ops.pressure_grad, b.elem)
        Rp[:, 0] += zp * self.sqrt_area
        Rr[:, 0] += zr * self.sqrt_area

        R = np.zeros(dofs.N)
        np.add.at(R, dofs.gid_u, Ru)
        np.add.at(R, dofs.gid_b, Rb)
        np.add.at(R, dofs.gid_p, Rp)
        np.add.at(R, dofs.gid_r, Rr)
        R -= ctx.ell
        R[dofs.off_mult] = X[dofs.p_const_ids] @ self.sqrt_area
        R[dofs.off_mult + 1] = X[dofs.r_const_ids] @ self.sqrt_area
        if not np.all(np.isfinite(R)):
            raise SolverError("non-finite residual")
        return R

    def local_jacobian(self, X: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Per-element blocks over the extended local layout: (E, nl, nl)."""
        sp, dofs = self.space, self.dofs
        nu, npl, n_rtn = sp.nu_loc, sp.np_loc, sp.n_rtn
        E = sp.mesh.num_elements
        nl = dofs.nl
        su, sb = slice(0, nu), slice(nu, 2 * nu)
        sp_, sr = slice(2 * nu, 2 * nu + npl), slice(2 * nu + npl, 2 * nu + 2 * npl)

        J = np.zeros((E, nl, nl))
        J[:, su, su] = ctx.mat_u
        J[:, sb, sb] = ctx.mat_b
        if self.config.include_convection:
            u = dofs.vector_field(X, "u", sp)
            b = dofs.vector_field(X, "b", sp)
            xu, xb = sp.gather_vector(u), sp.gather_vector(b)
            Jw, Jv = sp.conv_jacobians(u.elem, xu)
            J[:, su, su] += 0.5 * (Jw + Jv)
            Jw, Jv = sp.conv_jacobians(b.elem, xb)
            J[:, su, sb] = -0.5 * (Jw + Jv)
            Jw, Jv = sp.conv_jacobians(u.elem, xb)
            J[:, sb, su] = 0.5 * Jw
            J[:, sb, sb] += 0.5 * Jv
            Jw, Jv = sp.conv_jacobians(b.elem, xu)
            J[:, sb, su] -= 0.5 * Jv
            J[:, sb, sb] -= 0.5 * Jw
        J[:, su, sp_] = self.Ghat
        J[:, sb, sr] = self.Ghat
        # constraint rows: every q test pairs with the trial element block
        Gt = sp.ops.pressure_grad.transpose(0, 2, 1)
        J[:, sp_, su.start:su.start + n_rtn] = Gt
        J[:, sr, sb.start:sb.start + n_rtn] = Gt
        # multiplier couplings and mean rows
        J[:, dofs.p_const_loc, nl - 2] = self.sqrt_area
        J[:, dofs.r_const_loc, nl - 1] = self.sqrt_area
        J[:, nl - 2, dofs.p_const_loc] = self.sqrt_area
        J[:, nl - 1, dofs.r_const_loc] = self.sqrt_area
        return J

    # -- linear solves -------------------------------------------------------

    def _solve_full(self, Jloc: np.ndarray, R: np.ndarray) -> np.ndarray:
        dofs = self.dofs
        gid = dofs.gid_ext
        E, nl = gid.shape
        rows = np.repeat(gid, nl, axis=1).ravel()
        cols = np.tile(gid, (1, nl)).ravel()
        vals = Jloc.reshape(E, -1).ravel()
        keep = vals != 0.0
        A = sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                              shape=(dofs.N, dofs.N)).tocsr()
        mask = dofs.unknown
        A = A[mask][:, mask].tocsc()
        try:
            lu = spla.splu(A)
            delta = lu.solve(-R[mask])
        except RuntimeError as exc:
            raise SolverError(f"singular linear system: {exc}") from exc
        dX = np.zeros(dofs.N)
        dX[mask] = delta
        return dX

    def _solve_condensed(self, Jloc: np.ndarray, R: np.ndarray) -> np.ndarray:
        dofs = self.dofs
        ii, kk = dofs.interior, dofs.kept
        A_ii = Jloc[:, ii[:, None], ii[None, :]]
        A_ik = Jloc[:, ii[:, None], kk[None, :]]
        A_ki = Jloc[:, kk[:, None], ii[None, :]]
        A_kk = Jloc[:, kk[:, None], kk[None, :]]
        R_i = R[dofs.gid_ext[:, ii]]
        try:
            Y = np.linalg.solve(A_ii, A_ik)
            z = np.linalg.solve(A_ii, R_i[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular local block in condensation") from exc
        S = A_kk - A_ki @ Y

        nk = len(dofs.kept_unknown_ids)
        pos = dofs.kept_pos
        rows = np.repeat(pos, pos.shape[1], axis=1).ravel()
        cols = np.tile(pos, (1, pos.shape[1])).ravel()
        vals = S.reshape(S.shape[0], -1).ravel()
        keep = (rows >= 0) & (cols >= 0) & (vals != 0.0)
        Sg = sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                               shape=(nk, nk)).tocsc()
        rhs = -R[dofs.kept_unknown_ids].copy()
        contrib = np.einsum("eki,ei->ek", A_ki, z)
        ok = pos >= 0
        np.add.at(rhs, pos[ok], contrib[ok])
        try:
            lu = spla.splu(Sg)
            dk = lu.solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"singular condensed system: {exc}") from exc

        dX = np.zeros(dofs.N)
        dX[dofs.kept_unknown_ids] = dk
        dk_loc = dX[dofs.kept_gid]          # data slots stay zero
        di = np.linalg.solve(
            A_ii, (-R_i - (A_ik @ dk_loc[:, :, None])[:, :, 0])[:, :, None]
        )[:, :, 0]
        dX[dofs.gid_ext[:, ii]] = di
        return dX

    def solve_correction(self, Jloc: np.ndarray, R: np.ndarray,
                         gaps: list | None = None) -> np.ndarray:
        if self.config.compare_condensed or self.config.condense:
            dX_c = self._solve_condensed(Jloc, R)
        if self.config.compare_condensed or not self.config.condense:
            dX_f = self._solve_full(Jloc, R)
        if self.config.compare_condensed and gaps is not None:
            scale = max(np.linalg.norm(dX_f), 1e-300)
            gaps.append(float(np.linalg.norm(dX_c - dX_f) / scale))
        return dX_c if self.config.condense else dX_f

    # -- Newton --------------------------------------------------------------

    def newton_step(self, state: SimulationState, dt: float, problem: Problem,
                    gaps: list | None = None, load_override=None):
        sp, dofs, cfg = self.space, self.dofs, self.config
        ctx = self.prepare_step(state, dt, problem, load_override=load_override)

        X = np.zeros(dofs.N)
        dofs.vector_field(X, "u", sp).elem[:] = state.u.elem
        dofs.vector_field(X, "u", sp).face[:] = state.u.face
        dofs.vector_field(X, "b", sp).elem[:] = state.b.elem
        dofs.vector_field(X, "b", sp).face[:] = state.b.face
        dofs.scalar_field(X, "p", sp).elem[:] = state.p.elem
        dofs.scalar_field(X, "p", sp).face[:] = state.p.face
        dofs.scalar_field(X, "r", sp).elem[:] = state.r.elem
        dofs.scalar_field(X, "r", sp).face[:] = state.r.face
        bmask = sp.mesh.boundary
        u_face = dofs.vector_field(X, "u", sp).face
        b_face = dofs.vector_field(X, "b", sp).face
        u_face[bmask] = self.boundary_face_coeffs(problem.dirichlet_u, ctx.t_new)
        b_face[bmask] = self.boundary_face_coeffs(problem.dirichlet_b, ctx.t_new)

        R = self.residual(X, ctx)
        res0 = np.linalg.norm(R[dofs.unknown])
        res = res0
        iters = 0
        while res > max(cfg.newton_rtol * res0, cfg.newton_atol):
            if iters >= cfg.newton_max_iter:
                raise SolverError(
                    f"Newton stalled at residual {res:.3e} (start {res0:.3e})")
            Jloc = self.local_jacobian(X, ctx)
            X += self.solve_correction(Jloc, R, gaps)
            R = self.residual(X, ctx)
            res = np.linalg.norm(R[dofs.unknown])
            iters += 1

        new = SimulationState(
            n=state.n + 1, t=ctx.t_new,
            u=dofs.vector_field(X, "u", sp).copy(),
            b=dofs.vector_field(X, "b", sp).copy(),
            p=dofs.scalar_field(X, "p", sp).copy(),
            r=dofs.scalar_field(X, "r", sp).copy(),
            beta=ctx.beta, gamma=ctx.gamma,
            zeta=X[dofs.off_mult:dofs.off_mult + 2].copy())
        return new, iters


def initial_state(space: HybridSpace, problem: Problem,
                  c_stab: float = 1.0) -> SimulationState:
    u0 = problem.initial_u or (lambda X: np.zeros((len(X), 2)))
    b0 = problem.initial_b or (lambda X: np.zeros((len(X), 2)))
    u = space.interpolate_velocity(u0)
    b = space.interpolate_velocity(b0)
    if problem.dirichlet_u is None:
        u.face[space.mesh.boundary] = 0.0
        u.homogeneous_bc = True
    if problem.dirichlet_b is None:
        b.face[space.mesh.boundary] = 0.0
        b.homogeneous_bc = True
    beta, gamma = upwind_coefficients(space, u, b, c_stab)
    return SimulationState(n=0, t=0.0, u=u, b=b,
                           p=space.zero_scalar(True), r=space.zero_scalar(True),
                           beta=beta, gamma=gamma, zeta=np.zeros(2))


def run_simulation(mesh: Mesh, config: SolverConfig, problem: Problem,
                   space: HybridSpace | None = None,
                   num_steps: int | None = None,
                   check_divergence: bool = True) -> Trajectory:
    """Crank-Nicolson time stepping of the coupled discrete MHD system."""
    t0 = time.perf_counter()
    if space is None:
        geom = compute_geometry(mesh)
        space = HybridSpace(mesh, geom, config.k)
    system = MHDSystem(space, config)
    N = num_steps or time_step_count(space.geom.h, config.k)
    dt = config.t_final / N

    state = initial_state(space, problem, config.c_stab)

    def energy(s):
        return (space.norm_0T_squared(s.u).sum()
                + space.norm_0T_squared(s.b).sum())

    def div_pair(s):
        gu = problem.dirichlet_u
        gb = problem.dirichlet_b
        bu = None if gu is None else (lambda X, t=s.t: gu(t, X))
        bb = None if gb is None else (lambda X, t=s.t: gb(t, X))
        return (space.check_divergence_free(s.u, bu),
                space.check_divergence_free(s.b, bb))

    traj = Trajectory(space=space, config=config, dt=dt, states=[state],
                      energies=[energy(state)], newton_iters=[],
                      div_reports=[div_pair(state) if check_divergence else None],
                      condensation_gaps=[])
    for n in range(N):
        try:
            state, iters = system.newton_step(state, dt, problem,
                                              gaps=traj.condensation_gaps)
        except SolverError as exc:
            raise SolverError(str(exc), step=n + 1) from exc
        traj.states.append(state)
        traj.energies.append(energy(state))
        traj.newton_iters.append(iters)
        traj.div_reports.append(div_pair(state) if check_divergence else None)
    traj.wall_time = time.perf_counter() - t0
    return traj


# -- assembly helpers shared with diagnostics --------------------------------

def scatter_blocks(blocks: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                   shape: tuple) -> sparse.csr_matrix:
    """Sum per-element dense blocks into a sparse matrix.

    blocks: (E, a, b); rows: (E, a); cols: (E, b).  Indices of -1 drop the
    corresponding entries.
    """
    E, a, b = blocks.shape
    rr = np.repeat(rows, b, axis=1).ravel()
    cc = np.tile(cols, (1, a)).ravel()
    vv = blocks.reshape(E, -1).ravel()
    keep = (rr >= 0) & (cc >= 0) & (vv != 0.0)
    return sparse.coo_matrix((vv[keep], (rr[keep], cc[keep])),
                             shape=shape).tocsr()


def homogeneous_vector_ids(space: HybridSpace):
    """Global ids of U^k_{h,0} dofs: all element blocks + interior face blocks."""
    mesh = space.mesh
    E, F = mesh.num_elements, mesh.num_faces
    n_rtn, n_fv = space.n_rtn, space.n_fv
    face_ids = -np.ones((F, n_fv), dtype=np.int64)
    interior = np.where(~mesh.boundary)[0]
    face_ids[interior] = (E * n_rtn + np.arange(len(interior) * n_fv)
                          ).reshape(-1, n_fv)
    total = E * n_rtn + len(interior) * n_fv
    elem_ids = np.arange(E * n_rtn).reshape(E, n_rtn)
    loc = np.concatenate(
        [elem_ids, face_ids[mesh.element_faces].reshape(E, -1)], axis=1)
    return loc, total


def scalar_ids(space: HybridSpace):
    """Global ids of P^k_h dofs: element blocks then all face blocks."""
    mesh = space.mesh
    E, F = mesh.num_elements, mesh.num_faces
    n_pk, n_pf = space.n_pk, space.n_pf
    elem_ids = np.arange(E * n_pk).reshape(E, n_pk)
    face_ids = (E * n_pk + np.arange(F * n_pf)).reshape(F, n_pf)
    loc = np.concatenate(
        [elem_ids, face_ids[mesh.element_faces].reshape(E, -1)], axis=1)
    return loc, E * n_pk + F * n_pf


def assemble_vector_gram(space: HybridSpace, which: str = "norm1"):
    """Global Gram of ||.||_{1,h} or (.,.)_{0,h} on U^k_{h,0}."""
    loc, total = homogeneous_vector_ids(space)
    blocks = {"norm1": space.ops.norm1, "mass0": space.ops.mass0}[which]
    return scatter_blocks(blocks, loc, loc, (total, total)), loc, total


def assemble_functional(space: HybridSpace, loc_vec: np.ndarray):
    """Scatter per-element functionals (E, nu_loc) onto U^k_{h,0} dofs."""
    loc, total = homogeneous_vector_ids(space)
    out = np.zeros(total)
    ok = loc >= 0
    np.add.at(out, loc[ok], loc_vec[ok])
    return out


def assemble_coupling(space: HybridSpace):
    """Global B_h matrix (scalar dofs x U^k_{h,0} dofs) and the W-norm Gram."""
    uloc, utotal = homogeneous_vector_ids(space)
    ploc, ptotal = scalar_ids(space)
    E = space.mesh.num_elements
    n_rtn, npl = space.n_rtn, space.np_loc
    B = scatter_blocks(space.ops.pressure_grad.transpose(0, 2, 1),
                       ploc, uloc[:, :n_rtn], (ptotal, utotal))
    G = space.ops.pressure_grad
    h2 = space.geom.diameter[:, None, None] ** 2
    Wloc = h2 * np.einsum("ema,emb->eab", G, G, optimize=True)
    Wloc[:, :space.n_pk, :space.n_pk] += np.eye(space.n_pk)
    W = scatter_blocks(Wloc, ploc, ploc, (ptotal, ptotal))
    mean = np.zeros(ptotal)
    mean[ploc[:, 0]] = np.sqrt(space.geom.area)
    return B, W, mean, utotal, ptotal
