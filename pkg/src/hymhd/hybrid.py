"""Hybrid discrete spaces and the local discrete forms built on them.

A vector unknown carries an RTN^{k+1} polynomial per element and a P^k
vector polynomial per face; a scalar unknown carries P^k polynomials on
elements and faces.  `HybridSpace` precomputes, batched over elements, all
quadrature tables and the per-element operator matrices (velocity
reconstruction, stabilized diffusion, pressure gradient, hybrid mass, face
jumps), which everything else - norms, convection, the global solver - is
expressed through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as _leg

from .mesh import GeometryCache, Mesh
from . import polyspace as ps


@dataclass
class HybridVectorField:
    """Element RTN^{k+1} blocks plus P^k(F)^2 face blocks.

    Face block layout per face: the k+1 coefficients of the x component
    followed by the k+1 coefficients of the y component, all in the face's
    orthonormal Legendre basis.
    """

    k: int
    elem: np.ndarray   # (E, n_rtn)
    face: np.ndarray   # (F, 2*(k+1))
    homogeneous_bc: bool = False

    def copy(self) -> "HybridVectorField":
        return HybridVectorField(self.k, self.elem.copy(), self.face.copy(),
                                 self.homogeneous_bc)


@dataclass
class HybridScalarField:
    """Element and face P^k blocks of a hybrid scalar unknown."""

    k: int
    elem: np.ndarray   # (E, n_pk)
    face: np.ndarray   # (F, k+1)
    zero_mean: bool = False

    def copy(self) -> "HybridScalarField":
        return HybridScalarField(self.k, self.elem.copy(), self.face.copy(),
                                 self.zero_mean)


@dataclass
class DivergenceReport:
    """Pointwise solenoidality diagnostics of a hybrid vector field."""

    max_divergence: float
    max_interior_jump: float
    max_boundary_flux_error: float
    max_rtn_complement: float
    scale: float

    def worst_relative(self) -> float:
        s = max(self.scale, 1e-300)
        return max(self.max_divergence, self.max_interior_jump,
                   self.max_boundary_flux_error, self.max_rtn_complement) / s


@dataclass
class LocalOperatorSet:
    """Per-element matrices over the local hybrid layout [elem | F0 | F1 | F2]."""

    recon: np.ndarray          # (E, 2, n_pk1, nu) velocity reconstruction
    diff: np.ndarray           # (E, nu, nu) a_T = gradient part + stabilization
    stab: np.ndarray           # (E, nu, nu) s_T
    mass0: np.ndarray          # (E, nu, nu) (.,.)_{0,T}
    jump: np.ndarray           # (E, nu, nu) sum_F int_F (v_F - v_T).(w_F - w_T)
    norm1: np.ndarray          # (E, nu, nu) Gram of ||.||_{1,T}
    pressure_grad: np.ndarray  # (E, n_rtn, np_loc) G_T
    lam: np.ndarray            # (E,) stabilization weight card(F_T) h^2 / |T|


def _face_basis_values(fcoords: np.ndarray, points: np.ndarray, degree: int,
                       lengths: np.ndarray) -> np.ndarray:
    """Orthonormal Legendre values on each face: (F, degree+1, q).

    `points` has shape (F, q, 2) and must lie on the corresponding faces,
    which are parameterized from their canonical (sorted-index) endpoints.
    """
    a = fcoords[:, 0][:, None, :]
    d = (fcoords[:, 1] - fcoords[:, 0])[:, None, :]
    t = ((points - a) * d).sum(-1) / (d * d).sum(-1)
    s = 2.0 * t - 1.0
    vander = _leg.legvander(s.ravel(), degree).reshape(*s.shape, degree + 1)
    scale = np.sqrt((2 * np.arange(degree + 1) + 1)[None, :] / lengths[:, None])
    return vander.transpose(0, 2, 1) * scale[:, :, None]


class HybridSpace:
    """All batched tables and local operators for degree k on a given mesh."""

    def __init__(self, mesh: Mesh, geom: GeometryCache, k: int):
        if k < 0:
            raise ValueError("polynomial degree k must be >= 0")
        self.mesh = mesh
        self.geom = geom
        self.k = k
        self.n_rtn = ps.rtn_space_dim(k + 1)
        self.n_pk = ps.scalar_space_dim(k)
        self.n_pkm1 = ps.scalar_space_dim(k - 1)
        self.n_pk1 = ps.scalar_space_dim(k + 1)
        self.n_pf = k + 1
        self.n_fv = 2 * (k + 1)
        self.nu_loc = self.n_rtn + 3 * self.n_fv
        self.np_loc = self.n_pk + 3 * self.n_pf
        self.form_degree = 2 * (k + 2) + 2
        self.interp_degree = min(2 * k + 12, ps.MAX_QUAD_DEGREE)

        self._build_tables()
        self.ops = self._build_operators()

    # -- construction ------------------------------------------------------

    def _build_tables(self):
        mesh, geom, k = self.mesh, self.geom, self.k
        verts = mesh.vertices[mesh.elements]
        center, scale = geom.centroid, geom.diameter
        ef = mesh.element_faces
        E = mesh.num_elements

        self.vq_pts, self.vq_w = ps.map_rule_to_triangles(verts, self.form_degree)
        Q = self.vq_pts.shape[1]
        mono_v, dmono_v = ps.monomial_values(self.vq_pts, center, scale, k + 1)

        # Orthonormal scalar hierarchy: graded order makes every leading block
        # an orthonormal basis of the lower-degree space.
        C1 = ps.orthonormalize(mono_v, self.vq_w)           # (E, n_pk1, n_pk1)
        self._C1 = C1
        self.pk1_v = np.einsum("eam,emq->eaq", C1, mono_v)
        self.pk1_g = np.einsum("eam,emqd->eaqd", C1, dmono_v)
        self.pk_v = self.pk1_v[:, :self.n_pk]

        gen = ps.rtn_generator_coeffs(k + 1, C1[:, :self.n_pk, :self.n_pk])
        gen_v = np.einsum("eicm,emq->eiqc", gen, mono_v)
        T = ps.orthonormalize(gen_v.reshape(E, self.n_rtn, -1),
                              np.repeat(self.vq_w, 2, axis=1))
        self._C_rtn = np.einsum("eij,ejcm->eicm", T, gen)
        self.rtn_v = np.einsum("eicm,emq->eiqc", self._C_rtn, mono_v)
        self.rtn_g = np.einsum("eicm,emqd->eiqcd", self._C_rtn, dmono_v)
        self.rtn_div = self.rtn_g[:, :, :, 0, 0] + self.rtn_g[:, :, :, 1, 1]

        fcoords = mesh.vertices[mesh.faces]
        self.fq_pts, self.fq_w = ps.map_rule_to_segments(fcoords, self.form_degree)
        self.psi_f = _face_basis_values(fcoords, self.fq_pts, k, geom.face_length)
        qf = self.fq_pts.shape[1]

        self.fq_w_e = self.fq_w[ef]
        self.psi_e = self.psi_f[ef]
        fpts_e = self.fq_pts[ef]                             # (E, 3, qf, 2)
        mono_f, dmono_f = ps.monomial_values(
            fpts_e.reshape(E, 3 * qf, 2), center, scale, k + 1)
        mono_f = mono_f.reshape(E, -1, 3, qf)
        dmono_f = dmono_f.reshape(E, -1, 3, qf, 2)
        self.rtn_f = np.einsum("eicm,emfq->efiqc", self._C_rtn, mono_f)
        self.rtn_fn = np.einsum("efiqc,efc->efiq", self.rtn_f, geom.normals)
        self.pk1_f = np.einsum("eam,emfq->efaq", C1, mono_f)
        self.pk1_gf = np.einsum("eam,emfqd->efaqd", C1, dmono_f)

        # Dense sample sets for L-infinity estimates: volume quadrature points
        # plus vertices and edge midpoints; on faces, quadrature points plus
        # the endpoints.
        mids = 0.5 * (verts + verts[:, [1, 2, 0]])
        self.samp_pts = np.concatenate([self.vq_pts, verts, mids], axis=1)
        mono_s, dmono_s = ps.monomial_values(self.samp_pts, center, scale, k + 1)
        self.rtn_s = np.einsum("eicm,emq->eiqc", self._C_rtn, mono_s)
        self.rtn_gs = np.einsum("eicm,emqd->eiqcd", self._C_rtn, dmono_s)
        self.rtn_divs = self.rtn_gs[:, :, :, 0, 0] + self.rtn_gs[:, :, :, 1, 1]
        self.pk_s = np.einsum("eam,emq->eaq", C1[:, :self.n_pk], mono_s)

        fs_pts = np.concatenate([self.fq_pts, fcoords], axis=1)
        self.psi_fs = _face_basis_values(fcoords, fs_pts, k, geom.face_length)
        fs_e = fs_pts[ef]
        mono_fs, _ = ps.monomial_values(
            fs_e.reshape(E, -1, 2), center, scale, k + 1)
        self.rtn_fs = np.einsum("eicm,emfq->efiqc", self._C_rtn,
                                mono_fs.reshape(E, -1, 3, qf + 2))
        self.psi_fs_e = self.psi_fs[ef]

        # Higher-degree rules reserved for interpolating analytic fields, so
        # interpolates of divergence-free data stay solenoidal to roundoff.
        self.iv_pts, self.iv_w = ps.map_rule_to_triangles(verts, self.interp_degree)
        mono_iv, _ = ps.monomial_values(self.iv_pts, center, scale, k + 1)
        self.pk_iv = np.einsum("eam,emq->eaq", C1[:, :self.n_pk], mono_iv)
        self.pkm1_iv = self.pk_iv[:, :self.n_pkm1]
        self.rtn_iv = np.einsum("eicm,emq->eiqc", self._C_rtn, mono_iv)
        self.fi_pts, self.fi_w = ps.map_rule_to_segments(fcoords, self.interp_degree)
        self.psi_fi = _face_basis_values(fcoords, self.fi_pts, k, geom.face_length)
        self.fi_w_e = self.fi_w[ef]
        self.psi_fi_e = self.psi_fi[ef]

        # RTN moment matrix: 3*(k+1) face rows then 2*dim P^{k-1} volume rows.
        rows = [np.einsum("efjq,efiq,efq->efji", self.psi_e, self.rtn_fn,
                          self.fq_w_e).reshape(E, 3 * self.n_pf, self.n_rtn)]
        if k >= 1:
            pkm1_v = self.pk_v[:, :self.n_pkm1]
            vol = np.einsum("ebq,eiqd,eq->edbi", pkm1_v, self.rtn_v, self.vq_w)
            rows.append(vol.reshape(E, 2 * self.n_pkm1, self.n_rtn))
        self.rtn_moments = np.concatenate(rows, axis=1)

        # face -> (element, local edge) incidence for both sides
        F = mesh.num_faces
        self.face_side = -np.ones((F, 2, 2), dtype=np.int64)
        for s in range(2):
            el = mesh.face_elements[:, s]
            ok = el >= 0
            loc = np.argmax(mesh.element_faces[el[ok]] == np.arange(F)[ok, None],
                            axis=1)
            self.face_side[ok, s, 0] = el[ok]
            self.face_side[ok, s, 1] = loc

    def _build_operators(self) -> LocalOperatorSet:
        mesh, geom, k = self.mesh, self.geom, self.k
        E = mesh.num_elements
        n_rtn, n_pk1, n_pf, n_fv = self.n_rtn, self.n_pk1, self.n_pf, self.n_fv
        nu, npl = self.nu_loc, self.np_loc
        hT, area = geom.diameter, geom.area
        ef = mesh.element_faces

        def fslice(l):
            return slice(n_rtn + l * n_fv, n_rtn + (l + 1) * n_fv)

        # jump Gram: sum_F int_F (w_F - w_T).(v_F - v_T)
        jump = np.zeros((E, nu, nu))
        jump[:, :n_rtn, :n_rtn] = np.einsum(
            "efiqc,efjqc,efq->eij", self.rtn_f, self.rtn_f, self.fq_w_e,
            optimize=True)
        tf = np.einsum("efiqc,efjq,efq->eficj", self.rtn_f, self.psi_e,
                       self.fq_w_e, optimize=True).reshape(E, 3, n_rtn, n_fv)
        ff = np.einsum("efiq,efjq,efq->efij", self.psi_e, self.psi_e,
                       self.fq_w_e, optimize=True)
        for l in range(3):
            sl = fslice(l)
            jump[:, :n_rtn, sl] -= tf[:, l]
            jump[:, sl, :n_rtn] -= tf[:, l].transpose(0, 2, 1)
            for c in range(2):
                cc = slice(sl.start + c * n_pf, sl.start + (c + 1) * n_pf)
                jump[:, cc, cc] += ff[:, l]

        mass0 = hT[:, None, None] * jump
        mass0[:, :n_rtn, :n_rtn] += np.einsum(
            "eiqc,ejqc,eq->eij", self.rtn_v, self.rtn_v, self.vq_w, optimize=True)

        norm1 = jump / hT[:, None, None]
        norm1[:, :n_rtn, :n_rtn] += np.einsum(
            "eiqcd,ejqcd,eq->eij", self.rtn_g, self.rtn_g, self.vq_w,
            optimize=True)

        # pressure gradient G_T
        G = np.zeros((E, n_rtn, npl))
        G[:, :, :self.n_pk] = -np.einsum(
            "eiq,eaq,eq->eia", self.rtn_div, self.pk_v, self.vq_w, optimize=True)
        gf = np.einsum("efiq,efjq,efq->efij", self.rtn_fn, self.psi_e,
                       self.fq_w_e, optimize=True)
        for l in range(3):
            G[:, :, self.n_pk + l * n_pf: self.n_pk + (l + 1) * n_pf] = gf[:, l]

        # velocity reconstruction
        Ks = np.einsum("eaqd,ebqd,eq->eab", self.pk1_g, self.pk1_g, self.vq_w,
                       optimize=True)
        dphi_n = np.einsum("efaqd,efd->efaq", self.pk1_gf, geom.normals)
        rhs = np.zeros((E, 2, n_pk1, nu))
        rhs[:, :, :, :n_rtn] = np.einsum(
            "eiqrd,eaqd,eq->erai", self.rtn_g, self.pk1_g, self.vq_w,
            optimize=True)
        rhs[:, :, :, :n_rtn] -= np.einsum(
            "efiqr,efaq,efq->erai", self.rtn_f, dphi_n, self.fq_w_e,
            optimize=True)
        face_nd = np.einsum("efjq,efaq,efq->efaj", self.psi_e, dphi_n,
                            self.fq_w_e, optimize=True)
        for l in range(3):
            sl = fslice(l)
            for c in range(2):
                cc = slice(sl.start + c * n_pf, sl.start + (c + 1) * n_pf)
                rhs[:, c, :, cc] += face_nd[:, l]

        recon = np.zeros((E, 2, n_pk1, nu))
        K_red = Ks[:, 1:, 1:]
        for r in range(2):
            recon[:, r, 1:, :] = np.linalg.solve(K_red, rhs[:, r, 1:, :])
        sqrt_area = np.sqrt(area)
        if k >= 1:
            int_chi = np.einsum("eiqc,eq->eic", self.rtn_v, self.vq_w)
            for r in range(2):
                recon[:, r, 0, :n_rtn] = int_chi[:, :, r] / sqrt_area[:, None]
        else:
            flen = geom.face_length[ef]
            w0 = 0.5 * geom.d_perp * np.sqrt(flen)      # d_TF/d * int_F psi_0
            for l in range(3):
                sl = fslice(l)
                for r in range(2):
                    recon[:, r, 0, sl.start + r * n_pf] = w0[:, l] / sqrt_area

        A1 = np.einsum("erau,eab,erbv->euv", recon, Ks, recon, optimize=True)

        # stabilization: delta = I_{U,T}(p_T^{k+1} v) - v
        mom_f = np.einsum("efjq,efaq,efq->efja", self.psi_e, self.pk1_f,
                          self.fq_w_e, optimize=True)
        rhs_ip = np.zeros((E, self.n_rtn, 2, n_pk1))
        rhs_ip[:, :3 * n_pf] = (
            np.einsum("efja,efr->efjra", mom_f, geom.normals)
            .reshape(E, 3 * n_pf, 2, n_pk1))
        if k >= 1:
            eye = np.zeros((2, self.n_pkm1, 2, n_pk1))
            for d in range(2):
                eye[d, :, d, :self.n_pkm1] = np.eye(self.n_pkm1)
            rhs_ip[:, 3 * n_pf:] = eye.reshape(2 * self.n_pkm1, 2, n_pk1)
        ip1 = np.linalg.solve(
            self.rtn_moments,
            rhs_ip.reshape(E, self.n_rtn, 2 * n_pk1)
        ).reshape(E, self.n_rtn, 2, n_pk1)

        delta_T = np.einsum("eira,erau->eiu", ip1, recon, optimize=True)
        delta_T[:, :, :n_rtn] -= np.eye(n_rtn)
        delta_F = np.einsum("efja,ecau->efcju", mom_f, recon,
                            optimize=True).reshape(E, 3, n_fv, nu)
        for l in range(3):
            sl = fslice(l)
            delta_F[:, l, :, sl] -= np.eye(n_fv)

        lam = 3.0 * hT**2 / area
        stab = (lam / hT**2)[:, None, None] * np.einsum(
            "eiu,eiv->euv", delta_T, delta_T, optimize=True)
        stab += (1.0 / hT)[:, None, None] * np.einsum(
            "efju,efjv->euv", delta_F, delta_F, optimize=True)

        return LocalOperatorSet(recon=recon, diff=A1 + stab, stab=stab,
                                mass0=mass0, jump=jump, norm1=norm1,
                                pressure_grad=G, lam=lam)

    # -- gathering ---------------------------------------------------------

    def _check_vector(self, v: HybridVectorField):
        if v.k != self.k or v.elem.shape != (self.mesh.num_elements, self.n_rtn) \
                or v.face.shape != (self.mesh.num_faces, self.n_fv):
            raise ValueError("vector field does not match this mesh/degree")

    def gather_vector(self, v: HybridVectorField) -> np.ndarray:
        """Local dof vectors (E, nu_loc): element block then the 3 face blocks."""
        E = self.mesh.num_elements
        self._check_vector(v)
        out = np.empty((E, self.nu_loc))
        out[:, :self.n_rtn] = v.elem
        out[:, self.n_rtn:] = v.face[self.mesh.element_faces].reshape(E, -1)
        return out

    def gather_scalar(self, q: HybridScalarField) -> np.ndarray:
        E = self.mesh.num_elements
        if q.k != self.k or q.elem.shape != (E, self.n_pk) \
                or q.face.shape != (self.mesh.num_faces, self.n_pf):
            raise ValueError("scalar field does not match this mesh/degree")
        out = np.empty((E, self.np_loc))
        out[:, :self.n_pk] = q.elem
        out[:, self.n_pk:] = q.face[self.mesh.element_faces].reshape(E, -1)
        return out

    def zero_vector(self, homogeneous_bc: bool = False) -> HybridVectorField:
        return HybridVectorField(
            self.k, np.zeros((self.mesh.num_elements, self.n_rtn)),
            np.zeros((self.mesh.num_faces, self.n_fv)), homogeneous_bc)

    def zero_scalar(self, zero_mean: bool = False) -> HybridScalarField:
        return HybridScalarField(
            self.k, np.zeros((self.mesh.num_elements, self.n_pk)),
            np.zeros((self.mesh.num_faces, self.n_pf)), zero_mean)

    # -- interpolation -----------------------------------------------------

    def project_face_vector(self, v) -> np.ndarray:
        """Componentwise pi^k_F of an analytic vector field, all faces: (F, n_fv)."""
        F, qi = self.fi_pts.shape[:2]
        vv = np.asarray(v(self.fi_pts.reshape(-1, 2)), dtype=float).reshape(F, qi, 2)
        coeffs = np.einsum("fjq,fqc,fq->fcj", self.psi_fi, vv, self.fi_w)
        return coeffs.reshape(F, self.n_fv)

    def interpolate_velocity(self, v, homogeneous_bc: bool = False
                             ) -> HybridVectorField:
        """I^k_{U,h}: RTN moment interpolation inside, face L2 projections."""
        mesh = self.mesh
        E, F = mesh.num_elements, mesh.num_faces
        qi = self.fi_pts.shape[1]
        face = self.project_face_vector(v)

        vv_f = np.asarray(v(self.fi_pts.reshape(-1, 2)),
                          dtype=float).reshape(F, qi, 2)[mesh.element_faces]
        vn = np.einsum("efqc,efc->efq", vv_f, self.geom.normals)
        mom = [np.einsum("efjq,efq,efq->efj", self.psi_fi_e, vn,
                         self.fi_w_e).reshape(E, -1)]
        if self.k >= 1:
            vv = np.asarray(v(self.iv_pts.reshape(-1, 2)),
                            dtype=float).reshape(E, -1, 2)
            mom.append(np.einsum("ebq,eqd,eq->edb", self.pkm1_iv, vv,
                                 self.iv_w).reshape(E, -1))
        elem = np.linalg.solve(self.rtn_moments,
                               np.concatenate(mom, axis=1)[:, :, None])[:, :, 0]
        if homogeneous_bc:
            face[mesh.boundary] = 0.0
        return HybridVectorField(self.k, elem, face, homogeneous_bc)

    def interpolate_pressure(self, q, zero_mean: bool = False
                             ) -> HybridScalarField:
        mesh = self.mesh
        E, F = mesh.num_elements, mesh.num_faces
        qv = np.asarray(q(self.iv_pts.reshape(-1, 2)), dtype=float).reshape(E, -1)
        elem = np.einsum("eaq,eq,eq->ea", self.pk_iv, qv, self.iv_w)
        qf = np.asarray(q(self.fi_pts.reshape(-1, 2)), dtype=float).reshape(F, -1)
        face = np.einsum("fjq,fq,fq->fj", self.psi_fi, qf, self.fi_w)
        if zero_mean:
            sqrt_area = np.sqrt(self.geom.area)
            mean = (elem[:, 0] * sqrt_area).sum() / self.geom.area.sum()
            elem[:, 0] -= mean * sqrt_area
        return HybridScalarField(self.k, elem, face, zero_mean)

    def scalar_mean(self, q: HybridScalarField) -> float:
        return float((q.elem[:, 0] * np.sqrt(self.geom.area)).sum())

    # -- inner products, norms --------------------------------------------

    def _face_diff_values(self, v: HybridVectorField) -> np.ndarray:
        """(v_F - v_T) at the face quadrature points, per (element, edge)."""
        self._check_vector(v)
        vT = np.einsum("em,efmqc->efqc", v.elem, self.rtn_f)
        return self._vector_face_values(
            v.face[self.mesh.element_faces].reshape(len(v.elem), -1)) - vT

    def inner_product_0h(self, a: HybridVectorField, b: HybridVectorField
                         ) -> float:
        al, bl = self.gather_vector(a), self.gather_vector(b)
        return float(np.einsum("eu,euv,ev->", al, self.ops.mass0, bl,
                               optimize=True))

    def norm_0T_squared(self, v: HybridVectorField) -> np.ndarray:
        """Pointwise-evaluated squares: stable under cancellation."""
        self._check_vector(v)
        vals = np.einsum("em,emqc->eqc", v.elem, self.rtn_v)
        out = np.einsum("eqc,eqc,eq->e", vals, vals, self.vq_w)
        dv = self._face_diff_values(v)
        out += self.geom.diameter * np.einsum("efqc,efqc,efq->e", dv, dv,
                                              self.fq_w_e)
        return out

    def norm_0h(self, a: HybridVectorField) -> float:
        return float(np.sqrt(self.norm_0T_squared(a).sum()))

    def norm_1T_squared(self, v: HybridVectorField) -> np.ndarray:
        self._check_vector(v)
        g = np.einsum("em,emqcd->eqcd", v.elem, self.rtn_g)
        out = np.einsum("eqcd,eqcd,eq->e", g, g, self.vq_w)
        dv = self._face_diff_values(v)
        out += np.einsum("efqc,efqc,efq->e", dv, dv, self.fq_w_e) \
            / self.geom.diameter
        return out

    def norm_1h(self, v: HybridVectorField) -> float:
        return float(np.sqrt(self.norm_1T_squared(v).sum()))

    def norm_1infty_h(self, v: HybridVectorField) -> float:
        g = np.einsum("em,emqcd->eqcd", v.elem, self.rtn_gs)
        grad_sup = np.sqrt((g**2).sum(axis=(2, 3))).max(axis=1)
        vT = np.einsum("em,efmqc->efqc", v.elem, self.rtn_fs)
        coeffs = v.face[self.mesh.element_faces].reshape(
            len(v.elem), 3, 2, self.n_pf)
        vF = np.einsum("efcj,efjq->efqc", coeffs, self.psi_fs_e)
        dsup = np.sqrt(((vF - vT)**2).sum(axis=3)).max(axis=2)
        return float((grad_sup + dsup.max(axis=1) / self.geom.diameter).max())

    def element_sup(self, v: HybridVectorField) -> np.ndarray:
        """sup_T |v_T| over the dense element samples: (E,)."""
        vals = np.einsum("em,emqc->eqc", v.elem, self.rtn_s)
        return np.sqrt((vals**2).sum(axis=2)).max(axis=1)

    def broken_l2_norm(self, v: HybridVectorField) -> float:
        return float(np.linalg.norm(v.elem))

    # -- reconstruction, diffusion, coupling --------------------------------

    def reconstruct(self, v: HybridVectorField) -> np.ndarray:
        """p_T^{k+1} v coefficients, (E, 2, n_pk1) in the P^{k+1} basis."""
        return np.einsum("erau,eu->era", self.ops.recon, self.gather_vector(v))

    def diffusion_form(self, w: HybridVectorField, v: HybridVectorField) -> float:
        wl, vl = self.gather_vector(w), self.gather_vector(v)
        return float(np.einsum("eu,euv,ev->", wl, self.ops.diff, vl,
                               optimize=True))

    def apply_pressure_gradient(self, q: HybridScalarField) -> np.ndarray:
        """G_T q in RTN coefficients, (E, n_rtn)."""
        return np.einsum("ema,ea->em", self.ops.pressure_grad,
                         self.gather_scalar(q))

    def divergence_coupling(self, v: HybridVectorField, q: HybridScalarField
                            ) -> float:
        return float(np.einsum("em,em->", v.elem, self.apply_pressure_gradient(q)))

    # -- convection ----------------------------------------------------------

    def _vector_face_values(self, face_coeffs_gathered: np.ndarray) -> np.ndarray:
        E = self.mesh.num_elements
        c = face_coeffs_gathered.reshape(E, 3, 2, self.n_pf)
        return np.einsum("efcj,efjq->efqc", c, self.psi_e)

    def conv_residual(self, w_elem: np.ndarray, v_loc: np.ndarray) -> np.ndarray:
        """t_h(w, v, .) against every local test dof: (E, nu_loc)."""
        E = self.mesh.num_elements
        n_rtn = self.n_rtn
        wv = np.einsum("em,emqc->eqc", w_elem, self.rtn_v)
        vg = np.einsum("em,emqcd->eqcd", v_loc[:, :n_rtn], self.rtn_g)
        conv = np.einsum("eqd,eqcd->eqc", wv, vg)
        out = np.zeros((E, self.nu_loc))
        out[:, :n_rtn] = np.einsum("eqc,emqc,eq->em", conv, self.rtn_v,
                                   self.vq_w, optimize=True)
        wn = np.einsum("em,efmq->efq", w_elem, self.rtn_fn)
        vT = np.einsum("em,efmqc->efqc", v_loc[:, :n_rtn], self.rtn_f)
        vF = self._vector_face_values(v_loc[:, n_rtn:])
        dv = vF - vT
        wdv = 0.5 * wn[:, :, :, None] * dv
        out[:, :n_rtn] += np.einsum("efqc,efmqc,efq->em", wdv, self.rtn_f,
                                    self.fq_w_e, optimize=True)
        fpart = np.einsum("efqc,efjq,efq->efcj", wdv, self.psi_e, self.fq_w_e,
                          optimize=True)
        out[:, n_rtn:] = fpart.reshape(E, -1)
        return out

    def conv_jacobians(self, w_elem: np.ndarray, v_loc: np.ndarray):
        """(d/dw, d/dv) of conv_residual: two (E, nu_loc, nu_loc) blocks.

        The w derivative has nonzero columns only in the element block, since
        the transporting field enters through w_T alone.
        """
        E = self.mesh.num_elements
        n_rtn, nu = self.n_rtn, self.nu_loc
        wv = np.einsum("em,emqc->eqc", w_elem, self.rtn_v)
        vg = np.einsum("em,emqcd->eqcd", v_loc[:, :n_rtn], self.rtn_g)
        wn = np.einsum("em,efmq->efq", w_elem, self.rtn_fn)
        vT = np.einsum("em,efmqc->efqc", v_loc[:, :n_rtn], self.rtn_f)
        vF = self._vector_face_values(v_loc[:, n_rtn:])
        dv = vF - vT

        Jw = np.zeros((E, nu, nu))
        Jv = np.zeros((E, nu, nu))
        wq = self.vq_w
        fw = self.fq_w_e

        # w-slot: volume (chi_j . grad) v . tests, faces (chi_j . n) dv . tests
        conv_j = np.einsum("ejqd,eqcd->ejqc", self.rtn_v, vg)
        Jw[:, :n_rtn, :n_rtn] = np.einsum(
            "ejqc,emqc,eq->emj", conv_j, self.rtn_v, wq, optimize=True)
        Jw[:, :n_rtn, :n_rtn] += 0.5 * np.einsum(
            "efjq,efqc,efmqc,efq->emj", self.rtn_fn, dv, self.rtn_f, fw,
            optimize=True)
        fw_face = 0.5 * np.einsum(
            "efjq,efqc,efiq,efq->efcij", self.rtn_fn, dv, self.psi_e, fw,
            optimize=True)
        Jw[:, n_rtn:, :n_rtn] = fw_face.reshape(E, 3 * self.n_fv, n_rtn)

        # v-slot, element trial: volume (w . grad) chi_j, faces -chi_j trace
        conv_v = np.einsum("eqd,ejqcd->ejqc", wv, self.rtn_g)
        Jv[:, :n_rtn, :n_rtn] = np.einsum(
            "ejqc,emqc,eq->emj", conv_v, self.rtn_v, wq, optimize=True)
        wnT = 0.5 * np.einsum("efq,efjqc->efjqc", wn, self.rtn_f)
        Jv[:, :n_rtn, :n_rtn] -= np.einsum(
            "efjqc,efmqc,efq->emj", wnT, self.rtn_f, fw, optimize=True)
        tmp = np.einsum("efjqc,efiq,efq->efcij", wnT, self.psi_e, fw,
                        optimize=True)
        Jv[:, n_rtn:, :n_rtn] -= tmp.reshape(E, 3 * self.n_fv, n_rtn)

        # v-slot, face trial Phi_(c,j): dv gains +e_c psi_j on that face only
        wnF = 0.5 * np.einsum("efq,efjq->efjq", wn, self.psi_e)
        Jv[:, :n_rtn, n_rtn:] = np.einsum(
            "efjq,efmqc,efq->emfcj", wnF, self.rtn_f, fw,
            optimize=True).reshape(E, n_rtn, 3 * self.n_fv)
        diag = np.einsum("efjq,efiq,efq->efij", wnF, self.psi_e, fw,
                         optimize=True)
        for l in range(3):
            sl = slice(n_rtn + l * self.n_fv, n_rtn + (l + 1) * self.n_fv)
            for c in range(2):
                cc = slice(sl.start + c * self.n_pf, sl.start + (c + 1) * self.n_pf)
                Jv[:, cc, cc] += diag[:, l]
        return Jw, Jv

    def trilinear_form(self, w: HybridVectorField, v: HybridVectorField,
                       z: HybridVectorField) -> float:
        r = self.conv_residual(w.elem, self.gather_vector(v))
        return float(np.einsum("eu,eu->", r, self.gather_vector(z)))

    def upwind_form(self, alpha: np.ndarray, w: HybridVectorField,
                    v: HybridVectorField) -> float:
        wl, vl = self.gather_vector(w), self.gather_vector(v)
        per = np.einsum("eu,euv,ev->e", wl, self.ops.jump, vl, optimize=True)
        return float((alpha * per).sum())

    def upwind_seminorm(self, alpha: np.ndarray, v: HybridVectorField) -> float:
        dv = self._face_diff_values(v)
        per = np.einsum("efqc,efqc,efq->e", dv, dv, self.fq_w_e)
        return float(np.sqrt((np.asarray(alpha) * per).sum()))

    # -- solenoidality -------------------------------------------------------

    def check_divergence_free(self, v: HybridVectorField, boundary_normal=None
                              ) -> DivergenceReport:
        """Pointwise divergence, normal jumps, boundary flux, RTN remainder.

        `boundary_normal` is an optional exact vector field; the boundary
        metric then measures the defect against pi^k_F of its normal trace
        (zero data when omitted).
        """
        mesh = self.mesh
        F, qf = self.psi_f.shape[0], self.fq_pts.shape[1]

        div = np.einsum("em,emq->eq", v.elem, self.rtn_divs)
        max_div = float(np.abs(div).max())

        tn = np.einsum("em,efmq->efq", v.elem, self.rtn_fn)
        acc = np.zeros((F, qf))
        np.add.at(acc, mesh.element_faces, tn)
        interior = ~mesh.boundary
        max_jump = float(np.abs(acc[interior]).max()) if interior.any() else 0.0

        b = mesh.boundary
        if boundary_normal is None:
            gvals = 0.0
        else:
            qi = self.fi_pts.shape[1]
            vv = np.asarray(boundary_normal(self.fi_pts[b].reshape(-1, 2)),
                            dtype=float).reshape(-1, qi, 2)
            eb, lb = self.face_side[b, 0, 0], self.face_side[b, 0, 1]
            nrm = self.geom.normals[eb, lb]
            gn = np.einsum("fqc,fc->fq", vv, nrm)
            gcoef = np.einsum("fjq,fq,fq->fj", self.psi_fi[b], gn, self.fi_w[b])
            gvals = np.einsum("fj,fjq->fq", gcoef, self.psi_f[b])
        max_bdry = float(np.abs(acc[b] - gvals).max()) if b.any() else 0.0

        vals = np.einsum("em,emqc->eqc", v.elem, self.rtn_v)
        proj = np.einsum("eqc,eaq,eq->eac", vals, self.pk_v, self.vq_w)
        samp = np.einsum("em,emqc->eqc", v.elem, self.rtn_s)
        rec = np.einsum("eac,eaq->eqc", proj, self.pk_s)
        max_comp = float(np.abs(samp - rec).max())

        scale = float(np.sqrt((samp**2).sum(axis=2)).max()) if samp.size else 0.0
        return DivergenceReport(max_divergence=max_div, max_interior_jump=max_jump,
                                max_boundary_flux_error=max_bdry,
                                max_rtn_complement=max_comp, scale=scale)
