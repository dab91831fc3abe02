import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from hymhd.hybrid import HybridSpace, HybridVectorField
from hymhd.mesh import compute_geometry, generate_structured_mesh
from hymhd.mms import compute_eoc
from hymhd.solver import assemble_functional, assemble_vector_gram


@pytest.fixture(scope="module")
def spaces():
    out = {}
    for n in (2, 3, 4):
        mesh = generate_structured_mesh(n)
        geom = compute_geometry(mesh)
        for k in (0, 1, 2):
            out[n, k] = HybridSpace(mesh, geom, k)
    return out


def constant_field(space, c):
    return space.interpolate_velocity(
        lambda X: np.broadcast_to(np.asarray(c, dtype=float), (len(X), 2)))


def random_field(space, rng, homogeneous=True):
    f = space.zero_vector(homogeneous)
    f.elem = rng.standard_normal(f.elem.shape)
    f.face = rng.standard_normal(f.face.shape)
    if homogeneous:
        f.face[space.mesh.boundary] = 0.0
    return f


def stream_velocity(X):
    """curl of (x(1-x)y(1-y))^2: divergence-free, vanishing on the boundary."""
    x, y = X[:, 0], X[:, 1]
    p = x * (1 - x) * y * (1 - y)
    dpdx = (1 - 2 * x) * y * (1 - y)
    dpdy = x * (1 - x) * (1 - 2 * y)
    return np.stack([2 * p * dpdy, -2 * p * dpdx], axis=1)


def stream_velocity_2(X):
    x, y = X[:, 0], X[:, 1]
    s2x, s2y = np.sin(np.pi * x) ** 2, np.sin(np.pi * y) ** 2
    dx = np.pi * np.sin(2 * np.pi * x) * s2y
    dy = np.pi * s2x * np.sin(2 * np.pi * y)
    return np.stack([dy, -dx], axis=1)


def global_poly(rng, degree):
    ex = [(d - j, j) for d in range(degree + 1) for j in range(d + 1)]
    co = rng.standard_normal((2, len(ex)))

    def f(X):
        out = np.zeros((len(X), 2))
        for (a, b), c0, c1 in zip(ex, co[0], co[1]):
            t = X[:, 0] ** a * X[:, 1] ** b
            out[:, 0] += c0 * t
            out[:, 1] += c1 * t
        return out

    return f


class TestInterpolation:
    def test_zero_field(self, spaces):
        sp = spaces[3, 1]
        v = sp.interpolate_velocity(lambda X: np.zeros((len(X), 2)))
        assert np.abs(v.elem).max() < 1e-14
        assert np.abs(v.face).max() < 1e-14

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_constants_reproduced(self, spaces, k):
        sp = spaces[3, k]
        v = constant_field(sp, (1.0, 2.0))
        vals = np.einsum("em,emqc->eqc", v.elem, sp.rtn_v)
        assert np.abs(vals - [1.0, 2.0]).max() < 1e-12
        fvals = np.einsum("fcj,fjq->fqc",
                          v.face.reshape(-1, 2, sp.n_pf), sp.psi_f)
        assert np.abs(fvals - [1.0, 2.0]).max() < 1e-12

    def test_homogeneous_flag_zeroes_boundary(self, spaces):
        sp = spaces[3, 1]
        v = sp.interpolate_velocity(stream_velocity)
        # field vanishes on the boundary: projections are tiny already
        assert np.abs(v.face[sp.mesh.boundary]).max() < 1e-12
        v0 = sp.interpolate_velocity(stream_velocity, homogeneous_bc=True)
        assert np.abs(v0.face[sp.mesh.boundary]).max() == 0.0

    @pytest.mark.parametrize("k", [0, 1])
    def test_l2_interpolation_order(self, k):
        def u0(X):
            x, y = X[:, 0], X[:, 1]
            return -np.stack([np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y),
                              np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)],
                             axis=1)
        errs, hs = [], []
        for n in (8, 16, 32):
            mesh = generate_structured_mesh(n)
            geom = compute_geometry(mesh)
            sp = HybridSpace(mesh, geom, k)
            v = sp.interpolate_velocity(u0)
            vals = np.einsum("em,emqc->eqc", v.elem, sp.rtn_iv)
            diff = vals - u0(sp.iv_pts.reshape(-1, 2)).reshape(vals.shape)
            errs.append(np.sqrt(np.einsum("eqc,eq->", diff**2, sp.iv_w)))
            hs.append(geom.h)
        rates = compute_eoc(errs, hs)
        assert rates[-1] == pytest.approx(k + 1, abs=0.15)

    def test_pressure_constant(self, spaces):
        sp = spaces[3, 1]
        q = sp.interpolate_pressure(lambda X: np.ones(len(X)))
        vals = np.einsum("ea,eaq->eq", q.elem, sp.pk_v)
        assert np.abs(vals - 1.0).max() < 1e-12

    def test_pressure_zero_mean_shift(self, spaces):
        sp = spaces[4, 1]
        q = sp.interpolate_pressure(lambda X: X[:, 0], zero_mean=True)
        assert abs(sp.scalar_mean(q)) < 1e-12
        # the shift is the global mean of x on the unit square
        vals = np.einsum("ea,eaq->eq", q.elem, sp.pk_v)
        exact = sp.vq_pts[:, :, 0] - 0.5
        assert np.abs(vals - exact).max() < 1e-11

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_global_poly_traces_match(self, spaces, k):
        rng = np.random.default_rng(5 + k)
        ex = [(d - j, j) for d in range(k + 1) for j in range(d + 1)]
        co = rng.standard_normal(len(ex))

        def q(X):
            return sum(c * X[:, 0] ** a * X[:, 1] ** b
                       for (a, b), c in zip(ex, co))
        sp = spaces[3, k]
        qh = sp.interpolate_pressure(q)
        elem_trace = np.einsum("ea,efaq->efq", qh.elem,
                               _elem_scalar_face_vals(sp))
        face_vals = np.einsum("fj,fjq->fq", qh.face, sp.psi_f)[
            sp.mesh.element_faces]
        assert np.abs(elem_trace - face_vals).max() < 1e-11


def _elem_scalar_face_vals(sp):
    """Element P^k basis traces on the face quadrature points: (E,3,n_pk,q)."""
    import hymhd.polyspace as ps
    mesh, geom = sp.mesh, sp.geom
    E = mesh.num_elements
    fpts = sp.fq_pts[mesh.element_faces]
    qf = fpts.shape[2]
    mono, _ = ps.monomial_values(fpts.reshape(E, 3 * qf, 2), geom.centroid,
                                 geom.diameter, sp.k)
    return np.einsum("eam,emfq->efaq", sp._C1[:, :sp.n_pk, :sp.n_pk],
                     mono.reshape(E, -1, 3, qf))


class TestInnerProductsNorms:
    def test_constant_inner_product(self, spaces):
        sp = spaces[3, 1]
        v = constant_field(sp, (1.0, 0.0))
        assert sp.inner_product_0h(v, v) == pytest.approx(1.0, rel=1e-12)

    def test_penalty_nonnegative(self, spaces):
        sp = spaces[2, 1]
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = random_field(sp, rng, homogeneous=False)
            l2sq = float((a.elem ** 2).sum())
            assert sp.inner_product_0h(a, a) >= l2sq - 1e-12

    def test_bilinearity(self, spaces):
        sp = spaces[2, 1]
        rng = np.random.default_rng(1)
        a, b, c = (random_field(sp, rng, False) for _ in range(3))
        lhs = sp.inner_product_0h(
            HybridVectorField(sp.k, a.elem + c.elem, a.face + c.face), b)
        rhs = sp.inner_product_0h(a, b) + sp.inner_product_0h(c, b)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_norm1h_of_constant_vanishes(self, spaces, k):
        sp = spaces[3, k]
        v = constant_field(sp, (3.0, -1.0))
        assert sp.norm_1h(v) < 1e-12

    def test_single_face_block_oracle(self, spaces):
        sp = spaces[2, 1]
        mesh = sp.mesh
        f = int(np.where(~mesh.boundary)[0][0])
        v = sp.zero_vector()
        v.face[f, 0] = 1.3
        v.face[f, 2] = -0.4
        # both adjacent elements see h_T^{-1} * ||v_F||^2_{L2(F)}
        coeff = np.array([v.face[f, :2], v.face[f, 2:]])
        l2f = float((coeff ** 2).sum())    # orthonormal face basis
        e1, e2 = mesh.face_elements[f]
        expect = l2f / sp.geom.diameter[e1] + l2f / sp.geom.diameter[e2]
        assert sp.norm_1h(v) ** 2 == pytest.approx(expect, rel=1e-12)

    def test_norm1h_interpolation_stability(self):
        vals = []
        for n in (4, 8, 16):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), 1)
            v = sp.interpolate_velocity(stream_velocity_2)
            vals.append(sp.norm_1h(v))
        # |I v|_{1,h} <= C |v|_{H1} with C stable under refinement
        assert max(vals) / min(vals) < 1.5

    def test_norm1infty_constant(self, spaces):
        sp = spaces[3, 0]
        assert sp.norm_1infty_h(constant_field(sp, (2.0, 2.0))) < 1e-12

    def test_norm1infty_linear_field(self, spaces):
        sp = spaces[2, 1]
        v = sp.interpolate_velocity(
            lambda X: np.stack([X[:, 0], np.zeros(len(X))], axis=1))
        # gradient sup = 1 and matching faces: jumps vanish
        assert sp.norm_1infty_h(v) == pytest.approx(1.0, rel=1e-10)

    def test_norm1infty_interpolation_stability(self):
        vals = []
        for n in (4, 8, 16):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), 1)
            vals.append(sp.norm_1infty_h(sp.interpolate_velocity(stream_velocity_2)))
        assert max(vals) / min(vals) < 1.5


class TestReconstruction:
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_elliptic_projection_roundtrip(self, spaces, k):
        rng = np.random.default_rng(10 + k)
        sp = spaces[3, k]
        poly = global_poly(rng, k + 1)
        w = sp.interpolate_velocity(poly)
        rec = sp.reconstruct(w)
        vals = np.einsum("era,eaq->eqr", rec, sp.pk1_v)
        exact = poly(sp.vq_pts.reshape(-1, 2)).reshape(vals.shape)
        assert np.abs(vals - exact).max() < 1e-11

    def test_constant_data(self, spaces):
        sp = spaces[2, 1]
        rec = sp.reconstruct(constant_field(sp, (4.0, -2.0)))
        vals = np.einsum("era,eaq->eqr", rec, sp.pk1_v)
        assert np.abs(vals - [4.0, -2.0]).max() < 1e-12

    def test_k0_mean_closure_uses_faces(self, spaces):
        """At k=0 the reconstruction mean comes from faces with d_TF/2 weights."""
        sp = spaces[2, 0]
        rng = np.random.default_rng(3)
        w = sp.interpolate_velocity(
            lambda X: np.stack([X[:, 0], np.zeros(len(X))], axis=1))
        w.elem = rng.standard_normal(w.elem.shape)    # element data must not matter
        rec = sp.reconstruct(w)
        mean = rec[:, :, 0] * np.sqrt(sp.geom.area)[:, None]
        flen = sp.geom.face_length[sp.mesh.element_faces]
        fcoef = w.face[sp.mesh.element_faces].reshape(-1, 3, 2, 1)
        face_int = fcoef[:, :, :, 0] * np.sqrt(flen)[:, :, None]
        expect = 0.5 * np.einsum("ef,efc->ec", sp.geom.d_perp, face_int)
        assert np.abs(mean - expect).max() < 1e-11


class TestDiffusion:
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_stabilization_polynomial_consistency(self, spaces, k):
        rng = np.random.default_rng(20 + k)
        sp = spaces[3, k]
        for _ in range(3):
            w = sp.interpolate_velocity(global_poly(rng, k + 1))
            wl = sp.gather_vector(w)
            s = np.einsum("eu,euv,ev->", wl, sp.ops.stab, wl)
            assert abs(s) < 1e-11

    def test_lifted_constant_in_kernel(self, spaces):
        sp = spaces[2, 1]
        v = constant_field(sp, (1.0, 5.0))
        assert abs(sp.diffusion_form(v, v)) < 1e-11

    @pytest.mark.parametrize("k", [0, 1])
    def test_spectral_equivalence_constants(self, k):
        consts = []
        for n in (2, 4, 8):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), k)
            c1, c2 = spectral_equivalence_bounds(sp)
            consts.append((c1, c2))
        c1s = [c[0] for c in consts]
        c2s = [c[1] for c in consts]
        assert min(c1s) > 0
        assert max(c1s) / min(c1s) < 1.1
        assert max(c2s) / min(c2s) < 1.1


def spectral_equivalence_bounds(sp):
    """min/max generalized eigenvalues of a_T against the 1,T Gram."""
    lo, hi = np.inf, 0.0
    E = sp.mesh.num_elements
    step = max(1, E // 8)
    for e in range(0, E, step):
        A = sp.ops.diff[e]
        N = sp.ops.norm1[e]
        K = np.zeros((sp.nu_loc, 2))
        for d in range(2):
            c = np.zeros(2)
            c[d] = 1.0
            K[:sp.n_rtn, d] = np.einsum("mqc,q,c->m", sp.rtn_v[e],
                                        sp.vq_w[e], c)
            for l in range(3):
                f = sp.mesh.element_faces[e, l]
                base = sp.n_rtn + l * sp.n_fv + d * sp.n_pf
                K[base, d] = np.sqrt(sp.geom.face_length[f])
        Q, _ = np.linalg.qr(np.column_stack([K, np.eye(sp.nu_loc)[:, :-2]]))
        Z = Q[:, 2:]
        w = sla.eigh(Z.T @ A @ Z, Z.T @ N @ Z, eigvals_only=True)
        lo, hi = min(lo, w[0]), max(hi, w[-1])
    return lo, hi


class TestPressureGradient:
    def test_constant_pressure_in_kernel(self, spaces):
        sp = spaces[3, 1]
        q = sp.interpolate_pressure(lambda X: np.full(len(X), 3.5))
        assert np.abs(sp.apply_pressure_gradient(q)).max() < 1e-12

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_linear_pressure_exact_gradient(self, spaces, k):
        sp = spaces[3, k]
        q = sp.interpolate_pressure(lambda X: X[:, 0])
        G = sp.apply_pressure_gradient(q)
        vals = np.einsum("em,emqc->eqc", G, sp.rtn_v)
        assert np.abs(vals - [1.0, 0.0]).max() < 1e-11

    def test_adjointness(self, spaces):
        sp = spaces[2, 1]
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = random_field(sp, rng, homogeneous=False)
            q = sp.zero_scalar()
            q.elem = rng.standard_normal(q.elem.shape)
            q.face = rng.standard_normal(q.face.shape)
            lhs = sp.divergence_coupling(v, q)
            # right side evaluated by direct quadrature
            div = np.einsum("em,emq->eq", v.elem, sp.rtn_div)
            qv = np.einsum("ea,eaq->eq", q.elem, sp.pk_v)
            rhs = -np.einsum("eq,eq,eq->", qv, div, sp.vq_w)
            tn = np.einsum("em,efmq->efq", v.elem, sp.rtn_fn)
            qf = np.einsum("efj,efjq->efq", q.face[sp.mesh.element_faces],
                           sp.psi_e)
            rhs += np.einsum("efq,efq,efq->", qf, tn, sp.fq_w_e)
            assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-11)


class TestDivergenceCoupling:
    def test_divfree_interpolate_annihilates(self, spaces):
        sp = spaces[3, 1]
        v = sp.interpolate_velocity(stream_velocity, homogeneous_bc=True)
        rng = np.random.default_rng(4)
        for _ in range(10):
            q = sp.zero_scalar()
            q.elem = rng.standard_normal(q.elem.shape)
            q.face = rng.standard_normal(q.face.shape)
            q.elem[:, 0] -= (q.elem[:, 0] * np.sqrt(sp.geom.area)).sum() \
                * np.sqrt(sp.geom.area) / sp.geom.area.sum()
            assert abs(sp.divergence_coupling(v, q)) < 1e-11

    def test_constant_pressure_annihilated(self, spaces):
        sp = spaces[3, 0]
        rng = np.random.default_rng(5)
        v = random_field(sp, rng, homogeneous=True)
        q = sp.interpolate_pressure(lambda X: np.ones(len(X)))
        assert abs(sp.divergence_coupling(v, q)) < 1e-12

    def test_exact_value_against_continuous_form(self, spaces):
        """B_h(I w, I q) = -int (div w) q for polynomial data at k=1.

        w = (x(1-x), y(1-y)) has w.n = 0 on the boundary and div w =
        2 - 2x - 2y, and q = x; the integral is 1/6.
        """
        sp = spaces[4, 1]
        w = sp.interpolate_velocity(
            lambda X: np.stack([X[:, 0] * (1 - X[:, 0]),
                                X[:, 1] * (1 - X[:, 1])], axis=1))
        q = sp.interpolate_pressure(lambda X: X[:, 0])
        # oracle: -int_0^1 int_0^1 (2 - 2x - 2y) x = 1/6
        assert sp.divergence_coupling(w, q) == pytest.approx(1 / 6, rel=1e-12)


class TestDivergenceReport:
    def test_zero_field(self, spaces):
        sp = spaces[2, 0]
        rep = sp.check_divergence_free(sp.zero_vector())
        assert rep.max_divergence == 0.0
        assert rep.max_interior_jump == 0.0
        assert rep.max_boundary_flux_error == 0.0

    @pytest.mark.parametrize("k", [0, 1])
    def test_manufactured_initial_velocity(self, k):
        def u0(X):
            x, y = X[:, 0], X[:, 1]
            return -np.stack([np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y),
                              np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)],
                             axis=1)
        mesh = generate_structured_mesh(8)
        sp = HybridSpace(mesh, compute_geometry(mesh), k)
        v = sp.interpolate_velocity(u0)
        rep = sp.check_divergence_free(v, boundary_normal=u0)
        assert rep.worst_relative() < 1e-10

    def test_linear_field_reports_divergence(self, spaces):
        sp = spaces[3, 0]
        v = sp.interpolate_velocity(
            lambda X: np.stack([X[:, 0], np.zeros(len(X))], axis=1))
        rep = sp.check_divergence_free(v)
        assert rep.max_divergence == pytest.approx(1.0, rel=1e-10)


class TestConvection:
    @pytest.mark.parametrize("k", [0, 1])
    def test_non_dissipativity_and_skew_symmetry(self, spaces, k):
        """t_h(w, v, v) = 0 and t_h(w, v, z) = -t_h(w, z, v) on Z x U_{h,0}^2.

        Relative to the Cauchy-Schwarz scale of the pairing, since the
        identities are pure cancellations of O(1) element contributions.
        """
        sp = spaces[3, k]
        rng = np.random.default_rng(30 + k)
        for trial in range(100):
            a, b = rng.uniform(0.3, 2.0, size=2)
            w = sp.interpolate_velocity(
                lambda X: a * stream_velocity(X) + b * stream_velocity_2(X),
                homogeneous_bc=True)
            v = random_field(sp, rng)
            z = random_field(sp, rng)
            vl, zl = sp.gather_vector(v), sp.gather_vector(z)
            r_v = sp.conv_residual(w.elem, vl)
            r_z = sp.conv_residual(w.elem, zl)
            scale_vv = np.linalg.norm(r_v) * np.linalg.norm(vl)
            assert abs(float(np.einsum("eu,eu->", r_v, vl))) < 1e-11 * scale_vv
            skew = (float(np.einsum("eu,eu->", r_v, zl))
                    + float(np.einsum("eu,eu->", r_z, vl)))
            scale_vz = (np.linalg.norm(r_v) * np.linalg.norm(zl)
                        + np.linalg.norm(r_z) * np.linalg.norm(vl))
            assert abs(skew) < 1e-11 * scale_vz

    def test_boundedness_ratio_stable(self):
        """|t_h| / (||w_h||_L2 |v|_{1,inf,h} ||z||_{0,h}) stays bounded.

        The random-trial estimate of the constant must not grow under
        refinement (growth would signal an unbounded form).
        """
        rng = np.random.default_rng(42)
        worst = []
        for n in (2, 4, 8):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), 1)
            ratio = 0.0
            trials = [(random_field(sp, rng, False),
                       random_field(sp, rng, False),
                       random_field(sp, rng, False)) for _ in range(20)]
            trials.append((sp.interpolate_velocity(stream_velocity_2),
                           sp.interpolate_velocity(stream_velocity),
                           sp.interpolate_velocity(stream_velocity_2)))
            for w, v, z in trials:
                t = abs(sp.trilinear_form(w, v, z))
                denom = (sp.broken_l2_norm(w) * sp.norm_1infty_h(v)
                         * np.sqrt(sp.inner_product_0h(z, z)))
                ratio = max(ratio, t / denom)
            worst.append(ratio)
        for a, b in zip(worst, worst[1:]):
            assert b < 1.5 * a


class TestUpwind:
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_lifted_polynomial_vanishes(self, spaces, k):
        rng = np.random.default_rng(50 + k)
        sp = spaces[3, k]
        w = sp.interpolate_velocity(global_poly(rng, k))
        alpha = np.ones(sp.mesh.num_elements)
        assert abs(sp.upwind_form(alpha, w, w)) < 1e-12

    def test_alpha_scaling(self, spaces):
        sp = spaces[2, 1]
        rng = np.random.default_rng(6)
        w = random_field(sp, rng)
        v = random_field(sp, rng)
        alpha = rng.uniform(0.5, 2.0, sp.mesh.num_elements)
        assert sp.upwind_form(2 * alpha, w, v) == pytest.approx(
            2 * sp.upwind_form(alpha, w, v), rel=1e-13)

    def test_seminorm_of_interpolate_decays(self):
        """|I w|_{alpha,h} realizes sup_z j(I w, z)/|z|_alpha: order k+1/2."""
        for k in (0, 1):
            vals, hs = [], []
            for n in (4, 8, 16):
                mesh = generate_structured_mesh(n)
                sp = HybridSpace(mesh, compute_geometry(mesh), k)
                w = sp.interpolate_velocity(stream_velocity_2)
                alpha = np.ones(mesh.num_elements)
                vals.append(sp.upwind_seminorm(alpha, w))
                hs.append(sp.geom.h)
            rates = compute_eoc(vals, hs)
            assert rates[-1] == pytest.approx(k + 0.5, abs=0.15)


class TestConsistencyEstimates:
    @staticmethod
    def _dual_norm(sp, loc, which):
        ell = assemble_functional(sp, loc)
        gram, _, _ = assemble_vector_gram(sp, which)
        lu = spla.splu(gram.tocsc())
        return float(np.sqrt(max(ell @ lu.solve(ell), 0.0)))

    @pytest.mark.parametrize("k", [0, 1])
    def test_diffusive_consistency_order(self, k):
        def w(X):
            s = np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1])
            return np.stack([s, s], axis=1)

        def lap_w(X):
            return -2 * np.pi ** 2 * w(X)

        sups, hs = [], []
        for n in (4, 8, 16):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), k)
            iw = sp.interpolate_velocity(w, homogeneous_bc=True)
            lv = lap_w(sp.vq_pts.reshape(-1, 2)).reshape(
                mesh.num_elements, -1, 2)
            loc = np.zeros((mesh.num_elements, sp.nu_loc))
            loc[:, :sp.n_rtn] = -np.einsum("eqc,emqc,eq->em", lv, sp.rtn_v,
                                           sp.vq_w, optimize=True)
            loc -= np.einsum("euv,ev->eu", sp.ops.diff, sp.gather_vector(iw))
            sups.append(self._dual_norm(sp, loc, "norm1"))
            hs.append(sp.geom.h)
        rates = compute_eoc(sups, hs)
        assert rates[-1] == pytest.approx(k + 1, abs=0.15)

    @pytest.mark.parametrize("k", [0, 1])
    def test_time_consistency_order(self, k):
        def w(X):
            s = np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1])
            return np.stack([s, -s], axis=1)

        sups, hs = [], []
        for n in (4, 8, 16):
            mesh = generate_structured_mesh(n)
            sp = HybridSpace(mesh, compute_geometry(mesh), k)
            iw = sp.interpolate_velocity(w, homogeneous_bc=True)
            wv = w(sp.vq_pts.reshape(-1, 2)).reshape(mesh.num_elements, -1, 2)
            loc = np.zeros((mesh.num_elements, sp.nu_loc))
            loc[:, :sp.n_rtn] = np.einsum("eqc,emqc,eq->em", wv, sp.rtn_v,
                                          sp.vq_w, optimize=True)
            loc -= np.einsum("euv,ev->eu", sp.ops.mass0, sp.gather_vector(iw))
            sups.append(self._dual_norm(sp, loc, "mass0"))
            hs.append(sp.geom.h)
        rates = compute_eoc(sups, hs)
        assert rates[-1] == pytest.approx(k + 1, abs=0.15)


class TestMismatchErrors:
    def test_mesh_degree_mismatch_rejected(self, spaces):
        sp0, sp1 = spaces[3, 0], spaces[3, 1]
        with pytest.raises(ValueError, match="mesh/degree"):
            sp1.inner_product_0h(sp0.zero_vector(), sp0.zero_vector())
        other = spaces[2, 1]
        with pytest.raises(ValueError, match="mesh/degree"):
            sp1.norm_1h(other.zero_vector())
        with pytest.raises(ValueError, match="mesh/degree"):
            sp1.divergence_coupling(sp1.zero_vector(), sp0.zero_scalar())
