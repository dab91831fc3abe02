"""Polynomial bases on triangles and edges, quadrature, projectors, RTN space.

All basis machinery is written batched over a leading element axis; the
per-entity classes wrap the batched kernels with a singleton axis.  Element
bases are orthonormalized against the quadrature-backed L2 inner product so
that mass matrices are identities and local operators stay well conditioned
independently of the element size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as _leg
from scipy.special import roots_jacobi, roots_legendre

MAX_QUAD_DEGREE = 14  # 2*(k_max + 2) + 4 with k_max = 3


class QuadratureDegreeError(ValueError):
    """Requested polynomial exactness exceeds the supported cap."""


class SingularBasisError(RuntimeError):
    """A Gram or moment matrix came out singular (broken basis/quadrature)."""


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def _points_per_direction(degree: int) -> int:
    if degree < 0:
        raise QuadratureDegreeError(f"degree must be >= 0, got {degree}")
    if degree > MAX_QUAD_DEGREE:
        raise QuadratureDegreeError(
            f"degree {degree} exceeds supported cap {MAX_QUAD_DEGREE}"
        )
    return degree // 2 + 1


@lru_cache(maxsize=None)
def reference_triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Legendre x Gauss-Jacobi rule on the unit triangle.

    Returns points (q, 2) and positive weights summing to 1/2, exact for all
    polynomials of total degree <= max(degree, 2*m - 1).
    """
    m = _points_per_direction(degree)
    xg, wg = roots_legendre(m)            # [-1, 1], weight 1
    a = 0.5 * (xg + 1.0)
    wa = 0.5 * wg
    xj, wj = roots_jacobi(m, 1.0, 0.0)    # [-1, 1], weight (1 - x)
    b = 0.5 * (xj + 1.0)
    wb = 0.25 * wj
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = np.column_stack([(A * (1.0 - B)).ravel(), B.ravel()])
    wts = np.outer(wa, wb).ravel()
    return pts, wts


@lru_cache(maxsize=None)
def reference_segment_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1]: points (q,), weights summing to 1."""
    m = _points_per_direction(degree)
    xg, wg = roots_legendre(m)
    return 0.5 * (xg + 1.0), 0.5 * wg


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray          # (q, 2) physical coordinates
    weights: np.ndarray         # (q,) positive, summing to the entity measure
    exactness_degree: int


def map_rule_to_triangles(verts: np.ndarray, degree: int):
    """Batched physical rule on triangles `verts` of shape (E, 3, 2)."""
    ref_pts, ref_wts = reference_triangle_rule(degree)
    v0 = verts[:, 0]
    J = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=2)  # (E, 2, 2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    pts = v0[:, None, :] + np.einsum("edr,qr->eqd", J, ref_pts)
    wts = np.abs(det)[:, None] * ref_wts[None, :]
    return pts, wts


def map_rule_to_segments(endpoints: np.ndarray, degree: int):
    """Batched physical rule on segments `endpoints` of shape (E, 2, 2)."""
    ref_pts, ref_wts = reference_segment_rule(degree)
    a, b = endpoints[:, 0], endpoints[:, 1]
    length = np.linalg.norm(b - a, axis=1)
    pts = a[:, None, :] + ref_pts[None, :, None] * (b - a)[:, None, :]
    wts = length[:, None] * ref_wts[None, :]
    return pts, wts


def quadrature_rule(entity: np.ndarray, degree: int) -> QuadratureRule:
    """Physical quadrature on a triangle (3, 2) or segment (2, 2) entity."""
    entity = np.asarray(entity, dtype=float)
    m = _points_per_direction(degree)
    if entity.shape == (3, 2):
        pts, wts = map_rule_to_triangles(entity[None], degree)
    elif entity.shape == (2, 2):
        pts, wts = map_rule_to_segments(entity[None], degree)
    else:
        raise ValueError(f"entity must have shape (3, 2) or (2, 2), got {entity.shape}")
    return QuadratureRule(points=pts[0], weights=wts[0], exactness_degree=2 * m - 1)


# ---------------------------------------------------------------------------
# Monomial tables (scaled, centered coordinates)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> tuple[tuple[int, int], ...]:
    """Exponent pairs of all 2D monomials up to `degree`, graded by total degree."""
    return tuple((d - j, j) for d in range(degree + 1) for j in range(d + 1))


def scalar_space_dim(degree: int) -> int:
    """dim P^degree on a triangle; 0 for the conventional P^{-1} = {0}."""
    if degree < 0:
        return 0
    return (degree + 1) * (degree + 2) // 2


def monomial_values(points, center, scale, degree: int):
    """Values and gradients of scaled monomials ((x-c)/h)^a ((y-c)/h)^b.

    points: (E, Q, 2); center: (E, 2); scale: (E,).
    Returns vals (E, nm, Q) and grads (E, nm, Q, 2).
    """
    expo = np.array(monomial_exponents(degree))
    X = (points - center[:, None, :]) / scale[:, None, None]
    ax, ay = expo[:, 0], expo[:, 1]
    # x^(a-1) with the a = 0 case forced to zero.
    px = X[:, None, :, 0] ** ax[None, :, None]
    py = X[:, None, :, 1] ** ay[None, :, None]
    pxm = np.where(ax[None, :, None] > 0,
                   X[:, None, :, 0] ** np.maximum(ax - 1, 0)[None, :, None], 0.0)
    pym = np.where(ay[None, :, None] > 0,
                   X[:, None, :, 1] ** np.maximum(ay - 1, 0)[None, :, None], 0.0)
    vals = px * py
    inv_h = 1.0 / scale[:, None, None]
    grads = np.stack([ax[None, :, None] * pxm * py * inv_h,
                      ay[None, :, None] * px * pym * inv_h], axis=3)
    return vals, grads


def orthonormalize(vals: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """Transform C with C @ vals orthonormal in the quadrature inner product.

    vals: (E, n, Q) generator values; wts: (E, Q).  Done as a two-pass
    Cholesky QR, which reproduces the Gram-Schmidt result to roundoff while
    staying batched.
    """
    n = vals.shape[1]
    eye = np.eye(n)

    def one_pass(C):
        V = np.einsum("eim,emq->eiq", C, vals)
        G = np.einsum("eiq,eq,ejq->eij", V, wts, V)
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise SingularBasisError("Gram matrix not positive definite") from exc
        return np.linalg.solve(L, C)

    C = np.broadcast_to(eye, (vals.shape[0], n, n)).copy()
    C = one_pass(C)
    C = one_pass(C)
    return C


# ---------------------------------------------------------------------------
# Scalar bases
# ---------------------------------------------------------------------------

class ScalarBasis:
    """L2-orthonormal polynomial basis on a triangle or an edge."""

    def __init__(self, entity: np.ndarray, degree: int):
        entity = np.asarray(entity, dtype=float)
        self.entity = entity
        self.degree = degree
        if entity.shape == (3, 2):
            self.kind = "triangle"
            self.dimension = scalar_space_dim(degree)
            self._center = entity.mean(axis=0)[None, :]
            self._scale = np.array([np.linalg.norm(
                entity[[1, 2, 0]] - entity, axis=1).max()])
            rule = quadrature_rule(entity, min(2 * degree, MAX_QUAD_DEGREE))
            vals, _ = monomial_values(rule.points[None], self._center,
                                      self._scale, degree)
            self._coeffs = orthonormalize(vals, rule.weights[None])[0]
        elif entity.shape == (2, 2):
            self.kind = "segment"
            self.dimension = degree + 1
            self._length = float(np.linalg.norm(entity[1] - entity[0]))
        else:
            raise ValueError(f"unsupported entity shape {entity.shape}")

    def _param(self, points: np.ndarray) -> np.ndarray:
        a, b = self.entity
        t = (points - a) @ (b - a) / ((b - a) @ (b - a))
        return 2.0 * t - 1.0

    def value(self, points: np.ndarray) -> np.ndarray:
        """Basis values at physical points (q, 2); returns (dim, q)."""
        points = np.atleast_2d(points)
        if self.kind == "segment":
            s = self._param(points)
            scale = np.sqrt((2 * np.arange(self.degree + 1) + 1) / self._length)
            return _leg.legvander(s, self.degree).T * scale[:, None]
        vals, _ = monomial_values(points[None], self._center, self._scale,
                                  self.degree)
        return self._coeffs @ vals[0]

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Basis gradients at physical points; returns (dim, q, 2)."""
        points = np.atleast_2d(points)
        if self.kind == "segment":
            a, b = self.entity
            tang = (b - a) / self._length
            s = self._param(points)
            dvander = np.stack(
                [_leg.legval(s, _leg.legder(np.eye(self.degree + 1)[j]))
                 for j in range(self.degree + 1)])
            scale = np.sqrt((2 * np.arange(self.degree + 1) + 1) / self._length)
            ds = (2.0 / self._length) * dvander * scale[:, None]
            return ds[:, :, None] * tang[None, None, :]
        _, grads = monomial_values(points[None], self._center, self._scale,
                                   self.degree)
        return np.einsum("im,mqd->iqd", self._coeffs, grads[0])


@dataclass
class PolyCoeffs:
    """Coefficients in an orthonormal basis, callable at physical points."""

    basis: object
    coeffs: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        vals = self.basis.value(np.atleast_2d(points))
        if vals.ndim == 2:                       # scalar basis: (n, q)
            return np.einsum("i,iq->q", self.coeffs, vals)
        return np.einsum("i,iqd->qd", self.coeffs, vals)


def l2_project(entity: np.ndarray, degree: int, f, quad_degree: int | None = None
               ) -> PolyCoeffs:
    """L2-orthogonal projection of a scalar function onto P^degree(entity)."""
    basis = ScalarBasis(entity, degree)
    if quad_degree is None:
        quad_degree = min(2 * degree + 10, MAX_QUAD_DEGREE)
    rule = quadrature_rule(basis.entity, quad_degree)
    vals = basis.value(rule.points)
    fv = np.asarray(f(rule.points), dtype=float)
    coeffs = vals @ (rule.weights * fv)
    return PolyCoeffs(basis=basis, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Raviart-Thomas-Nedelec space on a triangle
# ---------------------------------------------------------------------------

def rtn_space_dim(order: int) -> int:
    """dim RTN^order(T) in 2D: P^{order-1}(T)^2 plus the radial bump part."""
    if order < 1:
        raise ValueError("RTN order must be >= 1")
    return order * (order + 2)


def rtn_generator_coeffs(order: int, scalar_coeffs: np.ndarray) -> np.ndarray:
    """Monomial coefficients of the RTN^order generators, batched.

    scalar_coeffs: (E, n_s, nm_{order-1}) orthonormal P^{order-1} coefficients.
    Returns (E, n_rtn, 2, nm_order): the two P^{order-1} component copies
    followed by x P~^{order-1} members (x measured from the element center,
    which spans the same space).  The graded monomial order makes the
    degree-(order-1) exponent list a prefix of the degree-order one.
    """
    E, n_s, nm_lo = scalar_coeffs.shape
    expo_hi = monomial_exponents(order)
    index = {e: i for i, e in enumerate(expo_hi)}
    n_rtn = rtn_space_dim(order)
    C = np.zeros((E, n_rtn, 2, len(expo_hi)))
    C[:, :n_s, 0, :nm_lo] = scalar_coeffs
    C[:, n_s:2 * n_s, 1, :nm_lo] = scalar_coeffs
    for j in range(order):
        a, b = order - 1 - j, j
        g = 2 * n_s + j
        C[:, g, 0, index[(a + 1, b)]] = 1.0
        C[:, g, 1, index[(a, b + 1)]] = 1.0
    return C


class RTNBasis:
    """Orthonormalized basis of RTN^order(T) = P^{order-1}(T)^2 + x P^{order-1}(T)."""

    def __init__(self, entity: np.ndarray, order: int):
        entity = np.asarray(entity, dtype=float)
        if entity.shape != (3, 2):
            raise ValueError("RTN basis lives on a triangle")
        self.entity = entity
        self.order = order
        self.dimension = rtn_space_dim(order)
        self._center = entity.mean(axis=0)[None, :]
        self._scale = np.array([np.linalg.norm(
            entity[[1, 2, 0]] - entity, axis=1).max()])

        scalar = ScalarBasis(entity, order - 1)
        pad = np.zeros((1, scalar.dimension, len(monomial_exponents(order - 1))))
        pad[0] = scalar._coeffs
        gen = rtn_generator_coeffs(order, pad)

        rule = quadrature_rule(entity, min(2 * order, MAX_QUAD_DEGREE))
        vals, _ = monomial_values(rule.points[None], self._center, self._scale,
                                  order)
        gen_vals = np.einsum("eicm,emq->eiqc", gen, vals)       # (1, n, q, 2)
        flat = gen_vals.reshape(1, self.dimension, -1)          # (q, 2) flattened
        wts2 = np.repeat(rule.weights, 2)[None]
        T = orthonormalize(flat, wts2)
        self._coeffs = np.einsum("eij,ejcm->eicm", T, gen)[0]   # (n, 2, nm)

    def _tables(self, points: np.ndarray):
        return monomial_values(np.atleast_2d(points)[None], self._center,
                               self._scale, self.order)

    def value(self, points: np.ndarray) -> np.ndarray:
        """(n, q, 2) values at physical points."""
        vals, _ = self._tables(points)
        return np.einsum("icm,mq->iqc", self._coeffs, vals[0])

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """(n, q, 2, 2) Jacobians, entry [i, q, c, d] = d_d (basis_i)_c."""
        _, grads = self._tables(points)
        return np.einsum("icm,mqd->iqcd", self._coeffs, grads[0])

    def divergence(self, points: np.ndarray) -> np.ndarray:
        """(n, q) divergences at physical points."""
        _, grads = self._tables(points)
        return (np.einsum("im,mq->iq", self._coeffs[:, 0], grads[0][:, :, 0])
                + np.einsum("im,mq->iq", self._coeffs[:, 1], grads[0][:, :, 1]))

    def normal_trace(self, local_edge: int, points: np.ndarray) -> np.ndarray:
        """(n, q) normal components v . n_TF on the given local edge."""
        i, j = ((0, 1), (1, 2), (2, 0))[local_edge]
        e = self.entity[j] - self.entity[i]
        n = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        return self.value(points) @ n


def rtn_interpolate(entity: np.ndarray, order: int, v,
                    quad_degree: int | None = None) -> PolyCoeffs:
    """Moment interpolator onto RTN^order(T).

    Matches the L2 projection of degree order-2 inside the element and the
    L2 projection of degree order-1 of the normal trace on every edge.
    """
    basis = RTNBasis(entity, order)
    if quad_degree is None:
        quad_degree = min(2 * order + 10, MAX_QUAD_DEGREE)

    rows_basis = []
    rows_data = []
    for le, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        seg = basis.entity[[i, j]]
        rule = quadrature_rule(seg, quad_degree)
        face_basis = ScalarBasis(seg, order - 1)
        psi = face_basis.value(rule.points)                      # (order, q)
        ntr = basis.normal_trace(le, rule.points)                # (n, q)
        e = basis.entity[j] - basis.entity[i]
        n = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        vn = np.asarray(v(rule.points), dtype=float) @ n
        rows_basis.append(np.einsum("pq,nq,q->pn", psi, ntr, rule.weights))
        rows_data.append(psi @ (rule.weights * vn))
    if order >= 2:
        rule = quadrature_rule(basis.entity, quad_degree)
        vol_basis = ScalarBasis(basis.entity, order - 2)
        phi = vol_basis.value(rule.points)                       # (ns, q)
        bvals = basis.value(rule.points)                         # (n, q, 2)
        vv = np.asarray(v(rule.points), dtype=float)             # (q, 2)
        for d in range(2):
            rows_basis.append(np.einsum("pq,nq,q->pn", phi, bvals[:, :, d],
                                        rule.weights))
            rows_data.append(phi @ (rule.weights * vv[:, d]))
    M = np.vstack(rows_basis)
    m = np.concatenate(rows_data)
    try:
        coeffs = np.linalg.solve(M, m)
    except np.linalg.LinAlgError as exc:
        raise SingularBasisError("RTN moment matrix is singular") from exc
    return PolyCoeffs(basis=basis, coeffs=coeffs)
