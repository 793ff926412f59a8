"""
Triangular meshes of the unit square, the Taylor-Hood (P2 velocity / P1
pressure) mixed space, and vectorized assembly of the forms used by the
time stepper.

Velocity coefficient vectors always carry every P2 node, boundary nodes
included, laid out as ``[u_x at all nodes, u_y at all nodes]``.  Boundary
entries are kept at zero; solvers restrict to ``space.free_dofs``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class MeshError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# quadrature

def _dunavant5():
    r15 = np.sqrt(15.0)
    a1, b1 = (9 - 2 * r15) / 21, (6 + r15) / 21
    a2, b2 = (9 + 2 * r15) / 21, (6 - r15) / 21
    w1, w2 = (155 + r15) / 1200, (155 - r15) / 1200
    bary = [(1 / 3, 1 / 3, 1 / 3),
            (a1, b1, b1), (b1, a1, b1), (b1, b1, a1),
            (a2, b2, b2), (b2, a2, b2), (b2, b2, a2)]
    weights = [9 / 40, w1, w1, w1, w2, w2, w2]
    return np.array(bary), np.array(weights)


def collapsed_gauss_rule(npts):
    """Duffy-collapsed Gauss-Legendre rule on the reference triangle.

    Exact for polynomials of degree ``2*npts - 2``.  Returns barycentric
    points of shape (npts**2, 3) and weights normalized to sum to one.
    """
    g, w = np.polynomial.legendre.leggauss(npts)
    u = 0.5 * (g + 1.0)
    wu = 0.5 * w
    xi, eta = np.meshgrid(u, u, indexing="ij")
    wx, wy = np.meshgrid(wu, wu, indexing="ij")
    x = xi.ravel()
    y = (eta * (1.0 - xi)).ravel()
    weights = (wx * wy * (1.0 - xi)).ravel() * 2.0
    bary = np.column_stack([1.0 - x - y, x, y])
    return bary, weights


@dataclass(frozen=True)
class Quadrature:
    bary: np.ndarray
    weights: np.ndarray  # sums to 1; multiply by the element area

    @classmethod
    def degree5(cls):
        return cls(*_dunavant5())

    @classmethod
    def collapsed(cls, npts):
        return cls(*collapsed_gauss_rule(npts))


def p2_values(bary):
    """P2 basis values at barycentric points, shape (nq, 6)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])


def p2_bary_derivatives(bary):
    """d(phi_a)/d(lambda_i), shape (nq, 6, 3)."""
    nq = bary.shape[0]
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    d = np.zeros((nq, 6, 3))
    d[:, 0, 0] = 4 * l0 - 1
    d[:, 1, 1] = 4 * l1 - 1
    d[:, 2, 2] = 4 * l2 - 1
    d[:, 3, 0], d[:, 3, 1] = 4 * l1, 4 * l0
    d[:, 4, 1], d[:, 4, 2] = 4 * l2, 4 * l1
    d[:, 5, 2], d[:, 5, 0] = 4 * l0, 4 * l2
    return d


# ---------------------------------------------------------------------------
# mesh

@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with per-vertex and per-edge boundary flags.

    ``n`` is set for structured unit-square meshes (used for fast point
    location); meshes read from file may leave it as ``None``.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray
    h: float
    n: int | None = None

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_vertices):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def signed_areas(self):
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(flat, axis=0, return_inverse=True,
                                           return_counts=True)
        inverse = inverse.reshape(-1)
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self):
        return self._edge_data[0]

    @property
    def triangle_edges(self):
        """Edge index of local edges (v0,v1), (v1,v2), (v2,v0)."""
        return self._edge_data[1]

    @property
    def boundary_edges(self):
        return self._edge_data[2] == 1

    def validate(self):
        if np.any(self.signed_areas <= 0):
            raise MeshError("triangle with non-positive signed area")
        counts = self._edge_data[2]
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        bverts = np.zeros(self.n_vertices, dtype=bool)
        bverts[self.edges[self.boundary_edges].ravel()] = True
        if not np.array_equal(bverts, self.boundary_vertices):
            raise MeshError("boundary flags do not match boundary edges")
        return self

    def locate(self, points):
        """Triangle index and barycentric coordinates of each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.n is not None:
            n = self.n
            i = np.clip(np.floor(points[:, 0] * n).astype(int), 0, n - 1)
            j = np.clip(np.floor(points[:, 1] * n).astype(int), 0, n - 1)
            cand = np.stack([2 * (j * n + i), 2 * (j * n + i) + 1], axis=1)
        else:
            cand = np.broadcast_to(np.arange(self.n_triangles),
                                   (points.shape[0], self.n_triangles))
        best = np.full(points.shape[0], -1)
        best_bary = np.zeros((points.shape[0], 3))
        best_score = np.full(points.shape[0], -np.inf)
        for c in range(cand.shape[1]):
            tri = cand[:, c]
            lam = self._barycentric(tri, points)
            score = lam.min(axis=1)
            better = score > best_score
            best[better] = tri[better]
            best_bary[better] = lam[better]
            best_score[better] = score[better]
        if np.any(best_score < -1e-10):
            raise MeshError("point outside the mesh")
        return best, best_bary

    def _barycentric(self, tri, points):
        p = self.vertices[self.triangles[tri]]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        r = points - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
        return np.column_stack([1.0 - l1 - l2, l1, l2])


def build_unit_square_mesh(n):
    """Structured criss-cross triangulation of (0,1)^2.

    Each of the n*n cells is split by one diagonal, alternating between
    neighbours.  The four corner cells are cut through the domain corner so
    that no triangle has all its vertices on the boundary (required for the
    Taylor-Hood pair to be inf-sup stable).
    """
    if n < 1:
        raise MeshError("need at least one subdivision per side")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            slash = (i + j) % 2 == 0
            if (i, j) in ((0, 0), (n - 1, n - 1)):
                slash = True
            elif (i, j) in ((n - 1, 0), (0, n - 1)):
                slash = False
            if slash:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    triangles = np.array(tris, dtype=np.int64)
    on_bnd = ((np.isclose(vertices[:, 0], 0.0) | np.isclose(vertices[:, 0], 1.0)
               | np.isclose(vertices[:, 1], 0.0) | np.isclose(vertices[:, 1], 1.0)))
    return Mesh(vertices, triangles, on_bnd, h=float(np.sqrt(2.0) / n), n=n)


def write_mesh(mesh, path):
    """Plain-text dump: counts, coordinates, index triples, boundary flags."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles} {float(mesh.h)!r} {mesh.n if mesh.n else 0}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines += [str(int(f)) for f in mesh.boundary_vertices]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    nv, nt = int(rows[0][0]), int(rows[0][1])
    h = float(rows[0][2])
    n = int(rows[0][3]) or None
    vertices = np.array(rows[1:1 + nv], dtype=float)
    triangles = np.array(rows[1 + nv:1 + nv + nt], dtype=np.int64)
    flags = np.array([r[0] for r in rows[1 + nv + nt:1 + 2 * nv + nt]], dtype=int)
    if vertices.shape != (nv, 2) or triangles.shape != (nt, 3) or flags.size != nv:
        raise MeshError(f"malformed mesh file {path}")
    return Mesh(vertices, triangles, flags.astype(bool), h=h, n=n).validate()


# ---------------------------------------------------------------------------
# mixed space

class _Pattern:
    """Fixed sparsity pattern for repeated assembly of element matrices."""

    def __init__(self, rows, cols, shape):
        coo = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=shape)
        csr = coo.tocsr()
        csr.sum_duplicates()
        self.shape = shape
        self.indptr = csr.indptr
        self.indices = csr.indices
        # position of every COO entry inside the CSR data array
        keys = rows.astype(np.int64) * shape[1] + cols
        row_of = np.repeat(np.arange(shape[0]), np.diff(csr.indptr))
        csr_keys = row_of.astype(np.int64) * shape[1] + csr.indices
        self.slot = np.searchsorted(csr_keys, keys)

    def build(self, values):
        data = np.bincount(self.slot, weights=values.ravel(),
                           minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()),
                             shape=self.shape)


class MixedSpace:
    """Taylor-Hood P2/P1 space on a mesh, with homogeneous Dirichlet velocity."""

    def __init__(self, mesh, quadrature=None):
        self.mesh = mesh
        self.quad = quadrature or Quadrature.degree5()
        nv = mesh.n_vertices
        self.n_p2 = nv + mesh.edges.shape[0]
        self.n_vel = 2 * self.n_p2
        self.n_pr = nv
        self.cells = np.hstack([mesh.triangles, nv + mesh.triangle_edges])
        self.cells.setflags(write=False)
        mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        self.nodes = np.vstack([mesh.vertices, mids])
        bnd = np.concatenate([mesh.boundary_vertices, mesh.boundary_edges])
        self.boundary_nodes = bnd
        vel_bnd = np.concatenate([bnd, bnd])
        self.free_dofs = np.flatnonzero(~vel_bnd)
        self.boundary_dofs = np.flatnonzero(vel_bnd)
        self.area = mesh.signed_areas
        if np.any(self.area <= 0):
            raise MeshError("mesh has inverted triangles")
        self._phi = p2_values(self.quad.bary)
        dbary = p2_bary_derivatives(self.quad.bary)
        self._grad_lambda = self._barycentric_gradients()
        # (nt, nq, 6, 2)
        self._grad_phi = np.einsum("qai,tix->tqax", dbary, self._grad_lambda)
        self._wdet = self.area[:, None] * self.quad.weights[None, :]
        rows = np.repeat(self.cells, 6, axis=1).ravel()
        cols = np.tile(self.cells, (1, 6)).ravel()
        self._scalar_pattern = _Pattern(rows, cols, (self.n_p2, self.n_p2))

    def _barycentric_gradients(self):
        p = self.mesh.vertices[self.mesh.triangles]
        x, y = p[:, :, 0], p[:, :, 1]
        det = 2.0 * self.area
        g = np.empty((p.shape[0], 3, 2))
        g[:, 0, 0] = (y[:, 1] - y[:, 2]) / det
        g[:, 1, 0] = (y[:, 2] - y[:, 0]) / det
        g[:, 2, 0] = (y[:, 0] - y[:, 1]) / det
        g[:, 0, 1] = (x[:, 2] - x[:, 1]) / det
        g[:, 1, 1] = (x[:, 0] - x[:, 2]) / det
        g[:, 2, 1] = (x[:, 1] - x[:, 0]) / det
        return g

    # -- helpers ------------------------------------------------------------
    def quadrature_points(self):
        """Physical quadrature points, shape (nt, nq, 2)."""
        p = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("qi,tix->tqx", self.quad.bary, p)

    def split(self, u):
        return u[:self.n_p2], u[self.n_p2:]

    def values_at_quad(self, u):
        """Velocity components and gradients at quadrature points.

        Returns ``(vals, grads)`` of shapes (nt, nq, 2) and (nt, nq, 2, 2)
        with ``grads[..., i, j] = d u_i / d x_j``.
        """
        ux, uy = self.split(u)
        loc = np.stack([ux[self.cells], uy[self.cells]], axis=-1)  # (nt, 6, 2)
        vals = np.einsum("qa,tai->tqi", self._phi, loc)
        grads = np.einsum("tqax,tai->tqix", self._grad_phi, loc)
        return vals, grads

    def scalar_matrix(self, local):
        return self._scalar_pattern.build(local)

    def vector_matrix(self, local):
        c = self.scalar_matrix(local)
        return sp.block_diag([c, c], format="csr")

    def zero_velocity(self):
        return VelocityField(self, np.zeros(self.n_vel))

    def interpolate(self, func):
        """Nodal P2 interpolant of ``func(x, y) -> (ux, uy)``; boundary zeroed."""
        fx, fy = func(self.nodes[:, 0], self.nodes[:, 1])
        c = np.concatenate([np.broadcast_to(fx, self.n_p2),
                            np.broadcast_to(fy, self.n_p2)]).astype(float)
        c[self.boundary_dofs] = 0.0
        return VelocityField(self, c)

    def interpolate_pressure(self, func):
        v = self.mesh.vertices
        return PressureField(self, np.asarray(func(v[:, 0], v[:, 1]), dtype=float))

    # -- cached operators ---------------------------------------------------
    @cached_property
    def mass(self):
        return assemble_mass(self)

    @cached_property
    def stiffness(self):
        return assemble_stiffness(self)

    @cached_property
    def divergence(self):
        return assemble_divergence(self)

    @cached_property
    def _convection_tensor(self):
        # T[t, a, b, c, x] = sum_q w psi_a psi_c d_x psi_b
        return np.einsum("tq,qa,qc,tqbx->tabcx", self._wdet, self._phi, self._phi,
                         self._grad_phi, optimize=True)

    @cached_property
    def pressure_mass_vector(self):
        w = np.zeros(self.n_pr)
        np.add.at(w, self.mesh.triangles.ravel(), np.repeat(self.area / 3.0, 3))
        return w

    @cached_property
    def pressure_mass(self):
        local = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
        vals = self.area[:, None, None] * local[None]
        t = self.mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        return sp.coo_matrix((vals.ravel(), (rows, cols)),
                             shape=(self.n_pr, self.n_pr)).tocsr()

    @cached_property
    def free_mass_factor(self):
        f = self.free_dofs
        return spla.splu(self.mass[f][:, f].tocsc())

    @cached_property
    def projection_solver(self):
        return _ProjectionSolver(self)

    @cached_property
    def free_stiffness_factor(self):
        f = self.free_dofs
        return spla.splu(self.stiffness[f][:, f].tocsc())


@dataclass(frozen=True, eq=False)
class VelocityField:
    space: MixedSpace
    coefficients: np.ndarray

    def __post_init__(self):
        if self.coefficients.shape != (self.space.n_vel,):
            raise ValueError(f"velocity vector of length {self.coefficients.shape}, "
                             f"space expects {self.space.n_vel}")

    @property
    def boundary_max(self):
        return float(np.max(np.abs(self.coefficients[self.space.boundary_dofs]), initial=0.0))


@dataclass(frozen=True, eq=False)
class PressureField:
    space: MixedSpace
    coefficients: np.ndarray
    gauge_fixed: bool = field(default=False)

    def mean(self):
        m = self.space.pressure_mass_vector
        return float(m @ self.coefficients / m.sum())

    def with_zero_mean(self):
        return PressureField(self.space, self.coefficients - self.mean(), True)


def _same_space(*fields):
    s = fields[0].space
    for f in fields[1:]:
        if f.space is not s:
            raise ValueError("fields live on different spaces")
    return s


# ---------------------------------------------------------------------------
# assembly

def assemble_mass(space):
    """Vector P2 mass matrix over all nodes (boundary rows retained)."""
    local = np.einsum("tq,qa,qb->tab", space._wdet, space._phi, space._phi)
    return space.vector_matrix(local)


def assemble_stiffness(space):
    """Vector P2 stiffness a(v, phi) = (grad v, grad phi)."""
    local = np.einsum("tq,tqax,tqbx->tab", space._wdet, space._grad_phi, space._grad_phi)
    return space.vector_matrix(local)


def assemble_divergence(space):
    """B[q, (c, s)] = (d_c psi_s, chi_q): pressure moments of the divergence."""
    chi = space.quad.bary  # P1 basis = barycentrics
    local = np.einsum("tq,qp,tqax->txpa", space._wdet, chi, space._grad_phi)  # (nt,2,3,6)
    t = space.mesh.triangles
    rows = np.broadcast_to(t[:, None, :, None], local.shape)
    cols = np.stack([space.cells, space.cells + space.n_p2], axis=1)
    cols = np.broadcast_to(cols[:, :, None, :], local.shape)
    return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(space.n_pr, space.n_vel)).tocsr()


def convection_matrix(space, v):
    """Scalar-block matrix C(v) with phi^T N(v) w = b(v, w, phi).

    ``C[a, b] = 1/2 (v . grad psi_b, psi_a) - 1/2 (v . grad psi_a, psi_b)``
    acts identically on both velocity components, so N(v) = diag(C, C).
    """
    coeffs = v.coefficients if isinstance(v, VelocityField) else v
    ux, uy = space.split(coeffs)
    loc = np.stack([ux[space.cells], uy[space.cells]], axis=-1)  # (nt, 6, 2)
    k = np.einsum("tabcx,tcx->tab", space._convection_tensor, loc, optimize=True)
    return space.scalar_matrix(0.5 * (k - k.transpose(0, 2, 1)))


def trilinear_matrix(space, v):
    """N(v) over the full vector space."""
    c = convection_matrix(space, v)
    return sp.block_diag([c, c], format="csr")


def trilinear_first_argument_matrix(space, w):
    """Matrix J(w) with phi^T J(w) d = b(d, w, phi) (Newton linearization)."""
    coeffs = w.coefficients if isinstance(w, VelocityField) else w
    wv, wg = space.values_at_quad(coeffs)
    phi, gphi, wd = space._phi, space._grad_phi, space._wdet
    blocks = [[None, None], [None, None]]
    for i in range(2):
        for c in range(2):
            # 1/2 (psi_s d_c w_i, psi_r) - 1/2 (psi_s d_c psi_r, w_i)
            t1 = np.einsum("tq,qr,qs,tq->trs", wd, phi, phi, wg[:, :, i, c])
            t2 = np.einsum("tq,tqr,qs,tq->trs", wd, gphi[:, :, :, c], phi, wv[:, :, i])
            blocks[i][c] = space.scalar_matrix(0.5 * (t1 - t2))
    return sp.bmat(blocks, format="csr")


def apply_trilinear(v, w, phi):
    """Skew-symmetrized b(v, w, phi) = 1/2 (v.grad w, phi) - 1/2 (v.grad phi, w)."""
    space = _same_space(v, w, phi)
    c = convection_matrix(space, v)
    wx, wy = space.split(w.coefficients)
    px, py = space.split(phi.coefficients)
    return float(px @ (c @ wx) + py @ (c @ wy))


def trilinear_gradient_first(space, w, phi):
    """Vector g with g . v = b(v, w, phi) for every v."""
    _, wg = space.values_at_quad(w)
    pv, pg = space.values_at_quad(phi)
    wv, _ = space.values_at_quad(w)
    # G_c = 1/2 sum_i (d_c w_i phi_i - d_c phi_i w_i)
    g = 0.5 * (np.einsum("tqic,tqi->tqc", wg, pv) - np.einsum("tqic,tqi->tqc", pg, wv))
    return _load_from_quad_values(space, g)


def _load_from_quad_values(space, vals):
    """Assemble (F, psi) from vector values at quadrature points (nt, nq, 2)."""
    loc = np.einsum("tq,qa,tqc->tca", space._wdet, space._phi, vals)
    cells = space.cells.ravel()
    return np.concatenate([
        np.bincount(cells, weights=loc[:, 0, :].ravel(), minlength=space.n_p2),
        np.bincount(cells, weights=loc[:, 1, :].ravel(), minlength=space.n_p2),
    ])


def assemble_load(space, func, t=None):
    """Load vector (f, psi) for ``func(x, y[, t]) -> (fx, fy)``."""
    pts = space.quadrature_points()
    x, y = pts[..., 0], pts[..., 1]
    fx, fy = func(x, y) if t is None else func(x, y, t)
    vals = np.stack([np.broadcast_to(fx, x.shape), np.broadcast_to(fy, x.shape)], axis=-1)
    return _load_from_quad_values(space, vals)


def matrix_triplets(matrix):
    """(row, col, value) triplets for debugging dumps."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    return list(zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist()))


# ---------------------------------------------------------------------------
# projections and discrete operators

class _ProjectionSolver:
    """Factored mass saddle system used for the J_h projection."""

    def __init__(self, space):
        f = space.free_dofs
        self.space = space
        self.lu = _saddle_factor(space, space.mass[f][:, f])

    def solve(self, load_free):
        space = self.space
        rhs = np.concatenate([load_free, np.zeros(space.n_pr + 1)])
        x = self.lu.solve(rhs)
        return x[:space.free_dofs.size], x[space.free_dofs.size:-1]


def _saddle_factor(space, velocity_block):
    """LU factor of [[K, -B^T, 0], [-B, 0, m], [0, m^T, 0]] on free dofs."""
    f = space.free_dofs
    b = space.divergence[:, f]
    m = sp.csr_matrix(space.pressure_mass_vector[:, None])
    mat = sp.bmat([[velocity_block, -b.T, None],
                   [-b, None, m],
                   [None, m.T, None]], format="csc")
    return spla.splu(mat)


def _projector(space):
    return space.projection_solver


def l2_project(space, f, target="J_h"):
    """L2 projection of a callable or VelocityField onto H_h or J_h.

    ``target="H_h"`` projects onto the full (Dirichlet) P2 velocity space;
    ``target="J_h"`` onto its discretely divergence-free subspace.
    """
    if isinstance(f, VelocityField):
        if f.space is not space:
            raise ValueError("field belongs to a different space")
        load = space.mass @ f.coefficients
    else:
        load = assemble_load(space, f)
    fr = space.free_dofs
    out = np.zeros(space.n_vel)
    if target == "H_h":
        out[fr] = space.free_mass_factor.solve(load[fr])
    elif target == "J_h":
        out[fr], _ = _projector(space).solve(load[fr])
    else:
        raise ValueError(f"unknown projection target {target!r}")
    if not np.all(np.isfinite(out)):
        raise MeshError("singular mass solve")
    return VelocityField(space, out)


def discrete_laplacian_apply(u):
    """Delta_h u, defined by (-Delta_h u, phi) = a(u, phi) for phi in H_h."""
    space = u.space
    fr = space.free_dofs
    au = space.stiffness @ u.coefficients
    out = np.zeros(space.n_vel)
    out[fr] = -space.free_mass_factor.solve(au[fr])
    return VelocityField(space, out)


def stokes_operator_apply(u):
    """Discrete Stokes operator P_h Delta_h u (J_h-valued)."""
    space = u.space
    fr = space.free_dofs
    au = space.stiffness @ u.coefficients
    out = np.zeros(space.n_vel)
    out[fr], _ = _projector(space).solve(-au[fr])
    return VelocityField(space, out)


def l2_norm(u):
    c = u.coefficients
    return float(np.sqrt(max(c @ (u.space.mass @ c), 0.0)))


def h1_seminorm(u):
    c = u.coefficients
    return float(np.sqrt(max(c @ (u.space.stiffness @ c), 0.0)))


def estimate_lambda1(space, tol=1e-8, max_iter=500, seed=0):
    """Smallest eigenvalue of A x = lambda M x on the Dirichlet velocity space.

    Both velocity components share the scalar spectrum, so the iteration runs
    on one scalar block.
    """
    fr = space.free_dofs[space.free_dofs < space.n_p2]
    a = space.stiffness[fr][:, fr].tocsc()
    m = space.mass[fr][:, fr].tocsr()
    lu = spla.splu(a)
    rng = np.random.default_rng(seed)
    # smooth positive start vector: the first eigenfunction does not change sign
    x = np.abs(rng.standard_normal(fr.size)) + 1.0
    lam_old = np.inf
    for it in range(1, max_iter + 1):
        y = lu.solve(m @ x)
        y /= np.sqrt(y @ (m @ y))
        lam = float(y @ (a @ y))
        x = y
        if abs(lam - lam_old) <= tol * lam:
            return lam
        lam_old = lam
    raise ConvergenceError(f"inverse power iteration did not converge in {max_iter} iterations "
                           f"(last estimate {lam})")


def inf_sup_constant(space):
    """Discrete inf-sup constant of the pair via a dense generalized eigenproblem.

    beta^2 is the smallest nonzero eigenvalue of B A^{-1} B^T p = s M_p p; the
    zero eigenvalue belongs to the constant pressure mode.  Meant for coarse
    meshes only.
    """
    fr = space.free_dofs
    b = space.divergence[:, fr].toarray()
    x = space.free_stiffness_factor.solve(b.T.copy())
    schur = b @ x
    schur = 0.5 * (schur + schur.T)
    evals = sla.eigh(schur, space.pressure_mass.toarray(), eigvals_only=True)
    return float(np.sqrt(max(evals[1], 0.0)))


def evaluate(u, points):
    """Point values of a velocity field, shape (npts, 2)."""
    space = u.space
    tri, bary = space.mesh.locate(points)
    phi = p2_values(bary)
    ux, uy = space.split(u.coefficients)
    cells = space.cells[tri]
    return np.column_stack([np.sum(phi * ux[cells], axis=1), np.sum(phi * uy[cells], axis=1)])


def inject(u, space):
    """Interpolate ``u`` onto the P2 nodes of another (typically finer) space."""
    vals = evaluate(u, space.nodes)
    c = np.concatenate([vals[:, 0], vals[:, 1]])
    c[space.boundary_dofs] = 0.0
    return VelocityField(space, c)
