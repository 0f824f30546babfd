"""Sparse SPD systems, linear FEM operators and closed-form 2x2 SVD.

Conventions: a face with uv corners p0, p1, p2 (positive signed area A)
carries the constant hat-function gradients

    grad phi_i = rot90(p_{i+2} - p_{i+1}) / (2 A),   rot90(x, y) = (-y, x),

so the gradient of a piecewise-linear scalar g is sum_i g_i grad phi_i,
exact for linear functions. Generalized stiffness matrices are

    K_ij = sum_f A_f (grad phi_i)^T A_f (grad phi_j),

which for A = I is the classical cotangent Laplacian (positive
semidefinite, zero row sums).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateFace,
    NonConvergence,
    NonFiniteInput,
    NonPositiveDefiniteA,
    SingularSystem,
)

EIG_FLOOR = 1e-10          # minimum eigenvalue for per-face coefficients
CG_SIZE_THRESHOLD = 200_000  # free unknowns above which CG replaces direct solve
CG_TOL = 1e-10


# ---------------------------------------------------------------------------
# per-face differential operators
# ---------------------------------------------------------------------------

def _gradients_and_areas(mesh):
    """(m, 3, 2) hat-function gradients and (m,) signed areas, cached."""
    if "grad" not in mesh._cache:
        uv, faces = mesh.uv, mesh.faces
        p0, p1, p2 = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
        e0, e1, e2 = p2 - p1, p0 - p2, p1 - p0
        d = p1 - p0
        e = p2 - p0
        area2 = d[:, 0] * e[:, 1] - d[:, 1] * e[:, 0]
        guard = 2.0 * 1e-12 * max(abs(float(area2.sum())) / 2.0, 1e-300)
        small = np.abs(area2) <= guard
        if small.any():
            raise DegenerateFace(int(np.flatnonzero(small)[0]), "degenerate uv face")
        G = np.stack(
            [
                np.stack([-e0[:, 1], e0[:, 0]], axis=1),
                np.stack([-e1[:, 1], e1[:, 0]], axis=1),
                np.stack([-e2[:, 1], e2[:, 0]], axis=1),
            ],
            axis=1,
        ) / area2[:, None, None]
        mesh._cache["grad"] = (G, area2 / 2.0)
    return mesh._cache["grad"]


def face_gradient(mesh, scalar):
    """Gradient of the linear interpolant of per-vertex values, per face.

    Returns an (m, 2) array; exact for globally linear functions.
    """
    scalar = np.asarray(scalar, dtype=np.float64)
    if scalar.shape != (mesh.n_vertices,):
        raise ValueError("scalar must have one value per vertex")
    G, _ = _gradients_and_areas(mesh)
    return np.einsum("fi,fid->fd", scalar[mesh.faces], G)


# ---------------------------------------------------------------------------
# sparse symmetric systems with Dirichlet constraints
# ---------------------------------------------------------------------------

class SparseSpdSystem:
    """Symmetric positive (semi)definite system in coordinate form.

    Dirichlet constraints are stored as an index -> value map and are
    eliminated at solve time (known columns moved to the right-hand side).
    """

    def __init__(self, dimension, rows, cols, vals, constrained=None):
        self.dimension = int(dimension)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.vals = np.asarray(vals, dtype=np.float64)
        self.constrained = dict(constrained or {})
        if not np.all(np.isfinite(self.vals)):
            raise NonFiniteInput("non-finite matrix entry")
        K = self.matrix()
        sym_gap = abs(K - K.T).max()
        scale = max(abs(K).max(), 1e-300)
        if sym_gap > 1e-12 * scale:
            raise NonFiniteInput(f"matrix not symmetric (gap {sym_gap:g})")

    def matrix(self):
        if not hasattr(self, "_csr"):
            self._csr = sp.coo_matrix(
                (self.vals, (self.rows, self.cols)),
                shape=(self.dimension, self.dimension),
            ).tocsr()
        return self._csr

    def with_constraints(self, constrained):
        out = SparseSpdSystem.__new__(SparseSpdSystem)
        out.dimension = self.dimension
        out.rows, out.cols, out.vals = self.rows, self.cols, self.vals
        out.constrained = dict(constrained)
        out._csr = self.matrix()
        return out


class ConstrainedSolver:
    """Factorized solver for repeated solves against one constrained matrix.

    The sparse factorization is computed once; ``solve`` then costs two
    triangular solves per right-hand side.
    """

    def __init__(self, system):
        K = system.matrix()
        n = system.dimension
        con_idx = np.array(sorted(system.constrained), dtype=np.int64)
        if len(con_idx) and (con_idx[0] < 0 or con_idx[-1] >= n):
            raise IndexError("constrained index out of range")
        self.con_idx = con_idx
        self.con_val = np.array([system.constrained[i] for i in con_idx], dtype=np.float64)
        free = np.ones(n, dtype=bool)
        free[con_idx] = False
        self.free_idx = np.flatnonzero(free)
        self.n = n
        self._pinned_zero = False
        if len(self.free_idx) == 0:
            self.K_ff = None
            return
        Kcsc = K.tocsc()
        self.K_fc = Kcsc[self.free_idx][:, con_idx] if len(con_idx) else None
        K_ff = Kcsc[self.free_idx][:, self.free_idx]
        if len(con_idx) == 0:
            # rank n-1 system (e.g. a pure Laplacian): pin the first index,
            # callers must supply a compatible right-hand side
            self._pinned_zero = True
            self.free_idx = self.free_idx[1:]
            self.K_fc = Kcsc[self.free_idx][:, :1]
            K_ff = Kcsc[self.free_idx][:, self.free_idx]
            self.con_idx = np.array([0], dtype=np.int64)
            self.con_val = np.zeros(1)
        self.K_ff = K_ff.tocsc()
        if len(self.free_idx) > CG_SIZE_THRESHOLD:
            self._lu = None
            diag = self.K_ff.diagonal()
            if np.any(diag <= 0):
                raise SingularSystem("non-positive diagonal in constrained system")
            self._jacobi = 1.0 / diag
        else:
            try:
                self._lu = spla.splu(self.K_ff)
            except RuntimeError as exc:
                raise SingularSystem(f"factorization failed: {exc}") from None

    def solve(self, rhs, constrained_values=None):
        """Solve for the full vector; constrained entries are returned verbatim."""
        rhs = np.asarray(rhs, dtype=np.float64)
        x = np.zeros(self.n)
        cv = self.con_val if constrained_values is None else np.asarray(constrained_values, float)
        x[self.con_idx] = cv
        if self.K_ff is None or self.K_ff.shape[0] == 0:
            return x
        b = rhs[self.free_idx]
        if self.K_fc is not None and len(cv):
            b = b - self.K_fc @ cv
        if self._lu is not None:
            xf = self._lu.solve(b)
        else:
            xf, info = spla.cg(
                self.K_ff,
                b,
                rtol=CG_TOL,
                atol=0.0,
                maxiter=10 * self.K_ff.shape[0],
                M=spla.LinearOperator(self.K_ff.shape, matvec=lambda v: self._jacobi * v),
            )
            if info != 0:
                raise NonConvergence(f"cg failed to converge (info={info})")
        x[self.free_idx] = xf
        bn = np.linalg.norm(b)
        res = np.linalg.norm(self.K_ff @ xf - b)
        if res > 1e-8 * max(bn, 1e-300) and res > 1e-12:
            raise NonConvergence(f"solve residual {res:g} exceeds tolerance")
        return x


def solve_constrained(system, rhs):
    """Solve ``K x = rhs`` honoring the system's Dirichlet constraints.

    With no constraints the matrix is rank deficient (constants in the
    kernel); the right-hand side must then be orthogonal to constants or
    SingularSystem is raised.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (system.dimension,):
        raise ValueError("rhs length mismatch")
    if not system.constrained:
        imbalance = abs(float(rhs.sum()))
        if imbalance > 1e-10 * max(np.abs(rhs).sum(), 1.0):
            raise SingularSystem("no constraints and rhs not orthogonal to constants")
    return ConstrainedSolver(system).solve(rhs)


def assemble_div_a_grad(mesh, a_field):
    """Assemble the stiffness matrix of ``-div(A grad u)`` for per-face A.

    Each A must be symmetric with eigenvalues above EIG_FLOOR. Row sums of
    the result vanish (constants are in the kernel).
    """
    A = np.asarray(a_field, dtype=np.float64)
    if A.shape != (mesh.n_faces, 2, 2):
        raise ValueError("a_field must be (n_faces, 2, 2)")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("non-finite coefficient matrix")
    asym = np.abs(A[:, 0, 1] - A[:, 1, 0])
    scale = np.abs(A).max(axis=(1, 2))
    bad = asym > 1e-10 * np.maximum(scale, 1.0)
    if bad.any():
        raise NonFiniteInput(f"asymmetric coefficient on face {int(np.flatnonzero(bad)[0])}")
    tr = A[:, 0, 0] + A[:, 1, 1]
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    lam_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
    bad = lam_min <= EIG_FLOOR
    if bad.any():
        raise NonPositiveDefiniteA(int(np.flatnonzero(bad)[0]))
    G, area = _gradients_and_areas(mesh)
    local = np.einsum("f,fid,fde,fje->fij", area, G, A, G)
    faces = mesh.faces
    rows = np.repeat(faces, 3).reshape(-1)
    cols = np.tile(faces, (1, 3)).reshape(-1)
    return SparseSpdSystem(mesh.n_vertices, rows, cols, local.reshape(-1))


def divergence_rhs(mesh, field):
    """Weak-form divergence load: rhs_i = sum_f A_f (grad phi_i) . m_f.

    ``field`` holds one 2-vector per face; the result pairs with the A = I
    stiffness matrix so that fitting a map to a realizable gradient field
    is exact.
    """
    m = np.asarray(field, dtype=np.float64)
    if m.shape != (mesh.n_faces, 2):
        raise ValueError("field must be (n_faces, 2)")
    G, area = _gradients_and_areas(mesh)
    contrib = np.einsum("f,fid,fd->fi", area, G, m)
    rhs = np.zeros(mesh.n_vertices)
    np.add.at(rhs, mesh.faces.reshape(-1), contrib.reshape(-1))
    return rhs


def cotan_system(mesh):
    """The A = I stiffness matrix (cotangent Laplacian), cached on the mesh."""
    if "cotan" not in mesh._cache:
        eye = np.broadcast_to(np.eye(2), (mesh.n_faces, 2, 2))
        mesh._cache["cotan"] = assemble_div_a_grad(mesh, eye)
    return mesh._cache["cotan"]


# ---------------------------------------------------------------------------
# closed-form 2x2 singular value decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Svd2x2:
    """Signed SVD ``m = u @ diag(sigma1, orientation_sign * sigma2) @ v.T``.

    u and v are proper rotations (det +1); sigma1 >= sigma2 >= 0 and
    orientation_sign is the sign of det(m) (+1 for det zero).
    """

    u: np.ndarray
    sigma: tuple
    v: np.ndarray
    orientation_sign: int


def _svd2x2_batch(M):
    """Rotation-diagonal-rotation decomposition of stacked 2x2 matrices.

    Returns (cu, su, s1, s2_signed, cv, sv) where the factors are
    U = [[cu, -su], [su, cu]], V likewise, and s1 >= |s2_signed|.
    """
    a, b = M[..., 0, 0], M[..., 0, 1]
    c, d = M[..., 1, 0], M[..., 1, 1]
    E = (a + d) / 2.0
    F = (a - d) / 2.0
    G = (c + b) / 2.0
    H = (c - b) / 2.0
    Q = np.hypot(E, H)
    R = np.hypot(F, G)
    s1 = Q + R
    s2 = Q - R
    a1 = np.arctan2(G, F)  # = phi + theta
    a2 = np.arctan2(H, E)  # = phi - theta
    phi = (a1 + a2) / 2.0
    theta = (a1 - a2) / 2.0
    return np.cos(phi), np.sin(phi), s1, s2, np.cos(theta), np.sin(theta)


def _compose_batch(cu, su, s1, s2, cv, sv):
    """Rebuild the stacked matrices U diag(s1, s2) V^T."""
    out = np.empty(np.broadcast(cu, s1).shape + (2, 2))
    out[..., 0, 0] = s1 * cu * cv + s2 * su * sv
    out[..., 0, 1] = s1 * cu * sv - s2 * su * cv
    out[..., 1, 0] = s1 * su * cv - s2 * cu * sv
    out[..., 1, 1] = s1 * su * sv + s2 * cu * cv
    return out


def svd2x2(m):
    """Closed-form SVD of one 2x2 matrix with rotation factors."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise ValueError("expected a 2x2 matrix")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("non-finite matrix entry")
    cu, su, s1, s2, cv, sv = _svd2x2_batch(m)
    sign = 1 if s2 >= 0 else -1
    u = np.array([[cu, -su], [su, cu]])
    v = np.array([[cv, -sv], [sv, cv]])
    return Svd2x2(u=u, sigma=(float(s1), float(abs(s2))), v=v, orientation_sign=sign)


# ---------------------------------------------------------------------------
# laplacians on the face-adjacency graph
# ---------------------------------------------------------------------------

def _face_adjacency(mesh):
    """Pairs (f, g) of faces sharing an edge, each unordered pair once."""
    if "face_adj" not in mesh._cache:
        edge_owner = {}
        pairs = []
        for fi, (a, b, c) in enumerate(mesh.faces):
            for i, j in ((a, b), (b, c), (c, a)):
                key = (int(min(i, j)), int(max(i, j)))
                other = edge_owner.get(key)
                if other is None:
                    edge_owner[key] = fi
                else:
                    pairs.append((other, fi))
        mesh._cache["face_adj"] = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return mesh._cache["face_adj"]


def face_adjacency_laplacian(mesh):
    """Combinatorial Laplacian (degree minus adjacency) over faces."""
    pairs = _face_adjacency(mesh)
    m = mesh.n_faces
    if len(pairs) == 0:
        return SparseSpdSystem(m, np.arange(m), np.arange(m), np.zeros(m))
    f, g = pairs[:, 0], pairs[:, 1]
    rows = np.concatenate([f, g, f, g])
    cols = np.concatenate([g, f, f, g])
    vals = np.concatenate([-np.ones(2 * len(pairs)), np.ones(2 * len(pairs))])
    return SparseSpdSystem(m, rows, cols, vals)


def face_neighbor_mean(mesh):
    """Degree-normalized face operator N with (N x)_f = mean of neighbors - x_f.

    Faces with no neighbors map to zero. Returned as a scipy CSR matrix
    suitable for repeated products against per-face (complex) fields.
    """
    pairs = _face_adjacency(mesh)
    m = mesh.n_faces
    if len(pairs) == 0:
        return sp.csr_matrix((m, m))
    f, g = pairs[:, 0], pairs[:, 1]
    deg = np.zeros(m)
    np.add.at(deg, f, 1.0)
    np.add.at(deg, g, 1.0)
    inv = np.zeros(m)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    rows = np.concatenate([f, g])
    cols = np.concatenate([g, f])
    vals = inv[rows]
    A = sp.coo_matrix((vals, (rows, cols)), shape=(m, m))
    D = sp.diags(np.where(deg > 0, 1.0, 0.0))
    return (A - D).tocsr()
