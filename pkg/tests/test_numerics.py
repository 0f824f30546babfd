import numpy as np
import pytest
import scipy.sparse as sp

import qcreg
from qcreg import numerics
from qcreg.errors import NonFiniteInput, NonPositiveDefiniteA, SingularSystem
from util import grid_param


def cotangent_oracle(param):
    """Textbook cotangent Laplacian, assembled edge by edge."""
    uv, faces = param.uv, param.faces
    n = param.n_vertices
    L = sp.lil_matrix((n, n))
    for f in faces:
        for k in range(3):
            i, j, o = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            a = uv[i] - uv[o]
            b = uv[j] - uv[o]
            cot = (a @ b) / (a[0] * b[1] - a[1] * b[0])
            L[i, j] -= cot / 2
            L[j, i] -= cot / 2
            L[i, i] += cot / 2
            L[j, j] += cot / 2
    return L.tocsr()


class TestFaceGradient:
    def test_linear_exact(self):
        p = grid_param(7)
        g = qcreg.face_gradient(p, 3 * p.uv[:, 0] + 2 * p.uv[:, 1])
        assert np.abs(g - [3.0, 2.0]).max() < 1e-12

    def test_constant_zero(self):
        p = grid_param(5)
        g = qcreg.face_gradient(p, np.full(p.n_vertices, 4.2))
        assert np.abs(g).max() < 1e-12

    def test_quadratic_first_order(self):
        # grad of the linear interpolant of u^2 is within O(h) of (2u, 0)
        p = grid_param(40)
        g = qcreg.face_gradient(p, p.uv[:, 0] ** 2)
        centroids = p.uv[p.faces].mean(axis=1)
        h = 2 ** 0.5 / 40
        err = np.abs(g - np.column_stack([2 * centroids[:, 0], np.zeros(len(g))])).max()
        assert err <= 2 * h


class TestAssembly:
    def test_identity_matches_cotangent(self):
        p = grid_param(6)
        eye = np.broadcast_to(np.eye(2), (p.n_faces, 2, 2))
        K = qcreg.assemble_div_a_grad(p, eye).matrix()
        assert abs(K - cotangent_oracle(p)).max() < 1e-10

    def test_identity_matches_cotangent_irregular(self):
        from util import jittered_param

        p = jittered_param(9, seed=2)
        eye = np.broadcast_to(np.eye(2), (p.n_faces, 2, 2))
        K = qcreg.assemble_div_a_grad(p, eye).matrix()
        assert abs(K - cotangent_oracle(p)).max() < 1e-10
        g = qcreg.face_gradient(p, 3 * p.uv[:, 0] + 2 * p.uv[:, 1])
        assert np.abs(g - [3.0, 2.0]).max() < 1e-11

    def test_row_sums_vanish(self):
        p = grid_param(6)
        rng = np.random.default_rng(0)
        A = np.broadcast_to(np.eye(2), (p.n_faces, 2, 2)).copy()
        A[:, 0, 0] += rng.uniform(0, 0.5, p.n_faces)
        A[:, 1, 1] += rng.uniform(0, 0.5, p.n_faces)
        K = qcreg.assemble_div_a_grad(p, A).matrix()
        assert np.abs(K.sum(axis=1)).max() < 1e-10

    def test_linear_in_a(self):
        p = grid_param(5)
        eye = np.broadcast_to(np.eye(2), (p.n_faces, 2, 2))
        K1 = qcreg.assemble_div_a_grad(p, eye).matrix()
        K2 = qcreg.assemble_div_a_grad(p, 2.0 * eye).matrix()
        assert abs(K2 - 2.0 * K1).max() < 1e-12

    def test_rejects_indefinite(self):
        p = grid_param(3)
        A = np.broadcast_to(np.diag([1.0, -1.0]), (p.n_faces, 2, 2))
        with pytest.raises(NonPositiveDefiniteA):
            qcreg.assemble_div_a_grad(p, A)


def path_graph_system(n):
    rows, cols, vals = [], [], []
    for i in range(n - 1):
        for r, c, v in ((i, i, 1.0), (i + 1, i + 1, 1.0), (i, i + 1, -1.0), (i + 1, i, -1.0)):
            rows.append(r)
            cols.append(c)
            vals.append(v)
    return qcreg.SparseSpdSystem(n, rows, cols, vals)


class TestSolveConstrained:
    def test_path_graph_ramp(self):
        n = 11
        system = path_graph_system(n).with_constraints({0: 0.0, n - 1: 1.0})
        x = qcreg.solve_constrained(system, np.zeros(n))
        np.testing.assert_allclose(x, np.linspace(0, 1, n), atol=1e-10)

    def test_all_constrained_verbatim(self):
        system = path_graph_system(4).with_constraints({0: 5.0, 1: -1.0, 2: 2.0, 3: 0.5})
        x = qcreg.solve_constrained(system, np.zeros(4))
        np.testing.assert_array_equal(x, [5.0, -1.0, 2.0, 0.5])

    def test_random_spd_matches_dense_oracle(self):
        rng = np.random.default_rng(7)
        n = 50
        M = rng.normal(size=(n, n))
        K = M @ M.T + n * np.eye(n)
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        system = qcreg.SparseSpdSystem(n, rows.reshape(-1), cols.reshape(-1), K.reshape(-1),
                                       constrained={0: 1.0})
        rhs = rng.normal(size=n)
        x = qcreg.solve_constrained(system, rhs)
        free = np.arange(1, n)
        expected = np.linalg.solve(K[1:, 1:], rhs[1:] - K[1:, 0] * 1.0)
        assert np.abs(x[free] - expected).max() < 1e-8

    def test_triplet_order_invariance(self):
        rng = np.random.default_rng(1)
        base = path_graph_system(9)
        perm = rng.permutation(len(base.vals))
        shuffled = qcreg.SparseSpdSystem(
            9, base.rows[perm], base.cols[perm], base.vals[perm], constrained={0: 0.0, 8: 1.0}
        )
        x1 = qcreg.solve_constrained(base.with_constraints({0: 0.0, 8: 1.0}), np.zeros(9))
        x2 = qcreg.solve_constrained(shuffled, np.zeros(9))
        assert np.abs(x1 - x2).max() < 1e-8

    def test_unconstrained_needs_compatible_rhs(self):
        system = path_graph_system(5)
        with pytest.raises(SingularSystem):
            qcreg.solve_constrained(system, np.ones(5))

    def test_unconstrained_compatible_rhs_solves(self):
        system = path_graph_system(5)
        rhs = np.array([1.0, 0.0, 0.0, 0.0, -1.0])
        x = qcreg.solve_constrained(system, rhs)
        K = system.matrix()
        assert np.linalg.norm(K @ x - rhs) < 1e-8

    def test_rejects_asymmetric(self):
        with pytest.raises(NonFiniteInput):
            qcreg.SparseSpdSystem(2, [0, 1], [1, 0], [1.0, 2.0])

    def test_cg_fallback_matches_direct(self, monkeypatch):
        monkeypatch.setattr(numerics, "CG_SIZE_THRESHOLD", 4)
        system = path_graph_system(20).with_constraints({0: 0.0, 19: 1.0})
        x = qcreg.solve_constrained(system, np.zeros(20))
        np.testing.assert_allclose(x, np.linspace(0, 1, 20), atol=1e-8)


class TestSvd2x2:
    def test_identity(self):
        s = qcreg.svd2x2(np.eye(2))
        assert s.sigma == (1.0, 1.0)
        assert s.orientation_sign == 1

    def test_diagonal(self):
        s = qcreg.svd2x2(np.diag([3.0, 0.1]))
        assert abs(s.sigma[0] - 3.0) < 1e-12
        assert abs(s.sigma[1] - 0.1) < 1e-12

    def test_zero_determinant_sign(self):
        s = qcreg.svd2x2(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert s.orientation_sign == 1

    def test_reflection_sign(self):
        s = qcreg.svd2x2(np.diag([1.0, -1.0]))
        assert s.orientation_sign == -1
        rec = s.u @ np.diag([s.sigma[0], s.orientation_sign * s.sigma[1]]) @ s.v.T
        assert np.abs(rec - np.diag([1.0, -1.0])).max() < 1e-12

    def test_random_reconstruction_and_eigen_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            m = rng.normal(size=(2, 2)) * rng.choice([0.1, 1.0, 10.0])
            s = qcreg.svd2x2(m)
            rec = s.u @ np.diag([s.sigma[0], s.orientation_sign * s.sigma[1]]) @ s.v.T
            assert np.abs(rec - m).max() < 1e-10 * max(1.0, np.abs(m).max())
            assert abs(np.linalg.det(s.u) - 1) < 1e-12
            assert abs(np.linalg.det(s.v) - 1) < 1e-12
            # eigenvalues of m^T m from the characteristic polynomial
            mtm = m.T @ m
            tr, det = mtm[0, 0] + mtm[1, 1], np.linalg.det(mtm)
            disc = max(tr * tr - 4 * det, 0.0)
            lam1 = (tr + np.sqrt(disc)) / 2
            lam2 = (tr - np.sqrt(disc)) / 2
            assert abs(s.sigma[0] - np.sqrt(lam1)) < 1e-10 * max(1.0, s.sigma[0])
            assert abs(s.sigma[1] - np.sqrt(max(lam2, 0.0))) < 1e-8 * max(1.0, s.sigma[0])
            # Frobenius identity
            assert abs((m * m).sum() - s.sigma[0] ** 2 - s.sigma[1] ** 2) < 1e-10 * max(
                1.0, (m * m).sum()
            )

    def test_nonfinite(self):
        with pytest.raises(NonFiniteInput):
            qcreg.svd2x2(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestFaceLaplacian:
    def test_constant_in_kernel(self):
        p = grid_param(4)
        L = qcreg.face_adjacency_laplacian(p).matrix()
        assert np.abs(L @ np.ones(p.n_faces)).max() < 1e-12

    def test_single_face(self):
        tri = qcreg.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        p = qcreg.ParamMesh.from_planar(tri)
        L = qcreg.face_adjacency_laplacian(p).matrix()
        assert L.shape == (1, 1)
        assert abs(L).max() == 0.0

    def test_two_faces_normalized(self):
        p = grid_param(1)  # two triangles sharing the diagonal
        N = numerics.face_neighbor_mean(p)
        out = N @ np.array([3.0, 7.0])
        np.testing.assert_allclose(out, [4.0, -4.0])
