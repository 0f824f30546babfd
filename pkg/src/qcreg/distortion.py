"""Scale-distortion control via singular-value clamping of map differentials.

The admissible set consists of 2x2 matrices whose singular values lie in
[k2, k1]. The Frobenius-nearest member for a matrix U diag(s1, s2) V^T is
U diag(clip(s1), clip(s2)) V^T; we clamp the *signed* second singular
value, so an orientation-reversed face (negative determinant) is pulled
back to positive orientation at sigma2 = k2.

A clamped per-face field is turned back into a map by a least-squares fit:
minimize sum_f area_f ||Dg_f - T_f||_F^2 over vertex positions, whose
normal equations are two Poisson problems with the weak-form divergence of
the target columns as load. Landmark vertices enter as Dirichlet values,
so they are met exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import BoundsConflictWarning, NonFiniteInput, SingularSystem
from .qc import PlanarMap

CONFLICT_RTOL = 1e-6


@dataclass(frozen=True)
class DistortionBounds:
    """Bounds 0 < k2 <= sigma2 <= sigma1 <= k1 on principal distortions."""

    k1: float
    k2: float

    def __post_init__(self):
        if not (0.0 < self.k2 <= self.k1):
            raise ValueError(f"need 0 < k2 <= k1, got k1={self.k1}, k2={self.k2}")


@dataclass(frozen=True)
class JacobianField:
    """Per-face 2x2 differentials of a piecewise-linear map."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[1:] != (2, 2):
            raise ValueError("values must be (n_faces, 2, 2)")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def singular_values(self):
        """(sigma1, signed sigma2) per face; sigma2 carries the det sign."""
        _, _, s1, s2, _, _ = numerics._svd2x2_batch(self.values)
        return s1, s2


def map_jacobian(source, planar_map):
    """Differential of the map on each face, rows (grad u, grad v)."""
    uv = planar_map.target_uv
    du = numerics.face_gradient(source, uv[:, 0])
    dv = numerics.face_gradient(source, uv[:, 1])
    return JacobianField(np.stack([du, dv], axis=1))


def _project_batch(M, bounds):
    cu, su, s1, s2, cv, sv = numerics._svd2x2_batch(M)
    s1c = np.clip(s1, bounds.k2, bounds.k1)
    s2c = np.clip(s2, bounds.k2, bounds.k1)
    return numerics._compose_batch(cu, su, s1c, s2c, cv, sv)


def project_bounds(df, bounds):
    """Frobenius-nearest matrix with singular values inside the bounds."""
    df = np.asarray(df, dtype=np.float64)
    if df.shape != (2, 2):
        raise ValueError("expected a 2x2 matrix")
    if not np.all(np.isfinite(df)):
        raise NonFiniteInput("non-finite differential")
    return _project_batch(df, bounds)


def project_jacobians(field, bounds):
    """Project every face differential onto the admissible set."""
    if not np.all(np.isfinite(field.values)):
        raise NonFiniteInput("non-finite differential field")
    return JacobianField(_project_batch(field.values, bounds))


def recover_map(source, target_field, landmarks=None, anchor=None, solver=None):
    """Least-squares map whose differential best matches a target field.

    At least one landmark or an ``anchor`` (vertex, position) pair is
    required; the underlying Poisson matrix has constants in its kernel.
    Pass a prefactorized ``solver`` (from :func:`constraint_solver`) to
    amortize repeated recoveries against the same constraint set.
    """
    if solver is None:
        solver = constraint_solver(source, landmarks, anchor)
    m = target_field.values
    out = np.empty((source.n_vertices, 2))
    for d in range(2):
        rhs = numerics.divergence_rhs(source, m[:, d, :])
        out[:, d] = solver.solve(rhs, constrained_values=solver._qcreg_values[:, d])
    pm = PlanarMap(source, out)
    fit = map_jacobian(source, pm).values - m
    res = float(np.sqrt(np.einsum("f,fij,fij->", source.face_areas, fit, fit)))
    object.__setattr__(pm, "fit_residual", res)
    return pm


def constraint_solver(source, landmarks=None, anchor=None):
    """Factorize the Poisson matrix once for a fixed constraint set."""
    con = {}
    if landmarks is not None and len(landmarks):
        for i, q in zip(landmarks.moving_indices, landmarks.target_uv):
            con[int(i)] = q
    if not con:
        if anchor is None:
            raise SingularSystem("recovery needs a landmark or an anchor")
        con[int(anchor[0])] = np.asarray(anchor[1], dtype=np.float64)
    system = numerics.cotan_system(source).with_constraints({i: 0.0 for i in con})
    solver = numerics.ConstrainedSolver(system)
    # values in sorted-index order, matching ConstrainedSolver.con_idx
    vals = np.array([con[i] for i in sorted(con)], dtype=np.float64).reshape(-1, 2)
    solver._qcreg_values = vals
    return solver


def project_map(
    source,
    planar_map,
    bounds,
    landmarks=None,
    iterations=1,
    anchor=None,
    solver=None,
    warn_on_conflict=True,
):
    """Iteratively push a map toward the distortion-bounded set.

    Each pass clamps the per-face singular values and refits the map by
    the Poisson recovery, keeping landmark positions exact. When landmark
    constraints are incompatible with the bounds the clamp can never win;
    this is reported as a BoundsConflictWarning carrying the overshoot,
    never as an error.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if solver is None:
        solver = constraint_solver(source, landmarks, anchor)
    g = planar_map
    for _ in range(int(iterations)):
        jac = map_jacobian(source, g)
        proj = project_jacobians(jac, bounds)
        g = recover_map(source, proj, landmarks, anchor, solver=solver)
    if warn_on_conflict:
        s1, s2 = map_jacobian(source, g).singular_values
        over = max(float(s1.max() - bounds.k1), float(bounds.k2 - s2.min()))
        if over > CONFLICT_RTOL * max(bounds.k1, 1.0):
            warnings.warn(
                f"constraints exceed distortion bounds by {over:g}",
                BoundsConflictWarning,
                stacklevel=2,
            )
    return g
