"""Quasiconformal machinery: Beltrami coefficients and the solver inverting them.

A piecewise-linear map f = u + iv over a parameter domain has one complex
derivative pair per face,

    f_z  = ((u_x + v_y) + i (v_x - u_y)) / 2,
    f_zb = ((u_x - v_y) + i (u_y + v_x)) / 2,

and Beltrami coefficient mu = f_zb / f_z. |mu| < 1 on a face exactly when
the face keeps positive orientation. The map is recovered from mu by
solving two elliptic systems div(A(mu) grad u) = 0 = div(A(mu) grad v)
with Dirichlet data, where A(mu) is the unit-determinant diffusion matrix
below; for per-face constant data this inversion is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import MuOutOfRange, NonFiniteValue, SingularSystem
from .mesh import cross2

COLLAPSE_EPS = 1e-14  # |f_z| below this marks a collapsed face


@dataclass(frozen=True)
class BeltramiField:
    """Per-face complex angle-distortion coefficients."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    @property
    def max_abs(self):
        return float(np.abs(self.values).max()) if len(self.values) else 0.0


@dataclass(frozen=True)
class PlanarMap:
    """Image positions of a parametrized mesh's vertices in the plane."""

    source: object  # ParamMesh
    target_uv: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.target_uv, dtype=np.float64)
        if t.shape != (self.source.n_vertices, 2):
            raise ValueError("target_uv must be (n_vertices, 2)")
        if not np.all(np.isfinite(t)):
            raise NonFiniteValue("non-finite map coordinate")
        t.flags.writeable = False
        object.__setattr__(self, "target_uv", t)

    @property
    def face_dets(self):
        """Signed area ratio (Jacobian determinant) per face."""
        p = self.target_uv[self.source.faces]
        img = 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return img / self.source.face_areas

    @property
    def diffeomorphic(self):
        """True when every face keeps positive orientation."""
        return bool((self.face_dets > 0).all())

    @classmethod
    def identity(cls, source):
        return cls(source, source.uv)


def _derivative_pair(source, target_uv):
    """Per-face (f_z, f_zb) of the piecewise-linear map source.uv -> target_uv."""
    du = numerics.face_gradient(source, target_uv[:, 0])
    dv = numerics.face_gradient(source, target_uv[:, 1])
    fz = (du[:, 0] + dv[:, 1] + 1j * (dv[:, 0] - du[:, 1])) / 2.0
    fzb = (du[:, 0] - dv[:, 1] + 1j * (du[:, 1] + dv[:, 0])) / 2.0
    return fz, fzb


def beltrami_from_derivatives(fz, fzb):
    """mu = f_zb / f_z with collapsed faces (|f_z| ~ 0) reported as 1+0i."""
    collapsed = np.abs(fz) < COLLAPSE_EPS
    safe = np.where(collapsed, 1.0, fz)
    mu = fzb / safe
    mu[collapsed] = 1.0 + 0.0j
    return mu


def beltrami_of_map(source, planar_map):
    """Beltrami coefficient field of a planar map, one value per face."""
    uv = planar_map.target_uv if hasattr(planar_map, "target_uv") else np.asarray(planar_map)
    fz, fzb = _derivative_pair(source, uv)
    return BeltramiField(beltrami_from_derivatives(fz, fzb))


def condition_number(mu):
    """Distortion ratio K = (1 + |mu|) / (1 - |mu|) = sigma1 / sigma2."""
    m = abs(mu)
    if m >= 1.0:
        raise MuOutOfRange(f"|mu| = {m:g} >= 1")
    return (1.0 + m) / (1.0 - m)


def threshold(field):
    """Zero out coefficients with |mu| >= 1, keep the rest unchanged."""
    v = field.values.copy()
    v[np.abs(v) >= 1.0] = 0.0
    return BeltramiField(v)


def _diffusion_batch(values):
    rho = values.real
    tau = values.imag
    m2 = rho * rho + tau * tau
    if np.any(m2 >= 1.0):
        raise MuOutOfRange("|mu| >= 1 is outside the admissible range")
    f = 1.0 / (1.0 - m2)
    A = np.empty(values.shape + (2, 2))
    A[..., 0, 0] = f * ((rho - 1.0) ** 2 + tau * tau)
    A[..., 0, 1] = f * (-2.0 * tau)
    A[..., 1, 0] = A[..., 0, 1]
    A[..., 1, 1] = f * ((1.0 + rho) ** 2 + tau * tau)
    return A


def diffusion_matrix(mu):
    """Unit-determinant SPD matrix A(mu) driving the elliptic systems.

    A = 1/(1-|mu|^2) [[(rho-1)^2 + tau^2,      -2 tau        ],
                      [      -2 tau,      (1+rho)^2 + tau^2 ]]
    with mu = rho + i tau; eigenvalues (1-|mu|)/(1+|mu|) and its inverse.
    """
    return _diffusion_batch(np.asarray(mu, dtype=np.complex128))


def lbs(source, mu, dirichlet):
    """Recover the planar map with prescribed Beltrami coefficient.

    Solves the two decoupled systems div(A(mu) grad .) = 0 with the given
    Dirichlet values; ``dirichlet`` maps vertex index -> 2D position (an
    iterable of (index, position) pairs is also accepted) and must contain
    enough constraints to pin the solution (typically the boundary loop,
    plus any landmark vertices).
    """
    items = dirichlet.items() if isinstance(dirichlet, dict) else dirichlet
    con = {int(i): np.asarray(p, dtype=np.float64) for i, p in items}  # last wins
    if not con:
        raise SingularSystem("lbs requires at least one Dirichlet constraint")
    A = _diffusion_batch(mu.values)
    system = numerics.assemble_div_a_grad(source, A)
    solver = numerics.ConstrainedSolver(
        system.with_constraints({i: 0.0 for i in con})
    )
    pos = np.array([con[i] for i in sorted(con)]).reshape(-1, 2)
    zeros = np.zeros(source.n_vertices)
    out = np.empty((source.n_vertices, 2))
    for d in range(2):
        out[:, d] = solver.solve(zeros, constrained_values=pos[:, d])
    return PlanarMap(source, out)


def smooth_beltrami(mu_prime, nu0, alpha, beta, steps, laplacian):
    """Relax a coefficient field toward mu' under neighbor averaging.

    Runs exactly ``steps`` iterations of

        nu <- (1 - alpha) nu + alpha mu' + beta (N nu)

    where N is the degree-normalized face-adjacency operator from
    :func:`numerics.face_neighbor_mean`. The output is re-thresholded so
    every face satisfies |nu| < 1 (large beta can push values outside the
    unit disk, which the downstream solver cannot accept).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    mp = mu_prime.values
    if len(mp) and np.abs(mp).max() >= 1.0:
        raise MuOutOfRange("smoothing target must satisfy |mu'| < 1")
    nu = nu0.values.copy()
    for _ in range(int(steps)):
        nu = (1.0 - alpha) * nu + alpha * mp + beta * (laplacian @ nu)
    return threshold(BeltramiField(nu))
