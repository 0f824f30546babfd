"""Conformal flattening of disk-topology surfaces by least-squares energy.

Each 3D triangle gets an isometric local frame (x along its first edge,
y in-plane perpendicular). Writing the flat image as one complex number w
per vertex, the antiholomorphic derivative per face is a fixed complex
linear form in the corner values, and the total conformal energy

    E(w) = sum_f area_f |dw/dzbar|_f|^2

is a positive semidefinite Hermitian quadratic form. Minimizing it with
two vertices pinned at 0 and 1 fixes the similarity gauge and yields the
flattening; the per-face |mu| of the result measures residual angle
distortion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import dijkstra

from .errors import FlippedFaces, NonFiniteScale, NotDiskTopology
from .mesh import ParamMesh, cross2

REPAIR_ITERATIONS = 20


@dataclass(frozen=True)
class FlatteningResult:
    """A flattening plus its per-face angle-distortion report."""

    param: ParamMesh
    conformality: np.ndarray  # per-face |mu| in [0, 1)
    pinned: tuple  # ((vertex_a, (0, 0)), (vertex_b, (1, 0)))


def _local_frames(mesh):
    """Per-face 2D corner coordinates (m, 3, 2) in isometric local frames."""
    p = mesh.vertices[mesh.faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    ex = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    ey = np.cross(n / nn, ex)
    local = np.zeros((len(mesh.faces), 3, 2))
    local[:, 1, 0] = np.einsum("fd,fd->f", e1, ex)
    local[:, 2, 0] = np.einsum("fd,fd->f", e2, ex)
    local[:, 2, 1] = np.einsum("fd,fd->f", e2, ey)
    return local


def _frame_gradients(local):
    """Hat-function gradients (m, 3, 2) and areas (m,) in the local frames."""
    p0, p1, p2 = local[:, 0], local[:, 1], local[:, 2]
    e0, e1, e2 = p2 - p1, p0 - p2, p1 - p0
    area2 = cross2(p1 - p0, p2 - p0)
    G = np.stack(
        [
            np.stack([-e0[:, 1], e0[:, 0]], axis=1),
            np.stack([-e1[:, 1], e1[:, 0]], axis=1),
            np.stack([-e2[:, 1], e2[:, 0]], axis=1),
        ],
        axis=1,
    ) / area2[:, None, None]
    return G, area2 / 2.0


def _conformality_matrices(mesh):
    """Sparse forms C, D with (Cw)_f = area-weighted dw/dzbar, (Dw)_f = dw/dz."""
    local = _local_frames(mesh)
    G, area = _frame_gradients(local)
    cbar = (G[:, :, 0] + 1j * G[:, :, 1]) / 2.0
    chol = (G[:, :, 0] - 1j * G[:, :, 1]) / 2.0
    m, n = mesh.n_faces, mesh.n_vertices
    rows = np.repeat(np.arange(m), 3)
    cols = mesh.faces.reshape(-1)
    w = np.sqrt(area)[:, None]
    C = sp.coo_matrix(((w * cbar).reshape(-1), (rows, cols)), shape=(m, n)).tocsr()
    Craw = sp.coo_matrix((cbar.reshape(-1), (rows, cols)), shape=(m, n)).tocsr()
    Draw = sp.coo_matrix((chol.reshape(-1), (rows, cols)), shape=(m, n)).tocsr()
    return C, Craw, Draw


def conformal_energy(mesh, uv):
    """Total conformal energy of a flat embedding of the mesh."""
    C, _, _ = _conformality_matrices(mesh)
    w = uv[:, 0] + 1j * uv[:, 1]
    r = C @ w
    return float(np.real(np.vdot(r, r)))


def _default_pins(mesh, boundary):
    """Two far-apart boundary vertices via a double Dijkstra sweep."""
    i = mesh.faces[:, [0, 1, 2]].reshape(-1)
    j = mesh.faces[:, [1, 2, 0]].reshape(-1)
    lengths = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j], axis=1)
    graph = sp.coo_matrix(
        (np.concatenate([lengths, lengths]), (np.concatenate([i, j]), np.concatenate([j, i]))),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    boundary = np.asarray(boundary)
    start = int(boundary.min())
    d = dijkstra(graph, indices=start)
    a = int(boundary[np.argmax(d[boundary])])
    d = dijkstra(graph, indices=a)
    b = int(boundary[np.argmax(d[boundary])])
    return a, b


def flatten_lscm(mesh, pin_a=None, pin_b=None):
    """Flatten a disk-topology mesh by conformal-energy minimization.

    The two pins are fixed at (0, 0) and (1, 0); by default they are two
    boundary vertices at (approximately) maximal geodesic distance. Any
    flipped faces are repaired with local uv averaging, up to
    REPAIR_ITERATIONS passes; persistent flips raise FlippedFaces.
    """
    mesh.check_manifold()
    if not mesh.is_disk():
        raise NotDiskTopology(
            "flattening requires a single-boundary disk mesh; for other "
            "topologies supply a pre-flattened fundamental domain instead"
        )
    loops = mesh.boundary_loops()
    boundary = loops[0]
    if pin_a is None or pin_b is None:
        pin_a, pin_b = _default_pins(mesh, boundary)
    pin_a, pin_b = int(pin_a), int(pin_b)
    if pin_a == pin_b:
        raise ValueError("the two pinned vertices must be distinct")

    C, _, _ = _conformality_matrices(mesh)
    n = mesh.n_vertices
    M = (C.conj().T @ C).tocsc()
    pins = np.array([pin_a, pin_b])
    pin_w = np.array([0.0 + 0.0j, 1.0 + 0.0j])
    free = np.ones(n, dtype=bool)
    free[pins] = False
    free_idx = np.flatnonzero(free)
    lu = spla.splu(M[free_idx][:, free_idx])
    rhs = -M[free_idx][:, pins] @ pin_w
    w = np.empty(n, dtype=np.complex128)
    w[pins] = pin_w
    w[free_idx] = lu.solve(rhs)

    uv = np.column_stack([w.real, w.imag])
    if _signed_areas(uv, mesh.faces).sum() < 0:
        # mirrored output: flip all face orientations once and reflect
        mesh = mesh.with_faces(mesh.faces[:, ::-1])
        uv = uv * np.array([1.0, -1.0])

    uv = _repair_flips(mesh, uv, pins)

    wc = uv[:, 0] + 1j * uv[:, 1]
    # recompute the derivative forms against the (possibly reoriented) mesh
    _, Craw, Draw = _conformality_matrices(mesh)
    num = np.abs(Craw @ wc)
    den = np.abs(Draw @ wc)
    conf = num / np.maximum(den, 1e-300)
    param = ParamMesh(mesh, uv, boundary=mesh.boundary_loops()[0])
    return FlatteningResult(
        param=param,
        conformality=conf,
        pinned=((pin_a, (0.0, 0.0)), (pin_b, (1.0, 0.0))),
    )


def _signed_areas(uv, faces):
    p = uv[faces]
    return 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def _repair_flips(mesh, uv, pins):
    faces = mesh.faces
    signed = _signed_areas(uv, faces)
    if (signed > 0).all():
        return uv
    # vertex adjacency for 1-ring averaging
    i = faces[:, [0, 1, 2]].reshape(-1)
    j = faces[:, [1, 2, 0]].reshape(-1)
    ones = np.ones(len(i))
    adj = sp.coo_matrix(
        (np.concatenate([ones, ones]), (np.concatenate([i, j]), np.concatenate([j, i]))),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    boundary = set(int(v) for v in mesh.boundary_loops()[0])
    frozen = boundary | {int(p) for p in pins}
    uv = uv.copy()
    for _ in range(REPAIR_ITERATIONS):
        signed = _signed_areas(uv, faces)
        bad = signed <= 0
        if not bad.any():
            return uv
        verts = np.unique(faces[bad].reshape(-1))
        verts = np.array([v for v in verts if int(v) not in frozen], dtype=np.int64)
        if len(verts) == 0:
            break
        means = (adj[verts] @ uv) / deg[verts, None]
        uv[verts] = means
    signed = _signed_areas(uv, faces)
    if (signed <= 0).any():
        raise FlippedFaces(int((signed <= 0).sum()))
    return uv


def normalize_domain(param):
    """Rescale a parametrization so its bounding box fits [0, 1]^2.

    Translation plus a single isotropic scale: the longer box side maps to
    unit length, preserving aspect ratio. Degenerate (zero-size) domains
    raise NonFiniteScale.
    """
    lo = param.uv.min(axis=0)
    hi = param.uv.max(axis=0)
    span = float((hi - lo).max())
    if not np.isfinite(span) or span <= 0.0:
        raise NonFiniteScale("domain bounding box has no extent")
    uv = (param.uv - lo) / span
    return param.with_uv(uv)
