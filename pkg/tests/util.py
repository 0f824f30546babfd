"""Shared mesh and image fixtures for the test suite."""

import numpy as np

from qcreg import ParamMesh, TriMesh


def grid_trimesh(n, lo=0.0, hi=1.0, intensity=None):
    """Structured triangulation of a square with n x n cells."""
    xs = np.linspace(lo, hi, n + 1)
    uu, vv = np.meshgrid(xs, xs)
    verts = np.column_stack([uu.reshape(-1), vv.reshape(-1), np.zeros((n + 1) ** 2)])

    def vid(i, j):
        return j * (n + 1) + i

    faces = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(verts, faces, intensity=intensity)


def grid_param(n, lo=0.0, hi=1.0, intensity=None):
    return ParamMesh.from_planar(grid_trimesh(n, lo, hi, intensity=intensity))


def nearest_vertex(param, point):
    d = np.linalg.norm(param.uv - np.asarray(point), axis=1)
    return int(np.argmin(d))


def jittered_param(n, amplitude=0.3, seed=0):
    """Irregular triangulation: grid with interior vertices displaced.

    amplitude is relative to the cell size and kept below the fold limit.
    """
    rng = np.random.default_rng(seed)
    mesh = grid_trimesh(n)
    v = mesh.vertices.copy()
    h = 1.0 / n
    interior = (
        (v[:, 0] > 1e-9) & (v[:, 0] < 1 - 1e-9) & (v[:, 1] > 1e-9) & (v[:, 1] < 1 - 1e-9)
    )
    v[interior, :2] += amplitude * h * rng.uniform(-1, 1, (interior.sum(), 2))
    return ParamMesh.from_planar(TriMesh(v, mesh.faces))


def cap_trimesh(rings, sectors, height=1.0):
    """Spherical cap (up to a hemisphere for height=1) with a pole fan."""
    verts = [(0.0, 0.0, 1.0)]
    for k in range(1, rings + 1):
        theta = (k / rings) * (np.pi / 2) * height
        for s in range(sectors):
            phi = 2 * np.pi * s / sectors
            verts.append((np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)))

    def rid(k, s):
        return 1 + (k - 1) * sectors + (s % sectors)

    faces = []
    for s in range(sectors):
        faces.append([0, rid(1, s), rid(1, s + 1)])
    for k in range(1, rings):
        for s in range(sectors):
            a, b = rid(k, s), rid(k, s + 1)
            c, d = rid(k + 1, s), rid(k + 1, s + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    return TriMesh(np.asarray(verts), faces)


def _segment_distance(points, a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def letter_a_intensity(points, center=(0.5, 0.5), width=0.4, height=0.5,
                       thickness=0.035, soft=0.015):
    """Soft binary glyph of the letter A built from three strokes."""
    cx, cy = center
    top = (cx, cy + height / 2)
    left = (cx - width / 2, cy - height / 2)
    right = (cx + width / 2, cy - height / 2)
    bar_y = cy - height * 0.1
    s = (bar_y - left[1]) / (top[1] - left[1])
    bar_l = (left[0] + s * (top[0] - left[0]), bar_y)
    bar_r = (right[0] + s * (top[0] - right[0]), bar_y)
    d = np.minimum(
        _segment_distance(points, left, top),
        np.minimum(_segment_distance(points, right, top),
                   _segment_distance(points, bar_l, bar_r)),
    )
    return np.clip((thickness - d) / soft + 0.5, 0.0, 1.0)


def letter_pair(n=70):
    """Tall-A moving domain and wide-A static domain with matched landmarks.

    The two glyphs are related by the anisotropic affine map taking the
    moving glyph frame onto the static one, so an exact registration exists
    within singular-value bounds [0.73, 1.34].
    """
    w1, h1 = 0.42, 0.60   # tall moving A
    w2, h2 = 0.56, 0.44   # wide static A
    mesh1 = grid_trimesh(n)
    mesh2 = grid_trimesh(n)
    pts = mesh1.vertices[:, :2]
    moving = ParamMesh.from_planar(
        mesh1.with_intensity(letter_a_intensity(pts, width=w1, height=h1))
    )
    static = ParamMesh.from_planar(
        mesh2.with_intensity(letter_a_intensity(pts, width=w2, height=h2))
    )

    def true_map(p):
        return np.array([0.5 + (p[0] - 0.5) * (w2 / w1), 0.5 + (p[1] - 0.5) * (h2 / h1)])

    features = [
        (0.5, 0.5 + h1 / 2),           # apex
        (0.5 - w1 / 2, 0.5 - h1 / 2),  # left foot
        (0.5 + w1 / 2, 0.5 - h1 / 2),  # right foot
        (0.5 - w1 * 0.3, 0.5 - h1 * 0.1),  # bar, left
        (0.5 + w1 * 0.3, 0.5 - h1 * 0.1),  # bar, right
    ]
    idx = [nearest_vertex(moving, f) for f in features]
    targets = np.array([true_map(moving.uv[i]) for i in idx])
    from qcreg import LandmarkSet

    return moving, static, LandmarkSet(idx, targets)
