"""Raster-grid machinery: push-forward rendering, overlap masks and Demons.

All grids live on the common [0, 1]^2 frame with pixel centers at
((i + 0.5)/w, (j + 0.5)/h) and arrays indexed [row j, column i]. Deformed
meshes are rendered by barycentric interpolation of vertex intensities
(push-forward), which avoids inverting the map explicitly; the moving and
static rasters then share pixels, making the overlap indicator, the
intensity-difference energy and the Demons displacement per-pixel maps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import NonInjectiveWarning, ResolutionMismatch

MIN_RESOLUTION = 16
DENOM_GUARD = 1e-12
EDGE_EPS = 1e-9       # barycentric slack for edge-inclusive coverage
INTERIOR_EPS = 1e-7   # strict-interior threshold for double-cover detection


@dataclass(frozen=True)
class IntensityGrid:
    """Rasterized scalar field with coverage mask and masked gradient."""

    values: np.ndarray     # (h, w)
    mask: np.ndarray       # (h, w) bool
    gradient: np.ndarray   # (h, w, 2), uv units, zero off-mask
    face_index: np.ndarray  # (h, w) int32, -1 where uncovered
    double_cover: int = 0

    @property
    def resolution(self):
        h, w = self.values.shape
        return (w, h)


@dataclass(frozen=True)
class DisplacementGrid:
    """Per-pixel 2D displacement, zero outside its mask."""

    vectors: np.ndarray  # (h, w, 2)
    mask: np.ndarray     # (h, w) bool

    @property
    def resolution(self):
        h, w = self.mask.shape
        return (w, h)


def _positions_of(positions):
    uv = getattr(positions, "target_uv", positions)
    return np.asarray(uv, dtype=np.float64)


def frame_pixels(uv, w, h, slack_px=0.5):
    """Containing pixel of each uv position on the closed [0, 1]^2 frame.

    Positions within ``slack_px`` pixels of the frame are attributed to the
    nearest pixel, so boundary vertices survive floating-point noise.
    Returns (column, row, inside) arrays.
    """
    sx, sy = slack_px / w, slack_px / h
    ok = (
        (uv[:, 0] >= -sx) & (uv[:, 0] <= 1 + sx)
        & (uv[:, 1] >= -sy) & (uv[:, 1] <= 1 + sy)
    )
    i = np.clip(np.floor(uv[:, 0] * w).astype(np.int64), 0, w - 1)
    j = np.clip(np.floor(uv[:, 1] * h).astype(np.int64), 0, h - 1)
    return i, j, ok


def rasterize(source, positions, intensity, resolution=(512, 512)):
    """Render per-vertex intensity of a (deformed) mesh onto the frame grid.

    Pixels whose center falls in a face receive the barycentric
    interpolation of that face's vertex values; the mask marks exactly the
    covered pixels. Overlaps between faces are resolved last-write, and a
    NonInjectiveWarning reports how many pixels were strictly interior to
    more than one face.
    """
    w, h = int(resolution[0]), int(resolution[1])
    if w < MIN_RESOLUTION or h < MIN_RESOLUTION:
        raise ValueError(f"resolution must be at least {MIN_RESOLUTION} per axis")
    uv = _positions_of(positions)
    vals = (
        np.zeros(source.n_vertices)
        if intensity is None
        else np.asarray(intensity, dtype=np.float64)
    )
    values = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    face_index = np.full((h, w), -1, dtype=np.int32)
    cover = np.zeros((h, w), dtype=np.int16)

    faces = source.faces
    tri = uv[faces]  # (m, 3, 2)
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    for fi in range(len(faces)):
        p = tri[fi]
        lo = p.min(axis=0)
        hi = p.max(axis=0)
        i0 = max(int(np.floor(lo[0] * w - 0.5)), 0)
        i1 = min(int(np.ceil(hi[0] * w - 0.5)), w - 1)
        j0 = max(int(np.floor(lo[1] * h - 0.5)), 0)
        j1 = min(int(np.ceil(hi[1] * h - 0.5)), h - 1)
        if i1 < i0 or j1 < j0:
            continue
        det = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if det == 0.0:
            continue
        gx = xs[i0 : i1 + 1][None, :] - p[0, 0]
        gy = ys[j0 : j1 + 1][:, None] - p[0, 1]
        b1 = ((p[2, 1] - p[0, 1]) * gx - (p[2, 0] - p[0, 0]) * gy) / det
        b2 = (-(p[1, 1] - p[0, 1]) * gx + (p[1, 0] - p[0, 0]) * gy) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -EDGE_EPS) & (b1 >= -EDGE_EPS) & (b2 >= -EDGE_EPS)
        if not inside.any():
            continue
        interior = (b0 > INTERIOR_EPS) & (b1 > INTERIOR_EPS) & (b2 > INTERIOR_EPS)
        fv = vals[faces[fi]]
        pix = b0 * fv[0] + b1 * fv[1] + b2 * fv[2]
        sl = (slice(j0, j1 + 1), slice(i0, i1 + 1))
        values[sl] = np.where(inside, pix, values[sl])
        mask[sl] |= inside
        face_index[sl] = np.where(inside, fi, face_index[sl])
        cover[sl] += interior

    double = int((cover > 1).sum())
    if double > 0:
        warnings.warn(
            f"non-injective map: {double} pixels covered more than once",
            NonInjectiveWarning,
            stacklevel=2,
        )
    grad = _masked_gradient(values, mask, w, h)
    return IntensityGrid(
        values=values, mask=mask, gradient=grad, face_index=face_index, double_cover=double
    )


def _masked_gradient(values, mask, w, h):
    """Central differences falling back to one-sided at mask boundaries."""
    grad = np.zeros(values.shape + (2,))
    for axis, step in ((1, 1.0 / w), (0, 1.0 / h)):
        plus = np.zeros_like(values)
        minus = np.zeros_like(values)
        has_p = np.zeros_like(mask)
        has_m = np.zeros_like(mask)
        src = [slice(None)] * 2
        dst = [slice(None)] * 2
        src[axis] = slice(1, None)
        dst[axis] = slice(None, -1)
        plus[tuple(dst)] = values[tuple(src)]
        has_p[tuple(dst)] = mask[tuple(src)]
        minus[tuple(src)] = values[tuple(dst)]
        has_m[tuple(src)] = mask[tuple(dst)]
        central = has_p & has_m
        fwd = has_p & ~has_m
        bwd = has_m & ~has_p
        g = np.zeros_like(values)
        g[central] = (plus[central] - minus[central]) / (2.0 * step)
        g[fwd] = (plus[fwd] - values[fwd]) / step
        g[bwd] = (values[bwd] - minus[bwd]) / step
        g[~mask] = 0.0
        # axis 1 varies x (component 0), axis 0 varies y (component 1)
        grad[..., 0 if axis == 1 else 1] = g
    return grad


def overlap_mask(moving, static_):
    """Pixels covered by both rasters."""
    if moving.values.shape != static_.values.shape:
        raise ResolutionMismatch("grids must share a resolution")
    return moving.mask & static_.mask


def demons_step(moving, static_, overlap, tau):
    """First-order intensity-matching displacement on the overlap.

    Per pixel, with d = moving - static and g = grad of the moving raster:

        u = d * g / (|g|^2 + tau^2 d^2)

    Pixels with denominator below DENOM_GUARD, and all pixels outside the
    overlap, get zero displacement. The magnitude never exceeds 1/(2 tau).
    """
    if moving.values.shape != static_.values.shape:
        raise ResolutionMismatch("grids must share a resolution")
    if overlap.shape != moving.values.shape:
        raise ResolutionMismatch("overlap mask resolution mismatch")
    if not tau > 0:
        raise ValueError("tau must be positive")
    d = moving.values - static_.values
    g = moving.gradient
    denom = g[..., 0] ** 2 + g[..., 1] ** 2 + (tau * d) ** 2
    scale = np.where(denom < DENOM_GUARD, 0.0, d / np.where(denom < DENOM_GUARD, 1.0, denom))
    scale = np.where(overlap, scale, 0.0)
    return DisplacementGrid(vectors=g * scale[..., None], mask=overlap.copy())


def gaussian_smooth(field, sigma):
    """Separable Gaussian smoothing of a displacement field.

    The kernel is truncated at 3 sigma and renormalized over the in-frame
    support, so constants are preserved up to the frame border; the result
    is re-masked to the field's own mask. sigma = 0 returns the field
    unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return field
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = np.empty_like(field.vectors)
    weight = np.ones(field.mask.shape)
    weight = convolve1d(weight, k, axis=0, mode="constant")
    weight = convolve1d(weight, k, axis=1, mode="constant")
    for c in range(2):
        s = convolve1d(field.vectors[..., c], k, axis=0, mode="constant")
        s = convolve1d(s, k, axis=1, mode="constant")
        out[..., c] = s / weight
    out[~field.mask] = 0.0
    return DisplacementGrid(vectors=out, mask=field.mask)


def sample_to_vertices(field, positions):
    """Bilinear sample of a displacement field at deformed vertex positions.

    Vertices outside the frame, or whose containing pixel is outside the
    field's mask, receive zero.
    """
    uv = _positions_of(positions)
    h, w = field.mask.shape
    px = uv[:, 0] * w - 0.5
    py = uv[:, 1] * h - 0.5
    i0 = np.floor(px).astype(np.int64)
    j0 = np.floor(py).astype(np.int64)
    fx = px - i0
    fy = py - j0
    out = np.zeros((len(uv), 2))
    vecs = field.vectors
    for dj, di, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        # clamp-to-edge so constant fields sample exactly on the frame border
        ii = np.clip(i0 + di, 0, w - 1)
        jj = np.clip(j0 + dj, 0, h - 1)
        out += vecs[jj, ii] * wgt[:, None]
    # containing pixel must be inside the mask (frame closed, see frame_pixels)
    cic, cjc, in_frame = frame_pixels(uv, w, h)
    keep = in_frame & field.mask[cjc, cic]
    out[~keep] = 0.0
    return out


def fidelity_energy(moving, static_, overlap):
    """Pixel-area-weighted squared intensity mismatch over the overlap."""
    if moving.values.shape != static_.values.shape:
        raise ResolutionMismatch("grids must share a resolution")
    if overlap.shape != moving.values.shape:
        raise ResolutionMismatch("overlap mask resolution mismatch")
    h, w = moving.values.shape
    d = moving.values - static_.values
    return float((d[overlap] ** 2).sum() / (w * h))


def save_pgm(array, path):
    """Write a mask or scalar grid as binary 8-bit PGM (row 0 = top)."""
    a = np.asarray(array)
    if a.dtype == bool:
        img = np.where(a, 255, 0).astype(np.uint8)
    else:
        lo, hi = float(a.min()), float(a.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = ((a - lo) * scale).astype(np.uint8)
    img = img[::-1]  # v axis points up, image rows go down
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
