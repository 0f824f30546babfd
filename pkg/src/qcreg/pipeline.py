"""Registration drivers: free-boundary deformation and inconsistent-domain
registration, with energy bookkeeping and correspondence extraction.

Both drivers share the same outer structure. Per outer iteration the map is
first pushed toward the distortion-bounded set (clamp singular values, refit
by Poisson recovery with landmarks exact); the registration driver then
renders the deformed intensity, takes a smoothed Demons displacement on the
overlap, and in either driver the resulting map's angle-distortion
coefficient is thresholded, relaxed by neighbor averaging and inverted back
into a map whose boundary positions are inherited from the previous stage.
Intensity forces never move the boundary directly.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import distortion, intensity, numerics, qc
from .distortion import DistortionBounds
from .errors import EmptyLandmarks, EmptyOverlapWarning
from .mesh import LandmarkSet
from .qc import PlanarMap


@dataclass(frozen=True)
class RegistrationConfig:
    """All scalars steering the drivers.

    alpha couples the map's coefficient to its relaxed copy, beta weighs the
    smoothness of the relaxed copy (and absorbs the descent step size);
    n_outer/n_proj/m_outer/m_smooth are the loop counts of the outer run,
    the bound projection, the intensity rounds and the coefficient
    relaxation respectively.
    """

    alpha: float = 0.01
    beta: float = 0.1
    bounds: DistortionBounds = field(default_factory=lambda: DistortionBounds(2.0, 0.5))
    n_outer: int = 50
    n_proj: int = 1
    m_outer: int = 1
    m_smooth: int = 5
    tau_demons: float = 1.0
    sigma_gauss: float = 2.0
    grid_res: tuple = (512, 512)
    early_stop_rel: float = 1e-6
    prealign: bool = True
    demons_sign: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        for name in ("n_outer", "n_proj", "m_outer", "m_smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_proj == 0:
            raise ValueError("n_proj must be at least 1")
        if self.tau_demons <= 0:
            raise ValueError("tau_demons must be positive")


@dataclass(frozen=True)
class EnergyRecord:
    iteration: int
    fidelity: float
    coupling: float
    smoothness: float
    total: float
    landmark_rmse: float
    max_abs_mu: float
    min_face_det: float


CSV_HEADER = "iter,fidelity,coupling,smoothness,total,landmark_rmse,max_abs_mu,min_face_det"


class EnergyTrace:
    """Per-iteration energy records; row 0 is the state of the initial map."""

    def __init__(self):
        self.records = []
        self.empty_overlap = False

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.records:
            buf.write(
                f"{r.iteration},{r.fidelity:.17g},{r.coupling:.17g},{r.smoothness:.17g},"
                f"{r.total:.17g},{r.landmark_rmse:.17g},{r.max_abs_mu:.17g},{r.min_face_det:.17g}\n"
            )
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.to_csv())


@dataclass(frozen=True)
class Correspondence:
    """Discovered corresponding regions and the per-vertex partner locations.

    omega1_faces marks moving faces whose deformed image lies in the common
    region; omega2_mask is that region on the pixel grid. partner_face and
    partner_bary locate each in-correspondence deformed vertex inside the
    static mesh (face index -1 where no partner exists).
    """

    omega1_faces: np.ndarray
    omega2_mask: np.ndarray
    partner_face: np.ndarray
    partner_bary: np.ndarray


# ---------------------------------------------------------------------------
# energy evaluation
# ---------------------------------------------------------------------------

def _face_laplacian_matrix(mesh):
    if "face_lap" not in mesh._cache:
        mesh._cache["face_lap"] = numerics.face_adjacency_laplacian(mesh).matrix()
    return mesh._cache["face_lap"]


def landmark_rmse(planar_map, landmarks):
    if landmarks is None or len(landmarks) == 0:
        return 0.0
    d = planar_map.target_uv[landmarks.moving_indices] - landmarks.target_uv
    return float(np.sqrt((d * d).sum(axis=1).mean()))


def energy(
    moving,
    planar_map,
    nu,
    moving_grid=None,
    static_grid=None,
    overlap=None,
    landmarks=None,
    config=None,
    iteration=0,
):
    """Evaluate the split energy and diagnostics for one iterate.

    fidelity is the masked intensity mismatch (0 without grids); coupling is
    (alpha/2) the area-weighted squared gap between the map's coefficient
    and nu; smoothness is (beta/2) the face-adjacency Dirichlet energy of nu.
    """
    cfg = config or RegistrationConfig()
    mu = qc.beltrami_of_map(moving, planar_map)
    if moving_grid is not None and static_grid is not None and overlap is not None:
        fid = intensity.fidelity_energy(moving_grid, static_grid, overlap)
    else:
        fid = 0.0
    gap = mu.values - nu.values
    coupling = 0.5 * cfg.alpha * float(np.sum(moving.face_areas * np.abs(gap) ** 2))
    L = _face_laplacian_matrix(moving)
    smooth = 0.5 * cfg.beta * float(np.real(np.vdot(nu.values, L @ nu.values)))
    dets = planar_map.face_dets
    return EnergyRecord(
        iteration=int(iteration),
        fidelity=fid,
        coupling=coupling,
        smoothness=smooth,
        total=fid + coupling + smooth,
        landmark_rmse=landmark_rmse(planar_map, landmarks),
        max_abs_mu=mu.max_abs,
        min_face_det=float(dets.min()) if len(dets) else 0.0,
    )


def _should_stop(totals, rel):
    # absolute floor keeps effectively-zero energies from looping forever
    if rel <= 0 or len(totals) < 4:
        return False
    for a, b in zip(totals[-4:-1], totals[-3:]):
        if abs(b - a) >= rel * max(abs(a), 1e-16):
            return False
    return True


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def similarity_prealign(moving, landmarks):
    """Initial map from the least-squares similarity fitting the landmarks.

    One landmark gives a pure translation; none gives the identity.
    """
    uv = moving.uv
    if landmarks is None or len(landmarks) == 0:
        return PlanarMap.identity(moving)
    z = uv[landmarks.moving_indices, 0] + 1j * uv[landmarks.moving_indices, 1]
    q = landmarks.target_uv[:, 0] + 1j * landmarks.target_uv[:, 1]
    n = len(z)
    if n == 1:
        a, b = 1.0 + 0.0j, q[0] - z[0]
    else:
        szz = np.vdot(z, z)  # sum |z|^2
        sz = z.sum()
        det = szz * n - np.conj(sz) * sz
        if abs(det) < 1e-30:
            a, b = 1.0 + 0.0j, (q - z).mean()
        else:
            szq = np.vdot(z, q)
            sq = q.sum()
            a = (szq * n - np.conj(sz) * sq) / det
            b = (szz * sq - sz * szq) / det
            if abs(a) < 1e-12:  # degenerate fit, keep the frame
                a, b = 1.0 + 0.0j, (q - z).mean()
    w = a * (uv[:, 0] + 1j * uv[:, 1]) + b
    return PlanarMap(moving, np.column_stack([w.real, w.imag]))


def _initial_map(moving, landmarks, config):
    if config.prealign:
        return similarity_prealign(moving, landmarks)
    return PlanarMap.identity(moving)


def _lbs_dirichlet(moving, uv, landmarks):
    """Boundary positions of the current map, overridden by landmark targets."""
    con = {int(b): uv[int(b)] for b in moving.boundary}
    if landmarks is not None:
        for i, qpos in zip(landmarks.moving_indices, landmarks.target_uv):
            con[int(i)] = qpos
    return con


def _proj_anchor(moving, landmarks):
    if landmarks is not None and len(landmarks):
        return None
    return (0, moving.uv[0])


# ---------------------------------------------------------------------------
# driver: free-boundary deformation
# ---------------------------------------------------------------------------

def free_boundary_deform(moving, landmarks, config=None):
    """Landmark-driven deformation with bounded distortion and free boundary.

    Returns the final map and the energy trace (row 0 = initial state).
    """
    cfg = config or RegistrationConfig()
    if landmarks is None or len(landmarks) == 0:
        raise EmptyLandmarks("free-boundary deformation needs at least one landmark")
    landmarks.validate_against(moving)
    f = _initial_map(moving, landmarks, cfg)
    solver = distortion.constraint_solver(moving, landmarks)
    nmean = numerics.face_neighbor_mean(moving)
    trace = EnergyTrace()
    nu = qc.threshold(qc.beltrami_of_map(moving, f))
    trace.append(energy(moving, f, nu, landmarks=landmarks, config=cfg, iteration=0))
    totals = [trace[0].total]
    for it in range(1, cfg.n_outer + 1):
        f = distortion.project_map(
            moving, f, cfg.bounds, landmarks,
            iterations=cfg.n_proj, solver=solver, warn_on_conflict=False,
        )
        for _ in range(cfg.m_outer):
            mu_p = qc.threshold(qc.beltrami_of_map(moving, f))
            nu = qc.smooth_beltrami(mu_p, mu_p, cfg.alpha, cfg.beta, cfg.m_smooth, nmean)
            f = qc.lbs(moving, nu, _lbs_dirichlet(moving, f.target_uv, landmarks))
        if cfg.m_outer == 0:
            nu = qc.threshold(qc.beltrami_of_map(moving, f))
        trace.append(energy(moving, f, nu, landmarks=landmarks, config=cfg, iteration=it))
        totals.append(trace[-1].total)
        if _should_stop(totals, cfg.early_stop_rel):
            break
    return f, trace


# ---------------------------------------------------------------------------
# driver: registration on inconsistent domains
# ---------------------------------------------------------------------------

def _normalized_intensities(moving, static_):
    i1 = moving.base.intensity
    i2 = static_.base.intensity
    if i1 is None or i2 is None:
        raise ValueError("both meshes need per-vertex intensity for registration")
    lo = min(float(i1.min()), float(i2.min()))
    hi = max(float(i1.max()), float(i2.max()))
    if hi > lo:
        return (i1 - lo) / (hi - lo), (i2 - lo) / (hi - lo)
    return np.zeros_like(i1), np.zeros_like(i2)


def _check_normalized(param, name):
    lo = param.uv.min()
    hi = param.uv.max()
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError(
            f"{name} uv outside the [0, 1]^2 frame; run conformal.normalize_domain first"
        )


def register(moving, static_, landmarks, config=None):
    """Register two partially corresponding parametrized surfaces.

    Alternates distortion-bounded projection with Demons intensity matching
    on the rasterized overlap, rebuilding the map from its relaxed
    angle-distortion coefficient after every intensity round. Returns the
    final map, the discovered correspondence, and the energy trace. An empty
    overlap at any iteration raises EmptyOverlapWarning and sets the trace's
    empty_overlap flag (fidelity is reported as 0 there).
    """
    cfg = config or RegistrationConfig()
    _check_normalized(moving, "moving")
    _check_normalized(static_, "static")
    if landmarks is None:
        landmarks = LandmarkSet([], np.zeros((0, 2)))
    landmarks.validate_against(moving)
    i1, i2 = _normalized_intensities(moving, static_)
    static_grid = intensity.rasterize(static_, static_.uv, i2, cfg.grid_res)
    f = _initial_map(moving, landmarks, cfg)
    solver = distortion.constraint_solver(
        moving, landmarks, anchor=_proj_anchor(moving, landmarks)
    )
    nmean = numerics.face_neighbor_mean(moving)
    interior = moving.interior_mask

    def observe(g, it, nu):
        mg = intensity.rasterize(moving, g, i1, cfg.grid_res)
        ov = intensity.overlap_mask(mg, static_grid)
        if not ov.any():
            _flag_empty(trace)
            return energy(moving, g, nu, landmarks=landmarks, config=cfg, iteration=it)
        return energy(
            moving, g, nu, mg, static_grid, ov,
            landmarks=landmarks, config=cfg, iteration=it,
        )

    trace = EnergyTrace()
    nu = qc.threshold(qc.beltrami_of_map(moving, f))
    trace.append(observe(f, 0, nu))
    totals = [trace[0].total]
    for it in range(1, cfg.n_outer + 1):
        f = distortion.project_map(
            moving, f, cfg.bounds, landmarks,
            iterations=cfg.n_proj, anchor=_proj_anchor(moving, landmarks),
            solver=solver, warn_on_conflict=False,
        )
        for _ in range(cfg.m_outer):
            mg = intensity.rasterize(moving, f, i1, cfg.grid_res)
            ov = intensity.overlap_mask(mg, static_grid)
            if not ov.any():
                _flag_empty(trace)
                disp = np.zeros((moving.n_vertices, 2))
            else:
                step = intensity.demons_step(mg, static_grid, ov, cfg.tau_demons)
                step = intensity.gaussian_smooth(step, cfg.sigma_gauss)
                disp = cfg.demons_sign * intensity.sample_to_vertices(step, f)
                disp[~interior] = 0.0
            g_uv = f.target_uv + disp
            mu_p = qc.threshold(qc.beltrami_of_map(moving, g_uv))
            nu = qc.smooth_beltrami(mu_p, mu_p, cfg.alpha, cfg.beta, cfg.m_smooth, nmean)
            f = qc.lbs(moving, nu, _lbs_dirichlet(moving, g_uv, landmarks))
        if cfg.m_outer == 0:
            nu = qc.threshold(qc.beltrami_of_map(moving, f))
        trace.append(observe(f, it, nu))
        totals.append(trace[-1].total)
        if _should_stop(totals, cfg.early_stop_rel):
            break
    corr = extract_correspondence(moving, f, static_, cfg.grid_res)
    return f, corr, trace


def _flag_empty(trace):
    if not trace.empty_overlap:
        trace.empty_overlap = True
        warnings.warn(
            "deformed source does not intersect the target domain",
            EmptyOverlapWarning,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# correspondence extraction
# ---------------------------------------------------------------------------

def _pixel_of(uv, w, h):
    return intensity.frame_pixels(uv, w, h)


def _bary_in_face(static_, fi, point):
    tri = static_.uv[static_.faces[fi]]
    det = (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1]) - (tri[1, 1] - tri[0, 1]) * (
        tri[2, 0] - tri[0, 0]
    )
    if det == 0.0:
        return None
    gx = point[0] - tri[0, 0]
    gy = point[1] - tri[0, 1]
    b1 = ((tri[2, 1] - tri[0, 1]) * gx - (tri[2, 0] - tri[0, 0]) * gy) / det
    b2 = (-(tri[1, 1] - tri[0, 1]) * gx + (tri[1, 0] - tri[0, 0]) * gy) / det
    b0 = 1.0 - b1 - b2
    if b0 >= -1e-9 and b1 >= -1e-9 and b2 >= -1e-9:
        b = np.clip([b0, b1, b2], 0.0, None)
        return b / b.sum()
    return None


def _locate(static_, sgrid, point, w, h):
    """Find the static face containing a point, raster-accelerated."""
    i = int(np.floor(point[0] * w))
    j = int(np.floor(point[1] * h))
    tried = set()
    for r in (0, 1, 2):
        for dj in range(-r, r + 1):
            for di in range(-r, r + 1):
                ii, jj = i + di, j + dj
                if not (0 <= ii < w and 0 <= jj < h):
                    continue
                fi = int(sgrid.face_index[jj, ii])
                if fi < 0 or fi in tried:
                    continue
                tried.add(fi)
                b = _bary_in_face(static_, fi, point)
                if b is not None:
                    return fi, b
    # fall back to scanning faces whose bbox contains the point
    tri = static_.uv[static_.faces]
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    cand = np.flatnonzero(
        (lo[:, 0] <= point[0]) & (point[0] <= hi[:, 0]) &
        (lo[:, 1] <= point[1]) & (point[1] <= hi[:, 1])
    )
    for fi in cand:
        if int(fi) in tried:
            continue
        b = _bary_in_face(static_, int(fi), point)
        if b is not None:
            return int(fi), b
    return -1, None


def extract_correspondence(moving, planar_map, static_, grid_res=(512, 512)):
    """Identify the corresponding regions and per-vertex partners.

    The target-side region is the pixel overlap of the deformed source with
    the static domain; a moving face belongs to the source-side region when
    all three deformed vertices land on overlap pixels. Each such vertex is
    located inside the static mesh (containing face plus barycentric
    coordinates); vertices whose deformed position lies in no static face
    get no partner.
    """
    if not planar_map.diffeomorphic:
        warnings.warn("extracting correspondence from a non-diffeomorphic map")
    w, h = int(grid_res[0]), int(grid_res[1])
    sgrid = intensity.rasterize(static_, static_.uv, None, (w, h))
    mgrid = intensity.rasterize(moving, planar_map, None, (w, h))
    omega2 = mgrid.mask & sgrid.mask
    pos = planar_map.target_uv
    pi, pj, ok = _pixel_of(pos, w, h)
    vert_in = np.zeros(moving.n_vertices, dtype=bool)
    vert_in[ok] = omega2[pj[ok], pi[ok]]
    omega1 = vert_in[moving.faces].all(axis=1)
    partner_face = np.full(moving.n_vertices, -1, dtype=np.int64)
    partner_bary = np.zeros((moving.n_vertices, 3))
    for v in np.flatnonzero(vert_in):
        fi, b = _locate(static_, sgrid, pos[v], w, h)
        if fi >= 0:
            partner_face[v] = fi
            partner_bary[v] = b
    return Correspondence(
        omega1_faces=omega1,
        omega2_mask=omega2,
        partner_face=partner_face,
        partner_bary=partner_bary,
    )
