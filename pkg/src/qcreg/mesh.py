"""Triangle meshes, planar parameter domains, landmarks and their file IO.

All types are immutable after construction (the underlying numpy arrays are
marked read-only), so they can be shared freely between threads.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import (
    DegenerateFace,
    DuplicateMovingVertex,
    FlippedFaces,
    IndexOutOfRange,
    LandmarkOutsideDomain,
    MissingVertex,
    MixedRowFormats,
    NonFiniteValue,
    NonManifold,
    NotDiskTopology,
    ParseError,
)

AREA_GUARD = 1e-12  # minimum face area relative to bbox-diagonal^2


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def cross2(a, b):
    """z-component of the cross product of stacked 2D vectors."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class TriMesh:
    """An oriented triangle mesh in 3-space with optional vertex intensity.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions. 2D input is padded with z = 0.
    faces : (m, 3) array_like
        Counterclockwise vertex-index triples.
    intensity : (n,) array_like, optional
        Scalar per vertex (curvature, gray level, ...).
    """

    def __init__(self, vertices, faces, intensity=None):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise ParseError("vertices must be (n, 2) or (n, 3)")
        if v.shape[1] == 2:
            v = np.column_stack([v, np.zeros(len(v))])
        f = np.asarray(faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ParseError("faces must be (m, 3) index triples")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue("non-finite vertex coordinate")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise IndexOutOfRange(f"face index out of range [0, {len(v)})")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if same.any():
            raise DegenerateFace(int(np.flatnonzero(same)[0]), "face repeats a vertex")
        self.vertices = _freeze(v)
        self.faces = _freeze(f)
        if intensity is not None:
            w = np.asarray(intensity, dtype=np.float64)
            if w.shape != (len(v),):
                raise MissingVertex("intensity must cover every vertex")
            if not np.all(np.isfinite(w)):
                raise NonFiniteValue("non-finite intensity value")
            self.intensity = _freeze(w)
        else:
            self.intensity = None
        self._check_areas()

    def _check_areas(self):
        if len(self.faces) == 0:
            return
        p = self.vertices[self.faces]
        areas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        diag2 = float(span @ span)
        bad = areas <= AREA_GUARD * max(diag2, 1e-300)
        if bad.any():
            raise DegenerateFace(int(np.flatnonzero(bad)[0]), "zero-area face")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_intensity(self, values):
        """Return a copy of this mesh carrying the given per-vertex scalars."""
        return TriMesh(self.vertices, self.faces, intensity=values)

    def with_faces(self, faces):
        return TriMesh(self.vertices, faces, intensity=self.intensity)

    def edge_face_count(self):
        """Map undirected edge (i, j), i < j -> number of incident faces."""
        count = {}
        for fi, (a, b, c) in enumerate(self.faces):
            for i, j in ((a, b), (b, c), (c, a)):
                key = (int(min(i, j)), int(max(i, j)))
                count[key] = count.get(key, 0) + 1
        return count

    def check_manifold(self):
        """Raise NonManifold for overshared edges or inconsistent orientation."""
        for (i, j), c in self.edge_face_count().items():
            if c > 2:
                raise NonManifold(f"edge ({i}, {j}) shared by {c} faces")
        directed = set()
        for a, b, c in self.faces:
            for e in ((int(a), int(b)), (int(b), int(c)), (int(c), int(a))):
                if e in directed:
                    raise NonManifold(
                        f"directed edge {e} appears twice; face orientations disagree"
                    )
                directed.add(e)

    def boundary_loops(self):
        """Return all boundary loops as lists of vertex indices.

        Each loop is ordered so consecutive entries share a boundary edge;
        orientation follows the face orientation (boundary edges traversed
        in face direction).
        """
        count = self.edge_face_count()
        nxt = {}
        for a, b, c in self.faces:
            for i, j in ((int(a), int(b)), (int(b), int(c)), (int(c), int(a))):
                if count[(min(i, j), max(i, j))] == 1:
                    if i in nxt:
                        raise NonManifold(f"vertex {i} on more than one boundary edge fan")
                    nxt[i] = j
        loops = []
        seen = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            cur = nxt[start]
            while cur != start:
                loop.append(cur)
                seen.add(cur)
                cur = nxt.get(cur)
                if cur is None:
                    raise NonManifold("open boundary chain")
            loops.append(loop)
        return loops

    def is_disk(self):
        """True for a connected manifold mesh with exactly one boundary loop."""
        try:
            self.check_manifold()
            loops = self.boundary_loops()
        except NonManifold:
            return False
        n_edges = len(self.edge_face_count())
        euler = self.n_vertices - n_edges + self.n_faces
        return len(loops) == 1 and euler == 1


class ParamMesh:
    """A triangle mesh together with a flat, fold-free parametrization.

    Parameters
    ----------
    base : TriMesh
        The underlying surface mesh.
    uv : (n, 2) array_like
        Parameter-plane position of each vertex. All faces must have
        positive signed area in uv.
    boundary : sequence of int, optional
        Ordered boundary loop; extracted from ``base`` when omitted.
    """

    def __init__(self, base, uv, boundary=None):
        uv = np.asarray(uv, dtype=np.float64)
        if uv.shape != (base.n_vertices, 2):
            raise ParseError("uv must be (n_vertices, 2)")
        if not np.all(np.isfinite(uv)):
            raise NonFiniteValue("non-finite uv coordinate")
        self.base = base
        self.uv = _freeze(uv)
        self._cache = {}
        areas = self.face_areas
        if len(areas) and areas.min() <= 0:
            raise FlippedFaces(int((areas <= 0).sum()), "uv parametrization has non-positive faces")
        if boundary is None:
            loops = base.boundary_loops()
            if len(loops) != 1:
                raise NotDiskTopology(f"expected a single boundary loop, found {len(loops)}")
            boundary = loops[0]
        self.boundary = _freeze(np.asarray(boundary, dtype=np.int64))

    @classmethod
    def from_planar(cls, mesh):
        """Parametrize an already-flat mesh by its own (x, y) coordinates.

        Face orientation is normalized: if the total signed uv area is
        negative, all faces are flipped once.
        """
        uv = mesh.vertices[:, :2]
        p = uv[mesh.faces]
        total = 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]).sum()
        if total < 0:
            mesh = mesh.with_faces(mesh.faces[:, ::-1])
        return cls(mesh, uv)

    @property
    def n_vertices(self):
        return self.base.n_vertices

    @property
    def n_faces(self):
        return self.base.n_faces

    @property
    def faces(self):
        return self.base.faces

    @property
    def face_areas(self):
        """Signed uv area of each face."""
        if "areas" not in self._cache:
            p = self.uv[self.base.faces]
            self._cache["areas"] = 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return self._cache["areas"]

    @property
    def domain_area(self):
        return float(self.face_areas.sum())

    @property
    def interior_mask(self):
        """Boolean per-vertex mask, False exactly on the boundary loop."""
        if "interior" not in self._cache:
            m = np.ones(self.n_vertices, dtype=bool)
            m[self.boundary] = False
            self._cache["interior"] = _freeze(m)
        return self._cache["interior"]

    def with_uv(self, uv):
        return ParamMesh(self.base, uv, boundary=self.boundary)


class LandmarkSet:
    """Point constraints: moving vertex indices and target uv positions."""

    def __init__(self, moving_indices, target_uv, target=None):
        idx = np.asarray(moving_indices, dtype=np.int64).reshape(-1)
        tgt = np.asarray(target_uv, dtype=np.float64).reshape(-1, 2)
        if len(idx) != len(tgt):
            raise ParseError("landmark index/target length mismatch")
        if len(np.unique(idx)) != len(idx):
            raise DuplicateMovingVertex("repeated moving vertex in landmark set")
        if not np.all(np.isfinite(tgt)):
            raise NonFiniteValue("non-finite landmark target")
        self.moving_indices = _freeze(idx)
        self.target_uv = _freeze(tgt)
        if target is not None:
            _check_in_hull(tgt, target.uv)

    def __len__(self):
        return len(self.moving_indices)

    def validate_against(self, moving):
        if len(self) and self.moving_indices.max() >= moving.n_vertices:
            raise IndexOutOfRange("landmark moving index out of range")
        if len(self) and self.moving_indices.min() < 0:
            raise IndexOutOfRange("negative landmark moving index")


def _check_in_hull(points, domain_uv, tol=1e-9):
    """Warn for points outside the convex hull of domain_uv."""
    if len(points) == 0:
        return
    from scipy.spatial import ConvexHull

    span = float(np.ptp(domain_uv, axis=0).max())
    hull = ConvexHull(domain_uv)
    # hull.equations: outward normals, points inside satisfy A x + b <= 0
    d = points @ hull.equations[:, :2].T + hull.equations[:, 2]
    if d.max() > tol * max(span, 1.0):
        k = int(np.unravel_index(np.argmax(d), d.shape)[0])
        warnings.warn(
            f"landmark target {k} lies outside the target uv hull",
            LandmarkOutsideDomain,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

_FORMATS = ("OBJ", "OFF", "PLY")


def _infer_format(path):
    ext = os.path.splitext(path)[1].lower().lstrip(".")
    if ext in ("obj", "off", "ply"):
        return ext.upper()
    raise ParseError(f"cannot infer mesh format from '{path}'")


def load_mesh(path, format=None):
    """Load a TriMesh from an OBJ, OFF or ASCII PLY file.

    PLY vertex properties named ``quality`` or ``intensity`` populate the
    per-vertex intensity; OBJ ``vt`` records are kept and retrievable via
    :func:`load_param_mesh`.
    """
    mesh, _ = _load_mesh_uv(path, format)
    return mesh


def load_param_mesh(path, format=None):
    """Load a mesh that carries uv coordinates (OBJ with ``vt`` records).

    Falls back to the planar (x, y) coordinates when the file has no uv but
    the mesh is flat (constant z); raises ParseError otherwise.
    """
    mesh, uv = _load_mesh_uv(path, format)
    if uv is not None:
        p = uv[mesh.faces]
        total = 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]).sum()
        if total < 0:
            mesh = mesh.with_faces(mesh.faces[:, ::-1])
        return ParamMesh(mesh, uv)
    z = mesh.vertices[:, 2]
    if np.ptp(z) <= 1e-12 * max(1.0, float(np.abs(mesh.vertices).max())):
        return ParamMesh.from_planar(mesh)
    raise ParseError(f"'{path}' has no uv coordinates and is not planar; flatten it first")


def _load_mesh_uv(path, format=None):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fmt = (format or _infer_format(path)).upper()
    if fmt not in _FORMATS:
        raise ParseError(f"unsupported format '{fmt}'")
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        text = fh.read()
    if fmt == "OBJ":
        verts, faces, uv, intens = _parse_obj(text)
    elif fmt == "OFF":
        verts, faces = _parse_off(text)
        uv = intens = None
    else:
        verts, faces, intens = _parse_ply(text)
        uv = None
    mesh = TriMesh(verts, faces, intensity=intens)
    mesh.check_manifold()
    if uv is not None:
        uv = np.asarray(uv, dtype=np.float64)
        if uv.shape != (mesh.n_vertices, 2):
            raise ParseError("uv record count does not match vertex count")
    return mesh, uv


def _parse_floats(tokens, n, where):
    try:
        vals = [float(t) for t in tokens[:n]]
    except ValueError as exc:
        raise ParseError(f"bad number in {where}: {exc}") from None
    if len(vals) != n:
        raise ParseError(f"expected {n} numbers in {where}")
    return vals


def _parse_obj(text):
    verts, uv, faces, face_uv = [], [], [], []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            verts.append(_parse_floats(tok[1:], 3, f"OBJ v line {ln}"))
        elif tok[0] == "vt":
            uv.append(_parse_floats(tok[1:], 2, f"OBJ vt line {ln}"))
        elif tok[0] == "f":
            if len(tok) != 4:
                raise ParseError(f"OBJ line {ln}: only triangle faces are supported")
            vi, ti = [], []
            for part in tok[1:]:
                fields = part.split("/")
                try:
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                except ValueError:
                    raise ParseError(f"OBJ line {ln}: bad face token '{part}'") from None
            if min(vi) < 0:
                raise ParseError(f"OBJ line {ln}: negative indices are not supported")
            faces.append(vi)
            if ti:
                face_uv.append(ti)
    if not verts:
        raise ParseError("OBJ file has no vertices")
    uv_per_vertex = None
    if uv and face_uv:
        if len(face_uv) != len(faces):
            raise ParseError("OBJ mixes faces with and without uv")
        uv = np.asarray(uv)
        uv_per_vertex = np.full((len(verts), 2), np.nan)
        for f, t in zip(faces, face_uv):
            uv_per_vertex[f] = uv[t]
        if np.isnan(uv_per_vertex).any():
            # vertices never referenced by a face keep undefined uv
            uv_per_vertex[np.isnan(uv_per_vertex[:, 0])] = 0.0
    return verts, faces, uv_per_vertex, None


def _parse_off(text):
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].upper() != "OFF":
        raise ParseError("missing OFF header")
    try:
        nv, nf, _ = (int(t) for t in lines[1].split()[:3])
    except (ValueError, IndexError):
        raise ParseError("bad OFF count line") from None
    if len(lines) < 2 + nv + nf:
        raise ParseError("truncated OFF file")
    verts = [_parse_floats(lines[2 + i].split(), 3, f"OFF vertex {i}") for i in range(nv)]
    faces = []
    for i in range(nf):
        tok = lines[2 + nv + i].split()
        try:
            cnt = int(tok[0])
            idx = [int(t) for t in tok[1 : 1 + cnt]]
        except (ValueError, IndexError):
            raise ParseError(f"bad OFF face {i}") from None
        if cnt != 3:
            raise ParseError(f"OFF face {i}: only triangles are supported")
        faces.append(idx)
    return verts, faces


def _parse_ply(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply header")
    it = iter(enumerate(lines[1:], start=1))
    elements = []  # (name, count, [prop names])
    for ln, raw in it:
        tok = raw.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError("only ascii PLY is supported")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("PLY property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            body_start = ln + 1
            break
    else:
        raise ParseError("PLY header never ends")
    body = [l.strip() for l in lines[body_start:] if l.strip()]
    pos = 0
    verts, faces, intens = [], [], None
    for name, count, props in elements:
        rows = body[pos : pos + count]
        if len(rows) != count:
            raise ParseError(f"truncated PLY element '{name}'")
        pos += count
        if name == "vertex":
            for need in ("x", "y", "z"):
                if need not in props:
                    raise ParseError(f"PLY vertex element lacks '{need}'")
            cols = {p: i for i, p in enumerate(props)}
            data = np.array([_parse_floats(r.split(), len(props), "PLY vertex") for r in rows])
            verts = data[:, [cols["x"], cols["y"], cols["z"]]]
            for key in ("quality", "intensity"):
                if key in cols:
                    intens = data[:, cols[key]]
                    break
        elif name == "face":
            for r in rows:
                tok = r.split()
                try:
                    cnt = int(tok[0])
                    idx = [int(t) for t in tok[1 : 1 + cnt]]
                except (ValueError, IndexError):
                    raise ParseError("bad PLY face row") from None
                if cnt != 3:
                    raise ParseError("only triangle PLY faces are supported")
                faces.append(idx)
    if len(verts) == 0:
        raise ParseError("PLY file has no vertices")
    return verts, faces, intens


def save_mesh(mesh, path, uv=None, format=None):
    """Write a TriMesh as OBJ or OFF; pass uv to emit OBJ ``vt`` records."""
    fmt = (format or _infer_format(path)).upper()
    lines = []
    if fmt == "OBJ":
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
        if uv is not None:
            uv = np.asarray(uv)
            for u, v in uv:
                lines.append(f"vt {u:.17g} {v:.17g}")
            for a, b, c in mesh.faces + 1:
                lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
        else:
            for a, b, c in mesh.faces + 1:
                lines.append(f"f {a} {b} {c}")
    elif fmt == "OFF":
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        for x, y, z in mesh.vertices:
            lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
        for a, b, c in mesh.faces:
            lines.append(f"3 {a} {b} {c}")
    else:
        raise ParseError(f"saving format '{fmt}' is not supported")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_csv_rows(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    rows = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            rows.append((ln, [t.strip() for t in line.split(",")]))
    return rows


def load_landmarks(path, moving, target):
    """Load landmark pairs from CSV.

    Rows are either ``moving_vertex_id,target_vertex_id`` or
    ``moving_vertex_id,u,v``; the two row kinds cannot be mixed. Vertex-id
    targets are resolved to that vertex's uv position in ``target``.
    """
    rows = _read_csv_rows(path)
    idx, tgt = [], []
    kinds = set()
    for ln, tok in rows:
        if len(tok) == 2:
            kinds.add("id")
            try:
                mid, tid = int(tok[0]), int(tok[1])
            except ValueError:
                raise ParseError(f"landmark line {ln}: expected integer ids") from None
            if not 0 <= tid < target.n_vertices:
                raise IndexOutOfRange(f"landmark line {ln}: target vertex {tid}")
            idx.append(mid)
            tgt.append(target.uv[tid])
        elif len(tok) == 3:
            kinds.add("uv")
            try:
                mid = int(tok[0])
                u, v = float(tok[1]), float(tok[2])
            except ValueError:
                raise ParseError(f"landmark line {ln}: bad row") from None
            idx.append(mid)
            tgt.append((u, v))
        else:
            raise ParseError(f"landmark line {ln}: expected 2 or 3 fields")
    if len(kinds) > 1:
        raise MixedRowFormats("landmark file mixes id rows and uv rows")
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= moving.n_vertices):
        raise IndexOutOfRange("landmark moving vertex out of range")
    if len(np.unique(idx)) != len(idx):
        raise DuplicateMovingVertex("repeated moving vertex in landmark file")
    return LandmarkSet(idx, np.asarray(tgt, dtype=np.float64).reshape(-1, 2), target=target)


def attach_intensity(mesh, path):
    """Attach per-vertex intensity from a ``vertex_id,value`` CSV file."""
    rows = _read_csv_rows(path)
    values = np.full(mesh.n_vertices, np.nan)
    for ln, tok in rows:
        if len(tok) != 2:
            raise ParseError(f"intensity line {ln}: expected 2 fields")
        try:
            vid = int(tok[0])
            val = float(tok[1])
        except ValueError:
            raise ParseError(f"intensity line {ln}: bad row") from None
        if not 0 <= vid < mesh.n_vertices:
            raise IndexOutOfRange(f"intensity line {ln}: vertex {vid}")
        if not np.isfinite(val):
            raise NonFiniteValue(f"intensity line {ln}: non-finite value")
        values[vid] = val
    missing = np.isnan(values)
    if missing.any():
        raise MissingVertex(f"no intensity for vertex {int(np.flatnonzero(missing)[0])}")
    return mesh.with_intensity(values)
