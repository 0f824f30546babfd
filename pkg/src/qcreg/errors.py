"""Exception hierarchy shared by all qcreg modules."""


class QcregError(Exception):
    """Base class for all qcreg errors."""


# --- mesh / file IO ---

class ParseError(QcregError):
    """A mesh or CSV file could not be parsed in its declared format."""


class DegenerateFace(QcregError):
    """A face is degenerate (repeated vertex or near-zero area)."""

    def __init__(self, face_index, message=None):
        self.face_index = face_index
        super().__init__(message or f"degenerate face {face_index}")


class NonManifold(QcregError):
    """An edge is shared by more than two faces."""


class IndexOutOfRange(QcregError):
    """A vertex index in an input file does not exist in the mesh."""


class DuplicateMovingVertex(QcregError):
    """The same moving vertex appears in more than one landmark row."""


class MixedRowFormats(QcregError):
    """A landmark file mixes vertex-id rows with explicit-coordinate rows."""


class MissingVertex(QcregError):
    """An intensity file does not cover every vertex."""


class NonFiniteValue(QcregError):
    """An input scalar is NaN or infinite."""


class LandmarkOutsideDomain(UserWarning):
    """A landmark target lies outside the hull of the target domain.

    Warning rather than error: pinning a vertex at its own position is a
    legitimate way to anchor a source that never meets the target.
    """


# --- numerics ---

class NonFiniteInput(QcregError):
    """A numeric operation received NaN or infinite entries."""


class NonPositiveDefiniteA(QcregError):
    """A per-face diffusion matrix has an eigenvalue at or below zero."""

    def __init__(self, face_index, message=None):
        self.face_index = face_index
        super().__init__(message or f"non-positive-definite coefficient on face {face_index}")


class SingularSystem(QcregError):
    """A linear system has no unique solution under the given constraints."""


class NonConvergence(QcregError):
    """An iterative solve exhausted its budget without reaching tolerance."""


# --- flattening ---

class NotDiskTopology(QcregError):
    """The surface is not a manifold mesh with a single boundary loop."""


class FlippedFaces(QcregError):
    """A parametrization contains inverted faces that could not be repaired."""

    def __init__(self, count, message=None):
        self.count = count
        super().__init__(message or f"{count} flipped faces remain after repair")


class NonFiniteScale(QcregError):
    """A domain is degenerate and cannot be normalized."""


# --- quasiconformal machinery ---

class MuOutOfRange(QcregError):
    """A Beltrami coefficient has modulus >= 1 where < 1 is required."""


# --- grids / pipeline ---

class ResolutionMismatch(QcregError):
    """Two grids that must share a resolution do not."""


class EmptyLandmarks(QcregError):
    """An operation requiring landmarks received none."""


class EmptyOverlapWarning(UserWarning):
    """The deformed source and the target domain do not intersect."""


class BoundsConflictWarning(UserWarning):
    """Landmark constraints are incompatible with the distortion bounds."""


class NonInjectiveWarning(UserWarning):
    """A rasterized map covers some pixels more than once."""
