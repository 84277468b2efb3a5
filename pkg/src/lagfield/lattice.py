"""Uniform space-time lattices, fields on them and stencil extraction."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import MisuseError, ShapeError, SizingError

PERIODIC = "periodic"
DIRICHLET = "dirichlet"


class StencilKind(str, Enum):
    """Stencil layouts. Each kind lists (time, space) offsets in tuple order."""

    PTS3_7STENCIL = "pts3_7stencil"
    PTS4_9STENCIL = "pts4_9stencil"
    PTS2_3STENCIL = "pts2_3stencil"

    @property
    def offsets(self):
        return _OFFSETS[self]

    @property
    def size(self):
        return len(_OFFSETS[self])

    @property
    def arity(self):
        """Number of points the matching density takes."""
        return {"pts3_7stencil": 3, "pts4_9stencil": 4, "pts2_3stencil": 2}[self.value]


# 7-point order follows the tuples of the wave experiment:
# (u^i_j, u^{i+1}_j, u^i_{j+1}, u^{i-1}_j, u^{i-1}_{j+1}, u^i_{j-1}, u^{i+1}_{j-1})
_OFFSETS = {
    StencilKind.PTS3_7STENCIL: ((0, 0), (1, 0), (0, 1), (-1, 0), (-1, 1), (0, -1), (1, -1)),
    StencilKind.PTS4_9STENCIL: (
        (0, 0), (1, 0), (0, 1), (1, 1),
        (-1, 0), (-1, 1), (0, -1), (1, -1), (-1, -1),
    ),
    # 1-D chain (q^{i-1}, q^i, q^{i+1}); the space offset is unused
    StencilKind.PTS2_3STENCIL: ((-1, 0), (0, 0), (1, 0)),
}


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid with ``n_t`` time steps and ``n_x`` spatial cells.

    Periodic grids carry ``n_x`` columns (no duplicated seam); Dirichlet
    grids carry ``n_x + 1`` columns whose first and last are boundary data.
    """

    n_t: int
    n_x: int
    dt: float
    dx: float
    spatial_bc: str = PERIODIC

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise SizingError(f"spacings must be positive, got dt={self.dt}, dx={self.dx}")
        if self.n_t < 1 or self.n_x < 3:
            raise SizingError(f"need n_t >= 1 and n_x >= 3, got n_t={self.n_t}, n_x={self.n_x}")
        if self.spatial_bc not in (PERIODIC, DIRICHLET):
            raise MisuseError(f"unknown boundary condition {self.spatial_bc!r}")

    @property
    def periodic(self):
        return self.spatial_bc == PERIODIC

    @property
    def columns(self):
        return self.n_x if self.periodic else self.n_x + 1

    @property
    def interior(self):
        """Column indices of unknowns in a time slice."""
        if self.periodic:
            return np.arange(self.n_x)
        return np.arange(1, self.n_x)

    @property
    def length(self):
        return self.n_x * self.dx

    @property
    def duration(self):
        return self.n_t * self.dt

    def with_steps(self, n_t):
        return Grid2D(n_t, self.n_x, self.dt, self.dx, self.spatial_bc)

    def coarsened(self, stride):
        """Grid with spacings multiplied by ``stride`` over the same domain."""
        if self.n_t % stride or self.n_x % stride:
            raise SizingError(f"stride {stride} does not divide the grid {self.n_t}x{self.n_x}")
        return Grid2D(self.n_t // stride, self.n_x // stride, self.dt * stride,
                      self.dx * stride, self.spatial_bc)

    def x(self):
        return np.arange(self.columns) * self.dx

    def t(self):
        return np.arange(self.n_t + 1) * self.dt


def spatial_wrap(grid, j):
    """Column index ``j`` reduced modulo ``n_x`` (periodic grids only)."""
    if not grid.periodic:
        raise MisuseError("spatial_wrap called on a non-periodic grid")
    return int(j) % grid.n_x


class Field:
    """Samples ``u^i_j`` of a ``d``-component field; immutable after construction."""

    __slots__ = ("grid", "values")

    def __init__(self, grid, values):
        values = np.array(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        expected = (grid.n_t + 1, grid.columns)
        if values.ndim != 3 or values.shape[:2] != expected:
            raise ShapeError(f"field of shape {values.shape} does not fit grid {expected} x d")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    @property
    def d(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def slice(self, i):
        return self.values[i]

    def __repr__(self):
        return f"Field(n_t={self.grid.n_t}, columns={self.grid.columns}, d={self.d})"

    def __eq__(self, other):
        return (isinstance(other, Field) and self.grid == other.grid
                and np.array_equal(self.values, other.values))

    __hash__ = None


def stencil_centres(grid, kind, stride=1):
    """Interior vertices (i, j) at which every stencil neighbour exists."""
    kind = StencilKind(kind)
    if stride < 1:
        raise SizingError(f"stride must be >= 1, got {stride}")
    if kind is StencilKind.PTS2_3STENCIL:
        raise MisuseError("1-D chains are built from latent trajectories, not from fields")
    offs = np.array(kind.offsets)
    lo_t, hi_t = -offs[:, 0].min() * stride, offs[:, 0].max() * stride
    times = np.arange(lo_t, grid.n_t - hi_t + 1)
    if grid.periodic:
        cols = np.arange(grid.n_x)
    else:
        lo_x, hi_x = -offs[:, 1].min() * stride, offs[:, 1].max() * stride
        cols = np.arange(lo_x, grid.n_x - hi_x + 1)
    if times.size == 0 or cols.size == 0:
        raise SizingError(f"grid {grid.n_t}x{grid.n_x} too small for {kind.value} at stride {stride}")
    ii, jj = np.meshgrid(times, cols, indexing="ij")
    return ii.ravel(), jj.ravel()


def extract_stencil_array(field, kind, stride=1):
    """Stencil tuples as an array of shape (count, stencil size, d).

    Rows are ordered time-major (i outer, j inner).
    """
    kind = StencilKind(kind)
    vals = np.asarray(field.values if isinstance(field, Field) else field)
    grid = field.grid
    ii, jj = stencil_centres(grid, kind, stride)
    offs = np.array(kind.offsets) * stride
    ti = ii[:, None] + offs[None, :, 0]
    tj = jj[:, None] + offs[None, :, 1]
    if grid.periodic:
        tj = np.mod(tj, grid.n_x)
    return vals[ti, tj]


@dataclass(frozen=True)
class StencilTuple:
    kind: StencilKind
    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.values.shape[0] != StencilKind(self.kind).size:
            raise ShapeError(f"{self.kind} expects {StencilKind(self.kind).size} points")


def extract_stencils(field, kind, stride=1):
    """One :class:`StencilTuple` per admissible interior vertex."""
    kind = StencilKind(kind)
    arr = extract_stencil_array(field, kind, stride)
    return [StencilTuple(kind, row, stride) for row in arr]


def stencil_count(grid, kind, stride=1):
    ii, _ = stencil_centres(grid, kind, stride)
    return ii.size


def latent_triples(q):
    """Consecutive triples (q^{i-1}, q^i, q^{i+1}) of a latent trajectory ``q`` (n, r)."""
    q = np.asarray(q, dtype=float)
    if q.shape[0] < 3:
        raise SizingError("need at least three latent states")
    return np.stack([q[:-2], q[1:-1], q[2:]], axis=1)
