"""Torus geometry, checkerboard site indexing, and 4D domain decomposition.

Sites of an Lx x Ly x Lz x Lt periodic lattice are split by parity
(sum of coordinates mod 2) into an even block followed by an odd block.
Within each block sites are ordered x-fastest lexicographically, i.e. by
``x + Lx*(y + Ly*(z + Lz*t))``.  All extents must be even so the two
blocks have equal size and so that cutting the lattice into equal boxes
never splits a checkerboard pair across an odd offset.

A decomposition assigns each rank of a process grid one congruent local
box.  Rank numbering over the grid is x-fastest as well.  Because local
extents are even, every rank's coordinate offset is even in each
direction, so the parity of a site computed from local coordinates
equals its global parity.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from math import prod

import numpy as np

NDIM = 4
AXIS_NAMES = ("x", "y", "z", "t")

Coord = tuple[int, int, int, int]


class GeometryError(ValueError):
    """Base class for lattice geometry failures."""


class NonDivisible(GeometryError):
    """A global extent is not a multiple of the grid extent on that axis."""


class OddLocalExtent(GeometryError):
    """A decomposition would produce an odd (or sub-2) local extent."""


class OutOfRange(GeometryError):
    """Coordinate or linear index outside the lattice."""


class Parity(IntEnum):
    EVEN = 0
    ODD = 1

    @property
    def other(self) -> "Parity":
        return Parity(1 - self.value)


def parity(c) -> Parity:
    """Checkerboard parity of a site: sum of its coordinates mod 2."""
    return Parity((int(c[0]) + int(c[1]) + int(c[2]) + int(c[3])) & 1)


def parse_dims(text: str) -> Coord:
    """Parse ``"LxLyLzLt"`` strings such as ``"96x96x96x192"``.

    Separator is a lowercase x.  Exactly four positive integer fields are
    required.
    """
    parts = str(text).strip().split("x")
    if len(parts) != NDIM:
        raise GeometryError(
            f"expected 4 'x'-separated extents, got {len(parts)} in {text!r}"
        )
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise GeometryError(f"non-integer extent in {text!r}") from exc
    if any(d <= 0 for d in dims):
        raise GeometryError(f"extents must be positive, got {dims}")
    return dims


def format_dims(dims) -> str:
    return "x".join(str(int(d)) for d in dims)


def _check_dims(dims, what: str, even: bool = False) -> Coord:
    dims = tuple(int(d) for d in dims)
    if len(dims) != NDIM:
        raise GeometryError(f"{what} needs {NDIM} extents, got {dims}")
    if any(d <= 0 for d in dims):
        raise GeometryError(f"{what} extents must be positive, got {dims}")
    if even and any(d % 2 for d in dims):
        raise GeometryError(f"{what} extents must all be even, got {dims}")
    return dims


@dataclass(frozen=True)
class GlobalLattice:
    """Full periodic lattice.  All four extents must be even."""

    dims: Coord

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, "lattice", even=True))

    @property
    def volume(self) -> int:
        return prod(self.dims)


@dataclass(frozen=True)
class ProcessGrid:
    """Grid of ranks; extent 1 on an axis means no cut there."""

    dims: Coord

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, "process grid"))

    @property
    def n_ranks(self) -> int:
        return prod(self.dims)


@dataclass(frozen=True)
class Decomposition:
    """A global lattice cut into one congruent box per rank."""

    global_dims: Coord
    grid_dims: Coord
    local_dims: Coord

    @property
    def n_ranks(self) -> int:
        return prod(self.grid_dims)

    @property
    def global_volume(self) -> int:
        return prod(self.global_dims)

    @property
    def local_volume(self) -> int:
        return prod(self.local_dims)

    @property
    def half_volume(self) -> int:
        """Sites of one parity in the local box."""
        return self.local_volume // 2

    def rank_coords(self, rank: int) -> Coord:
        return coords_from_rank(self.grid_dims, rank)

    def rank_origin(self, rank: int) -> Coord:
        """Global coordinates of the local box corner owned by ``rank``."""
        rc = self.rank_coords(rank)
        return tuple(rc[a] * self.local_dims[a] for a in range(NDIM))


def decompose(lattice, grid) -> Decomposition:
    """Cut ``lattice`` over ``grid``; every local extent must be even and >= 2."""
    if not isinstance(lattice, GlobalLattice):
        lattice = GlobalLattice(tuple(lattice))
    if not isinstance(grid, ProcessGrid):
        grid = ProcessGrid(tuple(grid))
    local = []
    for a in range(NDIM):
        g, p = lattice.dims[a], grid.dims[a]
        if g % p:
            raise NonDivisible(
                f"{AXIS_NAMES[a]} extent {g} not divisible by grid extent {p}"
            )
        loc = g // p
        if loc < 2 or loc % 2:
            raise OddLocalExtent(
                f"local {AXIS_NAMES[a]} extent {loc} (need even and >= 2)"
            )
        local.append(loc)
    return Decomposition(lattice.dims, grid.dims, tuple(local))


def lex_rank(c, dims) -> int:
    """x-fastest lexicographic rank of a coordinate."""
    return c[0] + dims[0] * (c[1] + dims[1] * (c[2] + dims[2] * c[3]))


def lex_coords(r: int, dims) -> Coord:
    x = r % dims[0]
    r //= dims[0]
    y = r % dims[1]
    r //= dims[1]
    z = r % dims[2]
    return (x, y, z, r // dims[2])


def _check_coord(c, dims) -> Coord:
    c = tuple(int(v) for v in c)
    if len(c) != NDIM:
        raise OutOfRange(f"coordinate needs {NDIM} components, got {c}")
    for a in range(NDIM):
        if not 0 <= c[a] < dims[a]:
            raise OutOfRange(f"{AXIS_NAMES[a]}={c[a]} outside [0, {dims[a]})")
    return c


def site_index(c, dims) -> int:
    """Storage index of a site: parity block base plus position within block.

    Within each parity block the x-fastest lexicographic order is kept, and
    consecutive lexicographic sites of one parity sit two lex ranks apart,
    so the in-block position is just ``lex_rank // 2``.
    """
    c = _check_coord(c, dims)
    half = prod(dims) // 2
    return parity(c).value * half + lex_rank(c, dims) // 2


def index_to_site(i: int, dims) -> Coord:
    """Inverse of :func:`site_index`."""
    v = prod(dims)
    i = int(i)
    if not 0 <= i < v:
        raise OutOfRange(f"site index {i} outside [0, {v})")
    half = v // 2
    p = 0 if i < half else 1
    j = i - p * half
    # The in-block position j came from lex rank 2j or 2j+1; parity picks one.
    c = lex_coords(2 * j, dims)
    if parity(c).value != p:
        c = lex_coords(2 * j + 1, dims)
    return c


def neighbor(c, axis: int, sign: int, dims, grid_dims=None):
    """Step one site along ``axis``; wrap around the local box.

    Returns ``(coords, delta)`` where ``delta`` is the owner-rank offset
    along that axis: 0 when the stepped site stays in this box or the
    process grid has extent 1 there (self-wrap), otherwise the sign of the
    crossing.  ``grid_dims`` omitted means a single-rank grid.
    """
    if axis not in range(NDIM):
        raise OutOfRange(f"axis {axis} outside [0, {NDIM})")
    if sign not in (1, -1):
        raise GeometryError(f"sign must be +1 or -1, got {sign}")
    c = _check_coord(c, dims)
    n = c[axis] + sign
    delta = 0
    if n < 0:
        n += dims[axis]
        delta = -1
    elif n >= dims[axis]:
        n -= dims[axis]
        delta = 1
    if grid_dims is None or grid_dims[axis] == 1:
        delta = 0
    out = list(c)
    out[axis] = n
    return tuple(out), delta


def surface_count(dims) -> int:
    """Boundary crossings of a box: sum over the 8 faces of the face area."""
    dims = _check_dims(dims, "box")
    v = prod(dims)
    return sum(2 * v // d for d in dims)


def surface_to_volume(dims) -> float:
    return surface_count(dims) / prod(dims)


def rank_from_coords(grid_dims, coords) -> int:
    coords = _check_coord(coords, grid_dims)
    return lex_rank(coords, grid_dims)


def coords_from_rank(grid_dims, rank: int) -> Coord:
    n = prod(grid_dims)
    if not 0 <= rank < n:
        raise OutOfRange(f"rank {rank} outside [0, {n})")
    return lex_coords(int(rank), grid_dims)


@lru_cache(maxsize=64)
def site_coords_table(dims) -> np.ndarray:
    """Coordinates of every site in storage order, shape (V, 4) int64.

    Row i gives the coordinates of the site with storage index i.  Cached
    per dims; treat the result as read-only.
    """
    dims = tuple(int(d) for d in dims)
    # Build in lexicographic order, then stack the even block over the odd one.
    t, z, y, x = np.meshgrid(
        np.arange(dims[3]), np.arange(dims[2]), np.arange(dims[1]), np.arange(dims[0]),
        indexing="ij",
    )
    coords = np.stack(
        [x.ravel(), y.ravel(), z.ravel(), t.ravel()], axis=1
    ).astype(np.int64)
    par = coords.sum(axis=1) & 1
    out = np.concatenate([coords[par == 0], coords[par == 1]])
    out.setflags(write=False)
    return out


def site_index_array(coords: np.ndarray, dims) -> np.ndarray:
    """Vectorized :func:`site_index` for an (N, 4) coordinate array."""
    coords = np.asarray(coords, dtype=np.int64)
    half = prod(dims) // 2
    lex = coords[:, 0] + dims[0] * (
        coords[:, 1] + dims[1] * (coords[:, 2] + dims[2] * coords[:, 3])
    )
    par = coords.sum(axis=1) & 1
    return par * half + lex // 2


def global_index_map(decomp: Decomposition, rank: int) -> np.ndarray:
    """Global storage index of each local site, in local storage order.

    Even rank offsets keep parity, so local block p maps into global block p
    and a gather can scatter local data straight into the global layout.
    """
    origin = np.array(decomp.rank_origin(rank), dtype=np.int64)
    local = site_coords_table(decomp.local_dims)
    return site_index_array(local + origin, decomp.global_dims)
