"""Extended-storage layout shared by fields, halo plans, and the stencil.

A fermion field of one parity stores its V/2 owned sites first, in
parity-block site_index order, then eight ghost zones in fixed order
(x,-), (x,+), (y,-), (y,+), (z,-), (z,+), (t,-), (t,+).  A minus zone
holds sites one step below the box (local axis coordinate -1), a plus
zone one step above (coordinate L).  Zone slots are ordered by the
x-fastest lexicographic rank of the three transverse coordinates.

Gauge links are stored per direction: V owned links in full site_index
order, then a single minus-side zone, because the stencil reads off-box
links only at x_mu = -1 (the backward neighbor's link).

Zone slot order doubles as the wire order of a halo message.  Sender and
receiver enumerate the same transverse coordinate sets in the same order:
neighbor ranks differ only along the exchange axis, and rank offsets are
even on every axis, so the parity filter selects identical transverse
subsets on both sides.
"""

from __future__ import annotations

from functools import lru_cache
from math import prod

import numpy as np

from . import geometry

ZONES = tuple((axis, sign) for axis in range(geometry.NDIM) for sign in (-1, 1))

SPINS = 4
COLORS = 3
SITE_COMPLEX = SPINS * COLORS
FERMION_SITE_BYTES = SITE_COMPLEX * 16
LINK_COMPLEX = COLORS * COLORS
LINK_BYTES = LINK_COMPLEX * 16


def face_sites(local_dims, axis: int) -> int:
    """Sites on one full face of the box, both parities."""
    return prod(local_dims) // local_dims[axis]


def fermion_zone_sites(local_dims, axis: int) -> int:
    """Slots in one fermion ghost zone: half a face (one parity)."""
    return face_sites(local_dims, axis) // 2


@lru_cache(maxsize=128)
def fermion_zone_offsets(local_dims) -> tuple[int, ...]:
    """Start row of each zone (ZONES order) in the extended fermion array."""
    off = prod(local_dims) // 2
    out = []
    for axis, _sign in ZONES:
        out.append(off)
        off += fermion_zone_sites(local_dims, axis)
    return tuple(out)


def fermion_ext_rows(local_dims) -> int:
    offs = fermion_zone_offsets(local_dims)
    return offs[-1] + fermion_zone_sites(local_dims, ZONES[-1][0])


def gauge_ext_rows(local_dims, axis: int) -> int:
    return prod(local_dims) + face_sites(local_dims, axis)


def _transverse_coords(local_dims, axis: int, fixed: int) -> np.ndarray:
    """All sites of the plane x_axis = fixed, transverse x-fastest lex order."""
    rem = [a for a in range(geometry.NDIM) if a != axis]
    n = prod(local_dims[a] for a in rem)
    r = np.arange(n, dtype=np.int64)
    coords = np.empty((n, geometry.NDIM), dtype=np.int64)
    coords[:, axis] = fixed
    for a in rem:
        coords[:, a] = r % local_dims[a]
        r = r // local_dims[a]
    return coords


@lru_cache(maxsize=256)
def fermion_zone_coords(local_dims, parity: int, axis: int, sign: int) -> np.ndarray:
    """Local coordinates (axis entry -1 or L) behind each zone slot, in order."""
    fixed = -1 if sign < 0 else local_dims[axis]
    coords = _transverse_coords(local_dims, axis, fixed)
    keep = (coords.sum(axis=1) & 1) == parity
    out = coords[keep]
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def fermion_pack_indices(local_dims, parity: int, axis: int, sign: int) -> np.ndarray:
    """Block-relative indices of the parity-p face shipped toward ``sign``."""
    fixed = local_dims[axis] - 1 if sign > 0 else 0
    coords = _transverse_coords(local_dims, axis, fixed)
    coords = coords[(coords.sum(axis=1) & 1) == parity]
    idx = geometry.site_index_array(coords, local_dims) - parity * (prod(local_dims) // 2)
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=128)
def gauge_zone_coords(local_dims, axis: int) -> np.ndarray:
    """Coordinates (x_axis = -1) behind the minus-side link zone, both parities."""
    out = _transverse_coords(local_dims, axis, -1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=128)
def gauge_pack_indices(local_dims, axis: int) -> np.ndarray:
    """Full-volume site indices of the top face (x_axis = L-1), zone order."""
    coords = _transverse_coords(local_dims, axis, local_dims[axis] - 1)
    idx = geometry.site_index_array(coords, local_dims)
    idx.setflags(write=False)
    return idx


def _padded_key(coords: np.ndarray, local_dims) -> np.ndarray:
    """Linear key over the box padded by one site on every side."""
    p = [d + 2 for d in local_dims]
    c = coords + 1
    return c[:, 0] + p[0] * (c[:, 1] + p[1] * (c[:, 2] + p[2] * c[:, 3]))


@lru_cache(maxsize=128)
def fermion_ext_lookup(local_dims, parity: int) -> np.ndarray:
    """Extended-row of a parity-p site by padded coordinate key; -1 elsewhere.

    Covers owned sites plus all eight ghost zones, so any nearest-neighbor
    coordinate of an opposite-parity site resolves to a valid row.
    """
    table = np.full(prod(d + 2 for d in local_dims), -1, dtype=np.int64)
    half = prod(local_dims) // 2
    owned = geometry.site_coords_table(local_dims)[parity * half:(parity + 1) * half]
    table[_padded_key(owned, local_dims)] = np.arange(half)
    offs = fermion_zone_offsets(local_dims)
    for (axis, sign), off in zip(ZONES, offs):
        coords = fermion_zone_coords(local_dims, parity, axis, sign)
        table[_padded_key(coords, local_dims)] = off + np.arange(len(coords))
    table.setflags(write=False)
    return table


@lru_cache(maxsize=128)
def gauge_ext_lookup(local_dims, axis: int) -> np.ndarray:
    """Extended-row of a direction-``axis`` link by padded coordinate key."""
    table = np.full(prod(d + 2 for d in local_dims), -1, dtype=np.int64)
    v = prod(local_dims)
    owned = geometry.site_coords_table(local_dims)
    table[_padded_key(owned, local_dims)] = np.arange(v)
    coords = gauge_zone_coords(local_dims, axis)
    table[_padded_key(coords, local_dims)] = v + np.arange(len(coords))
    table.setflags(write=False)
    return table
