"""Color algebra, lattice fields, seeded initialization, and CG vector ops.

Storage is parity-blocked and site-major: a fermion field of one parity
holds a (V/2, 4, 3) complex128 block in site_index order, followed by
eight ghost zones (see _layout).  Gauge links are kept per direction as
(V, 3, 3) blocks plus one minus-side zone each.  Ghost rows are poisoned
with NaN on allocation so a stencil that reads an unfilled halo fails
loudly instead of silently.

All random initialization is keyed by (seed, purpose, global site), using
a counter-based generator per site, so the same global field is produced
under every decomposition, bitwise.  The arithmetic in axpy/scale is
written out in real components with a fixed association; together with
the quantized global sums in comm.global_sum this keeps whole solver
trajectories bitwise independent of the rank count.

Fields track a data version and a halo version.  Mutating ops bump the
data version; comm.halo_exchange re-synchronizes the halo version.  The
stencil refuses to consume a halo older than the data it belongs to.
"""

from __future__ import annotations

import struct
from math import prod

import numpy as np

from . import _layout, comm, geometry
from .geometry import Decomposition, Parity

SPINS = _layout.SPINS
COLORS = _layout.COLORS
SITE_COMPLEX = _layout.SITE_COMPLEX

_PURPOSE_GAUGE = 0
_PURPOSE_FERMION = 1  # +parity


class AlgebraError(ValueError):
    pass


class ShapeMismatch(AlgebraError):
    """Operands live on different decompositions, parities, or ranks."""


class FileFormatError(AlgebraError):
    pass


# ---------------------------------------------------------------------------
# 3x3 kernels

def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Complex 3x3 matrix times color vector, batched over leading axes.

    Accepts (..., 3, 3) with (..., 3); the contraction is evaluated row by
    row in fixed order, so results match a scalar triple loop bitwise.
    """
    m = np.asarray(m)
    v = np.asarray(v)
    batch = np.broadcast_shapes(m.shape[:-2], v.shape[:-1])
    mb = np.broadcast_to(m, batch + (3, 3)).reshape(-1, 3, 3)
    vb = np.broadcast_to(v, batch + (3,)).reshape(-1, 3)
    out = np.einsum("nij,nj->ni", mb, vb)
    return out.reshape(batch + (3,))


def adjoint_matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Conjugate transpose of ``m`` times ``v``: (m^dag v)_i = sum_j conj(m_ji) v_j."""
    m = np.asarray(m)
    v = np.asarray(v)
    batch = np.broadcast_shapes(m.shape[:-2], v.shape[:-1])
    mb = np.broadcast_to(m, batch + (3, 3)).reshape(-1, 3, 3)
    vb = np.broadcast_to(v, batch + (3,)).reshape(-1, 3)
    out = np.einsum("nji,nj->ni", np.conj(mb), vb)
    return out.reshape(batch + (3,))


def random_su3(rng: np.random.Generator) -> np.ndarray:
    """One SU(3) matrix from a Gram-Schmidt'd complex Gaussian draw."""
    a = rng.standard_normal(18).reshape(3, 3, 2)
    return _su3_from_gaussian((a[..., 0] + 1j * a[..., 1])[np.newaxis])[0]


def _su3_from_gaussian(a: np.ndarray) -> np.ndarray:
    """Orthonormalize rows 0 and 1 of (n, 3, 3) draws; row 2 closes the group.

    Every contraction is written elementwise with fixed association so the
    result for a given site never depends on the batch it was computed in.
    """
    out = np.empty_like(a)
    r0 = a[:, 0]
    n0 = np.sqrt(_abs2(r0[:, 0]) + _abs2(r0[:, 1]) + _abs2(r0[:, 2]))
    r0 = r0 / n0[:, None]
    r1 = a[:, 1]
    proj = (np.conj(r0[:, 0]) * r1[:, 0] + np.conj(r0[:, 1]) * r1[:, 1]
            + np.conj(r0[:, 2]) * r1[:, 2])
    r1 = r1 - proj[:, None] * r0
    n1 = np.sqrt(_abs2(r1[:, 0]) + _abs2(r1[:, 1]) + _abs2(r1[:, 2]))
    r1 = r1 / n1[:, None]
    out[:, 0] = r0
    out[:, 1] = r1
    # conj of the algebraic cross product makes det exactly +1 and rows unitary
    out[:, 2, 0] = np.conj(r0[:, 1] * r1[:, 2] - r0[:, 2] * r1[:, 1])
    out[:, 2, 1] = np.conj(r0[:, 2] * r1[:, 0] - r0[:, 0] * r1[:, 2])
    out[:, 2, 2] = np.conj(r0[:, 0] * r1[:, 1] - r0[:, 1] * r1[:, 0])
    return out


def _abs2(z: np.ndarray) -> np.ndarray:
    return z.real * z.real + z.imag * z.imag


# ---------------------------------------------------------------------------
# Fields

class FermionField:
    """One parity's worth of spinors on one rank's box, plus halo zones."""

    halo_kind = "fermion"

    __slots__ = ("decomp", "rank", "parity", "_ext", "data",
                 "data_version", "halo_version")

    def __init__(self, decomp: Decomposition, parity: Parity, rank: int = 0,
                 _ext: np.ndarray | None = None):
        self.decomp = decomp
        self.rank = int(rank)
        self.parity = Parity(parity)
        if not 0 <= self.rank < decomp.n_ranks:
            raise ShapeMismatch(f"rank {rank} outside grid {decomp.grid_dims}")
        rows = _layout.fermion_ext_rows(decomp.local_dims)
        if _ext is None:
            _ext = np.full((rows, SPINS, COLORS), np.nan + np.nan * 1j,
                           dtype=np.complex128)
            _ext[:decomp.half_volume] = 0
        self._ext = _ext
        self.data = self._ext[:decomp.half_volume]
        self.data_version = 0
        self.halo_version = -1

    @classmethod
    def zeros(cls, decomp: Decomposition, parity, rank: int = 0) -> "FermionField":
        return cls(decomp, parity, rank)

    @property
    def n_complex(self) -> int:
        """Owned complex numbers: 12 per site of this parity."""
        return self.decomp.half_volume * SITE_COMPLEX

    @property
    def halo_fresh(self) -> bool:
        return self.halo_version == self.data_version

    def _bump(self) -> None:
        self.data_version += 1

    def _mark_halo_fresh(self) -> None:
        self.halo_version = self.data_version

    def _halo_array(self, axis: int) -> np.ndarray:
        return self._ext.reshape(self._ext.shape[0], SITE_COMPLEX)

    def zone_view(self, axis: int, sign: int) -> np.ndarray:
        """Ghost rows for (axis, sign), shape (zone sites, 4, 3)."""
        dims = self.decomp.local_dims
        off = _layout.fermion_zone_offsets(dims)[_layout.ZONES.index((axis, sign))]
        return self._ext[off:off + _layout.fermion_zone_sites(dims, axis)]

    def _gather_payload(self):
        return ("fermion", int(self.parity), self.rank, self.data.copy())

    def _assemble_global(self, parts) -> "FermionField":
        dec = self.decomp
        gdec = geometry.decompose(dec.global_dims, (1, 1, 1, 1))
        out = FermionField(gdec, self.parity)
        half_l, half_g = dec.half_volume, gdec.half_volume
        p = int(self.parity)
        for r, (kind, par, rk, block) in enumerate(parts):
            if kind != "fermion" or par != p:
                raise comm.CollectiveMismatch(
                    f"rank {r} gathered {kind}/parity {par}, expected fermion/{p}"
                )
            gmap = geometry.global_index_map(dec, rk)
            rows = gmap[p * half_l:(p + 1) * half_l] - p * half_g
            out.data[rows] = block
        out._bump()
        return out


class GaugeField:
    """Four directed link fields on one rank's box, plus per-axis link zones."""

    halo_kind = "gauge"

    __slots__ = ("decomp", "rank", "_ext", "data_version", "halo_version")

    def __init__(self, decomp: Decomposition, rank: int = 0,
                 _ext: list[np.ndarray] | None = None):
        self.decomp = decomp
        self.rank = int(rank)
        if not 0 <= self.rank < decomp.n_ranks:
            raise ShapeMismatch(f"rank {rank} outside grid {decomp.grid_dims}")
        if _ext is None:
            _ext = []
            for axis in range(geometry.NDIM):
                rows = _layout.gauge_ext_rows(decomp.local_dims, axis)
                arr = np.full((rows, COLORS, COLORS), np.nan + np.nan * 1j,
                              dtype=np.complex128)
                arr[:decomp.local_volume] = 0
                _ext.append(arr)
        self._ext = _ext
        self.data_version = 0
        self.halo_version = -1

    def links(self, axis: int) -> np.ndarray:
        """Owned links in direction ``axis``, shape (V, 3, 3), site_index order."""
        return self._ext[axis][:self.decomp.local_volume]

    def link_at(self, coords, axis: int) -> np.ndarray:
        return self.links(axis)[geometry.site_index(coords, self.decomp.local_dims)]

    @property
    def halo_fresh(self) -> bool:
        return self.halo_version == self.data_version

    def _bump(self) -> None:
        self.data_version += 1

    def _mark_halo_fresh(self) -> None:
        self.halo_version = self.data_version

    def _halo_array(self, axis: int) -> np.ndarray:
        ext = self._ext[axis]
        return ext.reshape(ext.shape[0], _layout.LINK_COMPLEX)

    def zone_view(self, axis: int) -> np.ndarray:
        """Minus-side ghost links of direction ``axis``."""
        return self._ext[axis][self.decomp.local_volume:]

    def _gather_payload(self):
        return ("gauge", None, self.rank,
                [self.links(a).copy() for a in range(geometry.NDIM)])

    def _assemble_global(self, parts) -> "GaugeField":
        dec = self.decomp
        gdec = geometry.decompose(dec.global_dims, (1, 1, 1, 1))
        out = GaugeField(gdec)
        for r, (kind, _par, rk, blocks) in enumerate(parts):
            if kind != "gauge":
                raise comm.CollectiveMismatch(f"rank {r} gathered {kind}, expected gauge")
            gmap = geometry.global_index_map(dec, rk)
            for a in range(geometry.NDIM):
                out.links(a)[gmap] = blocks[a]
        out._bump()
        return out


# ---------------------------------------------------------------------------
# Seeded initialization

def _site_rng(seed: int, purpose: int, global_lex: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, purpose], dtype=np.uint64)
    counter = np.array([0, 0, 0, global_lex], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def _global_lex_ranks(decomp: Decomposition, rank: int) -> np.ndarray:
    origin = np.array(decomp.rank_origin(rank), dtype=np.int64)
    coords = geometry.site_coords_table(decomp.local_dims) + origin
    g = decomp.global_dims
    return coords[:, 0] + g[0] * (coords[:, 1] + g[1] * (coords[:, 2] + g[2] * coords[:, 3]))


def unit_gauge(decomp: Decomposition, rank: int = 0) -> GaugeField:
    """Identity on every link (free field)."""
    gauge = GaugeField(decomp, rank)
    eye = np.eye(COLORS, dtype=np.complex128)
    for a in range(geometry.NDIM):
        gauge.links(a)[:] = eye
    gauge._bump()
    return gauge


def random_gauge(decomp: Decomposition, seed: int, rank: int = 0) -> GaugeField:
    """Independent SU(3) draws per (global site, direction), keyed by seed.

    Each site's generator is advanced in a fixed order (direction-major,
    18 reals per matrix), so the link field is a pure function of
    (seed, global coordinate): every decomposition produces the same
    global field bitwise.
    """
    gauge = GaugeField(decomp, rank)
    v = decomp.local_volume
    raw = np.empty((v, geometry.NDIM, COLORS, COLORS), dtype=np.complex128)
    for i, glex in enumerate(_global_lex_ranks(decomp, rank)):
        draw = _site_rng(seed, _PURPOSE_GAUGE, int(glex)).standard_normal(72)
        m = draw.reshape(geometry.NDIM, COLORS, COLORS, 2)
        raw[i] = m[..., 0] + 1j * m[..., 1]
    su3 = _su3_from_gaussian(raw.reshape(-1, COLORS, COLORS))
    su3 = su3.reshape(v, geometry.NDIM, COLORS, COLORS)
    for a in range(geometry.NDIM):
        gauge.links(a)[:] = su3[:, a]
    gauge._bump()
    return gauge


def random_fermion(decomp: Decomposition, parity, seed: int,
                   rank: int = 0) -> FermionField:
    """Gaussian spinors per global site of one parity, decomposition-invariant."""
    par = Parity(parity)
    field = FermionField(decomp, par, rank)
    half = decomp.half_volume
    lex = _global_lex_ranks(decomp, rank)[int(par) * half:(int(par) + 1) * half]
    purpose = _PURPOSE_FERMION + int(par)
    for i, glex in enumerate(lex):
        draw = _site_rng(seed, purpose, int(glex)).standard_normal(24)
        m = draw.reshape(SPINS, COLORS, 2)
        field.data[i] = m[..., 0] + 1j * m[..., 1]
    field._bump()
    return field


# ---------------------------------------------------------------------------
# Vector ops

def _require_like(x: FermionField, y: FermionField) -> None:
    if x.decomp is not y.decomp and (
        x.decomp.global_dims != y.decomp.global_dims
        or x.decomp.grid_dims != y.decomp.grid_dims
    ):
        raise ShapeMismatch("fields live on different decompositions")
    if x.parity != y.parity:
        raise ShapeMismatch(f"parity mismatch: {x.parity.name} vs {y.parity.name}")
    if x.rank != y.rank:
        raise ShapeMismatch(f"fields owned by different ranks: {x.rank} vs {y.rank}")


def zeros_like(x: FermionField) -> FermionField:
    return FermionField(x.decomp, x.parity, x.rank)


def copy(x: FermionField, out: FermionField | None = None) -> FermionField:
    if out is None:
        out = zeros_like(x)
    else:
        _require_like(x, out)
    out.data[...] = x.data
    out._bump()
    return out


def axpy(a, x: FermionField, y: FermionField,
         out: FermionField | None = None) -> FermionField:
    """a*x + y, evaluated in real components with fixed association.

    out.re = (a.re*x.re - a.im*x.im) + y.re and the mirror for imag, per
    element: exactly what a naive scalar loop over Python complex numbers
    computes, so results are bitwise reproducible and batch-independent.
    a == 0 short-circuits to a copy of y (exact identity).
    """
    _require_like(x, y)
    if out is None:
        out = zeros_like(x)
    else:
        _require_like(x, out)
    a = complex(a)
    if a == 0:
        return copy(y, out=out)
    xd, yd, od = x.data, y.data, out.data
    if a.imag == 0.0:
        tr = xd.real * a.real
        ti = xd.imag * a.real
    else:
        tr = xd.real * a.real
        tr -= xd.imag * a.imag
        ti = xd.imag * a.real
        ti += xd.real * a.imag
    np.add(tr, yd.real, out=od.real)
    np.add(ti, yd.imag, out=od.imag)
    out._bump()
    return out


def scale(a, x: FermionField, out: FermionField | None = None) -> FermionField:
    """a*x with the same fixed-association componentwise arithmetic as axpy."""
    if out is None:
        out = zeros_like(x)
    else:
        _require_like(x, out)
    a = complex(a)
    xd, od = x.data, out.data
    if a.imag == 0.0:
        np.multiply(xd.real, a.real, out=od.real)
        np.multiply(xd.imag, a.real, out=od.imag)
    else:
        tr = xd.real * a.real
        tr -= xd.imag * a.imag
        ti = xd.imag * a.real
        ti += xd.real * a.imag
        od.real[...] = tr
        od.imag[...] = ti
    out._bump()
    return out


def _single_rank_comm(x: FermionField):
    if x.decomp.n_ranks != 1:
        raise ShapeMismatch(
            "multi-rank field reductions need an explicit topo and transport"
        )
    return comm.build_topology((1, 1, 1, 1), 0), comm.SerialTransport()


def dot(x: FermionField, y: FermionField, topo=None, transport=None) -> complex:
    """Global <x, y> = sum conj(x_i) y_i over all ranks.

    The sum runs through comm.global_sum, so the value is bitwise
    identical on every rank and across decompositions of the same field.
    """
    _require_like(x, y)
    if topo is None:
        topo, transport = _single_rank_comm(x)
    products = np.conj(x.data) * y.data
    return comm.global_sum(products, topo, transport)


def norm2(x: FermionField, topo=None, transport=None) -> float:
    """Global squared 2-norm; bitwise equal to dot(x, x).real."""
    if topo is None:
        topo, transport = _single_rank_comm(x)
    d = x.data
    products = d.real * d.real
    products += d.imag * d.imag
    return comm.global_sum(products, topo, transport)


# ---------------------------------------------------------------------------
# Persistence

_MAGIC = b"LQF1"
_PARITY_GAUGE = 2
_HEADER = struct.Struct("<4s4IB")


def save_field(field, path) -> None:
    """Write magic 'LQF1', 4 LE u32 dims, parity byte, LE (re, im) f64 pairs.

    The dims are the field's box dims.  Payload order is storage order:
    fermion sites as stored; gauge links direction-major, sites within.
    """
    dims = field.decomp.local_dims
    if isinstance(field, FermionField):
        pbyte = int(field.parity)
        payload = field.data.astype("<c16").tobytes()
    else:
        pbyte = _PARITY_GAUGE
        payload = b"".join(
            field.links(a).astype("<c16").tobytes() for a in range(geometry.NDIM)
        )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, *dims, pbyte))
        fh.write(payload)


def load_field(path):
    """Read a field saved by save_field; returns a single-box field, halo stale."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FileFormatError(f"{path}: truncated header")
        magic, lx, ly, lz, lt, pbyte = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    dims = (lx, ly, lz, lt)
    try:
        decomp = geometry.decompose(dims, (1, 1, 1, 1))
    except geometry.GeometryError as exc:
        raise FileFormatError(f"{path}: bad dims {dims}: {exc}") from exc
    v = decomp.local_volume
    if pbyte in (0, 1):
        want = (v // 2) * SITE_COMPLEX * 16
        if len(payload) != want:
            raise FileFormatError(f"{path}: {len(payload)} payload bytes, need {want}")
        field = FermionField(decomp, Parity(pbyte))
        field.data[...] = np.frombuffer(payload, dtype="<c16").reshape(
            v // 2, SPINS, COLORS)
        field._bump()
        return field
    if pbyte == _PARITY_GAUGE:
        want = geometry.NDIM * v * _layout.LINK_COMPLEX * 16
        if len(payload) != want:
            raise FileFormatError(f"{path}: {len(payload)} payload bytes, need {want}")
        gauge = GaugeField(decomp)
        links = np.frombuffer(payload, dtype="<c16").reshape(
            geometry.NDIM, v, COLORS, COLORS)
        for a in range(geometry.NDIM):
            gauge.links(a)[...] = links[a]
        gauge._bump()
        return gauge
    raise FileFormatError(f"{path}: unknown parity byte {pbyte}")
