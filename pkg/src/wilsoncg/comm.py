"""Simulated message passing for rank-parallel lattice runs.

Ranks are either the calling thread itself (serial transport, exactly one
rank) or one worker thread per rank inside this process (concurrent
transport).  Workers share nothing but the transport; every field and
operator lives privately on its rank, and all interaction happens through
point-to-point frames or collectives, the way distributed solvers do it.

A frame is a little-endian header {phase: u64, axis: u8, sign: u8,
byte_len: u64} followed by the packed face payload.  The phase counter
increments once per exchange, so frames from a neighbor that has already
moved on to its next exchange are stashed rather than misread; within one
(source, phase) the (axis, sign) pair identifies the face, which keeps
extent-2 grids (both faces to the same neighbor) and extent-1 grids
(self-messages) unambiguous without special cases.

Collectives are rendezvous points.  Every rank must issue the same
sequence of collective calls; the transport checks the operation kind at
each rendezvous and raises CollectiveMismatch on disagreement instead of
deadlocking.  An optional watchdog bounds every blocking wait and aborts
the run with a diagnostic naming the stalled phase.

allreduce_det accumulates the per-rank partials in ascending rank order
using compensated summation, on every rank alike: results are bitwise
identical across ranks and across repeated runs at a fixed rank count.
global_sum goes further: it quantizes the summands against the global
maximum and adds integers exactly, which makes the summed value bitwise
independent of how the lattice is decomposed.  The solver's inner products
ride on it, so iteration trajectories do not depend on the rank count.
"""

from __future__ import annotations

import math
import queue
import struct
import sys
import threading
from dataclasses import dataclass
from math import prod

import numpy as np

from . import geometry

if sys.byteorder != "little":
    raise ImportError("frame layout assumes a little-endian host")


class CommError(RuntimeError):
    """Base class for messaging failures."""


class RankOutOfRange(CommError):
    pass


class TransportClosed(CommError):
    """Transport was aborted or closed; no further traffic possible."""


class SizeMismatch(CommError):
    """Frame payload length disagrees with the plan (protocol bug)."""


class CollectiveMismatch(CommError):
    """Ranks disagreed about the collective being performed."""


class CommTimeout(CommError):
    """Watchdog expired while waiting on a peer."""


# ---------------------------------------------------------------------------
# Topology

@dataclass(frozen=True)
class Topology:
    """One rank's view of the 4D torus of ranks.

    ``neighbors`` has 8 entries in (x,-), (x,+), ..., (t,+) order.  Grid
    extent 1 on an axis makes the rank its own neighbor there.
    """

    grid: tuple[int, int, int, int]
    rank: int
    coords: tuple[int, int, int, int]
    neighbors: tuple[int, ...]

    @property
    def n_ranks(self) -> int:
        return prod(self.grid)

    def neighbor_rank(self, axis: int, sign: int) -> int:
        return self.neighbors[2 * axis + (0 if sign < 0 else 1)]


def build_topology(grid, rank: int) -> Topology:
    """Neighbor table of ``rank`` on the torus ``grid`` (x-fastest numbering)."""
    grid = tuple(int(g) for g in grid)
    n = prod(grid)
    if not 0 <= rank < n:
        raise RankOutOfRange(f"rank {rank} outside [0, {n})")
    coords = geometry.coords_from_rank(grid, rank)
    nbrs = []
    for axis in range(geometry.NDIM):
        for sign in (-1, 1):
            c = list(coords)
            c[axis] = (c[axis] + sign) % grid[axis]
            nbrs.append(geometry.rank_from_coords(grid, tuple(c)))
    return Topology(grid, rank, coords, tuple(nbrs))


# ---------------------------------------------------------------------------
# Halo plans

@dataclass(frozen=True)
class PlanEntry:
    """One face of an exchange.

    ``pack`` rows of the axis buffer are sent toward ``sign``; the frame
    that arrives from the opposite neighbor, tagged with this same
    (axis, sign), fills rows [ghost_start, ghost_stop).
    """

    axis: int
    sign: int
    pack: np.ndarray
    ghost_start: int
    ghost_stop: int
    nbytes: int


@dataclass(frozen=True)
class HaloPlan:
    """Pack/fill schedule for one field kind on one local box."""

    kind: str                      # "fermion" or "gauge"
    local_dims: tuple[int, int, int, int]
    parity: int | None
    entries: tuple[PlanEntry, ...]

    @property
    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries)


def build_fermion_plan(local_dims, parity) -> HaloPlan:
    """Eight-face plan for a fermion field of the given parity.

    The face shipped toward +axis lands in the receiver's minus zone and
    vice versa, so entry (axis, sign) packs the ``sign``-side face and
    fills the ``-sign``-side zone.
    """
    from . import _layout

    local_dims = tuple(int(d) for d in local_dims)
    p = int(parity)
    offs = _layout.fermion_zone_offsets(local_dims)
    entries = []
    for (axis, sign), _ in zip(_layout.ZONES, offs):
        pack = _layout.fermion_pack_indices(local_dims, p, axis, sign)
        zone = _layout.ZONES.index((axis, -sign))
        size = _layout.fermion_zone_sites(local_dims, axis)
        entries.append(PlanEntry(
            axis, sign, pack, offs[zone], offs[zone] + size,
            len(pack) * _layout.FERMION_SITE_BYTES,
        ))
    return HaloPlan("fermion", local_dims, p, tuple(entries))


def build_gauge_plan(local_dims) -> HaloPlan:
    """Four-face plan for link halos: top-face links move toward +axis only."""
    from . import _layout

    local_dims = tuple(int(d) for d in local_dims)
    v = prod(local_dims)
    entries = []
    for axis in range(geometry.NDIM):
        pack = _layout.gauge_pack_indices(local_dims, axis)
        size = _layout.face_sites(local_dims, axis)
        entries.append(PlanEntry(
            axis, 1, pack, v, v + size, len(pack) * _layout.LINK_BYTES,
        ))
    return HaloPlan("gauge", local_dims, None, tuple(entries))


# ---------------------------------------------------------------------------
# Frames

HEADER = struct.Struct("<QBBQ")
_SIGN_BYTE = {-1: 0, 1: 1}
_BYTE_SIGN = {0: -1, 1: 1}


def pack_frame(phase: int, axis: int, sign: int, payload: bytes) -> bytes:
    return HEADER.pack(phase, axis, _SIGN_BYTE[sign], len(payload)) + payload


def parse_frame(frame: bytes):
    phase, axis, sign_byte, byte_len = HEADER.unpack_from(frame)
    payload = frame[HEADER.size:]
    if len(payload) != byte_len:
        raise SizeMismatch(
            f"header announces {byte_len} payload bytes, frame carries {len(payload)}"
        )
    return phase, axis, _BYTE_SIGN[sign_byte], payload


# ---------------------------------------------------------------------------
# Transports

class _RendezvousRound:
    __slots__ = ("kind", "payloads", "arrived", "readers", "fail")

    def __init__(self, kind: str, n: int):
        self.kind = kind
        self.payloads = [None] * n
        self.arrived = 0
        self.readers = 0
        self.fail = None  # (exception class, message)


class SerialTransport:
    """Single-rank reference transport: a loopback queue, no threads."""

    kind = "serial"

    def __init__(self):
        self.n_ranks = 1
        self.timeout_s = None
        self._inbox: list = []
        self._pending: dict = {}
        self._phase = 0
        self._closed = False
        self._reason = ""

    @property
    def closed(self) -> bool:
        return self._closed

    def abort(self, reason: str) -> None:
        self._closed = True
        self._reason = reason

    def _check(self, rank: int) -> None:
        if rank != 0:
            raise RankOutOfRange(f"serial transport has one rank, got {rank}")
        if self._closed:
            raise TransportClosed(self._reason)

    def send(self, src: int, dst: int, frame: bytes) -> None:
        self._check(src)
        self._check(dst)
        self._inbox.append((src, frame))

    def recv(self, rank: int, context: str = "recv"):
        self._check(rank)
        if not self._inbox:
            raise CommError(f"{context}: nothing queued on the serial transport")
        return self._inbox.pop(0)

    def pending(self, rank: int) -> dict:
        self._check(rank)
        return self._pending

    def next_phase(self, rank: int) -> int:
        self._check(rank)
        p = self._phase
        self._phase += 1
        return p

    def collective(self, rank: int, kind: str, payload, context: str = ""):
        self._check(rank)
        return [payload]


class ConcurrentTransport:
    """One worker thread per simulated rank, in-process message queues.

    ``timeout_s=None`` disables the watchdog; any positive value bounds
    every blocking wait and turns a deadlock into a CommTimeout naming the
    stalled phase.
    """

    kind = "concurrent"

    def __init__(self, n_ranks: int, timeout_s: float | None = None):
        if n_ranks < 1:
            raise CommError(f"need at least one rank, got {n_ranks}")
        self.n_ranks = n_ranks
        self.timeout_s = timeout_s
        self._inboxes = [queue.SimpleQueue() for _ in range(n_ranks)]
        self._pending = [dict() for _ in range(n_ranks)]
        self._phase = [0] * n_ranks
        self._round_no = [0] * n_ranks
        self._rounds: dict[int, _RendezvousRound] = {}
        self._cv = threading.Condition()
        self._closed = False
        self._reason = ""

    @property
    def closed(self) -> bool:
        return self._closed

    def abort(self, reason: str) -> None:
        with self._cv:
            if self._closed:
                return
            self._closed = True
            self._reason = reason
            self._cv.notify_all()
        for q in self._inboxes:
            q.put((None, b""))  # wake blocked receivers

    def _check_open(self) -> None:
        if self._closed:
            raise TransportClosed(self._reason)

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.n_ranks:
            raise RankOutOfRange(f"rank {rank} outside [0, {self.n_ranks})")

    def send(self, src: int, dst: int, frame: bytes) -> None:
        self._check_rank(src)
        self._check_rank(dst)
        self._check_open()
        self._inboxes[dst].put((src, frame))

    def recv(self, rank: int, context: str = "recv"):
        self._check_rank(rank)
        self._check_open()
        try:
            src, frame = self._inboxes[rank].get(timeout=self.timeout_s)
        except queue.Empty:
            msg = f"{context}: rank {rank} got no message within {self.timeout_s}s"
            self.abort(msg)
            raise CommTimeout(msg) from None
        if src is None:
            raise TransportClosed(self._reason)
        return src, frame

    def pending(self, rank: int) -> dict:
        self._check_rank(rank)
        return self._pending[rank]

    def next_phase(self, rank: int) -> int:
        self._check_rank(rank)
        p = self._phase[rank]
        self._phase[rank] = p + 1
        return p

    def collective(self, rank: int, kind: str, payload, context: str = ""):
        self._check_rank(rank)
        with self._cv:
            self._check_open()
            rid = self._round_no[rank]
            self._round_no[rank] = rid + 1
            rd = self._rounds.get(rid)
            if rd is None:
                rd = _RendezvousRound(kind, self.n_ranks)
                self._rounds[rid] = rd
            if rd.fail is None and kind != rd.kind:
                rd.fail = (CollectiveMismatch,
                           f"collective round {rid}: rank {rank} called {kind!r}"
                           f" while another rank called {rd.kind!r}")
                self._cv.notify_all()
            if rd.fail is None:
                rd.payloads[rank] = payload
                rd.arrived += 1
                if rd.arrived == self.n_ranks:
                    self._cv.notify_all()
            done = self._cv.wait_for(
                lambda: rd.fail is not None or rd.arrived == self.n_ranks
                or self._closed,
                timeout=self.timeout_s,
            )
            if not done:
                rd.fail = (CommTimeout,
                           f"{context or kind}: collective round {rid} stalled,"
                           f" {rd.arrived}/{self.n_ranks} ranks arrived within"
                           f" {self.timeout_s}s")
                self._cv.notify_all()
            if rd.fail is not None:
                exc, msg = rd.fail
                raise exc(msg)
            if self._closed:
                raise TransportClosed(self._reason)
            result = list(rd.payloads)
            rd.readers += 1
            if rd.readers == self.n_ranks:
                del self._rounds[rid]
            return result


# ---------------------------------------------------------------------------
# Halo exchange

def halo_exchange(field, topo: Topology, plan: HaloPlan, transport) -> None:
    """Fill every ghost slot of ``field`` from the owning rank, in place.

    Posts all sends, then consumes frames until each expected face has
    arrived.  Frames from a neighbor's later exchange are stashed under
    their (source, phase, axis, sign) key and served when this rank
    catches up; self-messages ride the same queue path.
    """
    if transport.closed:
        raise TransportClosed("halo exchange on a closed transport")
    if transport.n_ranks != topo.n_ranks:
        raise CommError(
            f"transport has {transport.n_ranks} ranks, topology {topo.n_ranks}"
        )
    if plan.local_dims != tuple(field.decomp.local_dims):
        raise CommError("plan was built for a different local box")
    if plan.kind != field.halo_kind:
        raise CommError(f"{plan.kind} plan applied to a {field.halo_kind} field")
    if plan.kind == "fermion" and plan.parity != int(field.parity):
        raise CommError("plan parity does not match the field")

    rank = topo.rank
    phase = transport.next_phase(rank)
    context = f"halo exchange phase {phase} ({plan.kind})"

    for e in plan.entries:
        buf = field._halo_array(e.axis)
        payload = buf[e.pack].tobytes()
        if len(payload) != e.nbytes:
            raise SizeMismatch(
                f"packed {len(payload)} bytes for (axis {e.axis}, sign {e.sign:+d}),"
                f" plan says {e.nbytes}"
            )
        dst = topo.neighbor_rank(e.axis, e.sign)
        transport.send(rank, dst, pack_frame(phase, e.axis, e.sign, payload))

    wanted = {
        (topo.neighbor_rank(e.axis, -e.sign), phase, e.axis, e.sign): e
        for e in plan.entries
    }
    stash = transport.pending(rank)
    for key in [k for k in wanted if k in stash]:
        _fill_zone(field, wanted.pop(key), stash.pop(key), context)
    while wanted:
        src, frame = transport.recv(rank, context=context)
        fphase, axis, sign, payload = parse_frame(frame)
        key = (src, fphase, axis, sign)
        if key in wanted:
            _fill_zone(field, wanted.pop(key), payload, context)
        elif fphase > phase:
            stash[key] = payload
        else:
            raise CommError(f"{context}: unexpected frame {key}")
    field._mark_halo_fresh()


def _fill_zone(field, entry: PlanEntry, payload: bytes, context: str) -> None:
    if len(payload) != entry.nbytes:
        raise SizeMismatch(
            f"{context}: got {len(payload)} bytes for"
            f" (axis {entry.axis}, sign {entry.sign:+d}), plan says {entry.nbytes}"
        )
    buf = field._halo_array(entry.axis)
    rows = entry.ghost_stop - entry.ghost_start
    data = np.frombuffer(payload, dtype=np.complex128).reshape(rows, -1)
    buf[entry.ghost_start:entry.ghost_stop] = data


# ---------------------------------------------------------------------------
# Collectives

def barrier(topo: Topology, transport) -> None:
    transport.collective(topo.rank, "barrier", None, context="barrier")


def allgather(value, topo: Topology, transport, context: str = "allgather") -> list:
    """Every rank's ``value``, in rank order, on every rank."""
    return transport.collective(topo.rank, "allgather", value, context=context)


def allreduce_det(local, topo: Topology, transport) -> list:
    """Deterministic elementwise sum of equal-length per-rank lists.

    Per component, partials are combined in ascending rank order with
    compensated summation, identically on every rank: the output bits
    depend only on the values, not on scheduling.
    """
    payload = tuple(local)
    parts = transport.collective(topo.rank, "allreduce", payload, context="allreduce")
    lengths = {len(p) for p in parts}
    if len(lengths) != 1:
        raise CollectiveMismatch(
            f"allreduce with unequal lengths per rank: {sorted(lengths)}"
        )
    out = []
    for j in range(len(payload)):
        column = [parts[r][j] for r in range(len(parts))]
        if any(isinstance(v, complex) for v in column):
            out.append(complex(math.fsum(v.real for v in column),
                               math.fsum(v.imag for v in column)))
        else:
            out.append(math.fsum(column))
    return out


def _quantized_partial(arr: np.ndarray, e: int, chunk: int) -> int:
    """Exact integer sum of round(arr / 2^e); guaranteed overflow-free."""
    if arr.size == 0:
        return 0
    q = np.round(np.ldexp(arr, -e)).astype(np.int64)
    tail = q.size % chunk
    head = q[:q.size - tail].reshape(-1, chunk).sum(axis=1, dtype=np.int64)
    total = int(head.astype(object).sum()) if head.size else 0
    if tail:
        total += int(q[q.size - tail:].sum(dtype=np.int64))
    return total


_LIMB_BITS = 45
_LIMB_MASK = (1 << _LIMB_BITS) - 1


def _limbs(p: int) -> tuple[float, float, float]:
    return (float(p & _LIMB_MASK),
            float((p >> _LIMB_BITS) & _LIMB_MASK),
            float(p >> (2 * _LIMB_BITS)))


def _combine(limbs) -> int:
    s0, s1, s2 = (int(v) for v in limbs)
    return (s2 << (2 * _LIMB_BITS)) + (s1 << _LIMB_BITS) + s0


def global_sum(values: np.ndarray, topo: Topology, transport):
    """Correctly rounded global sum, bitwise independent of decomposition.

    Every summand is quantized against the global maximum magnitude (a max
    is exactly associative, so the quantum is decomposition-invariant),
    the quantized integers are summed exactly, and the one rounding back
    to a float happens on the reassembled grand total.  Complex input
    reduces real and imaginary parts against a shared quantum.

    The quantization error is below ``n * max * 2**-52`` in the worst
    case, comfortably inside the 1e-12 relative contract for the field
    sizes this package targets (up to 2**20 summands per rank).
    """
    vals = np.asanyarray(values)
    is_complex = np.iscomplexobj(vals)
    re = np.ascontiguousarray(vals.real, dtype=np.float64).ravel()
    im = np.ascontiguousarray(vals.imag, dtype=np.float64).ravel() if is_complex else None

    local_max = float(np.max(np.abs(re))) if re.size else 0.0
    if is_complex and im.size:
        local_max = max(local_max, float(np.max(np.abs(im))))
    meta = allgather((re.size, local_max), topo, transport, context="global_sum meta")
    n_total = sum(m[0] for m in meta)
    gmax = max((m[1] for m in meta), default=0.0)

    if not math.isfinite(gmax):
        # Quantization is meaningless with inf/nan aboard; fall back to a
        # deterministic (but grouping-dependent) reduction of partials.
        parts = [math.fsum(re)] + ([math.fsum(im)] if is_complex else [])
        summed = allreduce_det(parts, topo, transport)
        return complex(summed[0], summed[1]) if is_complex else summed[0]
    if gmax == 0.0 or n_total == 0:
        return 0j if is_complex else 0.0

    bits = min(52, 73 - n_total.bit_length())
    e = math.frexp(gmax)[1] - bits
    chunk = 1 << (62 - bits)
    payload = list(_limbs(_quantized_partial(re, e, chunk)))
    if is_complex:
        payload += list(_limbs(_quantized_partial(im, e, chunk)))
    summed = allreduce_det(payload, topo, transport)
    total_re = math.ldexp(float(_combine(summed[:3])), e)
    if not is_complex:
        return total_re
    return complex(total_re, math.ldexp(float(_combine(summed[3:])), e))


def gather_field(field, topo: Topology, transport):
    """Reassemble the global field on rank 0; other ranks get None."""
    parts = transport.collective(
        topo.rank, "gather-field", field._gather_payload(), context="gather_field"
    )
    if topo.rank != 0:
        return None
    return field._assemble_global(parts)


# ---------------------------------------------------------------------------
# Run harness

def run_on_grid(grid, worker, *, timeout_s: float | None = None) -> list:
    """Run ``worker(rank, topo, transport)`` once per rank of ``grid``.

    A single-rank grid runs inline on the serial transport.  Larger grids
    spawn one thread per rank on a shared ConcurrentTransport; the first
    failing rank aborts the transport so its peers exit promptly, and that
    first error is re-raised here.  Returns per-rank results in rank order.
    """
    grid = tuple(int(g) for g in grid)
    n = prod(grid)
    if n == 1:
        return [worker(0, build_topology(grid, 0), SerialTransport())]

    transport = ConcurrentTransport(n, timeout_s=timeout_s)
    results = [None] * n
    errors: list = [None] * n

    def _run(rank: int) -> None:
        try:
            results[rank] = worker(rank, build_topology(grid, rank), transport)
        except BaseException as exc:  # noqa: BLE001 - propagated below
            errors[rank] = exc
            transport.abort(f"rank {rank} failed: {exc}")

    threads = [
        threading.Thread(target=_run, args=(r,), name=f"rank-{r}", daemon=True)
        for r in range(n)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    real = [e for e in errors if e is not None and not isinstance(e, TransportClosed)]
    if real:
        timeouts = [e for e in real if isinstance(e, CommTimeout)]
        raise (timeouts[0] if timeouts else real[0])
    secondary = [e for e in errors if e is not None]
    if secondary:
        raise secondary[0]
    return results
