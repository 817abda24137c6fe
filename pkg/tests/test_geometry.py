import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wilsoncg import geometry
from wilsoncg.geometry import (Decomposition, GeometryError, GlobalLattice,
                               NonDivisible, OddLocalExtent, OutOfRange,
                               Parity, ProcessGrid, decompose, format_dims,
                               index_to_site, lex_coords, neighbor, parity,
                               parse_dims, site_index, surface_count,
                               surface_to_volume)

# (tasks, local dims) of every bundled measurement row, with its global volume
PAPER_DECOMPOSITIONS = [
    (1024, (96, 12, 12, 12), 96 ** 3 * 192),
    (2048, (48, 12, 12, 12), 96 ** 3 * 192),
    (4096, (24, 24, 12, 6), 96 ** 3 * 192),
    (8192, (24, 12, 12, 6), 96 ** 3 * 192),
    (16384, (12, 6, 12, 12), 96 ** 3 * 192),
    (1024, (16, 16, 8, 12), 64 ** 3 * 96),
    (2048, (16, 16, 8, 6), 64 ** 3 * 96),
    (8192, (16, 8, 4, 6), 64 ** 3 * 96),
    (16384, (8, 8, 4, 6), 64 ** 3 * 96),
]


def even_dims(min_extent=2, max_extent=8):
    extent = st.integers(min_extent // 2, max_extent // 2).map(lambda h: 2 * h)
    return st.tuples(extent, extent, extent, extent)


class TestParseDims:
    def test_paper_lattice(self):
        assert parse_dims("96x96x96x192") == (96, 96, 96, 192)

    def test_round_trip(self):
        assert parse_dims(format_dims((8, 8, 8, 16))) == (8, 8, 8, 16)

    @pytest.mark.parametrize("bad", ["96X96X96X192", "8x8x8", "8x8x8x16x2",
                                     "axbxcxd", "0x8x8x8", "-2x8x8x8", ""])
    def test_rejects(self, bad):
        with pytest.raises(GeometryError):
            parse_dims(bad)


class TestDecompose:
    def test_table1_row1(self):
        d = decompose((96, 96, 96, 192), (1, 8, 8, 16))
        assert tuple(d.local_dims) == (96, 12, 12, 12)
        assert d.n_ranks == 1024

    def test_table2_row1(self):
        d = decompose((64, 64, 64, 96), (4, 4, 8, 8))
        assert tuple(d.local_dims) == (16, 16, 8, 12)
        assert d.n_ranks == 1024

    def test_identity(self):
        d = decompose((8, 8, 8, 16), (1, 1, 1, 1))
        assert tuple(d.local_dims) == (8, 8, 8, 16)
        assert d.local_volume == d.global_volume == 8 * 8 * 8 * 16

    def test_non_divisible(self):
        with pytest.raises(NonDivisible):
            decompose((96, 96, 96, 192), (5, 1, 1, 1))

    def test_local_extent_one_rejected(self):
        with pytest.raises(OddLocalExtent):
            decompose((4, 4, 4, 4), (4, 1, 1, 1))

    def test_odd_local_extent_rejected(self):
        with pytest.raises(OddLocalExtent):
            decompose((12, 4, 4, 4), (4, 1, 1, 1))

    def test_odd_global_extent_rejected(self):
        with pytest.raises(GeometryError):
            GlobalLattice((5, 4, 4, 4))

    def test_paper_volume_identity(self):
        for tasks, local, global_volume in PAPER_DECOMPOSITIONS:
            assert int(np.prod(local)) * tasks == global_volume

    def test_rank_coords_round_trip(self):
        d = decompose((8, 8, 8, 16), (2, 2, 2, 4))
        seen = set()
        for r in range(d.n_ranks):
            c = d.rank_coords(r)
            seen.add(c)
            assert geometry.rank_from_coords(d.grid_dims, c) == r
        assert len(seen) == d.n_ranks


class TestParity:
    @pytest.mark.parametrize("coords,expect", [
        ((0, 0, 0, 0), Parity.EVEN),
        ((1, 0, 0, 0), Parity.ODD),
        ((1, 1, 0, 0), Parity.EVEN),
    ])
    def test_examples(self, coords, expect):
        assert parity(coords) == expect

    def test_other(self):
        assert Parity.EVEN.other == Parity.ODD
        assert Parity.ODD.other == Parity.EVEN


class TestSiteIndex:
    def test_origin(self):
        assert site_index((0, 0, 0, 0), (4, 4, 4, 4)) == 0

    def test_first_odd_slot(self):
        assert site_index((1, 0, 0, 0), (4, 4, 4, 4)) == 128

    @pytest.mark.parametrize("dims", [(4, 4, 4, 4), (2, 4, 6, 8)])
    def test_bijection_exhaustive(self, dims):
        vol = int(np.prod(dims))
        seen = [None] * vol
        for flat in range(vol):
            c = tuple(lex_coords(flat, dims))
            i = site_index(c, dims)
            assert 0 <= i < vol and seen[i] is None
            seen[i] = c
            assert tuple(index_to_site(i, dims)) == c
        # even sites fill [0, V/2), odd sites the rest
        for i, c in enumerate(seen):
            assert (parity(c) == Parity.EVEN) == (i < vol // 2)

    @pytest.mark.parametrize("coords", [(4, 0, 0, 0), (-1, 0, 0, 0),
                                        (0, 0, 0, 9)])
    def test_out_of_range(self, coords):
        with pytest.raises(OutOfRange):
            site_index(coords, (4, 4, 4, 8))

    def test_index_out_of_range(self):
        with pytest.raises(OutOfRange):
            index_to_site(256, (4, 4, 4, 4))

    @given(even_dims(), st.data())
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, dims, data):
        coords = tuple(
            data.draw(st.integers(0, d - 1), label=f"axis{i}")
            for i, d in enumerate(dims))
        assert tuple(index_to_site(site_index(coords, dims), dims)) == coords


class TestNeighbor:
    def test_self_wrap(self):
        c, delta = neighbor((0, 0, 0, 0), 0, -1, (8, 8, 8, 16), (1, 1, 1, 1))
        assert tuple(c) == (7, 0, 0, 0) and delta == 0

    def test_boundary_crossing(self):
        c, delta = neighbor((7, 0, 0, 0), 0, +1, (8, 8, 8, 16), (2, 1, 1, 1))
        assert tuple(c) == (0, 0, 0, 0) and delta == +1

    def test_full_table_2x2x2x2(self):
        dims = (2, 2, 2, 2)
        grid = (2, 2, 1, 1)
        for flat in range(16):
            c = tuple(lex_coords(flat, dims))
            for mu in range(4):
                for sign in (-1, +1):
                    got, delta = neighbor(c, mu, sign, dims, grid)
                    raw = c[mu] + sign
                    want = list(c)
                    want[mu] = raw % dims[mu]
                    assert tuple(got) == tuple(want)
                    crossed = raw // dims[mu]
                    assert delta == (crossed if grid[mu] > 1 else 0)

    @given(even_dims(), st.integers(0, 3), st.sampled_from((-1, 1)),
           st.sampled_from(((1, 1, 1, 1), (2, 2, 2, 2), (1, 2, 1, 4))),
           st.data())
    @settings(max_examples=50, deadline=None)
    def test_involution(self, dims, mu, sign, grid, data):
        c = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
        mid, d1 = neighbor(c, mu, sign, dims, grid)
        back, d2 = neighbor(tuple(mid), mu, -sign, dims, grid)
        assert tuple(back) == c
        assert d1 + d2 == 0


class TestSurface:
    @pytest.mark.parametrize("dims,volume,surface,ratio", [
        ((8, 8, 4, 6), 1536, 2048, 4 / 3),
        ((96, 12, 12, 12), 165888, 86400, 86400 / 165888),
        ((2, 2, 2, 2), 16, 64, 4.0),
    ])
    def test_examples(self, dims, volume, surface, ratio):
        assert int(np.prod(dims)) == volume
        assert surface_count(dims) == surface
        assert surface_to_volume(dims) == pytest.approx(ratio, rel=1e-12)

    def test_table1_ratio_value(self):
        assert surface_to_volume((96, 12, 12, 12)) == pytest.approx(
            0.521, abs=5e-4)

    @given(even_dims())
    @settings(max_examples=50, deadline=None)
    def test_brute_force(self, dims):
        # per (axis, sign) face: sites sitting on that face
        count = 0
        for flat in range(int(np.prod(dims))):
            c = lex_coords(flat, dims)
            for mu in range(4):
                count += (c[mu] == 0) + (c[mu] == dims[mu] - 1)
        assert surface_count(dims) == count


class TestDecomposition:
    def test_origin_and_global_map(self):
        d = decompose((4, 4, 4, 8), (2, 1, 1, 2))
        assert d.rank_origin(0) == (0, 0, 0, 0)
        assert d.rank_origin(1) == (2, 0, 0, 0)
        assert d.rank_origin(2) == (0, 0, 0, 4)
        gmap = geometry.global_index_map(d, 3)
        # every local site maps to a distinct global slot
        assert len(set(gmap.tolist())) == d.local_volume

    def test_global_map_partitions(self):
        d = decompose((4, 4, 4, 8), (2, 2, 1, 2))
        slots = []
        for r in range(d.n_ranks):
            slots.extend(geometry.global_index_map(d, r).tolist())
        assert sorted(slots) == list(range(d.global_volume))

    def test_frozen(self):
        d = decompose((4, 4, 4, 8), (1, 1, 1, 1))
        with pytest.raises(AttributeError):
            d.n_ranks = 2


class TestInvariantTypes:
    def test_process_grid_volume(self):
        assert ProcessGrid((2, 2, 2, 4)).n_ranks == 32

    def test_global_lattice_volume(self):
        assert GlobalLattice((96, 96, 96, 192)).volume == 96 ** 3 * 192

    def test_decomposition_half_volume(self):
        d = decompose((8, 8, 8, 16), (2, 2, 2, 2))
        assert d.half_volume * 2 == d.local_volume
        assert isinstance(d, Decomposition)
