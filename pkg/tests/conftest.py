"""Shared oracles: dense matrix assembly for the hopping stencil.

The dense builders below are written as plain loops over sites and
directions, straight from the stencil formula, sharing nothing with the
package's table-driven kernel except the public site_index convention
and the gauge-link accessor.  GAMMA_REF is a frozen copy of the chiral
basis; a test asserts the package's table still matches it.
"""

import numpy as np
import pytest

from wilsoncg import algebra, geometry

I = 1j

GAMMA_REF = np.array([
    [[0, 0, 0, I], [0, 0, I, 0], [0, -I, 0, 0], [-I, 0, 0, 0]],
    [[0, 0, 0, -1], [0, 0, 1, 0], [0, 1, 0, 0], [-1, 0, 0, 0]],
    [[0, 0, I, 0], [0, 0, 0, -I], [-I, 0, 0, 0], [0, I, 0, 0]],
    [[0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, 1, 0, 0]],
], dtype=np.complex128)
GAMMA_REF.setflags(write=False)

ID4 = np.eye(4, dtype=np.complex128)


def single_rank(global_dims):
    return geometry.decompose(global_dims, (1, 1, 1, 1))


def dense_hopping(gauge, phases, in_parity):
    """Matrix of one hopping application, in_parity block to its opposite.

    Row/column blocks follow site_index order within each parity block;
    per site the 12 components are spin-major (kron(spin, color)).
    """
    dims = tuple(gauge.decomp.global_dims)
    vol = gauge.decomp.global_volume
    half = vol // 2
    out_parity = 1 - in_parity
    mat = np.zeros((12 * half, 12 * half), dtype=np.complex128)
    for flat in range(vol):
        coords = tuple(geometry.lex_coords(flat, dims))
        if geometry.parity(coords) != out_parity:
            continue
        row = geometry.site_index(coords, dims) - out_parity * half
        for mu in range(4):
            fwd = list(coords)
            fwd[mu] = (coords[mu] + 1) % dims[mu]
            ph_f = phases[mu] if coords[mu] == dims[mu] - 1 else 1.0
            col = geometry.site_index(tuple(fwd), dims) - in_parity * half
            u = gauge.link_at(coords, mu)
            mat[12 * row:12 * row + 12, 12 * col:12 * col + 12] += np.kron(
                ID4 - GAMMA_REF[mu], ph_f * u)
            bwd = list(coords)
            bwd[mu] = (coords[mu] - 1) % dims[mu]
            ph_b = phases[mu] if coords[mu] == 0 else 1.0
            col = geometry.site_index(tuple(bwd), dims) - in_parity * half
            ub = gauge.link_at(tuple(bwd), mu)
            mat[12 * row:12 * row + 12, 12 * col:12 * col + 12] += np.kron(
                ID4 + GAMMA_REF[mu], ph_b * ub.conj().T)
    return mat


def dense_preconditioned(gauge, kappa, phases):
    """Schur form 1 - kappa^2 D_eo D_oe on the even block."""
    d_oe = dense_hopping(gauge, phases, in_parity=0)
    d_eo = dense_hopping(gauge, phases, in_parity=1)
    n = d_oe.shape[1]
    return np.eye(n, dtype=np.complex128) - kappa ** 2 * (d_eo @ d_oe)


def dense_normal(gauge, kappa, phases):
    m = dense_preconditioned(gauge, kappa, phases)
    return m.conj().T @ m


def to_vec(field):
    return field.data.reshape(-1).copy()


def from_vec(vec, decomp, parity, rank=0):
    out = algebra.FermionField.zeros(decomp, parity, rank)
    out.data[:] = np.asarray(vec).reshape(out.data.shape)
    out._bump()
    return out


def max_rel_err(got, want):
    scale = np.max(np.abs(want))
    if scale == 0.0:
        return float(np.max(np.abs(got)))
    return float(np.max(np.abs(got - want)) / scale)


@pytest.fixture(scope="session")
def gauge44():
    """Seeded random gauge on the 4^4 single-rank lattice."""
    return algebra.random_gauge(single_rank((4, 4, 4, 4)), seed=5)
