"""Even/odd preconditioned Wilson CG on a rank-decomposed 4D lattice.

The pieces: ``geometry`` (torus decomposition and parity indexing),
``comm`` (in-process message transports, halo exchange, deterministic
reductions), ``algebra`` (fields, SU(3) kernels, BLAS-1 with fixed
rounding order), ``hopping`` (the nearest-neighbor stencil and its
even/odd Schur form), ``solver`` (conjugate gradient on the normal
equations), and ``bench`` (timed runs, scaling reports, latency model).

Everything numeric is bitwise reproducible across rank counts: the same
seed and global lattice give identical solver trajectories whether the
lattice lives on one rank or sixteen.
"""

from .algebra import (FermionField, GaugeField, axpy, dot, load_field, norm2,
                      random_fermion, random_gauge, random_su3, save_field,
                      scale, unit_gauge)
from .bench import ModelParams, PaperRow, RunRecord, SweepConfig
from .comm import (ConcurrentTransport, SerialTransport, Topology,
                   build_topology, gather_field, halo_exchange, run_on_grid)
from .geometry import (GlobalLattice, Parity, ProcessGrid, decompose,
                       parse_dims)
from .hopping import (DEFAULT_PHASES, GAMMA, FlopCounter, HoppingParams,
                      WilsonHopping, apply_hopping, apply_normal,
                      apply_preconditioned, flop_report)
from .solver import CGConfig, CGResult, cg_solve, true_residual

__version__ = "0.1.0"

__all__ = [
    "FermionField", "GaugeField", "axpy", "dot", "load_field", "norm2",
    "random_fermion", "random_gauge", "random_su3", "save_field", "scale",
    "unit_gauge",
    "ModelParams", "PaperRow", "RunRecord", "SweepConfig",
    "ConcurrentTransport", "SerialTransport", "Topology", "build_topology",
    "gather_field", "halo_exchange", "run_on_grid",
    "GlobalLattice", "Parity", "ProcessGrid", "decompose", "parse_dims",
    "DEFAULT_PHASES", "GAMMA", "FlopCounter", "HoppingParams",
    "WilsonHopping", "apply_hopping", "apply_normal", "apply_preconditioned",
    "flop_report",
    "CGConfig", "CGResult", "cg_solve", "true_residual",
    "__version__",
]
