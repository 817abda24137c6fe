"""Benchmark harness: timed solves, scaling reports, and the latency model.

Produces one record per (grid, width) solve with the package's fixed flop
convention, renders reports shaped like the bundled measurement tables,
checks those tables for internal consistency, and fits/evaluates an
analytic strong-scaling model

    T(p) = W/(p·r) + iters·8·p·alpha + iters·(s_p/2)·bytes_per_site·beta

with p ranks, W total solver flops, s_p the per-rank surface site count.
The latency term counts all 8·p messages of an exchange round rather than
the 8 on one rank's critical path; with per-rank latency alone T would be
monotone decreasing in p and could never show the measured slowdown at
the largest rank counts, so the aggregate form is the one fitted.

Work convention for the model: W = iters·flops per CG iteration at the
stated counting rules (steady-state iteration, direction update included).
The fitted rate r absorbs any constant offset between this convention and
whatever produced a measurement, so fits and predictions stay comparable
as long as both use the same iteration count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.optimize

from . import algebra, comm, geometry, hopping, solver
from .geometry import Parity, format_dims
from .hopping import (AXPY_FLOPS_PER_COMPLEX, DOT_FLOPS_PER_COMPLEX,
                      FLOPS_PER_SITE, NORM2_FLOPS_PER_COMPLEX, HoppingParams,
                      WilsonHopping)

DEFAULT_BYTES_PER_SITE = 192

RUN_CSV_HEADER = ("ranks,width,lx,ly,lz,lt,iterations,total_time_s,"
                  "flops_total,mflops_per_rank,gflops_overall")
PAPER_CSV_HEADER = ("table,cores,threads_per_task,lx,ly,lz,lt,total_time_s,"
                    "mflops_per_core,gflops_overall")

RATE_IDENTITY_RTOL = 5e-4      # overall == cores·per-core/1000, per row
WORK_CONSTANT_RTOL = 1e-3      # W == time·overall constant per table

FLOP_CONVENTION = ("flop convention: 1320/site per hopping application; "
                   "per complex element: axpy 8, dot 8, norm2 4")


class BenchError(RuntimeError):
    pass


class Timeout(BenchError):
    """The transport watchdog fired during a benchmarked solve."""


class SolveFailed(BenchError):
    """The solve (or its communication) failed for a non-timeout reason."""


class ParseError(BenchError):
    pass


class ConsistencyViolation(BenchError):
    def __init__(self, message: str, failures: list[str]):
        super().__init__(message)
        self.failures = failures


class Underdetermined(BenchError):
    pass


class NoPositiveFit(BenchError):
    pass


class InvalidParams(BenchError):
    pass


# --- flop formulas (global volume V, all ranks summed) ----------------------

def _complex_elements(volume: int) -> int:
    # one parity block of 12 complex components per site
    return 12 * (volume // 2)


def cg_setup_flops(volume: int) -> int:
    """rhs = M^dag b (two hops + axpy) plus the two norm checks."""
    e = _complex_elements(volume)
    return (2 * FLOPS_PER_SITE * (volume // 2)
            + AXPY_FLOPS_PER_COMPLEX * e
            + 2 * NORM2_FLOPS_PER_COMPLEX * e)


def cg_iteration_flops(volume: int) -> int:
    """One steady-state CG iteration including the direction update.

    Normal-operator apply (4 hops, 2 axpy), the p/x/r updates (3 axpy),
    one dot and one norm2: 2952 flop per lattice site.
    """
    e = _complex_elements(volume)
    return (4 * FLOPS_PER_SITE * (volume // 2)
            + 5 * AXPY_FLOPS_PER_COMPLEX * e
            + DOT_FLOPS_PER_COMPLEX * e
            + NORM2_FLOPS_PER_COMPLEX * e)


def cg_refresh_flops(volume: int) -> int:
    """One true-residual recomputation: normal apply, axpy, norm2."""
    e = _complex_elements(volume)
    return (4 * FLOPS_PER_SITE * (volume // 2)
            + 3 * AXPY_FLOPS_PER_COMPLEX * e
            + NORM2_FLOPS_PER_COMPLEX * e)


def cg_solve_flops(volume: int, iterations: int, refreshes: int,
                   converged: bool) -> int:
    """Exact flop count of a solve with the given shape.

    ``refreshes`` is the number of true-residual recomputations (at least
    one: the final history entry).  The direction update is skipped on a
    converged final iteration.  Assumes no false-convergence refreshes,
    i.e. every recursive-residual convergence signal was confirmed.
    """
    e = _complex_elements(volume)
    betas = iterations - 1 if converged else iterations
    return (cg_setup_flops(volume)
            + iterations * (cg_iteration_flops(volume)
                            - AXPY_FLOPS_PER_COMPLEX * e)
            + refreshes * cg_refresh_flops(volume)
            + betas * AXPY_FLOPS_PER_COMPLEX * e)


# --- domain types ------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    """One timed solve; the CSV row schema in field order."""

    ranks: int
    width_per_rank: int
    lx: int
    ly: int
    lz: int
    lt: int
    iterations: int
    total_time_s: float
    flops_total: int
    mflops_per_rank: float
    gflops_overall: float

    def __post_init__(self):
        expect = self.ranks * self.mflops_per_rank / 1000.0
        if self.gflops_overall != expect:
            raise ValueError(
                f"gflops_overall {self.gflops_overall} != "
                f"ranks·mflops_per_rank/1000 = {expect}")

    @property
    def local_dims(self) -> tuple[int, int, int, int]:
        return (self.lx, self.ly, self.lz, self.lt)

    @property
    def n_tasks(self) -> int:
        return self.ranks


@dataclass(frozen=True)
class PaperRow:
    """One row of a bundled measurement table (core counts, not ranks)."""

    table: int
    cores: int
    threads_per_task: int
    lx: int
    ly: int
    lz: int
    lt: int
    total_time_s: float
    mflops_per_core: float
    gflops_overall: float

    @property
    def local_dims(self) -> tuple[int, int, int, int]:
        return (self.lx, self.ly, self.lz, self.lt)

    @property
    def n_tasks(self) -> int:
        if self.cores % self.threads_per_task:
            raise ValueError(f"cores {self.cores} not divisible by "
                             f"threads_per_task {self.threads_per_task}")
        return self.cores // self.threads_per_task

    @property
    def work_gflop(self) -> float:
        return self.total_time_s * self.gflops_overall


@dataclass(frozen=True)
class ModelParams:
    """Per-task rate r (flop/s), message latency alpha (s), inverse
    bandwidth beta (s/byte).  A fit may pin alpha or beta at zero; a zero
    or negative rate is never meaningful."""

    r: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.r > 0 and math.isfinite(self.r)):
            raise ValueError(f"rate r must be positive, got {self.r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative, got "
                             f"alpha={self.alpha} beta={self.beta}")


@dataclass
class SweepConfig:
    global_dims: tuple[int, int, int, int]
    grids: list[tuple[int, int, int, int]]
    kappa: float = 0.15
    tol: float = 1e-8
    max_iter: int = 10_000
    seed: int = 7
    transport: str = "serial"
    width_per_rank: int = 1
    timeout_s: float | None = None
    out: str | None = None
    fmt: str = "csv"


@dataclass
class SweepResult:
    records: list[RunRecord]
    errors: dict[tuple[int, int, int, int], Exception] = \
        field(default_factory=dict)

    def table_text(self) -> str:
        return render_table(self.records, self.errors)


@dataclass
class ValidationReport:
    table: int
    n_rows: int
    work_gflop: list[float]
    work_mean_gflop: float
    rate_rel_errors: list[float]
    work_rel_errors: list[float]

    def summary(self) -> str:
        return (f"table {self.table}: {self.n_rows} rows ok; "
                f"W = {self.work_mean_gflop:.4e} Gflop "
                f"(rate identity <= {max(self.rate_rel_errors):.2e} rel, "
                f"work spread <= {max(self.work_rel_errors):.2e} rel)")


@dataclass
class ModelPrediction:
    time_s: float
    efficiency: float
    compute_s: float
    latency_s: float
    bandwidth_s: float
    tasks: int
    surface_sites: int

    @property
    def comm_share(self) -> float:
        return (self.latency_s + self.bandwidth_s) / self.time_s


@dataclass
class FitResult:
    params: ModelParams
    predicted_s: list[float]
    residuals: list[float]      # (predicted - measured)/measured per row


# --- benchmark runs ----------------------------------------------------------

def _record_from_solve(decomp, width: int, res: solver.CGResult) -> RunRecord:
    ranks = decomp.n_ranks
    mflops = res.flops / (ranks * res.elapsed_s * 1e6)
    return RunRecord(
        ranks=ranks, width_per_rank=width,
        lx=decomp.local_dims[0], ly=decomp.local_dims[1],
        lz=decomp.local_dims[2], lt=decomp.local_dims[3],
        iterations=res.iterations, total_time_s=res.elapsed_s,
        flops_total=res.flops, mflops_per_rank=mflops,
        gflops_overall=ranks * mflops / 1000.0,
    )


def run_benchmark(global_dims, grid, *, kappa: float = 0.15,
                  tol: float = 1e-8, max_iter: int = 10_000, seed: int = 7,
                  transport: str = "serial", width: int = 1,
                  timeout_s: float | None = None) -> RunRecord:
    """Time one seeded solve on one grid and emit its record.

    Only cg_solve is timed; gauge/rhs generation and operator setup
    (including the gauge halo exchange) happen before the clock.  The
    serial transport handles single-rank grids only; anything larger
    needs transport="concurrent".
    """
    decomp = geometry.decompose(global_dims, grid)
    if transport not in ("serial", "concurrent"):
        raise SolveFailed(f"unknown transport {transport!r}")
    if transport == "serial" and decomp.n_ranks != 1:
        raise SolveFailed(
            f"serial transport runs one rank, grid {format_dims(grid)} has "
            f"{decomp.n_ranks}; use transport='concurrent'")
    params = HoppingParams(kappa=kappa)
    config = solver.CGConfig(tol=tol, max_iter=max_iter)

    def worker(rank, topo, tsp):
        gauge = algebra.random_gauge(decomp, seed, rank)
        b = algebra.random_fermion(decomp, Parity.EVEN, seed, rank)
        op = WilsonHopping(gauge, params, topo=topo, transport=tsp,
                           width=width)
        comm.barrier(topo, tsp)
        res = solver.cg_solve(gauge, b, params, config, operator=op)
        if not res.converged:
            raise solver.SolverError(
                f"no convergence in {res.iterations} iterations "
                f"(residual {res.residual_history[-1]:.3e})")
        return res

    try:
        results = comm.run_on_grid(grid, worker, timeout_s=timeout_s)
    except comm.CommTimeout as exc:
        raise Timeout(f"grid {format_dims(grid)}: {exc}") from exc
    except (comm.CommError, solver.SolverError, algebra.AlgebraError,
            hopping.HoppingError) as exc:
        raise SolveFailed(f"grid {format_dims(grid)}: {exc}") from exc
    res = results[0]
    record = _record_from_solve(decomp, width, res)
    assert record.local_dims == tuple(decomp.local_dims)
    return record


def scaling_sweep(cfg: SweepConfig) -> SweepResult:
    """run_benchmark per grid; failures become report rows, not aborts."""
    if not cfg.grids:
        raise BenchError("sweep needs at least one grid")
    out = SweepResult(records=[])
    for grid in cfg.grids:
        try:
            out.records.append(run_benchmark(
                cfg.global_dims, grid, kappa=cfg.kappa, tol=cfg.tol,
                max_iter=cfg.max_iter, seed=cfg.seed,
                transport=cfg.transport, width=cfg.width_per_rank,
                timeout_s=cfg.timeout_s))
        except (BenchError, geometry.GeometryError) as exc:
            out.errors[tuple(grid)] = exc
    if cfg.out:
        Path(cfg.out).write_text(render(out.records, cfg.fmt))
    return out


# --- report rendering --------------------------------------------------------

def derived_columns(rows) -> list[tuple[float, float]]:
    """(speedup, efficiency) per row relative to the smallest rank count.

    Works on anything with total_time_s and ranks/cores; efficiency is
    speedup scaled by the resource ratio, as a fraction.
    """
    def units(row):
        return getattr(row, "cores", None) or row.ranks

    if not rows:
        return []
    base = min(rows, key=units)
    p0, t0 = units(base), base.total_time_s
    out = []
    for row in rows:
        speedup = t0 / row.total_time_s
        out.append((speedup, speedup * p0 / units(row)))
    return out


def records_to_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_CSV_HEADER.split(","))
    for r in records:
        w.writerow([r.ranks, r.width_per_rank, r.lx, r.ly, r.lz, r.lt,
                    r.iterations, repr(r.total_time_s), r.flops_total,
                    repr(r.mflops_per_rank), repr(r.gflops_overall)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != RUN_CSV_HEADER.split(","):
        raise ParseError(f"expected header {RUN_CSV_HEADER!r}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            records.append(RunRecord(
                ranks=int(row[0]), width_per_rank=int(row[1]),
                lx=int(row[2]), ly=int(row[3]), lz=int(row[4]),
                lt=int(row[5]), iterations=int(row[6]),
                total_time_s=float(row[7]), flops_total=int(row[8]),
                mflops_per_rank=float(row[9]),
                gflops_overall=float(row[10])))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return records


def render_table(records: list[RunRecord], errors=None) -> str:
    """Aligned text table in the measurement-table column order."""
    head = ["ranks", "width", "local lattice", "iters", "total time [s]",
            "Mflop/s per rank", "Gflop/s overall", "speedup", "eff [%]"]
    body = []
    for rec, (spd, eff) in zip(records, derived_columns(records)):
        body.append([str(rec.ranks), str(rec.width_per_rank),
                     format_dims(rec.local_dims), str(rec.iterations),
                     f"{rec.total_time_s:.4f}", f"{rec.mflops_per_rank:.2f}",
                     f"{rec.gflops_overall:.2f}", f"{spd:.3f}",
                     f"{100 * eff:.1f}"])
    for grid, msg in (errors or {}).items():
        body.append([format_dims(grid), "-", "-", "-", "-", "-", "-", "-",
                     f"FAILED: {msg}"])
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(head)]
    lines = [FLOP_CONVENTION,
             "  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths))
              for row in body]
    return "\n".join(lines) + "\n"


def render_markdown(records: list[RunRecord]) -> str:
    head = ["ranks", "width", "local", "iters", "time_s", "Mflop/s/rank",
            "Gflop/s", "speedup", "eff %"]
    lines = ["| " + " | ".join(head) + " |",
             "|" + "|".join("---" for _ in head) + "|"]
    for rec, (spd, eff) in zip(records, derived_columns(records)):
        lines.append("| " + " | ".join([
            str(rec.ranks), str(rec.width_per_rank),
            format_dims(rec.local_dims), str(rec.iterations),
            f"{rec.total_time_s:.4f}", f"{rec.mflops_per_rank:.2f}",
            f"{rec.gflops_overall:.2f}", f"{spd:.3f}", f"{100 * eff:.1f}",
        ]) + " |")
    return "\n".join(lines) + "\n"


def render_json(records: list[RunRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=2) + "\n"


def render(records: list[RunRecord], fmt: str) -> str:
    try:
        return {"csv": records_to_csv, "md": render_markdown,
                "json": render_json}[fmt](records)
    except KeyError:
        raise BenchError(f"unknown format {fmt!r}") from None


# --- bundled tables ----------------------------------------------------------

def load_paper_table(path) -> list[PaperRow]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_paper_table(text)


def parse_paper_table(text: str) -> list[PaperRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != PAPER_CSV_HEADER.split(","):
        raise ParseError(f"expected header {PAPER_CSV_HEADER!r}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.append(PaperRow(
                table=int(row[0]), cores=int(row[1]),
                threads_per_task=int(row[2]), lx=int(row[3]),
                ly=int(row[4]), lz=int(row[5]), lt=int(row[6]),
                total_time_s=float(row[7]), mflops_per_core=float(row[8]),
                gflops_overall=float(row[9])))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    if not out:
        raise ParseError("table has no data rows")
    return out


def load_bundled_table(table: int) -> list[PaperRow]:
    if table not in (1, 2):
        raise ParseError(f"bundled tables are 1 and 2, got {table}")
    text = (resources.files("wilsoncg") / "data" /
            f"table{table}.csv").read_text()
    return parse_paper_table(text)


def validate_paper(path_or_rows) -> ValidationReport:
    """Internal-consistency check of one measurement table.

    Per row, overall Gflop/s must equal cores·(per-core Mflop/s)/1000
    within 0.05% relative; across the table, W = time·overall must be
    constant within 0.1% of its mean.  Raises ConsistencyViolation with
    the failing rows; returns the report (including W) when clean.
    """
    rows = (load_paper_table(path_or_rows)
            if isinstance(path_or_rows, (str, Path)) else list(path_or_rows))
    failures = []
    rate_errs, works = [], []
    for i, row in enumerate(rows, start=1):
        expect = row.cores * row.mflops_per_core / 1000.0
        err = abs(expect - row.gflops_overall) / abs(row.gflops_overall)
        rate_errs.append(err)
        if err > RATE_IDENTITY_RTOL:
            failures.append(
                f"row {i} (cores={row.cores}): cores·per-core/1000 = "
                f"{expect:.2f} vs overall {row.gflops_overall:.2f} "
                f"({err:.2e} rel)")
        works.append(row.work_gflop)
    w_mean = sum(works) / len(works)
    work_errs = [abs(w - w_mean) / w_mean for w in works]
    for i, (row, err) in enumerate(zip(rows, work_errs), start=1):
        if err > WORK_CONSTANT_RTOL:
            failures.append(
                f"row {i} (cores={row.cores}): W = {works[i - 1]:.4e} Gflop "
                f"vs table mean {w_mean:.4e} ({err:.2e} rel)")
    if failures:
        raise ConsistencyViolation(
            f"{len(failures)} consistency check(s) failed:\n  "
            + "\n  ".join(failures), failures)
    return ValidationReport(
        table=rows[0].table, n_rows=len(rows), work_gflop=works,
        work_mean_gflop=w_mean, rate_rel_errors=rate_errs,
        work_rel_errors=work_errs)


# --- analytic scaling model --------------------------------------------------

def _model_terms(local_dims, tasks: int, iterations: int,
                 bytes_per_site: int) -> tuple[float, float, float]:
    """Coefficients multiplying (1/r, alpha, beta) in the model time."""
    # per-iteration flops are linear in volume, so W/p is the local share
    work_per_task = iterations * cg_iteration_flops(math.prod(local_dims))
    surface = geometry.surface_count(local_dims)
    return (float(work_per_task),
            float(8 * iterations * tasks),
            float(iterations * (surface // 2) * bytes_per_site))


def predict(model: ModelParams, global_dims, grid, iterations: int,
            bytes_per_site: int = DEFAULT_BYTES_PER_SITE) -> ModelPrediction:
    """Model time and parallel efficiency for one decomposition.

    Efficiency is relative to a serial run modeled as pure compute,
    which makes it exactly the compute share of the predicted time.
    """
    if iterations < 1:
        raise InvalidParams(f"iterations must be >= 1, got {iterations}")
    if bytes_per_site <= 0:
        raise InvalidParams(f"bytes_per_site must be > 0, got {bytes_per_site}")
    decomp = geometry.decompose(global_dims, grid)
    a, b, c = _model_terms(decomp.local_dims, decomp.n_ranks, iterations,
                           bytes_per_site)
    compute = a / model.r
    latency = b * model.alpha
    bandwidth = c * model.beta
    total = compute + latency + bandwidth
    return ModelPrediction(
        time_s=total, efficiency=compute / total, compute_s=compute,
        latency_s=latency, bandwidth_s=bandwidth, tasks=decomp.n_ranks,
        surface_sites=geometry.surface_count(decomp.local_dims))


def _row_geometry(row) -> tuple[tuple[int, int, int, int], int, float]:
    return tuple(row.local_dims), row.n_tasks, row.total_time_s


def fit_model(rows, iterations: int,
              bytes_per_site: int = DEFAULT_BYTES_PER_SITE) -> FitResult:
    """Weighted nonnegative least squares for (r, alpha, beta).

    Minimizes sum((T_pred - T_meas)^2 / T_meas^2) over nonnegative
    (1/r, alpha, beta); accepts measurement-table rows or run records.
    alpha or beta may land on the zero bound; a zero 1/r (infinite rate)
    cannot, and raises NoPositiveFit.
    """
    rows = list(rows)
    if len(rows) < 3:
        raise Underdetermined(f"need >= 3 rows to fit 3 parameters, "
                              f"got {len(rows)}")
    if iterations < 1:
        raise InvalidParams(f"iterations must be >= 1, got {iterations}")
    design = np.empty((len(rows), 3))
    times = np.empty(len(rows))
    for i, row in enumerate(rows):
        local_dims, tasks, t_meas = _row_geometry(row)
        if t_meas <= 0:
            raise InvalidParams(f"row {i + 1}: nonpositive time {t_meas}")
        design[i] = _model_terms(local_dims, tasks, iterations,
                                 bytes_per_site)
        times[i] = t_meas
    weighted = design / times[:, None]
    target = np.ones(len(rows))
    col_scale = np.linalg.norm(weighted, axis=0)
    if not np.all(col_scale > 0):
        raise NoPositiveFit("degenerate design matrix (zero column)")
    sol, _ = scipy.optimize.nnls(weighted / col_scale, target)
    sol = sol / col_scale
    # a term contributing < 1 ulp of every measured time is numerical dust
    # left over from the active-set iteration; pin it at the zero bound
    for j in (1, 2):
        if sol[j] > 0 and np.max(design[:, j] * sol[j] / times) < 1e-12:
            sol[j] = 0.0
    if sol[0] <= 0:
        raise NoPositiveFit(
            "fit drove 1/r to zero: the rows do not determine a finite "
            "compute rate")
    params = ModelParams(r=1.0 / sol[0], alpha=sol[1], beta=sol[2])
    predicted = design @ sol
    residuals = ((predicted - times) / times).tolist()
    return FitResult(params=params, predicted_s=predicted.tolist(),
                     residuals=residuals)


def synthetic_rows(params: ModelParams, global_dims, grids, iterations: int,
                   bytes_per_site: int = DEFAULT_BYTES_PER_SITE,
                   table: int = 0) -> list[PaperRow]:
    """Noiseless measurement rows generated from the model, for fitting."""
    out = []
    for grid in grids:
        decomp = geometry.decompose(global_dims, grid)
        pred = predict(params, global_dims, grid, iterations, bytes_per_site)
        work_gflop = (iterations
                      * cg_iteration_flops(decomp.global_volume) / 1e9)
        overall = work_gflop / pred.time_s
        out.append(PaperRow(
            table=table, cores=decomp.n_ranks, threads_per_task=1,
            lx=decomp.local_dims[0], ly=decomp.local_dims[1],
            lz=decomp.local_dims[2], lt=decomp.local_dims[3],
            total_time_s=pred.time_s,
            mflops_per_core=1000.0 * overall / decomp.n_ranks,
            gflops_overall=overall))
    return out
