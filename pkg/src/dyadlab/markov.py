"""q-matrix of the second-moment system and its Markov chain.

Two finite closures of the tree q-matrix are built:

``leaky``
    States are the non-root nodes. Diagonals carry the full Ito rate
    (ghost children and the edge to the root included), so rows leak mass
    at generation 1 and generation ``N``. ``y' = yQ`` from ``y_j(0) = x_j**2``
    is exactly the second-moment equation of the truncated linear SDE.
``conservative``
    States are all nodes, root included, with no ghost terms; every row
    sums to zero. This is the finite analogue of a stable, conservative,
    symmetric q-matrix.

The forward equation is always integrated in row-vector form ``y' = yQ``.
Since ``Q`` is symmetric the same code solves the backward equation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import dynamics
from .integrate import NoisePlan, TimeGrid, record_indices
from .tree import Tree


class QMode(str, Enum):
    LEAKY = "leaky"
    CONSERVATIVE = "conservative"

    @classmethod
    def parse(cls, value) -> "QMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


class ForwardSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class QMatrix:
    matrix: sp.csr_array
    mode: QMode
    nodes: np.ndarray  # node id of each state
    leak: np.ndarray  # -q_jj - sum_{l != j} q_jl, per state

    @property
    def dimension(self) -> int:
        return self.nodes.size

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def rates(self) -> np.ndarray:
        """Holding rates ``q_j = -q_jj``."""
        return -self.matrix.diagonal()

    def state_of(self, node: int) -> int:
        hit = np.flatnonzero(self.nodes == node)
        if not hit.size:
            raise KeyError(f"node {node} is not a state of this {self.mode.value} q-matrix")
        return int(hit[0])

    def to_csv(self, fh) -> None:
        """Coordinate triplets ``row,col,value`` in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for k in order:
            w.writerow([int(coo.row[k]), int(coo.col[k]), repr(float(coo.data[k]))])


def build_qmatrix(tree: Tree, mode="leaky") -> QMatrix:
    mode = QMode.parse(mode)
    s2 = tree.sigma ** 2
    n = tree.n_nodes
    child = np.arange(1, n)
    par = tree.parent[1:]
    w = s2 * tree.coeff[1:] ** 2

    if mode is QMode.CONSERVATIVE:
        nodes = np.arange(n)
        idx = np.arange(n)
        diag = -s2 * (tree.coeff ** 2 + tree.child_sq)
        diag[0] = -s2 * tree.child_sq[0]
        leak = np.zeros(n)
    else:
        nodes = np.arange(1, n)
        idx = np.full(n, -1)
        idx[1:] = np.arange(n - 1)
        diag = -s2 * dynamics.full_rate(tree)[1:]
        leak = s2 * dynamics.leak_rate(tree)[1:]
        keep = par > 0
        child, par, w = child[keep], par[keep], w[keep]

    rows = np.concatenate([idx[child], idx[par], np.arange(nodes.size)])
    cols = np.concatenate([idx[par], idx[child], np.arange(nodes.size)])
    vals = np.concatenate([w, w, diag])
    m = sp.csr_array((vals, (rows, cols)), shape=(nodes.size, nodes.size))
    m.sum_duplicates()
    m.sort_indices()
    leak.setflags(write=False)
    return QMatrix(m, mode, nodes, leak)


@dataclass
class QMatrixReport:
    stable: bool
    offdiag_nonnegative: bool
    conservative_defect: np.ndarray
    symmetric_defect: float

    @property
    def conservative(self) -> bool:
        return bool(np.all(self.conservative_defect == 0))

    def to_dict(self) -> dict:
        return {
            "stable": self.stable,
            "offdiag_nonnegative": self.offdiag_nonnegative,
            "conservative": self.conservative,
            "max_conservative_defect": float(np.max(np.abs(self.conservative_defect), initial=0.0)),
            "symmetric_defect": self.symmetric_defect,
        }


def validate_qmatrix(Q: QMatrix) -> QMatrixReport:
    """Check the q-matrix axioms directly on the stored entries."""
    m = Q.matrix.tocsr()
    diag = m.diagonal()
    off = m - sp.diags_array(diag)
    off = sp.csr_array(off)
    off.eliminate_zeros()
    offdiag_ok = bool(np.all(off.data >= 0)) if off.nnz else True
    stable = bool(np.all(np.isfinite(diag)) and np.all(diag <= 0))
    row_off = np.asarray(off.sum(axis=1)).ravel()
    defect = -diag - row_off
    asym = abs(m - m.T)
    sym = float(asym.max()) if asym.nnz else 0.0
    return QMatrixReport(stable, offdiag_ok, defect, sym)


@dataclass
class ForwardSolution:
    grid: TimeGrid
    times: np.ndarray
    y: np.ndarray  # (n_records, dimension)
    initial: np.ndarray
    nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "state", "value"])
        for t, row in zip(self.times, self.y):
            for s, v in enumerate(row):
                w.writerow([repr(float(t)), s, repr(float(v))])


_RK4_STABILITY = 2.5  # |h * lambda| below the RK4 real-axis limit 2.785


def _rk4_rows(m: sp.csr_array, y: np.ndarray, h: float) -> np.ndarray:
    f = lambda v: (m.T @ v.T).T  # noqa: E731  row-vector product v @ Q
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def forward_solve(Q: QMatrix, initial, grid: TimeGrid, record_every: int = 1, neg_tol: float = 1e-12) -> ForwardSolution:
    y = np.array(initial, dtype=float)
    if y.shape != (Q.dimension,):
        raise ValueError(f"initial has shape {y.shape}, q-matrix has {Q.dimension} states")
    if np.any(y < 0):
        raise ValueError("initial data must be entrywise nonnegative")
    qmax = float(np.max(Q.rates, initial=0.0))
    if qmax * grid.dt > _RK4_STABILITY:
        raise ForwardSolveError(
            f"dt={grid.dt:g} unstable for max rate {qmax:g}; need dt < {_RK4_STABILITY / qmax:g}"
        )
    rec = record_indices(grid.n_steps, record_every)
    out = np.empty((rec.size, Q.dimension))
    out[0] = y
    scale = max(float(y.sum()), 1e-300)
    r = 1
    for i in range(1, grid.n_steps + 1):
        y = _rk4_rows(Q.matrix, y, grid.dt)
        if y.min(initial=0.0) < -neg_tol * scale:
            raise ForwardSolveError(f"negative entry {y.min():.3g} at t={grid.t0 + i * grid.dt:g}")
        if r < rec.size and rec[r] == i:
            out[r] = y
            r += 1
    return ForwardSolution(grid, grid.times[rec], out, np.array(initial, dtype=float), Q.nodes)


def transition_matrix(Q: QMatrix, t: float, max_rate_step: float = 0.01) -> np.ndarray:
    """``f(t)`` from the matrix forward equation ``F' = FQ``, ``F(0) = I``.

    The step is chosen so that ``h * max_j q_j <= max_rate_step``.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    F = np.eye(Q.dimension)
    if t == 0:
        return F
    qmax = float(np.max(Q.rates, initial=0.0))
    n = max(1, math.ceil(t * qmax / max_rate_step))
    h = t / n
    for _ in range(n):
        F = _rk4_rows(Q.matrix, F, h)
    return F


@dataclass
class JumpPath:
    states: list[int]
    holding_times: list[float]  # last entry is censored at the horizon unless killed
    horizon: float
    terminal: str = "alive"  # "alive" or "killed"
    absorbed: bool = False  # final state has q_j = 0 and holds forever

    def state_at(self, t: float) -> int | None:
        """State occupied at time ``t``; ``None`` after a kill."""
        acc = 0.0
        for s, h in zip(self.states, self.holding_times):
            acc += h
            if t < acc:
                return s
        if self.terminal == "killed":
            return None
        return self.states[-1]


def _jump_tables(Q: QMatrix):
    m = Q.matrix.tocsr()
    rates = Q.rates
    tables = []
    for j in range(Q.dimension):
        lo, hi = m.indptr[j], m.indptr[j + 1]
        cols = m.indices[lo:hi]
        vals = m.data[lo:hi]
        keep = (cols != j) & (vals > 0)
        targets = cols[keep]
        w = vals[keep]
        if rates[j] > 0:
            # killing (leaky rows) is the last, target -1
            targets = np.append(targets, -1)
            w = np.append(w, max(rates[j] - w.sum(), 0.0))
            cum = np.cumsum(w) / rates[j]
        else:
            cum = np.empty(0)
        tables.append((targets, cum))
    return rates, tables


def _run_chain(rng: np.random.Generator, rates, tables, start: int, horizon: float) -> JumpPath:
    states, holds = [start], []
    t, s = 0.0, start
    while True:
        q = rates[s]
        if q <= 0:
            holds.append(horizon - t)
            return JumpPath(states, holds, horizon, "alive", absorbed=True)
        h = rng.exponential(1.0 / q)
        if t + h >= horizon:
            holds.append(horizon - t)
            return JumpPath(states, holds, horizon, "alive")
        holds.append(h)
        t += h
        targets, cum = tables[s]
        k = min(int(np.searchsorted(cum, rng.random(), side="right")), targets.size - 1)
        nxt = int(targets[k])
        if nxt < 0:
            return JumpPath(states, holds, horizon, "killed")
        states.append(nxt)
        s = nxt


def ctmc_simulate(Q: QMatrix, start: int, horizon: float, seed: int, path_index: int = 0) -> JumpPath:
    """Jump-and-hold realisation started in state index ``start``.

    Holds an ``Exp(q_j)`` time, then jumps to ``l`` with probability
    ``q_jl / q_j``; in leaky rows the remaining probability kills the path.
    """
    if not 0 <= start < Q.dimension:
        raise IndexError(f"state {start} outside 0..{Q.dimension - 1}")
    rates, tables = _jump_tables(Q)
    return _run_chain(NoisePlan(seed, path_index).generator(), rates, tables, start, horizon)


def ctmc_distribution(Q: QMatrix, start: int, times, n_chains: int, seed: int) -> np.ndarray:
    """Empirical occupation probabilities at ``times``, shape ``(len(times), dim)``.

    Chain ``i`` uses the stream ``(seed, i)``. Killed chains count toward no
    state, so rows sum to the surviving fraction.
    """
    times = np.asarray(times, dtype=float)
    horizon = float(times.max())
    rates, tables = _jump_tables(Q)
    counts = np.zeros((times.size, Q.dimension))
    for i in range(n_chains):
        path = _run_chain(NoisePlan(seed, i).generator(), rates, tables, start, horizon)
        ends = np.cumsum(path.holding_times)
        pos = np.searchsorted(ends, times, side="right")
        for ti, p in enumerate(pos):
            if p < len(path.states):
                counts[ti, path.states[p]] += 1
            elif path.terminal == "alive":
                counts[ti, path.states[-1]] += 1
    return counts / n_chains


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


@dataclass
class LaplacianReport:
    is_negative_semidefinite: bool
    min_eigenvalue: float  # smallest eigenvalue of -Q, dense solver
    min_eigenvalue_lower_bound: float  # Gershgorin bound for -Q
    min_eigenvalue_upper_bound: float  # Rayleigh quotient of the all-ones vector
    diagonally_dominant: bool
    symmetric: bool
    unit_eigenvalue: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def laplacian_check(Q: QMatrix, tol: float = 1e-10) -> LaplacianReport:
    """Certify ``-Q`` positive semidefinite.

    For symmetric ``Q`` the Gershgorin discs of ``-Q`` give
    ``lambda_min >= min_j (q_j - sum_{l != j} |q_jl|)``, which is ``>= 0``
    under diagonal dominance; the all-ones Rayleigh quotient bounds it from
    above (it is ``0`` for zero row sums). Dense eigenvalues are reported as
    a numerical cross-check. With ``-Q >= 0``, ``I - Q`` is positive definite
    and ``1`` is never an eigenvalue of ``Q``.
    """
    if Q.mode is not QMode.CONSERVATIVE:
        raise ValueError("laplacian_check expects a conservative q-matrix")
    A = Q.dense()
    diag = np.diag(A)
    off = np.abs(A - np.diag(diag)).sum(axis=1)
    lower = float(np.min(-diag - off))
    ones = np.ones(Q.dimension)
    upper = float(ones @ (-A) @ ones / Q.dimension)
    dominant = bool(np.all(diag <= 0) and lower >= 0)
    symmetric = bool(np.array_equal(A, A.T))
    eig = np.linalg.eigvalsh(-A)
    scale = max(1.0, float(np.max(np.abs(diag))))
    lam_min = float(eig.min())
    psd = symmetric and (dominant or lam_min >= -tol * scale)
    unit = bool(np.any(np.abs(eig + 1.0) <= tol * scale))
    return LaplacianReport(bool(psd), lam_min, lower, upper, dominant, symmetric, unit)
