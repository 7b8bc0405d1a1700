"""Change-of-measure ledger between the nonlinear and linear pictures.

Along a path driven by increments ``dW`` the forward ledger accumulates

    M  += -(1/sigma) * sum_j X_parent(j)(t_i) dW_j(i)
    QV +=  (1/sigma**2) * sum_j X_parent(j)(t_i)**2 dt

over the non-root nodes ``j`` of the truncated tree, with left-endpoint
evaluation, and ``density = exp(M - QV/2)`` is ``dP_hat/dP``. The inverse
ledger uses ``+1/sigma`` on the linear-model increments ``dB`` and gives
``dP/dP_hat``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .integrate import SdePath
from .tree import Tree

ESS_WARNING_FRACTION = 0.01


@dataclass
class GirsanovLedger:
    times: np.ndarray
    M: np.ndarray  # (..., n_times)
    QV: np.ndarray
    density: np.ndarray

    @property
    def log_density(self) -> np.ndarray:
        return self.M - 0.5 * self.QV

    def to_csv(self, fh) -> None:
        if self.M.ndim != 1:
            raise ValueError("CSV export is per path; index a single path first")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "M", "QV", "density"])
        for row in zip(self.times, self.M, self.QV, self.density):
            w.writerow([repr(float(v)) for v in row])

    def __getitem__(self, idx) -> "GirsanovLedger":
        return GirsanovLedger(self.times, self.M[idx], self.QV[idx], self.density[idx])


def _require_full(path: SdePath):
    if path.increments is None:
        raise ValueError("path carries no noise increments")
    if not path.is_full:
        raise ValueError("ledger needs states at every grid step (record_every=1)")


def _ledger(tree: Tree, states: np.ndarray, increments: np.ndarray, times: np.ndarray, dt: float, sign: float) -> GirsanovLedger:
    xp = states[..., :-1, :][..., tree.parent_index[1:]]  # parent intensity of nodes 1..n-1 at left points
    dW = increments[..., 1:]
    s = tree.sigma
    dM = sign / s * np.sum(xp * dW, axis=-1)
    dQ = np.sum(xp * xp, axis=-1) * (dt / s ** 2)
    zero = np.zeros(dM.shape[:-1] + (1,))
    M = np.concatenate([zero, np.cumsum(dM, axis=-1)], axis=-1)
    QV = np.concatenate([zero, np.cumsum(dQ, axis=-1)], axis=-1)
    return GirsanovLedger(times, M, QV, np.exp(M - 0.5 * QV))


def ledger_forward(tree: Tree, path: SdePath) -> GirsanovLedger:
    """``dP_hat/dP`` along a path of an Ito model driven by ``W``."""
    _require_full(path)
    return _ledger(tree, path.states, path.increments, path.times, path.grid.dt, -1.0)


def ledger_inverse(tree: Tree, path: SdePath) -> GirsanovLedger:
    """``dP/dP_hat`` along a linear-model path driven by ``B``."""
    _require_full(path)
    return _ledger(tree, path.states, path.increments, path.times, path.grid.dt, +1.0)


def shifted_increments(tree: Tree, path: SdePath) -> np.ndarray:
    """``dB_j = dW_j + X_parent(j) dt / sigma`` at left endpoints (root column untouched)."""
    _require_full(path)
    dB = np.array(path.increments, copy=True)
    xp = path.states[..., :-1, :][..., tree.parent_index[1:]]
    dB[..., 1:] += xp * (path.grid.dt / tree.sigma)
    return dB


@dataclass
class Estimate:
    value: float
    std_error: float
    n: int
    ess: float
    degenerate: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def reweighted_expectation(values, weights, ess_fraction: float = ESS_WARNING_FRACTION) -> Estimate:
    """Importance-sampling mean ``E[w * phi]`` with its normal-approximation SE.

    ``values`` is ``phi`` per path (leading axis = paths) and ``weights`` the
    terminal densities. The estimate is flagged degenerate (and a warning
    issued) when the effective sample size ``(sum w)^2 / sum w^2`` falls
    below ``ess_fraction * n``.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    if v.shape[0] != n:
        raise ValueError("values and weights disagree on the number of paths")
    prod = w.reshape((n,) + (1,) * (v.ndim - 1)) * v
    mean = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(mean, np.inf)
    ess = float(w.sum() ** 2 / np.sum(w * w)) if np.any(w) else 0.0
    degenerate = ess < ess_fraction * n
    if degenerate:
        warnings.warn(f"effective sample size {ess:.1f} below {ess_fraction:.0%} of {n} paths", RuntimeWarning)
    if np.ndim(mean) == 0:
        return Estimate(float(mean), float(se), n, ess, degenerate)
    return Estimate(mean, se, n, ess, degenerate)
