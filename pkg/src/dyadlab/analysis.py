"""Monte Carlo moment tables, z-score comparisons and pathwise energy audits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import dynamics
from .integrate import Ensemble, SdePath
from .markov import ForwardSolution
from .tree import Tree

ZERO_VARIANCE_ATOL = 1e-8


class MomentAccumulator:
    """Streaming per-(time, node) mean and variance of ``X`` and ``X**2``.

    Batches are merged with the pairwise update of Chan et al.; feeding the
    same batches in the same order gives bit-identical results.
    """

    def __init__(self):
        self.n = 0
        self._mean = None
        self._m2 = None

    def update(self, states: np.ndarray) -> "MomentAccumulator":
        states = np.asarray(states, dtype=float)
        batch = np.stack([states, states * states], axis=0)  # (2, P, T, n)
        nb = batch.shape[1]
        if nb == 0:
            return self
        mb = batch.mean(axis=1)
        m2b = ((batch - mb[:, None]) ** 2).sum(axis=1)
        # constant cells get exact zero variance (the mean can round off)
        const = batch.max(axis=1) == batch.min(axis=1)
        mb = np.where(const, batch[:, 0], mb)
        m2b = np.where(const, 0.0, m2b)
        if self.n == 0:
            self.n, self._mean, self._m2 = nb, mb, m2b
            return self
        n = self.n + nb
        delta = mb - self._mean
        self._mean = self._mean + delta * (nb / n)
        self._m2 = self._m2 + m2b + delta * delta * (self.n * nb / n)
        self.n = n
        return self

    def table(self, times: np.ndarray) -> "MomentTable":
        if self.n < 1:
            raise ValueError("empty ensemble")
        var = self._m2 / (self.n - 1) if self.n > 1 else np.full_like(self._m2, np.nan)
        return MomentTable(np.asarray(times), self._mean[0], self._mean[1], var[0], var[1], self.n)


@dataclass
class MomentTable:
    times: np.ndarray
    mean: np.ndarray  # (n_times, n_nodes)
    mean_sq: np.ndarray
    var: np.ndarray
    var_sq: np.ndarray
    n_paths: int

    @property
    def se_sq(self) -> np.ndarray:
        return np.sqrt(self.var_sq / self.n_paths)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var / self.n_paths)

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "node_index", "mean", "variance", "mean_sq", "variance_sq", "n"])
        for i, t in enumerate(self.times):
            for j in range(self.mean.shape[1]):
                w.writerow([
                    repr(float(t)), j, repr(float(self.mean[i, j])), repr(float(self.var[i, j])),
                    repr(float(self.mean_sq[i, j])), repr(float(self.var_sq[i, j])), self.n_paths,
                ])


def estimate_moments(ensemble, times=None) -> MomentTable:
    """Moments of an :class:`Ensemble` or of a raw ``(n_paths, n_times, n_nodes)`` array."""
    if isinstance(ensemble, Ensemble):
        states, times = ensemble.states, ensemble.times
    else:
        states = np.asarray(ensemble, dtype=float)
        if times is None:
            times = np.arange(states.shape[1], dtype=float)
    if states.shape[0] < 2:
        raise ValueError("need at least 2 paths")
    return MomentAccumulator().update(states).table(times)


def familywise_threshold(n_cells: int, level: float = 0.999) -> float:
    """Two-sided Bonferroni z bound for ``n_cells`` tests at family level ``level``."""
    return float(norm.isf((1.0 - level) / (2 * max(n_cells, 1))))


@dataclass
class ComparisonReport:
    times: np.ndarray
    nodes: np.ndarray
    z: np.ndarray  # (n_times, n_states); deterministic cells carry 0 or +/-inf
    max_abs_z: float
    threshold: float
    passed: bool
    n_cells: int
    frac_within_3: float

    @property
    def familywise_bound(self) -> float:
        return familywise_threshold(self.n_cells)

    def summary(self) -> dict:
        return {
            "max_z": self.max_abs_z,
            "pass": self.passed,
            "n_cells": self.n_cells,
            "z_threshold": self.threshold,
            "familywise_999_bound": self.familywise_bound,
            "frac_cells_abs_z_le_3": self.frac_within_3,
        }

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "node_index", "z"])
        for i, t in enumerate(self.times):
            for s, j in enumerate(self.nodes):
                w.writerow([repr(float(t)), int(j), repr(float(self.z[i, s]))])


def compare_moments(mc: MomentTable, oracle: ForwardSolution, z_threshold: float = 3.0, rtol_time: float = 1e-9) -> ComparisonReport:
    """z-scores of the MC second moments against a forward-equation solution."""
    if mc.times.shape != oracle.times.shape or not np.allclose(mc.times, oracle.times, rtol=0, atol=rtol_time):
        raise ValueError("time grids of the Monte Carlo table and the oracle differ")
    nodes = np.asarray(oracle.nodes)
    est = mc.mean_sq[:, nodes]
    se = mc.se_sq[:, nodes]
    diff = est - oracle.y
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, 0.0)
    det = se == 0
    bad = det & (np.abs(diff) > ZERO_VARIANCE_ATOL)
    z[bad] = np.copysign(np.inf, diff[bad])
    max_z = float(np.max(np.abs(z), initial=0.0))
    within = float(np.mean(np.abs(z) <= 3.0))
    return ComparisonReport(mc.times, nodes, z, max_z, z_threshold, max_z <= z_threshold, z.size, within)


@dataclass
class EnergyAudit:
    times: np.ndarray
    energy: np.ndarray  # (..., n_times)
    dissipated: np.ndarray  # running integral of the leak rate
    residual: np.ndarray  # energy + dissipated - energy(x0)
    martingale: np.ndarray  # running sum_j N_j(t)

    @property
    def terminal_residual(self) -> np.ndarray:
        return self.residual[..., -1]


def _cumulative(f: np.ndarray, dt: float, rule: str) -> np.ndarray:
    if rule == "trapezoid":
        inc = 0.5 * (f[..., 1:] + f[..., :-1]) * dt
    elif rule == "left":
        inc = f[..., :-1] * dt
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    zero = np.zeros(f.shape[:-1] + (1,))
    return np.concatenate([zero, np.cumsum(inc, axis=-1)], axis=-1)


def martingale_increments(tree: Tree, states: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Per-node ``dN_j`` with left-point evaluation, shape ``(..., n_steps, n_nodes)``."""
    x = states[..., :-1, :]
    c = tree.coeff
    s = tree.sigma
    own = s * c * x[..., tree.parent_index] * x * increments
    # child term of node j: -sigma c_k x_j x_k dB_k for k child of j
    kids = dynamics.child_sum(tree, c * x * increments)
    dN = own - s * x * kids
    dN[..., 0] = 0.0
    return dN


def energy_audit(tree: Tree, path: SdePath, rule: str = "trapezoid") -> EnergyAudit:
    """Residual of ``energy(t) + int_0^t leak - energy(0)`` along a full-resolution path.

    The leak rate is :func:`dynamics.energy_leak` (ghost edges plus the edges
    into the pinned root); it is the exact energy loss of the truncated Ito
    systems, linear and nonlinear alike. Deterministic paths leak nothing.
    """
    if not path.is_full:
        raise ValueError("energy audit needs states at every grid step")
    if path.increments is None and path.model is not dynamics.ModelKind.DETERMINISTIC_NONLINEAR:
        raise ValueError("path carries no noise increments")
    s = path.states
    E = dynamics.energy(s)
    if path.model is dynamics.ModelKind.DETERMINISTIC_NONLINEAR:
        D = np.zeros_like(E)
    else:
        D = _cumulative(dynamics.energy_leak(tree, s), path.grid.dt, rule)
    if path.increments is None:
        mart = np.zeros_like(E)
    else:
        dN = martingale_increments(tree, s, path.increments).sum(axis=-1)
        zero = np.zeros(dN.shape[:-1] + (1,))
        mart = np.concatenate([zero, np.cumsum(dN, axis=-1)], axis=-1)
    return EnergyAudit(path.times, E, D, E + D - E[..., :1], mart)


@dataclass
class BoundReport:
    bound: float
    tolerance: float
    per_path_max: np.ndarray
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def worst_excess(self) -> float:
        return float(np.max(self.per_path_max - self.bound, initial=-math.inf))

    def to_dict(self) -> dict:
        return {
            "bound": self.bound,
            "tolerance": self.tolerance,
            "violations": self.violations,
            "max_value": float(np.max(self.per_path_max, initial=0.0)),
            "worst_excess": self.worst_excess,
        }


def _states_of(ensemble) -> np.ndarray:
    if isinstance(ensemble, (Ensemble, SdePath)):
        return ensemble.states
    return np.asarray(ensemble, dtype=float)


def fourth_moment_check(ensemble, x0, tolerance: float) -> BoundReport:
    """Count paths with ``max_t sum_j X_j(t)**4 > energy(x0)**2 + tolerance``."""
    s = _states_of(ensemble)
    bound = float(dynamics.energy(x0)) ** 2
    per = np.max(np.sum(s ** 4, axis=-1), axis=-1)
    return BoundReport(bound, tolerance, np.atleast_1d(per), int(np.sum(per > bound + tolerance)))


def energy_control_check(ensemble, x0, tolerance: float) -> BoundReport:
    """Count paths with ``max_t energy(X(t)) > energy(x0) + tolerance``."""
    s = _states_of(ensemble)
    bound = float(dynamics.energy(x0))
    per = np.max(dynamics.energy(s), axis=-1)
    return BoundReport(bound, tolerance, np.atleast_1d(per), int(np.sum(per > bound + tolerance)))


def convergence_ratio(coarse: np.ndarray, fine: np.ndarray) -> float:
    """Ratio of mean absolute errors; about ``2**p`` for order ``p`` under dt halving."""
    return float(np.mean(np.abs(coarse)) / np.mean(np.abs(fine)))

