"""Fixed-step integration of the deterministic ODE and the SDEs.

States are arrays whose last axis indexes tree nodes; any leading axes are
treated as independent paths and stepped together.

Brownian increments come from :class:`NoisePlan`. Each path owns a Philox
stream keyed by ``(seed, path_index)``; the increment for ``(step, node)`` is
entry ``[step, node]`` of the ``(n_steps, n_nodes)`` normal block drawn from
that stream. Increments therefore depend only on
``(seed, path_index, node, step)`` for a fixed tree and grid, never on batch
size or worker scheduling.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from . import dynamics
from .dynamics import ModelKind
from .tree import Tree


class IntegrationError(RuntimeError):
    """Non-finite state; ``t_last`` is the last time with a finite state."""

    def __init__(self, message: str, t_last: float, path_index: int | None = None):
        self.t_last = t_last
        self.path_index = path_index
        super().__init__(message)


class Scheme(str, Enum):
    EULER_MARUYAMA = "euler-maruyama"
    HEUN = "heun"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        if key in ("em", "euler", "eulermaruyama", "euler-maruyama"):
            return cls.EULER_MARUYAMA
        if key == "heun":
            return cls.HEUN
        raise ValueError(f"unknown scheme {value!r}")

    @classmethod
    def default_for(cls, model: ModelKind) -> "Scheme":
        return cls.HEUN if ModelKind.parse(model).is_stratonovich else cls.EULER_MARUYAMA


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end > self.t0:
            raise ValueError(f"t_end ({self.t_end}) must exceed t0 ({self.t0})")
        if self.n_steps < 1:
            raise ValueError("grid has no steps")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def record_times(self, record_every: int = 1) -> np.ndarray:
        return self.times[record_indices(self.n_steps, record_every)]

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.t0 + self.n_steps * self.dt, self.dt / factor)

    def coarsened(self, factor: int = 2) -> "TimeGrid":
        if self.n_steps % factor:
            raise ValueError(f"{self.n_steps} steps not divisible by {factor}")
        return TimeGrid(self.t0, self.t0 + self.n_steps * self.dt, self.dt * factor)


def record_indices(n_steps: int, record_every: int) -> np.ndarray:
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    idx = np.arange(0, n_steps + 1, record_every)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


@dataclass(frozen=True)
class NoisePlan:
    seed: int
    path_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.path_index),))
        return np.random.Generator(np.random.Philox(ss))

    def increments(self, n_steps: int, n_nodes: int, dt: float) -> np.ndarray:
        return math.sqrt(dt) * self.generator().standard_normal((n_steps, n_nodes))


def batch_increments(seed: int, path_indices, n_steps: int, n_nodes: int, dt: float) -> np.ndarray:
    return np.stack([NoisePlan(seed, int(i)).increments(n_steps, n_nodes, dt) for i in path_indices])


def coarsen_increments(dW: np.ndarray, factor: int = 2) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` steps (axis ``-2``) into one increment."""
    n_steps = dW.shape[-2]
    if n_steps % factor:
        raise ValueError(f"{n_steps} steps not divisible by {factor}")
    shape = dW.shape[:-2] + (n_steps // factor, factor, dW.shape[-1])
    return dW.reshape(shape).sum(axis=-2)


@dataclass
class SdePath:
    """Trajectory on a time grid.

    ``states`` has shape ``(..., n_records, n_nodes)``; ``record_index`` maps
    records to grid steps. ``increments`` has shape ``(..., n_steps,
    n_nodes)`` when kept. ``noise`` is ``None`` for ODE paths and for paths
    driven by externally supplied increments.
    """

    grid: TimeGrid
    states: np.ndarray
    model: ModelKind
    record_index: np.ndarray
    increments: np.ndarray | None = None
    noise: NoisePlan | None = None
    scheme: Scheme | None = None

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.record_index]

    @property
    def is_full(self) -> bool:
        return self.record_index.size == self.grid.n_steps + 1

    def to_csv(self, fh) -> None:
        write_path_csv(fh, self.times, self.states)


def write_path_csv(fh, times, states) -> None:
    """Long format ``time,node_index,value`` (plus ``path`` for batched states)."""
    w = csv.writer(fh, lineterminator="\n")
    states = np.asarray(states)
    if states.ndim == 2:
        w.writerow(["time", "node_index", "value"])
        for t, row in zip(times, states):
            for j, v in enumerate(row):
                w.writerow([repr(float(t)), j, repr(float(v))])
    else:
        w.writerow(["path", "time", "node_index", "value"])
        for p, path in enumerate(states.reshape(-1, *states.shape[-2:])):
            for t, row in zip(times, path):
                for j, v in enumerate(row):
                    w.writerow([p, repr(float(t)), j, repr(float(v))])


def _prepare_x0(tree: Tree, x0) -> np.ndarray:
    x = np.array(x0, dtype=float)
    if x.shape[-1:] != (tree.n_nodes,):
        raise ValueError(f"initial state has {x.shape[-1:]} components, tree has {tree.n_nodes} nodes")
    if np.any(x[..., 0] != 0):
        raise ValueError("root component of the initial state must be 0")
    return x


def _blowup(x: np.ndarray, t_last: float):
    bad = ~np.all(np.isfinite(x), axis=-1)
    where = np.argwhere(bad)
    path = int(where[0][0]) if x.ndim > 1 and where.size else None
    raise IntegrationError(f"non-finite state after t={t_last:g}", t_last, path)


def integrate_ode(tree: Tree, x0, grid: TimeGrid, record_every: int = 1) -> SdePath:
    """Classical RK4 on the deterministic Galerkin system."""
    x = _prepare_x0(tree, x0)
    f = lambda y: dynamics.drift_deterministic(tree, y)  # noqa: E731
    rec = record_indices(grid.n_steps, record_every)
    out = np.empty(x.shape[:-1] + (rec.size, tree.n_nodes))
    out[..., 0, :] = x
    h = grid.dt
    r = 1
    for i in range(1, grid.n_steps + 1):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            _blowup(x, grid.t0 + (i - 1) * h)
        if r < rec.size and rec[r] == i:
            out[..., r, :] = x
            r += 1
    return SdePath(grid, out, ModelKind.DETERMINISTIC_NONLINEAR, rec)


def _check_scheme(model: ModelKind, scheme: Scheme):
    if scheme is Scheme.EULER_MARUYAMA and not model.is_ito:
        raise ValueError(f"Euler-Maruyama needs an Ito model, got {model.value}")
    if scheme is Scheme.HEUN and not model.is_stratonovich:
        raise ValueError(f"Heun needs a Stratonovich model, got {model.value}")


def integrate_sde(
    tree: Tree,
    model,
    x0,
    grid: TimeGrid,
    noise: NoisePlan | None = None,
    scheme=None,
    *,
    increments: np.ndarray | None = None,
    record_every: int = 1,
    keep_increments: bool = True,
) -> SdePath:
    """Step an SDE with Euler-Maruyama (Ito kinds) or Heun (Stratonovich kinds).

    Supply either a :class:`NoisePlan` or explicit ``increments`` of shape
    ``(..., n_steps, n_nodes)``; leading axes of ``increments`` and ``x0``
    broadcast as a batch of paths.
    """
    model = ModelKind.parse(model)
    scheme = Scheme.default_for(model) if scheme is None else Scheme.parse(scheme)
    _check_scheme(model, scheme)
    x = _prepare_x0(tree, x0)
    if increments is None:
        if noise is None:
            raise ValueError("need a NoisePlan or explicit increments")
        increments = noise.increments(grid.n_steps, tree.n_nodes, grid.dt)
    increments = np.asarray(increments, dtype=float)
    if increments.shape[-2:] != (grid.n_steps, tree.n_nodes):
        raise ValueError(
            f"increments shape {increments.shape} does not match ({grid.n_steps}, {tree.n_nodes})"
        )
    x = np.broadcast_to(x, increments.shape[:-2] + (tree.n_nodes,)).copy()

    rec = record_indices(grid.n_steps, record_every)
    out = np.empty(x.shape[:-1] + (rec.size, tree.n_nodes))
    out[..., 0, :] = x
    h = grid.dt
    r = 1
    for i in range(grid.n_steps):
        dW = increments[..., i, :]
        a = dynamics.drift(model, tree, x)
        if scheme is Scheme.EULER_MARUYAMA:
            x = x + a * h + dynamics.apply_noise(tree, x, dW)
        else:
            pred = x + a * h + dynamics.apply_noise(tree, x, dW)
            a2 = dynamics.drift(model, tree, pred)
            # noise is linear in the state: averaging coefficients = noise at the midpoint
            x = x + 0.5 * (a + a2) * h + dynamics.apply_noise(tree, 0.5 * (x + pred), dW)
        x[..., 0] = 0.0
        if not np.all(np.isfinite(x)):
            _blowup(x, grid.t0 + i * h)
        if r < rec.size and rec[r] == i + 1:
            out[..., r, :] = x
            r += 1
    return SdePath(
        grid,
        out,
        model,
        rec,
        increments=increments if keep_increments else None,
        noise=noise,
        scheme=scheme,
    )


@dataclass
class Ensemble:
    """Recorded states of ``n_paths`` paths, shape ``(n_paths, n_records, n_nodes)``."""

    grid: TimeGrid
    model: ModelKind
    scheme: Scheme
    seed: int
    states: np.ndarray
    record_index: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.record_index]


def iter_batches(
    tree: Tree,
    model,
    x0,
    grid: TimeGrid,
    seed: int,
    n_paths: int,
    scheme=None,
    *,
    record_every: int = 1,
    batch_size: int = 1000,
    workers: int = 1,
    keep_increments: bool = False,
    path_offset: int = 0,
) -> Iterator[tuple[np.ndarray, SdePath]]:
    """Yield ``(path_indices, batched SdePath)`` in path order.

    Paths use the streams ``path_offset .. path_offset + n_paths - 1``.
    Batches may be computed concurrently but are always yielded in index
    order, so any reduction over them is schedule-independent.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    starts = list(range(0, n_paths, batch_size))

    def run(start: int):
        idx = np.arange(start, min(start + batch_size, n_paths)) + path_offset
        dW = batch_increments(seed, idx, grid.n_steps, tree.n_nodes, grid.dt)
        try:
            path = integrate_sde(
                tree, model, x0, grid, None, scheme,
                increments=dW, record_every=record_every, keep_increments=keep_increments,
            )
        except IntegrationError as exc:
            local = exc.path_index or 0
            raise IntegrationError(str(exc), exc.t_last, int(idx[local])) from exc
        return idx, path

    if workers <= 1:
        for s in starts:
            yield run(s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(run, starts)


def simulate_ensemble(
    tree: Tree,
    model,
    x0,
    grid: TimeGrid,
    seed: int,
    n_paths: int,
    scheme=None,
    *,
    record_every: int = 1,
    batch_size: int = 1000,
    workers: int = 1,
) -> Ensemble:
    model = ModelKind.parse(model)
    scheme = Scheme.default_for(model) if scheme is None else Scheme.parse(scheme)
    chunks = []
    rec = None
    for _, path in iter_batches(
        tree, model, x0, grid, seed, n_paths, scheme,
        record_every=record_every, batch_size=batch_size, workers=workers,
    ):
        chunks.append(path.states)
        rec = path.record_index
    return Ensemble(grid, model, scheme, seed, np.concatenate(chunks, axis=0), rec)
