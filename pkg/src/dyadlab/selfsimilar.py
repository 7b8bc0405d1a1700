"""Self-similar profiles and the deterministic non-uniqueness experiment.

A profile ``a`` gives the solution ``X_j(t) = a_j / (t - t0)`` of the
deterministic system when, for every node,

    a_j + c_j a_parent**2 = sum_k c_k a_j a_k          (a_root = 0)

Multiplying by ``a_j`` and summing telescopes the quadratic terms, so on a
finite tree with ``a_k = 0`` below generation ``N`` only ``a = 0`` solves the
recursion exactly. A truncated profile is therefore always inexact at the
last generation; the quality metric ignores the last two generations.

The solver works on the generation-symmetric reduction

    a_n + c_n a_{n-1}**2 = d c_{n+1} a_n a_{n+1},      a_0 = 0

extended ``padding`` generations past ``N`` and closed by the decay
``a_{M+1} = a_M (d b)**(-1/3)`` that the quadratic terms impose on a
geometric coefficient law ``c_n ~ b**n``. The forward recurrence has an
unstable period-two mode, so the system is solved as a boundary-value
problem by damped Newton with a banded Jacobian.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from . import dynamics
from .integrate import IntegrationError, TimeGrid, integrate_ode
from .tree import Tree


class ConvergenceError(RuntimeError):
    pass


class SingularJacobianError(ConvergenceError):
    pass


@dataclass
class SelfSimilarProfile:
    a: np.ndarray
    t0: float
    residual_norm: float
    generation_values: np.ndarray
    trivial: bool = False
    iterations: int = 0

    @property
    def energy(self) -> float:
        return float(np.sum(self.a ** 2))

    def generation_energy(self, tree: Tree) -> np.ndarray:
        return np.array([np.sum(self.a[tree.generation_slice(n)] ** 2) for n in range(tree.max_generation + 1)])

    def to_csv(self, fh, tree: Tree) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_index", "generation", "a"])
        for j, v in enumerate(self.a):
            w.writerow([j, int(tree.generation[j]), repr(float(v))])


def residual_selfsimilar(tree: Tree, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (tree.n_nodes,):
        raise ValueError(f"profile has shape {a.shape}, tree has {tree.n_nodes} nodes")
    # drift_deterministic(a) = c_j a_parent^2 - sum c_k a_j a_k, closure a_k = 0 past N
    r = a + dynamics.drift_deterministic(tree, a)
    r[0] = 0.0
    return r


def quality_nodes(tree: Tree) -> np.ndarray:
    """Nodes entering the residual metric: generations ``1 .. N-2``."""
    g = tree.generation
    return np.flatnonzero((g >= 1) & (g <= tree.max_generation - 2))


def generation_coefficients(tree: Tree, extra: int = 0) -> np.ndarray:
    """``c_n`` per generation ``0 .. N+1+extra``; requires a per-generation law."""
    N = tree.max_generation
    cg = np.empty(N + 2)
    cg[0] = 0.0
    for n in range(1, N + 1):
        vals = tree.coeff[tree.generation_slice(n)]
        if not np.allclose(vals, vals[0], rtol=1e-14, atol=0):
            raise ValueError("symmetric ansatz needs coefficients that depend only on the generation")
        cg[n] = vals[0]
    if not np.allclose(tree.ghost_coeff, tree.ghost_coeff.flat[0], rtol=1e-14, atol=0):
        raise ValueError("symmetric ansatz needs coefficients that depend only on the generation")
    cg[N + 1] = tree.ghost_coeff.flat[0]
    if extra:
        # geometric extrapolation with the last available ratio
        ratio = cg[N + 1] / cg[N] if N >= 1 else (tree.config.base or 2.0)
        cg = np.concatenate([cg, cg[N + 1] * ratio ** np.arange(1, extra + 1)])
    return cg


def _symmetric_system(a: np.ndarray, cg: np.ndarray, d: int, rho: float):
    """Residual and banded Jacobian for unknowns ``a_1 .. a_M``."""
    M = a.size
    full = np.concatenate([[0.0], a, [rho * a[-1]]])
    n = np.arange(1, M + 1)
    F = full[n] + cg[n] * full[n - 1] ** 2 - d * cg[n + 1] * full[n] * full[n + 1]
    ab = np.zeros((3, M))
    ab[1] = 1.0 - d * cg[n + 1] * full[n + 1]
    ab[1, -1] = 1.0 - 2.0 * d * cg[M + 1] * rho * a[-1]
    ab[0, 1:] = -d * cg[n[:-1] + 1] * full[n[:-1]]  # dF_n / da_{n+1}
    ab[2, :-1] = 2.0 * cg[n[1:]] * full[n[1:] - 1]  # dF_n / da_{n-1}
    return F, ab


def default_guess(tree: Tree) -> np.ndarray:
    """Per-generation starting point on the nontrivial branch."""
    d = tree.arity
    cg = generation_coefficients(tree)
    b = cg[2] / cg[1] if tree.max_generation >= 1 else 2.0
    rho = (d * b) ** (-1.0 / 3.0)
    g = 0.5 * rho ** np.arange(tree.max_generation + 1, dtype=float)
    g[0] = 0.0
    if tree.max_generation >= 2:
        g[2] = 1.0 / (d * cg[2])
    return g


def solve_selfsimilar(
    tree: Tree,
    guess=None,
    tol: float = 1e-10,
    t0: float = -1.0,
    padding: int = 30,
    max_iter: int = 100,
) -> SelfSimilarProfile:
    """Damped Newton for a generation-symmetric profile, verified on the full tree.

    ``guess`` may be per node or per generation; ``None`` uses
    :func:`default_guess`. A zero guess returns the zero profile flagged
    ``trivial``. Raises :class:`ConvergenceError` when the metric residual
    stays above ``tol``.
    """
    if not t0 < 0:
        raise ValueError("t0 must be negative")
    N, d = tree.max_generation, tree.arity
    if guess is None:
        g = default_guess(tree)
    else:
        guess = np.asarray(guess, dtype=float)
        if guess.shape == (tree.n_nodes,):
            if guess[0] != 0:
                raise ValueError("guess must vanish at the root")
            g = np.array([guess[tree.generation_slice(n)].mean() for n in range(N + 1)])
        elif guess.shape == (N + 1,):
            g = guess.copy()
        else:
            raise ValueError(f"guess must have {tree.n_nodes} (per node) or {N + 1} (per generation) entries")
    if not np.any(g[1:]):
        zero = np.zeros(tree.n_nodes)
        return SelfSimilarProfile(zero, t0, 0.0, np.zeros(N + 1), trivial=True)
    if N < 2:
        raise ConvergenceError("need at least 3 generations for a nontrivial profile")

    M = N + padding
    cg = generation_coefficients(tree, extra=padding)
    b = cg[N + 1] / cg[N]
    rho = (d * b) ** (-1.0 / 3.0)
    a = np.empty(M)
    a[:N] = g[1:]
    a[N:] = g[N] * rho ** np.arange(1, padding + 1)

    F, ab = _symmetric_system(a, cg, d, rho)
    norm = np.max(np.abs(F))
    it = 0
    for it in range(1, max_iter + 1):
        if norm <= 1e-3 * tol:
            break
        try:
            step = solve_banded((1, 1), ab, -F)
        except (LinAlgError, ValueError) as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularJacobianError(f"singular Jacobian at iteration {it}")
        lam = 1.0
        while lam > 1e-6:
            trial = a + lam * step
            F_new, ab_new = _symmetric_system(trial, cg, d, rho)
            new = np.max(np.abs(F_new))
            if new < norm or new <= 1e-3 * tol:
                break
            lam *= 0.5
        else:
            break  # no descent: stagnated at round-off or stuck
        a, F, ab, norm = trial, F_new, ab_new, new

    gen_vals = np.concatenate([[0.0], a[:N]])
    prof = gen_vals[tree.generation]
    trivial = bool(np.max(np.abs(gen_vals)) < 1e-12)
    res = residual_selfsimilar(tree, prof)
    q = quality_nodes(tree)
    res_norm = float(np.max(np.abs(res[q]), initial=0.0))
    if trivial:
        return SelfSimilarProfile(np.zeros(tree.n_nodes), t0, 0.0, np.zeros(N + 1), trivial=True, iterations=it)
    if res_norm > tol:
        raise ConvergenceError(f"residual {res_norm:.3e} above tol {tol:.1e} after {it} iterations")
    return SelfSimilarProfile(prof, t0, res_norm, gen_vals, trivial=False, iterations=it)


def selfsimilar_state(profile: SelfSimilarProfile, t: float) -> np.ndarray:
    """Forward self-similar solution ``a / (t - t0)``, valid for ``t > t0``."""
    if not t > profile.t0:
        raise ValueError(f"t={t} is not after the singular time {profile.t0}")
    return profile.a / (t - profile.t0)


def time_reversed_state(profile: SelfSimilarProfile, t: float) -> np.ndarray:
    """``-X(-t) = -a / (-t - t0)``, defined for ``t < -t0``."""
    if not t < -profile.t0:
        raise ValueError(f"t={t} is at or past the blow-up time {-profile.t0}")
    return -profile.a / (-t - profile.t0)


@dataclass
class NonUniquenessReport:
    times: np.ndarray
    traj_selfsimilar: np.ndarray
    traj_galerkin: np.ndarray
    divergence: np.ndarray  # l2 distance per time
    energy_selfsimilar: np.ndarray
    energy_galerkin: np.ndarray
    trivial: bool
    blowup_time: float | None = None

    @property
    def initial_norm(self) -> float:
        return float(np.sqrt(self.energy_selfsimilar[0]))

    @property
    def relative_divergence(self) -> np.ndarray:
        n0 = self.initial_norm
        return self.divergence / n0 if n0 > 0 else np.zeros_like(self.divergence)

    @property
    def galerkin_energy_drift(self) -> float:
        """Max relative deviation of the Galerkin energy from its initial value."""
        e0 = self.energy_galerkin[0]
        if e0 == 0:
            return float(np.max(np.abs(self.energy_galerkin)))
        return float(np.max(np.abs(self.energy_galerkin - e0)) / e0)

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "l2_distance", "energy_selfsimilar", "energy_galerkin"])
        for row in zip(self.times, self.divergence, self.energy_selfsimilar, self.energy_galerkin):
            w.writerow([repr(float(v)) for v in row])


def nonuniqueness_experiment(tree: Tree, profile: SelfSimilarProfile, grid: TimeGrid, record_every: int = 1) -> NonUniquenessReport:
    """Closed-form time-reversed solution vs the Galerkin solution from the same data."""
    if not grid.t_end < -profile.t0:
        raise ValueError(f"grid must end before the blow-up time {-profile.t0}")
    x0 = time_reversed_state(profile, grid.t0)
    blowup = None
    try:
        path = integrate_ode(tree, x0, grid, record_every)
        times, gal = path.times, path.states
    except IntegrationError as exc:
        blowup = exc.t_last
        short = TimeGrid(grid.t0, max(exc.t_last, grid.t0 + grid.dt), grid.dt)
        path = integrate_ode(tree, x0, short, record_every)
        times, gal = path.times, path.states
    ss = np.stack([time_reversed_state(profile, t) for t in times])
    return NonUniquenessReport(
        times,
        ss,
        gal,
        np.sqrt(np.sum((ss - gal) ** 2, axis=-1)),
        dynamics.energy(ss),
        dynamics.energy(gal),
        profile.trivial,
        blowup,
    )
