"""Truncated tree of eddies with breadth-first node numbering.

Node ``0`` is the root. With constant arity ``d`` the children of node ``i``
are ``d*i + 1, ..., d*i + d``, so every generation occupies a contiguous
block of indices and a state vector is a plain 1-d array.

The tree is cut at generation ``N``. Coefficients of the generation ``N + 1``
nodes are still needed by the Ito correction and the boundary leak, so they
are kept as *ghost* coefficients even though those nodes carry no intensity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid tree or experiment configuration."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def node_count(max_generation: int, arity: int) -> int:
    """Number of nodes with generation ``<= max_generation``."""
    if arity == 1:
        return max_generation + 1
    return (arity ** (max_generation + 1) - 1) // (arity - 1)


@dataclass(frozen=True)
class TreeConfig:
    """Shape of the truncated tree and its coefficient law.

    Exactly one of ``base`` (geometric law ``c_j = base**|j|``) or
    ``coefficients`` (explicit per-node values for every node up to
    generation ``max_generation + 1``, ghosts included) is used. The
    explicit list is indexed breadth-first; its root entry is ignored.
    """

    max_generation: int
    arity: int = 2
    sigma: float = 1.0
    base: float | None = 2.0
    coefficients: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.coefficients is not None:
            object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
            object.__setattr__(self, "base", None)
        self.validate()

    @property
    def law(self) -> str:
        return "explicit" if self.coefficients is not None else "geometric"

    def validate(self) -> None:
        if not isinstance(self.max_generation, (int, np.integer)) or self.max_generation < 0:
            raise ConfigError("max_generation", f"must be an integer >= 0, got {self.max_generation!r}")
        if not isinstance(self.arity, (int, np.integer)) or self.arity < 1:
            raise ConfigError("arity", f"must be an integer >= 1, got {self.arity!r}")
        if not math.isfinite(self.sigma) or self.sigma == 0:
            raise ConfigError("sigma", f"must be finite and nonzero, got {self.sigma!r}")
        if self.coefficients is None:
            if self.base is None or not math.isfinite(self.base) or self.base <= 1:
                raise ConfigError("base", f"geometric law needs base > 1, got {self.base!r}")
        else:
            need = node_count(self.max_generation + 1, self.arity)
            if len(self.coefficients) != need:
                raise ConfigError(
                    "coefficients",
                    f"expected {need} values (generations 0..{self.max_generation + 1}), "
                    f"got {len(self.coefficients)}",
                )
            bad = [i for i, c in enumerate(self.coefficients[1:], start=1) if not (c > 0 and math.isfinite(c))]
            if bad:
                raise ConfigError("coefficients", f"non-positive coefficient at node {bad[0]}")

    def to_dict(self) -> dict:
        out = {
            "max_generation": int(self.max_generation),
            "arity": int(self.arity),
            "sigma": float(self.sigma),
            "law": self.law,
        }
        if self.coefficients is None:
            out["base"] = float(self.base)
        else:
            out["coefficients"] = list(self.coefficients)
        return out


@dataclass(frozen=True, eq=False)
class Tree:
    """Immutable truncated tree.

    Per-node arrays have length ``n_nodes``. ``parent[0]`` is ``-1``.
    ``ghost_coeff`` has shape ``(n_leaves, arity)`` and lists the
    generation ``N + 1`` coefficients below each leaf, leaves in index order.
    """

    config: TreeConfig
    generation: np.ndarray
    parent: np.ndarray
    coeff: np.ndarray
    ghost_coeff: np.ndarray
    # squared-coefficient sums used by the Ito correction and the q-matrix
    child_sq: np.ndarray = field(repr=False)
    ghost_sq: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.generation.size

    @property
    def arity(self) -> int:
        return self.config.arity

    @property
    def max_generation(self) -> int:
        return self.config.max_generation

    @property
    def sigma(self) -> float:
        return self.config.sigma

    @property
    def n_interior(self) -> int:
        """Nodes that have children inside the truncation."""
        return node_count(self.max_generation - 1, self.arity) if self.max_generation > 0 else 0

    @property
    def first_leaf(self) -> int:
        return self.n_interior

    def generation_slice(self, n: int) -> slice:
        if not 0 <= n <= self.max_generation:
            raise IndexError(f"generation {n} outside 0..{self.max_generation}")
        start = node_count(n - 1, self.arity) if n > 0 else 0
        return slice(start, node_count(n, self.arity))

    @property
    def parent_index(self) -> np.ndarray:
        """Parent indices with the root mapped to itself (safe for fancy indexing)."""
        p = self.parent.copy()
        p[0] = 0
        return p

    def check_id(self, node: int) -> int:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.n_nodes:
            raise IndexError(f"invalid node id {node!r} for a tree of {self.n_nodes} nodes")
        return int(node)

    def to_dict(self) -> dict:
        return {
            "N": int(self.max_generation),
            "d": int(self.arity),
            "law": self.config.law,
            "base": self.config.base,
            "sigma": float(self.sigma),
            "coefficients": [float(c) for c in self.coeff],
            "ghost_coefficients": [[float(c) for c in row] for row in self.ghost_coeff],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def build_tree(config: TreeConfig) -> Tree:
    config.validate()
    N, d = config.max_generation, config.arity
    n = node_count(N, d)
    n_full = node_count(N + 1, d)

    generation = np.zeros(n_full, dtype=np.int64)
    for g in range(1, N + 2):
        generation[node_count(g - 1, d):node_count(g, d)] = g
    parent = np.empty(n, dtype=np.int64)
    parent[0] = -1
    parent[1:] = (np.arange(1, n) - 1) // d

    if config.coefficients is None:
        full = config.base ** generation.astype(float)
    else:
        full = np.array(config.coefficients, dtype=float)
    full[0] = 0.0

    coeff = full[:n].copy()
    first_leaf = node_count(N - 1, d) if N > 0 else 0
    ghost = full[n:n_full].reshape(n - first_leaf, d).copy()

    child_sq = np.zeros(n)
    n_int = first_leaf
    if n_int:
        child_sq[:n_int] = (coeff[1:] ** 2).reshape(n_int, d).sum(axis=1)
    ghost_sq = np.zeros(n)
    ghost_sq[first_leaf:] = (ghost ** 2).sum(axis=1)

    for arr in (coeff, ghost, child_sq, ghost_sq):
        arr.setflags(write=False)
    gen = generation[:n].copy()
    gen.setflags(write=False)
    parent.setflags(write=False)
    return Tree(config, gen, parent, coeff, ghost, child_sq, ghost_sq)


def parent_of(tree: Tree, node: int) -> int | None:
    node = tree.check_id(node)
    return None if node == 0 else int(tree.parent[node])


def children_of(tree: Tree, node: int) -> list[int]:
    node = tree.check_id(node)
    if tree.generation[node] >= tree.max_generation:
        return []
    d = tree.arity
    return list(range(d * node + 1, d * node + d + 1))


def tree_from_dict(data: dict) -> Tree:
    """Rebuild a tree from :meth:`Tree.to_dict` or :meth:`TreeConfig.to_dict` output."""
    N = data.get("N", data.get("max_generation"))
    d = data.get("d", data.get("arity", 2))
    sigma = data.get("sigma", 1.0)
    if data.get("law") == "explicit":
        coeffs: Sequence[float] = list(data["coefficients"])
        if "ghost_coefficients" in data:
            coeffs = coeffs + [c for row in data["ghost_coefficients"] for c in row]
        return build_tree(TreeConfig(N, d, sigma, None, tuple(coeffs)))
    return build_tree(TreeConfig(N, d, sigma, data.get("base", 2.0)))
