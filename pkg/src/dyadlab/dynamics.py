"""Vector fields of the tree dyadic model.

All functions act on the last axis of ``x`` and broadcast over any leading
axes, so a batch of paths of shape ``(n_paths, n_nodes)`` is evaluated in one
call. The root component of every returned field is zero.

Two squared-coefficient sums drive the noise-induced terms. For node ``j``:

* ``full rate``   ``c_j**2 + sum(c_k**2, k child of j, ghosts included)``
  (the Ito correction of the model, as written on the infinite tree);
* ``inner rate``  the same sum restricted to edges that carry noise inside
  the truncation: the parent edge only when the parent is not the pinned
  root, and no ghost children.

The difference ``full - inner`` is the *leak rate*: it is nonzero only on
generation 1 (edge to the pinned root) and generation ``N`` (ghost edges).
The truncated Ito systems lose energy exactly through these edges.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .tree import Tree


class ModelKind(str, Enum):
    DETERMINISTIC_NONLINEAR = "deterministic-nonlinear"
    ITO_NONLINEAR = "ito-nonlinear"
    ITO_LINEAR = "ito-linear"
    STRATONOVICH_NONLINEAR = "stratonovich-nonlinear"
    STRATONOVICH_LINEAR = "stratonovich-linear"

    @property
    def is_ito(self) -> bool:
        return self in (ModelKind.ITO_NONLINEAR, ModelKind.ITO_LINEAR)

    @property
    def is_stratonovich(self) -> bool:
        return self in (ModelKind.STRATONOVICH_NONLINEAR, ModelKind.STRATONOVICH_LINEAR)

    @property
    def is_linear(self) -> bool:
        return self in (ModelKind.ITO_LINEAR, ModelKind.STRATONOVICH_LINEAR)

    @property
    def stratonovich_twin(self) -> "ModelKind":
        """Stratonovich kind with the same solutions as this Ito kind."""
        return {
            ModelKind.ITO_LINEAR: ModelKind.STRATONOVICH_LINEAR,
            ModelKind.ITO_NONLINEAR: ModelKind.STRATONOVICH_NONLINEAR,
        }.get(self, self)

    @property
    def ito_twin(self) -> "ModelKind":
        return {
            ModelKind.STRATONOVICH_LINEAR: ModelKind.ITO_LINEAR,
            ModelKind.STRATONOVICH_NONLINEAR: ModelKind.ITO_NONLINEAR,
        }.get(self, self)

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "deterministic": cls.DETERMINISTIC_NONLINEAR,
            "deterministicnonlinear": cls.DETERMINISTIC_NONLINEAR,
            "itononlinear": cls.ITO_NONLINEAR,
            "itolinear": cls.ITO_LINEAR,
            "stratonovichnonlinear": cls.STRATONOVICH_NONLINEAR,
            "stratonovichlinear": cls.STRATONOVICH_LINEAR,
        }
        for kind in cls:
            if key == kind.value:
                return kind
        try:
            return aliases[key.replace("-", "")]
        except KeyError:
            raise ValueError(f"unknown model kind {value!r}") from None


def _check(tree: Tree, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (tree.n_nodes,):
        raise ValueError(f"state has {x.shape[-1:]} components, tree has {tree.n_nodes} nodes")
    return x


def child_sum(tree: Tree, v: np.ndarray) -> np.ndarray:
    """``out_j = sum(v_k, k child of j)`` within the truncation."""
    out = np.zeros_like(v)
    m = tree.n_interior
    if m:
        out[..., :m] = v[..., 1:].reshape(v.shape[:-1] + (m, tree.arity)).sum(axis=-1)
    return out


def full_rate(tree: Tree) -> np.ndarray:
    return tree.coeff ** 2 + tree.child_sq + tree.ghost_sq


def inner_rate(tree: Tree) -> np.ndarray:
    parent_edge = np.where(tree.generation >= 2, tree.coeff ** 2, 0.0)
    return parent_edge + tree.child_sq


def leak_rate(tree: Tree) -> np.ndarray:
    """Per-node squared coefficients of the edges leaving the truncation."""
    root_edge = np.where(tree.generation == 1, tree.coeff ** 2, 0.0)
    return root_edge + tree.ghost_sq


def drift_deterministic(tree: Tree, x) -> np.ndarray:
    x = _check(tree, x)
    c = tree.coeff
    out = c * x[..., tree.parent_index] ** 2 - x * child_sum(tree, c * x)
    out[..., 0] = 0.0
    return out


def ito_correction(tree: Tree, x) -> np.ndarray:
    x = _check(tree, x)
    out = -0.5 * tree.sigma ** 2 * full_rate(tree) * x
    out[..., 0] = 0.0
    return out


def stratonovich_conversion(tree: Tree, x) -> np.ndarray:
    """Ito-minus-Stratonovich drift of the truncated, root-pinned noise.

    This is ``0.5 * sum_m (D b_m) b_m`` for the noise columns ``b_m`` that
    :func:`apply_noise` actually uses, hence it omits the root edge and the
    ghost edges.
    """
    x = _check(tree, x)
    out = -0.5 * tree.sigma ** 2 * inner_rate(tree) * x
    out[..., 0] = 0.0
    return out


def drift(model: ModelKind, tree: Tree, x) -> np.ndarray:
    model = ModelKind.parse(model)
    x = _check(tree, x)
    if model is ModelKind.DETERMINISTIC_NONLINEAR:
        return drift_deterministic(tree, x)
    if model is ModelKind.ITO_LINEAR:
        return ito_correction(tree, x)
    if model is ModelKind.ITO_NONLINEAR:
        return drift_deterministic(tree, x) + ito_correction(tree, x)
    # Stratonovich = Ito twin minus the conversion term; what remains of the
    # correction is the leak drift, which is zero away from the two boundaries.
    leak = ito_correction(tree, x) - stratonovich_conversion(tree, x)
    if model is ModelKind.STRATONOVICH_LINEAR:
        return leak
    return drift_deterministic(tree, x) + leak


def apply_noise(tree: Tree, x, dW) -> np.ndarray:
    """Diffusion term ``sigma*c_j*x_parent*dW_j - sigma*sum_k c_k*x_k*dW_k``.

    ``dW`` has one increment per node (broadcast like ``x``). The root
    component is dropped and children beyond generation ``N`` carry no
    intensity, so no ghost increments are needed.
    """
    x = _check(tree, x)
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-1:] != (tree.n_nodes,):
        raise ValueError(f"expected {tree.n_nodes} increments per state, got {dW.shape[-1:]}")
    c = tree.coeff
    out = tree.sigma * (c * x[..., tree.parent_index] * dW - child_sum(tree, c * x * dW))
    out[..., 0] = 0.0
    return out


def energy(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


def boundary_dissipation(tree: Tree, x) -> np.ndarray | float:
    """Energy leak rate through the ghost edges below generation ``N``."""
    x = _check(tree, x)
    return tree.sigma ** 2 * np.sum(tree.ghost_sq * x * x, axis=-1)


def root_dissipation(tree: Tree, x) -> np.ndarray | float:
    """Energy leak rate through the generation-1 edges into the pinned root."""
    x = _check(tree, x)
    w = np.where(tree.generation == 1, tree.coeff ** 2, 0.0)
    return tree.sigma ** 2 * np.sum(w * x * x, axis=-1)


def energy_leak(tree: Tree, x) -> np.ndarray | float:
    """Total energy loss rate of the truncated Ito systems (both boundaries)."""
    x = _check(tree, x)
    return tree.sigma ** 2 * np.sum(leak_rate(tree) * x * x, axis=-1)


def quadratic_variation_rate(tree: Tree, x) -> np.ndarray | float:
    """``sum_j sigma^2 (c_j^2 x_parent^2 + sum_k c_k^2 x_k^2)`` over all nodes, root included."""
    x = _check(tree, x)
    c2 = tree.coeff ** 2
    xp2 = x[..., tree.parent_index] ** 2
    return tree.sigma ** 2 * (np.sum(c2 * xp2, axis=-1) + np.sum(child_sum(tree, c2 * x * x), axis=-1))
