"""Adaptive-moment gradient descent over arbitrary parameter pytrees."""

from __future__ import annotations

import dataclasses
from typing import Any

import jax
import jax.numpy as jnp


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class AdamState:
    count: jnp.ndarray  # scalar int
    m: Any  # first-moment pytree, like params
    v: Any  # second-moment pytree


def init(params) -> AdamState:
    zeros = jax.tree.map(jnp.zeros_like, params)
    return AdamState(count=jnp.zeros((), dtype=jnp.int32), m=zeros, v=zeros)


def update(state: AdamState, grads, params, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One step; returns (new_state, new_params)."""
    count = state.count + 1
    m = jax.tree.map(lambda mu, g: b1 * mu + (1 - b1) * g, state.m, grads)
    v = jax.tree.map(lambda nu, g: b2 * nu + (1 - b2) * g * g, state.v, grads)
    c1 = 1.0 - b1 ** count.astype(jnp.float64)
    c2 = 1.0 - b2 ** count.astype(jnp.float64)
    new_params = jax.tree.map(
        lambda p, mu, nu: p - lr * (mu / c1) / (jnp.sqrt(nu / c2) + eps),
        params, m, v,
    )
    return AdamState(count=count, m=m, v=v), new_params
