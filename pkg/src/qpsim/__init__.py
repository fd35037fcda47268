"""Differentiable quasi-physical simulation toolkit.

Transfers kinematic manipulation demonstrations to a simulated articulated
hand by optimizing controls through a curriculum of progressively stiffer
physics models, then adapting to a black-box target simulator via learned
residual physics and closed-loop MPC.
"""

import os

import jax

# Physics in float64; must be set before the first jax computation.
jax.config.update("jax_enable_x64", True)

# Rollout programs are large; cache compilations on disk so repeat runs
# (tests, CLI invocations) skip the multi-second XLA compile.
_cache = os.environ.get(
    "QPSIM_XLA_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "qpsim-xla")
)
if _cache != "off":
    jax.config.update("jax_compilation_cache_dir", _cache)
    jax.config.update("jax_persistent_cache_min_compile_time_secs", 1.0)

__version__ = "0.1.0"
