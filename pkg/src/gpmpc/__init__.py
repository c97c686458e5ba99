"""Probabilistic MPC with learned Gaussian-process dynamics.

The package is organized around the pipeline it implements:

- :mod:`gpmpc.gp` -- per-dimension GP transition models (RBF kernels,
  evidence maximization, cached factorizations).
- :mod:`gpmpc.moments` -- closed-form propagation of a Gaussian
  state/control distribution through the GP dynamics, with derivatives.
- :mod:`gpmpc.costs` -- expected quadratic and saturating costs of
  Gaussian states, with derivatives.
- :mod:`gpmpc.planner` -- open-loop trajectory optimization: rollouts,
  adjoint multipliers, Hamiltonian gradients, SQP with box control
  bounds and chance state constraints.
- :mod:`gpmpc.envs` -- cart-pole and double-pendulum simulators.
- :mod:`gpmpc.loop` -- the episodic learning protocol and experiment
  aggregation.
- :mod:`gpmpc.cli` -- the ``gpmpc`` command-line entry point.

All numerics run in float64; importing this package configures JAX
accordingly, so it must be imported before any JAX arrays are created.
"""

import os

import jax

jax.config.update("jax_enable_x64", True)

# Share compiled kernels across worker processes and repeated runs.
_cache_dir = os.environ.get("GPMPC_JAX_CACHE", os.path.expanduser("~/.cache/gpmpc-jax"))
if _cache_dir:
    try:
        os.makedirs(_cache_dir, exist_ok=True)
        jax.config.update("jax_compilation_cache_dir", _cache_dir)
        jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)
    except Exception:  # pragma: no cover - cache is an optimization only
        pass

from .gp import GpDataset, GpModel, KernelHyper  # noqa: E402
from .moments import AugmentedState, GaussState, PropagationJacobians  # noqa: E402
from .costs import CostSpec, ExpectedCost  # noqa: E402

__all__ = [
    "AugmentedState",
    "CostSpec",
    "ExpectedCost",
    "GaussState",
    "GpDataset",
    "GpModel",
    "KernelHyper",
    "PropagationJacobians",
]

__version__ = "0.1.0"
