"""Distributed graph-network controllers with stability certificates.

The package bundles three recurrent graph cores (gated discrete, liquid
time-constant ODE, and its closed-form approximation), norm-based
contraction certificates for each, an imitation-learning trainer with
expert relabeling, and a flocking benchmark with a command-line driver.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "cli",
    "flocking",
    "graph",
    "models",
    "stability",
    "training",
)

# light-weight root: submodules load on first attribute access
def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
