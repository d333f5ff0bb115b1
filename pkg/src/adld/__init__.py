"""Semi-supervised AU label transfer through a latent feature domain.

Submodules are imported lazily so the command-line entry point can pin BLAS
thread counts (ADLD_THREADS) before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "geometry",
    "networks",
    "losses",
    "training",
    "synthdata",
    "evaluation",
    "gradcheck",
    "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
