"""trafficlens: image-encoded DDoS flow classification with reliability
metrics, Grad-CAM/KernelSHAP attribution, and latency benchmarking.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
the environment before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "flows",
    "imaging",
    "layers",
    "optim",
    "models",
    "metrics",
    "explain",
    "bench",
    "synth",
    "cli",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
