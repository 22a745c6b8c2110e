"""Joint sparse-dense retrieval adapters with an exact inverted-index retriever.

Submodules are imported lazily so the CLI can configure BLAS thread
pools before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "cli", "data", "errors", "evaluation", "grad", "index", "losses",
    "model", "rng", "scoring", "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(_SUBMODULES) + ["__version__"])
