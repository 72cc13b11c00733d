"""Kernel backend selection.

At import time the compiled extension (`mrnadistill._kernels_c`) is used
when it built successfully; otherwise the pure-numpy kernels take over.
`MRNADISTILL_KERNELS` overrides the choice:

    auto      compiled if available, numpy otherwise (default)
    compiled  require the extension, raise if missing
    python    force the numpy fallback

Both backends expose identical functions with identical contracts;
callers pass 2-D (rows, features) arrays to the layer-norm and embedding
kernels and 1-D arrays to the activation and optimizer kernels.
"""

from __future__ import annotations

import os

from . import _kernels_py
from .errors import ConfigError

try:
    from . import _kernels_c
except ImportError:
    _kernels_c = None


def available_backends() -> list[str]:
    names = ["python"]
    if _kernels_c is not None:
        names.insert(0, "compiled")
    return names


def resolve_backend(name: str | None = None):
    """Return (module, backend_name) for the requested backend."""
    if name is None:
        name = os.environ.get("MRNADISTILL_KERNELS", "auto")
    if name == "auto":
        name = "compiled" if _kernels_c is not None else "python"
    if name == "compiled":
        if _kernels_c is None:
            raise ConfigError("compiled kernels requested but the extension is not built")
        return _kernels_c, "compiled"
    if name == "python":
        return _kernels_py, "python"
    raise ConfigError(f"unknown kernel backend {name!r}")


kernels, BACKEND = resolve_backend()
