"""Training-step kernels with a compiled fast path.

The compiled extension (Cython + BLAS) is picked at import time when it
built successfully; otherwise the numpy fallback takes over transparently.
Use set_backend()/backend_name() to pin or inspect the choice (benchmarks
and equivalence tests rely on this).
"""

from __future__ import annotations

from . import pyref

try:
    from . import _fast
except ImportError:
    _fast = None

_BACKENDS = {"python": pyref}
if _fast is not None:
    _BACKENDS["compiled"] = _fast

_active = _fast if _fast is not None else pyref


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return "compiled" if _active is not pyref else "python"


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def train_batch(*args, **kwargs):
    return _active.train_batch(*args, **kwargs)


def grad_norms(*args, **kwargs):
    return _active.grad_norms(*args, **kwargs)
