"""Backend switch for the hot kernels.

Numba is used when it imports and ``DKFAC_NUMBA`` is not set to ``0``.
The pure-numpy path is always importable so it can be benchmarked and
cross-checked against the compiled one.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

_FALSY = {"0", "false", "no", "off"}


def _env_enabled():
    return os.environ.get("DKFAC_NUMBA", "1").strip().lower() not in _FALSY


_use_numba = HAVE_NUMBA and _env_enabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` at runtime; returns the previous name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    return previous


def backend():
    return "numba" if _use_numba else "numpy"
