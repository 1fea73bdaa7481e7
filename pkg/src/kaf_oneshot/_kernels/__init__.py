"""Kernel backend selection.

The compiled extension (`_fast`) is preferred when it imports cleanly;
otherwise the numpy fallback (`_ref`) is used. KAF_ONESHOT_BACKEND=ref or
=fast forces the choice (=fast raises if the extension is not built).
Both modules expose the same functions with identical contracts.
"""

import importlib
import os

from . import _ref


def _import_fast():
    try:
        return importlib.import_module("._fast", __name__)
    except ImportError:
        return None


_requested = os.environ.get("KAF_ONESHOT_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "fast", "ref"):
    raise RuntimeError(f"KAF_ONESHOT_BACKEND={_requested!r} is not one of auto, fast, ref")

if _requested == "ref":
    _impl = _ref
else:
    _fast_mod = _import_fast()
    if _fast_mod is None:
        if _requested == "fast":
            raise RuntimeError("KAF_ONESHOT_BACKEND=fast but the compiled extension is not available")
        _impl = _ref
    else:
        _impl = _fast_mod

BACKEND = _impl.NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
kaf_forward = _impl.kaf_forward
kaf_backward = _impl.kaf_backward
kaf2d_forward = _impl.kaf2d_forward
kaf2d_backward = _impl.kaf2d_backward


def available_backends():
    """Names of the importable kernel implementations."""
    return ["ref", "fast"] if _import_fast() is not None else ["ref"]


def get_backend(name):
    """Return the kernel module for `name` ("ref" or "fast")."""
    if name == "ref":
        return _ref
    if name == "fast":
        mod = _import_fast()
        if mod is None:
            raise RuntimeError("compiled kernel extension is not available")
        return mod
    raise ValueError(f"unknown kernel backend {name!r}")
