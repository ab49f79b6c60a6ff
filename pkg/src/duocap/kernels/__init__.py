"""Capsule kernel backend selection.

The compiled Cython extension is preferred when importable; the numpy
reference implementation is the fallback. Set ``DUOCAP_KERNELS=python`` to
force the fallback (``cython`` insists on the extension and raises if it is
missing). Both backends implement:

* ``capsule_sdf(segments, radii, queries) -> (sdf, index)``
* ``points_inside(segments, radii, queries) -> bool mask``
* ``collision_value(segments, radii, queries, scale) -> float``
* ``collision_grad(segments, radii, queries, scale)
  -> (loss, d_queries, d_segments, d_radii)``
"""

from __future__ import annotations

import os

import numpy as np

from . import _ref

_choice = os.environ.get("DUOCAP_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ValueError(f"unrecognized DUOCAP_KERNELS value: {_choice!r}")

_impl = _ref
BACKEND = "python"
if _choice in ("auto", "cython"):
    try:
        from . import _capsule as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _ref


def backend_name() -> str:
    """Name of the active kernel backend ('cython' or 'python')."""
    return BACKEND


def _as_c(arr, shape_hint=None):
    return np.ascontiguousarray(arr, dtype=np.float64)


def capsule_sdf(segments, radii, queries):
    return _impl.capsule_sdf(_as_c(segments), _as_c(radii), _as_c(queries))


def points_inside(segments, radii, queries):
    return _impl.points_inside(_as_c(segments), _as_c(radii), _as_c(queries))


def collision_value(segments, radii, queries, scale):
    return _impl.collision_value(
        _as_c(segments), _as_c(radii), _as_c(queries), float(scale)
    )


def collision_grad(segments, radii, queries, scale):
    return _impl.collision_grad(
        _as_c(segments), _as_c(radii), _as_c(queries), float(scale)
    )
