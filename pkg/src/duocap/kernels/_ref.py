"""Pure-numpy reference implementation of the capsule kernels.

These are the fallback versions of the routines in ``_capsule.pyx``; both
backends must return bit-compatible shapes and obey the same conventions:

* a capsule is a line segment ``a -> b`` plus a radius, and its signed
  distance at ``q`` is ``dist(q, segment) - radius``,
* the union SDF over a body is the minimum over its capsules (first index
  wins ties, which keeps gradients deterministic),
* penetration is ``max(-sdf, 0)`` and the collision response applies a
  Geman-McClure robustifier ``rho(d) = d^2 s^2 / (d^2 + s^2)``.
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-12


def _closest_params(segments, queries):
    """Clamped projection parameters of queries onto each segment.

    Returns ``t`` with shape (Q, B) and the segment direction vectors.
    """
    a = segments[:, 0]
    ab = segments[:, 1] - a
    denom = np.einsum("bd,bd->b", ab, ab)
    pa = queries[:, None, :] - a[None, :, :]
    t = np.einsum("qbd,bd->qb", pa, ab)
    safe = np.where(denom > _TINY, denom, 1.0)
    t = np.where(denom[None, :] > _TINY, t / safe[None, :], 0.0)
    return np.clip(t, 0.0, 1.0), a, ab


def capsule_sdf(segments, radii, queries):
    """Union signed distance of ``queries`` to a capsule set.

    Parameters
    ----------
    segments : (B, 2, 3) float array
    radii : (B,) float array
    queries : (Q, 3) float array

    Returns
    -------
    sdf : (Q,) float array
    index : (Q,) int array, argmin capsule per query (ties: lowest index).
    """
    t, a, ab = _closest_params(segments, queries)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    diff = queries[:, None, :] - closest
    dist = np.sqrt(np.einsum("qbd,qbd->qb", diff, diff))
    per_capsule = dist - radii[None, :]
    index = np.argmin(per_capsule, axis=1)
    rows = np.arange(queries.shape[0])
    return per_capsule[rows, index], index.astype(np.intp)


def points_inside(segments, radii, queries):
    """Boolean occupancy (union SDF <= 0) for a batch of query points."""
    sdf, _ = capsule_sdf(segments, radii, queries)
    return sdf <= 0.0


def _gm_value(phi, scale):
    s2 = scale * scale
    p2 = phi * phi
    return p2 * s2 / (p2 + s2)


def _gm_slope(phi, scale):
    s2 = scale * scale
    p2 = phi * phi
    return 2.0 * phi * s2 * s2 / ((p2 + s2) ** 2)


def collision_value(segments, radii, queries, scale):
    """Sum of robustified penetrations of ``queries`` into the capsule set."""
    sdf, _ = capsule_sdf(segments, radii, queries)
    phi = np.maximum(-sdf, 0.0)
    return float(_gm_value(phi, scale).sum())


def collision_grad(segments, radii, queries, scale):
    """Forward + backward pass of :func:`collision_value`.

    Returns ``(loss, d_queries, d_segments, d_radii)`` where the gradients
    are with respect to the query points, segment endpoints and radii.
    """
    t, a, ab = _closest_params(segments, queries)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    diff = queries[:, None, :] - closest
    dist = np.sqrt(np.einsum("qbd,qbd->qb", diff, diff))
    per_capsule = dist - radii[None, :]
    index = np.argmin(per_capsule, axis=1)
    rows = np.arange(queries.shape[0])
    sdf = per_capsule[rows, index]

    phi = np.maximum(-sdf, 0.0)
    loss = float(_gm_value(phi, scale).sum())

    d_queries = np.zeros_like(queries)
    d_segments = np.zeros_like(segments)
    d_radii = np.zeros_like(radii)

    active = phi > 0.0
    if np.any(active):
        qa = rows[active]
        ka = index[active]
        # d loss / d sdf = -rho'(phi)
        gsd = -_gm_slope(phi[active], scale)
        da = dist[qa, ka]
        safe = np.where(da > _TINY, da, 1.0)
        unit = diff[qa, ka] / safe[:, None]
        unit[da <= _TINY] = 0.0
        ta = t[qa, ka]
        d_queries[qa] = gsd[:, None] * unit
        np.add.at(d_segments, (ka, 0), -gsd[:, None] * (1.0 - ta)[:, None] * unit)
        np.add.at(d_segments, (ka, 1), -gsd[:, None] * ta[:, None] * unit)
        np.add.at(d_radii, ka, -gsd)
    return loss, d_queries, d_segments, d_radii
