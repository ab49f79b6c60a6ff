# cython: language_level=3
"""Compiled capsule kernels (signed distance + robust collision response).

Mirrors ``duocap.kernels._ref``; see that module for the conventions. The
loops are sequential on purpose: summation order must not depend on thread
count so that pipeline outputs stay byte-identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double TINY = 1e-12


cdef inline double _clamp01(double x) nogil:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


def capsule_sdf(double[:, :, ::1] segments, double[::1] radii,
                double[:, ::1] queries):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t nb = segments.shape[0]
    sdf_arr = np.empty(nq, dtype=np.float64)
    idx_arr = np.empty(nq, dtype=np.intp)
    cdef double[::1] sdf = sdf_arr
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef Py_ssize_t q, b, best
    cdef double ax, ay, az, bx, by, bz, dx, dy, dz
    cdef double px, py, pz, t, denom, cx, cy, cz, d, val, bestval
    for q in range(nq):
        px = queries[q, 0]
        py = queries[q, 1]
        pz = queries[q, 2]
        bestval = 0.0
        best = 0
        for b in range(nb):
            ax = segments[b, 0, 0]
            ay = segments[b, 0, 1]
            az = segments[b, 0, 2]
            dx = segments[b, 1, 0] - ax
            dy = segments[b, 1, 1] - ay
            dz = segments[b, 1, 2] - az
            denom = dx * dx + dy * dy + dz * dz
            if denom > TINY:
                t = _clamp01(((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / denom)
            else:
                t = 0.0
            cx = px - (ax + t * dx)
            cy = py - (ay + t * dy)
            cz = pz - (az + t * dz)
            d = sqrt(cx * cx + cy * cy + cz * cz)
            val = d - radii[b]
            if b == 0 or val < bestval:
                bestval = val
                best = b
        sdf[q] = bestval
        idx[q] = best
    return sdf_arr, idx_arr


def points_inside(double[:, :, ::1] segments, double[::1] radii,
                  double[:, ::1] queries):
    sdf, _ = capsule_sdf(segments, radii, queries)
    return sdf <= 0.0


def collision_value(double[:, :, ::1] segments, double[::1] radii,
                    double[:, ::1] queries, double scale):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t nb = segments.shape[0]
    cdef Py_ssize_t q, b
    cdef double ax, ay, az, dx, dy, dz, px, py, pz
    cdef double t, denom, cx, cy, cz, d, val, bestval, phi, s2, p2
    cdef double loss = 0.0
    s2 = scale * scale
    for q in range(nq):
        px = queries[q, 0]
        py = queries[q, 1]
        pz = queries[q, 2]
        bestval = 0.0
        for b in range(nb):
            ax = segments[b, 0, 0]
            ay = segments[b, 0, 1]
            az = segments[b, 0, 2]
            dx = segments[b, 1, 0] - ax
            dy = segments[b, 1, 1] - ay
            dz = segments[b, 1, 2] - az
            denom = dx * dx + dy * dy + dz * dz
            if denom > TINY:
                t = _clamp01(((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / denom)
            else:
                t = 0.0
            cx = px - (ax + t * dx)
            cy = py - (ay + t * dy)
            cz = pz - (az + t * dz)
            d = sqrt(cx * cx + cy * cy + cz * cz)
            val = d - radii[b]
            if b == 0 or val < bestval:
                bestval = val
        if bestval < 0.0:
            phi = -bestval
            p2 = phi * phi
            loss += p2 * s2 / (p2 + s2)
    return loss


def collision_grad(double[:, :, ::1] segments, double[::1] radii,
                   double[:, ::1] queries, double scale):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t nb = segments.shape[0]
    dq_arr = np.zeros((nq, 3), dtype=np.float64)
    ds_arr = np.zeros((nb, 2, 3), dtype=np.float64)
    dr_arr = np.zeros(nb, dtype=np.float64)
    cdef double[:, ::1] dq = dq_arr
    cdef double[:, :, ::1] ds = ds_arr
    cdef double[::1] dr = dr_arr
    cdef Py_ssize_t q, b, best
    cdef double ax, ay, az, dx, dy, dz, px, py, pz
    cdef double t, denom, cx, cy, cz, d, val, bestval, bestt, bestd
    cdef double bcx, bcy, bcz, phi, s2, p2, slope, gsd, ux, uy, uz, w
    cdef double loss = 0.0
    s2 = scale * scale
    for q in range(nq):
        px = queries[q, 0]
        py = queries[q, 1]
        pz = queries[q, 2]
        bestval = 0.0
        bestt = 0.0
        bestd = 0.0
        bcx = bcy = bcz = 0.0
        best = 0
        for b in range(nb):
            ax = segments[b, 0, 0]
            ay = segments[b, 0, 1]
            az = segments[b, 0, 2]
            dx = segments[b, 1, 0] - ax
            dy = segments[b, 1, 1] - ay
            dz = segments[b, 1, 2] - az
            denom = dx * dx + dy * dy + dz * dz
            if denom > TINY:
                t = _clamp01(((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / denom)
            else:
                t = 0.0
            cx = px - (ax + t * dx)
            cy = py - (ay + t * dy)
            cz = pz - (az + t * dz)
            d = sqrt(cx * cx + cy * cy + cz * cz)
            val = d - radii[b]
            if b == 0 or val < bestval:
                bestval = val
                best = b
                bestt = t
                bestd = d
                bcx = cx
                bcy = cy
                bcz = cz
        if bestval < 0.0:
            phi = -bestval
            p2 = phi * phi
            loss += p2 * s2 / (p2 + s2)
            slope = 2.0 * phi * s2 * s2 / ((p2 + s2) * (p2 + s2))
            gsd = -slope
            if bestd > TINY:
                ux = bcx / bestd
                uy = bcy / bestd
                uz = bcz / bestd
            else:
                ux = uy = uz = 0.0
            dq[q, 0] += gsd * ux
            dq[q, 1] += gsd * uy
            dq[q, 2] += gsd * uz
            w = -gsd * (1.0 - bestt)
            ds[best, 0, 0] += w * ux
            ds[best, 0, 1] += w * uy
            ds[best, 0, 2] += w * uz
            w = -gsd * bestt
            ds[best, 1, 0] += w * ux
            ds[best, 1, 1] += w * uy
            ds[best, 1, 2] += w * uz
            dr[best] += -gsd
    return loss, dq_arr, ds_arr, dr_arr
