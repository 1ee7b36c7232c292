# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the hot kernels; mirrors ``pure`` semantics."""

from libc.math cimport cos, sin, fabs, exp, log, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

DEF UNSET = -2
DEF NOISE = -1


def _canonical_labels(cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = labels.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] remap
    cdef Py_ssize_t i
    cdef cnp.int64_t lab, next_id = 0
    cdef cnp.int64_t max_lab = -1
    for i in range(n):
        if labels[i] > max_lab:
            max_lab = labels[i]
    remap = np.full(max_lab + 1 if max_lab >= 0 else 0, -1, dtype=np.int64)
    for i in range(n):
        lab = labels[i]
        if lab >= 0:
            if remap[lab] < 0:
                remap[lab] = next_id
                next_id += 1
            out[i] = remap[lab]
    return out


def dbscan_labels(double[:, ::1] points, double eps, long min_pts):
    """Classic DBSCAN on 3D points; identical conventions to the pure backend
    (index-ordered seeds, FIFO expansion, clusters renumbered by smallest
    member index, noise = -1)."""
    cdef Py_ssize_t n = points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    cdef double eps2 = eps * eps
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] adj_arr = np.zeros((n, n), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] adj = adj_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] degree_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] degree = degree_arr
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d2
    for i in range(n):
        adj[i, i] = 1
        degree[i] += 1
        for j in range(i + 1, n):
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 <= eps2:
                adj[i, j] = 1
                adj[j, i] = 1
                degree[i] += 1
                degree[j] += 1

    cdef cnp.ndarray[cnp.int64_t, ndim=1] labels_arr = np.full(n, UNSET, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] queue_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr
    cdef Py_ssize_t head, tail
    cdef cnp.int64_t cluster = 0
    cdef Py_ssize_t k
    for i in range(n):
        if labels[i] != UNSET:
            continue
        if degree[i] < min_pts:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        queue[0] = i
        head = 0
        tail = 1
        while head < tail:
            k = <Py_ssize_t> queue[head]
            head += 1
            if degree[k] < min_pts:
                continue  # border point: claimed but not expanded
            for j in range(n):
                if adj[k, j]:
                    if labels[j] == NOISE:
                        labels[j] = cluster
                    elif labels[j] == UNSET:
                        labels[j] = cluster
                        queue[tail] = j
                        tail += 1
        cluster += 1
    return _canonical_labels(labels)


def points_in_box_count(double[:, ::1] points, center, dims, double yaw):
    cdef double cx = center[0], cy = center[1], cz = center[2]
    cdef double hx = dims[0] / 2.0, hy = dims[1] / 2.0, hz = dims[2] / 2.0
    cdef double c = cos(yaw), s = sin(yaw)
    cdef Py_ssize_t i, n = points.shape[0]
    cdef double rx, ry, rz, lx, ly
    cdef long count = 0
    for i in range(n):
        rx = points[i, 0] - cx
        ry = points[i, 1] - cy
        rz = points[i, 2] - cz
        lx = c * rx + s * ry
        ly = -s * rx + c * ry
        if fabs(lx) <= hx and fabs(ly) <= hy and fabs(rz) <= hz:
            count += 1
    return count


def supcon_loss_grad(double[:, ::1] z, cnp.int64_t[::1] labels, double tau,
                     bint apply_log=True):
    """Supervised-contrastive loss and gradient w.r.t. the embeddings.

    Same definition as the pure backend: mean over anchors with positives,
    row-max-subtracted log-sum-exp denominators, optional plain-ratio
    variant when apply_log is False. The two O(n^2 d) matrix products go
    through BLAS; the O(n^2) softmax and gradient-coefficient assembly runs
    as C loops.
    """
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] z_arr = np.asarray(z)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s_arr = z_arr @ z_arr.T
    cdef double[:, ::1] s = s_arr
    cdef Py_ssize_t i, j
    cdef double inv_tau = 1.0 / tau

    cdef cnp.ndarray[cnp.int64_t, ndim=1] npos_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] n_pos = npos_arr
    cdef long n_anchors = 0
    for i in range(n):
        for j in range(n):
            s[i, j] *= inv_tau
            if j != i and labels[j] == labels[i]:
                n_pos[i] += 1
        if n_pos[i] > 0:
            n_anchors += 1
    if n_anchors == 0:
        return 0.0, np.zeros((n, d), dtype=np.float64), 0

    cdef cnp.ndarray[cnp.float64_t, ndim=2] g_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef double m, denom, sigma, loss = 0.0, per_anchor, ratio_sum, log_denom, pinv
    for i in range(n):
        if n_pos[i] == 0:
            continue
        m = -INFINITY
        for j in range(n):
            if j != i and s[i, j] > m:
                m = s[i, j]
        denom = 0.0
        for j in range(n):
            if j != i:
                denom += exp(s[i, j] - m)
        pinv = 1.0 / <double> n_pos[i]
        if apply_log:
            log_denom = m + log(denom)
            per_anchor = log_denom
            for j in range(n):
                if j != i and labels[j] == labels[i]:
                    per_anchor -= s[i, j] * pinv
            for j in range(n):
                if j == i:
                    continue
                sigma = exp(s[i, j] - m) / denom
                if labels[j] == labels[i]:
                    g[i, j] = sigma - pinv
                else:
                    g[i, j] = sigma
        else:
            ratio_sum = 0.0
            for j in range(n):
                if j != i and labels[j] == labels[i]:
                    ratio_sum += exp(s[i, j] - m) / denom
            per_anchor = -ratio_sum * pinv
            for j in range(n):
                if j == i:
                    continue
                sigma = exp(s[i, j] - m) / denom
                if labels[j] == labels[i]:
                    g[i, j] = -(sigma * pinv) * (1.0 - ratio_sum)
                else:
                    g[i, j] = (sigma * pinv) * ratio_sum
        loss += per_anchor
    loss /= <double> n_anchors

    cdef double scale = 1.0 / (<double> n_anchors * tau)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad_arr = \
        (g_arr @ z_arr + g_arr.T @ z_arr) * scale
    return loss, grad_arr, <int> n_anchors


def rank_stats(rel):
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] r = np.ascontiguousarray(rel, dtype=np.uint8)
    cdef Py_ssize_t i, n = r.shape[0]
    cdef long hits = 0
    cdef long first = 0
    cdef double ap = 0.0
    for i in range(n):
        if r[i]:
            hits += 1
            if first == 0:
                first = i + 1
            ap += (<double> hits) / (<double> (i + 1))
    if hits == 0:
        return 0.0, 0
    return ap / <double> hits, <int> first
