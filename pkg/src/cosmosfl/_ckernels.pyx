# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def l1_distance_matrix(const double[:, :, ::1] stack):
    cdef Py_ssize_t n_clients = stack.shape[0]
    cdef Py_ssize_t rows = stack.shape[1]
    cdef Py_ssize_t cols = stack.shape[2]
    cdef Py_ssize_t i, j, r, c
    cdef double acc
    out_arr = np.zeros((n_clients, n_clients), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n_clients):
            for j in range(i + 1, n_clients):
                acc = 0.0
                for r in range(rows):
                    for c in range(cols):
                        acc = acc + fabs(stack[i, r, c] - stack[j, r, c])
                out[i, j] = acc
                out[j, i] = acc
    return out_arr


def greedy_cluster(const double[:, ::1] dist, double b0):
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, j, best, best_count, count, remaining = n
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    centers = []
    cdef long long k = 0
    while remaining > 0:
        best = -1
        best_count = -1
        for i in range(n):
            if labels[i] != -1:
                continue
            count = 0
            for j in range(n):
                if j != i and labels[j] == -1 and dist[i, j] <= b0:
                    count += 1
            if count > best_count:
                best = i
                best_count = count
        for j in range(n):
            if labels[j] == -1 and (j == best or dist[best, j] <= b0):
                labels[j] = -2
        for j in range(n):
            if labels[j] == -2:
                labels[j] = k
                remaining -= 1
        centers.append(best)
        k += 1
    return labels_arr, centers


def argmax_rows(const double[:, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t m = probs.shape[1]
    cdef Py_ssize_t r, c, best
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    with nogil:
        for r in range(n):
            best = 0
            for c in range(1, m):
                if probs[r, c] > probs[r, best]:
                    best = c
            out[r] = best
    return out_arr


def top2_margin(const double[:, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t m = probs.shape[1]
    cdef Py_ssize_t r, c
    cdef double first, second, v
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for r in range(n):
            first = probs[r, 0]
            second = probs[r, 1]
            if second > first:
                first, second = second, first
            for c in range(2, m):
                v = probs[r, c]
                if v > first:
                    second = first
                    first = v
                elif v > second:
                    second = v
            out[r] = first - second
    return out_arr
