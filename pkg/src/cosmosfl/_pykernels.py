"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def l1_distance_matrix(stack):
    stack = np.asarray(stack, dtype=np.float64)
    n_clients = stack.shape[0]
    flat = stack.reshape(n_clients, -1)
    out = np.zeros((n_clients, n_clients), dtype=np.float64)
    for i in range(n_clients):
        for j in range(i + 1, n_clients):
            acc = float(np.abs(flat[i] - flat[j]).sum())
            out[i, j] = acc
            out[j, i] = acc
    return out


def greedy_cluster(dist, b0):
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    close = dist <= b0
    np.fill_diagonal(close, False)
    centers = []
    k = 0
    while (labels == -1).any():
        free = labels == -1
        counts = np.where(free, (close & free[None, :]).sum(axis=1), -1)
        # np.argmax returns the first maximum, i.e. the lowest client index
        best = int(np.argmax(counts))
        members = free & (close[best] | (np.arange(n) == best))
        labels[members] = k
        centers.append(best)
        k += 1
    return labels, centers


def argmax_rows(probs):
    return np.argmax(np.asarray(probs, dtype=np.float64), axis=1).astype(np.int64)


def top2_margin(probs):
    probs = np.asarray(probs, dtype=np.float64)
    top2 = -np.partition(-probs, 1, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]
