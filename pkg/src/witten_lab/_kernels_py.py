"""Pure-Python fallback for the compiled grid Dijkstra (same contract as ``_kernels``)."""
import heapq
import math

import numpy as np


def dijkstra_grid(speed, nx, ny, h, scale, sources):
    speed = np.asarray(speed, dtype=float)
    total = nx * ny
    dist = np.full(total, np.inf)
    done = np.zeros(total, dtype=bool)
    if ny == 1:
        steps = [(-1, 0, 1.0), (1, 0, 1.0)]
    else:
        d = math.sqrt(2.0)
        steps = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0), (-1, -1, d), (-1, 1, d), (1, -1, d), (1, 1, d)]
    heap = []
    for p in np.flatnonzero(np.asarray(sources)):
        dist[p] = 0.0
        heap.append((0.0, int(p)))
    heapq.heapify(heap)
    sp = speed.tolist()
    dl = dist  # local alias
    while heap:
        dp, p = heapq.heappop(heap)
        if done[p]:
            continue
        done[p] = True
        i, j = divmod(p, ny)
        for di, dj, length in steps:
            qi, qj = i + di, j + dj
            if qi < 0 or qi >= nx or qj < 0 or qj >= ny:
                continue
            q = qi * ny + qj
            if done[q]:
                continue
            nd = dp + scale * 0.5 * (sp[p] + sp[q]) * length * h
            if nd < dl[q]:
                dl[q] = nd
                heapq.heappush(heap, (nd, q))
    return dist
