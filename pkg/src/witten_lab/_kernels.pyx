# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled multi-source Dijkstra on the 1D (2-neighbour) and 2D (8-neighbour) node grid."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef struct Item:
    double key
    Py_ssize_t node


cdef inline void _push(Item* heap, Py_ssize_t* size, double key, Py_ssize_t node) noexcept nogil:
    cdef Py_ssize_t i = size[0]
    cdef Py_ssize_t parent
    size[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if heap[parent].key <= key:
            break
        heap[i] = heap[parent]
        i = parent
    heap[i].key = key
    heap[i].node = node


cdef inline Item _pop(Item* heap, Py_ssize_t* size) noexcept nogil:
    cdef Item top = heap[0]
    cdef Item last
    cdef Py_ssize_t i = 0, child, n
    size[0] -= 1
    n = size[0]
    if n > 0:
        last = heap[n]
        while True:
            child = 2 * i + 1
            if child >= n:
                break
            if child + 1 < n and heap[child + 1].key < heap[child].key:
                child += 1
            if heap[child].key >= last.key:
                break
            heap[i] = heap[child]
            i = child
        heap[i] = last
    return top


def dijkstra_grid(double[::1] speed, Py_ssize_t nx, Py_ssize_t ny, double h, double scale, cnp.uint8_t[::1] sources):
    """Distances from the source nodes; edge (p,q) costs scale*(speed[p]+speed[q])/2*|p-q|.

    Nodes are indexed i*ny + j.  ny == 1 selects the 1D two-neighbour stencil.
    """
    cdef Py_ssize_t total = nx * ny
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist_arr = np.full(total, np.inf)
    cdef double[::1] dist = dist_arr
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] done_arr = np.zeros(total, dtype=np.uint8)
    cdef cnp.uint8_t[::1] done = done_arr
    # lazy deletion: each relaxation may push, bounded by 8 pushes per node
    cdef Py_ssize_t cap = 9 * total + 1
    cdef cnp.ndarray heap_arr = np.empty(cap * sizeof(Item), dtype=np.uint8)
    cdef Item* heap = <Item*> cnp.PyArray_DATA(heap_arr)
    cdef Py_ssize_t size = 0
    cdef Py_ssize_t p, q, i, j, qi, qj, k
    cdef int ndir
    cdef int di[8]
    cdef int dj[8]
    cdef double dl[8]
    cdef double nd, diag = sqrt(2.0)
    cdef Item it
    if ny == 1:
        ndir = 2
        di[0] = -1; dj[0] = 0; dl[0] = 1.0
        di[1] = 1; dj[1] = 0; dl[1] = 1.0
    else:
        ndir = 8
        di[0] = -1; dj[0] = 0; dl[0] = 1.0
        di[1] = 1; dj[1] = 0; dl[1] = 1.0
        di[2] = 0; dj[2] = -1; dl[2] = 1.0
        di[3] = 0; dj[3] = 1; dl[3] = 1.0
        di[4] = -1; dj[4] = -1; dl[4] = diag
        di[5] = -1; dj[5] = 1; dl[5] = diag
        di[6] = 1; dj[6] = -1; dl[6] = diag
        di[7] = 1; dj[7] = 1; dl[7] = diag
    with nogil:
        for p in range(total):
            if sources[p]:
                dist[p] = 0.0
                _push(heap, &size, 0.0, p)
        while size > 0:
            it = _pop(heap, &size)
            p = it.node
            if done[p]:
                continue
            done[p] = 1
            i = p // ny
            j = p - i * ny
            for k in range(ndir):
                qi = i + di[k]
                qj = j + dj[k]
                if qi < 0 or qi >= nx or qj < 0 or qj >= ny:
                    continue
                q = qi * ny + qj
                if done[q]:
                    continue
                nd = dist[p] + scale * 0.5 * (speed[p] + speed[q]) * dl[k] * h
                if nd < dist[q]:
                    dist[q] = nd
                    _push(heap, &size, nd, q)
    return dist_arr
