# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled HNSW traversal kernels.

Same contract as _kernels_py: distances are negated dot products,
(distance, id) ordering everywhere, strict admission against the worst
retained candidate. Dot products accumulate in double precision, so
distances can differ from the numpy float32 path in the last ulps; each
backend is deterministic on its own.
"""

import numpy as np

BACKEND = "compiled"


cdef inline double _dot_q(const float[:, ::1] vectors, Py_ssize_t row, const float[::1] query) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(query.shape[0]):
        acc += <double> vectors[row, i] * <double> query[i]
    return acc


cdef inline double _dot_rows(const float[:, ::1] vectors, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(vectors.shape[1]):
        acc += <double> vectors[a, i] * <double> vectors[b, i]
    return acc


cdef inline bint _before(double da, int ia, double db, int ib) noexcept nogil:
    # (distance, id) lexicographic less-than
    if da != db:
        return da < db
    return ia < ib


cdef inline bint _after(double da, int ia, double db, int ib) noexcept nogil:
    # ordering for the max-heap: larger distance on top, ties -> smaller id,
    # mirroring a Python heap of (-distance, id) tuples
    if da != db:
        return da > db
    return ia < ib


cdef void _min_push(double* hd, int* hi, int* size, double d, int ident) noexcept nogil:
    cdef int i = size[0]
    cdef int parent
    cdef double td
    cdef int ti
    hd[i] = d
    hi[i] = ident
    size[0] = i + 1
    while i > 0:
        parent = (i - 1) >> 1
        if _before(hd[i], hi[i], hd[parent], hi[parent]):
            td = hd[i]; hd[i] = hd[parent]; hd[parent] = td
            ti = hi[i]; hi[i] = hi[parent]; hi[parent] = ti
            i = parent
        else:
            break


cdef void _min_pop(double* hd, int* hi, int* size) noexcept nogil:
    cdef int n = size[0] - 1
    cdef int i = 0
    cdef int child
    cdef double td
    cdef int ti
    hd[0] = hd[n]
    hi[0] = hi[n]
    size[0] = n
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _before(hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _before(hd[child], hi[child], hd[i], hi[i]):
            td = hd[i]; hd[i] = hd[child]; hd[child] = td
            ti = hi[i]; hi[i] = hi[child]; hi[child] = ti
            i = child
        else:
            break


cdef void _max_push(double* hd, int* hi, int* size, double d, int ident) noexcept nogil:
    cdef int i = size[0]
    cdef int parent
    cdef double td
    cdef int ti
    hd[i] = d
    hi[i] = ident
    size[0] = i + 1
    while i > 0:
        parent = (i - 1) >> 1
        if _after(hd[i], hi[i], hd[parent], hi[parent]):
            td = hd[i]; hd[i] = hd[parent]; hd[parent] = td
            ti = hi[i]; hi[i] = hi[parent]; hi[parent] = ti
            i = parent
        else:
            break


cdef void _max_pop(double* hd, int* hi, int* size) noexcept nogil:
    cdef int n = size[0] - 1
    cdef int i = 0
    cdef int child
    cdef double td
    cdef int ti
    hd[0] = hd[n]
    hi[0] = hi[n]
    size[0] = n
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _after(hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _after(hd[child], hi[child], hd[i], hi[i]):
            td = hd[i]; hd[i] = hd[child]; hd[child] = td
            ti = hi[i]; hi[i] = hi[child]; hi[child] = ti
            i = child
        else:
            break


def search_layer(const float[:, ::1] vectors, const int[:, ::1] neigh, const int[::1] counts,
                 const float[::1] query, const int[::1] entry_ids, int ef):
    """Best-first search of one graph layer; see the Python kernel."""
    cdef Py_ssize_t n = vectors.shape[0]
    cdef int n_entries = entry_ids.shape[0]
    cdef int best_cap = ef if ef > n_entries else n_entries
    best_cap += 1

    visited_arr = np.zeros(n, dtype=np.uint8)
    cand_d_arr = np.empty(n + 1, dtype=np.float64)
    cand_i_arr = np.empty(n + 1, dtype=np.int32)
    best_d_arr = np.empty(best_cap, dtype=np.float64)
    best_i_arr = np.empty(best_cap, dtype=np.int32)

    cdef unsigned char[::1] visited = visited_arr
    cdef double[::1] cand_d = cand_d_arr
    cdef int[::1] cand_i = cand_i_arr
    cdef double[::1] best_d = best_d_arr
    cdef int[::1] best_i = best_i_arr

    cdef int cand_size = 0
    cdef int best_size = 0
    cdef int i, eid, current, nid, cnt
    cdef double d, nd, worst

    with nogil:
        for i in range(n_entries):
            eid = entry_ids[i]
            if visited[eid]:
                continue
            visited[eid] = 1
            d = -_dot_q(vectors, eid, query)
            _min_push(&cand_d[0], &cand_i[0], &cand_size, d, eid)
            _max_push(&best_d[0], &best_i[0], &best_size, d, eid)
        while best_size > ef:
            _max_pop(&best_d[0], &best_i[0], &best_size)

        while cand_size > 0:
            d = cand_d[0]
            current = cand_i[0]
            _min_pop(&cand_d[0], &cand_i[0], &cand_size)
            if best_size >= ef and d > best_d[0]:
                break
            cnt = counts[current]
            for i in range(cnt):
                nid = neigh[current, i]
                if visited[nid]:
                    continue
                visited[nid] = 1
                nd = -_dot_q(vectors, nid, query)
                if best_size < ef:
                    _min_push(&cand_d[0], &cand_i[0], &cand_size, nd, nid)
                    _max_push(&best_d[0], &best_i[0], &best_size, nd, nid)
                elif nd < best_d[0]:
                    _min_push(&cand_d[0], &cand_i[0], &cand_size, nd, nid)
                    _max_pop(&best_d[0], &best_i[0], &best_size)
                    _max_push(&best_d[0], &best_i[0], &best_size, nd, nid)

    out_ids = best_i_arr[:best_size].copy()
    out_dists = best_d_arr[:best_size].copy()
    order = np.lexsort((out_ids, out_dists))
    return out_ids[order].astype(np.int32), out_dists[order]


def select_neighbors(const float[:, ::1] vectors, const int[::1] ids, const double[::1] dists, int m):
    """Diversity-aware selection; see the Python kernel for the contract."""
    cdef int ncand = ids.shape[0]
    if ncand <= m:
        return np.asarray(ids, dtype=np.int32).copy()

    sel_arr = np.empty(m, dtype=np.int32)
    dis_arr = np.empty(ncand, dtype=np.int32)
    cdef int[::1] sel = sel_arr
    cdef int[::1] dis = dis_arr
    cdef int nsel = 0
    cdef int ndis = 0
    cdef int idx, j, e
    cdef double de, dmin, dd

    with nogil:
        for idx in range(ncand):
            if nsel == m:
                break
            e = ids[idx]
            de = dists[idx]
            if nsel == 0:
                sel[0] = e
                nsel = 1
                continue
            dmin = -_dot_rows(vectors, sel[0], e)
            for j in range(1, nsel):
                dd = -_dot_rows(vectors, sel[j], e)
                if dd < dmin:
                    dmin = dd
            if de < dmin:
                sel[nsel] = e
                nsel += 1
            else:
                dis[ndis] = e
                ndis += 1
        for idx in range(ndis):
            if nsel == m:
                break
            sel[nsel] = dis[idx]
            nsel += 1

    return sel_arr[:nsel].copy()
