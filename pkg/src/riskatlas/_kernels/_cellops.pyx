# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-cell indicator kernel.

Same contract as the NumPy fallback (pyops.cell_indicators): one pass
over each probability row computes set sizes, worst status, per-status
shares, the threat sum and Shannon entropy for both status views. The
hot loop runs without the GIL so row strips can be processed by thread
pools.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport log, NAN

cnp.import_array()

BACKEND_NAME = "cython"

cdef int N_STATUS = 5


def cell_indicators(probs, double lam, allowed, merged_codes, assessed_codes):
    """See pyops.cell_indicators; identical semantics, compiled loop."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] allow = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int8_t, ndim=1, mode="c"] mc = np.ascontiguousarray(merged_codes, dtype=np.int8)
    cdef cnp.ndarray[cnp.int8_t, ndim=1, mode="c"] ac = np.ascontiguousarray(assessed_codes, dtype=np.int8)
    cdef Py_ssize_t b = p.shape[0]
    cdef Py_ssize_t c = p.shape[1]
    if allow.shape[0] != b or allow.shape[1] != c:
        raise ValueError("allowed mask shape does not match probs")
    if mc.shape[0] != c or ac.shape[0] != c:
        raise ValueError("status code arrays must have length C")

    cdef cnp.ndarray[cnp.int32_t, ndim=1] size_raw = np.zeros(b, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] size = np.zeros(b, dtype=np.int32)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] io = np.full(b, -1, dtype=np.int8)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] io_a = np.full(b, -1, dtype=np.int8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ic = np.empty((b, N_STATUS), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ic_a = np.empty((b, N_STATUS), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] threat = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] threat_a = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] h = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] h_a = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] n_missing = np.zeros(b, dtype=np.int32)

    cdef Py_ssize_t i, k
    cdef int sraw, scnt, scnt_a, nmiss, code, code_a, worst, worst_a, j
    cdef double pv, lp, s1, s2, s1a, s2a, denom, denom_a, val
    cdef double num[5]
    cdef double num_a[5]

    with nogil:
        for i in range(b):
            sraw = 0
            scnt = 0
            scnt_a = 0
            nmiss = 0
            worst = -1
            worst_a = -1
            s1 = 0.0
            s2 = 0.0
            s1a = 0.0
            s2a = 0.0
            for j in range(N_STATUS):
                num[j] = 0.0
                num_a[j] = 0.0
            for k in range(c):
                pv = p[i, k]
                if pv >= lam:
                    sraw += 1
                    if allow[i, k]:
                        scnt += 1
                        s1 += pv
                        lp = log(pv) if pv > 0.0 else 0.0
                        s2 += pv * lp
                        code = mc[k]
                        if code >= 0:
                            num[code] += pv
                            if code > worst:
                                worst = code
                        else:
                            nmiss += 1
                        code_a = ac[k]
                        if code_a >= 0:
                            scnt_a += 1
                            num_a[code_a] += pv
                            s1a += pv
                            s2a += pv * lp
                            if code_a > worst_a:
                                worst_a = code_a
            size_raw[i] = sraw
            size[i] = scnt
            n_missing[i] = nmiss
            if scnt == 0:
                io[i] = -1
                io_a[i] = -1
                for j in range(N_STATUS):
                    ic[i, j] = NAN
                    ic_a[i, j] = NAN
                threat[i] = NAN
                threat_a[i] = NAN
                h[i] = NAN
                h_a[i] = NAN
                continue
            denom = ((num[0] + num[1]) + (num[2] + num[3])) + num[4]
            denom_a = ((num_a[0] + num_a[1]) + (num_a[2] + num_a[3])) + num_a[4]
            io[i] = <cnp.int8_t> worst
            io_a[i] = <cnp.int8_t> worst_a
            if denom > 0.0:
                for j in range(N_STATUS):
                    ic[i, j] = num[j] / denom
                threat[i] = (ic[i, 2] + ic[i, 3]) + ic[i, 4]
            else:
                io[i] = -1
                for j in range(N_STATUS):
                    ic[i, j] = NAN
                threat[i] = NAN
            if denom_a > 0.0:
                for j in range(N_STATUS):
                    ic_a[i, j] = num_a[j] / denom_a
                threat_a[i] = (ic_a[i, 2] + ic_a[i, 3]) + ic_a[i, 4]
            else:
                io_a[i] = -1
                for j in range(N_STATUS):
                    ic_a[i, j] = NAN
                threat_a[i] = NAN
            if scnt == 1:
                h[i] = 0.0
            else:
                val = log(s1) - s2 / s1
                h[i] = val if val > 0.0 else 0.0
            if scnt_a == 0:
                h_a[i] = NAN
            elif scnt_a == 1:
                h_a[i] = 0.0
            else:
                val = log(s1a) - s2a / s1a
                h_a[i] = val if val > 0.0 else 0.0

    return {
        "size_raw": size_raw,
        "size": size,
        "io": io,
        "ic": ic,
        "threat": threat,
        "h": h,
        "io_iucn": io_a,
        "ic_iucn": ic_a,
        "threat_iucn": threat_a,
        "h_iucn": h_a,
        "n_missing": n_missing,
    }
