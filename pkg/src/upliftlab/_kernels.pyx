# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled allocation kernels. Mirrors ``_kernels_py`` operation for operation."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def upgrade_chains(cost, reward):
    cdef double[:, ::1] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(reward, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], a = C.shape[1]
    cdef Py_ssize_t cap = n * (a - 1) if a > 1 else 0
    ind_arr = np.empty(cap, dtype=np.int64)
    arm_arr = np.empty(cap, dtype=np.int64)
    dc_arr = np.empty(cap, dtype=np.float64)
    dr_arr = np.empty(cap, dtype=np.float64)
    cdef long long[::1] ind = ind_arr
    cdef long long[::1] to_arm = arm_arr
    cdef double[::1] d_cost = dc_arr
    cdef double[::1] d_reward = dr_arr
    cdef Py_ssize_t i, t, best, k = 0
    cdef double cc, cr, dc, slope, best_slope
    for i in range(n):
        cc = 0.0
        cr = 0.0
        while True:
            best = -1
            best_slope = 0.0
            for t in range(1, a):
                dc = C[i, t] - cc
                if dc <= 0.0:
                    continue
                slope = (R[i, t] - cr) / dc
                if slope > best_slope:
                    best_slope = slope
                    best = t
            if best < 0:
                break
            ind[k] = i
            to_arm[k] = best
            d_cost[k] = C[i, best] - cc
            d_reward[k] = R[i, best] - cr
            k += 1
            cc = C[i, best]
            cr = R[i, best]
    return ind_arr[:k].copy(), arm_arr[:k].copy(), dc_arr[:k].copy(), dr_arr[:k].copy()


def ras_sweep(ind_in, to_arm_in, d_cost_in, Py_ssize_t n, t_rct_in, c_in, r_in, budgets_in):
    cdef long long[::1] ind = np.ascontiguousarray(ind_in, dtype=np.int64)
    cdef long long[::1] to_arm = np.ascontiguousarray(to_arm_in, dtype=np.int64)
    cdef double[::1] d_cost = np.ascontiguousarray(d_cost_in, dtype=np.float64)
    cdef long long[::1] t_rct = np.ascontiguousarray(t_rct_in, dtype=np.int64)
    cdef double[::1] c = np.ascontiguousarray(c_in, dtype=np.float64)
    cdef double[::1] r = np.ascontiguousarray(r_in, dtype=np.float64)
    cdef double[::1] budgets = np.ascontiguousarray(budgets_in, dtype=np.float64)
    cdef Py_ssize_t nb = budgets.shape[0], nu = ind.shape[0]
    arm_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] arm = arm_arr
    out_arr = np.zeros((nb, 7), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double spend = 0.0, sc = 0.0, sr = 0.0, cc = 0.0, cr = 0.0, dc
    cdef long long na = 0, nm = 0, nc = 0, tr
    cdef Py_ssize_t j = 0, u, i
    for u in range(nu):
        dc = d_cost[u]
        while j < nb and spend + dc > budgets[j]:
            _record(out, j, na, nm, sc, sr, nc, cc, cr)
            j += 1
        if j == nb:
            break
        i = ind[u]
        tr = t_rct[i]
        if arm[i] == 0:
            na += 1
            if tr == 0:
                nc += 1
                cc += c[i]
                cr += r[i]
        if tr > 0:
            if tr == arm[i]:
                nm -= 1
                sc -= c[i]
                sr -= r[i]
            if tr == to_arm[u]:
                nm += 1
                sc += c[i]
                sr += r[i]
        arm[i] = to_arm[u]
        spend += dc
    while j < nb:
        _record(out, j, na, nm, sc, sr, nc, cc, cr)
        j += 1
    return out_arr


cdef inline void _record(double[:, ::1] out, Py_ssize_t j, long long na, long long nm,
                         double sc, double sr, long long nc, double cc, double cr) noexcept:
    out[j, 0] = na
    out[j, 1] = nm
    out[j, 2] = sc
    out[j, 3] = sr
    out[j, 4] = nc
    out[j, 5] = cc
    out[j, 6] = cr
