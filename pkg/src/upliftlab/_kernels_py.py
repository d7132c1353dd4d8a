"""Pure-Python allocation kernels (fallback for the compiled ``_kernels``).

Both implementations perform the same floating-point operations in the same
order, so results are bit-identical whichever one is loaded.
"""
import numpy as np


def upgrade_chains(cost, reward):
    """Concave upgrade chain of every individual.

    ``cost`` and ``reward`` are (N, A) expected incremental values relative to
    arm 0 (column 0 is ignored and taken as the origin). Starting from arm 0,
    each step moves to the arm with the steepest positive reward/cost slope
    among arms that cost strictly more than the current one.

    Returns ``(ind, to_arm, d_cost, d_reward)`` ordered by individual, then
    step.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    reward = np.ascontiguousarray(reward, dtype=np.float64)
    n, a = cost.shape
    ind, to_arm, d_cost, d_reward = [], [], [], []
    for i in range(n):
        cc = 0.0
        cr = 0.0
        while True:
            best = -1
            best_slope = 0.0
            for t in range(1, a):
                dc = cost[i, t] - cc
                if dc <= 0.0:
                    continue
                slope = (reward[i, t] - cr) / dc
                if slope > best_slope:
                    best_slope = slope
                    best = t
            if best < 0:
                break
            ind.append(i)
            to_arm.append(best)
            d_cost.append(cost[i, best] - cc)
            d_reward.append(reward[i, best] - cr)
            cc = cost[i, best]
            cr = reward[i, best]
    return (
        np.asarray(ind, dtype=np.int64),
        np.asarray(to_arm, dtype=np.int64),
        np.asarray(d_cost, dtype=np.float64),
        np.asarray(d_reward, dtype=np.float64),
    )


def ras_sweep(ind, to_arm, d_cost, n, t_rct, c, r, budgets):
    """Apply ROI-ordered upgrades under increasing budgets.

    For every budget, record the number of treated individuals, plus count,
    cost sum and reward sum over (a) rows whose randomised arm is > 0 and
    equals the allocated arm and (b) randomised-control rows the allocation
    treats. Upgrades stop at the first one that would overshoot the budget.

    Returns an (n_budgets, 7) array with columns
    ``n_alloc, n_match, c_match, r_match, n_ctl, c_ctl, r_ctl``.
    """
    arm = np.zeros(n, dtype=np.int64)
    nb = len(budgets)
    out = np.zeros((nb, 7))
    spend = 0.0
    na = 0
    nm = 0
    sc = 0.0
    sr = 0.0
    nc = 0
    cc = 0.0
    cr = 0.0
    j = 0
    for u in range(len(ind)):
        dc = d_cost[u]
        while j < nb and spend + dc > budgets[j]:
            out[j] = (na, nm, sc, sr, nc, cc, cr)
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
        out[j] = (na, nm, sc, sr, nc, cc, cr)
        j += 1
    return out
