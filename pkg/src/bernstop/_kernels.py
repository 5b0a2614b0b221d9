"""Compiled inner loops: the greedy trellis designer and the TV data prox."""

import numpy as np
from numba import njit


@njit(cache=True)
def _idx(k, m):
    return m * (m + 1) // 2 + k


@njit(cache=True)
def greedy_kernel(alpha, beta, depth, risk, eta_max, tie_tol):
    """Grow a strategy one node at a time by best risk reduction per trial.

    ``risk`` is the packed stop-risk table.  For every node in the current
    strategy ``G`` holds the expected terminal risk and ``H`` the expected
    number of further trials, both conditioned on reaching the node; outside
    the strategy ``G = risk`` and ``H = 0``.  Adding node v changes G and H on
    v's ancestors inside the strategy by the reach weight of v from each one.

    Returns the added nodes in order with the strategy's (h, g) after each
    addition; the last entry is the first one with h > eta_max, if reached.
    """
    n = (depth + 1) * (depth + 2) // 2
    total = alpha + beta
    in_t = np.zeros(n, dtype=np.bool_)
    in_front = np.zeros(n, dtype=np.bool_)
    G = risk.copy()
    H = np.zeros(n)
    fk = np.empty(n, dtype=np.int64)
    fm = np.empty(n, dtype=np.int64)
    nf = 0
    out_k = np.empty(n, dtype=np.int64)
    out_m = np.empty(n, dtype=np.int64)
    out_h = np.empty(n)
    out_g = np.empty(n)
    count = 0
    w_next = np.zeros(depth + 2)
    w_cur = np.zeros(depth + 2)

    if depth >= 1:
        fk[0] = 0
        fm[0] = 0
        nf = 1
        in_front[0] = True

    while nf > 0:
        best = -1
        best_r = 0.0
        best_num = 0.0
        best_den = 1.0
        for j in range(nf):
            k = fk[j]
            m = fm[j]
            s = (alpha + k) / (total + m)
            f = (beta + m - k) / (total + m)
            cs = _idx(k + 1, m + 1)
            cf = _idx(k, m + 1)
            num = s * G[cs] + f * G[cf] - risk[_idx(k, m)]
            den = 1.0 + s * H[cs] + f * H[cf]
            r = num / den
            if best < 0:
                better = True
            else:
                scale = tie_tol * abs(best_r)
                if r < best_r - scale:
                    better = True
                elif r <= best_r + scale:
                    bm = fm[best]
                    bk = fk[best]
                    better = m < bm or (m == bm and k < bk)
                else:
                    better = False
            if better:
                best = j
                best_r = r
                best_num = num
                best_den = den
        k = fk[best]
        m = fm[best]
        v = _idx(k, m)
        # swap-remove from the frontier
        nf -= 1
        fk[best] = fk[nf]
        fm[best] = fm[nf]
        in_front[v] = False
        in_t[v] = True
        G[v] = risk[v] + best_num
        H[v] = best_den
        d_g = best_num
        d_h = best_den

        # push the change up through ancestors that lie in the strategy
        lo = k
        hi = k
        w_next[k] = 1.0
        for mm in range(m - 1, -1, -1):
            new_lo = lo - 1
            if new_lo < 0:
                new_lo = 0
            new_hi = hi
            if new_hi > mm:
                new_hi = mm
            any_mass = False
            for kk in range(new_lo, new_hi + 1):
                a = _idx(kk, mm)
                w = 0.0
                if in_t[a]:
                    s = (alpha + kk) / (total + mm)
                    f = (beta + mm - kk) / (total + mm)
                    if kk + 1 >= lo and kk + 1 <= hi:
                        w += s * w_next[kk + 1]
                    if kk >= lo and kk <= hi:
                        w += f * w_next[kk]
                w_cur[kk] = w
                if w != 0.0:
                    any_mass = True
                    G[a] += w * d_g
                    H[a] += w * d_h
            for kk in range(lo, hi + 1):
                w_next[kk] = 0.0
            if not any_mass:
                for kk in range(new_lo, new_hi + 1):
                    w_cur[kk] = 0.0
                break
            for kk in range(new_lo, new_hi + 1):
                w_next[kk] = w_cur[kk]
                w_cur[kk] = 0.0
            lo = new_lo
            hi = new_hi
        else:
            for kk in range(lo, hi + 1):
                w_next[kk] = 0.0

        out_k[count] = k
        out_m[count] = m
        out_h[count] = H[0]
        out_g[count] = G[0]
        count += 1
        if H[0] > eta_max:
            break

        if m + 1 < depth:
            for kk in (k, k + 1):
                c = _idx(kk, m + 1)
                if not in_t[c] and not in_front[c]:
                    in_front[c] = True
                    fk[nf] = kk
                    fm[nf] = m + 1
                    nf += 1

    return out_k[:count], out_m[:count], out_h[:count], out_g[:count]


@njit(cache=True)
def monotone_root_kernel(c, v, z, k, m, eps, out):
    """Per pixel, the root in [eps, 1 - eps] of c (x - v) + nll'(x) - z.

    The left side is increasing; roots outside the box are clipped.
    """
    for i in range(out.size):
        ki = k[i]
        fi = m[i] - ki
        lo = eps
        hi = 1.0 - eps
        g_lo = c * (lo - v[i]) - ki / lo + fi / (1.0 - lo) - z[i]
        if g_lo >= 0.0:
            out[i] = lo
            continue
        g_hi = c * (hi - v[i]) - ki / hi + fi / (1.0 - hi) - z[i]
        if g_hi <= 0.0:
            out[i] = hi
            continue
        x = v[i] if c > 0.0 else 0.5
        if not lo < x < hi:
            x = 0.5 * (lo + hi)
        for _ in range(200):
            g = c * (x - v[i]) - ki / x + fi / (1.0 - x) - z[i]
            if g < 0.0:
                lo = x
            else:
                hi = x
            slope = c + ki / (x * x) + fi / ((1.0 - x) * (1.0 - x))
            nx = x - g / slope
            if g == 0.0 or abs(nx - x) <= 1e-13 * x:
                x = nx if lo <= nx <= hi else x
                break
            if not lo < nx < hi:
                nx = 0.5 * (lo + hi)
            x = nx
        out[i] = x
    return out
