"""Compiled single-pass evaluation of the Gray and RMTL-difference tests.

The pooled sample is sorted once; each row of ``labels`` is a group
assignment over that fixed order, so permutations only change labels and
every row costs O(n).
"""

import math

import numpy as np
from numba import njit

# output columns
U, V, GRAY_P, DELTA, DIFF_VAR, DIFF_P, TAU = range(7)
N_COLS = 7

_SQRT2 = math.sqrt(2.0)


@njit(cache=True, nogil=True)
def block_starts(time):
    """Start index of each run of tied times, plus a terminal ``n``."""
    n = time.size
    out = np.empty(n + 1, dtype=np.int64)
    k = 0
    for i in range(n):
        if i == 0 or time[i] != time[i - 1]:
            out[k] = i
            k += 1
    out[k] = n
    return out[: k + 1]


@njit(cache=True, nogil=True)
def _evaluate_row(time, status, lab, starts, tau_fixed, out, work):
    n = time.size
    nb = starts.size - 1

    n_g = np.zeros(2)
    last1 = np.full(2, -1.0)
    tmax = np.zeros(2)
    for i in range(n):
        g = lab[i] - 1
        n_g[g] += 1.0
        tmax[g] = time[i]
        if status[i] == 1:
            last1[g] = time[i]

    for c in range(N_COLS):
        out[c] = np.nan
    if n_g[0] == 0.0 or n_g[1] == 0.0:
        return

    if tau_fixed > 0.0:
        tau = tau_fixed
        if tau > tmax[0] or tau > tmax[1]:
            tau = np.nan
    elif last1[0] < 0.0 or last1[1] < 0.0:
        tau = np.nan
    else:
        tau = min(last1[0], last1[1])

    # work columns per block: K, then per group (d1, d2, Y, S-, F-, F, R)
    # where S is all-event survival, F the event-1 CIF, R the risk set
    y0, y1 = n_g[0], n_g[1]
    s0 = s1 = 1.0
    g0 = g1 = 1.0
    f0 = f1 = 0.0
    a0 = a1 = ta0 = ta1 = 0.0
    prev = 0.0
    score = 0.0
    any_type1 = False
    for k in range(nb):
        t = time[starts[k]]
        d10 = d11 = d20 = d21 = c0 = c1 = 0.0
        for i in range(starts[k], starts[k + 1]):
            st = status[i]
            if lab[i] == 1:
                if st == 1:
                    d10 += 1.0
                elif st == 2:
                    d20 += 1.0
                else:
                    c0 += 1.0
            else:
                if st == 1:
                    d11 += 1.0
                elif st == 2:
                    d21 += 1.0
                else:
                    c1 += 1.0

        if t <= tau:
            w = t - prev
            w2 = (t * t - prev * prev) * 0.5
            a0 += f0 * w
            a1 += f1 * w
            ta0 += f0 * w2
            ta1 += f1 * w2
            prev = t

        # subdistribution risk sets: n * G(t-) * (1 - F(t-)) equals the
        # number at risk plus censoring-weighted earlier competing failures
        r0 = n_g[0] * g0 * (1.0 - f0)
        r1 = n_g[1] * g1 * (1.0 - f1)
        kk = r0 * r1 / (r0 + r1) if r0 > 0.0 and r1 > 0.0 else 0.0
        if d10 + d11 > 0.0:
            any_type1 = True
            if kk > 0.0:
                score += kk * (d10 / r0 - d11 / r1)

        work[k, 0] = kk
        work[k, 1] = d10
        work[k, 2] = d20
        work[k, 3] = y0
        work[k, 4] = s0
        work[k, 5] = f0
        work[k, 7] = r0
        work[k, 8] = d11
        work[k, 9] = d21
        work[k, 10] = y1
        work[k, 11] = s1
        work[k, 12] = f1
        work[k, 14] = r1
        if y0 > 0.0:
            f0 += s0 * d10 / y0
            s0 *= 1.0 - (d10 + d20) / y0
            if y0 > d10 + d20:
                g0 *= 1.0 - c0 / (y0 - d10 - d20)
        if y1 > 0.0:
            f1 += s1 * d11 / y1
            s1 *= 1.0 - (d11 + d21) / y1
            if y1 > d11 + d21:
                g1 *= 1.0 - c1 / (y1 - d11 - d21)
        work[k, 6] = f0
        work[k, 13] = f1
        y0 -= d10 + d20 + c0
        y1 -= d11 + d21 + c1

    area = np.empty(2)
    tarea = np.empty(2)
    f = np.empty(2)
    area[0], area[1], tarea[0], tarea[1], f[0], f[1] = a0, a1, ta0, ta1, f0, f1
    if tau == tau and prev < tau:
        for g in range(2):
            area[g] += f[g] * (tau - prev)
            tarea[g] += f[g] * (tau * tau - prev * prev) * 0.5

    # variance of the score: martingale terms of both event types in each
    # group, with tail sums of the subdistribution-hazard increments
    var = 0.0
    for g in range(2):
        base = 1 + 7 * g
        tail = 0.0
        for k in range(nb - 1, -1, -1):
            kk = work[k, 0]
            d1g = work[k, base + 0]
            d2g = work[k, base + 1]
            yg = work[k, base + 2]
            sm = work[k, base + 3]
            fm = work[k, base + 4]
            fp = work[k, base + 5]
            rg = work[k, base + 6]
            if yg > 0.0 and (d1g > 0.0 or d2g > 0.0):
                c1 = kk * yg / rg
                c2 = 0.0
                if tail != 0.0:
                    # (1 - F(w)) * S(w-) / S(w), with S(w) = S(w-) (1 - d / Y)
                    c2 = (1.0 - fp) * yg / (yg - d1g - d2g) * tail
                    c1 += sm * tail - c2
                var += (c1 * c1 * d1g + c2 * c2 * d2g) / (yg * yg)
            if d1g > 0.0 and rg > 0.0 and kk > 0.0:
                tail += kk * d1g / rg / (1.0 - fm)

    if any_type1:
        out[U] = score
        out[V] = var
        if var > 0.0:
            stat = score * score / var
            out[GRAY_P] = math.erfc(math.sqrt(0.5 * stat))
        elif score == 0.0:
            out[GRAY_P] = 1.0

    if tau == tau:
        out[TAU] = tau
        delta = area[0] - area[1]
        v0 = max(0.0, 2.0 * tau * area[0] - 2.0 * tarea[0] - area[0] * area[0])
        v1 = max(0.0, 2.0 * tau * area[1] - 2.0 * tarea[1] - area[1] * area[1])
        dvar = v0 / n_g[0] + v1 / n_g[1]
        out[DELTA] = delta
        out[DIFF_VAR] = dvar
        if dvar > 0.0:
            out[DIFF_P] = math.erfc(abs(delta) / math.sqrt(dvar) / _SQRT2)
        elif delta == 0.0:
            out[DIFF_P] = 1.0


@njit(cache=True, nogil=True)
def evaluate_rows(time, status, labels, tau_fixed):
    """Gray and Diff results for every label row.

    Parameters
    ----------
    time : float64[n]
        Pooled times sorted with the sample tie order.
    status : int64[n]
    labels : int8[m, n]
        Group labels (1 or 2) aligned with ``time``.
    tau_fixed : float
        Horizon for the RMTL difference; ``<= 0`` recomputes it per row as
        the smaller of the two groups' last event-of-interest times.

    Returns
    -------
    float64[m, 7]
        Columns score, score variance, Gray P, RMTL difference, its
        variance, Diff P and the horizon used. Undefined entries are NaN.
    """
    starts = block_starts(time)
    m = labels.shape[0]
    out = np.empty((m, N_COLS))
    work = np.empty((starts.size - 1, 15))
    for b in range(m):
        _evaluate_row(time, status, labels[b], starts, tau_fixed, out[b], work)
    return out
