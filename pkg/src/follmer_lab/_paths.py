"""Jitted path kernels.

Every kernel owns one Philox stream per path, keyed ``(seed, stream_id)``,
and writes only to its own rows of the output arrays, so any split of the
path index range across threads gives bit-identical results.

Model terms follow :class:`follmer_lab.models.InverseDistanceTerms`.

numba drops array reference counting only for helpers it can inline with a
single exit; the Q-step loop is therefore written out in place rather than
factored into a helper (a helper call costs as much as the step itself).
"""

import math

import numpy as np
from numba import njit

from ._philox import STREAM_DTYPE, next_normal, stream_init

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_jit = njit(cache=True, nogil=True, error_model="numpy")
_jit_inline = njit(cache=True, nogil=True, error_model="numpy", inline="always")


@_jit_inline
def eval_terms(y, weights, centers, projs, diag, grad, off):
    """Return h(y) and write grad ln h(y) into ``grad``; h = 0 on the zero set.

    ``diag`` (m, q) replaces the projection matrices when its first row is
    not NaN; every built-in projects onto coordinate subspaces, where this
    saves most of the work.
    """
    use_diag = not math.isnan(diag[0, 0])
    m = weights.shape[0]
    q = y.shape[0]
    inv = 0.0
    on_zero_set = False
    for j in range(q):
        grad[j] = 0.0
    for i in range(m):
        r2 = 0.0
        if use_diag:
            for a in range(q):
                s = diag[i, a] * (y[a] - centers[i, a])
                off[a] = s
                r2 += s * s
        else:
            for a in range(q):
                s = 0.0
                for b in range(q):
                    s += projs[i, a, b] * (y[b] - centers[i, b])
                off[a] = s
                r2 += s * s
        if r2 == 0.0:
            on_zero_set = True
        ir = 1.0 / math.sqrt(r2)
        w = weights[i] * ir
        inv += w
        c = w * ir * ir
        for a in range(q):
            grad[a] += c * off[a]
    h = 0.0 if on_zero_set else 1.0 / inv
    for a in range(q):
        grad[a] *= h
    return h


@_jit_inline
def tanaka_increment(a, b, level):
    """|b-l| - |a-l| - sgn(a-l)(b-a), with sgn(0) = 0; always >= 0."""
    da = a - level
    sgn = 0.0
    if da > 0.0:
        sgn = 1.0
    elif da < 0.0:
        sgn = -1.0
    return abs(b - level) - abs(da) - sgn * (b - a)


@_jit
def q_simulate(
    x0, t0, dt, record_idx, continue_after, threshold, cap_c, weights, centers, projs, diag,
    seed, stream_ids, stop_out, y_out, lam_out, h_stop_out, h_prev_out,
):
    """Euler-Maruyama paths of dY = dW - grad ln h(Y) dt, reduced to record nodes.

    Each macro step of length ``dt`` is split into substeps no longer than
    ``cap_c / |grad ln h|^2``; explosion is the first substep point with
    h <= ``threshold`` and is attributed to the macro node ending that step.

    For path ``p`` and record node ``record_idx[r]`` (ascending),
    ``y_out[p, r]`` holds Y at that node and ``lam_out[p, r]`` holds
    Lambda of the first coordinate at level 0, stopped at explosion. After
    explosion Y is either frozen (``continue_after`` false) or continues as
    driftless Brownian motion on the grid. ``stop_out`` is the explosion
    node or -1; ``h_stop_out`` / ``h_prev_out`` hold h at the explosion
    point and at the preceding macro node (NaN if no explosion).
    """
    q = x0.shape[0]
    n_rec = record_idx.shape[0]
    last = record_idx[n_rec - 1]
    sq_dt = math.sqrt(dt)
    work = np.empty(1, dtype=STREAM_DTYPE)
    st = work[0]
    y = np.empty(q)
    grad = np.empty(q)
    off = np.empty(q)
    for p in range(stream_ids.shape[0]):
        stream_init(seed, stream_ids[p], st)
        for a in range(q):
            y[a] = x0[a]
        h_prev = eval_terms(y, weights, centers, projs, diag, grad, off)
        lam = 0.0
        stop = -1
        h_stop = np.nan
        h_before = np.nan
        r = 0
        while r < n_rec and record_idx[r] == 0:
            for a in range(q):
                y_out[p, r, a] = y[a]
            lam_out[p, r] = 0.0
            r += 1
        for k in range(last):
            if stop >= 0:
                if not continue_after:
                    break
                for a in range(q):
                    y[a] += sq_dt * next_normal(st)
            else:
                x_before = y[0]
                remaining = dt
                while True:
                    g2 = 0.0
                    for a in range(q):
                        g2 += grad[a] * grad[a]
                    hs = remaining
                    final = True
                    if cap_c < remaining * g2:
                        hs = cap_c / g2
                        final = False
                    sq = math.sqrt(hs)
                    for a in range(q):
                        y[a] += -grad[a] * hs + sq * next_normal(st)
                    h = eval_terms(y, weights, centers, projs, diag, grad, off)
                    if h <= threshold or final:
                        break
                    remaining -= hs
                inc = tanaka_increment(x_before, y[0], 0.0)
                if inc > 0.0:
                    lam += _SQRT_2_OVER_PI / math.sqrt(t0 + (k + 1) * dt) * inc
                if h <= threshold:
                    stop = k + 1
                    h_stop = h
                    h_before = h_prev
                h_prev = h
            while r < n_rec and record_idx[r] == k + 1:
                for a in range(q):
                    y_out[p, r, a] = y[a]
                lam_out[p, r] = lam
                r += 1
        while r < n_rec:
            for a in range(q):
                y_out[p, r, a] = y[a]
            lam_out[p, r] = lam
            r += 1
        stop_out[p] = stop
        h_stop_out[p] = h_stop
        h_prev_out[p] = h_before


@_jit
def brownian_paths(x0, dt, n_steps, seed, stream_ids, out):
    """Full Brownian paths ``out[p, k, :]`` on a uniform grid."""
    q = x0.shape[0]
    sq = math.sqrt(dt)
    work = np.empty(1, dtype=STREAM_DTYPE)
    st = work[0]
    for p in range(stream_ids.shape[0]):
        stream_init(seed, stream_ids[p], st)
        for a in range(q):
            out[p, 0, a] = x0[a]
        for k in range(n_steps):
            for a in range(q):
                out[p, k + 1, a] = out[p, k, a] + sq * next_normal(st)


@_jit
def gaussian_endpoints(x0, t, seed, stream_ids, out):
    """Exact draws of x0 + sqrt(t) Z, one stream per row."""
    q = x0.shape[0]
    sq = math.sqrt(t)
    work = np.empty(1, dtype=STREAM_DTYPE)
    st = work[0]
    for p in range(stream_ids.shape[0]):
        stream_init(seed, stream_ids[p], st)
        for a in range(q):
            out[p, a] = x0[a] + sq * next_normal(st)


@_jit
def brownian_lambda_bulk(x0, t0, dt, n_steps, seed, stream_ids, x_out, lam_out):
    """One-dimensional Brownian paths reduced to (X_T, Lambda_T) at level 0."""
    sq = math.sqrt(dt)
    work = np.empty(1, dtype=STREAM_DTYPE)
    st = work[0]
    for p in range(stream_ids.shape[0]):
        stream_init(seed, stream_ids[p], st)
        x = x0
        lam = 0.0
        for k in range(n_steps):
            xn = x + sq * next_normal(st)
            inc = tanaka_increment(x, xn, 0.0)
            if inc > 0.0:
                lam += _SQRT_2_OVER_PI / math.sqrt(t0 + (k + 1) * dt) * inc
            x = xn
        x_out[p] = x
        lam_out[p] = lam
