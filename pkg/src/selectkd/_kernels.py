"""Hot inner loops, in two interchangeable implementations.

Every kernel exists as a numba ``@njit`` function and as a pure-numpy
function with the same signature and the same floating-point operation
order where that is cheap to keep. ``SELECTKD_NUMBA=0`` in the environment
(or numba not being importable) selects the numpy path at import time.

Both tables are exposed through ``KERNELS`` so tests and the benchmark can
call either path regardless of the flag.
"""

from __future__ import annotations

import os

import numpy as np

FLOOR = 1e-12

FKL, RKL, SKL, SRKL = 0, 1, 2, 3

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SELECTKD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def _div_grad_np(kind, alpha, P, Z):
    Q = np.exp(Z - Z.max(axis=1, keepdims=True))
    Q /= Q.sum(axis=1, keepdims=True)
    pc = np.maximum(P, FLOOR)
    qc = np.maximum(Q, FLOOR)
    if kind == FKL:
        values = np.sum(P * (np.log(pc) - np.log(qc)), axis=1)
        return values, Q - P
    if kind == RKL:
        lr = np.log(qc) - np.log(pc)
        values = np.sum(Q * lr, axis=1)
        g = lr
    elif kind == SKL:
        mc = np.maximum(alpha * P + (1.0 - alpha) * Q, FLOOR)
        values = np.sum(P * (np.log(pc) - np.log(mc)), axis=1)
        g = (1.0 - alpha) * (1.0 - P / mc)
    elif kind == SRKL:
        mc = np.maximum((1.0 - alpha) * P + alpha * Q, FLOOR)
        values = np.sum(Q * (np.log(qc) - np.log(mc)), axis=1)
        g = np.log(qc) - np.log(mc) + alpha * (1.0 - Q / mc)
    else:
        raise ValueError(f"unknown divergence code {kind}")
    dot = np.sum(Q * g, axis=1, keepdims=True)
    return values, Q * (g - dot)


def _first_above(c, target):
    """Index of the first cumulative value strictly above ``target`` (row-wise)."""
    hit = c > target[..., None]
    idx = hit.argmax(axis=-1)
    miss = ~hit.any(axis=-1)
    if miss.any():
        # u * total rounded up to total: fall back to the last token with mass
        last = c.shape[-1] - 1 - np.argmax((np.diff(c, axis=-1, prepend=0.0) > 0)[..., ::-1], axis=-1)
        idx = np.where(miss, last, idx)
    return idx


def _spec_verify_np(P, Q, U, beta):
    N, k = U.shape[0], U.shape[1]
    CQ = np.cumsum(Q, axis=1)
    cand = _first_above(CQ[:, None, :], U[:, :, 0] * CQ[:, -1:])
    rows = np.arange(N)[:, None]
    p = np.maximum(P[rows, cand], FLOOR)
    q = np.maximum(Q[rows, cand], FLOOR)
    accept = U[:, :, 1] < np.minimum(1.0, p / q)
    counts = accept.sum(axis=1).astype(np.int64)
    weights = np.where(counts >= 1, 1.0, beta)
    return weights, counts, cand.astype(np.int64)


def _rollout_np(cum_table, greedy_idx, start_rows, U, V, n_rows, greedy):
    B, T = U.shape
    out = np.empty((B, T), dtype=np.int64)
    rows = start_rows.astype(np.int64).copy()
    for t in range(T):
        if greedy:
            x = greedy_idx[rows]
        else:
            c = cum_table[rows]
            x = _first_above(c, U[:, t] * c[:, -1])
        out[:, t] = x
        rows = (rows * V + x) % n_rows
    return out


def _scatter_rows_np(out, rows, G, scale):
    np.add.at(out, rows, G * scale[:, None])
    return out


def _icdf_py(c, u):
    target = u * c[-1]
    idx = int(np.searchsorted(c, target, side="right"))
    if idx >= c.shape[0]:
        idx = int(np.flatnonzero(np.diff(c, prepend=0.0) > 0)[-1])
    return idx


def _spec_decode_np(cum_draft, draft, target, states, gamma, U, V, n_rows):
    rounds = U.shape[0]
    S = states.shape[0]
    states = states.astype(np.int64).copy()
    emitted = np.full((rounds, gamma + 1), -1, dtype=np.int64)
    n_emit = np.zeros(rounds, dtype=np.int64)
    n_acc = np.zeros(rounds, dtype=np.int64)
    xs = np.empty(gamma, dtype=np.int64)
    ctx = np.empty(gamma + 1, dtype=np.int64)
    for r in range(rounds):
        s = r % S
        row = states[s]
        for i in range(gamma):
            ctx[i] = row
            x = _icdf_py(cum_draft[row], U[r, 2 * i])
            xs[i] = x
            row = (row * V + x) % n_rows
        ctx[gamma] = row
        row = ctx[0]
        e = 0
        rejected = False
        for i in range(gamma):
            x = xs[i]
            ratio = target[ctx[i], x] / draft[ctx[i], x]
            if U[r, 2 * i + 1] < min(1.0, ratio):
                emitted[r, e] = x
                e += 1
                n_acc[r] += 1
                row = (row * V + x) % n_rows
            else:
                res = np.maximum(target[ctx[i]] - draft[ctx[i]], 0.0)
                if res.sum() <= 0.0:
                    res = target[ctx[i]]
                x = _icdf_py(np.cumsum(res), U[r, 2 * gamma])
                emitted[r, e] = x
                e += 1
                row = (row * V + x) % n_rows
                rejected = True
                break
        if not rejected:
            x = _icdf_py(np.cumsum(target[ctx[gamma]]), U[r, 2 * gamma])
            emitted[r, e] = x
            e += 1
            row = (row * V + x) % n_rows
        n_emit[r] = e
        states[s] = row
    return emitted, n_emit, n_acc, states


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def _div_grad_nb(kind, alpha, P, Z):
        N, V = P.shape
        values = np.empty(N)
        grads = np.empty((N, V))
        q = np.empty(V)
        g = np.empty(V)
        for n in range(N):
            zmax = Z[n, 0]
            for j in range(1, V):
                if Z[n, j] > zmax:
                    zmax = Z[n, j]
            s = 0.0
            for j in range(V):
                q[j] = np.exp(Z[n, j] - zmax)
                s += q[j]
            for j in range(V):
                q[j] /= s
            val = 0.0
            if kind == 0:
                for j in range(V):
                    p = P[n, j]
                    val += p * (np.log(max(p, FLOOR)) - np.log(max(q[j], FLOOR)))
                    grads[n, j] = q[j] - p
                values[n] = val
                continue
            for j in range(V):
                p = P[n, j]
                qj = q[j]
                if kind == 1:
                    lr = np.log(max(qj, FLOOR)) - np.log(max(p, FLOOR))
                    val += qj * lr
                    g[j] = lr
                elif kind == 2:
                    mc = max(alpha * p + (1.0 - alpha) * qj, FLOOR)
                    val += p * (np.log(max(p, FLOOR)) - np.log(mc))
                    g[j] = (1.0 - alpha) * (1.0 - p / mc)
                else:
                    mc = max((1.0 - alpha) * p + alpha * qj, FLOOR)
                    lr = np.log(max(qj, FLOOR)) - np.log(mc)
                    val += qj * lr
                    g[j] = lr + alpha * (1.0 - qj / mc)
            dot = 0.0
            for j in range(V):
                dot += q[j] * g[j]
            for j in range(V):
                grads[n, j] = q[j] * (g[j] - dot)
            values[n] = val
        return values, grads

    @_jit
    def _icdf_nb(c, u):
        V = c.shape[0]
        target = u * c[V - 1]
        for j in range(V):
            if c[j] > target:
                return j
        prev = 0.0
        last = V - 1
        for j in range(V):
            if c[j] - prev > 0.0:
                last = j
            prev = c[j]
        return last

    @_jit
    def _icdf_vec_nb(p, u):
        # inverse CDF on an unnormalised vector, accumulating sequentially
        V = p.shape[0]
        c = np.empty(V)
        acc = 0.0
        for j in range(V):
            acc += p[j]
            c[j] = acc
        return _icdf_nb(c, u)

    @_jit
    def _spec_verify_nb(P, Q, U, beta):
        N, V = P.shape
        k = U.shape[1]
        weights = np.empty(N)
        counts = np.zeros(N, dtype=np.int64)
        cand = np.empty((N, k), dtype=np.int64)
        c = np.empty(V)
        for n in range(N):
            acc = 0.0
            for j in range(V):
                acc += Q[n, j]
                c[j] = acc
            for i in range(k):
                x = _icdf_nb(c, U[n, i, 0])
                cand[n, i] = x
                a = max(P[n, x], FLOOR) / max(Q[n, x], FLOOR)
                if a > 1.0:
                    a = 1.0
                if U[n, i, 1] < a:
                    counts[n] += 1
            weights[n] = 1.0 if counts[n] >= 1 else beta
        return weights, counts, cand

    @_jit
    def _rollout_nb(cum_table, greedy_idx, start_rows, U, V, n_rows, greedy):
        B, T = U.shape
        out = np.empty((B, T), dtype=np.int64)
        for b in range(B):
            row = start_rows[b]
            for t in range(T):
                if greedy:
                    x = greedy_idx[row]
                else:
                    x = _icdf_nb(cum_table[row], U[b, t])
                out[b, t] = x
                row = (row * V + x) % n_rows
        return out

    @_jit
    def _scatter_rows_nb(out, rows, G, scale):
        N, V = G.shape
        for n in range(N):
            r = rows[n]
            s = scale[n]
            for j in range(V):
                out[r, j] += G[n, j] * s
        return out

    @_jit
    def _spec_decode_nb(cum_draft, draft, target, states, gamma, U, V, n_rows):
        rounds = U.shape[0]
        S = states.shape[0]
        states = states.copy()
        emitted = np.full((rounds, gamma + 1), -1, dtype=np.int64)
        n_emit = np.zeros(rounds, dtype=np.int64)
        n_acc = np.zeros(rounds, dtype=np.int64)
        xs = np.empty(gamma, dtype=np.int64)
        ctx = np.empty(gamma + 1, dtype=np.int64)
        res = np.empty(V)
        for r in range(rounds):
            s = r % S
            row = states[s]
            for i in range(gamma):
                ctx[i] = row
                x = _icdf_nb(cum_draft[row], U[r, 2 * i])
                xs[i] = x
                row = (row * V + x) % n_rows
            ctx[gamma] = row
            row = ctx[0]
            e = 0
            rejected = False
            for i in range(gamma):
                x = xs[i]
                ratio = target[ctx[i], x] / draft[ctx[i], x]
                if U[r, 2 * i + 1] < min(1.0, ratio):
                    emitted[r, e] = x
                    e += 1
                    n_acc[r] += 1
                    row = (row * V + x) % n_rows
                else:
                    tot = 0.0
                    for j in range(V):
                        d = target[ctx[i], j] - draft[ctx[i], j]
                        res[j] = d if d > 0.0 else 0.0
                        tot += res[j]
                    if tot <= 0.0:
                        for j in range(V):
                            res[j] = target[ctx[i], j]
                    x = _icdf_vec_nb(res, U[r, 2 * gamma])
                    emitted[r, e] = x
                    e += 1
                    row = (row * V + x) % n_rows
                    rejected = True
                    break
            if not rejected:
                x = _icdf_vec_nb(target[ctx[gamma]], U[r, 2 * gamma])
                emitted[r, e] = x
                e += 1
                row = (row * V + x) % n_rows
            n_emit[r] = e
            states[s] = row
        return emitted, n_emit, n_acc, states


KERNELS = {
    "numpy": {
        "div_grad": _div_grad_np,
        "spec_verify": _spec_verify_np,
        "rollout": _rollout_np,
        "scatter_rows": _scatter_rows_np,
        "spec_decode": _spec_decode_np,
    }
}
if HAVE_NUMBA:
    KERNELS["numba"] = {
        "div_grad": _div_grad_nb,
        "spec_verify": _spec_verify_nb,
        "rollout": _rollout_nb,
        "scatter_rows": _scatter_rows_nb,
        "spec_decode": _spec_decode_nb,
    }

_active = KERNELS[BACKEND]


def div_grad(kind: int, alpha: float, P: np.ndarray, Z: np.ndarray):
    """Per-row divergence values and gradients w.r.t. the student logits ``Z``."""
    return _active["div_grad"](int(kind), float(alpha), np.ascontiguousarray(P, dtype=np.float64),
                               np.ascontiguousarray(Z, dtype=np.float64))


def spec_verify(P, Q, U, beta):
    """Spec-k test per row. ``U[n, i]`` holds (token uniform, acceptance uniform) for candidate i."""
    return _active["spec_verify"](np.ascontiguousarray(P, dtype=np.float64), np.ascontiguousarray(Q, dtype=np.float64),
                                  np.ascontiguousarray(U, dtype=np.float64), float(beta))


def rollout(cum_table, greedy_idx, start_rows, U, V, n_rows, greedy):
    return _active["rollout"](np.ascontiguousarray(cum_table), np.ascontiguousarray(greedy_idx, dtype=np.int64),
                              np.ascontiguousarray(start_rows, dtype=np.int64), np.ascontiguousarray(U),
                              int(V), int(n_rows), bool(greedy))


def scatter_rows(out, rows, G, scale):
    return _active["scatter_rows"](out, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(G),
                                   np.ascontiguousarray(scale, dtype=np.float64))


def spec_decode(cum_draft, draft, target, states, gamma, U, V, n_rows):
    return _active["spec_decode"](np.ascontiguousarray(cum_draft), np.ascontiguousarray(draft),
                                  np.ascontiguousarray(target), np.ascontiguousarray(states, dtype=np.int64),
                                  int(gamma), np.ascontiguousarray(U), int(V), int(n_rows))
