"""Pure-Python compute kernels: the fallback backend for the tensor engine.

Every function here has a signature-identical compiled twin in
``_ckernels.pyx``; :mod:`fedcast.backend` picks one of the two at import
time.  All buffers are flat, row-major ``array('d')`` values (row index
varies slowest) and sizes are passed explicitly, so the kernels carry no
shape logic of their own.  Kernels never allocate: callers own every
buffer, including outputs.

Gradient kernels (``*_bwd``, ``*_acc``) accumulate with ``+=`` because a
value reused in several places collects one contribution per use.
"""

import math

_LN_EPS = 1e-12  # variance floor shared with the compiled backend


# ---------------------------------------------------------------------------
# matrix products

def matmul(a, b, out, m, k, n):
    """out(m,n) = a(m,k) @ b(k,n)."""
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            out[oi + j] = 0.0
        for kk in range(k):
            aik = a[ai + kk]
            if aik == 0.0:
                continue
            bk = kk * n
            for j in range(n):
                out[oi + j] += aik * b[bk + j]


def matmul_ta_acc(a, b, out, k, m, n):
    """out(m,n) += a(k,m)^T @ b(k,n)."""
    for kk in range(k):
        ak = kk * m
        bk = kk * n
        for i in range(m):
            aki = a[ak + i]
            if aki == 0.0:
                continue
            oi = i * n
            for j in range(n):
                out[oi + j] += aki * b[bk + j]


def matmul_tb_acc(a, b, out, m, k, n):
    """out(m,n) += a(m,k) @ b(n,k)^T."""
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            bj = j * k
            s = 0.0
            for kk in range(k):
                s += a[ai + kk] * b[bj + kk]
            out[oi + j] += s


def transpose(a, out, m, n):
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] = a[ai + j]


def transpose_acc(a, out, m, n):
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] += a[ai + j]


# ---------------------------------------------------------------------------
# elementwise

def add(a, b, out, n):
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(a, b, out, n):
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(a, b, out, n):
    for i in range(n):
        out[i] = a[i] * b[i]


def mul_acc(a, b, out, n):
    for i in range(n):
        out[i] += a[i] * b[i]


def scale(a, c, out, n):
    for i in range(n):
        out[i] = a[i] * c


def add_scaled(out, a, c, n):
    for i in range(n):
        out[i] += a[i] * c


def accumulate(out, a, n):
    for i in range(n):
        out[i] += a[i]


def add_scalar_acc(out, c, n):
    for i in range(n):
        out[i] += c


def add_bias(x, bias, out, m, n):
    for i in range(m):
        xi = i * n
        for j in range(n):
            out[xi + j] = x[xi + j] + bias[j]


def col_sums_acc(x, out, m, n):
    for i in range(m):
        xi = i * n
        for j in range(n):
            out[j] += x[xi + j]


def fill(x, c, n):
    for i in range(n):
        x[i] = c


def copy_block(src, s_off, dst, d_off, n):
    for i in range(n):
        dst[d_off + i] = src[s_off + i]


def acc_block(src, s_off, dst, d_off, n):
    for i in range(n):
        dst[d_off + i] += src[s_off + i]


def sum_all(a, n):
    s = 0.0
    for i in range(n):
        s += a[i]
    return s


# ---------------------------------------------------------------------------
# activations

def relu(x, out, n):
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def relu_bwd(x, dy, dx, n):
    for i in range(n):
        if x[i] > 0.0:
            dx[i] += dy[i]


def sigmoid(x, out, n):
    # split on sign so exp() never overflows
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)


def sigmoid_bwd(y, dy, dx, n):
    for i in range(n):
        dx[i] += dy[i] * y[i] * (1.0 - y[i])


def tanh_(x, out, n):
    for i in range(n):
        out[i] = math.tanh(x[i])


def tanh_bwd(y, dy, dx, n):
    for i in range(n):
        dx[i] += dy[i] * (1.0 - y[i] * y[i])


# ---------------------------------------------------------------------------
# row-wise softmax / log-softmax / layer norm

def softmax_rows(x, out, m, n):
    """Max-subtracted row softmax; -inf inputs become exactly 0.

    Returns the count of degenerate rows (all entries -inf), which the
    caller must treat as an error.
    """
    bad = 0
    for i in range(m):
        xi = i * n
        hi = x[xi]
        for j in range(1, n):
            if x[xi + j] > hi:
                hi = x[xi + j]
        if hi == float("-inf"):
            bad += 1
            continue
        s = 0.0
        for j in range(n):
            e = math.exp(x[xi + j] - hi)  # exp(-inf) == 0.0 exactly
            out[xi + j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[xi + j] *= inv
    return bad


def softmax_rows_bwd(y, dy, dx, m, n):
    for i in range(m):
        yi = i * n
        dot = 0.0
        for j in range(n):
            dot += dy[yi + j] * y[yi + j]
        for j in range(n):
            dx[yi + j] += y[yi + j] * (dy[yi + j] - dot)


def log_softmax_rows(x, out, m, n):
    for i in range(m):
        xi = i * n
        hi = x[xi]
        for j in range(1, n):
            if x[xi + j] > hi:
                hi = x[xi + j]
        s = 0.0
        for j in range(n):
            s += math.exp(x[xi + j] - hi)
        lse = hi + math.log(s)
        for j in range(n):
            out[xi + j] = x[xi + j] - lse
    return 0


def log_softmax_rows_bwd(y, dy, dx, m, n):
    # y holds log-probabilities
    for i in range(m):
        yi = i * n
        tot = 0.0
        for j in range(n):
            tot += dy[yi + j]
        for j in range(n):
            dx[yi + j] += dy[yi + j] - math.exp(y[yi + j]) * tot



def layer_norm_rows(x, g, b, out, xhat, inv_sd, m, n):
    for i in range(m):
        xi = i * n
        mu = 0.0
        for j in range(n):
            mu += x[xi + j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[xi + j] - mu
            var += d * d
        var /= n
        r = 1.0 / math.sqrt(var + _LN_EPS)
        inv_sd[i] = r
        for j in range(n):
            h = (x[xi + j] - mu) * r
            xhat[xi + j] = h
            out[xi + j] = g[j] * h + b[j]


def layer_norm_rows_bwd(dy, g, xhat, inv_sd, dx, dg, db, m, n):
    for i in range(m):
        xi = i * n
        m1 = 0.0  # mean of dL/dxhat
        m2 = 0.0  # mean of dL/dxhat * xhat
        for j in range(n):
            dh = dy[xi + j] * g[j]
            m1 += dh
            m2 += dh * xhat[xi + j]
            dg[j] += dy[xi + j] * xhat[xi + j]
            db[j] += dy[xi + j]
        m1 /= n
        m2 /= n
        r = inv_sd[i]
        for j in range(n):
            dh = dy[xi + j] * g[j]
            dx[xi + j] += r * (dh - m1 - xhat[xi + j] * m2)


# ---------------------------------------------------------------------------
# gather / scatter over rows

def gather_rows(x, idx, out, rows, row_len):
    for i in range(rows):
        src = idx[i] * row_len
        dst = i * row_len
        for j in range(row_len):
            out[dst + j] = x[src + j]


def scatter_rows_acc(dy, idx, dx, rows, row_len):
    for i in range(rows):
        dst = idx[i] * row_len
        src = i * row_len
        for j in range(row_len):
            dx[dst + j] += dy[src + j]


# ---------------------------------------------------------------------------
# optimizer / validation / aggregation helpers

def sgd_update(p, g, v, lr, momentum, n):
    for i in range(n):
        vi = momentum * v[i] + g[i]
        v[i] = vi
        p[i] -= lr * vi


def count_bad(x, n, allow_neginf):
    """Number of NaN/Inf entries; -inf tolerated when allow_neginf."""
    bad = 0
    neg = float("-inf")
    for i in range(n):
        v = x[i]
        if v != v:
            bad += 1
        elif v == neg:
            if not allow_neginf:
                bad += 1
        elif math.isinf(v):
            bad += 1
    return bad


def ewise_min(out, a, n):
    for i in range(n):
        if a[i] < out[i]:
            out[i] = a[i]


def ewise_max(out, a, n):
    for i in range(n):
        if a[i] > out[i]:
            out[i] = a[i]


def clamp_between(x, lo, hi, n):
    for i in range(n):
        v = x[i]
        if v < lo[i]:
            x[i] = lo[i]
        elif v > hi[i]:
            x[i] = hi[i]
