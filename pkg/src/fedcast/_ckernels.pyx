# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled compute kernels: the fast backend for the tensor engine.

Signature-identical twin of ``_pykernels.py`` (see that module for the
API contract).  Buffers arrive as contiguous float64 memoryviews; the
hot loops run without the GIL so client training threads overlap.
"""

from libc.math cimport exp, log, sqrt, tanh, isnan, isinf, INFINITY

DEF LN_EPS = 1e-12


# ---------------------------------------------------------------------------
# matrix products

def matmul(double[::1] a, double[::1] b, double[::1] out,
           Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    """out(m,n) = a(m,k) @ b(k,n)."""
    cdef Py_ssize_t i, j, kk
    cdef double aik
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i * n + j] = 0.0
            for kk in range(k):
                aik = a[i * k + kk]
                if aik == 0.0:
                    continue
                for j in range(n):
                    out[i * n + j] += aik * b[kk * n + j]


def matmul_ta_acc(double[::1] a, double[::1] b, double[::1] out,
                  Py_ssize_t k, Py_ssize_t m, Py_ssize_t n):
    """out(m,n) += a(k,m)^T @ b(k,n)."""
    cdef Py_ssize_t i, j, kk
    cdef double aki
    with nogil:
        for kk in range(k):
            for i in range(m):
                aki = a[kk * m + i]
                if aki == 0.0:
                    continue
                for j in range(n):
                    out[i * n + j] += aki * b[kk * n + j]


def matmul_tb_acc(double[::1] a, double[::1] b, double[::1] out,
                  Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    """out(m,n) += a(m,k) @ b(n,k)^T."""
    cdef Py_ssize_t i, j, kk
    cdef double s
    with nogil:
        for i in range(m):
            for j in range(n):
                s = 0.0
                for kk in range(k):
                    s += a[i * k + kk] * b[j * k + kk]
                out[i * n + j] += s


def transpose(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[j * m + i] = a[i * n + j]


def transpose_acc(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[j * m + i] += a[i * n + j]


# ---------------------------------------------------------------------------
# elementwise

def add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] + b[i]


def sub(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] - b[i]


def mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] * b[i]


def mul_acc(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += a[i] * b[i]


def scale(double[::1] a, double c, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] * c


def add_scaled(double[::1] out, double[::1] a, double c, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += a[i] * c


def accumulate(double[::1] out, double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += a[i]


def add_scalar_acc(double[::1] out, double c, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += c


def add_bias(double[::1] x, double[::1] bias, double[::1] out,
             Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i * n + j] = x[i * n + j] + bias[j]


def col_sums_acc(double[::1] x, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[j] += x[i * n + j]


def fill(double[::1] x, double c, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            x[i] = c


def copy_block(double[::1] src, Py_ssize_t s_off, double[::1] dst,
               Py_ssize_t d_off, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dst[d_off + i] = src[s_off + i]


def acc_block(double[::1] src, Py_ssize_t s_off, double[::1] dst,
              Py_ssize_t d_off, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dst[d_off + i] += src[s_off + i]


def sum_all(double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double s = 0.0
    with nogil:
        for i in range(n):
            s += a[i]
    return s


# ---------------------------------------------------------------------------
# activations

def relu(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = x[i] if x[i] > 0.0 else 0.0


def relu_bwd(double[::1] x, double[::1] dy, double[::1] dx, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            if x[i] > 0.0:
                dx[i] += dy[i]


def sigmoid(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v, e
    with nogil:
        for i in range(n):
            v = x[i]
            if v >= 0.0:
                out[i] = 1.0 / (1.0 + exp(-v))
            else:
                e = exp(v)
                out[i] = e / (1.0 + e)


def sigmoid_bwd(double[::1] y, double[::1] dy, double[::1] dx, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dx[i] += dy[i] * y[i] * (1.0 - y[i])


def tanh_(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = tanh(x[i])


def tanh_bwd(double[::1] y, double[::1] dy, double[::1] dx, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dx[i] += dy[i] * (1.0 - y[i] * y[i])


# ---------------------------------------------------------------------------
# row-wise softmax / log-softmax / layer norm

def softmax_rows(double[::1] x, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j, bad = 0
    cdef double hi, s, e, inv
    with nogil:
        for i in range(m):
            hi = x[i * n]
            for j in range(1, n):
                if x[i * n + j] > hi:
                    hi = x[i * n + j]
            if hi == -INFINITY:
                bad += 1
                continue
            s = 0.0
            for j in range(n):
                e = exp(x[i * n + j] - hi)
                out[i * n + j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[i * n + j] *= inv
    return bad


def softmax_rows_bwd(double[::1] y, double[::1] dy, double[::1] dx,
                     Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double dot
    with nogil:
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += dy[i * n + j] * y[i * n + j]
            for j in range(n):
                dx[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot)


def log_softmax_rows(double[::1] x, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double hi, s, lse
    with nogil:
        for i in range(m):
            hi = x[i * n]
            for j in range(1, n):
                if x[i * n + j] > hi:
                    hi = x[i * n + j]
            s = 0.0
            for j in range(n):
                s += exp(x[i * n + j] - hi)
            lse = hi + log(s)
            for j in range(n):
                out[i * n + j] = x[i * n + j] - lse
    return 0


def log_softmax_rows_bwd(double[::1] y, double[::1] dy, double[::1] dx,
                         Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double tot
    with nogil:
        for i in range(m):
            tot = 0.0
            for j in range(n):
                tot += dy[i * n + j]
            for j in range(n):
                dx[i * n + j] += dy[i * n + j] - exp(y[i * n + j]) * tot


def layer_norm_rows(double[::1] x, double[::1] g, double[::1] b,
                    double[::1] out, double[::1] xhat, double[::1] inv_sd,
                    Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double mu, var, d, r, h
    with nogil:
        for i in range(m):
            mu = 0.0
            for j in range(n):
                mu += x[i * n + j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i * n + j] - mu
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + LN_EPS)
            inv_sd[i] = r
            for j in range(n):
                h = (x[i * n + j] - mu) * r
                xhat[i * n + j] = h
                out[i * n + j] = g[j] * h + b[j]


def layer_norm_rows_bwd(double[::1] dy, double[::1] g, double[::1] xhat,
                        double[::1] inv_sd, double[::1] dx, double[::1] dg,
                        double[::1] db, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double m1, m2, dh, r
    with nogil:
        for i in range(m):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                dh = dy[i * n + j] * g[j]
                m1 += dh
                m2 += dh * xhat[i * n + j]
                dg[j] += dy[i * n + j] * xhat[i * n + j]
                db[j] += dy[i * n + j]
            m1 /= n
            m2 /= n
            r = inv_sd[i]
            for j in range(n):
                dh = dy[i * n + j] * g[j]
                dx[i * n + j] += r * (dh - m1 - xhat[i * n + j] * m2)


# ---------------------------------------------------------------------------
# gather / scatter over rows

def gather_rows(double[::1] x, long long[::1] idx, double[::1] out,
                Py_ssize_t rows, Py_ssize_t row_len):
    cdef Py_ssize_t i, j, src, dst
    with nogil:
        for i in range(rows):
            src = <Py_ssize_t> idx[i] * row_len
            dst = i * row_len
            for j in range(row_len):
                out[dst + j] = x[src + j]


def scatter_rows_acc(double[::1] dy, long long[::1] idx, double[::1] dx,
                     Py_ssize_t rows, Py_ssize_t row_len):
    cdef Py_ssize_t i, j, src, dst
    with nogil:
        for i in range(rows):
            dst = <Py_ssize_t> idx[i] * row_len
            src = i * row_len
            for j in range(row_len):
                dx[dst + j] += dy[src + j]


# ---------------------------------------------------------------------------
# optimizer / validation / aggregation helpers

def sgd_update(double[::1] p, double[::1] g, double[::1] v,
               double lr, double momentum, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double vi
    with nogil:
        for i in range(n):
            vi = momentum * v[i] + g[i]
            v[i] = vi
            p[i] -= lr * vi


def count_bad(double[::1] x, Py_ssize_t n, bint allow_neginf):
    cdef Py_ssize_t i, bad = 0
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            if isnan(v):
                bad += 1
            elif v == -INFINITY:
                if not allow_neginf:
                    bad += 1
            elif isinf(v):
                bad += 1
    return bad


def ewise_min(double[::1] out, double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            if a[i] < out[i]:
                out[i] = a[i]


def ewise_max(double[::1] out, double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            if a[i] > out[i]:
                out[i] = a[i]


def clamp_between(double[::1] x, double[::1] lo, double[::1] hi, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            if x[i] < lo[i]:
                x[i] = lo[i]
            elif x[i] > hi[i]:
                x[i] = hi[i]
