# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loss/gradient kernel.

One call runs the whole forward pass, the combined CE/KL loss and the
backward pass without returning to the interpreter; the GIL is released for
the duration, so client rounds on a thread pool overlap. Matrix products
go through scipy's BLAS. Arrays are row-major; a row-major ``(r, c)`` block
is handed to BLAS as its column-major ``(c, r)`` transpose.
"""
import numpy as np

from libc.math cimport exp, log, tanh
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"

cdef double FLOOR = 1e-12


cdef inline void _mm(int m, int n, int k, const double* a, const double* b,
                     double* c, double beta) noexcept nogil:
    # row-major C(m, n) = A(m, k) @ B(k, n) + beta * C
    cdef char tn = b'N'
    cdef double one = 1.0
    dgemm(&tn, &tn, &n, &m, &k, &one, <double*>b, &n, <double*>a, &k, &beta, c, &n)


cdef inline void _mm_tn(int m, int n, int k, const double* a, const double* b,
                        double* c) noexcept nogil:
    # row-major C(m, n) = A(k, m)^T @ B(k, n)
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tn, &tt, &n, &m, &k, &one, <double*>b, &n, <double*>a, &m, &zero, c, &n)


cdef inline void _mm_nt(int m, int n, int k, const double* a, const double* b,
                        double* c) noexcept nogil:
    # row-major C(m, n) = A(m, k) @ B(n, k)^T
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tt, &tn, &n, &m, &k, &one, <double*>b, &k, <double*>a, &k, &zero, c, &n)


def loss_grad(tuple dims, str act, const double[::1] params, const double[:, ::1] x,
              const long long[::1] y, const double[:, ::1] targets, double lam,
              double tau, double wd):
    cdef int n_layers = len(dims) - 1
    cdef int n = x.shape[0]
    cdef int use_tanh = act == "tanh"
    cdef int i, j, l, k_out, k_in, total_h, max_w
    cdef Py_ssize_t pos
    cdef double loss = 0.0
    cdef double mx, s, logs, t, q, wsum

    grad_arr = np.empty(params.shape[0], dtype=np.float64)
    cdef double[::1] g = grad_arr

    cdef int* widths = <int*>malloc((n_layers + 1) * sizeof(int))
    cdef Py_ssize_t* w_off = <Py_ssize_t*>malloc(n_layers * sizeof(Py_ssize_t))
    cdef Py_ssize_t* h_off = <Py_ssize_t*>malloc((n_layers + 1) * sizeof(Py_ssize_t))
    if widths == NULL or w_off == NULL or h_off == NULL:
        free(widths); free(w_off); free(h_off)
        raise MemoryError()

    pos = 0
    total_h = 0
    max_w = 0
    for l in range(n_layers + 1):
        widths[l] = dims[l]
        if widths[l] > max_w:
            max_w = widths[l]
    for l in range(n_layers):
        w_off[l] = pos
        pos += widths[l] * widths[l + 1] + widths[l + 1]
    # h_off[l] indexes the activations feeding layer l (l >= 1); slot n_layers holds logits
    for l in range(1, n_layers + 1):
        h_off[l] = total_h
        total_h += n * widths[l]

    cdef double* hbuf = <double*>malloc(total_h * sizeof(double))
    cdef double* dz = <double*>malloc(n * max_w * sizeof(double))
    cdef double* dh = <double*>malloc(n * max_w * sizeof(double))
    cdef double* tmp = <double*>malloc(max_w * sizeof(double))
    if hbuf == NULL or dz == NULL or dh == NULL or tmp == NULL:
        free(widths); free(w_off); free(h_off)
        free(hbuf); free(dz); free(dh); free(tmp)
        raise MemoryError()

    cdef const double* p = &params[0]
    cdef const double* h_prev
    cdef const double* tg = NULL
    cdef double* z
    cdef double* swap
    cdef double* gp = &g[0]
    if targets is not None:
        tg = &targets[0, 0]

    try:
        with nogil:
            h_prev = &x[0, 0]
            for l in range(n_layers):
                k_in = widths[l]
                k_out = widths[l + 1]
                z = hbuf + h_off[l + 1]
                for i in range(n):
                    for j in range(k_out):
                        z[i * k_out + j] = p[w_off[l] + k_in * k_out + j]
                _mm(n, k_out, k_in, h_prev, p + w_off[l], z, 1.0)
                if l < n_layers - 1:
                    for i in range(n * k_out):
                        if use_tanh:
                            z[i] = tanh(z[i])
                        elif z[i] < 0.0:
                            z[i] = 0.0
                h_prev = z

            k_out = widths[n_layers]
            z = hbuf + h_off[n_layers]
            for i in range(n):
                for j in range(k_out):
                    dz[i * k_out + j] = 0.0
                if lam < 1.0:
                    mx = z[i * k_out]
                    for j in range(1, k_out):
                        if z[i * k_out + j] > mx:
                            mx = z[i * k_out + j]
                    s = 0.0
                    for j in range(k_out):
                        tmp[j] = exp(z[i * k_out + j] - mx)
                        s += tmp[j]
                    for j in range(k_out):
                        tmp[j] = tmp[j] / s
                    t = tmp[y[i]]
                    if t < FLOOR:
                        t = FLOOR
                    loss += (1.0 - lam) * (-log(t)) / n
                    tmp[y[i]] -= 1.0
                    for j in range(k_out):
                        dz[i * k_out + j] = (1.0 - lam) * tmp[j]
                if lam > 0.0:
                    mx = z[i * k_out] / tau
                    for j in range(1, k_out):
                        if z[i * k_out + j] / tau > mx:
                            mx = z[i * k_out + j] / tau
                    s = 0.0
                    for j in range(k_out):
                        tmp[j] = exp(z[i * k_out + j] / tau - mx)
                        s += tmp[j]
                    wsum = 0.0
                    for j in range(k_out):
                        q = tmp[j] / s
                        t = tg[i * k_out + j]
                        if t > 0.0:
                            wsum += t * (log(t) - log(q if q > FLOOR else FLOOR))
                        dz[i * k_out + j] += lam * (q - t) / tau
                    loss += lam * wsum / n
                for j in range(k_out):
                    dz[i * k_out + j] /= n

            for l in range(n_layers - 1, -1, -1):
                k_in = widths[l]
                k_out = widths[l + 1]
                if l == 0:
                    h_prev = &x[0, 0]
                else:
                    h_prev = hbuf + h_off[l]
                _mm_tn(k_in, k_out, n, h_prev, dz, gp + w_off[l])
                for j in range(k_out):
                    gp[w_off[l] + k_in * k_out + j] = 0.0
                for i in range(n):
                    for j in range(k_out):
                        gp[w_off[l] + k_in * k_out + j] += dz[i * k_out + j]
                if l > 0:
                    _mm_nt(n, k_in, k_out, dz, p + w_off[l], dh)
                    for i in range(n * k_in):
                        if use_tanh:
                            dh[i] = dh[i] * (1.0 - h_prev[i] * h_prev[i])
                        elif not h_prev[i] > 0.0:
                            dh[i] = 0.0
                    swap = dz
                    dz = dh
                    dh = swap

            if wd > 0.0:
                s = 0.0
                for i in range(params.shape[0]):
                    s += p[i] * p[i]
                    gp[i] += wd * p[i]
                loss += 0.5 * wd * s
    finally:
        free(widths); free(w_off); free(h_off)
        free(hbuf); free(dz); free(dh); free(tmp)
    return loss, grad_arr
