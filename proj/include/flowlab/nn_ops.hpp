#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>

namespace flowlab {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

constexpr double kRmsEps = 1e-6;

// y = x @ w (+ b); x: [n, in] row-major, w: [in, out] row-major.
// Single rows and all reductions use fixed-order loops; Eigen's alignment-
// sensitive gemv/redux kernels would make results depend on buffer addresses.
template <typename T>
void linear_fwd(const T* x, const T* w, const T* b, T* y, int n, int in, int out) {
    if (n == 1) {
        for (int o = 0; o < out; ++o) y[o] = b ? b[o] : T(0);
        for (int i = 0; i < in; ++i) {
            const T xi = x[i];
            const T* wr = w + size_t(i) * out;
            for (int o = 0; o < out; ++o) y[o] += xi * wr[o];
        }
        return;
    }
    MapM<T>(y, n, out).noalias() = CMapM<T>(x, n, in) * CMapM<T>(w, in, out);
    if (b)
        for (int r = 0; r < n; ++r) {
            T* yr = y + size_t(r) * out;
            for (int o = 0; o < out; ++o) yr[o] += b[o];
        }
}

// accumulates dx += dy w^T, dw += x^T dy, db += colsum(dy)
template <typename T>
void linear_bwd(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int n, int in, int out) {
    if (n == 1) {
        if (dx)
            for (int i = 0; i < in; ++i) {
                T s = T(0);
                const T* wr = w + size_t(i) * out;
                for (int o = 0; o < out; ++o) s += dy[o] * wr[o];
                dx[i] += s;
            }
        if (dw)
            for (int i = 0; i < in; ++i) {
                const T xi = x[i];
                T* dwr = dw + size_t(i) * out;
                for (int o = 0; o < out; ++o) dwr[o] += xi * dy[o];
            }
    } else {
        if (dx) MapM<T>(dx, n, in).noalias() += CMapM<T>(dy, n, out) * CMapM<T>(w, in, out).transpose();
        if (dw) MapM<T>(dw, in, out).noalias() += CMapM<T>(x, n, in).transpose() * CMapM<T>(dy, n, out);
    }
    if (db)
        for (int r = 0; r < n; ++r) {
            const T* dyr = dy + size_t(r) * out;
            for (int o = 0; o < out; ++o) db[o] += dyr[o];
        }
}

template <typename T>
T silu(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

// y_j = x_j * ir * g_j with ir = 1/sqrt(mean(x^2) + eps); returns ir
template <typename T>
T rmsnorm_fwd(const T* x, const T* gain, T* y, int d) {
    T ss = T(0);
    for (int j = 0; j < d; ++j) ss += x[j] * x[j];
    const T ir = T(1) / std::sqrt(ss / T(d) + T(kRmsEps));
    for (int j = 0; j < d; ++j) y[j] = x[j] * ir * gain[j];
    return ir;
}

// accumulates dx += ..., dgain += ...
template <typename T>
void rmsnorm_bwd(const T* x, const T* gain, T ir, const T* dy, T* dx, T* dgain, int d) {
    T s = T(0);
    for (int j = 0; j < d; ++j) s += dy[j] * gain[j] * x[j];
    const T k = ir * ir * ir * s / T(d);
    for (int j = 0; j < d; ++j) {
        dx[j] += ir * gain[j] * dy[j] - x[j] * k;
        if (dgain) dgain[j] += dy[j] * x[j] * ir;
    }
}

// in-place row softmax
template <typename T>
void softmax_row(T* x, int d) {
    T m = x[0];
    for (int j = 1; j < d; ++j) m = std::max(m, x[j]);
    T sum = T(0);
    for (int j = 0; j < d; ++j) {
        x[j] = std::exp(x[j] - m);
        sum += x[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < d; ++j) x[j] *= inv;
}

// dx += p * (dp - sum(dp * p))
template <typename T>
void softmax_bwd(const T* p, const T* dp, T* dx, int d) {
    T dot = T(0);
    for (int j = 0; j < d; ++j) dot += dp[j] * p[j];
    for (int j = 0; j < d; ++j) dx[j] += p[j] * (dp[j] - dot);
}

// m = n * (1 + scale) + shift, applied per token with per-sample vectors
template <typename T>
void modulate_fwd(const T* n, const T* shift, const T* scale, T* m, int d) {
    for (int j = 0; j < d; ++j) m[j] = n[j] * (T(1) + scale[j]) + shift[j];
}

template <typename T>
void modulate_bwd(const T* n, const T* scale, const T* dm, T* dn, T* dshift, T* dscale, int d) {
    for (int j = 0; j < d; ++j) {
        dn[j] += dm[j] * (T(1) + scale[j]);
        dshift[j] += dm[j];
        dscale[j] += dm[j] * n[j];
    }
}

}  // namespace flowlab
