#pragma once

#include <cmath>
#include <cstddef>

// Shared scalar helpers for both kernel implementations. Everything here is
// inlined into both ff::kern and ff::ref so the accumulation order (and thus
// the bit pattern of the result) is the same in both.

namespace ff::kdetail {

// fixed 4-lane partial sums; the compiler may vectorize but cannot reorder
template <class T>
inline T dotp(const T* a, const T* b, int n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; i++) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

template <class T>
inline void softmax_row(T* row, int n) {
    T mx = row[0];
    for (int j = 1; j < n; j++)
        if (row[j] > mx) mx = row[j];
    T sum = 0;
    for (int j = 0; j < n; j++) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    T inv = T(1) / sum;
    for (int j = 0; j < n; j++) row[j] *= inv;
}

template <class T>
inline T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <class T>
inline T gelu_grad_scalar(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
    return cdf + x * pdf;
}

template <class T>
inline T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace ff::kdetail
