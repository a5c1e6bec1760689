#pragma once

#include <cstddef>

// Dense kernels behind the transformer. Two implementations with identical
// signatures and identical per-element accumulation order:
//
//   ff::kern — production, OpenMP `parallel for` over disjoint output slices
//   ff::ref  — plain serial loops, kept as the testing reference
//
// Because parallelization only distributes whole output elements and never
// splits a reduction, kern and ref are bit-identical for the same inputs, and
// results do not depend on the thread count. Tests assert exact equality;
// tools/bench_kernels compares throughput.
//
// Matrices are row-major. matmul shapes: c[m,n] = a[m,k] * b[k,n].
// matmul_nt: c[m,n] = a[m,k] * b[n,k]^T (b given transposed).
// matmul_tn: c[k,n] = a[m,k]^T * b[m,n].

#define FF_KERNEL_API(ns)                                                                       \
    namespace ns {                                                                              \
    template <class T> void matmul(const T* a, const T* b, T* c, int m, int k, int n);          \
    template <class T> void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n);       \
    template <class T> void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n);       \
    template <class T> void transpose(const T* a, T* at, int rows, int cols);                   \
    template <class T> void add_bias(T* x, const T* b, int rows, int d);                        \
    template <class T> void bias_grad_acc(const T* dy, T* db, int rows, int d);                 \
    template <class T>                                                                          \
    void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,       \
                       int rows, int d);                                                        \
    template <class T>                                                                          \
    void layernorm_bwd(const T* dy, const T* x, const T* gamma, const T* mean, const T* rstd,   \
                       T* dx, T* dgamma, T* dbeta, int rows, int d);                            \
    template <class T> void gelu_fwd(const T* x, T* y, size_t n);                               \
    template <class T> void gelu_bwd(const T* dy, const T* x, T* dx, size_t n);                 \
    template <class T> void silu_fwd(const T* x, T* y, size_t n);                               \
    template <class T> void silu_bwd(const T* dy, const T* x, T* dx, size_t n);                 \
    template <class T>                                                                          \
    void attention_fwd(const T* q, const T* k, const T* v, T* probs, T* y, int L, int H,        \
                       int dh);                                                                 \
    template <class T>                                                                          \
    void attention_bwd(const T* dy, const T* q, const T* k, const T* v, const T* probs,         \
                       T* dscores, T* dq, T* dk, T* dv, int L, int H, int dh);                  \
    template <class T> void add_inplace(T* x, const T* y, size_t n);                            \
    template <class T> void axpy(T alpha, const T* x, T* y, size_t n);                          \
    template <class T>                                                                          \
    void adamw_update(T* w, const T* g, T* m, T* v, size_t n, T lr, T beta1, T beta2, T eps,    \
                      T weight_decay, long step);                                               \
    }

namespace ff {
FF_KERNEL_API(kern)
FF_KERNEL_API(ref)
}  // namespace ff

#undef FF_KERNEL_API
