#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "framefuse/common.hpp"
#include "framefuse/kernels.hpp"

using namespace ff;

namespace {

template <class T>
std::vector<T> randn(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<T> v(n);
    for (T& x : v) x = T(rng.normal() * scale);
    return v;
}

}  // namespace

TEST_CASE("omp kernels match the serial reference bit-exactly") {
    Rng rng(1);
    for (auto [m, k, n] : {std::array<int, 3>{7, 13, 5}, std::array<int, 3>{64, 128, 96},
                           std::array<int, 3>{1, 17, 33}}) {
        auto a = randn<float>(rng, size_t(m) * k);
        auto b = randn<float>(rng, size_t(k) * n);
        std::vector<float> c1(size_t(m) * n), c2(size_t(m) * n);
        ref::matmul(a.data(), b.data(), c1.data(), m, k, n);
        kern::matmul(a.data(), b.data(), c2.data(), m, k, n);
        CHECK(c1 == c2);

        auto bt = randn<float>(rng, size_t(n) * k);
        std::vector<float> d1(size_t(m) * n), d2(size_t(m) * n);
        ref::matmul_nt(a.data(), bt.data(), d1.data(), m, k, n);
        kern::matmul_nt(a.data(), bt.data(), d2.data(), m, k, n);
        CHECK(d1 == d2);

        auto bb = randn<float>(rng, size_t(m) * n);
        std::vector<float> e1(size_t(k) * n), e2(size_t(k) * n);
        ref::matmul_tn(a.data(), bb.data(), e1.data(), m, k, n);
        kern::matmul_tn(a.data(), bb.data(), e2.data(), m, k, n);
        CHECK(e1 == e2);
    }

    const int L = 37, H = 3, dh = 8, D = H * dh;
    auto q = randn<float>(rng, size_t(L) * D), k = randn<float>(rng, size_t(L) * D),
         v = randn<float>(rng, size_t(L) * D), dy = randn<float>(rng, size_t(L) * D);
    std::vector<float> p1(size_t(H) * L * L), p2(size_t(H) * L * L), y1(size_t(L) * D),
        y2(size_t(L) * D);
    ref::attention_fwd(q.data(), k.data(), v.data(), p1.data(), y1.data(), L, H, dh);
    kern::attention_fwd(q.data(), k.data(), v.data(), p2.data(), y2.data(), L, H, dh);
    CHECK(p1 == p2);
    CHECK(y1 == y2);

    std::vector<float> ds(size_t(H) * L * L);
    std::vector<float> dq1(size_t(L) * D), dk1(size_t(L) * D), dv1(size_t(L) * D);
    std::vector<float> dq2(size_t(L) * D), dk2(size_t(L) * D), dv2(size_t(L) * D);
    ref::attention_bwd(dy.data(), q.data(), k.data(), v.data(), p1.data(), ds.data(), dq1.data(),
                       dk1.data(), dv1.data(), L, H, dh);
    kern::attention_bwd(dy.data(), q.data(), k.data(), v.data(), p2.data(), ds.data(), dq2.data(),
                        dk2.data(), dv2.data(), L, H, dh);
    CHECK(dq1 == dq2);
    CHECK(dk1 == dk2);
    CHECK(dv1 == dv2);

    const int rows = 29, d = 48;
    auto x = randn<float>(rng, size_t(rows) * d);
    auto gamma = randn<float>(rng, size_t(d), 0.3);
    auto beta = randn<float>(rng, size_t(d), 0.3);
    std::vector<float> o1(size_t(rows) * d), o2(size_t(rows) * d);
    std::vector<float> mu1(rows, 0.0f), mu2(rows, 0.0f), rs1(rows, 0.0f), rs2(rows, 0.0f);
    ref::layernorm_fwd(x.data(), gamma.data(), beta.data(), o1.data(), mu1.data(), rs1.data(),
                       rows, d);
    kern::layernorm_fwd(x.data(), gamma.data(), beta.data(), o2.data(), mu2.data(), rs2.data(),
                        rows, d);
    CHECK(o1 == o2);

    auto g = randn<float>(rng, 1003);
    std::vector<float> g1(g.size()), g2(g.size());
    ref::gelu_fwd(g.data(), g1.data(), g.size());
    kern::gelu_fwd(g.data(), g2.data(), g.size());
    CHECK(g1 == g2);
}

TEST_CASE("matmul agrees with an independent accumulation order") {
    Rng rng(2);
    const int m = 23, k = 31, n = 19;
    auto a = randn<double>(rng, size_t(m) * k);
    auto b = randn<double>(rng, size_t(k) * n);
    std::vector<double> c(size_t(m) * n);
    kern::matmul(a.data(), b.data(), c.data(), m, k, n);
    // j-outer, k-inner scalar loop; different rounding path
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) {
            double acc = 0;
            for (int kk = 0; kk < k; kk++) acc += a[size_t(i) * k + kk] * b[size_t(kk) * n + j];
            CHECK(c[size_t(i) * n + j] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("attention forward matches a brute-force softmax oracle") {
    Rng rng(3);
    const int L = 11, H = 2, dh = 4, D = H * dh;
    auto q = randn<double>(rng, size_t(L) * D), k = randn<double>(rng, size_t(L) * D),
         v = randn<double>(rng, size_t(L) * D);
    std::vector<double> probs(size_t(H) * L * L), y(size_t(L) * D);
    kern::attention_fwd(q.data(), k.data(), v.data(), probs.data(), y.data(), L, H, dh);
    for (int h = 0; h < H; h++)
        for (int i = 0; i < L; i++) {
            std::vector<double> s(size_t(L), 0.0);
            double denom = 0;
            for (int j = 0; j < L; j++) {
                double dot = 0;
                for (int c = 0; c < dh; c++)
                    dot += q[size_t(i) * D + size_t(h) * dh + size_t(c)] *
                           k[size_t(j) * D + size_t(h) * dh + size_t(c)];
                s[size_t(j)] = std::exp(dot / std::sqrt(double(dh)));
                denom += s[size_t(j)];
            }
            for (int c = 0; c < dh; c++) {
                double out = 0;
                for (int j = 0; j < L; j++)
                    out += s[size_t(j)] / denom * v[size_t(j) * D + size_t(h) * dh + size_t(c)];
                CHECK(y[size_t(i) * D + size_t(h) * dh + size_t(c)] ==
                      doctest::Approx(out).epsilon(1e-10));
            }
        }
}

TEST_CASE("no attention mask: every token influences every other") {
    Rng rng(4);
    const int L = 9, H = 1, dh = 8;
    auto q = randn<double>(rng, size_t(L) * dh), k = randn<double>(rng, size_t(L) * dh),
         v = randn<double>(rng, size_t(L) * dh);
    std::vector<double> probs(size_t(L) * L), y0(size_t(L) * dh), y1(size_t(L) * dh);
    kern::attention_fwd(q.data(), k.data(), v.data(), probs.data(), y0.data(), L, H, dh);
    // perturbing the LAST key/value must change the FIRST query's output
    k[size_t(L - 1) * dh] += 0.5;
    v[size_t(L - 1) * dh] += 0.5;
    kern::attention_fwd(q.data(), k.data(), v.data(), probs.data(), y1.data(), L, H, dh);
    double diff = 0;
    for (int c = 0; c < dh; c++) diff += std::abs(y1[size_t(c)] - y0[size_t(c)]);
    CHECK(diff > 1e-9);
    // and all attention weights are strictly positive (softmax, no mask)
    for (double p : probs) CHECK(p > 0.0);
}

namespace {

template <class Fwd>
double fd_grad(std::vector<double>& x, size_t i, Fwd&& f, double h = 1e-6) {
    double orig = x[i];
    x[i] = orig + h;
    double up = f();
    x[i] = orig - h;
    double dn = f();
    x[i] = orig;
    return (up - dn) / (2 * h);
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

TEST_CASE("layernorm backward matches finite differences") {
    Rng rng(5);
    const int rows = 4, d = 10;
    auto x = randn<double>(rng, size_t(rows) * d);
    auto gamma = randn<double>(rng, size_t(d), 0.5);
    auto beta = randn<double>(rng, size_t(d), 0.5);
    auto w = randn<double>(rng, size_t(rows) * d);  // loss = sum(w * y)

    std::vector<double> y(size_t(rows) * d), mu(rows, 0.0), rs(rows, 0.0);
    auto loss = [&] {
        ref::layernorm_fwd(x.data(), gamma.data(), beta.data(), y.data(), mu.data(), rs.data(),
                           rows, d);
        double s = 0;
        for (size_t i = 0; i < y.size(); i++) s += w[i] * y[i];
        return s;
    };
    loss();
    std::vector<double> dx(size_t(rows) * d), dgamma(size_t(d), 0.0), dbeta(size_t(d), 0.0);
    ref::layernorm_bwd(w.data(), x.data(), gamma.data(), mu.data(), rs.data(), dx.data(),
                       dgamma.data(), dbeta.data(), rows, d);
    for (size_t i : {size_t(0), size_t(7), size_t(23), size_t(39)})
        CHECK(rel_err(dx[i], fd_grad(x, i, loss)) < 1e-6);
    for (size_t i : {size_t(0), size_t(3), size_t(9)}) {
        CHECK(rel_err(dgamma[i], fd_grad(gamma, i, loss)) < 1e-6);
        CHECK(rel_err(dbeta[i], fd_grad(beta, i, loss)) < 1e-6);
    }
}

TEST_CASE("gelu and silu backward match finite differences") {
    Rng rng(6);
    auto x = randn<double>(rng, 16);
    auto w = randn<double>(rng, 16);
    std::vector<double> y(16), dy(16);
    auto loss_gelu = [&] {
        ref::gelu_fwd(x.data(), y.data(), x.size());
        double s = 0;
        for (size_t i = 0; i < y.size(); i++) s += w[i] * y[i];
        return s;
    };
    loss_gelu();
    ref::gelu_bwd(w.data(), x.data(), dy.data(), x.size());
    for (size_t i = 0; i < x.size(); i++) CHECK(rel_err(dy[i], fd_grad(x, i, loss_gelu)) < 1e-6);

    auto loss_silu = [&] {
        ref::silu_fwd(x.data(), y.data(), x.size());
        double s = 0;
        for (size_t i = 0; i < y.size(); i++) s += w[i] * y[i];
        return s;
    };
    loss_silu();
    ref::silu_bwd(w.data(), x.data(), dy.data(), x.size());
    for (size_t i = 0; i < x.size(); i++) CHECK(rel_err(dy[i], fd_grad(x, i, loss_silu)) < 1e-6);
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(7);
    const int L = 6, H = 2, dh = 3, D = H * dh;
    auto q = randn<double>(rng, size_t(L) * D), k = randn<double>(rng, size_t(L) * D),
         v = randn<double>(rng, size_t(L) * D);
    auto w = randn<double>(rng, size_t(L) * D);
    std::vector<double> probs(size_t(H) * L * L), y(size_t(L) * D);
    auto loss = [&] {
        ref::attention_fwd(q.data(), k.data(), v.data(), probs.data(), y.data(), L, H, dh);
        double s = 0;
        for (size_t i = 0; i < y.size(); i++) s += w[i] * y[i];
        return s;
    };
    loss();
    std::vector<double> ds(size_t(H) * L * L), dq(size_t(L) * D), dk(size_t(L) * D),
        dv(size_t(L) * D);
    ref::attention_bwd(w.data(), q.data(), k.data(), v.data(), probs.data(), ds.data(), dq.data(),
                       dk.data(), dv.data(), L, H, dh);
    for (size_t i : {size_t(0), size_t(5), size_t(17), size_t(35)}) {
        CHECK(rel_err(dq[i], fd_grad(q, i, loss)) < 1e-5);
        CHECK(rel_err(dk[i], fd_grad(k, i, loss)) < 1e-5);
        CHECK(rel_err(dv[i], fd_grad(v, i, loss)) < 1e-5);
    }
}

TEST_CASE("adamw single step matches the update formula") {
    std::vector<double> w{1.0}, g{0.5}, m{0.0}, v{0.0};
    double lr = 0.1, b1 = 0.9, b2 = 0.95, eps = 1e-8, wd = 0.01;
    kern::adamw_update(w.data(), g.data(), m.data(), v.data(), 1, lr, b1, b2, eps, wd, 1);
    double m1 = (1 - b1) * 0.5, v1 = (1 - b2) * 0.25;
    double mhat = m1 / (1 - b1), vhat = v1 / (1 - b2);
    double expect = 1.0 - lr * (mhat / (std::sqrt(vhat) + eps) + wd * 1.0);
    CHECK(w[0] == doctest::Approx(expect).epsilon(1e-12));
}
