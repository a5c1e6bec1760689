// Compares the serial reference kernels against the OpenMP kernels on the
// shapes the transformer actually uses, and checks they agree bit-exactly.

#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <omp.h>

#include "framefuse/common.hpp"
#include "framefuse/kernels.hpp"

using namespace ff;

namespace {

std::vector<float> randn(Rng& rng, size_t n) {
    std::vector<float> v(n);
    for (float& x : v) x = float(rng.normal());
    return v;
}

template <class F>
double time_ms(int iters, F&& fn) {
    fn();  // warm up
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; i++) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

int mismatches = 0;

void report(const char* name, double flops, double ms_ref, double ms_omp, bool equal) {
    std::printf("%-28s ref %8.3f ms (%6.2f GF/s)   omp %8.3f ms (%6.2f GF/s)   x%.2f  %s\n",
                name, ms_ref, flops / ms_ref / 1e6, ms_omp, flops / ms_omp / 1e6,
                ms_ref / ms_omp, equal ? "bit-equal" : "MISMATCH");
    if (!equal) mismatches++;
}

}  // namespace

int main(int argc, char** argv) {
    bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    const int iters = quick ? 2 : 20;
    Rng rng(42);

    std::printf("threads: %d\n", omp_get_max_threads());

    {  // matmul at attention/MLP shapes
        for (auto [m, k, n] : {std::array<int, 3>{204, 128, 128},
                               std::array<int, 3>{204, 128, 512},
                               std::array<int, 3>{204, 512, 128}}) {
            auto a = randn(rng, size_t(m) * k), b = randn(rng, size_t(k) * n);
            std::vector<float> c1(size_t(m) * n), c2(size_t(m) * n);
            double ms_ref = time_ms(iters, [&] { ref::matmul(a.data(), b.data(), c1.data(), m, k, n); });
            double ms_omp = time_ms(iters, [&] { kern::matmul(a.data(), b.data(), c2.data(), m, k, n); });
            char name[64];
            std::snprintf(name, sizeof name, "matmul %dx%dx%d", m, k, n);
            report(name, 2.0 * m * k * n, ms_ref, ms_omp, c1 == c2);
        }
    }
    {  // attention forward/backward, the full-sequence shape
        const int L = 204, H = 4, dh = 32, D = H * dh;
        auto q = randn(rng, size_t(L) * D), k = randn(rng, size_t(L) * D),
             v = randn(rng, size_t(L) * D), dy = randn(rng, size_t(L) * D);
        std::vector<float> p1(size_t(H) * L * L), p2(size_t(H) * L * L);
        std::vector<float> y1(size_t(L) * D), y2(size_t(L) * D);
        double fl = 4.0 * H * double(L) * L * dh;
        double ms_ref = time_ms(iters, [&] {
            ref::attention_fwd(q.data(), k.data(), v.data(), p1.data(), y1.data(), L, H, dh);
        });
        double ms_omp = time_ms(iters, [&] {
            kern::attention_fwd(q.data(), k.data(), v.data(), p2.data(), y2.data(), L, H, dh);
        });
        report("attention_fwd L=204", fl, ms_ref, ms_omp, y1 == y2 && p1 == p2);

        std::vector<float> ds(size_t(H) * L * L), dq1(size_t(L) * D), dk1(size_t(L) * D),
            dv1(size_t(L) * D), dq2(size_t(L) * D), dk2(size_t(L) * D), dv2(size_t(L) * D);
        ms_ref = time_ms(iters, [&] {
            ref::attention_bwd(dy.data(), q.data(), k.data(), v.data(), p1.data(), ds.data(),
                               dq1.data(), dk1.data(), dv1.data(), L, H, dh);
        });
        ms_omp = time_ms(iters, [&] {
            kern::attention_bwd(dy.data(), q.data(), k.data(), v.data(), p2.data(), ds.data(),
                                dq2.data(), dk2.data(), dv2.data(), L, H, dh);
        });
        report("attention_bwd L=204", 2.5 * fl, ms_ref, ms_omp,
               dq1 == dq2 && dk1 == dk2 && dv1 == dv2);
    }
    {  // layernorm + gelu over the sequence
        const int L = 204, d = 128;
        auto x = randn(rng, size_t(L) * d);
        std::vector<float> gamma(size_t(d), 1.0f), beta(size_t(d), 0.0f);
        std::vector<float> y1(size_t(L) * d), y2(size_t(L) * d), mean(size_t(L), 0.0f), rstd(size_t(L), 0.0f);
        double ms_ref = time_ms(iters, [&] {
            ref::layernorm_fwd(x.data(), gamma.data(), beta.data(), y1.data(), mean.data(),
                               rstd.data(), L, d);
        });
        double ms_omp = time_ms(iters, [&] {
            kern::layernorm_fwd(x.data(), gamma.data(), beta.data(), y2.data(), mean.data(),
                                rstd.data(), L, d);
        });
        report("layernorm L=204", 8.0 * L * d, ms_ref, ms_omp, y1 == y2);

        auto g = randn(rng, size_t(L) * 4 * d);
        std::vector<float> o1(g.size()), o2(g.size());
        ms_ref = time_ms(iters, [&] { ref::gelu_fwd(g.data(), o1.data(), g.size()); });
        ms_omp = time_ms(iters, [&] { kern::gelu_fwd(g.data(), o2.data(), g.size()); });
        report("gelu L*4d", 8.0 * double(g.size()), ms_ref, ms_omp, o1 == o2);
    }
    if (mismatches) {
        std::printf("FAILED: %d kernel mismatches\n", mismatches);
        return 1;
    }
    return 0;
}
