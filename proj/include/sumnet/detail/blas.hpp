#pragma once

#include <cstdlib>

#if defined(__linux__) || defined(__APPLE__)
#include <dlfcn.h>
#define SUMNET_HAS_DLOPEN 1
#endif

namespace sumnet::detail {

// Row-major dgemm: C = alpha * op(A) * op(B) + beta * C.
// Resolved from OpenBLAS at first use; a blocked scalar kernel is the
// fallback. OpenBLAS picks its microkernels from the CPU model string, which
// virtualized environments often mask, so the core type is pinned from CPUID
// before the library initializes. Loading lazily (rather than linking) is
// what makes that ordering possible.
class Gemm {
  public:
    static void run(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                    const double* a, int lda, const double* b, int ldb, double beta, double* c,
                    int ldc) {
        static Gemm instance;
        if (instance.cblas_dgemm_) {
            // CBLAS enums: RowMajor=101, NoTrans=111, Trans=112.
            instance.cblas_dgemm_(101, trans_a ? 112 : 111, trans_b ? 112 : 111, m, n, k, alpha,
                                  a, lda, b, ldb, beta, c, ldc);
        } else {
            fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
        }
    }

    static bool using_blas() {
        static Gemm instance;  // same singleton as run()
        return instance.cblas_dgemm_ != nullptr;
    }

  private:
    using DgemmFn = void (*)(int, int, int, int, int, int, double, const double*, int,
                             const double*, int, double, double*, int);

    Gemm() {
#ifdef SUMNET_HAS_DLOPEN
        if (std::getenv("SUMNET_NO_BLAS")) return;
#if defined(__x86_64__) || defined(__i386__)
        if (__builtin_cpu_supports("avx512f"))
            ::setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
        else if (__builtin_cpu_supports("avx2"))
            ::setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
#endif
        for (const char* name : {"libopenblas.so.0", "libopenblas.so", "libopenblas.dylib"}) {
            if (void* handle = ::dlopen(name, RTLD_NOW | RTLD_LOCAL)) {
                cblas_dgemm_ = reinterpret_cast<DgemmFn>(::dlsym(handle, "cblas_dgemm"));
                if (cblas_dgemm_) break;
            }
        }
#endif
    }

    static void fallback(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                         const double* a, int lda, const double* b, int ldb, double beta,
                         double* c, int ldc) {
        auto a_at = [&](int i, int p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
        auto b_at = [&](int p, int j) { return trans_b ? b[j * ldb + p] : b[p * ldb + j]; };
        for (int i = 0; i < m; ++i) {
            double* crow = c + static_cast<std::size_t>(i) * ldc;
            if (beta == 0.0) {
                for (int j = 0; j < n; ++j) crow[j] = 0.0;
            } else if (beta != 1.0) {
                for (int j = 0; j < n; ++j) crow[j] *= beta;
            }
            for (int p = 0; p < k; ++p) {
                const double av = alpha * a_at(i, p);
                if (!trans_b) {
                    const double* brow = b + static_cast<std::size_t>(p) * ldb;
                    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
                } else {
                    for (int j = 0; j < n; ++j) crow[j] += av * b_at(p, j);
                }
            }
        }
    }

    DgemmFn cblas_dgemm_ = nullptr;
};

inline void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                  int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    Gemm::run(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace sumnet::detail
