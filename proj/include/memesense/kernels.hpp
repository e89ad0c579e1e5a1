#pragma once

// =============================================================================
// Dense vector kernels: scalar reference implementations plus SIMD variants
// (AVX2 on x86-64, NEON on aarch64) selected once at runtime via CPU feature
// detection. Every SIMD kernel has a scalar twin with identical semantics;
// equivalence is enforced by tests. Reductions accumulate in double even for
// f32 inputs so scalar/SIMD results differ only by summation order.
// =============================================================================

#include <cstddef>

namespace memesense::kernels {

// ---------------------------------------------------------------------------
// Kernel function-pointer types
// ---------------------------------------------------------------------------

using DotF64Fn   = double (*)(const double* a, const double* b, std::size_t n);
using DotF32Fn   = double (*)(const float* a, const float* b, std::size_t n);
using AxpyF64Fn  = void   (*)(double alpha, const double* x, double* y, std::size_t n);
using ScaleF64Fn = void   (*)(double alpha, double* x, std::size_t n);
using SumF64Fn   = double (*)(const double* x, std::size_t n);
using MaxF64Fn   = double (*)(const double* x, std::size_t n);
using SqDistF64Fn = double (*)(const double* a, const double* b, std::size_t n);

// One dispatch table per ISA tier. All pointers are always non-null.
struct Ops {
    DotF64Fn    dot_f64;
    DotF32Fn    dot_f32;
    AxpyF64Fn   axpy_f64;   // y[i] += alpha * x[i]
    ScaleF64Fn  scale_f64;  // x[i] *= alpha
    SumF64Fn    sum_f64;
    MaxF64Fn    max_f64;    // n must be >= 1
    SqDistF64Fn sqdist_f64; // sum((a[i]-b[i])^2)
    const char* isa;        // "scalar" | "avx2" | "neon"
};

// Table of scalar reference kernels (always available).
const Ops& scalar_ops();

// Table chosen for the host CPU at first call (sticky). Honors force_scalar().
const Ops& active_ops();

// Test hook: route active_ops() to the scalar table (true) or re-detect (false).
void force_scalar(bool on);

// Name of the ISA tier active_ops() currently resolves to.
const char* active_isa();

// ---------------------------------------------------------------------------
// Convenience wrappers over the active table
// ---------------------------------------------------------------------------

inline double dot(const double* a, const double* b, std::size_t n) {
    return active_ops().dot_f64(a, b, n);
}
inline double dot(const float* a, const float* b, std::size_t n) {
    return active_ops().dot_f32(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    active_ops().axpy_f64(alpha, x, y, n);
}
inline void scale(double alpha, double* x, std::size_t n) {
    active_ops().scale_f64(alpha, x, n);
}
inline double sum(const double* x, std::size_t n) {
    return active_ops().sum_f64(x, n);
}
inline double max(const double* x, std::size_t n) {
    return active_ops().max_f64(x, n);
}
inline double sqdist(const double* a, const double* b, std::size_t n) {
    return active_ops().sqdist_f64(a, b, n);
}

}  // namespace memesense::kernels
