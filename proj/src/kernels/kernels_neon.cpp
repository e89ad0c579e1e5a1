// NEON kernels for aarch64 (128-bit lanes: 2 doubles per vector). NEON is
// baseline on aarch64 so no runtime feature check is needed beyond the
// architecture itself.

#include "memesense/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

namespace memesense::kernels {

namespace {

double dot_f64_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

double dot_f32_neon(const float* a, const float* b, std::size_t n) {
    // Widen to f64 so the accumulator matches the scalar reference.
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t va = vcvt_f64_f32(vld1_f32(a + i));
        float64x2_t vb = vcvt_f64_f32(vld1_f32(b + i));
        acc = vfmaq_f64(acc, va, vb);
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

void axpy_f64_neon(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t vy = vld1q_f64(y + i);
        vy = vfmaq_f64(vy, va, vld1q_f64(x + i));
        vst1q_f64(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f64_neon(double alpha, double* x, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(x + i, vmulq_f64(vld1q_f64(x + i), va));
    }
    for (; i < n; ++i) x[i] *= alpha;
}

double sum_f64_neon(const double* x, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

double max_f64_neon(const double* x, std::size_t n) {
    std::size_t i = 0;
    double m;
    if (n >= 2) {
        float64x2_t vm = vld1q_f64(x);
        for (i = 2; i + 2 <= n; i += 2) vm = vmaxq_f64(vm, vld1q_f64(x + i));
        m = vmaxvq_f64(vm);
    } else {
        m = x[0];
        i = 1;
    }
    for (; i < n; ++i)
        if (x[i] > m) m = x[i];
    return m;
}

double sqdist_f64_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t d = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
        acc = vfmaq_f64(acc, d, d);
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace

const Ops& neon_ops() {
    static const Ops table = {
        dot_f64_neon, dot_f32_neon, axpy_f64_neon, scale_f64_neon,
        sum_f64_neon, max_f64_neon, sqdist_f64_neon, "neon",
    };
    return table;
}

}  // namespace memesense::kernels

#endif  // __aarch64__
