// Scalar reference kernels. These define the semantics the SIMD variants must
// reproduce; keep them boring and obviously correct.

#include "memesense/kernels.hpp"

namespace memesense::kernels {

namespace {

double dot_f64_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f32_scalar(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;  // double accumulator: f32 inputs, f64 math
    for (std::size_t i = 0; i < n; ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void axpy_f64_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f64_scalar(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double sum_f64_scalar(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

double max_f64_scalar(const double* x, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i)
        if (x[i] > m) m = x[i];
    return m;
}

double sqdist_f64_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table = {
        dot_f64_scalar, dot_f32_scalar, axpy_f64_scalar, scale_f64_scalar,
        sum_f64_scalar, max_f64_scalar, sqdist_f64_scalar, "scalar",
    };
    return table;
}

}  // namespace memesense::kernels
