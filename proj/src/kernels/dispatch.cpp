// Runtime kernel selection. Detection runs once; force_scalar() lets tests
// pin the reference path and compare it against the SIMD path.

#include "memesense/kernels.hpp"

#include <atomic>

namespace memesense::kernels {

#if defined(__x86_64__) || defined(_M_X64)
const Ops& avx2_ops();  // defined in kernels_avx2.cpp
#endif
#if defined(__aarch64__)
const Ops& neon_ops();  // defined in kernels_neon.cpp
#endif

namespace {

std::atomic<bool> g_force_scalar{false};

const Ops& detect() {
#if defined(__x86_64__) || defined(_M_X64)
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        return avx2_ops();
    }
#endif
#if defined(__aarch64__)
    return neon_ops();  // NEON is architecturally guaranteed on aarch64
#endif
    return scalar_ops();
}

}  // namespace

const Ops& active_ops() {
    if (g_force_scalar.load(std::memory_order_relaxed)) return scalar_ops();
    static const Ops& detected = detect();
    return detected;
}

void force_scalar(bool on) {
    g_force_scalar.store(on, std::memory_order_relaxed);
}

const char* active_isa() {
    return active_ops().isa;
}

}  // namespace memesense::kernels
