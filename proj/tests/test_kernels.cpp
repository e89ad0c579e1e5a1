#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "memesense/kernels.hpp"
#include "memesense/rng.hpp"

using namespace memesense;

namespace {

// Sizes chosen to hit empty input, sub-vector-width tails, exact multiples,
// and off-by-one remainders for both 4-wide and 2-wide lanes.
const std::vector<std::size_t> kSizes = {0, 1, 2, 3, 4, 5, 7, 8, 15, 16, 17,
                                         31, 32, 33, 63, 64, 67, 255, 1024};

std::vector<double> random_f64(std::size_t n, rng::Rng& gen, double scale = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * (gen.uniform() - 0.5);
    return v;
}

std::vector<float> random_f32(std::size_t n, rng::Rng& gen, double scale = 2.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(scale * (gen.uniform() - 0.5));
    return v;
}

bool close_rel(double a, double b, double tol) {
    const double diff = std::fabs(a - b);
    const double mag = std::max({std::fabs(a), std::fabs(b), 1.0});
    return diff <= tol * mag;
}

}  // namespace

TEST_CASE("dispatch reports a known ISA tier and honors force_scalar") {
    kernels::force_scalar(false);
    const std::string isa = kernels::active_isa();
    CHECK((isa == "scalar" || isa == "avx2" || isa == "neon"));
    kernels::force_scalar(true);
    CHECK(std::string(kernels::active_isa()) == "scalar");
    kernels::force_scalar(false);
    CHECK(std::string(kernels::active_isa()) == isa);
}

TEST_CASE("scalar vs dispatched kernels agree elementwise / to summation-order tolerance") {
    kernels::force_scalar(false);
    const auto& ref = kernels::scalar_ops();
    const auto& act = kernels::active_ops();
    rng::Rng gen(42);

    for (std::size_t n : kSizes) {
        CAPTURE(n);
        const auto a = random_f64(n, gen);
        const auto b = random_f64(n, gen);
        const auto af = random_f32(n, gen);
        const auto bf = random_f32(n, gen);

        CHECK(close_rel(ref.dot_f64(a.data(), b.data(), n),
                        act.dot_f64(a.data(), b.data(), n), 1e-12));
        CHECK(close_rel(ref.dot_f32(af.data(), bf.data(), n),
                        act.dot_f32(af.data(), bf.data(), n), 1e-12));
        CHECK(close_rel(ref.sum_f64(a.data(), n), act.sum_f64(a.data(), n), 1e-12));
        CHECK(close_rel(ref.sqdist_f64(a.data(), b.data(), n),
                        act.sqdist_f64(a.data(), b.data(), n), 1e-12));

        if (n >= 1) {
            // max is order-independent: must match exactly.
            CHECK(ref.max_f64(a.data(), n) == act.max_f64(a.data(), n));
        }

        // axpy and scale are elementwise: bitwise-identical results required
        // (scalar fallback uses the same mul/add per lane; FMA in the vector
        // body may differ in the last ulp, so allow a tiny relative slack).
        auto y1 = random_f64(n, gen);
        auto y2 = y1;
        ref.axpy_f64(0.37, a.data(), y1.data(), n);
        act.axpy_f64(0.37, a.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(close_rel(y1[i], y2[i], 1e-14));
        }

        auto s1 = a;
        auto s2 = a;
        ref.scale_f64(-1.75, s1.data(), n);
        act.scale_f64(-1.75, s2.data(), n);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(s1[i] == s2[i]);  // plain multiply: exact
        }
    }
}

TEST_CASE("scalar kernels match straightforward formulas") {
    const auto& ref = kernels::scalar_ops();

    const std::vector<double> x = {1.0, 2.0, 3.0};
    const std::vector<double> y = {4.0, -5.0, 6.0};
    CHECK(ref.dot_f64(x.data(), y.data(), 3) == doctest::Approx(4.0 - 10.0 + 18.0));
    CHECK(ref.sum_f64(x.data(), 3) == doctest::Approx(6.0));
    CHECK(ref.max_f64(y.data(), 3) == doctest::Approx(6.0));
    CHECK(ref.sqdist_f64(x.data(), y.data(), 3) ==
          doctest::Approx(9.0 + 49.0 + 9.0));

    std::vector<double> acc = {1.0, 1.0, 1.0};
    ref.axpy_f64(2.0, x.data(), acc.data(), 3);
    CHECK(acc[0] == doctest::Approx(3.0));
    CHECK(acc[1] == doctest::Approx(5.0));
    CHECK(acc[2] == doctest::Approx(7.0));

    std::vector<double> sc = {2.0, -4.0};
    ref.scale_f64(0.5, sc.data(), 2);
    CHECK(sc[0] == doctest::Approx(1.0));
    CHECK(sc[1] == doctest::Approx(-2.0));
}

TEST_CASE("dot on empty input is zero") {
    kernels::force_scalar(false);
    CHECK(kernels::dot(static_cast<const double*>(nullptr),
                       static_cast<const double*>(nullptr), 0) == 0.0);
}
