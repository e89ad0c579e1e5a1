#pragma once

// Flat tensor file I/O. On-disk format everywhere: row-major little-endian
// 32-bit floats. In memory we carry doubles whose values are exactly
// f32-representable (see round_f32), so narrowing on save and widening on
// load are both lossless and round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

namespace memesense::io {

// Round a double to the nearest f32 value, returned as double. Applied after
// every parameter update so in-memory parameters always match their f32
// serialization exactly.
inline double round_f32(double x) {
    return static_cast<double>(static_cast<float>(x));
}

inline void round_f32_inplace(std::vector<double>& v) {
    for (auto& x : v) x = round_f32(x);
}

// Throws std::runtime_error on open/size failures; messages name the path.
void write_f32(const std::string& path, const std::vector<double>& values);
std::vector<double> read_f32(const std::string& path, std::size_t expected_count);

void write_f32_raw(const std::string& path, const std::vector<float>& values);
std::vector<float> read_f32_raw(const std::string& path, std::size_t expected_count);

// Whole-file text helpers (UTF-8, no transformation).
void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

}  // namespace memesense::io
