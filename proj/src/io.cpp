#include "memesense/io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace memesense::io {

namespace {

[[noreturn]] void fail(const std::string& what, const std::string& path) {
    throw std::runtime_error(what + ": " + path);
}

}  // namespace

void write_f32_raw(const std::string& path, const std::vector<float>& values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open tensor file for writing", path);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) fail("short write to tensor file", path);
}

std::vector<float> read_f32_raw(const std::string& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) fail("cannot open tensor file", path);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != expected_count * sizeof(float)) {
        throw std::runtime_error("tensor file size mismatch: " + path + " holds " +
                                 std::to_string(bytes / sizeof(float)) +
                                 " floats, expected " + std::to_string(expected_count));
    }
    std::vector<float> values(expected_count);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(bytes));
    if (!in) fail("short read from tensor file", path);
    return values;
}

void write_f32(const std::string& path, const std::vector<double>& values) {
    std::vector<float> narrow(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        narrow[i] = static_cast<float>(values[i]);
    }
    write_f32_raw(path, narrow);
}

std::vector<double> read_f32(const std::string& path, std::size_t expected_count) {
    const std::vector<float> narrow = read_f32_raw(path, expected_count);
    std::vector<double> wide(narrow.size());
    for (std::size_t i = 0; i < narrow.size(); ++i) {
        wide[i] = static_cast<double>(narrow[i]);
    }
    return wide;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open file for writing", path);
    out << content;
    if (!out) fail("short write", path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open file", path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace memesense::io
