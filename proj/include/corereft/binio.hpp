#pragma once

// Checkpoint container rules shared by encoder, intervention and experiment
// files:
//
//   bytes 0..7   ASCII magic, e.g. "COREENC1" (last char is the format version)
//   u64          length N of the JSON header
//   N bytes      UTF-8 JSON header
//   ...          payload: u64 counts followed by little-endian IEEE-754 doubles
//
// All integers are little-endian u64.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace corereft::io {

class BinaryWriter {
public:
    explicit BinaryWriter(std::string_view magic);

    void u64(std::uint64_t v);
    void f64(double v);
    void doubles(std::span<const double> v);  // u64 count, then values
    void json(const nlohmann::json& j);
    void blob(std::string_view bytes);  // u64 length, then raw bytes

    const std::string& bytes() const noexcept { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class BinaryReader {
public:
    // Throws ErrorKind::version if the magic does not match.
    BinaryReader(std::string_view bytes, std::string_view magic);

    std::uint64_t u64();
    double f64();
    std::vector<double> doubles();
    nlohmann::json json();
    std::string blob();

    bool at_end() const noexcept { return pos_ == data_.size(); }

private:
    void need(std::size_t n, const char* what);

    std::string_view data_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace corereft::io
