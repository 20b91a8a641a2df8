#include "corereft/binio.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "corereft/error.hpp"

namespace corereft::io {

BinaryWriter::BinaryWriter(std::string_view magic) {
    if (magic.size() != 8) throw Error(ErrorKind::argument, "container magic must be 8 bytes");
    buf_.append(magic);
}

void BinaryWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::doubles(std::span<const double> v) {
    u64(v.size());
    buf_.reserve(buf_.size() + 8 * v.size());
    for (double x : v) f64(x);
}

void BinaryWriter::json(const nlohmann::json& j) { blob(j.dump()); }

void BinaryWriter::blob(std::string_view bytes) {
    u64(bytes.size());
    buf_.append(bytes);
}

BinaryReader::BinaryReader(std::string_view bytes, std::string_view magic) : data_(bytes) {
    if (data_.size() < magic.size() || data_.substr(0, magic.size()) != magic) {
        const std::string got(data_.substr(0, std::min<std::size_t>(8, data_.size())));
        throw Error(ErrorKind::version,
                    "expected magic '" + std::string(magic) + "', found '" + got + "'");
    }
    pos_ = magic.size();
}

void BinaryReader::need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
        throw Error(ErrorKind::format, std::string("truncated stream while reading ") + what);
    }
}

std::uint64_t BinaryReader::u64() {
    need(8, "integer");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> BinaryReader::doubles() {
    const std::uint64_t n = u64();
    if (n > (data_.size() - pos_) / 8) {
        throw Error(ErrorKind::format, "truncated stream while reading doubles");
    }
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
}

nlohmann::json BinaryReader::json() {
    const std::string text = blob();
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("bad JSON header: ") + e.what());
    }
}

std::string BinaryReader::blob() {
    const std::uint64_t n = u64();
    need(n, "blob");
    std::string out(data_.substr(pos_, n));
    pos_ += n;
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "write failed for '" + path + "'");
}

}  // namespace corereft::io
