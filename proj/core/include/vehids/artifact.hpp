#pragma once

// Versioned, hash-verified binary container shared by every persisted object
// (models, ensembles, quantile maps).
//
// Layout, all integers little-endian:
//   magic   "VHID"          4 bytes
//   version u32             container format version
//   kind    u32             ArtifactKind
//   length  u64             payload byte count
//   payload length bytes
//   digest  32 bytes        SHA-256 of payload

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vehids {

using Bytes = std::vector<std::uint8_t>;

enum class ArtifactKind : std::uint32_t {
    cnn_model = 1,
    ensemble = 2,
    quantile_map = 3,
};

inline constexpr std::uint32_t artifact_format_version = 1;

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(std::string_view text);

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f32(float v);
    void f64(double v);
    void str(std::string_view s);
    void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void f32_array(std::span<const float> v);
    void f64_array(std::span<const double> v);

    const Bytes& bytes() const& { return buf_; }
    Bytes bytes() && { return std::move(buf_); }

private:
    Bytes buf_;
};

// Bounds-checked reader; running off the end throws CorruptionError.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    float f32();
    double f64();
    std::string str();
    std::span<const std::uint8_t> raw(std::size_t n);
    std::vector<float> f32_array();
    std::vector<double> f64_array();

    bool at_end() const noexcept { return pos_ == data_.size(); }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

Bytes encode_artifact(ArtifactKind kind, std::span<const std::uint8_t> payload);

// Verifies magic, version, kind, length, and digest; returns the payload.
Bytes decode_artifact(std::span<const std::uint8_t> container, ArtifactKind expected);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

void save_artifact(const std::filesystem::path& path, ArtifactKind kind,
                   std::span<const std::uint8_t> payload);
Bytes load_artifact(const std::filesystem::path& path, ArtifactKind expected);

} // namespace vehids
