#include "vehids/artifact.hpp"

#include "vehids/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace vehids {

namespace {

constexpr std::uint8_t magic[4] = {'V', 'H', 'I', 'D'};
constexpr std::size_t header_size = 4 + 4 + 4 + 8;
constexpr std::size_t digest_size = 32;

std::array<std::uint8_t, digest_size> sha256(std::span<const std::uint8_t> data)
{
    std::array<std::uint8_t, digest_size> out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != digest_size)
        throw std::runtime_error("sha256 digest failed");
    return out;
}

const char* kind_name(ArtifactKind k)
{
    switch (k) {
    case ArtifactKind::cnn_model: return "cnn model";
    case ArtifactKind::ensemble: return "ensemble";
    case ArtifactKind::quantile_map: return "quantile map";
    }
    return "unknown";
}

} // namespace

std::string sha256_hex(std::span<const std::uint8_t> data)
{
    static constexpr char hex[] = "0123456789abcdef";
    auto d = sha256(data);
    std::string s;
    s.reserve(2 * d.size());
    for (auto b : d) {
        s.push_back(hex[b >> 4]);
        s.push_back(hex[b & 0xf]);
    }
    return s;
}

std::string sha256_hex(std::string_view text)
{
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ByteWriter::u32(std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s)
{
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteWriter::f32_array(std::span<const float> v)
{
    u64(v.size());
    for (float x : v)
        f32(x);
}

void ByteWriter::f64_array(std::span<const double> v)
{
    u64(v.size());
    for (double x : v)
        f64(x);
}

void ByteReader::need(std::size_t n) const
{
    if (n > data_.size() - pos_)
        throw CorruptionError("unexpected end of data (need " + std::to_string(n) + " bytes, " +
                              std::to_string(data_.size() - pos_) + " left)");
}

std::uint8_t ByteReader::u8()
{
    need(1);
    return data_[pos_++];
}

std::uint32_t ByteReader::u32()
{
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64()
{
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str()
{
    auto n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n)
{
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::vector<float> ByteReader::f32_array()
{
    auto n = u64();
    need(n * 4);
    std::vector<float> v(n);
    for (auto& x : v)
        x = f32();
    return v;
}

std::vector<double> ByteReader::f64_array()
{
    auto n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v)
        x = f64();
    return v;
}

Bytes encode_artifact(ArtifactKind kind, std::span<const std::uint8_t> payload)
{
    ByteWriter w;
    w.raw(magic);
    w.u32(artifact_format_version);
    w.u32(static_cast<std::uint32_t>(kind));
    w.u64(payload.size());
    w.raw(payload);
    auto d = sha256(payload);
    w.raw(d);
    return std::move(w).bytes();
}

Bytes decode_artifact(std::span<const std::uint8_t> container, ArtifactKind expected)
{
    if (container.size() < header_size)
        throw CorruptionError("artifact truncated: header incomplete");
    if (std::memcmp(container.data(), magic, 4) != 0)
        throw CorruptionError("not a vehids artifact (bad magic)");

    ByteReader r(container.subspan(4));
    auto version = r.u32();
    if (version != artifact_format_version)
        throw VersionError("artifact format version " + std::to_string(version) +
                           " is not supported by this reader (expects " +
                           std::to_string(artifact_format_version) + "); re-export it");
    auto kind = static_cast<ArtifactKind>(r.u32());
    if (kind != expected)
        throw DataError(std::string("artifact holds a ") + kind_name(kind) + ", expected a " +
                        kind_name(expected));
    auto len = r.u64();
    if (r.remaining() < digest_size || r.remaining() - digest_size != len)
        throw CorruptionError("artifact truncated or padded: payload length " +
                              std::to_string(len) + " does not match file size");
    auto payload = r.raw(len);
    auto stored = r.raw(digest_size);
    auto actual = sha256(payload);
    if (!std::equal(stored.begin(), stored.end(), actual.begin()))
        throw CorruptionError("artifact hash mismatch");
    return Bytes(payload.begin(), payload.end());
}

Bytes read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out)
        throw DataError("write failed: " + path.string());
}

void write_text_file(const std::filesystem::path& path, std::string_view text)
{
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path)
{
    auto b = read_file(path);
    return std::string(b.begin(), b.end());
}

void save_artifact(const std::filesystem::path& path, ArtifactKind kind,
                   std::span<const std::uint8_t> payload)
{
    write_file(path, encode_artifact(kind, payload));
}

Bytes load_artifact(const std::filesystem::path& path, ArtifactKind expected)
{
    auto bytes = read_file(path);
    try {
        return decode_artifact(bytes, expected);
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    } catch (const VersionError& e) {
        throw VersionError(path.string() + ": " + e.what());
    }
}

} // namespace vehids
