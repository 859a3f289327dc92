#include "vehids/transform.hpp"

#include "vehids/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace vehids {

namespace {

constexpr std::uint32_t quantile_map_payload_version = 1;

} // namespace

QuantileMap fit_quantile_map(std::span<const TrafficRecord* const> records, std::size_t n_quantiles,
                             double clip_sigma, std::string provenance)
{
    if (records.empty())
        throw DataError("cannot fit a quantile map on zero records");
    if (n_quantiles < 2)
        throw ConfigError("n_quantiles must be at least 2");
    if (!(clip_sigma > 0.0))
        throw ConfigError("clip_sigma must be positive");

    const auto n_features = records.front()->features.size();
    const auto n = records.size();
    n_quantiles = std::max<std::size_t>(2, std::min(n_quantiles, 2 * n - 1));
    QuantileMap map;
    map.n_quantiles = n_quantiles;
    map.clip_sigma = clip_sigma;
    map.provenance = std::move(provenance);
    map.references.assign(n_features, std::vector<double>(n_quantiles));

    std::vector<double> column(n);
    for (std::size_t f = 0; f < n_features; ++f) {
        for (std::size_t i = 0; i < n; ++i) {
            if (records[i]->features.size() != n_features)
                throw ShapeError("record " + std::to_string(i) + " has " +
                                 std::to_string(records[i]->features.size()) + " features, expected " +
                                 std::to_string(n_features));
            column[i] = records[i]->features[f];
        }
        std::sort(column.begin(), column.end());
        auto& refs = map.references[f];
        for (std::size_t k = 0; k < n_quantiles; ++k) {
            const double pos = static_cast<double>(k) * static_cast<double>(n - 1) /
                               static_cast<double>(n_quantiles - 1);
            const auto lo = std::min(static_cast<std::size_t>(pos), n - 1);
            const double frac = pos - static_cast<double>(lo);
            if (frac == 0.0 || lo + 1 >= n)
                refs[k] = column[lo];
            else if (frac == 0.5)
                refs[k] = std::midpoint(column[lo], column[lo + 1]);
            else
                refs[k] = column[lo] + frac * (column[lo + 1] - column[lo]);
        }
        // interpolation rounding must not break monotonicity
        for (std::size_t k = 1; k < n_quantiles; ++k)
            refs[k] = std::max(refs[k], refs[k - 1]);
    }
    return map;
}

QuantileMap fit_quantile_map(const RecordList& records, std::size_t n_quantiles, double clip_sigma,
                             std::string provenance)
{
    std::vector<const TrafficRecord*> ptrs;
    ptrs.reserve(records.size());
    for (const auto& r : records)
        ptrs.push_back(&r);
    return fit_quantile_map(ptrs, n_quantiles, clip_sigma, std::move(provenance));
}

namespace {

// Position of `value` given lo = lower_bound and hi = upper_bound in refs.
double position_from_bounds(std::span<const double> refs, double value, std::size_t lo, std::size_t hi)
{
    const auto n = refs.size();
    if (value < refs.front())
        return 0.0;
    if (value > refs.back())
        return 1.0;
    double index;
    if (lo < hi) {
        index = static_cast<double>(lo + hi - 1) / 2.0;
    } else {
        const double a = refs[lo - 1];
        const double b = refs[lo];
        index = static_cast<double>(lo - 1) + (value - a) / (b - a);
    }
    return index / static_cast<double>(n - 1);
}

} // namespace

double cdf_position(std::span<const double> refs, double value)
{
    const auto lo = static_cast<std::size_t>(std::lower_bound(refs.begin(), refs.end(), value) - refs.begin());
    const auto hi = static_cast<std::size_t>(std::upper_bound(refs.begin(), refs.end(), value) - refs.begin());
    return position_from_bounds(refs, value, lo, hi);
}

std::uint8_t intensity_from_position(double position, double clip_sigma)
{
    double z;
    if (position <= 0.0)
        z = -clip_sigma;
    else if (position >= 1.0)
        z = clip_sigma;
    else if (position == 0.5)
        z = 0.0;
    else
        z = std::clamp(boost::math::quantile(boost::math::normal_distribution<double>(), position),
                       -clip_sigma, clip_sigma);
    const double scaled = (z + clip_sigma) / (2.0 * clip_sigma) * 255.0;
    const double rounded = std::floor(scaled + 0.5);
    return static_cast<std::uint8_t>(std::clamp(rounded, 0.0, 255.0));
}

void apply_quantile_map(const QuantileMap& map, std::span<const double> raw, std::span<std::uint8_t> out)
{
    if (raw.size() != map.feature_count())
        throw ShapeError("quantile map expects " + std::to_string(map.feature_count()) +
                         " features, got " + std::to_string(raw.size()));
    if (out.size() != raw.size())
        throw ShapeError("output span length mismatch");
    for (std::size_t f = 0; f < raw.size(); ++f)
        out[f] = intensity_from_position(cdf_position(map.references[f], raw[f]), map.clip_sigma);
}

std::vector<std::uint8_t> apply_quantile_map(const QuantileMap& map, std::span<const double> raw)
{
    std::vector<std::uint8_t> out(raw.size());
    apply_quantile_map(map, raw, out);
    return out;
}

Bytes quantile_map_to_bytes(const QuantileMap& map)
{
    ByteWriter w;
    w.u32(quantile_map_payload_version);
    w.u64(map.n_quantiles);
    w.f64(map.clip_sigma);
    w.str(map.provenance);
    w.u64(map.references.size());
    for (const auto& refs : map.references)
        w.f64_array(refs);
    return std::move(w).bytes();
}

QuantileMap quantile_map_from_bytes(std::span<const std::uint8_t> payload)
{
    ByteReader r(payload);
    if (auto v = r.u32(); v != quantile_map_payload_version)
        throw VersionError("quantile map payload version " + std::to_string(v) + " unsupported");
    QuantileMap map;
    map.n_quantiles = r.u64();
    map.clip_sigma = r.f64();
    map.provenance = r.str();
    auto n = r.u64();
    if (n > r.remaining())
        throw CorruptionError("quantile map feature count out of range");
    map.references.resize(n);
    for (auto& refs : map.references) {
        refs = r.f64_array();
        if (refs.size() != map.n_quantiles)
            throw CorruptionError("quantile map reference length mismatch");
    }
    if (!r.at_end())
        throw CorruptionError("trailing bytes after quantile map");
    return map;
}

void ChunkSpec::validate() const
{
    if (height == 0 || width == 0)
        throw ConfigError("chunk spec needs positive height and width");
}

int label_chunk(std::span<const int> labels, LabelRule rule)
{
    if (labels.empty())
        throw DataError("cannot label an empty chunk");
    int max_label = *std::max_element(labels.begin(), labels.end());
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(max_label, 0)) + 1, 0);
    for (int l : labels) {
        if (l < 0)
            throw DataError("negative class label in chunk");
        ++counts[static_cast<std::size_t>(l)];
    }
    const std::size_t first = rule == LabelRule::any_attack && max_label > 0 ? 1 : 0;
    std::size_t best = first;
    for (std::size_t c = first + 1; c < counts.size(); ++c)
        if (counts[c] > counts[best])
            best = c;
    return static_cast<int>(best);
}

std::vector<ChunkSlice> plan_chunks(const RecordList& records, const ChunkSpec& spec, LabelRule rule)
{
    spec.validate();
    const auto len = spec.chunk_len();
    const auto n_chunks = records.size() / len;
    std::vector<ChunkSlice> out;
    out.reserve(n_chunks);
    std::vector<int> labels(len);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        for (std::size_t s = 0; s < len; ++s)
            labels[s] = records[c * len + s].label;
        out.push_back({c, c * len, label_chunk(labels, rule)});
    }
    return out;
}

ImageChunk render_chunk(const RecordList& records, const ChunkSlice& slice, const ChunkSpec& spec,
                        const QuantileMap& map)
{
    if (map.feature_count() != spec.width)
        throw ShapeError("chunk width " + std::to_string(spec.width) + " != quantile map features " +
                         std::to_string(map.feature_count()));
    const auto len = spec.chunk_len();
    if (slice.first_record + len > records.size())
        throw ShapeError("chunk runs past the end of the record list");

    ImageChunk img;
    img.height = spec.height;
    img.width = spec.width;
    img.pixels.resize(spec.pixel_count());
    img.label = slice.label;
    img.chunk_index = slice.chunk_index;
    img.first_timestamp = records[slice.first_record].timestamp;
    img.last_timestamp = records[slice.first_record + len - 1].timestamp;
    for (std::size_t s = 0; s < len; ++s) {
        const auto& rec = records[slice.first_record + s];
        if (rec.features.size() != spec.width)
            throw ShapeError("record has " + std::to_string(rec.features.size()) +
                             " features, chunk width is " + std::to_string(spec.width));
        apply_quantile_map(map, rec.features,
                           std::span(img.pixels).subspan(s * spec.width, spec.width));
    }
    return img;
}

namespace {

// Smallest position at which each intensity level starts, found by bisection
// on intensity_from_position so table lookups reproduce it exactly.
std::array<double, 255> intensity_steps(double clip_sigma)
{
    std::array<double, 255> steps{};
    for (int k = 1; k <= 255; ++k) {
        double lo = 0.0, hi = 1.0;
        for (;;) {
            const double mid = lo + (hi - lo) / 2;
            if (mid <= lo || mid >= hi)
                break;
            (intensity_from_position(mid, clip_sigma) >= k ? hi : lo) = mid;
        }
        steps[static_cast<std::size_t>(k - 1)] = hi;
    }
    return steps;
}

// Pixels of the first `count` records, row-major, one feature column at a
// time with the queries swept in sorted order.
std::vector<std::uint8_t> map_leading_records(const RecordList& records, std::size_t count, const QuantileMap& map)
{
    const auto width = map.feature_count();
    const auto steps = intensity_steps(map.clip_sigma);
    std::vector<std::uint8_t> pixels(count * width);
    std::vector<std::pair<double, std::size_t>> column(count);
    for (std::size_t f = 0; f < width; ++f) {
        const std::span<const double> refs = map.references[f];
        for (std::size_t i = 0; i < count; ++i)
            column[i] = {records[i].features[f], i};
        std::sort(column.begin(), column.end());
        std::size_t lo = 0, hi = 0;
        for (const auto& [value, i] : column) {
            while (lo < refs.size() && refs[lo] < value)
                ++lo;
            hi = std::max(hi, lo);
            while (hi < refs.size() && refs[hi] <= value)
                ++hi;
            const double pos = position_from_bounds(refs, value, lo, hi);
            pixels[i * width + f] =
                static_cast<std::uint8_t>(std::upper_bound(steps.begin(), steps.end(), pos) - steps.begin());
        }
    }
    return pixels;
}

} // namespace

std::vector<ImageChunk> chunk_records(const RecordList& records, const ChunkSpec& spec,
                                      const QuantileMap& map, LabelRule rule)
{
    auto slices = plan_chunks(records, spec, rule);
    if (map.feature_count() != spec.width)
        throw ShapeError("chunk width " + std::to_string(spec.width) + " != quantile map features " +
                         std::to_string(map.feature_count()));
    const auto len = spec.chunk_len();
    const auto used = slices.size() * len;
    for (std::size_t i = 0; i < used; ++i)
        if (records[i].features.size() != spec.width)
            throw ShapeError("record has " + std::to_string(records[i].features.size()) +
                             " features, chunk width is " + std::to_string(spec.width));
    const auto pixels = map_leading_records(records, used, map);

    std::vector<ImageChunk> out;
    out.reserve(slices.size());
    for (const auto& s : slices) {
        ImageChunk img;
        img.height = spec.height;
        img.width = spec.width;
        img.label = s.label;
        img.chunk_index = s.chunk_index;
        img.first_timestamp = records[s.first_record].timestamp;
        img.last_timestamp = records[s.first_record + len - 1].timestamp;
        const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(s.first_record * spec.width);
        img.pixels.assign(first, first + static_cast<std::ptrdiff_t>(spec.pixel_count()));
        out.push_back(std::move(img));
    }
    return out;
}

} // namespace vehids
