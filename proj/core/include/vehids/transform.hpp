#pragma once

// Tabular-to-image transform: per-feature quantile normalization onto 0..255
// and assembly of consecutive records into H x W x 3 images.

#include "vehids/artifact.hpp"
#include "vehids/ingest.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace vehids {

// Upper bound on the grid. A fit on n records uses at most 2n-1 knots (every
// sample and every midpoint), so up to 1e5 records the map is exact.
inline constexpr std::size_t default_n_quantiles = 200001;
inline constexpr double default_clip_sigma = 5.0;

struct QuantileMap {
    std::size_t n_quantiles = default_n_quantiles;  // knots actually stored
    double clip_sigma = default_clip_sigma;
    // references[f][k]: the k/(n_quantiles-1) empirical quantile of feature f.
    std::vector<std::vector<double>> references;
    // Free-form tag naming the data the map was fitted on, e.g. "fold 2 train".
    std::string provenance;

    std::size_t feature_count() const { return references.size(); }
};

// Fit on training-split records only; the provenance tag records which split.
QuantileMap fit_quantile_map(std::span<const TrafficRecord* const> records,
                             std::size_t n_quantiles = default_n_quantiles,
                             double clip_sigma = default_clip_sigma,
                             std::string provenance = "train");
QuantileMap fit_quantile_map(const RecordList& records,
                             std::size_t n_quantiles = default_n_quantiles,
                             double clip_sigma = default_clip_sigma,
                             std::string provenance = "train");

// Empirical CDF position of `value` against sorted reference values: linear
// interpolation between references, midpoint rank over runs of equal
// references, 0 below the first and 1 above the last.
double cdf_position(std::span<const double> references, double value);

// Position -> standard-normal z, clamped to +-clip_sigma, mapped linearly to
// [0,255] and rounded half away from zero.
std::uint8_t intensity_from_position(double position, double clip_sigma);

std::vector<std::uint8_t> apply_quantile_map(const QuantileMap& map, std::span<const double> raw);
void apply_quantile_map(const QuantileMap& map, std::span<const double> raw,
                        std::span<std::uint8_t> out);

Bytes quantile_map_to_bytes(const QuantileMap& map);
QuantileMap quantile_map_from_bytes(std::span<const std::uint8_t> payload);

struct ChunkSpec {
    static constexpr std::size_t channels = 3;
    std::size_t height = 9;
    std::size_t width = 9;  // = feature count

    std::size_t chunk_len() const { return channels * height; }
    std::size_t pixel_count() const { return channels * height * width; }
    void validate() const;

    static ChunkSpec car_hacking() { return {9, 9}; }
    static ChunkSpec flow() { return {20, 20}; }
};

// Pixels are stored channel-major: index = (channel * H + row) * W + col.
// Record s of a chunk, feature f lands at channel s / H, row s % H, column f,
// which makes the buffer the chunk's records laid end to end.
struct ImageChunk {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
    int label = 0;
    std::size_t chunk_index = 0;
    double first_timestamp = 0.0;
    double last_timestamp = 0.0;

    std::uint8_t at(std::size_t channel, std::size_t row, std::size_t col) const
    {
        return pixels[(channel * height + row) * width + col];
    }
};

enum class LabelRule {
    // Any attack record makes the chunk an attack chunk; the most frequent
    // attack class wins.
    any_attack,
    // Most frequent label overall, Normal included.
    plurality,
};

// Ties break to the lowest class index.
int label_chunk(std::span<const int> labels, LabelRule rule = LabelRule::any_attack);

// A chunk before pixel mapping: which records it covers and its label.
struct ChunkSlice {
    std::size_t chunk_index = 0;
    std::size_t first_record = 0;
    int label = 0;
};

// Non-overlapping groups of chunk_len consecutive records; the trailing
// partial group is dropped.
std::vector<ChunkSlice> plan_chunks(const RecordList& records, const ChunkSpec& spec,
                                    LabelRule rule = LabelRule::any_attack);

ImageChunk render_chunk(const RecordList& records, const ChunkSlice& slice, const ChunkSpec& spec,
                        const QuantileMap& map);

std::vector<ImageChunk> chunk_records(const RecordList& records, const ChunkSpec& spec,
                                      const QuantileMap& map,
                                      LabelRule rule = LabelRule::any_attack);

// 8-bit RGB PNG: pixel (row, col) = (channel0, channel1, channel2).
void export_image(const ImageChunk& image, const std::filesystem::path& path);
ImageChunk import_image(const std::filesystem::path& path);

std::string image_file_name(const ImageChunk& image, const std::vector<std::string>& class_names);

// Writes chunk_<index>_<class>.png files plus index.csv
// (chunk_index,label,first_timestamp,last_timestamp).
class ImageSetWriter {
public:
    ImageSetWriter(std::filesystem::path dir, std::vector<std::string> class_names);

    void write(const ImageChunk& image);
    std::size_t count() const { return count_; }
    const std::filesystem::path& index_path() const { return index_path_; }

private:
    std::filesystem::path dir_;
    std::filesystem::path index_path_;
    std::vector<std::string> class_names_;
    std::ofstream index_;
    std::size_t count_ = 0;
};

} // namespace vehids
