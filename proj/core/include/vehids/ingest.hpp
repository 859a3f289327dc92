#pragma once

// Traffic record ingestion: Car-Hacking style CAN logs, CICIDS2017 style flow
// CSVs, and a synthetic CAN traffic generator with the same attack signatures.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vehids {

struct TrafficRecord {
    double timestamp = 0.0;        // seconds
    std::vector<double> features;  // raw values, schema order
    int label = 0;                 // 0 = Normal
};

using RecordList = std::vector<TrafficRecord>;

enum class ColumnKind { decimal, hex, ignore };

struct DatasetSchema {
    int version = 1;
    std::string name;
    std::vector<std::string> feature_names;
    std::vector<std::string> class_names;  // "Normal" first
    // Per-column parse override; columns not listed are decimal.
    std::map<std::string, ColumnKind> parse_rules;

    // Flow CSV only.
    std::string label_column = "Label";
    std::string timestamp_column;  // empty: use the row ordinal
    // Normalized raw label -> class name, or "drop" to skip the row.
    std::map<std::string, std::string> label_map;

    std::size_t feature_count() const { return feature_names.size(); }
    std::size_t class_count() const { return class_names.size(); }
    int class_index(std::string_view name) const;  // -1 when absent
    void validate() const;
};

inline constexpr std::string_view drop_label = "drop";

// Lower-cases and strips everything but ASCII letters and digits, so
// "Web Attack \xe2\x80\x93 XSS" and its mis-encoded variants compare equal.
std::string normalize_label(std::string_view raw);

DatasetSchema car_hacking_schema();
DatasetSchema cicids2017_schema();

// JSON schema files; see data/schemas/.
DatasetSchema parse_schema(std::string_view json_text);
DatasetSchema load_schema(const std::filesystem::path& path);
std::string schema_to_json(const DatasetSchema& schema);

// Headerless rows: timestamp, CAN ID (hex), DLC, DATA0..DATA[DLC-1] (hex), flag.
// Flag R is Normal, T is `attack_class`; a flag equal to one of the schema's
// class names selects that class directly (used by synthetic logs).
RecordList parse_can_log(std::istream& source, const DatasetSchema& schema,
                         std::string_view attack_class);
RecordList parse_can_log_file(const std::filesystem::path& path, const DatasetSchema& schema,
                              std::string_view attack_class);

struct FlowParseStats {
    std::vector<std::size_t> class_counts;
    std::size_t dropped_rows = 0;
    std::size_t non_finite_replaced = 0;
};

RecordList parse_flow_csv(std::istream& source, const DatasetSchema& schema,
                          FlowParseStats* stats = nullptr);
RecordList parse_flow_csv_file(const std::filesystem::path& path, const DatasetSchema& schema,
                               FlowParseStats* stats = nullptr);

// Throws DataError naming the first index whose timestamp goes backwards.
void check_time_order(const RecordList& records);

std::vector<std::size_t> class_counts(const RecordList& records, std::size_t num_classes);

enum class SignatureKind { normal, dos, fuzzy, spoof };

struct SynthClass {
    std::string name;
    SignatureKind kind = SignatureKind::normal;
    double proportion = 0.0;
    std::uint32_t spoof_id = 0;
    std::array<std::uint8_t, 8> payload_template{};
};

struct SynthConfig {
    int version = 1;
    std::size_t n_records = 0;
    std::vector<SynthClass> classes;  // first entry must be the normal class
    std::uint64_t rng_seed = 0;
    std::vector<std::uint32_t> id_pool;
    // Attack records are injected in bursts of this many frames.
    std::size_t burst_len = 1350;
    // Normal frames interleaved per attack frame inside a burst, capped by
    // the normal record budget.
    double interleave = 1.0;

    std::vector<std::string> class_names() const;
    void validate() const;
};

// Normal / DoS / Fuzzy / Gear / RPM with Car-Hacking style IDs.
SynthConfig default_synth_config(std::size_t n_records, std::uint64_t seed);
SynthConfig parse_synth_config(std::string_view json_text);
std::string synth_config_to_json(const SynthConfig& config);

// Exact per-class record counts (largest remainder on proportion * n).
std::vector<std::size_t> synth_class_counts(const SynthConfig& config);

RecordList generate_synthetic_can(const SynthConfig& config);

// Writes records in the CAN log layout accepted by parse_can_log, using the
// class name as the flag for non-Normal rows.
void write_can_log(std::ostream& out, const RecordList& records,
                   const std::vector<std::string>& class_names);

} // namespace vehids
