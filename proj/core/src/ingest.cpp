#include "vehids/ingest.hpp"

#include "vehids/error.hpp"
#include "vehids/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>

namespace vehids {

namespace {

std::string_view trim(std::string_view s)
{
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos)
        return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view line, char delim = ',')
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(delim, start);
        out.push_back(trim(line.substr(start, pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

bool parse_hex(std::string_view s, std::uint64_t& out)
{
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X'))
        s.remove_prefix(2);
    if (s.empty())
        return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, 16);
    return ec == std::errc() && p == s.data() + s.size();
}

bool parse_decimal(std::string_view s, double& out)
{
    if (s.empty())
        return false;
    if (s.front() == '+')
        s.remove_prefix(1);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

// CICIDS2017 writes "Infinity" and "NaN" into rate columns.
bool parse_flow_value(std::string_view s, double& out, bool& non_finite)
{
    non_finite = false;
    if (parse_decimal(s, out)) {
        if (!std::isfinite(out)) {
            non_finite = true;
            out = 0.0;
        }
        return true;
    }
    auto n = normalize_label(s);
    if (n == "infinity" || n == "inf" || n == "nan" || s.empty()) {
        non_finite = true;
        out = 0.0;
        return true;
    }
    return false;
}

} // namespace

int DatasetSchema::class_index(std::string_view name) const
{
    for (std::size_t i = 0; i < class_names.size(); ++i)
        if (class_names[i] == name)
            return static_cast<int>(i);
    return -1;
}

void DatasetSchema::validate() const
{
    if (feature_names.empty())
        throw ConfigError("schema '" + name + "': feature_names is empty");
    if (class_names.size() < 2)
        throw ConfigError("schema '" + name + "': needs at least 2 classes");
    if (class_names.front() != "Normal")
        throw ConfigError("schema '" + name + "': class 0 must be \"Normal\"");
    std::set<std::string> seen(feature_names.begin(), feature_names.end());
    if (seen.size() != feature_names.size())
        throw ConfigError("schema '" + name + "': duplicate feature name");
    for (const auto& [raw, cls] : label_map)
        if (cls != drop_label && class_index(cls) < 0)
            throw ConfigError("schema '" + name + "': label_map sends '" + raw +
                              "' to unknown class '" + cls + "'");
}

std::string normalize_label(std::string_view raw)
{
    std::string out;
    for (unsigned char c : raw) {
        if (c >= 'A' && c <= 'Z')
            out.push_back(static_cast<char>(c - 'A' + 'a'));
        else if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))
            out.push_back(static_cast<char>(c));
    }
    return out;
}

DatasetSchema car_hacking_schema()
{
    DatasetSchema s;
    s.name = "car-hacking";
    s.feature_names = {"can_id", "data0", "data1", "data2", "data3",
                       "data4", "data5", "data6", "data7"};
    s.class_names = {"Normal", "DoS", "Fuzzy", "Gear", "RPM"};
    s.parse_rules = {{"can_id", ColumnKind::hex}};
    for (int i = 0; i < 8; ++i)
        s.parse_rules["data" + std::to_string(i)] = ColumnKind::hex;
    return s;
}

DatasetSchema cicids2017_schema()
{
    DatasetSchema s;
    s.name = "cicids2017";
    s.feature_names = {
        "Destination Port",       "Flow Duration",
        "Total Fwd Packets",      "Total Backward Packets",
        "Total Length of Fwd Packets", "Total Length of Bwd Packets",
        "Fwd Packet Length Max",  "Fwd Packet Length Mean",
        "Bwd Packet Length Max",  "Bwd Packet Length Mean",
        "Flow Bytes/s",           "Flow Packets/s",
        "Flow IAT Mean",          "Flow IAT Max",
        "Fwd IAT Total",          "Bwd IAT Total",
        "Packet Length Mean",     "Packet Length Std",
        "Init_Win_bytes_forward", "Init_Win_bytes_backward",
    };
    s.class_names = {"Normal", "DoS", "PortScan", "BruteForce", "WebAttack", "Botnet"};
    s.label_column = "Label";
    const std::pair<const char*, const char*> raw_map[] = {
        {"BENIGN", "Normal"},
        {"DoS Hulk", "DoS"},
        {"DoS GoldenEye", "DoS"},
        {"DoS slowloris", "DoS"},
        {"DoS Slowhttptest", "DoS"},
        {"DDoS", "DoS"},
        {"Heartbleed", "DoS"},
        {"PortScan", "PortScan"},
        {"FTP-Patator", "BruteForce"},
        {"SSH-Patator", "BruteForce"},
        {"Web Attack - Brute Force", "WebAttack"},
        {"Web Attack - XSS", "WebAttack"},
        {"Web Attack - Sql Injection", "WebAttack"},
        {"Bot", "Botnet"},
        {"Infiltration", "drop"},
    };
    for (auto [raw, cls] : raw_map)
        s.label_map[normalize_label(raw)] = cls;
    return s;
}

RecordList parse_can_log(std::istream& source, const DatasetSchema& schema,
                         std::string_view attack_class)
{
    schema.validate();
    if (schema.feature_count() != 9)
        throw ConfigError("CAN schema must declare 9 features (ID + DATA0..7), got " +
                          std::to_string(schema.feature_count()));
    const int attack_label = schema.class_index(attack_class);
    if (!attack_class.empty() && attack_label < 0)
        throw ConfigError("attack class '" + std::string(attack_class) + "' is not in schema '" +
                          schema.name + "'");

    RecordList records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        auto view = trim(line);
        if (view.empty())
            continue;
        auto f = split(view);
        if (f.size() < 4)
            throw ParseError(line_no, "expected at least 4 columns, got " + std::to_string(f.size()));

        TrafficRecord r;
        if (!parse_decimal(f[0], r.timestamp) || !std::isfinite(r.timestamp))
            throw ParseError(line_no, "bad timestamp '" + std::string(f[0]) + "'");

        std::uint64_t id = 0;
        if (!parse_hex(f[1], id) || id > 0x1FFFFFFF)
            throw ParseError(line_no, "CAN ID '" + std::string(f[1]) + "' is not hex");

        double dlc_value = 0;
        if (!parse_decimal(f[2], dlc_value) || dlc_value < 0 || dlc_value > 8 ||
            dlc_value != std::floor(dlc_value))
            throw ParseError(line_no, "bad DLC '" + std::string(f[2]) + "'");
        const auto dlc = static_cast<std::size_t>(dlc_value);
        // short frames either stop after DLC bytes or carry empty padding columns
        if (f.size() != 4 + dlc && f.size() != 12)
            throw ParseError(line_no, "DLC " + std::to_string(dlc) + " needs " +
                                          std::to_string(4 + dlc) + " columns, got " +
                                          std::to_string(f.size()));

        r.features.assign(9, 0.0);
        r.features[0] = static_cast<double>(id);
        for (std::size_t b = 0; b < dlc; ++b) {
            std::uint64_t byte = 0;
            if (!parse_hex(f[3 + b], byte) || byte > 0xFF)
                throw ParseError(line_no, "DATA" + std::to_string(b) + " '" +
                                              std::string(f[3 + b]) + "' is not a hex byte");
            r.features[1 + b] = static_cast<double>(byte);
        }

        auto flag = f.back();
        if (flag == "R") {
            r.label = 0;
        } else if (flag == "T") {
            if (attack_label < 0)
                throw ParseError(line_no, "injected frame (T) but no attack class declared");
            r.label = attack_label;
        } else if (int idx = schema.class_index(flag); idx >= 0) {
            r.label = idx;
        } else {
            throw ParseError(line_no, "unknown flag '" + std::string(flag) + "'");
        }

        if (!records.empty() && r.timestamp < records.back().timestamp)
            throw ParseError(line_no, "timestamp goes backwards");
        records.push_back(std::move(r));
    }
    return records;
}

RecordList parse_can_log_file(const std::filesystem::path& path, const DatasetSchema& schema,
                              std::string_view attack_class)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    try {
        return parse_can_log(in, schema, attack_class);
    } catch (const ParseError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

RecordList parse_flow_csv(std::istream& source, const DatasetSchema& schema, FlowParseStats* stats)
{
    schema.validate();
    std::string line;
    if (!std::getline(source, line))
        throw DataError("flow CSV is empty (no header)");

    auto header = split(trim(line));
    auto find_col = [&](std::string_view name) -> long {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name)
                return static_cast<long>(i);
        return -1;
    };

    std::vector<std::size_t> feature_cols;
    std::vector<std::string> missing;
    for (const auto& name : schema.feature_names) {
        auto c = find_col(name);
        if (c < 0)
            missing.push_back(name);
        else
            feature_cols.push_back(static_cast<std::size_t>(c));
    }
    const long label_col = find_col(schema.label_column);
    if (label_col < 0)
        missing.push_back(schema.label_column);
    long ts_col = -1;
    if (!schema.timestamp_column.empty()) {
        ts_col = find_col(schema.timestamp_column);
        if (ts_col < 0)
            missing.push_back(schema.timestamp_column);
    }
    if (!missing.empty()) {
        std::string msg = "flow CSV header lacks configured column(s):";
        for (const auto& m : missing)
            msg += " '" + m + "'";
        throw DataError(msg);
    }

    std::vector<ColumnKind> kinds;
    for (const auto& name : schema.feature_names) {
        auto it = schema.parse_rules.find(name);
        kinds.push_back(it == schema.parse_rules.end() ? ColumnKind::decimal : it->second);
    }

    FlowParseStats local;
    local.class_counts.assign(schema.class_count(), 0);

    RecordList records;
    std::size_t line_no = 1;
    std::size_t ordinal = 0;
    while (std::getline(source, line)) {
        ++line_no;
        auto view = trim(line);
        if (view.empty())
            continue;
        auto f = split(view);
        if (f.size() != header.size())
            throw ParseError(line_no, "expected " + std::to_string(header.size()) +
                                          " columns, got " + std::to_string(f.size()));

        auto raw_label = f[static_cast<std::size_t>(label_col)];
        auto it = schema.label_map.find(normalize_label(raw_label));
        int label = -1;
        if (it == schema.label_map.end()) {
            label = schema.class_index(raw_label);
            if (label < 0)
                throw ParseError(line_no, "unmappable label '" + std::string(raw_label) + "'");
        } else if (it->second == drop_label) {
            ++local.dropped_rows;
            ++ordinal;
            continue;
        } else {
            label = schema.class_index(it->second);
        }

        TrafficRecord r;
        r.label = label;
        r.features.resize(feature_cols.size());
        for (std::size_t i = 0; i < feature_cols.size(); ++i) {
            auto cell = f[feature_cols[i]];
            double v = 0.0;
            bool non_finite = false;
            if (kinds[i] == ColumnKind::ignore) {
                v = 0.0;
            } else if (kinds[i] == ColumnKind::hex) {
                std::uint64_t h = 0;
                if (!parse_hex(cell, h))
                    throw ParseError(line_no, "column '" + schema.feature_names[i] +
                                                  "': '" + std::string(cell) + "' is not hex");
                v = static_cast<double>(h);
            } else if (!parse_flow_value(cell, v, non_finite)) {
                throw ParseError(line_no, "column '" + schema.feature_names[i] + "': '" +
                                              std::string(cell) + "' is not a number");
            }
            if (non_finite)
                ++local.non_finite_replaced;
            r.features[i] = v;
        }

        if (ts_col >= 0) {
            if (!parse_decimal(f[static_cast<std::size_t>(ts_col)], r.timestamp))
                throw ParseError(line_no, "bad timestamp '" +
                                              std::string(f[static_cast<std::size_t>(ts_col)]) + "'");
            if (!records.empty() && r.timestamp < records.back().timestamp)
                throw ParseError(line_no, "timestamp goes backwards");
        } else {
            r.timestamp = static_cast<double>(ordinal);
        }
        ++ordinal;
        ++local.class_counts[static_cast<std::size_t>(label)];
        records.push_back(std::move(r));
    }
    if (stats)
        *stats = std::move(local);
    return records;
}

RecordList parse_flow_csv_file(const std::filesystem::path& path, const DatasetSchema& schema,
                               FlowParseStats* stats)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    try {
        return parse_flow_csv(in, schema, stats);
    } catch (const ParseError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void check_time_order(const RecordList& records)
{
    for (std::size_t i = 1; i < records.size(); ++i)
        if (records[i].timestamp < records[i - 1].timestamp)
            throw DataError("record " + std::to_string(i) + ": timestamp goes backwards");
}

std::vector<std::size_t> class_counts(const RecordList& records, std::size_t num_classes)
{
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& r : records) {
        if (r.label < 0 || static_cast<std::size_t>(r.label) >= num_classes)
            throw DataError("record label " + std::to_string(r.label) + " out of range");
        ++counts[static_cast<std::size_t>(r.label)];
    }
    return counts;
}

std::vector<std::string> SynthConfig::class_names() const
{
    std::vector<std::string> names;
    for (const auto& c : classes)
        names.push_back(c.name);
    return names;
}

void SynthConfig::validate() const
{
    if (classes.size() < 2)
        throw ConfigError("synth config needs at least 2 classes");
    if (classes.front().kind != SignatureKind::normal || classes.front().name != "Normal")
        throw ConfigError("synth config: class 0 must be the Normal class");
    double sum = 0.0;
    for (const auto& c : classes) {
        if (!(c.proportion >= 0.0 && c.proportion <= 1.0))
            throw ConfigError("synth config: proportion of '" + c.name + "' outside [0,1]");
        if (c.kind == SignatureKind::normal && &c != &classes.front())
            throw ConfigError("synth config: only class 0 may be normal");
        sum += c.proportion;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("synth config: proportions sum to " + std::to_string(sum) + ", not 1");
    if (id_pool.empty())
        throw ConfigError("synth config: id_pool is empty");
    if (burst_len == 0)
        throw ConfigError("synth config: burst_len must be positive");
    if (!(interleave >= 0.0))
        throw ConfigError("synth config: interleave must be non-negative");
}

SynthConfig default_synth_config(std::size_t n_records, std::uint64_t seed)
{
    SynthConfig c;
    c.n_records = n_records;
    c.rng_seed = seed;
    c.classes = {
        {"Normal", SignatureKind::normal, 0.6, 0, {}},
        {"DoS", SignatureKind::dos, 0.1, 0, {}},
        {"Fuzzy", SignatureKind::fuzzy, 0.1, 0, {}},
        {"Gear", SignatureKind::spoof, 0.1, 0x43f, {0x01, 0x45, 0x60, 0xff, 0x6b, 0x00, 0x00, 0x00}},
        {"RPM", SignatureKind::spoof, 0.1, 0x316, {0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6f}},
    };
    c.id_pool = {0x002, 0x130, 0x131, 0x140, 0x153, 0x164, 0x18f, 0x1f1, 0x220,
                 0x260, 0x2a0, 0x2b0, 0x2c0, 0x329, 0x350, 0x367, 0x370, 0x430,
                 0x440, 0x4b1, 0x4f0, 0x545, 0x5a0, 0x5a2, 0x5f0, 0x690};
    return c;
}

std::vector<std::size_t> synth_class_counts(const SynthConfig& config)
{
    const auto k = config.classes.size();
    std::vector<std::size_t> counts(k);
    std::vector<double> remainder(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        double quota = config.classes[i].proportion * static_cast<double>(config.n_records);
        counts[i] = static_cast<std::size_t>(std::floor(quota));
        remainder[i] = quota - std::floor(quota);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t i = 0; assigned < config.n_records; i = (i + 1) % k, ++assigned)
        ++counts[order[i]];
    return counts;
}

namespace {
constexpr std::size_t normal_byte_ceiling = 64;
} // namespace

RecordList generate_synthetic_can(const SynthConfig& config)
{
    config.validate();
    Rng rng(config.rng_seed);
    const auto counts = synth_class_counts(config);

    // Per-ID base payloads for normal traffic: about half the bytes zero, the
    // rest small values; two "sensor" bytes jitter per frame.
    std::map<std::uint32_t, std::array<std::uint8_t, 8>> base_payload;
    for (auto id : config.id_pool) {
        std::array<std::uint8_t, 8> p{};
        for (auto& b : p)
            b = uniform01(rng) < 0.5 ? 0 : static_cast<std::uint8_t>(uniform_index(rng, normal_byte_ceiling));
        base_payload[id] = p;
    }

    // Units: a single normal frame, or a burst of one attack class with
    // normal frames mixed in.
    struct Unit {
        int label;
        std::size_t attack;
        std::size_t normal;
    };
    std::size_t total_attack = 0;
    for (std::size_t c = 1; c < counts.size(); ++c)
        total_attack += counts[c];
    const double ratio =
        total_attack == 0 ? 0.0
                          : std::min(config.interleave, static_cast<double>(counts[0]) / static_cast<double>(total_attack));
    std::vector<Unit> units;
    std::size_t normal_in_bursts = 0;
    for (std::size_t c = 1; c < counts.size(); ++c)
        for (std::size_t left = counts[c]; left > 0;) {
            auto len = std::min(left, config.burst_len);
            auto mixed = std::min(static_cast<std::size_t>(std::floor(ratio * static_cast<double>(len))),
                                  counts[0] - normal_in_bursts);
            units.push_back({static_cast<int>(c), len, mixed});
            normal_in_bursts += mixed;
            left -= len;
        }
    for (std::size_t i = normal_in_bursts; i < counts[0]; ++i)
        units.push_back({0, 0, 1});
    shuffle(std::span(units), rng);

    RecordList records;
    records.reserve(config.n_records);
    double t = 1478198376.0;
    auto emit = [&](int label) {
        const auto& cls = config.classes[static_cast<std::size_t>(label)];
        TrafficRecord r;
        r.label = label;
        r.features.assign(9, 0.0);
        t += 0.0003 + 0.0002 * uniform01(rng);
        r.timestamp = t;
        switch (cls.kind) {
        case SignatureKind::normal: {
            auto id = config.id_pool[uniform_index(rng, config.id_pool.size())];
            auto p = base_payload[id];
            for (int b = 2; b < 4; ++b) {
                int v = p[b] + static_cast<int>(uniform_index(rng, 5)) - 2;
                p[b] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
            }
            r.features[0] = id;
            for (int b = 0; b < 8; ++b)
                r.features[1 + b] = p[b];
            break;
        }
        case SignatureKind::dos:
            break;  // ID 0x000, empty payload
        case SignatureKind::fuzzy:
            r.features[0] = static_cast<double>(uniform_index(rng, 0x800));
            for (int b = 0; b < 8; ++b)
                r.features[1 + b] = static_cast<double>(uniform_index(rng, 256));
            break;
        case SignatureKind::spoof:
            r.features[0] = cls.spoof_id;
            for (int b = 0; b < 8; ++b)
                r.features[1 + b] = cls.payload_template[b];
            break;
        }
        records.push_back(std::move(r));
    };
    std::vector<int> slots;
    for (const auto& u : units) {
        slots.assign(u.attack, u.label);
        slots.insert(slots.end(), u.normal, 0);
        shuffle(std::span(slots), rng);
        for (int label : slots)
            emit(label);
    }
    return records;
}

void write_can_log(std::ostream& out, const RecordList& records,
                   const std::vector<std::string>& class_names)
{
    char buf[64];
    for (const auto& r : records) {
        if (r.features.size() != 9)
            throw ShapeError("CAN records carry 9 features");
        std::snprintf(buf, sizeof buf, "%.6f,%04x,8", r.timestamp,
                      static_cast<unsigned>(r.features[0]));
        out << buf;
        for (int b = 1; b <= 8; ++b) {
            std::snprintf(buf, sizeof buf, ",%02x", static_cast<unsigned>(r.features[b]));
            out << buf;
        }
        out << ',' << (r.label == 0 ? std::string("R") : class_names.at(static_cast<std::size_t>(r.label)))
            << '\n';
    }
}

} // namespace vehids
