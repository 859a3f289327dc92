// JSON readers/writers for dataset schemas and synthetic-traffic configs.

#include "vehids/error.hpp"
#include "vehids/ingest.hpp"
#include "vehids/artifact.hpp"

#include <json.hpp>

namespace vehids {

using nlohmann::json;

namespace {

constexpr int schema_version = 1;
constexpr int synth_version = 1;

void check_version(const json& j, int expected, const char* what)
{
    if (!j.contains("version"))
        throw ConfigError(std::string(what) + ": missing mandatory 'version' field");
    int v = j.at("version").get<int>();
    if (v != expected)
        throw VersionError(std::string(what) + ": version " + std::to_string(v) +
                           " unsupported (expected " + std::to_string(expected) + ")");
}

json parse_json(std::string_view text, const char* what)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string(what) + ": " + e.what());
    }
}

const char* kind_name(ColumnKind k)
{
    switch (k) {
    case ColumnKind::decimal: return "decimal";
    case ColumnKind::hex: return "hex";
    case ColumnKind::ignore: return "ignore";
    }
    return "decimal";
}

ColumnKind kind_from(const std::string& s)
{
    if (s == "decimal") return ColumnKind::decimal;
    if (s == "hex") return ColumnKind::hex;
    if (s == "ignore") return ColumnKind::ignore;
    throw ConfigError("unknown column kind '" + s + "'");
}

const char* signature_name(SignatureKind k)
{
    switch (k) {
    case SignatureKind::normal: return "normal";
    case SignatureKind::dos: return "dos";
    case SignatureKind::fuzzy: return "fuzzy";
    case SignatureKind::spoof: return "spoof";
    }
    return "normal";
}

SignatureKind signature_from(const std::string& s)
{
    if (s == "normal") return SignatureKind::normal;
    if (s == "dos") return SignatureKind::dos;
    if (s == "fuzzy") return SignatureKind::fuzzy;
    if (s == "spoof") return SignatureKind::spoof;
    throw ConfigError("unknown signature kind '" + s + "'");
}

std::uint32_t can_id_from(const json& j)
{
    if (j.is_number_unsigned() || j.is_number_integer())
        return j.get<std::uint32_t>();
    return static_cast<std::uint32_t>(std::stoul(j.get<std::string>(), nullptr, 16));
}

} // namespace

DatasetSchema parse_schema(std::string_view json_text)
{
    auto j = parse_json(json_text, "schema");
    check_version(j, schema_version, "schema");
    try {
        DatasetSchema s;
        s.version = schema_version;
        s.name = j.value("name", "");
        s.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        s.class_names = j.at("class_names").get<std::vector<std::string>>();
        if (j.contains("parse_rules"))
            for (const auto& [col, kind] : j.at("parse_rules").items())
                s.parse_rules[col] = kind_from(kind.get<std::string>());
        s.label_column = j.value("label_column", "Label");
        s.timestamp_column = j.value("timestamp_column", "");
        if (j.contains("label_map"))
            for (const auto& [raw, cls] : j.at("label_map").items())
                s.label_map[normalize_label(raw)] = cls.get<std::string>();
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("schema: ") + e.what());
    }
}

DatasetSchema load_schema(const std::filesystem::path& path)
{
    try {
        return parse_schema(read_text_file(path));
    } catch (const Error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string schema_to_json(const DatasetSchema& schema)
{
    json j;
    j["version"] = schema_version;
    j["name"] = schema.name;
    j["feature_names"] = schema.feature_names;
    j["class_names"] = schema.class_names;
    json rules = json::object();
    for (const auto& [col, kind] : schema.parse_rules)
        rules[col] = kind_name(kind);
    j["parse_rules"] = rules;
    j["label_column"] = schema.label_column;
    j["timestamp_column"] = schema.timestamp_column;
    json lm = json::object();
    for (const auto& [raw, cls] : schema.label_map)
        lm[raw] = cls;
    j["label_map"] = lm;
    return j.dump(2) + "\n";
}

SynthConfig parse_synth_config(std::string_view json_text)
{
    auto j = parse_json(json_text, "synth config");
    check_version(j, synth_version, "synth config");
    try {
        SynthConfig c;
        c.n_records = j.at("n_records").get<std::size_t>();
        c.rng_seed = j.value("rng_seed", std::uint64_t{0});
        c.burst_len = j.value("burst_len", c.burst_len);
        c.interleave = j.value("interleave", c.interleave);
        for (const auto& id : j.at("id_pool"))
            c.id_pool.push_back(can_id_from(id));
        for (const auto& jc : j.at("classes")) {
            SynthClass sc;
            sc.name = jc.at("name").get<std::string>();
            sc.kind = signature_from(jc.at("kind").get<std::string>());
            sc.proportion = jc.at("proportion").get<double>();
            if (jc.contains("spoof_id"))
                sc.spoof_id = can_id_from(jc.at("spoof_id"));
            if (jc.contains("payload_template")) {
                auto t = jc.at("payload_template").get<std::vector<int>>();
                if (t.size() != 8)
                    throw ConfigError("synth config: payload_template needs 8 bytes");
                for (int b = 0; b < 8; ++b)
                    sc.payload_template[b] = static_cast<std::uint8_t>(t[b]);
            }
            c.classes.push_back(std::move(sc));
        }
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
}

std::string synth_config_to_json(const SynthConfig& config)
{
    json j;
    j["version"] = synth_version;
    j["n_records"] = config.n_records;
    j["rng_seed"] = config.rng_seed;
    j["burst_len"] = config.burst_len;
    j["interleave"] = config.interleave;
    j["id_pool"] = config.id_pool;
    json classes = json::array();
    for (const auto& c : config.classes) {
        json jc;
        jc["name"] = c.name;
        jc["kind"] = signature_name(c.kind);
        jc["proportion"] = c.proportion;
        if (c.kind == SignatureKind::spoof) {
            jc["spoof_id"] = c.spoof_id;
            jc["payload_template"] = std::vector<int>(c.payload_template.begin(), c.payload_template.end());
        }
        classes.push_back(jc);
    }
    j["classes"] = classes;
    return j.dump(2) + "\n";
}

} // namespace vehids
