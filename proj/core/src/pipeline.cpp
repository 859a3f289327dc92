#include "vehids/pipeline.hpp"

#include "vehids/error.hpp"
#include "vehids/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

namespace vehids {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int hparams_version = 1;
constexpr int manifest_version = 1;

class Stopwatch {
public:
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

json parse_json_text(std::string_view text, const std::string& what)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

void require_version(const json& j, int expected, const std::string& what)
{
    if (!j.contains("version"))
        throw ConfigError(what + ": missing version field");
    const int v = j.at("version").get<int>();
    if (v != expected)
        throw VersionError(what + ": version " + std::to_string(v) + " is not supported (expected " +
                           std::to_string(expected) + ")");
}

fs::path resolve(const fs::path& base, const std::string& p)
{
    fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

std::string label_rule_name(LabelRule r)
{
    return r == LabelRule::any_attack ? "any_attack" : "plurality";
}

std::uint64_t parse_seed(const std::string& text)
{
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size())
        throw ConfigError("VEHIDS_SEED is not an unsigned integer: '" + text + "'");
    return v;
}

LabelRule label_rule_from(const std::string& s)
{
    if (s == "any_attack")
        return LabelRule::any_attack;
    if (s == "plurality")
        return LabelRule::plurality;
    throw ConfigError("unknown label_rule '" + s + "'");
}

std::size_t layer_count_of(const VariantSpec& v)
{
    return v.conv_filters.size() + (v.dense_width > 0 ? 1 : 0) + 1;
}

std::uint64_t variant_seed(std::uint64_t run_seed, std::size_t fold, std::size_t variant)
{
    return derive_seed(derive_seed(run_seed, 1000 + fold), variant);
}

std::uint64_t validation_seed(std::uint64_t run_seed, std::size_t fold)
{
    return derive_seed(derive_seed(run_seed, 2000 + fold), 0);
}

struct TrainView {
    Dataset fit;
    Dataset val;
};

TrainView split_for_validation(const Dataset& all, double fraction, std::uint64_t seed)
{
    std::vector<int> labels;
    labels.reserve(all.size());
    for (const auto& s : all)
        labels.push_back(s.label);
    const auto h = stratified_holdout(labels, fraction, seed);
    TrainView v;
    for (auto i : h.train)
        v.fit.push_back(all[i]);
    for (auto i : h.holdout)
        v.val.push_back(all[i]);
    return v;
}

Shape3 input_shape_of(const PreparedData& data)
{
    return {ChunkSpec::channels, data.chunk.height, data.chunk.width};
}

Hyperparameters resolve_hyperparameters(const RunConfig& config)
{
    if (config.hyperparameters)
        return *config.hyperparameters;
    const auto tuned = config.output_dir / "best_hparams.json";
    if (!config.skip_hpo && fs::exists(tuned))
        return Hyperparameters::parse(read_text_file(tuned));
    return Hyperparameters{};
}

std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << v;
    return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ','))
        out.push_back(cell);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

const char* const train_report_header =
    "variant,status,val_macro_f1,stopped_epoch,best_epoch,train_seconds,model_file";

struct TrainRow {
    std::string variant;
    std::string status;
    double val_f1 = 0.0;
    double seconds = 0.0;
    std::string model_file;
};

std::vector<TrainRow> read_train_reports(const fs::path& file)
{
    if (!fs::exists(file))
        throw ConfigError("missing " + file.string() + "; run the train stage first");
    std::istringstream in(read_text_file(file));
    std::string line;
    std::getline(in, line);
    if (line != train_report_header)
        throw DataError(file.string() + ": unexpected header");
    std::vector<TrainRow> rows;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        auto c = split_csv_line(line);
        if (c.size() != 7)
            throw DataError(file.string() + ": malformed row '" + line + "'");
        rows.push_back({c[0], c[1], std::stod(c[2]), std::stod(c[5]), c[6]});
    }
    return rows;
}

TimingReport time_model(const CnnModel& model, const Dataset& images, std::size_t repetitions)
{
    return time_inference([&](std::span<const float> x) { (void)predict_label(model, x); }, images,
                          repetitions);
}

TimingReport time_ensemble(const EnsembleModel& e, const Dataset& images, std::size_t repetitions)
{
    return time_inference([&](std::span<const float> x) { (void)predict(e, x); }, images, repetitions);
}

std::size_t repetitions_for(std::size_t target_images, std::size_t available)
{
    if (available == 0)
        return 1;
    return std::max<std::size_t>(1, (target_images + available - 1) / available);
}

std::string strategy_tag(EnsembleStrategy s)
{
    return s == EnsembleStrategy::confidence_averaging ? "averaging" : "concatenation";
}

} // namespace

std::string to_string(Preset p)
{
    switch (p) {
    case Preset::can: return "can";
    case Preset::flow: return "flow";
    case Preset::synthetic: return "synthetic";
    }
    return "synthetic";
}

Preset preset_from_string(std::string_view s)
{
    if (s == "can")
        return Preset::can;
    if (s == "flow")
        return Preset::flow;
    if (s == "synthetic")
        return Preset::synthetic;
    throw ConfigError("unknown preset '" + std::string(s) + "' (expected can, flow or synthetic)");
}

std::vector<VariantSpec> default_variants()
{
    return {
        {"cnn_a", {16}, 64},
        {"cnn_b", {32}, 64},
        {"cnn_c", {16, 32}, 64},
        {"cnn_d", {32, 64}, 128},
        {"cnn_e", {64}, 128},
    };
}

Hyperparameters Hyperparameters::from_assignment(const Assignment& a)
{
    auto as_size = [&](std::string_view name) {
        return static_cast<std::size_t>(std::llround(a.get(name)));
    };
    Hyperparameters h;
    h.epochs = as_size("epochs");
    h.batch_size = as_size("batch_size");
    h.early_stop_patience = as_size("early_stop_patience");
    h.learning_rate = a.get("learning_rate");
    h.dropout_rate = a.get("dropout_rate");
    h.frozen_layers = as_size("frozen_layers");
    h.source = "pso";
    return h;
}

Hyperparameters Hyperparameters::parse(std::string_view json_text)
{
    auto j = parse_json_text(json_text, "hyperparameters");
    require_version(j, hparams_version, "hyperparameters");
    try {
        Hyperparameters h;
        h.epochs = j.value("epochs", h.epochs);
        h.batch_size = j.value("batch_size", h.batch_size);
        h.early_stop_patience = j.value("early_stop_patience", h.early_stop_patience);
        h.learning_rate = j.value("learning_rate", h.learning_rate);
        h.dropout_rate = j.value("dropout_rate", h.dropout_rate);
        h.frozen_layers = j.value("frozen_layers", h.frozen_layers);
        h.source = j.value("source", std::string("config"));
        return h;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("hyperparameters: ") + e.what());
    }
}

std::string Hyperparameters::to_json() const
{
    json j;
    j["version"] = hparams_version;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["early_stop_patience"] = early_stop_patience;
    j["learning_rate"] = learning_rate;
    j["dropout_rate"] = dropout_rate;
    j["frozen_layers"] = frozen_layers;
    j["source"] = source;
    return j.dump(2) + "\n";
}

CnnConfig make_cnn_config(const Hyperparameters& hp, const VariantSpec& variant, std::uint64_t seed)
{
    CnnConfig c;
    c.conv_filters = variant.conv_filters;
    c.dense_width = variant.dense_width;
    c.dropout_rate = hp.dropout_rate;
    c.learning_rate = hp.learning_rate;
    c.batch_size = hp.batch_size;
    c.max_epochs = hp.epochs;
    c.early_stop_patience = hp.early_stop_patience;
    c.frozen_layers = hp.frozen_layers;
    c.rng_seed = seed;
    return c;
}

// ---------------------------------------------------------------- config

RunConfig RunConfig::parse(std::string_view json_text, const fs::path& base_dir)
{
    static const std::set<std::string> known{
        "version",       "preset",       "inputs",         "schema",      "max_records", "synth",
        "chunk",         "n_quantiles",  "clip_sigma",     "label_rule",  "fit_fraction",
        "validation_fraction", "variants", "skip_hpo",     "hyperparameters", "tune",
        "strategies",    "top_k",        "cv_folds",       "seed",        "jobs",
        "timing_images", "pretrained_dir", "output_dir"};

    auto j = parse_json_text(json_text, "run config");
    require_version(j, run_config_version, "run config");
    for (const auto& [key, _] : j.items())
        if (!known.count(key))
            throw ConfigError("run config: unknown key '" + key + "'");

    try {
        RunConfig c;
        c.preset = preset_from_string(j.value("preset", std::string("synthetic")));
        c.chunk = c.preset == Preset::flow ? ChunkSpec::flow() : ChunkSpec::car_hacking();
        if (j.contains("seed"))
            c.seed = j.at("seed").get<std::uint64_t>();
        else if (const char* env = std::getenv("VEHIDS_SEED"))
            c.seed = parse_seed(env);

        if (j.contains("inputs"))
            for (const auto& in : j.at("inputs")) {
                InputFile f;
                f.path = resolve(base_dir, in.at("path").get<std::string>());
                f.attack_class = in.value("attack_class", std::string());
                c.inputs.push_back(std::move(f));
            }
        if (j.contains("schema"))
            c.schema_path = resolve(base_dir, j.at("schema").get<std::string>());
        c.max_records = j.value("max_records", c.max_records);

        c.synth = default_synth_config(50000, c.seed);
        if (j.contains("synth")) {
            const auto& s = j.at("synth");
            if (s.is_string()) {
                c.synth = parse_synth_config(read_text_file(resolve(base_dir, s.get<std::string>())));
            } else if (s.contains("classes")) {
                c.synth = parse_synth_config(s.dump());
            } else {
                c.synth = default_synth_config(s.value("n_records", std::size_t{50000}),
                                               s.value("rng_seed", c.seed));
                c.synth.burst_len = s.value("burst_len", c.synth.burst_len);
                c.synth.interleave = s.value("interleave", c.synth.interleave);
            }
        }

        if (j.contains("chunk")) {
            c.chunk.height = j.at("chunk").value("height", c.chunk.height);
            c.chunk.width = j.at("chunk").value("width", c.chunk.width);
        }
        c.n_quantiles = j.value("n_quantiles", c.n_quantiles);
        c.clip_sigma = j.value("clip_sigma", c.clip_sigma);
        c.label_rule = label_rule_from(j.value("label_rule", std::string("any_attack")));
        c.fit_fraction = j.value("fit_fraction", c.fit_fraction);
        c.validation_fraction = j.value("validation_fraction", c.validation_fraction);

        if (j.contains("variants")) {
            c.variants.clear();
            for (const auto& v : j.at("variants"))
                c.variants.push_back({v.at("name").get<std::string>(),
                                      v.at("conv_filters").get<std::vector<std::size_t>>(),
                                      v.value("dense_width", std::size_t{32})});
        }
        c.skip_hpo = j.value("skip_hpo", c.skip_hpo);
        if (j.contains("hyperparameters")) {
            auto h = j.at("hyperparameters");
            if (!h.contains("version"))
                h["version"] = hparams_version;
            if (!h.contains("source"))
                h["source"] = "config";
            c.hyperparameters = Hyperparameters::parse(h.dump());
        }
        if (j.contains("tune")) {
            const auto& t = j.at("tune");
            c.tune.variant = t.value("variant", c.tune.variant);
            c.tune.swarm_size = t.value("swarm_size", c.tune.swarm_size);
            c.tune.iterations = t.value("iterations", c.tune.iterations);
            if (t.contains("search_space"))
                c.tune.search_space = resolve(base_dir, t.at("search_space").get<std::string>());
        }
        if (j.contains("strategies")) {
            c.strategies.clear();
            for (const auto& s : j.at("strategies"))
                c.strategies.push_back(strategy_from_string(s.get<std::string>()));
        }
        c.top_k = j.value("top_k", c.top_k);
        c.cv_folds = j.value("cv_folds", c.cv_folds);
        c.jobs = j.value("jobs", c.jobs);
        c.timing_images = j.value("timing_images", c.timing_images);
        if (j.contains("pretrained_dir"))
            c.pretrained_dir = resolve(base_dir, j.at("pretrained_dir").get<std::string>());
        if (j.contains("output_dir"))
            c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
}

RunConfig RunConfig::load(const fs::path& path)
{
    if (!fs::exists(path))
        throw ConfigError("config file not found: " + path.string());
    return parse(read_text_file(path), path.parent_path());
}

std::string RunConfig::to_json() const
{
    json j;
    j["version"] = run_config_version;
    j["preset"] = to_string(preset);
    json ins = json::array();
    for (const auto& f : inputs)
        ins.push_back({{"path", f.path.string()}, {"attack_class", f.attack_class}});
    j["inputs"] = ins;
    if (schema_path)
        j["schema"] = schema_path->string();
    if (max_records)
        j["max_records"] = max_records;
    j["synth"] = json::parse(synth_config_to_json(synth));
    j["chunk"] = {{"height", chunk.height}, {"width", chunk.width}};
    j["n_quantiles"] = n_quantiles;
    j["clip_sigma"] = clip_sigma;
    j["label_rule"] = label_rule_name(label_rule);
    j["fit_fraction"] = fit_fraction;
    j["validation_fraction"] = validation_fraction;
    json vs = json::array();
    for (const auto& v : variants)
        vs.push_back({{"name", v.name}, {"conv_filters", v.conv_filters}, {"dense_width", v.dense_width}});
    j["variants"] = vs;
    j["skip_hpo"] = skip_hpo;
    if (hyperparameters)
        j["hyperparameters"] = json::parse(hyperparameters->to_json());
    j["tune"] = {{"variant", tune.variant}, {"swarm_size", tune.swarm_size}, {"iterations", tune.iterations}};
    if (tune.search_space)
        j["tune"]["search_space"] = tune.search_space->string();
    json ss = json::array();
    for (auto s : strategies)
        ss.push_back(strategy_tag(s));
    j["strategies"] = ss;
    j["top_k"] = top_k;
    j["cv_folds"] = cv_folds;
    j["seed"] = seed;
    j["jobs"] = jobs;
    j["timing_images"] = timing_images;
    if (pretrained_dir)
        j["pretrained_dir"] = pretrained_dir->string();
    j["output_dir"] = output_dir.string();
    return j.dump(2) + "\n";
}

void RunConfig::validate() const
{
    chunk.validate();
    if (preset != Preset::synthetic && inputs.empty())
        throw ConfigError("preset '" + to_string(preset) + "' needs at least one input file");
    for (const auto& f : inputs)
        if (!fs::exists(f.path))
            throw ConfigError("input file not found: " + f.path.string());
    if (schema_path && !fs::exists(*schema_path))
        throw ConfigError("schema file not found: " + schema_path->string());
    if (tune.search_space && !fs::exists(*tune.search_space))
        throw ConfigError("search space file not found: " + tune.search_space->string());
    if (pretrained_dir && !fs::is_directory(*pretrained_dir))
        throw ConfigError("pretrained_dir is not a directory: " + pretrained_dir->string());
    if (!(fit_fraction > 0.0 && fit_fraction < 1.0))
        throw ConfigError("fit_fraction must be in (0, 1)");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ConfigError("validation_fraction must be in (0, 1)");
    if (n_quantiles < 2)
        throw ConfigError("n_quantiles must be at least 2");
    if (!(clip_sigma > 0.0))
        throw ConfigError("clip_sigma must be positive");
    if (variants.empty())
        throw ConfigError("at least one model variant is required");
    std::set<std::string> names;
    for (const auto& v : variants) {
        if (v.name.empty() || !names.insert(v.name).second)
            throw ConfigError("variant names must be unique and non-empty");
        make_cnn_config(hyperparameters.value_or(Hyperparameters{}), v, 0).validate();
    }
    if (top_k == 0 || top_k > variants.size())
        throw ConfigError("top_k must be in [1, " + std::to_string(variants.size()) + "]");
    if (cv_folds < 2)
        throw ConfigError("cv_folds must be at least 2");
    if (tune.variant >= variants.size())
        throw ConfigError("tune.variant is out of range");
    if (tune.swarm_size < 2 || tune.iterations == 0)
        throw ConfigError("tune needs swarm_size >= 2 and iterations >= 1");
    if (jobs == 0)
        throw ConfigError("jobs must be at least 1");
    if (strategies.empty())
        throw ConfigError("at least one ensemble strategy is required");
    if (preset == Preset::synthetic)
        synth.validate();
}

// ------------------------------------------------------------------ data

std::vector<int> PreparedData::labels() const
{
    std::vector<int> out;
    out.reserve(chunks.size());
    for (const auto& c : chunks)
        out.push_back(c.slice.label);
    return out;
}

PreparedData prepare_data(const RunConfig& config)
{
    PreparedData d;
    d.chunk = config.chunk;
    switch (config.preset) {
    case Preset::synthetic:
        d.sources.push_back(generate_synthetic_can(config.synth));
        d.class_names = config.synth.class_names();
        break;
    case Preset::can: {
        const auto schema = config.schema_path ? load_schema(*config.schema_path) : car_hacking_schema();
        d.class_names = schema.class_names;
        for (const auto& f : config.inputs)
            d.sources.push_back(parse_can_log_file(f.path, schema, f.attack_class));
        break;
    }
    case Preset::flow: {
        const auto schema = config.schema_path ? load_schema(*config.schema_path) : cicids2017_schema();
        d.class_names = schema.class_names;
        for (const auto& f : config.inputs)
            d.sources.push_back(parse_flow_csv_file(f.path, schema));
        break;
    }
    }
    if (config.max_records && !config.inputs.empty()) {
        const auto n = config.inputs.size();
        const auto per_input = (config.max_records + n - 1) / n;
        for (auto& src : d.sources)
            if (src.size() > per_input)
                src.resize(per_input);
    }

    for (std::size_t s = 0; s < d.sources.size(); ++s) {
        const auto& recs = d.sources[s];
        if (!recs.empty() && recs.front().features.size() != d.chunk.width)
            throw ShapeError("records carry " + std::to_string(recs.front().features.size()) +
                             " features but the image width is " + std::to_string(d.chunk.width));
        for (auto slice : plan_chunks(recs, d.chunk, config.label_rule)) {
            slice.chunk_index = d.chunks.size();
            d.chunks.push_back({s, slice});
        }
    }
    if (d.chunks.empty())
        throw DataError("not enough records to form a single image chunk of " +
                        std::to_string(d.chunk.chunk_len()) + " records");
    return d;
}

QuantileMap fit_on_chunks(const PreparedData& data, std::span<const std::size_t> chunk_ids,
                          const RunConfig& config, std::string provenance)
{
    std::vector<const TrafficRecord*> recs;
    recs.reserve(chunk_ids.size() * data.chunk.chunk_len());
    for (auto id : chunk_ids) {
        const auto& ref = data.chunks.at(id);
        const auto& src = data.sources[ref.source];
        for (std::size_t r = 0; r < data.chunk.chunk_len(); ++r)
            recs.push_back(&src[ref.slice.first_record + r]);
    }
    return fit_quantile_map(std::span<const TrafficRecord* const>(recs), config.n_quantiles,
                            config.clip_sigma, std::move(provenance));
}

std::vector<ImageChunk> render_images(const PreparedData& data, std::span<const std::size_t> chunk_ids,
                                      const QuantileMap& map)
{
    std::vector<ImageChunk> out;
    out.reserve(chunk_ids.size());
    for (auto id : chunk_ids) {
        const auto& ref = data.chunks.at(id);
        out.push_back(render_chunk(data.sources[ref.source], ref.slice, data.chunk, map));
    }
    return out;
}

HoldoutSplit training_portion(const PreparedData& data, const RunConfig& config)
{
    const auto labels = data.labels();
    return stratified_holdout(labels, 1.0 - config.fit_fraction, derive_seed(config.seed, 6));
}

// -------------------------------------------------------------- training

TrainResult train_variant(const Dataset& train_set, const Dataset& val_set, const VariantSpec& variant,
                          const Hyperparameters& hp, Shape3 input_shape, std::size_t num_classes,
                          std::uint64_t seed, const CnnModel* pretrained)
{
    const auto cfg = make_cnn_config(hp, variant, seed);
    if (pretrained) {
        FineTuneOptions opt;
        opt.frozen_layers = hp.frozen_layers;
        opt.num_classes = num_classes;
        opt.replace_head = pretrained->num_classes != num_classes;
        return fine_tune(*pretrained, train_set, val_set, opt, cfg);
    }
    return train(build_cnn(cfg, input_shape, num_classes), train_set, val_set, cfg);
}

CnnModel initial_model(const VariantSpec& variant, const Hyperparameters& hp, Shape3 input_shape,
                       std::size_t num_classes, std::uint64_t seed)
{
    return build_cnn(make_cnn_config(hp, variant, seed), input_shape, num_classes);
}

MetricsReport evaluate_model(const CnnModel& model, const Dataset& data, std::size_t num_classes)
{
    std::vector<int> truth, pred;
    for (const auto& s : data) {
        truth.push_back(s.label);
        pred.push_back(predict_label(model, s.input));
    }
    return metrics(confusion(truth, pred, num_classes));
}

MetricsReport evaluate_ensemble(const EnsembleModel& ensemble, const Dataset& data)
{
    std::vector<int> truth, pred;
    for (const auto& s : data) {
        truth.push_back(s.label);
        pred.push_back(predict(ensemble, s.input).label);
    }
    return metrics(confusion(truth, pred, ensemble.num_classes()));
}

std::string image_set_hash(const fs::path& image_dir)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(image_dir))
        if (e.path().extension() == ".png")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string acc = sha256_hex(read_file(image_dir / "index.csv"));
    for (const auto& f : files)
        acc = sha256_hex(acc + f.filename().string() + sha256_hex(read_file(f)));
    return acc;
}

// -------------------------------------------------------------- manifest

Manifest Manifest::load_or_create(const fs::path& output_dir)
{
    Manifest m;
    m.dir_ = output_dir;
    const auto file = output_dir / "manifest.json";
    json j;
    if (fs::exists(file)) {
        verify(file);
        j = parse_json_text(read_text_file(file), "manifest");
        j.erase("sha256");
    } else {
        j["version"] = manifest_version;
        j["tool_version"] = tool_version;
        j["artifacts"] = json::object();
        j["values"] = json::object();
        j["stage_seconds"] = json::object();
    }
    m.json_ = j.dump();
    return m;
}

void Manifest::set_config(const RunConfig& config)
{
    auto j = json::parse(json_);
    j["config"] = json::parse(config.to_json());
    j["seeds"] = {{"run", config.seed}, {"synth", config.synth.rng_seed}};
    j["tool_version"] = tool_version;
    json_ = j.dump();
}

void Manifest::record_artifact(const fs::path& file)
{
    auto j = json::parse(json_);
    const auto rel = fs::relative(file, dir_).generic_string();
    j["artifacts"][rel] = sha256_hex(read_file(file));
    json_ = j.dump();
}

void Manifest::record_value(const std::string& key, const std::string& value)
{
    auto j = json::parse(json_);
    j["values"][key] = value;
    json_ = j.dump();
}

void Manifest::record_stage(const std::string& stage, double seconds)
{
    auto j = json::parse(json_);
    j["stage_seconds"][stage] = seconds;
    json_ = j.dump();
}

void Manifest::save() const
{
    auto j = json::parse(json_);
    const auto body = j.dump(2);
    j["sha256"] = sha256_hex(body);
    fs::create_directories(dir_);
    write_text_file(dir_ / "manifest.json", j.dump(2) + "\n");
}

std::string Manifest::artifact_hash(const std::string& relative) const
{
    auto j = json::parse(json_);
    return j["artifacts"].value(relative, std::string());
}

std::string Manifest::config_json() const
{
    auto j = json::parse(json_);
    return j.contains("config") ? j["config"].dump(2) + "\n" : std::string();
}

std::string Manifest::value(const std::string& key) const
{
    auto j = json::parse(json_);
    return j["values"].value(key, std::string());
}

void Manifest::verify(const fs::path& manifest_file)
{
    auto j = parse_json_text(read_text_file(manifest_file), "manifest");
    require_version(j, manifest_version, "manifest");
    if (!j.contains("sha256"))
        throw CorruptionError(manifest_file.string() + ": missing sha256");
    const auto stored = j.at("sha256").get<std::string>();
    j.erase("sha256");
    if (sha256_hex(j.dump(2)) != stored)
        throw CorruptionError(manifest_file.string() + ": sha256 mismatch");
}

// ---------------------------------------------------------------- stages

TransformOutcome cmd_transform(const RunConfig& config, std::ostream& log)
{
    Stopwatch clock;
    config.validate();
    const auto data = prepare_data(config);
    const auto portion = training_portion(data, config);
    const auto map = fit_on_chunks(data, portion.train, config, "training portion");
    log << "transform: " << data.chunks.size() << " chunks, quantile map fitted on " << portion.train.size()
        << "\n";

    fs::create_directories(config.output_dir);
    const auto map_file = config.output_dir / "quantile_map.qmap";
    save_artifact(map_file, ArtifactKind::quantile_map, quantile_map_to_bytes(map));

    TransformOutcome out;
    out.image_dir = config.output_dir / "images";
    fs::remove_all(out.image_dir);
    {
        ImageSetWriter writer(out.image_dir, data.class_names);
        std::vector<std::size_t> all(data.chunks.size());
        for (std::size_t i = 0; i < all.size(); ++i)
            all[i] = i;
        for (const auto& img : render_images(data, all, map))
            writer.write(img);
        out.images = writer.count();
    }
    out.image_set_sha256 = image_set_hash(out.image_dir);
    log << "transform: wrote " << out.images << " images to " << out.image_dir.string() << "\n";

    auto m = Manifest::load_or_create(config.output_dir);
    m.set_config(config);
    m.record_artifact(map_file);
    m.record_artifact(out.image_dir / "index.csv");
    m.record_value("image_set_sha256", out.image_set_sha256);
    m.record_value("image_count", std::to_string(out.images));
    m.record_stage("transform", clock.seconds());
    m.save();
    return out;
}

namespace {

struct PortionImages {
    PreparedData data;
    Dataset train_all;  // training portion
    Dataset test;       // held-out portion
    TrainView split;    // training portion split for early stopping
};

PortionImages portion_images(const RunConfig& config, bool with_test)
{
    PortionImages p{prepare_data(config), {}, {}, {}};
    const auto portion = training_portion(p.data, config);
    const auto map = fit_on_chunks(p.data, portion.train, config, "training portion");
    p.train_all = samples_from_images(render_images(p.data, portion.train, map));
    if (with_test)
        p.test = samples_from_images(render_images(p.data, portion.holdout, map));
    p.split = split_for_validation(p.train_all, config.validation_fraction, validation_seed(config.seed, 0));
    return p;
}

} // namespace

TuneOutcome cmd_tune(const RunConfig& config, std::ostream& log)
{
    Stopwatch clock;
    config.validate();
    fs::create_directories(config.output_dir);
    TuneOutcome out;
    auto m = Manifest::load_or_create(config.output_dir);
    m.set_config(config);

    const auto hp_file = config.output_dir / "best_hparams.json";
    if (config.skip_hpo) {
        out.best = config.hyperparameters.value_or(Hyperparameters{});
        log << "tune: search skipped, using " << out.best.source << " hyperparameters\n";
    } else {
        const auto p = portion_images(config, false);
        const auto& variant = config.variants[config.tune.variant];
        const auto space = config.tune.search_space ? load_search_space(*config.tune.search_space)
                                                    : table_search_space(0, layer_count_of(variant) - 1);
        const auto shape = input_shape_of(p.data);
        const auto num_classes = p.data.num_classes();
        const auto model_seed = variant_seed(config.seed, 0, config.tune.variant);

        Objective objective = [&](std::span<const double> position) {
            const auto hp = Hyperparameters::from_assignment(decode_position(space, position));
            try {
                auto r = train_variant(p.split.fit, p.split.val, variant, hp, shape, num_classes, model_seed);
                return evaluate_model(r.model, p.split.val, num_classes).macro_f1;
            } catch (const NumericError&) {
                return 0.0;  // diverged: worst attainable score
            }
        };
        const auto result = optimize(space, objective, config.tune.swarm_size, config.tune.iterations,
                                     derive_seed(config.seed, 3), {}, config.jobs);
        out.best = Hyperparameters::from_assignment(result.best);
        out.best_score = result.best_score;
        out.trace = result.trace;
        for (const auto& t : out.trace)
            log << "tune: iteration " << t.iteration << " best macro-F1 " << fmt(t.best_score) << " at "
                << t.best.to_string() << "\n";

        const auto trace_file = config.output_dir / "pso_trace.csv";
        std::ofstream tf(trace_file);
        write_trace_csv(tf, space, out.trace);
        tf.close();
        write_text_file(config.output_dir / "search_space.json", search_space_to_json(space));
        m.record_artifact(trace_file);
        m.record_value("tune_best_score", fmt(out.best_score));
    }
    write_text_file(hp_file, out.best.to_json());
    m.record_artifact(hp_file);
    m.record_stage("tune", clock.seconds());
    m.save();
    return out;
}

TrainOutcome cmd_train(const RunConfig& config, std::ostream& log)
{
    Stopwatch clock;
    config.validate();
    const auto hp = resolve_hyperparameters(config);
    const auto p = portion_images(config, false);
    const auto shape = input_shape_of(p.data);
    const auto model_dir = config.output_dir / "models";
    fs::create_directories(model_dir);
    log << "train: " << p.split.fit.size() << " training and " << p.split.val.size()
        << " validation images, hyperparameters from " << hp.source << "\n";

    TrainOutcome out;
    std::ostringstream losses;
    losses << "variant,epoch,train_loss,val_loss\n";
    for (std::size_t i = 0; i < config.variants.size(); ++i) {
        const auto& v = config.variants[i];
        VariantOutcome vo;
        vo.name = v.name;
        std::optional<CnnModel> pretrained;
        if (config.pretrained_dir)
            pretrained = load_model(*config.pretrained_dir / (v.name + ".model"));
        if (!pretrained) {
            vo.initial_file = model_dir / (v.name + ".init.model");
            save_model(vo.initial_file,
                       initial_model(v, hp, shape, p.data.num_classes(), variant_seed(config.seed, 0, i)));
        }
        try {
            auto r = train_variant(p.split.fit, p.split.val, v, hp, shape, p.data.num_classes(),
                                   variant_seed(config.seed, 0, i), pretrained ? &*pretrained : nullptr);
            vo.report = r.report;
            vo.val_macro_f1 = evaluate_model(r.model, p.split.val, p.data.num_classes()).macro_f1;
            vo.model_file = model_dir / (v.name + ".model");
            save_model(vo.model_file, r.model);
            for (std::size_t e = 0; e < r.report.train_loss.size(); ++e)
                losses << v.name << ',' << e + 1 << ',' << fmt(r.report.train_loss[e]) << ','
                       << fmt(r.report.val_loss[e]) << '\n';
            log << "train: " << v.name << " val macro-F1 " << fmt(vo.val_macro_f1) << " after "
                << r.report.stopped_epoch << " epochs (" << fmt(r.report.seconds) << " s)\n";
        } catch (const NumericError& e) {
            vo.status = std::string("diverged: ") + e.what();
            log << "train: " << v.name << " " << vo.status << "\n";
        }
        out.variants.push_back(std::move(vo));
    }

    std::ostringstream rep;
    rep << train_report_header << "\n";
    for (const auto& v : out.variants) {
        std::string status = v.status;
        std::replace(status.begin(), status.end(), ',', ';');
        rep << v.name << ',' << status << ',' << fmt(v.val_macro_f1) << ',' << v.report.stopped_epoch << ','
            << v.report.best_epoch << ',' << fmt(v.report.seconds) << ','
            << (v.model_file.empty() ? std::string() : v.model_file.filename().string()) << "\n";
    }
    const auto rep_file = config.output_dir / "train_reports.csv";
    write_text_file(rep_file, rep.str());
    write_text_file(config.output_dir / "train_losses.csv", losses.str());

    auto m = Manifest::load_or_create(config.output_dir);
    m.set_config(config);
    m.record_artifact(rep_file);
    for (const auto& v : out.variants) {
        if (!v.model_file.empty())
            m.record_artifact(v.model_file);
        if (!v.initial_file.empty())
            m.record_artifact(v.initial_file);
    }
    m.record_stage("train", clock.seconds());
    m.save();
    return out;
}

EnsembleOutcome cmd_ensemble(const RunConfig& config, std::ostream& log)
{
    Stopwatch clock;
    config.validate();
    const auto hp = resolve_hyperparameters(config);
    const auto rows = read_train_reports(config.output_dir / "train_reports.csv");
    const auto model_dir = config.output_dir / "models";

    std::vector<double> scores;
    for (const auto& r : rows)
        scores.push_back(r.status == "ok" ? r.val_f1 : -std::numeric_limits<double>::infinity());
    std::size_t usable = 0;
    for (const auto& r : rows)
        usable += r.status == "ok";
    if (usable == 0)
        throw NumericError("every variant diverged; nothing to ensemble");

    EnsembleOutcome out;
    out.selected = select_top_k(scores, std::min(config.top_k, usable));
    std::vector<CnnModel> chosen;
    std::vector<fs::path> chosen_files;
    double base_seconds = 0.0;
    for (auto i : out.selected) {
        chosen_files.push_back(model_dir / rows[i].model_file);
        chosen.push_back(load_model(chosen_files.back()));
        base_seconds += rows[i].seconds;
        log << "ensemble: selected " << rows[i].variant << " (val macro-F1 " << fmt(rows[i].val_f1) << ")\n";
    }

    const auto p = portion_images(config, true);
    if (p.test.empty())
        throw DataError("the held-out portion is empty; lower fit_fraction");
    const auto reps = repetitions_for(config.timing_images, p.test.size());
    const auto packets = p.data.chunk.chunk_len();

    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].status != "ok")
            continue;
        const auto model = load_model(model_dir / rows[i].model_file);
        out.rows.push_back(summary_row(rows[i].variant, evaluate_model(model, p.test, p.data.num_classes()),
                                       rows[i].seconds, time_model(model, p.test, reps), packets));
    }

    auto m = Manifest::load_or_create(config.output_dir);
    m.set_config(config);
    for (auto strategy : config.strategies) {
        const auto tag = strategy_tag(strategy);
        EnsembleModel ens;
        double seconds = base_seconds;
        if (strategy == EnsembleStrategy::confidence_averaging) {
            ens = make_averaging_ensemble(chosen);
        } else {
            VariantSpec head{"concat_head", {}, 0};
            auto built = build_concatenated(chosen, p.split.fit, p.split.val,
                                            make_cnn_config(hp, head, derive_seed(config.seed, 5)));
            ens = std::move(built.model);
            seconds += built.report.seconds;
        }
        const auto file = config.output_dir / ("ensemble_" + tag + ".ens");
        save_ensemble(file, ens, chosen_files);
        const auto report = evaluate_ensemble(ens, p.test);
        const auto timing = time_ensemble(ens, p.test, reps);
        write_text_file(config.output_dir / ("metrics_" + tag + ".txt"),
                        metrics_to_text(report, p.data.class_names));
        out.artifacts.push_back(file);
        out.metrics.push_back(report);
        out.timing.push_back(timing);
        out.rows.push_back(summary_row("ensemble_" + tag, report, seconds, timing, packets));
        m.record_artifact(file);
        m.record_artifact(config.output_dir / ("metrics_" + tag + ".txt"));
        log << "ensemble: " << tag << " test macro-F1 " << fmt(report.macro_f1) << ", "
            << fmt(timing.mean_ms) << " ms per image" << (timing.over_budget ? " (over budget)" : "") << "\n";
    }

    const auto summary_file = config.output_dir / "summary.csv";
    {
        std::ofstream s(summary_file);
        write_summary_table(s, out.rows);
    }
    m.record_artifact(summary_file);
    m.record_stage("ensemble", clock.seconds());
    m.save();
    return out;
}

CvOutcome cmd_evaluate(const RunConfig& config, std::ostream& log)
{
    Stopwatch clock;
    config.validate();
    const auto hp = resolve_hyperparameters(config);
    const auto data = prepare_data(config);
    const auto labels = data.labels();
    const auto plan = kfold_split(labels, config.cv_folds, derive_seed(config.seed, 4));
    const auto shape = input_shape_of(data);
    const auto nc = data.num_classes();
    const auto nv = config.variants.size();
    if (!plan.strictly_stratified)
        log << "evaluate: some class has fewer chunks than folds; folds are not strictly stratified\n";

    CvOutcome out;
    for (const auto& v : config.variants)
        out.names.push_back(v.name);
    for (auto s : config.strategies)
        out.names.push_back("ensemble_" + strategy_tag(s));
    const auto n_models = out.names.size();
    out.pooled.assign(n_models, ConfusionMatrix{nc, std::vector<std::size_t>(nc * nc, 0)});
    out.train_seconds.assign(n_models, 0.0);
    std::vector<double> time_sum(n_models, 0.0), time_p95(n_models, 0.0);
    std::vector<std::size_t> time_folds(n_models, 0);

    std::ostringstream folds_csv;
    folds_csv << "fold,model,macro_f1,selected\n";

    auto accumulate_into = [&](std::size_t m, const std::vector<int>& truth, const std::vector<int>& pred) {
        const auto cm = confusion(truth, pred, nc);
        for (std::size_t i = 0; i < cm.counts.size(); ++i)
            out.pooled[m].counts[i] += cm.counts[i];
        return metrics(cm).macro_f1;
    };
    auto record_timing = [&](std::size_t m, const TimingReport& t) {
        time_sum[m] += t.mean_ms;
        time_p95[m] = std::max(time_p95[m], t.p95_ms);
        ++time_folds[m];
    };

    for (std::size_t f = 0; f < plan.k; ++f) {
        const auto train_ids = plan.train_indices(f);
        const auto& test_ids = plan.folds[f];
        const auto map = fit_on_chunks(data, train_ids, config, "fold " + std::to_string(f));
        const auto train_all = samples_from_images(render_images(data, train_ids, map));
        const auto test = samples_from_images(render_images(data, test_ids, map));
        const auto split = split_for_validation(train_all, config.validation_fraction,
                                                validation_seed(config.seed, f + 1));
        std::vector<int> truth;
        for (const auto& s : test)
            truth.push_back(s.label);

        std::vector<CnnModel> models(nv);
        std::vector<double> val_scores(nv, -std::numeric_limits<double>::infinity());
        std::vector<double> seconds(nv, 0.0);
        for (std::size_t i = 0; i < nv; ++i) {
            try {
                auto r = train_variant(split.fit, split.val, config.variants[i], hp, shape, nc,
                                       variant_seed(config.seed, f + 1, i));
                models[i] = std::move(r.model);
                seconds[i] = r.report.seconds;
                out.train_seconds[i] += r.report.seconds;
                val_scores[i] = evaluate_model(models[i], split.val, nc).macro_f1;
            } catch (const NumericError& e) {
                log << "evaluate: fold " << f << " " << config.variants[i].name << " diverged: " << e.what()
                    << "\n";
                continue;
            }
            std::vector<int> pred;
            for (const auto& s : test)
                pred.push_back(predict_label(models[i], s.input));
            const auto f1 = accumulate_into(i, truth, pred);
            record_timing(i, time_model(models[i], test, 1));
            folds_csv << f << ',' << config.variants[i].name << ',' << fmt(f1) << ",\n";
        }

        std::size_t usable = 0;
        for (auto s : val_scores)
            usable += std::isfinite(s);
        if (usable == 0)
            throw NumericError("fold " + std::to_string(f) + ": every variant diverged");
        const auto selected = select_top_k(val_scores, std::min(config.top_k, usable));
        out.selected_per_fold.push_back(selected);
        std::vector<CnnModel> chosen;
        double base_seconds = 0.0;
        std::string sel_names;
        for (auto i : selected) {
            chosen.push_back(models[i]);
            base_seconds += seconds[i];
            sel_names += (sel_names.empty() ? "" : ";") + config.variants[i].name;
        }

        for (std::size_t s = 0; s < config.strategies.size(); ++s) {
            const auto m_idx = nv + s;
            EnsembleModel ens;
            double secs = base_seconds;
            if (config.strategies[s] == EnsembleStrategy::confidence_averaging) {
                ens = make_averaging_ensemble(chosen);
            } else {
                VariantSpec head{"concat_head", {}, 0};
                auto built = build_concatenated(chosen, split.fit, split.val,
                                                make_cnn_config(hp, head, derive_seed(config.seed, 5 + f)));
                ens = std::move(built.model);
                secs += built.report.seconds;
            }
            out.train_seconds[m_idx] += secs;
            std::vector<int> pred;
            for (const auto& x : test)
                pred.push_back(predict(ens, x.input).label);
            const auto f1 = accumulate_into(m_idx, truth, pred);
            record_timing(m_idx, time_ensemble(ens, test, 1));
            folds_csv << f << ',' << out.names[m_idx] << ',' << fmt(f1) << ',' << sel_names << "\n";
        }
        log << "evaluate: fold " << f + 1 << "/" << plan.k << " done (" << test.size() << " test images)\n";
    }

    fs::create_directories(config.output_dir);
    auto man = Manifest::load_or_create(config.output_dir);
    man.set_config(config);
    for (std::size_t m = 0; m < n_models; ++m) {
        if (out.pooled[m].total() == 0) {
            out.metrics.emplace_back();
            continue;
        }
        out.metrics.push_back(metrics(out.pooled[m]));
        TimingReport t;
        t.images = out.pooled[m].total();
        t.repetitions = 1;
        t.mean_ms = time_folds[m] ? time_sum[m] / static_cast<double>(time_folds[m]) : 0.0;
        t.p95_ms = time_p95[m];
        t.over_budget = t.mean_ms > realtime_budget_ms;
        out.rows.push_back(summary_row(out.names[m], out.metrics.back(), out.train_seconds[m], t,
                                       data.chunk.chunk_len()));
        const auto mf = config.output_dir / ("cv_metrics_" + out.names[m] + ".txt");
        write_text_file(mf, metrics_to_text(out.metrics.back(), data.class_names));
        man.record_artifact(mf);
        log << "evaluate: " << out.names[m] << " pooled macro-F1 " << fmt(out.metrics.back().macro_f1) << "\n";
    }
    const auto summary_file = config.output_dir / "cv_summary.csv";
    {
        std::ofstream s(summary_file);
        write_summary_table(s, out.rows);
    }
    write_text_file(config.output_dir / "cv_folds.csv", folds_csv.str());
    man.record_artifact(summary_file);
    man.record_artifact(config.output_dir / "cv_folds.csv");
    man.record_stage("evaluate", clock.seconds());
    man.save();
    return out;
}

} // namespace vehids
