#pragma once

// End-to-end orchestration: transform -> tune -> train -> ensemble ->
// evaluate. Every stage reads a RunConfig, writes artifacts under
// RunConfig::output_dir and records them in manifest.json.

#include "vehids/cnn.hpp"
#include "vehids/ensemble.hpp"
#include "vehids/eval.hpp"
#include "vehids/ingest.hpp"
#include "vehids/pso.hpp"
#include "vehids/transform.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace vehids {

inline constexpr const char* tool_version = "0.1.0";
inline constexpr int run_config_version = 1;

enum class Preset { can, flow, synthetic };

std::string to_string(Preset p);
Preset preset_from_string(std::string_view s);

struct InputFile {
    std::filesystem::path path;
    std::string attack_class;  // CAN logs: class of T-flagged rows
};

// A compact CNN architecture standing in for one backbone.
struct VariantSpec {
    std::string name;
    std::vector<std::size_t> conv_filters;
    std::size_t dense_width = 32;
};

std::vector<VariantSpec> default_variants();

struct Hyperparameters {
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    std::size_t early_stop_patience = 3;
    double learning_rate = 0.003;
    double dropout_rate = 0.5;
    std::size_t frozen_layers = 0;
    std::string source = "table";  // "table" | "pso" | "config"

    static Hyperparameters from_assignment(const Assignment& a);
    static Hyperparameters parse(std::string_view json_text);
    std::string to_json() const;
};

CnnConfig make_cnn_config(const Hyperparameters& hp, const VariantSpec& variant, std::uint64_t seed);

struct TuneSettings {
    std::size_t variant = 0;
    std::size_t swarm_size = 6;
    std::size_t iterations = 4;
    std::optional<std::filesystem::path> search_space;  // default: table preset
};

struct RunConfig {
    Preset preset = Preset::synthetic;
    std::vector<InputFile> inputs;
    std::optional<std::filesystem::path> schema_path;
    // Cap on records read from files, split evenly across inputs (each keeps
    // its leading records). 0: no cap.
    std::size_t max_records = 0;
    SynthConfig synth = default_synth_config(50000, 0);
    ChunkSpec chunk = ChunkSpec::car_hacking();
    std::size_t n_quantiles = default_n_quantiles;
    double clip_sigma = default_clip_sigma;
    LabelRule label_rule = LabelRule::any_attack;
    // Share of chunks (stratified, seeded) used as the training portion by
    // transform/tune/train/ensemble; the rest is the held-out test portion.
    double fit_fraction = 0.8;
    double validation_fraction = 0.2;
    std::vector<VariantSpec> variants = default_variants();
    bool skip_hpo = true;
    std::optional<Hyperparameters> hyperparameters;
    TuneSettings tune;
    std::vector<EnsembleStrategy> strategies{EnsembleStrategy::confidence_averaging,
                                             EnsembleStrategy::concatenation};
    std::size_t top_k = 3;
    std::size_t cv_folds = 5;
    std::uint64_t seed = 0;  // falls back to VEHIDS_SEED when the config omits it
    std::size_t jobs = 1;
    std::size_t timing_images = 1000;
    std::optional<std::filesystem::path> pretrained_dir;
    std::filesystem::path output_dir = "vehids-run";

    // Relative paths resolve against `base_dir`.
    static RunConfig parse(std::string_view json_text, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    std::string to_json() const;
    void validate() const;  // checks paths exist and settings are coherent
};

// Records grouped by source, plus the chunk plan over all sources. Chunks
// never span two sources.
struct PreparedData {
    std::vector<RecordList> sources;
    std::vector<std::string> class_names;
    ChunkSpec chunk;

    struct Ref {
        std::size_t source = 0;
        ChunkSlice slice;
    };
    std::vector<Ref> chunks;  // chunks[i].slice.chunk_index == i

    std::vector<int> labels() const;
    std::size_t num_classes() const { return class_names.size(); }
};

PreparedData prepare_data(const RunConfig& config);

QuantileMap fit_on_chunks(const PreparedData& data, std::span<const std::size_t> chunk_ids,
                          const RunConfig& config, std::string provenance);
std::vector<ImageChunk> render_images(const PreparedData& data, std::span<const std::size_t> chunk_ids,
                                      const QuantileMap& map);

// Stratified split of chunks into training portion and held-out test portion.
HoldoutSplit training_portion(const PreparedData& data, const RunConfig& config);

// Persisted stage summaries.
struct TransformOutcome {
    std::size_t images = 0;
    std::string image_set_sha256;
    std::filesystem::path image_dir;
};

struct TuneOutcome {
    Hyperparameters best;
    double best_score = 0.0;
    std::vector<TraceEntry> trace;
};

struct VariantOutcome {
    std::string name;
    std::filesystem::path model_file;
    std::filesystem::path initial_file;
    double val_macro_f1 = 0.0;
    TrainReport report;
    std::string status = "ok";  // or "diverged: ..."
};

struct TrainOutcome {
    std::vector<VariantOutcome> variants;
};

struct EnsembleOutcome {
    std::vector<std::size_t> selected;
    std::vector<std::filesystem::path> artifacts;
    std::vector<MetricsReport> metrics;  // per configured strategy
    std::vector<TimingReport> timing;
    std::vector<SummaryRow> rows;
};

struct CvOutcome {
    std::vector<std::string> names;        // variants then ensembles
    std::vector<ConfusionMatrix> pooled;   // summed over folds
    std::vector<MetricsReport> metrics;    // from pooled matrices
    std::vector<double> train_seconds;     // summed over folds
    std::vector<std::vector<std::size_t>> selected_per_fold;
    std::vector<SummaryRow> rows;
};

TransformOutcome cmd_transform(const RunConfig& config, std::ostream& log);
TuneOutcome cmd_tune(const RunConfig& config, std::ostream& log);
TrainOutcome cmd_train(const RunConfig& config, std::ostream& log);
EnsembleOutcome cmd_ensemble(const RunConfig& config, std::ostream& log);
CvOutcome cmd_evaluate(const RunConfig& config, std::ostream& log);

// Freshly initialized weights of a variant; what train_variant starts from
// when no pretrained model is given.
CnnModel initial_model(const VariantSpec& variant, const Hyperparameters& hp, Shape3 input_shape,
                       std::size_t num_classes, std::uint64_t seed);

// Trains one variant on a prepared split. Shared by train, tune and evaluate.
TrainResult train_variant(const Dataset& train_set, const Dataset& val_set, const VariantSpec& variant,
                          const Hyperparameters& hp, Shape3 input_shape, std::size_t num_classes,
                          std::uint64_t seed, const CnnModel* pretrained = nullptr);

MetricsReport evaluate_model(const CnnModel& model, const Dataset& data, std::size_t num_classes);
MetricsReport evaluate_ensemble(const EnsembleModel& ensemble, const Dataset& data);

// SHA-256 chained over index.csv and every PNG in file-name order.
std::string image_set_hash(const std::filesystem::path& image_dir);

// manifest.json: config snapshot, seeds, artifact hashes, per-stage seconds.
// A "sha256" field covers the rest of the document.
class Manifest {
public:
    static Manifest load_or_create(const std::filesystem::path& output_dir);

    void set_config(const RunConfig& config);
    void record_artifact(const std::filesystem::path& file);
    void record_value(const std::string& key, const std::string& value);
    void record_stage(const std::string& stage, double seconds);
    void save() const;

    std::string artifact_hash(const std::string& relative) const;
    std::string config_json() const;  // snapshot written by set_config, or ""
    std::string value(const std::string& key) const;

    // Throws CorruptionError when the stored sha256 does not match.
    static void verify(const std::filesystem::path& manifest_file);

private:
    std::filesystem::path dir_;
    std::string json_;  // serialized nlohmann::json body
};

} // namespace vehids
