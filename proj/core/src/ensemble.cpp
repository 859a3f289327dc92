#include "vehids/ensemble.hpp"

#include "vehids/error.hpp"

#include <algorithm>
#include <numeric>

namespace vehids {

namespace {

constexpr std::uint32_t ensemble_payload_version = 1;

void check_compatible(const std::vector<CnnModel>& models)
{
    if (models.empty())
        throw ConfigError("ensemble needs at least one base model");
    for (const auto& m : models)
        if (m.input_shape != models.front().input_shape || m.num_classes != models.front().num_classes)
            throw ConfigError("base models disagree on input shape or class count");
}

} // namespace

std::string to_string(EnsembleStrategy s)
{
    return s == EnsembleStrategy::concatenation ? "concatenation" : "averaging";
}

EnsembleStrategy strategy_from_string(std::string_view s)
{
    if (s == "averaging" || s == "confidence_averaging")
        return EnsembleStrategy::confidence_averaging;
    if (s == "concatenation" || s == "concat")
        return EnsembleStrategy::concatenation;
    throw ConfigError("unknown ensemble strategy '" + std::string(s) + "'");
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k)
{
    if (k > scores.size())
        throw ConfigError("cannot select top " + std::to_string(k) + " of " +
                          std::to_string(scores.size()) + " models");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(k);
    return idx;
}

ClassDecision confidence_average(std::span<const std::vector<double>> probs)
{
    if (probs.empty())
        throw ShapeError("confidence averaging needs at least one probability vector");
    const auto C = probs.front().size();
    ClassDecision d;
    d.combined.assign(C, 0.0);
    for (const auto& p : probs) {
        if (p.size() != C)
            throw ShapeError("probability vectors differ in length");
        for (std::size_t i = 0; i < C; ++i)
            d.combined[i] += p[i];
    }
    for (auto& v : d.combined)
        v /= static_cast<double>(probs.size());
    d.label = static_cast<int>(argmax(d.combined));
    d.confidence = d.combined[static_cast<std::size_t>(d.label)];
    d.per_model.assign(probs.begin(), probs.end());
    return d;
}

std::size_t EnsembleModel::feature_width() const
{
    std::size_t f = 0;
    for (const auto& m : base_models)
        f += m.dense_width();
    return f;
}

EnsembleModel make_averaging_ensemble(std::vector<CnnModel> models)
{
    check_compatible(models);
    EnsembleModel e;
    e.strategy = EnsembleStrategy::confidence_averaging;
    e.base_models = std::move(models);
    return e;
}

std::vector<float> concatenated_features(std::span<const CnnModel> models, std::span<const float> input)
{
    std::vector<float> out;
    for (const auto& m : models) {
        auto f = extract_dense_features(m, input);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

ConcatBuild build_concatenated(std::vector<CnnModel> models, const Dataset& train_set,
                               const Dataset& val_set, const CnnConfig& config)
{
    check_compatible(models);
    for (const auto& m : models)
        if (!m.has_dense())
            throw ConfigError("concatenation needs a dense layer in every base model");

    auto to_features = [&](const Dataset& data) {
        Dataset out;
        out.reserve(data.size());
        for (const auto& s : data)
            out.push_back({concatenated_features(models, s.input), s.label});
        return out;
    };
    const auto train_f = to_features(train_set);
    const auto val_f = to_features(val_set);

    EnsembleModel e;
    e.strategy = EnsembleStrategy::concatenation;
    e.base_models = std::move(models);
    const auto F = e.feature_width();

    CnnConfig head_cfg = config;
    head_cfg.conv_filters.clear();
    head_cfg.dense_width = 0;
    head_cfg.frozen_layers = 0;
    auto head = build_cnn(head_cfg, Shape3{F, 1, 1}, e.num_classes());
    auto result = train(std::move(head), train_f, val_f, head_cfg);
    e.concat_head = std::move(result.model);
    return {std::move(e), std::move(result.report)};
}

ClassDecision predict(const EnsembleModel& ensemble, std::span<const float> input)
{
    if (ensemble.base_models.empty())
        throw ConfigError("empty ensemble");
    if (input.size() != ensemble.input_shape().size())
        throw ShapeError("input length " + std::to_string(input.size()) + " != ensemble input " +
                         std::to_string(ensemble.input_shape().size()));
    if (ensemble.strategy == EnsembleStrategy::confidence_averaging) {
        std::vector<std::vector<double>> probs;
        probs.reserve(ensemble.base_models.size());
        for (const auto& m : ensemble.base_models)
            probs.push_back(predict_proba(m, input));
        return confidence_average(probs);
    }
    if (!ensemble.concat_head)
        throw ConfigError("concatenation ensemble has no trained head");
    auto features = concatenated_features(ensemble.base_models, input);
    if (features.size() != ensemble.concat_head->input_shape.size())
        throw ShapeError("concatenated feature length " + std::to_string(features.size()) +
                         " != recorded F " + std::to_string(ensemble.concat_head->input_shape.size()));
    ClassDecision d;
    d.combined = predict_proba(*ensemble.concat_head, features);
    d.label = static_cast<int>(argmax(d.combined));
    d.confidence = d.combined[static_cast<std::size_t>(d.label)];
    return d;
}

void save_ensemble(const std::filesystem::path& path, const EnsembleModel& ensemble,
                   const std::vector<std::filesystem::path>& base_files)
{
    if (base_files.size() != ensemble.base_models.size())
        throw ConfigError("need one base model file per ensemble member");
    ByteWriter w;
    w.u32(ensemble_payload_version);
    w.u8(static_cast<std::uint8_t>(ensemble.strategy));
    w.u64(base_files.size());
    for (std::size_t i = 0; i < base_files.size(); ++i) {
        auto bytes = read_file(base_files[i]);
        // the file on disk must hold the model we are referencing
        if (model_from_bytes(decode_artifact(bytes, ArtifactKind::cnn_model)) != ensemble.base_models[i])
            throw DataError(base_files[i].string() + " does not hold ensemble member " + std::to_string(i));
        w.str(base_files[i].filename().string());
        w.str(sha256_hex(bytes));
    }
    w.u8(ensemble.concat_head ? 1 : 0);
    if (ensemble.concat_head) {
        auto head = model_to_bytes(*ensemble.concat_head);
        w.u64(head.size());
        w.raw(head);
    }
    save_artifact(path, ArtifactKind::ensemble, std::move(w).bytes());
}

namespace {

struct EnsemblePayload {
    EnsembleStrategy strategy;
    std::vector<EnsembleRef> refs;
    std::optional<CnnModel> head;
};

EnsemblePayload read_payload(const std::filesystem::path& path)
{
    auto payload = load_artifact(path, ArtifactKind::ensemble);
    ByteReader r(payload);
    if (auto v = r.u32(); v != ensemble_payload_version)
        throw VersionError("ensemble payload version " + std::to_string(v) + " unsupported");
    EnsemblePayload p;
    auto s = r.u8();
    if (s != 1 && s != 2)
        throw CorruptionError("unknown ensemble strategy tag");
    p.strategy = static_cast<EnsembleStrategy>(s);
    auto k = r.u64();
    if (k == 0 || k > 1024)
        throw CorruptionError("implausible base model count");
    for (std::uint64_t i = 0; i < k; ++i) {
        EnsembleRef ref;
        ref.file = r.str();
        ref.sha256 = r.str();
        p.refs.push_back(std::move(ref));
    }
    if (r.u8()) {
        auto n = r.u64();
        p.head = model_from_bytes(r.raw(n));
    }
    if (!r.at_end())
        throw CorruptionError("trailing bytes after ensemble");
    return p;
}

} // namespace

std::vector<EnsembleRef> ensemble_references(const std::filesystem::path& path)
{
    return read_payload(path).refs;
}

EnsembleModel load_ensemble(const std::filesystem::path& path)
{
    auto p = read_payload(path);
    EnsembleModel e;
    e.strategy = p.strategy;
    const auto dir = path.parent_path();
    for (const auto& ref : p.refs) {
        auto file = dir / ref.file;
        auto bytes = read_file(file);
        if (sha256_hex(bytes) != ref.sha256)
            throw CorruptionError(file.string() + ": content hash does not match ensemble reference");
        e.base_models.push_back(model_from_bytes(decode_artifact(bytes, ArtifactKind::cnn_model)));
    }
    check_compatible(e.base_models);
    e.concat_head = std::move(p.head);
    if (e.strategy == EnsembleStrategy::concatenation) {
        if (!e.concat_head)
            throw CorruptionError("concatenation ensemble without head");
        if (e.concat_head->input_shape.size() != e.feature_width())
            throw CorruptionError("head input width != sum of base dense widths");
    }
    return e;
}

} // namespace vehids
