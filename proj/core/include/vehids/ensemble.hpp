#pragma once

// Top-k base model selection and the two combiners: confidence averaging of
// softmax outputs, and concatenation of top dense-layer features feeding a
// retrained dropout + softmax head.

#include "vehids/cnn.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vehids {

enum class EnsembleStrategy : std::uint8_t { confidence_averaging = 1, concatenation = 2 };

std::string to_string(EnsembleStrategy s);
EnsembleStrategy strategy_from_string(std::string_view s);  // "averaging" | "concatenation"

struct ClassDecision {
    int label = 0;
    double confidence = 0.0;
    std::vector<double> combined;
    // Averaging: each base model's probability vector, in model order.
    std::vector<std::vector<double>> per_model;
};

// Indices of the k highest scores, best first; equal scores keep the earlier
// index first.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

// Element-wise mean, argmax with lowest-index ties.
ClassDecision confidence_average(std::span<const std::vector<double>> prob_vectors);

struct EnsembleModel {
    EnsembleStrategy strategy = EnsembleStrategy::confidence_averaging;
    std::vector<CnnModel> base_models;
    // Concatenation only: dropout + softmax over F = sum of dense widths.
    std::optional<CnnModel> concat_head;

    std::size_t num_classes() const { return base_models.front().num_classes; }
    Shape3 input_shape() const { return base_models.front().input_shape; }
    std::size_t feature_width() const;  // F
};

EnsembleModel make_averaging_ensemble(std::vector<CnnModel> models);

// Dense features of every base model, concatenated in model order.
std::vector<float> concatenated_features(std::span<const CnnModel> models, std::span<const float> input);

struct ConcatBuild {
    EnsembleModel model;
    TrainReport report;
};

// Trains only the head; `config` supplies dropout, optimizer and stopping
// settings. conv_filters/dense_width/frozen_layers in `config` are ignored.
ConcatBuild build_concatenated(std::vector<CnnModel> models, const Dataset& train_set,
                               const Dataset& val_set, const CnnConfig& config);

ClassDecision predict(const EnsembleModel& ensemble, std::span<const float> input);

// Base models are stored as separate model artifacts and referenced by file
// name plus SHA-256 of the file; `base_files` lists them in model order.
void save_ensemble(const std::filesystem::path& path, const EnsembleModel& ensemble,
                   const std::vector<std::filesystem::path>& base_files);
// Resolves base references relative to the ensemble file's directory and
// verifies their hashes.
EnsembleModel load_ensemble(const std::filesystem::path& path);

struct EnsembleRef {
    std::string file;
    std::string sha256;
};
std::vector<EnsembleRef> ensemble_references(const std::filesystem::path& path);

} // namespace vehids
