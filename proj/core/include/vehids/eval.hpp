#pragma once

#include "vehids/cnn.hpp"

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace vehids {

struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::size_t> counts;  // row = true class, column = predicted

    std::size_t at(std::size_t truth, std::size_t predicted) const
    {
        return counts[truth * num_classes + predicted];
    }
    std::size_t total() const;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted,
                          std::size_t num_classes);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
    // Set when the denominator was zero and the value defaulted to 0.
    bool precision_undefined = false;
    bool recall_undefined = false;
};

struct MetricsReport {
    std::size_t total = 0;
    double accuracy = 0.0;
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double weighted_precision = 0.0;
    double weighted_recall = 0.0;
    double weighted_f1 = 0.0;
};

// Throws DataError for an all-zero matrix.
MetricsReport metrics(const ConfusionMatrix& matrix);

// key = value lines, one block per class.
std::string metrics_to_text(const MetricsReport& report, const std::vector<std::string>& class_names);

struct FoldPlan {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> folds;
    // False when some class has fewer than k samples.
    bool strictly_stratified = true;

    std::vector<std::size_t> train_indices(std::size_t fold) const;
};

// Stratified shuffled partition of indices 0..labels.size()-1.
FoldPlan kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct HoldoutSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> holdout;
};

// Per-class shuffled split; each class contributes round(fraction * count)
// to the holdout, keeping at least one sample in train when it can.
HoldoutSplit stratified_holdout(std::span<const int> labels, double fraction, std::uint64_t seed);

inline constexpr double realtime_budget_ms = 10.0;

struct TimingReport {
    std::size_t images = 0;
    std::size_t repetitions = 0;
    double mean_ms = 0.0;
    double p95_ms = 0.0;
    bool over_budget = false;  // mean above realtime_budget_ms
};

// One untimed warm-up pass, then `repetitions` timed passes; statistics are
// over every per-image measurement. Runs on the calling thread only.
TimingReport time_inference(const std::function<void(std::span<const float>)>& infer,
                            const Dataset& images, std::size_t repetitions);

struct SummaryRow {
    std::string model;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double train_seconds = 0.0;
    double test_ms_per_image = 0.0;
    double test_ms_per_packet = 0.0;
};

SummaryRow summary_row(std::string model, const MetricsReport& m, double train_seconds,
                       const TimingReport& timing, std::size_t packets_per_image);

// Columns: model,accuracy,precision,recall,f1,train_time_s,
// test_time_per_image_ms,test_time_per_packet_ms. Scores are percentages.
void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows);

} // namespace vehids
