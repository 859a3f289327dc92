#include "vehids/eval.hpp"

#include "vehids/error.hpp"
#include "vehids/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace vehids {

std::size_t ConfusionMatrix::total() const
{
    std::size_t t = 0;
    for (auto c : counts)
        t += c;
    return t;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, std::size_t num_classes)
{
    if (truth.size() != predicted.size())
        throw ShapeError("label vectors differ in length");
    ConfusionMatrix m;
    m.num_classes = num_classes;
    m.counts.assign(num_classes * num_classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i], p = predicted[i];
        if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes ||
            static_cast<std::size_t>(p) >= num_classes)
            throw DataError("label pair (" + std::to_string(t) + ", " + std::to_string(p) +
                            ") outside [0, " + std::to_string(num_classes) + ")");
        ++m.counts[static_cast<std::size_t>(t) * num_classes + static_cast<std::size_t>(p)];
    }
    return m;
}

MetricsReport metrics(const ConfusionMatrix& m)
{
    const auto C = m.num_classes;
    MetricsReport r;
    r.total = m.total();
    if (r.total == 0)
        throw DataError("metrics are undefined for an empty confusion matrix");

    std::size_t diag = 0;
    for (std::size_t c = 0; c < C; ++c)
        diag += m.at(c, c);
    r.accuracy = static_cast<double>(diag) / static_cast<double>(r.total);

    r.per_class.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t row = 0, col = 0;
        for (std::size_t j = 0; j < C; ++j) {
            row += m.at(c, j);
            col += m.at(j, c);
        }
        auto& pc = r.per_class[c];
        const double tp = static_cast<double>(m.at(c, c));
        pc.support = row;
        pc.precision_undefined = col == 0;
        pc.recall_undefined = row == 0;
        pc.precision = col ? tp / static_cast<double>(col) : 0.0;
        pc.recall = row ? tp / static_cast<double>(row) : 0.0;
        pc.f1 = pc.precision + pc.recall > 0 ? 2 * pc.precision * pc.recall / (pc.precision + pc.recall) : 0.0;

        r.macro_precision += pc.precision;
        r.macro_recall += pc.recall;
        r.macro_f1 += pc.f1;
        const double w = static_cast<double>(row) / static_cast<double>(r.total);
        r.weighted_precision += w * pc.precision;
        r.weighted_recall += w * pc.recall;
        r.weighted_f1 += w * pc.f1;
    }
    r.macro_precision /= static_cast<double>(C);
    r.macro_recall /= static_cast<double>(C);
    r.macro_f1 /= static_cast<double>(C);
    return r;
}

std::string metrics_to_text(const MetricsReport& r, const std::vector<std::string>& class_names)
{
    std::ostringstream os;
    os.precision(8);
    os << "version = 1\n";
    os << "total = " << r.total << '\n';
    os << "accuracy = " << r.accuracy << '\n';
    os << "macro_precision = " << r.macro_precision << '\n';
    os << "macro_recall = " << r.macro_recall << '\n';
    os << "macro_f1 = " << r.macro_f1 << '\n';
    os << "weighted_precision = " << r.weighted_precision << '\n';
    os << "weighted_recall = " << r.weighted_recall << '\n';
    os << "weighted_f1 = " << r.weighted_f1 << '\n';
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        const auto& pc = r.per_class[c];
        const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
        os << "class." << name << ".support = " << pc.support << '\n';
        os << "class." << name << ".precision = " << pc.precision << (pc.precision_undefined ? "  # undefined" : "") << '\n';
        os << "class." << name << ".recall = " << pc.recall << (pc.recall_undefined ? "  # undefined" : "") << '\n';
        os << "class." << name << ".f1 = " << pc.f1 << '\n';
    }
    return os.str();
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const
{
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f)
        if (f != fold)
            out.insert(out.end(), folds[f].begin(), folds[f].end());
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(std::span<const int> labels)
{
    std::vector<std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0)
            throw DataError("negative class label");
        const auto c = static_cast<std::size_t>(labels[i]);
        if (c >= by_class.size())
            by_class.resize(c + 1);
        by_class[c].push_back(i);
    }
    return by_class;
}

} // namespace

FoldPlan kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed)
{
    if (k < 2)
        throw ConfigError("k-fold needs k >= 2");
    if (labels.size() < k)
        throw DataError("cannot split " + std::to_string(labels.size()) + " samples into " +
                        std::to_string(k) + " folds");
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.resize(k);
    Rng rng(seed);
    auto by_class = indices_by_class(labels);
    // deal each shuffled class round-robin, continuing where the previous
    // class stopped so fold sizes stay within one of each other
    std::size_t next = 0;
    for (auto& idx : by_class) {
        if (!idx.empty() && idx.size() < k)
            plan.strictly_stratified = false;
        shuffle(std::span(idx), rng);
        for (auto i : idx) {
            plan.folds[next].push_back(i);
            next = (next + 1) % k;
        }
    }
    for (auto& f : plan.folds)
        std::sort(f.begin(), f.end());
    return plan;
}

HoldoutSplit stratified_holdout(std::span<const int> labels, double fraction, std::uint64_t seed)
{
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw ConfigError("holdout fraction must be in [0, 1)");
    HoldoutSplit s;
    Rng rng(seed);
    for (auto& idx : indices_by_class(labels)) {
        shuffle(std::span(idx), rng);
        auto n_hold = static_cast<std::size_t>(std::round(fraction * static_cast<double>(idx.size())));
        if (n_hold >= idx.size() && idx.size() > 1)
            n_hold = idx.size() - 1;
        if (idx.size() == 1)
            n_hold = 0;
        s.holdout.insert(s.holdout.end(), idx.begin(), idx.begin() + static_cast<long>(n_hold));
        s.train.insert(s.train.end(), idx.begin() + static_cast<long>(n_hold), idx.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.holdout.begin(), s.holdout.end());
    return s;
}

TimingReport time_inference(const std::function<void(std::span<const float>)>& infer, const Dataset& images,
                            std::size_t repetitions)
{
    if (images.empty())
        throw DataError("time_inference needs at least one image");
    if (repetitions == 0)
        throw ConfigError("time_inference needs at least one repetition");
    for (const auto& s : images)
        infer(s.input);

    std::vector<double> ms;
    ms.reserve(images.size() * repetitions);
    using clock = std::chrono::steady_clock;
    for (std::size_t r = 0; r < repetitions; ++r)
        for (const auto& s : images) {
            const auto t0 = clock::now();
            infer(s.input);
            const auto t1 = clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    TimingReport t;
    t.images = images.size();
    t.repetitions = repetitions;
    double sum = 0;
    for (double v : ms)
        sum += v;
    t.mean_ms = sum / static_cast<double>(ms.size());
    std::sort(ms.begin(), ms.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size())));
    t.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
    t.over_budget = t.mean_ms > realtime_budget_ms;
    return t;
}

SummaryRow summary_row(std::string model, const MetricsReport& m, double train_seconds,
                       const TimingReport& timing, std::size_t packets_per_image)
{
    SummaryRow r;
    r.model = std::move(model);
    r.accuracy = m.accuracy;
    r.precision = m.macro_precision;
    r.recall = m.macro_recall;
    r.f1 = m.macro_f1;
    r.train_seconds = train_seconds;
    r.test_ms_per_image = timing.mean_ms;
    r.test_ms_per_packet = packets_per_image ? timing.mean_ms / static_cast<double>(packets_per_image) : 0.0;
    return r;
}

void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows)
{
    out << "model,accuracy,precision,recall,f1,train_time_s,test_time_per_image_ms,test_time_per_packet_ms\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, ",%.3f,%.3f,%.3f,%.3f,%.1f,%.4f,%.5f\n", 100 * r.accuracy,
                      100 * r.precision, 100 * r.recall, 100 * r.f1, r.train_seconds, r.test_ms_per_image,
                      r.test_ms_per_packet);
        out << r.model << buf;
    }
}

} // namespace vehids
