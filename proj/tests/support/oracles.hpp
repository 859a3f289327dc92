#pragma once

// Reference implementations used only by the tests. Each one follows the
// textbook definition directly, in extended precision where it matters, and
// shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

// Inverse standard-normal CDF by bisection on erfc.
inline long double inverse_normal(long double p)
{
    long double lo = -40.0L, hi = 40.0L;
    for (int i = 0; i < 200; ++i) {
        const long double mid = (lo + hi) / 2;
        const long double cdf = 0.5L * std::erfc(-mid / std::sqrt(2.0L));
        (cdf < p ? lo : hi) = mid;
    }
    return (lo + hi) / 2;
}

// Pixel for `value` against the full sorted sample (no quantile grid).
inline int quantile_pixel(const std::vector<double>& sorted, double value, double clip_sigma)
{
    const std::size_t n = sorted.size();
    long double pos;
    if (value < sorted.front()) {
        pos = 0;
    } else if (value > sorted.back()) {
        pos = 1;
    } else {
        const auto lo = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), value) - sorted.begin());
        const auto hi = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), value) - sorted.begin());
        long double rank;
        if (hi > lo)
            rank = (static_cast<long double>(lo) + static_cast<long double>(hi - 1)) / 2;
        else
            rank = static_cast<long double>(lo - 1) +
                   (static_cast<long double>(value) - sorted[lo - 1]) / (sorted[lo] - sorted[lo - 1]);
        pos = rank / static_cast<long double>(n - 1);
    }
    long double z;
    if (pos <= 0)
        z = -clip_sigma;
    else if (pos >= 1)
        z = clip_sigma;
    else
        z = std::clamp<long double>(inverse_normal(pos), -clip_sigma, clip_sigma);
    const long double scaled = (z + clip_sigma) / (2 * clip_sigma) * 255;
    const long double r = scaled >= 0 ? std::floor(scaled + 0.5L) : std::ceil(scaled - 0.5L);
    return static_cast<int>(std::clamp<long double>(r, 0, 255));
}

inline std::vector<long double> softmax(const std::vector<long double>& z)
{
    std::vector<long double> e(z.size());
    long double sum = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        e[i] = std::exp(z[i]);
        sum += e[i];
    }
    for (auto& v : e)
        v /= sum;
    return e;
}

// Mean of the vectors, then the first index holding the maximum.
inline std::size_t mean_then_argmax(const std::vector<std::vector<double>>& probs, std::vector<double>* mean_out)
{
    std::vector<double> mean(probs.front().size(), 0.0);
    for (const auto& p : probs)
        for (std::size_t c = 0; c < p.size(); ++c)
            mean[c] += p[c];
    for (auto& m : mean)
        m /= static_cast<double>(probs.size());
    std::size_t best = 0;
    for (std::size_t c = 1; c < mean.size(); ++c)
        if (mean[c] > mean[best])
            best = c;
    if (mean_out)
        *mean_out = mean;
    return best;
}

struct ClassCount {
    double precision = 0, recall = 0, f1 = 0;
    std::size_t support = 0;
};

struct Scores {
    double accuracy = 0;
    std::vector<ClassCount> per_class;
    double macro_f1 = 0;
};

// Per-class tp/fp/fn by scanning the label pairs once per class.
inline Scores count_scores(const std::vector<int>& truth, const std::vector<int>& pred, int classes)
{
    Scores s;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        correct += truth[i] == pred[i];
    s.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
    for (int c = 0; c < classes; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (pred[i] == c && truth[i] == c)
                ++tp;
            else if (pred[i] == c)
                ++fp;
            else if (truth[i] == c)
                ++fn;
        }
        ClassCount k;
        k.support = tp + fn;
        k.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        k.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        k.f1 = k.precision + k.recall > 0 ? 2 * k.precision * k.recall / (k.precision + k.recall) : 0.0;
        s.macro_f1 += k.f1;
        s.per_class.push_back(k);
    }
    s.macro_f1 /= classes;
    return s;
}

// Weights + biases of conv(3x3) blocks, optional dense layer and softmax head
// on an HxW input with 2x2 floor pooling after every conv block.
inline std::size_t cnn_parameter_count(std::size_t channels, std::size_t height, std::size_t width,
                                       const std::vector<std::size_t>& filters, std::size_t dense,
                                       std::size_t classes)
{
    std::size_t total = 0, in = channels, h = height, w = width;
    for (auto f : filters) {
        total += f * in * 9 + f;
        in = f;
        h /= 2;
        w /= 2;
    }
    std::size_t flat = in * h * w;
    if (dense) {
        total += dense * flat + dense;
        flat = dense;
    }
    return total + classes * flat + classes;
}

} // namespace oracle
