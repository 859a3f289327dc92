#pragma once

// Compact convolutional classifier: [conv3x3 -> ReLU -> maxpool2x2] blocks,
// flatten, dense + ReLU, dropout, softmax head. Weighted layers (conv, dense,
// head) can be frozen individually, counted from the input side.

#include "vehids/artifact.hpp"
#include "vehids/random.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vehids {

struct ImageChunk;

struct Shape3 {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const { return channels * height * width; }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct CnnConfig {
    std::vector<std::size_t> conv_filters{16};  // one 3x3 conv + 2x2 pool block each
    std::size_t dense_width = 64;               // 0: head sits on the flattened features
    double dropout_rate = 0.5;
    double learning_rate = 0.003;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 20;
    std::size_t early_stop_patience = 3;
    std::size_t frozen_layers = 0;
    std::uint64_t rng_seed = 0;

    // Ranges a tuner may explore: lr (0.001, 0.1), dropout (0.2, 0.8),
    // batch [32, 128], epochs [5, 50], patience [2, 5]. Throws ConfigError.
    void validate_tuned() const;
    // Basic sanity only (positive sizes, probabilities in [0,1)).
    void validate() const;
};

// Optimal values from the hyper-parameter table: epochs 20, batch 128,
// patience 3, lr 0.003, dropout 0.5.
CnnConfig table_optimal_config();

// One training example: a flattened channel-major input and its class.
struct Sample {
    std::vector<float> input;
    int label = 0;
};
using Dataset = std::vector<Sample>;

// Scales pixels to [-1,1].
Sample sample_from_image(const ImageChunk& image);
Dataset samples_from_images(std::span<const ImageChunk> images);

enum class LayerKind : std::uint8_t { conv = 1, dense = 2, head = 3 };

template <class T>
struct Layer {
    LayerKind kind = LayerKind::conv;
    std::size_t in_size = 0;   // conv: input channels; dense/head: input length
    std::size_t out_size = 0;  // conv: filters; dense/head: units
    std::size_t height = 0;    // conv only: input spatial size
    std::size_t width = 0;
    std::vector<T> weights;    // conv [out][in][3][3]; dense/head [out][in]
    std::vector<T> bias;
    bool frozen = false;

    std::size_t parameter_count() const { return weights.size() + bias.size(); }
    friend bool operator==(const Layer&, const Layer&) = default;
};

template <class T>
struct Gradients {
    std::vector<std::vector<T>> weights;
    std::vector<std::vector<T>> bias;
};

template <class T>
class Network {
public:
    Shape3 input_shape;
    std::size_t num_classes = 0;
    double dropout_rate = 0.0;
    std::vector<Layer<T>> layers;

    std::size_t layer_count() const { return layers.size(); }
    std::size_t parameter_count() const;
    bool has_dense() const;
    std::size_t dense_width() const;
    std::size_t flat_size() const;  // length of the flattened conv output
    std::vector<std::size_t> conv_filters() const;

    // Logits for one input; no dropout.
    std::vector<T> logits(std::span<const T> input) const;
    // Post-ReLU output of the dense layer (pre-dropout).
    std::vector<T> dense_features(std::span<const T> input) const;

    // Cross-entropy loss of one sample; adds its gradient into `grads` for
    // every non-frozen layer. `dropout_keep` (optional) holds
    // the inverted-dropout multipliers applied to the head input.
    T accumulate(std::span<const T> input, int label, const std::vector<T>* dropout_keep,
                 Gradients<T>& grads) const;

    Gradients<T> zero_gradients() const;

    template <class U>
    Network<U> cast() const;

    friend bool operator==(const Network&, const Network&) = default;
};

template <class T>
template <class U>
Network<U> Network<T>::cast() const
{
    Network<U> out;
    out.input_shape = input_shape;
    out.num_classes = num_classes;
    out.dropout_rate = dropout_rate;
    for (const auto& l : layers) {
        Layer<U> m;
        m.kind = l.kind;
        m.in_size = l.in_size;
        m.out_size = l.out_size;
        m.height = l.height;
        m.width = l.width;
        m.weights.assign(l.weights.begin(), l.weights.end());
        m.bias.assign(l.bias.begin(), l.bias.end());
        m.frozen = l.frozen;
        out.layers.push_back(std::move(m));
    }
    return out;
}

extern template class Network<float>;
extern template class Network<double>;
extern template class Network<long double>;

using CnnModel = Network<float>;

// Throws ConfigError when a pooling stage would see a side smaller than 4.
CnnModel build_cnn(const CnnConfig& config, Shape3 input_shape, std::size_t num_classes);

// Marks the bottom `count` weighted layers frozen and the rest trainable.
void set_frozen_layers(CnnModel& model, std::size_t count);

// Eq.-1 softmax with max subtraction; throws NumericError on non-finite input.
std::vector<double> softmax(std::span<const double> logits);

std::vector<double> predict_proba(const CnnModel& model, std::span<const float> input);
int predict_label(const CnnModel& model, std::span<const float> input);
std::vector<float> extract_dense_features(const CnnModel& model, std::span<const float> input);

// Ties break to the lowest index.
std::size_t argmax(std::span<const double> v);

// Strict-improvement early stopping on validation loss.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    // Feed the loss of epoch `epoch` (1-based). Returns true when training
    // should stop after this epoch.
    bool update(double loss, std::size_t epoch);
    bool improved() const { return improved_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_loss_; }

private:
    std::size_t patience_;
    std::size_t wait_ = 0;
    std::size_t best_epoch_ = 0;
    double best_loss_ = 0.0;
    bool improved_ = false;
};

struct TrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_loss;    // per epoch; monitored loss for early stopping
    std::size_t stopped_epoch = 0;
    std::size_t best_epoch = 0;
    double seconds = 0.0;
};

struct TrainResult {
    CnnModel model;
    TrainReport report;
};

// Mini-batch Adam (beta 0.9 / 0.999) on cross-entropy. Stops after
// `early_stop_patience` epochs without validation improvement (training loss
// when `val` is empty) and restores the best epoch's weights. Frozen layers are
// never touched.
// Called after every epoch with the current weights; returning true stops
// training early (best weights are still restored).
using EpochObserver = std::function<bool(std::size_t epoch, const CnnModel& model)>;

TrainResult train(CnnModel model, const Dataset& train_set, const Dataset& val_set,
                  const CnnConfig& config, const EpochObserver& observer = {});

// Mean cross-entropy without dropout.
double dataset_loss(const CnnModel& model, const Dataset& data);
double accuracy(const CnnModel& model, const Dataset& data);

struct FineTuneOptions {
    std::size_t frozen_layers = 0;
    // Class count of the new task; 0 keeps the pretrained head's.
    std::size_t num_classes = 0;
    // Re-initialize the head. Required when the class count changes. A fresh
    // head is always trainable.
    bool replace_head = false;
};

TrainResult fine_tune(const CnnModel& pretrained, const Dataset& train_set, const Dataset& val_set,
                      const FineTuneOptions& options, const CnnConfig& config,
                      const EpochObserver& observer = {});

struct GradCheckOptions {
    std::size_t max_parameters = 400;  // random subsample size
    long double step = 1e-5L;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t checked_parameters = 0;
    // Largest |analytic gradient| over frozen layers; exactly 0 by contract.
    double frozen_gradient_max_abs = 0.0;
};

// Central finite differences in long double against backprop, over a random
// subsample of trainable parameters. Intended for <= 1e4 parameters and <= 8
// samples.
GradCheckReport gradient_check(const CnnModel& model, const Dataset& batch,
                               const GradCheckOptions& options = {});

// Versioned binary payload: architecture descriptor, then float32 tensors in
// layer order. Wrap with encode_artifact for files.
Bytes model_to_bytes(const CnnModel& model);
CnnModel model_from_bytes(std::span<const std::uint8_t> payload);

void save_model(const std::filesystem::path& path, const CnnModel& model);
CnnModel load_model(const std::filesystem::path& path);

} // namespace vehids
