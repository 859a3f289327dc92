#include "vehids/cnn.hpp"

#include "vehids/error.hpp"
#include "vehids/transform.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace vehids {

namespace {

template <class T>
struct Trace {
    std::vector<std::vector<T>> conv_pre;
    std::vector<std::vector<T>> pooled;
    std::vector<std::vector<std::uint32_t>> pool_idx;
    std::vector<T> dense_pre;
    std::vector<T> dense_out;
    std::vector<T> head_in;
    std::vector<T> logits;
};

template <class T>
void conv_forward(const Layer<T>& L, std::span<const T> in, std::vector<T>& out)
{
    const auto H = L.height, W = L.width, C = L.in_size, F = L.out_size;
    out.assign(F * H * W, T(0));
    for (std::size_t f = 0; f < F; ++f) {
        T* o = out.data() + f * H * W;
        std::fill(o, o + H * W, L.bias[f]);
        for (std::size_t c = 0; c < C; ++c) {
            const T* x = in.data() + c * H * W;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t y0 = ky == 0 ? 1 : 0;
                const std::size_t y1 = ky == 2 ? H - 1 : H;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const T w = L.weights[((f * C + c) * 3 + ky) * 3 + kx];
                    const std::size_t x0 = kx == 0 ? 1 : 0;
                    const std::size_t x1 = kx == 2 ? W - 1 : W;
                    for (std::size_t y = y0; y < y1; ++y) {
                        T* orow = o + y * W;
                        const T* irow = x + (y + ky - 1) * W - 1 + kx;
                        for (std::size_t xx = x0; xx < x1; ++xx)
                            orow[xx] += w * irow[xx];
                    }
                }
            }
        }
    }
}

template <class T>
void conv_backward(const Layer<T>& L, std::span<const T> in, std::span<const T> g, std::vector<T>* dw,
                   std::vector<T>* db, std::vector<T>* din)
{
    const auto H = L.height, W = L.width, C = L.in_size, F = L.out_size;
    if (din)
        din->assign(C * H * W, T(0));
    for (std::size_t f = 0; f < F; ++f) {
        const T* go = g.data() + f * H * W;
        if (db) {
            T s = 0;
            for (std::size_t i = 0; i < H * W; ++i)
                s += go[i];
            (*db)[f] += s;
        }
        for (std::size_t c = 0; c < C; ++c) {
            const T* x = in.data() + c * H * W;
            T* dx = din ? din->data() + c * H * W : nullptr;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t y0 = ky == 0 ? 1 : 0;
                const std::size_t y1 = ky == 2 ? H - 1 : H;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::size_t widx = ((f * C + c) * 3 + ky) * 3 + kx;
                    const T w = L.weights[widx];
                    const std::size_t x0 = kx == 0 ? 1 : 0;
                    const std::size_t x1 = kx == 2 ? W - 1 : W;
                    T acc = 0;
                    for (std::size_t y = y0; y < y1; ++y) {
                        const T* grow = go + y * W;
                        const std::size_t off = (y + ky - 1) * W - 1 + kx;
                        const T* irow = x + off;
                        for (std::size_t xx = x0; xx < x1; ++xx)
                            acc += grow[xx] * irow[xx];
                        if (dx) {
                            T* drow = dx + off;
                            for (std::size_t xx = x0; xx < x1; ++xx)
                                drow[xx] += w * grow[xx];
                        }
                    }
                    if (dw)
                        (*dw)[widx] += acc;
                }
            }
        }
    }
}

// ReLU then 2x2/2 max pooling; remembers the winning pre-activation index.
template <class T>
void relu_pool(std::span<const T> pre, std::size_t F, std::size_t H, std::size_t W, std::vector<T>& out,
               std::vector<std::uint32_t>& idx)
{
    const auto Ho = H / 2, Wo = W / 2;
    out.resize(F * Ho * Wo);
    idx.resize(F * Ho * Wo);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t x = 0; x < Wo; ++x) {
                std::size_t best = (f * H + 2 * y) * W + 2 * x;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t i = (f * H + 2 * y + dy) * W + 2 * x + dx;
                        if (pre[i] > pre[best])
                            best = i;
                    }
                const std::size_t o = (f * Ho + y) * Wo + x;
                idx[o] = static_cast<std::uint32_t>(best);
                out[o] = std::max(pre[best], T(0));
            }
}

template <class T>
void affine(const Layer<T>& L, std::span<const T> in, std::vector<T>& out)
{
    out.resize(L.out_size);
    for (std::size_t o = 0; o < L.out_size; ++o) {
        const T* w = L.weights.data() + o * L.in_size;
        T s = L.bias[o];
        for (std::size_t i = 0; i < L.in_size; ++i)
            s += w[i] * in[i];
        out[o] = s;
    }
}

template <class T>
void forward(const Network<T>& net, std::span<const T> input, const std::vector<T>* keep, Trace<T>& tr)
{
    if (input.size() != net.input_shape.size())
        throw ShapeError("input length " + std::to_string(input.size()) + " != model input " +
                         std::to_string(net.input_shape.size()));
    std::span<const T> x = input;
    std::size_t conv_i = 0;
    const auto n_conv = net.conv_filters().size();
    tr.conv_pre.resize(n_conv);
    tr.pooled.resize(n_conv);
    tr.pool_idx.resize(n_conv);
    for (const auto& L : net.layers) {
        switch (L.kind) {
        case LayerKind::conv:
            conv_forward(L, x, tr.conv_pre[conv_i]);
            relu_pool<T>(tr.conv_pre[conv_i], L.out_size, L.height, L.width, tr.pooled[conv_i],
                         tr.pool_idx[conv_i]);
            x = tr.pooled[conv_i];
            ++conv_i;
            break;
        case LayerKind::dense:
            affine(L, x, tr.dense_pre);
            tr.dense_out.resize(tr.dense_pre.size());
            for (std::size_t i = 0; i < tr.dense_pre.size(); ++i)
                tr.dense_out[i] = std::max(tr.dense_pre[i], T(0));
            x = tr.dense_out;
            break;
        case LayerKind::head:
            tr.head_in.assign(x.begin(), x.end());
            if (keep)
                for (std::size_t i = 0; i < tr.head_in.size(); ++i)
                    tr.head_in[i] *= (*keep)[i];
            affine<T>(L, tr.head_in, tr.logits);
            break;
        }
    }
}

template <class T>
T log_sum_exp(std::span<const T> z)
{
    const T m = *std::max_element(z.begin(), z.end());
    T s = 0;
    for (T v : z)
        s += std::exp(v - m);
    return m + std::log(s);
}

template <class T>
T cross_entropy(std::span<const T> logits, int label)
{
    return log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
}

double uniform_limit(std::size_t fan_in, double scale) { return std::sqrt(scale / static_cast<double>(fan_in)); }

template <class T>
void init_layer(Layer<T>& L, std::size_t fan_in, double scale, Rng& rng)
{
    const double lim = uniform_limit(fan_in, scale);
    for (auto& w : L.weights)
        w = static_cast<T>(uniform(rng, -lim, lim));
    std::fill(L.bias.begin(), L.bias.end(), T(0));
}

void check_dataset(const CnnModel& model, const Dataset& data, const char* what)
{
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i].input.size() != model.input_shape.size())
            throw ShapeError(std::string(what) + " sample " + std::to_string(i) + " has " +
                             std::to_string(data[i].input.size()) + " inputs, model expects " +
                             std::to_string(model.input_shape.size()));
        if (data[i].label < 0 || static_cast<std::size_t>(data[i].label) >= model.num_classes)
            throw DataError(std::string(what) + " sample " + std::to_string(i) + " label " +
                            std::to_string(data[i].label) + " outside [0, " +
                            std::to_string(model.num_classes) + ")");
    }
}

struct AdamState {
    std::vector<std::vector<float>> mw, vw, mb, vb;
    std::size_t t = 0;
};

constexpr double adam_beta1 = 0.9;
constexpr double adam_beta2 = 0.999;
constexpr double adam_eps = 1e-7;

void adam_update(std::vector<float>& p, const std::vector<float>& g, std::vector<float>& m,
                 std::vector<float>& v, double lr_t)
{
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = static_cast<float>(adam_beta1 * m[i] + (1 - adam_beta1) * g[i]);
        v[i] = static_cast<float>(adam_beta2 * v[i] + (1 - adam_beta2) * double(g[i]) * g[i]);
        p[i] -= static_cast<float>(lr_t * m[i] / (std::sqrt(double(v[i])) + adam_eps));
    }
}

} // namespace

template <class T>
std::size_t Network<T>::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers)
        n += l.parameter_count();
    return n;
}

template <class T>
bool Network<T>::has_dense() const
{
    return std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.kind == LayerKind::dense; });
}

template <class T>
std::size_t Network<T>::dense_width() const
{
    for (const auto& l : layers)
        if (l.kind == LayerKind::dense)
            return l.out_size;
    return 0;
}

template <class T>
std::size_t Network<T>::flat_size() const
{
    std::size_t n = input_shape.size();
    for (const auto& l : layers)
        if (l.kind == LayerKind::conv)
            n = l.out_size * (l.height / 2) * (l.width / 2);
    return n;
}

template <class T>
std::vector<std::size_t> Network<T>::conv_filters() const
{
    std::vector<std::size_t> f;
    for (const auto& l : layers)
        if (l.kind == LayerKind::conv)
            f.push_back(l.out_size);
    return f;
}

template <class T>
std::vector<T> Network<T>::logits(std::span<const T> input) const
{
    Trace<T> tr;
    forward<T>(*this, input, nullptr, tr);
    return tr.logits;
}

template <class T>
std::vector<T> Network<T>::dense_features(std::span<const T> input) const
{
    if (!has_dense())
        throw ConfigError("model has no dense layer to extract features from");
    Trace<T> tr;
    forward<T>(*this, input, nullptr, tr);
    return tr.dense_out;
}

template <class T>
Gradients<T> Network<T>::zero_gradients() const
{
    Gradients<T> g;
    for (const auto& l : layers) {
        g.weights.emplace_back(l.weights.size(), T(0));
        g.bias.emplace_back(l.bias.size(), T(0));
    }
    return g;
}

template <class T>
T Network<T>::accumulate(std::span<const T> input, int label, const std::vector<T>* keep,
                         Gradients<T>& grads) const
{
    Trace<T> tr;
    forward(*this, input, keep, tr);
    const T loss = cross_entropy<T>(tr.logits, label);

    std::size_t lowest_trainable = layers.size();
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (!layers[i].frozen) {
            lowest_trainable = i;
            break;
        }
    if (lowest_trainable == layers.size())
        return loss;

    // dL/dlogits = softmax - onehot
    std::vector<T> g(tr.logits.size());
    {
        const T lse = log_sum_exp<T>(tr.logits);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = std::exp(tr.logits[i] - lse);
        g[static_cast<std::size_t>(label)] -= T(1);
    }

    std::vector<T> below;
    std::size_t conv_i = tr.conv_pre.size();
    for (std::size_t li = layers.size(); li-- > lowest_trainable;) {
        const auto& L = layers[li];
        const bool need_below = li > lowest_trainable;
        switch (L.kind) {
        case LayerKind::head:
        case LayerKind::dense: {
            std::span<const T> in;
            std::vector<T> g_pre;
            if (L.kind == LayerKind::head) {
                in = tr.head_in;
                g_pre = std::move(g);
            } else {
                in = conv_i > 0 ? std::span<const T>(tr.pooled[conv_i - 1]) : input;
                g_pre = std::move(g);
                for (std::size_t o = 0; o < g_pre.size(); ++o)
                    if (!(tr.dense_pre[o] > T(0)))
                        g_pre[o] = 0;
            }
            if (!L.frozen) {
                auto& dw = grads.weights[li];
                auto& db = grads.bias[li];
                for (std::size_t o = 0; o < L.out_size; ++o) {
                    const T go = g_pre[o];
                    db[o] += go;
                    if (go == T(0))
                        continue;
                    T* row = dw.data() + o * L.in_size;
                    for (std::size_t i = 0; i < L.in_size; ++i)
                        row[i] += go * in[i];
                }
            }
            if (need_below) {
                below.assign(L.in_size, T(0));
                for (std::size_t o = 0; o < L.out_size; ++o) {
                    const T go = g_pre[o];
                    if (go == T(0))
                        continue;
                    const T* row = L.weights.data() + o * L.in_size;
                    for (std::size_t i = 0; i < L.in_size; ++i)
                        below[i] += row[i] * go;
                }
                if (L.kind == LayerKind::head && keep)
                    for (std::size_t i = 0; i < below.size(); ++i)
                        below[i] *= (*keep)[i];
                g = std::move(below);
            }
            break;
        }
        case LayerKind::conv: {
            --conv_i;
            const auto& pre = tr.conv_pre[conv_i];
            const auto& idx = tr.pool_idx[conv_i];
            std::vector<T> g_pre(pre.size(), T(0));
            for (std::size_t o = 0; o < idx.size(); ++o)
                if (pre[idx[o]] > T(0))
                    g_pre[idx[o]] += g[o];
            std::span<const T> in = conv_i > 0 ? std::span<const T>(tr.pooled[conv_i - 1]) : input;
            conv_backward<T>(L, in, g_pre, L.frozen ? nullptr : &grads.weights[li],
                             L.frozen ? nullptr : &grads.bias[li], need_below ? &below : nullptr);
            if (need_below)
                g = std::move(below);
            break;
        }
        }
    }
    return loss;
}

template class Network<float>;
template class Network<double>;
template class Network<long double>;

void CnnConfig::validate() const
{
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ConfigError("dropout_rate must be in [0, 1)");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be positive");
    if (batch_size == 0)
        throw ConfigError("batch_size must be positive");
    if (max_epochs == 0)
        throw ConfigError("max_epochs must be positive");
    for (auto f : conv_filters)
        if (f == 0)
            throw ConfigError("conv block with zero filters");
}

void CnnConfig::validate_tuned() const
{
    validate();
    auto fail = [](const std::string& m) { throw ConfigError("tuned config: " + m); };
    if (!(learning_rate > 0.001 && learning_rate < 0.1))
        fail("learning_rate outside (0.001, 0.1)");
    if (!(dropout_rate > 0.2 && dropout_rate < 0.8))
        fail("dropout_rate outside (0.2, 0.8)");
    if (batch_size < 32 || batch_size > 128)
        fail("batch_size outside [32, 128]");
    if (max_epochs < 5 || max_epochs > 50)
        fail("max_epochs outside [5, 50]");
    if (early_stop_patience < 2 || early_stop_patience > 5)
        fail("early_stop_patience outside [2, 5]");
}

CnnConfig table_optimal_config()
{
    CnnConfig c;
    c.max_epochs = 20;
    c.batch_size = 128;
    c.early_stop_patience = 3;
    c.learning_rate = 0.003;
    c.dropout_rate = 0.5;
    return c;
}

Sample sample_from_image(const ImageChunk& image)
{
    Sample s;
    s.label = image.label;
    s.input.resize(image.pixels.size());
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
        s.input[i] = static_cast<float>(image.pixels[i]) / 127.5f - 1.0f;
    return s;
}

Dataset samples_from_images(std::span<const ImageChunk> images)
{
    Dataset d;
    d.reserve(images.size());
    for (const auto& img : images)
        d.push_back(sample_from_image(img));
    return d;
}

CnnModel build_cnn(const CnnConfig& config, Shape3 input_shape, std::size_t num_classes)
{
    config.validate();
    if (num_classes < 1)
        throw ConfigError("model needs at least one class");
    if (input_shape.size() == 0)
        throw ConfigError("empty input shape");

    CnnModel m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    m.dropout_rate = config.dropout_rate;
    Rng rng(config.rng_seed);

    std::size_t c = input_shape.channels, h = input_shape.height, w = input_shape.width;
    for (std::size_t i = 0; i < config.conv_filters.size(); ++i) {
        if (h < 4 || w < 4)
            throw ConfigError("input " + std::to_string(input_shape.height) + "x" +
                              std::to_string(input_shape.width) + " too small for " +
                              std::to_string(config.conv_filters.size()) + " pooling stages");
        Layer<float> L;
        L.kind = LayerKind::conv;
        L.in_size = c;
        L.out_size = config.conv_filters[i];
        L.height = h;
        L.width = w;
        L.weights.resize(L.out_size * c * 9);
        L.bias.resize(L.out_size);
        init_layer(L, c * 9, 6.0, rng);
        m.layers.push_back(std::move(L));
        c = config.conv_filters[i];
        h /= 2;
        w /= 2;
    }
    std::size_t flat = c * h * w;
    if (config.dense_width > 0) {
        Layer<float> L;
        L.kind = LayerKind::dense;
        L.in_size = flat;
        L.out_size = config.dense_width;
        L.weights.resize(flat * config.dense_width);
        L.bias.resize(config.dense_width);
        init_layer(L, flat, 6.0, rng);
        m.layers.push_back(std::move(L));
        flat = config.dense_width;
    }
    Layer<float> head;
    head.kind = LayerKind::head;
    head.in_size = flat;
    head.out_size = num_classes;
    head.weights.resize(flat * num_classes);
    head.bias.resize(num_classes);
    init_layer(head, flat, 3.0, rng);
    m.layers.push_back(std::move(head));

    if (config.frozen_layers > m.layers.size())
        throw ConfigError("frozen_layers " + std::to_string(config.frozen_layers) + " exceeds " +
                          std::to_string(m.layers.size()) + " weighted layers");
    set_frozen_layers(m, config.frozen_layers);
    return m;
}

void set_frozen_layers(CnnModel& model, std::size_t count)
{
    if (count > model.layers.size())
        throw ConfigError("cannot freeze " + std::to_string(count) + " of " +
                          std::to_string(model.layers.size()) + " layers");
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        model.layers[i].frozen = i < count;
}

std::vector<double> softmax(std::span<const double> logits)
{
    if (logits.empty())
        throw ShapeError("softmax of an empty vector");
    for (double z : logits)
        if (!std::isfinite(z))
            throw NumericError("softmax input is not finite");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        s += p[i];
    }
    for (auto& v : p)
        v /= s;
    return p;
}

std::size_t argmax(std::span<const double> v)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best])
            best = i;
    return best;
}

std::vector<double> predict_proba(const CnnModel& model, std::span<const float> input)
{
    auto z = model.logits(input);
    std::vector<double> zd(z.begin(), z.end());
    return softmax(zd);
}

int predict_label(const CnnModel& model, std::span<const float> input)
{
    return static_cast<int>(argmax(predict_proba(model, input)));
}

std::vector<float> extract_dense_features(const CnnModel& model, std::span<const float> input)
{
    return model.dense_features(input);
}

bool EarlyStopping::update(double loss, std::size_t epoch)
{
    if (best_epoch_ == 0 || loss < best_loss_) {
        best_loss_ = loss;
        best_epoch_ = epoch;
        wait_ = 0;
        improved_ = true;
        return false;
    }
    improved_ = false;
    ++wait_;
    return wait_ >= patience_;
}

double dataset_loss(const CnnModel& model, const Dataset& data)
{
    if (data.empty())
        return 0.0;
    double total = 0.0;
    for (const auto& s : data) {
        auto z = model.logits(s.input);
        std::vector<double> zd(z.begin(), z.end());
        total += cross_entropy<double>(zd, s.label);
    }
    return total / static_cast<double>(data.size());
}

double accuracy(const CnnModel& model, const Dataset& data)
{
    if (data.empty())
        return 0.0;
    std::size_t hit = 0;
    for (const auto& s : data)
        hit += predict_label(model, s.input) == s.label;
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

TrainResult train(CnnModel model, const Dataset& train_set, const Dataset& val_set, const CnnConfig& config,
                  const EpochObserver& observer)
{
    config.validate();
    if (train_set.empty())
        throw DataError("training set is empty");
    check_dataset(model, train_set, "training");
    check_dataset(model, val_set, "validation");

    const auto start = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(config.rng_seed, 101));
    Rng dropout_rng(derive_seed(config.rng_seed, 202));
    const double rate = model.dropout_rate;
    const std::size_t head_in = model.layers.back().in_size;

    AdamState adam;
    for (const auto& l : model.layers) {
        adam.mw.emplace_back(l.weights.size(), 0.0f);
        adam.vw.emplace_back(l.weights.size(), 0.0f);
        adam.mb.emplace_back(l.bias.size(), 0.0f);
        adam.vb.emplace_back(l.bias.size(), 0.0f);
    }

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<float> keep(head_in);

    TrainReport report;
    EarlyStopping stopper(std::max<std::size_t>(config.early_stop_patience, 1));
    auto best_layers = model.layers;

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        shuffle(std::span(order), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t start_i = 0; start_i < order.size(); start_i += config.batch_size) {
            const auto end_i = std::min(order.size(), start_i + config.batch_size);
            auto grads = model.zero_gradients();
            for (std::size_t b = start_i; b < end_i; ++b) {
                const auto& s = train_set[order[b]];
                const std::vector<float>* mask = nullptr;
                if (rate > 0.0) {
                    const float scale = static_cast<float>(1.0 / (1.0 - rate));
                    for (auto& k : keep)
                        k = uniform01(dropout_rng) < rate ? 0.0f : scale;
                    mask = &keep;
                }
                epoch_loss += model.accumulate(s.input, s.label, mask, grads);
            }
            if (!std::isfinite(epoch_loss))
                throw NumericError("training diverged (non-finite loss) in epoch " + std::to_string(epoch));

            const float inv = 1.0f / static_cast<float>(end_i - start_i);
            ++adam.t;
            const double lr_t = config.learning_rate * std::sqrt(1 - std::pow(adam_beta2, double(adam.t))) /
                                (1 - std::pow(adam_beta1, double(adam.t)));
            for (std::size_t li = 0; li < model.layers.size(); ++li) {
                auto& L = model.layers[li];
                if (L.frozen)
                    continue;
                for (auto& g : grads.weights[li])
                    g *= inv;
                for (auto& g : grads.bias[li])
                    g *= inv;
                adam_update(L.weights, grads.weights[li], adam.mw[li], adam.vw[li], lr_t);
                adam_update(L.bias, grads.bias[li], adam.mb[li], adam.vb[li], lr_t);
            }
        }
        epoch_loss /= static_cast<double>(train_set.size());
        report.train_loss.push_back(epoch_loss);

        const double monitored = val_set.empty() ? epoch_loss : dataset_loss(model, val_set);
        if (!std::isfinite(monitored))
            throw NumericError("validation loss is not finite in epoch " + std::to_string(epoch));
        report.val_loss.push_back(monitored);
        report.stopped_epoch = epoch;
        const bool stop = stopper.update(monitored, epoch);
        if (stopper.improved())
            best_layers = model.layers;
        if (stop || (observer && observer(epoch, model)))
            break;
    }
    model.layers = std::move(best_layers);
    report.best_epoch = stopper.best_epoch();
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(model), std::move(report)};
}

TrainResult fine_tune(const CnnModel& pretrained, const Dataset& train_set, const Dataset& val_set,
                      const FineTuneOptions& options, const CnnConfig& config,
                      const EpochObserver& observer)
{
    CnnModel model = pretrained;
    const std::size_t classes = options.num_classes == 0 ? pretrained.num_classes : options.num_classes;
    if (classes != pretrained.num_classes && !options.replace_head)
        throw ConfigError("new task has " + std::to_string(classes) + " classes, pretrained head has " +
                          std::to_string(pretrained.num_classes) + "; set replace_head");
    if (options.frozen_layers > model.layers.size())
        throw ConfigError("frozen_layers " + std::to_string(options.frozen_layers) + " exceeds " +
                          std::to_string(model.layers.size()) + " weighted layers");

    set_frozen_layers(model, options.frozen_layers);
    if (options.replace_head) {
        auto& head = model.layers.back();
        head.out_size = classes;
        head.weights.assign(head.in_size * classes, 0.0f);
        head.bias.assign(classes, 0.0f);
        Rng rng(derive_seed(config.rng_seed, 303));
        init_layer(head, head.in_size, 3.0, rng);
        head.frozen = false;
        model.num_classes = classes;
    }
    model.dropout_rate = config.dropout_rate;
    return train(std::move(model), train_set, val_set, config, observer);
}

GradCheckReport gradient_check(const CnnModel& model, const Dataset& batch, const GradCheckOptions& options)
{
    if (batch.empty())
        throw DataError("gradient check needs at least one sample");
    check_dataset(model, batch, "gradient-check");
    using LD = long double;
    auto net = model.cast<LD>();

    std::vector<std::vector<LD>> inputs;
    for (const auto& s : batch)
        inputs.emplace_back(s.input.begin(), s.input.end());

    auto grads = net.zero_gradients();
    for (std::size_t i = 0; i < batch.size(); ++i)
        net.accumulate(inputs[i], batch[i].label, nullptr, grads);
    const LD inv = LD(1) / static_cast<LD>(batch.size());

    auto loss = [&]() {
        LD total = 0;
        for (std::size_t i = 0; i < batch.size(); ++i)
            total += cross_entropy<LD>(net.logits(inputs[i]), batch[i].label);
        return total * inv;
    };

    GradCheckReport report;
    struct Ref {
        std::size_t layer;
        bool bias;
        std::size_t index;
    };
    std::vector<Ref> params;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const auto& L = net.layers[li];
        if (L.frozen) {
            for (LD g : grads.weights[li])
                report.frozen_gradient_max_abs = std::max(report.frozen_gradient_max_abs, double(std::abs(g * inv)));
            for (LD g : grads.bias[li])
                report.frozen_gradient_max_abs = std::max(report.frozen_gradient_max_abs, double(std::abs(g * inv)));
            continue;
        }
        for (std::size_t i = 0; i < L.weights.size(); ++i)
            params.push_back({li, false, i});
        for (std::size_t i = 0; i < L.bias.size(); ++i)
            params.push_back({li, true, i});
    }
    Rng rng(options.seed);
    shuffle(std::span(params), rng);
    if (params.size() > options.max_parameters)
        params.resize(options.max_parameters);

    for (const auto& p : params) {
        auto& L = net.layers[p.layer];
        LD& w = p.bias ? L.bias[p.index] : L.weights[p.index];
        const LD analytic = (p.bias ? grads.bias[p.layer][p.index] : grads.weights[p.layer][p.index]) * inv;
        const LD orig = w;
        w = orig + options.step;
        const LD up = loss();
        w = orig - options.step;
        const LD down = loss();
        w = orig;
        const LD numeric = (up - down) / (2 * options.step);
        const LD denom = std::max({std::abs(analytic), std::abs(numeric), LD(1e-8)});
        report.max_relative_error =
            std::max(report.max_relative_error, double(std::abs(analytic - numeric) / denom));
    }
    report.checked_parameters = params.size();
    return report;
}

} // namespace vehids
