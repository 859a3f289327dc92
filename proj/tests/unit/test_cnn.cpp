#include "oracles.hpp"

#include "vehids/cnn.hpp"
#include "vehids/error.hpp"
#include "vehids/ingest.hpp"
#include "vehids/transform.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>

using namespace vehids;

namespace {

const Shape3 small_shape{3, 9, 9};

CnnConfig tiny_config(std::uint64_t seed = 1)
{
    CnnConfig c;
    c.conv_filters = {4};
    c.dense_width = 8;
    c.dropout_rate = 0.0;
    c.learning_rate = 0.01;
    c.batch_size = 8;
    c.max_epochs = 20;
    c.early_stop_patience = 3;
    c.rng_seed = seed;
    return c;
}

Dataset black_white(std::size_t per_class, bool flip = false)
{
    Dataset d;
    for (std::size_t i = 0; i < per_class; ++i) {
        d.push_back({std::vector<float>(small_shape.size(), -1.0f), flip ? 1 : 0});
        d.push_back({std::vector<float>(small_shape.size(), 1.0f), flip ? 0 : 1});
    }
    return d;
}

Dataset random_batch(std::size_t n, std::size_t classes, std::uint64_t seed, Shape3 shape = small_shape)
{
    Rng rng(seed);
    Dataset d(n);
    for (auto& s : d) {
        s.input.resize(shape.size());
        for (auto& v : s.input)
            v = static_cast<float>(uniform(rng, -1, 1));
        s.label = static_cast<int>(uniform_index(rng, classes));
    }
    return d;
}

Dataset synthetic_dataset(std::size_t n_records, std::uint64_t seed)
{
    const auto recs = generate_synthetic_can(default_synth_config(n_records, seed));
    const auto map = fit_quantile_map(recs);
    const auto imgs = chunk_records(recs, ChunkSpec::car_hacking(), map);
    return samples_from_images(imgs);
}

} // namespace

TEST_CASE("softmax examples")
{
    const double zeros[] = {0, 0, 0, 0};
    for (double p : softmax(zeros))
        CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
    for (double x : {-700.0, 0.0, 3.5, 1e6}) {
        const double one[] = {x};
        CHECK(softmax(one)[0] == 1.0);
    }
    const double z[] = {1, 2, 3};
    const auto p = softmax(z);
    const auto o = oracle::softmax({1, 2, 3});
    for (int i = 0; i < 3; ++i)
        CHECK(std::abs(p[i] - static_cast<double>(o[i])) < 1e-12);
    CHECK(p[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(p[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(p[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax normalizes, is shift invariant and rejects non-finite input")
{
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> z(1 + uniform_index(rng, 9));
        for (auto& v : z)
            v = uniform(rng, -30, 30);
        const auto p = softmax(z);
        double sum = 0;
        for (double v : p)
            sum += v;
        CHECK(std::abs(sum - 1.0) < 1e-9);
        auto shifted = z;
        for (auto& v : shifted)
            v += 17.25;
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(std::abs(p[i] - q[i]) < 1e-9);
    }
    const double bad[] = {0, std::nan("")};
    CHECK_THROWS_AS(softmax(bad), NumericError);
    const double inf[] = {std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(softmax(inf), NumericError);
}

TEST_CASE("parameter count follows the layer arithmetic")
{
    for (std::size_t dense : {0u, 64u}) {
        CnnConfig c;
        c.conv_filters = {8};
        c.dense_width = dense;
        const auto m = build_cnn(c, small_shape, 5);
        CHECK(m.parameter_count() == oracle::cnn_parameter_count(3, 9, 9, {8}, dense, 5));
    }
    CnnConfig c;
    c.conv_filters = {16, 32};
    c.dense_width = 64;
    CHECK(build_cnn(c, {3, 20, 20}, 6).parameter_count() ==
          oracle::cnn_parameter_count(3, 20, 20, {16, 32}, 64, 6));
}

TEST_CASE("build is deterministic and the head is C wide")
{
    const auto a = build_cnn(tiny_config(7), small_shape, 5);
    const auto b = build_cnn(tiny_config(7), small_shape, 5);
    const auto c = build_cnn(tiny_config(8), small_shape, 5);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    const auto in = random_batch(1, 5, 1)[0].input;
    CHECK(predict_proba(a, in).size() == 5);
}

TEST_CASE("pooling pyramid too deep for the input is a config error")
{
    CnnConfig c;
    c.conv_filters = {4, 4, 4};
    CHECK_THROWS_AS(build_cnn(c, small_shape, 2), ConfigError);
}

TEST_CASE("inference is deterministic and sums to one")
{
    const auto m = build_cnn(tiny_config(3), small_shape, 4);
    for (const auto& s : random_batch(20, 4, 9)) {
        const auto p = predict_proba(m, s.input);
        CHECK(p == predict_proba(m, s.input));
        double sum = 0;
        std::size_t best = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            sum += p[i];
            if (p[i] > p[best])
                best = i;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
        CHECK(predict_label(m, s.input) == static_cast<int>(best));
    }
    CHECK_THROWS_AS(predict_proba(m, std::vector<float>(10)), ShapeError);
}

TEST_CASE("dense features: length, determinism and a hand-checked forward pass")
{
    auto m = build_cnn(tiny_config(5), small_shape, 3);
    const auto in = random_batch(1, 3, 2)[0].input;
    const auto f = extract_dense_features(m, in);
    CHECK(f.size() == 8);
    CHECK(f == extract_dense_features(m, in));

    // Zero input with zero conv bias: every conv activation is 0, so the
    // dense output reduces to relu(dense bias).
    std::fill(m.layers[0].bias.begin(), m.layers[0].bias.end(), 0.0f);
    Rng rng(1);
    for (auto& b : m.layers[1].bias)
        b = static_cast<float>(uniform(rng, -1, 1));
    const auto z = extract_dense_features(m, std::vector<float>(small_shape.size(), 0.0f));
    for (std::size_t i = 0; i < z.size(); ++i) {
        CHECK(std::isfinite(z[i]));
        CHECK(z[i] == std::max(0.0f, m.layers[1].bias[i]));
    }

    auto flat = tiny_config(5);
    flat.dense_width = 0;
    CHECK_THROWS(extract_dense_features(build_cnn(flat, small_shape, 3), in));
}

TEST_CASE("early stopping rule")
{
    EarlyStopping s(3);
    CHECK_FALSE(s.update(1.0, 1));
    CHECK_FALSE(s.update(1.1, 2));
    CHECK_FALSE(s.update(1.2, 3));
    CHECK(s.update(1.3, 4));
    CHECK(s.best_epoch() == 1);

    EarlyStopping t(2);
    CHECK_FALSE(t.update(1.0, 1));
    CHECK_FALSE(t.update(1.0, 2));  // equal is not an improvement
    CHECK(t.update(0.99, 3) == false);
    CHECK(t.best_epoch() == 3);
}

TEST_CASE("rising validation loss stops at epoch 4 and restores epoch 1")
{
    const auto train_set = black_white(8);
    const auto val_set = black_white(8, true);
    auto cfg = tiny_config(2);
    const auto init = build_cnn(cfg, small_shape, 2);
    const auto r = train(init, train_set, val_set, cfg);
    for (std::size_t i = 1; i < r.report.val_loss.size(); ++i)
        REQUIRE(r.report.val_loss[i] > r.report.val_loss[i - 1]);
    CHECK(r.report.stopped_epoch == 4);
    CHECK(r.report.best_epoch == 1);
    cfg.max_epochs = 1;
    CHECK(r.model == train(init, train_set, val_set, cfg).model);
    CHECK(dataset_loss(r.model, val_set) == doctest::Approx(r.report.val_loss[0]).epsilon(1e-6));
}

TEST_CASE("black vs white is learned within 20 epochs")
{
    const auto data = black_white(16);
    const auto cfg = tiny_config(4);
    const auto r = train(build_cnn(cfg, small_shape, 2), data, {}, cfg);
    CHECK(r.report.stopped_epoch <= 20);
    CHECK(accuracy(r.model, data) == 1.0);
}

TEST_CASE("tiny learning rate descends on a fixed batch")
{
    const auto data = random_batch(16, 3, 5);
    auto cfg = tiny_config(6);
    cfg.learning_rate = 1e-4;
    cfg.batch_size = data.size();
    cfg.max_epochs = 5;
    cfg.early_stop_patience = 10;
    const auto r = train(build_cnn(cfg, small_shape, 3), data, {}, cfg);
    REQUIRE(r.report.train_loss.size() == 5);
    for (std::size_t i = 1; i < 5; ++i)
        CHECK(r.report.train_loss[i] < r.report.train_loss[i - 1]);
}

TEST_CASE("training errors")
{
    const auto cfg = tiny_config();
    const auto m = build_cnn(cfg, small_shape, 2);
    CHECK_THROWS_AS(train(m, {}, {}, cfg), DataError);
    Dataset bad = black_white(2);
    bad[0].label = 5;
    CHECK_THROWS(train(m, bad, {}, cfg));
    Dataset poisoned = black_white(4);
    poisoned[3].input[7] = std::nanf("");
    try {
        train(m, poisoned, {}, cfg);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
}

TEST_CASE("frozen layers never move")
{
    const auto data = random_batch(24, 3, 8);
    auto cfg = tiny_config(9);
    cfg.dropout_rate = 0.3;
    auto base = build_cnn(cfg, small_shape, 3);
    for (std::size_t k = 0; k <= base.layer_count(); ++k) {
        FineTuneOptions opt;
        opt.frozen_layers = k;
        cfg.max_epochs = 3;
        const auto r = fine_tune(base, data, {}, opt, cfg);
        for (std::size_t i = 0; i < k; ++i) {
            CHECK(r.model.layers[i].weights == base.layers[i].weights);
            CHECK(r.model.layers[i].bias == base.layers[i].bias);
        }
        if (k < base.layer_count())
            CHECK(r.model.layers.back().weights != base.layers.back().weights);
    }
}

TEST_CASE("fine-tune boundaries")
{
    const auto data = random_batch(24, 3, 10);
    auto cfg = tiny_config(11);
    cfg.max_epochs = 3;
    const auto pre = build_cnn(cfg, small_shape, 3);

    const auto ft = fine_tune(pre, data, {}, FineTuneOptions{}, cfg);
    const auto plain = train(pre, data, {}, cfg);
    CHECK(ft.model == plain.model);

    FineTuneOptions all;
    all.frozen_layers = pre.layer_count();
    all.num_classes = 4;
    all.replace_head = true;
    const auto head_only = fine_tune(pre, random_batch(24, 4, 12), {}, all, cfg);
    CHECK(head_only.model.num_classes == 4);
    CHECK_FALSE(head_only.model.layers.back().frozen);
    for (std::size_t i = 0; i + 1 < pre.layer_count(); ++i)
        CHECK(head_only.model.layers[i] == [&] { auto l = pre.layers[i]; l.frozen = true; return l; }());

    FineTuneOptions mismatch;
    mismatch.num_classes = 4;
    CHECK_THROWS_AS(fine_tune(pre, data, {}, mismatch, cfg), ConfigError);
    FineTuneOptions too_many;
    too_many.frozen_layers = pre.layer_count() + 1;
    CHECK_THROWS_AS(fine_tune(pre, data, {}, too_many, cfg), ConfigError);
}

TEST_CASE("pretraining shortens the path to 99% training accuracy")
{
    const auto source = synthetic_dataset(12000, 100);
    const auto target = synthetic_dataset(12000, 200);
    const std::size_t cap = 40;
    auto epochs_to_target = [&](const CnnModel& start, const CnnConfig& cfg, std::size_t frozen) {
        std::size_t hit = cap + 1;
        FineTuneOptions opt;
        opt.frozen_layers = frozen;
        auto c = cfg;
        c.max_epochs = cap;
        c.early_stop_patience = cap;
        fine_tune(start, target, {}, opt, c, [&](std::size_t epoch, const CnnModel& m) {
            if (accuracy(m, target) >= 0.99) {
                hit = epoch;
                return true;
            }
            return false;
        });
        return hit;
    };

    std::vector<std::size_t> scratch, transfer;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        CnnConfig cfg = table_optimal_config();
        cfg.conv_filters = {16};
        cfg.dense_width = 64;
        cfg.batch_size = 32;
        cfg.rng_seed = seed;
        const auto init = build_cnn(cfg, small_shape, 5);
        auto pcfg = cfg;
        pcfg.max_epochs = 10;
        const auto pre = train(init, source, {}, pcfg).model;
        scratch.push_back(epochs_to_target(init, cfg, 0));
        transfer.push_back(epochs_to_target(pre, cfg, 1));
    }
    std::sort(scratch.begin(), scratch.end());
    std::sort(transfer.begin(), transfer.end());
    MESSAGE("median epochs: scratch " << scratch[2] << ", pretrained " << transfer[2]);
    CHECK(transfer[2] < scratch[2]);
}

TEST_CASE("gradient check")
{
    CnnConfig lin;
    lin.conv_filters = {};
    lin.dense_width = 0;
    lin.rng_seed = 3;
    const auto linear = build_cnn(lin, small_shape, 4);
    const auto batch = random_batch(4, 4, 13);
    CHECK(gradient_check(linear, batch).max_relative_error < 1e-7);

    auto cfg = tiny_config(14);
    const auto tiny = build_cnn(cfg, small_shape, 3);
    REQUIRE(tiny.parameter_count() <= 10000);
    const auto r = gradient_check(tiny, random_batch(6, 3, 15), {.max_parameters = 600, .seed = 2});
    CHECK(r.checked_parameters == 600);
    CHECK(r.max_relative_error < 1e-4);

    auto frozen = tiny;
    set_frozen_layers(frozen, frozen.layer_count());
    const auto f = gradient_check(frozen, random_batch(4, 3, 16));
    CHECK(f.frozen_gradient_max_abs == 0.0);
    CHECK(f.checked_parameters == 0);
}

TEST_CASE("model files round trip")
{
    const auto m = build_cnn(tiny_config(17), small_shape, 3);
    const auto path = std::filesystem::temp_directory_path() / "vehids_unit_model.model";
    save_model(path, m);
    CHECK(load_model(path) == m);
    CHECK(model_from_bytes(model_to_bytes(m)) == m);
    std::filesystem::remove(path);
}

TEST_CASE("images scale to [-1, 1]")
{
    ImageChunk img{9, 9, std::vector<std::uint8_t>(243, 0)};
    img.pixels[1] = 255;
    img.label = 2;
    const auto s = sample_from_image(img);
    CHECK(s.label == 2);
    CHECK(s.input[0] == -1.0f);
    CHECK(s.input[1] == 1.0f);
}
