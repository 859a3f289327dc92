#include "oracles.hpp"

#include "vehids/error.hpp"
#include "vehids/eval.hpp"
#include "vehids/random.hpp"

#include <doctest.h>

#include <set>
#include <sstream>
#include <thread>

using namespace vehids;

TEST_CASE("confusion counts")
{
    const int t[] = {0, 0, 1, 1}, p[] = {0, 1, 1, 1};
    const auto m = confusion(t, p, 2);
    CHECK(m.counts == std::vector<std::size_t>{1, 1, 0, 2});
    CHECK(m.total() == 4);
    const auto e = confusion(std::span<const int>{}, std::span<const int>{}, 3);
    CHECK(e.counts == std::vector<std::size_t>(9, 0));
    const int d[] = {0, 1, 2, 2};
    const auto diag = confusion(d, d, 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j)
                CHECK(diag.at(i, j) == 0);
    const int bad[] = {0, 3};
    CHECK_THROWS(confusion(bad, bad, 3));
    CHECK_THROWS(confusion(t, std::span<const int>(p, 3), 2));
}

TEST_CASE("metrics on a hand-checked matrix")
{
    const auto r = metrics({2, {1, 1, 0, 2}});
    CHECK(r.accuracy == doctest::Approx(0.75));
    CHECK(r.per_class[0].precision == doctest::Approx(1.0));
    CHECK(r.per_class[1].precision == doctest::Approx(2.0 / 3));
    CHECK(r.per_class[0].recall == doctest::Approx(0.5));
    CHECK(r.per_class[1].recall == doctest::Approx(1.0));
    CHECK(r.per_class[0].f1 == doctest::Approx(2.0 / 3));
    CHECK(r.per_class[1].f1 == doctest::Approx(0.8));
    CHECK(r.macro_f1 == doctest::Approx((2.0 / 3 + 0.8) / 2));
}

TEST_CASE("degenerate matrices")
{
    const auto diag = metrics({3, {4, 0, 0, 0, 2, 0, 0, 0, 7}});
    CHECK(diag.accuracy == 1.0);
    CHECK(diag.macro_f1 == 1.0);
    CHECK(diag.weighted_f1 == 1.0);
    CHECK(metrics({1, {9}}).accuracy == 1.0);
    CHECK_THROWS_AS(metrics({2, {0, 0, 0, 0}}), DataError);
    const auto absent = metrics({2, {3, 0, 0, 0}});
    CHECK(absent.per_class[1].precision_undefined);
    CHECK(absent.per_class[1].recall_undefined);
    CHECK(absent.per_class[1].f1 == 0.0);
}

TEST_CASE("metrics agree with the brute-force oracle")
{
    Rng rng(21);
    for (int t = 0; t < 1000; ++t) {
        const int c = 2 + static_cast<int>(uniform_index(rng, 5));
        const std::size_t n = 1 + uniform_index(rng, 200);
        std::vector<int> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = static_cast<int>(uniform_index(rng, c));
            pred[i] = uniform01(rng) < 0.6 ? truth[i] : static_cast<int>(uniform_index(rng, c));
        }
        const auto r = metrics(confusion(truth, pred, c));
        const auto o = oracle::count_scores(truth, pred, c);
        CHECK(std::abs(r.accuracy - o.accuracy) < 1e-12);
        CHECK(std::abs(r.macro_f1 - o.macro_f1) < 1e-12);
        for (int k = 0; k < c; ++k) {
            CHECK(std::abs(r.per_class[k].precision - o.per_class[k].precision) < 1e-12);
            CHECK(std::abs(r.per_class[k].recall - o.per_class[k].recall) < 1e-12);
            CHECK(r.per_class[k].support == o.per_class[k].support);
        }
    }
}

TEST_CASE("metrics text names every class")
{
    const auto r = metrics({2, {1, 1, 0, 2}});
    const auto text = metrics_to_text(r, {"Normal", "DoS"});
    CHECK(text.find("Normal") != std::string::npos);
    CHECK(text.find("DoS") != std::string::npos);
    CHECK(text.find("macro_f1") != std::string::npos);
}

TEST_CASE("k-fold sizes, stratification and determinism")
{
    std::vector<int> ten(10, 0);
    const auto plan = kfold_split(ten, 5, 1);
    REQUIRE(plan.folds.size() == 5);
    for (const auto& f : plan.folds)
        CHECK(f.size() == 2);

    std::vector<int> two = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    const auto s = kfold_split(two, 5, 2);
    for (const auto& f : s.folds) {
        REQUIRE(f.size() == 2);
        CHECK(two[f[0]] != two[f[1]]);
    }
    CHECK(s.strictly_stratified);
    CHECK(kfold_split(two, 5, 2).folds == s.folds);
    CHECK(kfold_split(two, 5, 3).folds != s.folds);

    std::vector<int> sparse = {0, 0, 0, 0, 0, 0, 1};
    CHECK_FALSE(kfold_split(sparse, 5, 1).strictly_stratified);
    CHECK_THROWS(kfold_split(two, 1, 1));
    CHECK_THROWS(kfold_split(std::vector<int>(3, 0), 5, 1));
}

TEST_CASE("folds partition the index set and train excludes its fold")
{
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 20 + uniform_index(rng, 300);
        const std::size_t k = 2 + uniform_index(rng, 9);
        std::vector<int> labels(n);
        for (auto& l : labels)
            l = static_cast<int>(uniform_index(rng, 4));
        const auto plan = kfold_split(labels, k, t);
        std::multiset<std::size_t> all;
        std::size_t lo = n, hi = 0;
        for (std::size_t f = 0; f < k; ++f) {
            all.insert(plan.folds[f].begin(), plan.folds[f].end());
            lo = std::min(lo, plan.folds[f].size());
            hi = std::max(hi, plan.folds[f].size());
            const auto tr = plan.train_indices(f);
            CHECK(tr.size() + plan.folds[f].size() == n);
            std::set<std::size_t> fold(plan.folds[f].begin(), plan.folds[f].end());
            for (auto i : tr)
                CHECK(fold.count(i) == 0);
        }
        CHECK(all.size() == n);
        CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == n);
        CHECK(hi - lo <= 4);
    }
}

TEST_CASE("stratified holdout")
{
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c)
        labels.insert(labels.end(), 10 * (c + 1), c);
    labels.push_back(3);
    const auto h = stratified_holdout(labels, 0.2, 4);
    CHECK(h.train.size() + h.holdout.size() == labels.size());
    std::vector<int> held(4, 0);
    for (auto i : h.holdout)
        ++held[labels[i]];
    CHECK(held == std::vector<int>{2, 4, 6, 0});
    CHECK(stratified_holdout(labels, 0.2, 4).holdout == h.holdout);
}

TEST_CASE("timing reports milliseconds with a stable schema")
{
    Dataset imgs(4, Sample{std::vector<float>(8, 0.0f), 0});
    auto noop = [](std::span<const float>) {};
    const auto one = time_inference(noop, imgs, 1);
    const auto five = time_inference(noop, imgs, 5);
    CHECK(one.images == 4);
    CHECK(one.repetitions == 1);
    CHECK(five.repetitions == 5);
    CHECK(five.mean_ms >= 0.0);
    CHECK(five.mean_ms < 1.0);
    CHECK_FALSE(five.over_budget);

    auto slow = [](std::span<const float>) { std::this_thread::sleep_for(std::chrono::microseconds(10500)); };
    const auto s = time_inference(slow, Dataset(2, imgs[0]), 1);
    CHECK(s.mean_ms > realtime_budget_ms);
    CHECK(s.over_budget);
    CHECK(s.p95_ms >= s.mean_ms * 0.9);

    auto micro = [](std::span<const float>) { std::this_thread::sleep_for(std::chrono::microseconds(50)); };
    const auto m = time_inference(micro, imgs, 2);
    CHECK(m.mean_ms > 0.04);
    CHECK(m.mean_ms < 5.0);
}

TEST_CASE("summary table")
{
    const auto r = metrics({2, {1, 1, 0, 2}});
    TimingReport t;
    t.mean_ms = 0.81;
    const auto row = summary_row("ensemble", r, 12.5, t, 27);
    CHECK(row.test_ms_per_packet == doctest::Approx(0.03));
    std::ostringstream out;
    write_summary_table(out, {row});
    CHECK(out.str().rfind("model,accuracy,precision,recall,f1,train_time_s,test_time_per_image_ms,"
                          "test_time_per_packet_ms\n",
                          0) == 0);
    CHECK(out.str().find("ensemble,75") != std::string::npos);
}
