#include "oracles.hpp"

#include "vehids/error.hpp"
#include "vehids/random.hpp"
#include "vehids/transform.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace vehids;

namespace {

RecordList column_records(const std::vector<double>& values, std::size_t features = 1)
{
    RecordList recs(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        recs[i].timestamp = static_cast<double>(i);
        recs[i].features.assign(features, values[i]);
    }
    return recs;
}

RecordList random_records(std::size_t n, std::size_t features, std::uint64_t seed)
{
    Rng rng(seed);
    RecordList recs(n);
    for (std::size_t i = 0; i < n; ++i) {
        recs[i].timestamp = static_cast<double>(i);
        recs[i].features.resize(features);
        for (auto& v : recs[i].features)
            v = uniform(rng, -50, 50) * uniform01(rng);
    }
    return recs;
}

std::filesystem::path scratch(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("vehids_unit_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("constant feature gives constant references")
{
    const auto map = fit_quantile_map(column_records(std::vector<double>(500, 5.0)));
    REQUIRE(map.feature_count() == 1);
    REQUIRE(map.references[0].size() == 999);
    CHECK(map.n_quantiles == 999);
    for (double r : map.references[0])
        CHECK(r == 5.0);
}

TEST_CASE("evenly spaced sample reproduces itself on a matching grid")
{
    std::vector<double> v(1000);
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<double>(i + 1);
    std::vector<double> shuffled = v;
    Rng rng(3);
    shuffle(std::span<double>(shuffled), rng);
    const auto map = fit_quantile_map(column_records(shuffled), 1000);
    for (std::size_t k = 0; k < 1000; ++k)
        CHECK(map.references[0][k] == doctest::Approx(v[k]).epsilon(1e-12));
}

TEST_CASE("grid never exceeds every sample plus every midpoint")
{
    std::vector<double> v = {4, 1, 3, 2};
    const auto map = fit_quantile_map(column_records(v));
    CHECK(map.references[0] == std::vector<double>{1, 1.5, 2, 2.5, 3, 3.5, 4});
    CHECK(fit_quantile_map(column_records(v), 3).references[0] == std::vector<double>{1, 2.5, 4});
    CHECK(fit_quantile_map(column_records({7.0})).references[0] == std::vector<double>{7, 7});
}

TEST_CASE("median maps to mid grey and extremes clip")
{
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto recs = random_records(776 + seed % 2, 1, seed);
        const auto map = fit_quantile_map(recs);
        std::vector<double> col;
        for (const auto& r : recs)
            col.push_back(r.features[0]);
        std::sort(col.begin(), col.end());
        const double median = col.size() % 2 ? col[col.size() / 2]
                                             : (col[col.size() / 2 - 1] + col[col.size() / 2]) / 2;
        const double x[] = {median};
        CHECK(apply_quantile_map(map, x)[0] == 128);
        const double below[] = {col.front() - 1};
        const double above[] = {col.back() + 1};
        CHECK(apply_quantile_map(map, below)[0] == 0);
        CHECK(apply_quantile_map(map, above)[0] == 255);
    }
}

TEST_CASE("tail quantile lands where the normal law puts it")
{
    Rng rng(11);
    std::vector<double> v(20000);
    for (auto& x : v)
        x = uniform01(rng);
    const auto map = fit_quantile_map(column_records(v));
    std::sort(v.begin(), v.end());
    const double q = v[static_cast<std::size_t>(0.977 * (v.size() - 1))];
    const double x[] = {q};
    const int got = apply_quantile_map(map, x)[0];
    CHECK(std::abs(got - oracle::quantile_pixel(v, q, 5.0)) <= 2);
    CHECK(std::abs(got - 178) <= 2);
}

TEST_CASE("pixels agree with the full-sample oracle")
{
    const auto recs = random_records(4000, 3, 5);
    const auto map = fit_quantile_map(recs);
    for (std::size_t f = 0; f < 3; ++f) {
        std::vector<double> col;
        for (const auto& r : recs)
            col.push_back(r.features[f]);
        std::sort(col.begin(), col.end());
        Rng rng(f);
        for (int t = 0; t < 200; ++t) {
            const double v = uniform(rng, col.front() - 1, col.back() + 1);
            std::vector<double> raw(3, 0.0);
            raw[f] = v;
            CHECK(std::abs(int(apply_quantile_map(map, raw)[f]) - oracle::quantile_pixel(col, v, 5.0)) <= 2);
        }
    }
}

TEST_CASE("mapping is monotone and ties share a pixel")
{
    std::vector<double> v;
    for (int i = 0; i < 300; ++i)
        v.push_back(i % 7);
    const auto map = fit_quantile_map(column_records(v));
    int prev = -1;
    for (double x = -1; x <= 8; x += 0.01) {
        const double raw[] = {x};
        const int p = apply_quantile_map(map, raw)[0];
        CHECK(p >= prev);
        prev = p;
    }
}

TEST_CASE("features transform independently of their order")
{
    auto recs = random_records(900, 4, 8);
    const auto map = fit_quantile_map(recs);
    RecordList perm = recs;
    const std::size_t order[] = {2, 0, 3, 1};
    for (std::size_t i = 0; i < recs.size(); ++i)
        for (std::size_t j = 0; j < 4; ++j)
            perm[i].features[j] = recs[i].features[order[j]];
    const auto pmap = fit_quantile_map(perm);
    for (std::size_t i = 0; i < 50; ++i) {
        const auto a = apply_quantile_map(map, recs[i].features);
        const auto b = apply_quantile_map(pmap, perm[i].features);
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(b[j] == a[order[j]]);
    }
}

TEST_CASE("intensity endpoints")
{
    CHECK(intensity_from_position(0.0, 5.0) == 0);
    CHECK(intensity_from_position(1.0, 5.0) == 255);
    CHECK(intensity_from_position(0.5, 5.0) == 128);
    CHECK(intensity_from_position(1e-300, 5.0) == 0);
}

TEST_CASE("cdf position interpolates and uses midpoint rank on ties")
{
    const std::vector<double> refs = {0, 1, 1, 1, 4};
    CHECK(cdf_position(refs, -1) == 0.0);
    CHECK(cdf_position(refs, 5) == 1.0);
    CHECK(cdf_position(refs, 1) == doctest::Approx(0.5));
    CHECK(cdf_position(refs, 0.5) == doctest::Approx(0.125));
    CHECK(cdf_position(refs, 2.5) == doctest::Approx(0.875));
}

TEST_CASE("quantile map serialization round trips")
{
    const auto map = fit_quantile_map(random_records(300, 5, 2), 101, 4.0, "fold 1 train");
    const auto back = quantile_map_from_bytes(quantile_map_to_bytes(map));
    CHECK(back.n_quantiles == 101);
    CHECK(back.clip_sigma == 4.0);
    CHECK(back.provenance == "fold 1 train");
    CHECK(back.references == map.references);
}

TEST_CASE("chunk geometry")
{
    const ChunkSpec spec{9, 9};
    auto recs = random_records(27, 9, 1);
    const auto map = fit_quantile_map(recs);
    const auto one = chunk_records(recs, spec, map);
    REQUIRE(one.size() == 1);
    CHECK(one[0].pixels.size() == 243);
    CHECK(one[0].height == 9);
    CHECK(one[0].width == 9);
    CHECK(chunk_records(random_records(100, 9, 2), spec, map).size() == 3);
    CHECK(chunk_records(random_records(26, 9, 2), spec, map).empty());
}

TEST_CASE("record s lands at channel s/H, row s%H")
{
    const ChunkSpec spec{9, 9};
    RecordList recs(27);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].timestamp = double(i);
        recs[i].features.assign(9, double(i));
    }
    const auto map = fit_quantile_map(recs);
    const auto img = chunk_records(recs, spec, map)[0];
    const auto expect = apply_quantile_map(map, recs[13].features);
    for (std::size_t f = 0; f < 9; ++f)
        CHECK(img.at(1, 4, f) == expect[f]);
    for (std::size_t s = 0; s < 27; ++s)
        CHECK(img.pixels[s * 9] == apply_quantile_map(map, recs[s].features)[0]);
}

TEST_CASE("chunk labels")
{
    std::vector<int> labels(20, 0);
    labels.insert(labels.end(), 7, 1);
    CHECK(label_chunk(labels, LabelRule::any_attack) == 1);
    CHECK(label_chunk(labels, LabelRule::plurality) == 0);
    CHECK(label_chunk(std::vector<int>(27, 0)) == 0);
    std::vector<int> tie = {0, 3, 3, 2, 2, 0};
    CHECK(label_chunk(tie, LabelRule::any_attack) == 2);
    CHECK(label_chunk(tie, LabelRule::plurality) == 0);
}

TEST_CASE("plan_chunks slices cover consecutive records")
{
    auto recs = random_records(100, 9, 4);
    recs[40].label = 2;
    const auto plan = plan_chunks(recs, ChunkSpec{9, 9});
    REQUIRE(plan.size() == 3);
    for (std::size_t i = 0; i < plan.size(); ++i) {
        CHECK(plan[i].chunk_index == i);
        CHECK(plan[i].first_record == 27 * i);
    }
    CHECK(plan[1].label == 2);
    CHECK(plan[0].label == 0);
}

TEST_CASE("flow geometry: 20x20x3")
{
    const auto spec = ChunkSpec::flow();
    CHECK(spec.chunk_len() == 60);
    const auto recs = random_records(125, 20, 9);
    const auto imgs = chunk_records(recs, spec, fit_quantile_map(recs));
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0].pixels.size() == 1200);
}

TEST_CASE("batch chunking matches per-record mapping")
{
    auto fit = random_records(2000, 9, 21);
    for (std::size_t i = 0; i < fit.size(); i += 3)
        fit[i].features[4] = std::floor(fit[i].features[4] / 10);
    Rng rng(22);
    auto data = random_records(27 * 40 + 5, 9, 23);
    for (auto& r : data) {
        r.features[4] = std::floor(r.features[4] / 10);
        r.features[7] = uniform(rng, -80, 80);
    }
    data[3].features = fit[10].features;
    for (std::size_t n_q : {std::size_t{7}, std::size_t{1000}, default_n_quantiles}) {
        const auto map = fit_quantile_map(fit, n_q);
        const auto imgs = chunk_records(data, ChunkSpec::car_hacking(), map);
        REQUIRE(imgs.size() == 40);
        for (const auto& img : imgs)
            for (std::size_t s = 0; s < 27; ++s) {
                const auto& rec = data[img.chunk_index * 27 + s];
                CHECK(std::equal(img.pixels.begin() + static_cast<std::ptrdiff_t>(s * 9),
                                 img.pixels.begin() + static_cast<std::ptrdiff_t>(s * 9 + 9),
                                 apply_quantile_map(map, rec.features).begin()));
            }
    }
}

TEST_CASE("feature count must match the chunk width")
{
    const auto recs = random_records(30, 8, 1);
    CHECK_THROWS(chunk_records(recs, ChunkSpec{9, 9}, fit_quantile_map(recs)));
}

TEST_CASE("PNG export round trips")
{
    const auto dir = scratch("png");
    auto recs = random_records(81, 9, 6);
    recs[30].label = 1;
    const auto imgs = chunk_records(recs, ChunkSpec{9, 9}, fit_quantile_map(recs));
    ImageSetWriter writer(dir, {"Normal", "DoS"});
    for (const auto& img : imgs) {
        writer.write(img);
        const auto path = dir / image_file_name(img, {"Normal", "DoS"});
        const auto back = import_image(path);
        CHECK(back.pixels == img.pixels);
        CHECK(back.height == img.height);
    }
    CHECK(writer.count() == 3);
    std::ifstream idx(writer.index_path());
    std::size_t lines = 0;
    for (std::string line; std::getline(idx, line);)
        lines += !line.empty();
    CHECK(lines == 1 + imgs.size());
    CHECK(image_file_name(imgs[1], {"Normal", "DoS"}).find("DoS") != std::string::npos);

    ImageChunk black{9, 9, std::vector<std::uint8_t>(243, 0)};
    export_image(black, dir / "black.png");
    const auto b = import_image(dir / "black.png");
    CHECK(std::all_of(b.pixels.begin(), b.pixels.end(), [](auto p) { return p == 0; }));
}

TEST_CASE("fit rejects empty input")
{
    CHECK_THROWS(fit_quantile_map(RecordList{}));
}
