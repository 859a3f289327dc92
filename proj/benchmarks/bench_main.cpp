#include "vehids/cnn.hpp"
#include "vehids/ensemble.hpp"
#include "vehids/ingest.hpp"
#include "vehids/transform.hpp"

#include <benchmark/benchmark.h>

namespace {

const vehids::RecordList& traffic()
{
    static const auto records = vehids::generate_synthetic_can(vehids::default_synth_config(20000, 7));
    return records;
}

void BM_FitQuantileMap(benchmark::State& state)
{
    for (auto _ : state)
        benchmark::DoNotOptimize(vehids::fit_quantile_map(traffic()));
}
BENCHMARK(BM_FitQuantileMap)->Unit(benchmark::kMillisecond);

void BM_ChunkRecords(benchmark::State& state)
{
    const auto map = vehids::fit_quantile_map(traffic());
    const auto spec = vehids::ChunkSpec::car_hacking();
    for (auto _ : state)
        benchmark::DoNotOptimize(vehids::chunk_records(traffic(), spec, map));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(traffic().size()));
}
BENCHMARK(BM_ChunkRecords)->Unit(benchmark::kMillisecond);

vehids::CnnModel model_with(std::vector<std::size_t> filters, std::size_t dense)
{
    vehids::CnnConfig c;
    c.conv_filters = std::move(filters);
    c.dense_width = dense;
    return vehids::build_cnn(c, {3, 9, 9}, 5);
}

void BM_PredictSingle(benchmark::State& state)
{
    const auto model = state.range(0) == 0 ? model_with({8}, 32) : model_with({16, 32}, 64);
    const std::vector<float> input(model.input_shape.size(), 0.5f);
    for (auto _ : state)
        benchmark::DoNotOptimize(vehids::predict_proba(model, input));
}
BENCHMARK(BM_PredictSingle)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_PredictAveragingEnsemble(benchmark::State& state)
{
    const auto ens = vehids::make_averaging_ensemble(
        {model_with({8}, 32), model_with({16}, 32), model_with({8, 16}, 32)});
    const std::vector<float> input(ens.input_shape().size(), 0.5f);
    for (auto _ : state)
        benchmark::DoNotOptimize(vehids::predict(ens, input));
}
BENCHMARK(BM_PredictAveragingEnsemble)->Unit(benchmark::kMicrosecond);

} // namespace
BENCHMARK_MAIN();
