// Microbenchmarks for the hot paths: block digesting, the serving loop with
// the countermeasure off vs on, and whole trials. Run manually; not wired
// into ctest.

#include <benchmark/benchmark.h>

#include "kvguard/digest.hpp"
#include "kvguard/engine.hpp"
#include "kvguard/fault_lab.hpp"
#include "kvguard/workload.hpp"

#include <vector>

namespace {

using namespace kvguard;

TrialEnv default_env(bool integrity_on) {
    TrialEnv env;
    env.model = ToyModelConfig{};
    env.geometry = KvGeometry{env.model.n_layers, 1024, 16, env.model.n_kv_heads,
                              env.model.head_dim};
    env.integrity = IntegrityConfig{integrity_on, std::nullopt, "SHA-256"};
    env.workload = WorkloadConfig{};
    return env;
}

void BM_Sha256Block(benchmark::State& state) {
    std::vector<uint8_t> block(static_cast<size_t>(state.range(0)));
    for (size_t i = 0; i < block.size(); ++i) block[i] = static_cast<uint8_t>(i * 131);
    for (auto _ : state) {
        benchmark::DoNotOptimize(sha256(block));
    }
    state.SetBytesProcessed(static_cast<int64_t>(state.iterations()) *
                            static_cast<int64_t>(block.size()));
}
BENCHMARK(BM_Sha256Block)->Arg(256)->Arg(2048)->Arg(16384);

void BM_WarmRequest(benchmark::State& state) {
    TrialEnv env = default_env(state.range(0) != 0);
    Engine engine(env.model, env.geometry, env.integrity);
    auto prefix = make_prefix(11, env.workload, env.model.vocab_size);
    Request req = make_request(13, 0, prefix, env.workload, env.model.vocab_size);
    engine.run_request(req);  // warm the shared prefix
    for (auto _ : state) {
        benchmark::DoNotOptimize(engine.run_request(req));
    }
    state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) *
                            env.model.max_new_tokens);
}
BENCHMARK(BM_WarmRequest)->Arg(0)->Arg(1)->ArgNames({"integrity"});

void BM_ColdRequest(benchmark::State& state) {
    TrialEnv env = default_env(false);
    auto prefix = make_prefix(11, env.workload, env.model.vocab_size);
    Request req = make_request(13, 0, prefix, env.workload, env.model.vocab_size);
    for (auto _ : state) {
        Engine engine(env.model, env.geometry, env.integrity);
        benchmark::DoNotOptimize(engine.run_request(req));
    }
}
BENCHMARK(BM_ColdRequest);

void BM_InjectionTrial(benchmark::State& state) {
    TrialEnv env = default_env(false);
    uint64_t seed = 1;
    for (auto _ : state) {
        benchmark::DoNotOptimize(run_trial(env, 14, static_cast<int>(state.range(0)), seed++));
    }
}
BENCHMARK(BM_InjectionTrial)->Arg(2)->Arg(8)->ArgNames({"n_c"});

}  // namespace

BENCHMARK_MAIN();
