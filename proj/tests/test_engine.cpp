#include <doctest.h>

#include "kvguard/engine.hpp"

#include "kvguard/fault_lab.hpp"
#include "kvguard/rng.hpp"
#include "kvguard/workload.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

using namespace kvguard;

namespace {

ToyModelConfig small_model() {
    ToyModelConfig m;
    m.vocab_size = 64;
    m.hidden_dim = 32;
    m.head_dim = 8;
    m.max_new_tokens = 24;
    return m;
}

KvGeometry geom_for(const ToyModelConfig& m, int n_blocks = 64, int block_size = 8) {
    return KvGeometry{m.n_layers, n_blocks, block_size, m.n_kv_heads, m.head_dim};
}

const IntegrityConfig kNoIntegrity{false, std::nullopt, "SHA-256"};

Request req_of(std::vector<TokenId> prefix, std::vector<TokenId> suffix, uint64_t id = 1) {
    Request r;
    r.request_id = id;
    r.prefix_tokens = std::move(prefix);
    r.suffix_tokens = std::move(suffix);
    return r;
}

}  // namespace

TEST_CASE("weights and outputs are functions of the seed alone") {
    ToyModelConfig m = small_model();
    Model a = build_model(m);
    Model b = build_model(m);
    CHECK(a.embedding == b.embedding);
    CHECK(a.w_logits == b.w_logits);

    m.weight_seed = 2;
    Model c = build_model(m);
    CHECK(a.embedding != c.embedding);

    Engine e1(small_model(), geom_for(small_model()), kNoIntegrity);
    Engine e2(small_model(), geom_for(small_model()), kNoIntegrity);
    Request r = req_of({1, 2, 3, 4, 5, 6, 7, 8}, {9, 10});
    auto o1 = e1.run_request(r);
    auto o2 = e2.run_request(r);
    CHECK(o1.tokens == o2.tokens);
    CHECK(o1.tokens.size() == 24);
    CHECK_FALSE(o1.degenerate);
}

TEST_CASE("engine rejects a geometry that disagrees with the model") {
    ToyModelConfig m = small_model();
    KvGeometry g = geom_for(m);
    g.head_dim = 4;
    CHECK_THROWS_AS(Engine(m, g, kNoIntegrity), std::invalid_argument);
    KvGeometry g2 = geom_for(m);
    g2.n_layers = 3;
    CHECK_THROWS_AS(Engine(m, g2, kNoIntegrity), std::invalid_argument);
}

TEST_CASE("cache hits are output-transparent") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    Request r = req_of({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, {13, 14, 15});

    auto cold = engine.run_request(r);
    // every full prompt block was a miss on the first pass
    REQUIRE(cold.served_from_cache.size() == 1);  // 15 tokens / block 8 -> 1 full block
    CHECK_FALSE(cold.served_from_cache[0]);

    auto warm = engine.run_request(r);
    CHECK(warm.served_from_cache[0]);
    CHECK(warm.tokens == cold.tokens);

    // fresh engine agrees bit for bit
    Engine fresh(m, geom_for(m), kNoIntegrity);
    CHECK(fresh.run_request(r).tokens == cold.tokens);
}

TEST_CASE("a block-aligned prompt recomputes its last block to produce logits") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    Request r = req_of({1, 2, 3, 4, 5, 6, 7, 8}, {9, 10, 11, 12, 13, 14, 15, 16});  // 16 = 2 blocks

    auto cold = engine.run_request(r);
    REQUIRE(cold.served_from_cache.size() == 2);
    auto warm = engine.run_request(r);
    CHECK(warm.tokens == cold.tokens);
    CHECK(warm.served_from_cache[0]);
    // the final block is always recomputed: its last position owns the logits
    CHECK_FALSE(warm.served_from_cache[1]);
}

TEST_CASE("salted requests never share cache with unsalted twins") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    Request plain = req_of({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, {11});
    Request salted = plain;
    salted.salt = std::vector<uint8_t>{0xAA};

    auto first = engine.run_request(plain);
    auto second = engine.run_request(salted);
    // same tokens, but the salted chain is distinct: no hit
    CHECK_FALSE(second.served_from_cache[0]);
    // the computation itself is salt-independent
    CHECK(second.tokens == first.tokens);

    auto salted_again = engine.run_request(salted);
    CHECK(salted_again.served_from_cache[0]);  // now cached under the salted chain
}

TEST_CASE("decode extends the chain: generated full blocks are sealed and reusable") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    Request r = req_of({1, 2, 3, 4, 5, 6, 7, 8}, {9, 10});  // prompt 10, +24 generated = 34
    auto out = engine.run_request(r);

    // 34 positions = 4 full blocks of 8 (+2 spare); all four sealed & mapped
    std::vector<TokenId> all = r.prefix_tokens;
    all.insert(all.end(), r.suffix_tokens.begin(), r.suffix_tokens.end());
    all.insert(all.end(), out.tokens.begin(), out.tokens.end());
    auto hashes = engine.pool().chain_hashes(all, {});
    REQUIRE(hashes.size() == 4);
    for (const auto& h : hashes) {
        auto id = engine.pool().lookup(h);
        REQUIRE(id.has_value());
        CHECK(engine.pool().meta(*id).sealed);
    }
    // all blocks were released at cycle end
    CHECK(engine.pool().free_count() == static_cast<size_t>(engine.pool().n_blocks()));
}

TEST_CASE("one cycle with duplicate prefixes stays consistent") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    std::vector<TokenId> prefix{1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<Request> batch{req_of(prefix, {10, 11}, 1), req_of(prefix, {12}, 2),
                               req_of(prefix, {10, 11}, 3)};
    auto outs = engine.run_cycle(batch);
    REQUIRE(outs.size() == 3);
    // identical requests in one batch produce identical outputs
    CHECK(outs[0].tokens == outs[2].tokens);

    // a fresh engine run of the same requests individually agrees
    Engine fresh(m, geom_for(m), kNoIntegrity);
    CHECK(fresh.run_request(batch[0]).tokens == outs[0].tokens);
    Engine fresh2(m, geom_for(m), kNoIntegrity);
    CHECK(fresh2.run_request(batch[1]).tokens == outs[1].tokens);
}

TEST_CASE("forward rejects out-of-vocabulary tokens and empty prompts") {
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    CHECK_THROWS_AS(engine.run_request(req_of({64}, {})), std::out_of_range);
    CHECK_THROWS_AS(engine.run_request(req_of({}, {})), std::invalid_argument);
}

TEST_CASE("attend_head: equal scores give exact uniform weights") {
    // q = 0 makes every score 0; det_exp(0) == 1 exactly, so each weight is
    // exactly 1/4 and the value mix is exact power-of-two arithmetic
    const int dim = 4;
    const size_t n = 4;
    std::vector<float> q(dim, 0.0f);
    std::vector<float> keys(n * dim, 0.37f);  // irrelevant: q.k = 0 regardless
    std::vector<float> values(n * dim, 0.0f);
    for (size_t j = 0; j < n; ++j) {
        values[j * dim + 0] = std::ldexp(1.0f, static_cast<int>(j));  // 1, 2, 4, 8
        values[j * dim + 1] = 0.5f;
    }
    AttnResult r = attend_head(q, keys, values, n, dim, 0.5f);
    REQUIRE(r.weights.size() == n);
    for (float w : r.weights) CHECK(w == 0.25f);
    CHECK(r.output[0] == 3.75f);  // (1+2+4+8)/4 exactly
    CHECK(r.output[1] == 0.5f);
    CHECK(r.output[2] == 0.0f);

    // value-side shift at one (position, channel) moves the output by
    // exactly alpha * delta and touches nothing else
    auto shifted = values;
    shifted[2 * dim + 0] += 8.0f;  // delta = 8 on an exact lattice
    AttnResult r2 = attend_head(q, keys, shifted, n, dim, 0.5f);
    CHECK(r2.weights == r.weights);  // bitwise: weights never read values
    CHECK(r2.output[0] - r.output[0] == 2.0f);  // alpha * delta = 0.25 * 8
    CHECK(r2.output[1] == r.output[1]);
    CHECK(r2.output[2] == r.output[2]);
    CHECK(r2.output[3] == r.output[3]);
}

TEST_CASE("attend_head: value perturbation shifts by alpha*delta under real weights") {
    const int dim = 8;
    const size_t n = 13;
    Rng rng(404);
    std::vector<float> q(dim), keys(n * dim), values(n * dim);
    for (auto& x : q) x = unit_symmetric(rng.next_u64());
    for (auto& x : keys) x = unit_symmetric(rng.next_u64());
    for (auto& x : values) x = unit_symmetric(rng.next_u64());

    AttnResult base = attend_head(q, keys, values, n, dim, 0.35355339f);
    const size_t j = 7;
    const int d = 3;
    const float delta = 1.625f;
    auto shifted = values;
    shifted[j * dim + static_cast<size_t>(d)] += delta;
    AttnResult moved = attend_head(q, keys, shifted, n, dim, 0.35355339f);

    CHECK(moved.weights == base.weights);
    for (int c = 0; c < dim; ++c) {
        if (c == d) continue;
        CHECK(moved.output[static_cast<size_t>(c)] == base.output[static_cast<size_t>(c)]);
    }
    double expected = static_cast<double>(base.weights[j]) * static_cast<double>(delta);
    double got = static_cast<double>(moved.output[d]) - static_cast<double>(base.output[d]);
    CHECK(std::fabs(got - expected) <= 1e-6);
}

TEST_CASE("attend_head: NaN poisoning routes") {
    const int dim = 2;
    const size_t n = 3;
    std::vector<float> q{1.0f, 0.5f};
    std::vector<float> keys(n * dim, 0.25f);
    std::vector<float> values(n * dim, 1.0f);

    // NaN value poisons exactly its channel
    auto v_bad = values;
    v_bad[1 * dim + 1] = std::nanf("");
    AttnResult rv = attend_head(q, keys, v_bad, n, dim, 0.7f);
    CHECK_FALSE(std::isnan(rv.output[0]));
    CHECK(std::isnan(rv.output[1]));

    // NaN key poisons the whole softmax, and with it every channel
    auto k_bad = keys;
    k_bad[0] = std::nanf("");
    AttnResult rk = attend_head(q, k_bad, values, n, dim, 0.7f);
    for (float w : rk.weights) CHECK(std::isnan(w));
    for (float o : rk.output) CHECK(std::isnan(o));
}

TEST_CASE("corrupted cache reads flow into outputs deterministically") {
    ToyModelConfig m = small_model();
    TrialEnv env{m, geom_for(m), kNoIntegrity, WorkloadConfig{16, 2, 2}};
    Engine engine(env.model, env.geometry, env.integrity);
    auto prefix = make_prefix(5, env.workload, m.vocab_size);
    Request r = make_request(6, 0, prefix, env.workload, m.vocab_size);
    auto baseline = engine.run_request(r);

    // flip the top exponent bit of one cached value element
    auto surface = injection_surface(engine, prefix, {});
    REQUIRE_FALSE(surface.empty());
    InjectionSpec spec = pick_target(engine.store().geometry(), surface, 14, 42);
    inject(engine.store(), spec);

    auto corrupted = engine.run_request(r);
    auto corrupted_again = engine.run_request(r);
    CHECK(corrupted.tokens == corrupted_again.tokens);  // corrupted but deterministic
    CHECK(corrupted.served_from_cache[0]);              // served from the dirty block
}

TEST_CASE("degenerate logits trigger the collapse padding rule") {
    // drive the engine into NaN territory by planting a NaN pattern directly
    // in a hot value slot; the output must be all collapse tokens from the
    // first degenerate step and exactly max_new_tokens long
    ToyModelConfig m = small_model();
    Engine engine(m, geom_for(m), kNoIntegrity);
    Request r = req_of({1, 2, 3, 4, 5, 6, 7, 8}, {9, 10});
    engine.run_request(r);

    auto hashes = engine.pool().chain_hashes(r.prefix_tokens, {});
    auto id = engine.pool().lookup(hashes[0]);
    REQUIRE(id.has_value());
    for (int d = 0; d < m.head_dim; ++d) {
        engine.store().write(Coord{0, KvSide::Value, *id, 0, 0, d}, Bf16{0x7FC0});  // NaN
    }
    auto out = engine.run_request(r);
    CHECK(out.degenerate);
    CHECK(out.tokens.size() == static_cast<size_t>(m.max_new_tokens));
    for (TokenId t : out.tokens) CHECK(t == kCollapseToken);
}
