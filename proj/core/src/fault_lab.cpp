#include "kvguard/fault_lab.hpp"

#include "kvguard/rng.hpp"

#include <algorithm>
#include <stdexcept>

namespace kvguard {

namespace {

void finalize_metrics(TrialResult& tr) {
    tr.tcr_value = tcr(tr.baselines, tr.outputs);
    tr.ocr_contribution = tr.tcr_value > 0.0 ? 1.0 : 0.0;
    double tdr_sum = 0.0, rouge_sum = 0.0;
    for (size_t i = 0; i < tr.baselines.size(); ++i) {
        double d = tdr(tr.baselines[i], tr.outputs[i]);
        double r = rouge_l_f1(tr.baselines[i], tr.outputs[i]);
        tr.tdr_per_request.push_back(d);
        tr.rouge_per_request.push_back(r);
        tdr_sum += d;
        rouge_sum += r;
    }
    tr.mean_tdr = tdr_sum / static_cast<double>(tr.baselines.size());
    tr.mean_rouge = rouge_sum / static_cast<double>(tr.baselines.size());
    tr.category = classify_trial(tr.tcr_value, tr.mean_rouge);
}

TrialResult collect_trial(std::optional<InjectionSpec> spec, int n_c,
                          const std::vector<GenerationOutput>& base,
                          const std::vector<GenerationOutput>& post) {
    TrialResult tr;
    tr.spec = spec;
    tr.n_c = n_c;
    for (const auto& o : base) tr.baselines.push_back(o.tokens);
    for (const auto& o : post) {
        tr.outputs.push_back(o.tokens);
        tr.any_degenerate = tr.any_degenerate || o.degenerate;
    }
    finalize_metrics(tr);
    return tr;
}

void check_bit(std::optional<int> bit) {
    if (bit && (*bit < 0 || *bit > 15)) {
        throw std::invalid_argument("bit position must be in [0, 15]");
    }
}

}  // namespace

InjectionSpec pick_target(const KvGeometry& g, std::span<const int> surface_blocks,
                          int bit_position, uint64_t seed) {
    if (surface_blocks.empty()) throw std::invalid_argument("pick_target: empty surface");
    check_bit(bit_position);
    Rng rng(seed);
    // draw order is part of the reproducibility contract:
    // layer, block, slot, head, channel
    Coord c;
    c.layer = static_cast<int>(rng.next_below(static_cast<uint64_t>(g.n_layers)));
    c.kv_side = KvSide::Value;
    c.block = surface_blocks[rng.next_below(surface_blocks.size())];
    c.slot = static_cast<int>(rng.next_below(static_cast<uint64_t>(g.block_size)));
    c.head = static_cast<int>(rng.next_below(static_cast<uint64_t>(g.n_kv_heads)));
    c.channel = static_cast<int>(rng.next_below(static_cast<uint64_t>(g.head_dim)));
    return InjectionSpec{bit_position, c, seed};
}

InjectionRecord flip_element(KvStore& store, const Coord& c, int bit_position) {
    Bf16 before = store.read(c);
    Bf16 after = flip_bit(before, bit_position);
    store.write(c, after);
    return InjectionRecord{before, after};
}

InjectionRecord inject(KvStore& store, const InjectionSpec& spec) {
    if (spec.coord.kv_side != KvSide::Value) {
        throw std::invalid_argument("inject: targets value tensors only");
    }
    return flip_element(store, spec.coord, spec.bit_position);
}

std::vector<int> injection_surface(const Engine& engine, std::span<const TokenId> prefix,
                                   const ExtraKeys& extra) {
    const BlockPool& pool = engine.pool();
    std::vector<int> ids;
    for (const Digest& h : pool.chain_hashes(prefix, extra)) {
        auto id = pool.lookup(h);
        if (!id || !pool.meta(*id).sealed) {
            throw std::logic_error("injection_surface: prefix block not cached; warm up first");
        }
        ids.push_back(*id);
    }
    return ids;
}

TrialResult run_trial(const TrialEnv& env, std::optional<int> bit_position, int n_c,
                      uint64_t seed) {
    if (n_c <= 0) throw std::invalid_argument("run_trial: n_c must be positive");
    check_bit(bit_position);
    Engine engine(env.model, env.geometry, env.integrity);
    Rng rng(seed);
    auto prefix = make_prefix(rng.fork(11), env.workload, env.model.vocab_size);
    uint64_t req_seed = rng.fork(13);
    std::vector<Request> batch;
    for (int i = 0; i < n_c; ++i) {
        batch.push_back(make_request(req_seed, static_cast<uint64_t>(i), prefix, env.workload,
                                     env.model.vocab_size));
    }
    engine.run_cycle(batch);                    // warm-up, outputs discarded
    auto base = engine.run_cycle(batch);        // baseline
    std::optional<InjectionSpec> spec;
    if (bit_position) {
        auto surface = injection_surface(engine, prefix, ExtraKeys{});
        spec = pick_target(engine.store().geometry(), surface, *bit_position, rng.fork(17));
        inject(engine.store(), *spec);
    }
    auto post = engine.run_cycle(batch);        // post-injection
    return collect_trial(spec, n_c, base, post);
}

SelectiveTrialResult run_selective_trial(const TrialEnv& env, std::optional<int> bit_position,
                                         int n_per_group, uint64_t seed) {
    if (n_per_group <= 0) throw std::invalid_argument("run_selective_trial: group size");
    check_bit(bit_position);
    Engine engine(env.model, env.geometry, env.integrity);
    Rng rng(seed);
    auto prefix_a = make_prefix(rng.fork(11), env.workload, env.model.vocab_size);
    auto prefix_b = make_prefix(rng.fork(12), env.workload, env.model.vocab_size);
    if (prefix_a == prefix_b) {
        throw std::invalid_argument("run_selective_trial: prefix groups must differ");
    }
    uint64_t seed_a = rng.fork(13), seed_b = rng.fork(14);
    std::vector<Request> batch;
    for (int i = 0; i < n_per_group; ++i) {
        batch.push_back(make_request(seed_a, static_cast<uint64_t>(i), prefix_a, env.workload,
                                     env.model.vocab_size));
    }
    for (int i = 0; i < n_per_group; ++i) {
        Request r = make_request(seed_b, static_cast<uint64_t>(i), prefix_b, env.workload,
                                 env.model.vocab_size);
        r.request_id = 1000 + static_cast<uint64_t>(i);  // keep ids distinct across groups
        batch.push_back(std::move(r));
    }
    engine.run_cycle(batch);
    auto base = engine.run_cycle(batch);
    std::optional<InjectionSpec> spec;
    if (bit_position) {
        auto surface = injection_surface(engine, prefix_a, ExtraKeys{});
        spec = pick_target(engine.store().geometry(), surface, *bit_position, rng.fork(17));
        inject(engine.store(), *spec);
    }
    auto post = engine.run_cycle(batch);

    auto slice = [](const std::vector<GenerationOutput>& v, size_t from, size_t count) {
        return std::vector<GenerationOutput>(v.begin() + static_cast<ptrdiff_t>(from),
                                             v.begin() + static_cast<ptrdiff_t>(from + count));
    };
    size_t n = static_cast<size_t>(n_per_group);
    SelectiveTrialResult res;
    res.group_a = collect_trial(spec, n_per_group, slice(base, 0, n), slice(post, 0, n));
    res.group_b = collect_trial(std::nullopt, n_per_group, slice(base, n, n), slice(post, n, n));
    return res;
}

PersistenceResult run_persistence(const TrialEnv& env, std::optional<int> bit_position,
                                  int n_requests, std::span<const int> checkpoints,
                                  uint64_t seed) {
    if (n_requests <= 0) throw std::invalid_argument("run_persistence: n_requests");
    check_bit(bit_position);
    Rng rng(seed);
    uint64_t prefix_seed = rng.fork(11), req_seed = rng.fork(13), target_seed = rng.fork(17);
    auto prefix = make_prefix(prefix_seed, env.workload, env.model.vocab_size);
    auto request_at = [&](int i) {
        return make_request(req_seed, static_cast<uint64_t>(i), prefix, env.workload,
                            env.model.vocab_size);
    };

    // clean arm: same integrity config, so the two arms differ only in the flip
    std::vector<TokenSeq> base;
    {
        Engine clean(env.model, env.geometry, env.integrity);
        clean.run_request(request_at(0));  // warm-up
        for (int i = 1; i <= n_requests; ++i) {
            base.push_back(clean.run_request(request_at(i)).tokens);
        }
    }

    Engine engine(env.model, env.geometry, env.integrity);
    engine.run_request(request_at(0));

    PersistenceResult res;
    std::optional<InjectionSpec> spec;
    InjectionRecord record{};
    size_t chain_index = 0;
    std::vector<Digest> hashes = engine.pool().chain_hashes(prefix, ExtraKeys{});
    if (bit_position) {
        auto surface = injection_surface(engine, prefix, ExtraKeys{});
        spec = pick_target(engine.store().geometry(), surface, *bit_position, target_seed);
        record = inject(engine.store(), *spec);
        auto it = std::find(surface.begin(), surface.end(), spec->coord.block);
        chain_index = static_cast<size_t>(it - surface.begin());
        res.spec = spec;
    }

    auto block_dirty = [&]() {
        if (!spec) return false;
        auto id = engine.pool().lookup(hashes[chain_index]);
        return id && *id == spec->coord.block && engine.pool().meta(*id).sealed &&
               engine.store().read(spec->coord) == record.after;
    };
    auto block_present = [&]() {
        if (!spec) return true;
        auto id = engine.pool().lookup(hashes[chain_index]);
        return id && *id == spec->coord.block && engine.pool().meta(*id).sealed;
    };

    for (int i = 1; i <= n_requests; ++i) {
        bool dirty_before = block_dirty();
        GenerationOutput out = engine.run_request(request_at(i));
        if (dirty_before && chain_index < out.served_from_cache.size() &&
            out.served_from_cache[chain_index]) {
            ++res.corrupted_serves;
        }
        res.indicators.push_back(out.tokens != base[static_cast<size_t>(i - 1)] ? 1 : 0);
        for (int cp : checkpoints) {
            if (cp == i) res.survival.emplace_back(cp, block_present());
        }
    }
    res.cumulative_counts = cumulative(res.indicators);
    res.detections = engine.integrity().mismatches() + engine.integrity().ttl_recomputes();
    return res;
}

DamageProbeResult run_damage_probe(const TrialEnv& env, int bit_position, int n_c, uint64_t seed,
                                   bool mid_cycle) {
    if (n_c <= 0) throw std::invalid_argument("run_damage_probe: n_c must be positive");
    check_bit(bit_position);
    Engine engine(env.model, env.geometry, env.integrity);
    Rng rng(seed);
    auto prefix = make_prefix(rng.fork(11), env.workload, env.model.vocab_size);
    uint64_t req_seed = rng.fork(13);
    std::vector<Request> batch;
    for (int i = 0; i < n_c; ++i) {
        batch.push_back(make_request(req_seed, static_cast<uint64_t>(i), prefix, env.workload,
                                     env.model.vocab_size));
    }
    engine.run_cycle(batch);
    auto base = engine.run_cycle(batch);

    auto surface = injection_surface(engine, prefix, ExtraKeys{});
    InjectionSpec spec = pick_target(engine.store().geometry(), surface, bit_position,
                                     rng.fork(17));
    uint64_t mm_before = engine.integrity().mismatches();

    std::vector<GenerationOutput> post;
    if (mid_cycle) {
        // lands in the TOCTOU window: after this cycle's verification,
        // before its reads
        post = engine.run_cycle(batch, [&](Engine& e) { inject(e.store(), spec); });
    } else {
        inject(engine.store(), spec);
        post = engine.run_cycle(batch);
    }

    DamageProbeResult res;
    res.spec = spec;
    res.n_c = n_c;
    for (size_t i = 0; i < base.size(); ++i) {
        if (post[i].tokens != base[i].tokens) ++res.affected;
    }
    auto recovered = engine.run_cycle(batch);
    res.recovered_equal = true;
    for (size_t i = 0; i < base.size(); ++i) {
        if (recovered[i].tokens != base[i].tokens) res.recovered_equal = false;
    }
    res.detections = engine.integrity().mismatches() - mm_before;
    res.events = engine.integrity().events();
    return res;
}

}  // namespace kvguard
