#pragma once

#include "kvguard/engine.hpp"
#include "kvguard/metrics.hpp"
#include "kvguard/workload.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace kvguard {

// One planned bit flip: the XOR position plus a fully resolved element
// coordinate. kv_side is always Value and coord.block always comes from the
// injection surface (sealed shared prefix blocks).
struct InjectionSpec {
    int bit_position = 0;
    Coord coord;
    uint64_t rng_seed = 0;
};

// Uniform draw over (layer, block in surface, slot, head, channel) with
// kv_side = Value. Deterministic in seed; throws on empty surface.
InjectionSpec pick_target(const KvGeometry& g, std::span<const int> surface_blocks,
                          int bit_position, uint64_t seed);

struct InjectionRecord {
    Bf16 before;
    Bf16 after;
};

// Raw single-element flip, any side. inject() builds on it.
InjectionRecord flip_element(KvStore& store, const Coord& c, int bit_position);

// Applies the XOR mask in place on the shared physical block.
InjectionRecord inject(KvStore& store, const InjectionSpec& spec);

// Everything a trial needs to build its private engine.
struct TrialEnv {
    ToyModelConfig model;
    KvGeometry geometry;
    IntegrityConfig integrity;
    WorkloadConfig workload;
};

// Physical ids of the sealed shared-prefix blocks (full blocks of `prefix`),
// in chain order. Throws if any is missing from the cache (call after
// warm-up).
std::vector<int> injection_surface(const Engine& engine, std::span<const TokenId> prefix,
                                   const ExtraKeys& extra);

struct TrialResult {
    std::optional<InjectionSpec> spec;  // nullopt for control trials
    int n_c = 0;
    std::vector<TokenSeq> baselines;
    std::vector<TokenSeq> outputs;
    double tcr_value = 0.0;
    double ocr_contribution = 0.0;  // 1[tcr > 0]
    double mean_tdr = 0.0;
    double mean_rouge = 0.0;
    std::vector<double> tdr_per_request;
    std::vector<double> rouge_per_request;
    TrialCategory category = TrialCategory::NoEffect;
    bool any_degenerate = false;
};

// Four sequential phases against a fresh engine: warm-up (outputs
// discarded), baseline generation, single injection (skipped for control
// trials), post-injection generation of the same batch.
TrialResult run_trial(const TrialEnv& env, std::optional<int> bit_position, int n_c,
                      uint64_t seed);

// Two prefix groups in one batch; the injection targets group A's surface
// only. group_b TCR must come out 0 (selective-propagation property).
struct SelectiveTrialResult {
    TrialResult group_a;
    TrialResult group_b;
};
SelectiveTrialResult run_selective_trial(const TrialEnv& env, std::optional<int> bit_position,
                                         int n_per_group, uint64_t seed);

struct PersistenceResult {
    std::optional<InjectionSpec> spec;
    std::vector<uint8_t> indicators;          // c_i, i = 1..N
    std::vector<uint64_t> cumulative_counts;  // C_i
    std::vector<std::pair<int, bool>> survival;  // (checkpoint, block still cached)
    uint64_t corrupted_serves = 0;  // cache hits on the corrupted block while dirty
    uint64_t detections = 0;        // checksum + ttl events in the injected arm
};

// Clean arm and injected arm over the same N sequential single-request
// cycles; the injection lands right after the warm-up cycle.
PersistenceResult run_persistence(const TrialEnv& env, std::optional<int> bit_position,
                                  int n_requests, std::span<const int> checkpoints,
                                  uint64_t seed);

// Countermeasure probe. With mid_cycle=false the flip lands between cycles
// and scheduling-time verification must stop it (affected = 0). With
// mid_cycle=true the flip lands in the TOCTOU window after verification, so
// up to one batch is affected before the next cycle detects it.
struct DamageProbeResult {
    InjectionSpec spec;
    int n_c = 0;
    uint64_t affected = 0;           // diverging requests in the injection cycle
    uint64_t detections = 0;         // checksum events observed afterwards
    bool recovered_equal = false;    // post-recompute outputs match baselines
    std::vector<DetectionEvent> events;
};
DamageProbeResult run_damage_probe(const TrialEnv& env, int bit_position, int n_c, uint64_t seed,
                                   bool mid_cycle);

}  // namespace kvguard
