#pragma once

#include "kvguard/block_pool.hpp"  // TokenId

#include <cstdint>
#include <vector>

namespace kvguard {

using TokenSeq = std::vector<TokenId>;

// Token change rate across a batch: fraction of requests whose output
// sequence differs from its baseline at all. Throws on length mismatch or
// empty batch.
double tcr(const std::vector<TokenSeq>& baselines, const std::vector<TokenSeq>& outputs);

// Token diff ratio within one request: positionwise mismatch fraction over
// L = max(|y|, |y_hat|), absent positions counting as mismatches. Two empty
// sequences yield 0.
double tdr(const TokenSeq& y, const TokenSeq& y_hat);

// Output change rate across trials: fraction of trial TCRs that are > 0.
// Throws on empty input.
double ocr(const std::vector<double>& trial_tcrs);

// LCS-based F1: P = LCS/|hyp|, R = LCS/|ref|, F1 = 2PR/(P+R); 0 when either
// sequence is empty or the LCS is empty.
double rouge_l_f1(const TokenSeq& ref, const TokenSeq& hyp);

enum class TrialCategory { NoEffect, Partial, Complete, Collapse };

const char* to_string(TrialCategory c);

// NoEffect: tcr = 0. Partial: 0 < tcr < 1. At tcr = 1, mean ROUGE-L >= 0.1
// separates Complete (coherent divergence) from Collapse (degenerate).
// The 0.1 threshold is pinned here; classify_trial is the only place it lives.
inline constexpr double kCollapseRougeThreshold = 0.1;

TrialCategory classify_trial(double tcr_value, double mean_rouge);

// Per-request corruption indicator: exact sequence inequality.
bool corruption_indicator(const TokenSeq& baseline, const TokenSeq& output);

// Prefix sums C_1..C_N of the indicator sequence.
std::vector<uint64_t> cumulative(const std::vector<uint8_t>& indicators);

}  // namespace kvguard
