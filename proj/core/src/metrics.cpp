#include "kvguard/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace kvguard {

double tcr(const std::vector<TokenSeq>& baselines, const std::vector<TokenSeq>& outputs) {
    if (baselines.size() != outputs.size()) {
        throw std::invalid_argument("tcr: baseline/output batch sizes differ");
    }
    if (baselines.empty()) {
        throw std::invalid_argument("tcr: empty batch");
    }
    size_t changed = 0;
    for (size_t i = 0; i < baselines.size(); ++i) {
        if (baselines[i] != outputs[i]) ++changed;
    }
    return static_cast<double>(changed) / static_cast<double>(baselines.size());
}

double tdr(const TokenSeq& y, const TokenSeq& y_hat) {
    size_t l = std::max(y.size(), y_hat.size());
    if (l == 0) return 0.0;  // degenerate case, defined as no divergence
    size_t mismatches = 0;
    for (size_t j = 0; j < l; ++j) {
        bool in_y = j < y.size();
        bool in_y_hat = j < y_hat.size();
        if (!in_y || !in_y_hat || y[j] != y_hat[j]) ++mismatches;
    }
    return static_cast<double>(mismatches) / static_cast<double>(l);
}

double ocr(const std::vector<double>& trial_tcrs) {
    if (trial_tcrs.empty()) throw std::invalid_argument("ocr: no trials");
    size_t nonzero = 0;
    for (double t : trial_tcrs) {
        if (t > 0.0) ++nonzero;
    }
    return static_cast<double>(nonzero) / static_cast<double>(trial_tcrs.size());
}

double rouge_l_f1(const TokenSeq& ref, const TokenSeq& hyp) {
    if (ref.empty() || hyp.empty()) return 0.0;
    // two-row LCS table; sequences are at most a few hundred tokens
    std::vector<size_t> prev(hyp.size() + 1, 0), cur(hyp.size() + 1, 0);
    for (size_t i = 1; i <= ref.size(); ++i) {
        for (size_t j = 1; j <= hyp.size(); ++j) {
            if (ref[i - 1] == hyp[j - 1]) {
                cur[j] = prev[j - 1] + 1;
            } else {
                cur[j] = std::max(prev[j], cur[j - 1]);
            }
        }
        std::swap(prev, cur);
    }
    size_t lcs = prev[hyp.size()];
    if (lcs == 0) return 0.0;
    double p = static_cast<double>(lcs) / static_cast<double>(hyp.size());
    double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

const char* to_string(TrialCategory c) {
    switch (c) {
        case TrialCategory::NoEffect: return "NoEffect";
        case TrialCategory::Partial: return "Partial";
        case TrialCategory::Complete: return "Complete";
        case TrialCategory::Collapse: return "Collapse";
    }
    throw std::logic_error("unknown trial category");
}

TrialCategory classify_trial(double tcr_value, double mean_rouge) {
    if (tcr_value < 0.0 || tcr_value > 1.0) {
        throw std::invalid_argument("classify_trial: tcr outside [0, 1]");
    }
    if (tcr_value == 0.0) return TrialCategory::NoEffect;
    if (tcr_value < 1.0) return TrialCategory::Partial;
    return mean_rouge >= kCollapseRougeThreshold ? TrialCategory::Complete
                                                 : TrialCategory::Collapse;
}

bool corruption_indicator(const TokenSeq& baseline, const TokenSeq& output) {
    return baseline != output;
}

std::vector<uint64_t> cumulative(const std::vector<uint8_t>& indicators) {
    std::vector<uint64_t> out;
    out.reserve(indicators.size());
    uint64_t acc = 0;
    for (uint8_t c : indicators) {
        acc += (c != 0) ? 1 : 0;
        out.push_back(acc);
    }
    return out;
}

}  // namespace kvguard
