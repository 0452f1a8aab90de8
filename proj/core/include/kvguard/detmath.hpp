#pragma once

#include <cmath>

namespace kvguard {

// Transcendentals used inside the generator. libm's expf/tanhf are not
// bit-identical across platforms, which would break the engine's
// cross-platform determinism guarantee, so both are replaced with fixed
// float-arithmetic approximations. Only IEEE-exact primitives are used
// around them (floorf, ldexpf, +-*/).

// e^x for x <= 0 (softmax operand after max subtraction). det_exp(0) == 1
// exactly, which makes equal-score softmax weights exact (1/n). NaN
// propagates; large-magnitude negatives flush to 0.
inline float det_exp(float x) {
    if (x != x) return x;  // NaN
    if (x <= -87.0f) return 0.0f;
    if (x >= 88.0f) return HUGE_VALF;
    float y = x * 1.44269504088896341f;  // x / ln 2
    float n = std::floor(y);
    float f = y - n;  // in [0, 1)
    // 2^f as the degree-7 Taylor expansion of exp(f ln 2); max relative
    // error ~1.3e-6, monotone on [0, 1), and exactly 1 at f = 0.
    float p = 1.52527338040598376e-5f;
    p = p * f + 1.54035303933816099e-4f;
    p = p * f + 1.33335581464284434e-3f;
    p = p * f + 9.61812910762847716e-3f;
    p = p * f + 5.55041086648215800e-2f;
    p = p * f + 2.40226506959100712e-1f;
    p = p * f + 6.93147180559945286e-1f;
    p = p * f + 1.0f;
    return std::ldexp(p, static_cast<int>(n));
}

// Bounded odd squashing in [-1, 1]: a clamped Pade(3,2) tanh approximant.
// NaN propagates (the degenerate-output path relies on it).
inline float det_tanh(float z) {
    if (z != z) return z;  // NaN
    if (z >= 4.0f) return 1.0f;
    if (z <= -4.0f) return -1.0f;
    float z2 = z * z;
    float r = z * (27.0f + z2) / (27.0f + 9.0f * z2);
    if (r > 1.0f) return 1.0f;
    if (r < -1.0f) return -1.0f;
    return r;
}

}  // namespace kvguard
