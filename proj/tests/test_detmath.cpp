#include <doctest.h>

#include "kvguard/detmath.hpp"

#include <cmath>
#include <limits>

using namespace kvguard;

TEST_CASE("det_exp anchors") {
    CHECK(det_exp(0.0f) == 1.0f);  // exact by construction: softmax of equal scores
    CHECK(det_exp(-87.5f) == 0.0f);
    CHECK(det_exp(100.0f) == HUGE_VALF);
    CHECK(std::isnan(det_exp(std::numeric_limits<float>::quiet_NaN())));
}

TEST_CASE("det_exp tracks expf closely on the softmax operating range") {
    // operands after max subtraction are <= 0; the approximation must stay
    // within its documented ~1.3e-6 relative error
    for (int i = 0; i <= 4000; ++i) {
        float x = -20.0f * static_cast<float>(i) / 4000.0f;
        float got = det_exp(x);
        double want = std::exp(static_cast<double>(x));
        CHECK(std::fabs(static_cast<double>(got) - want) <= 3e-6 * want + 1e-30);
    }
}

TEST_CASE("det_exp is monotone nondecreasing") {
    float prev = det_exp(-30.0f);
    for (int i = 1; i <= 6000; ++i) {
        float x = -30.0f + 30.0f * static_cast<float>(i) / 6000.0f;
        float cur = det_exp(x);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("det_tanh anchors and bounds") {
    CHECK(det_tanh(0.0f) == 0.0f);
    CHECK(det_tanh(4.0f) == 1.0f);
    CHECK(det_tanh(-4.0f) == -1.0f);
    CHECK(det_tanh(1000.0f) == 1.0f);
    CHECK(det_tanh(-std::numeric_limits<float>::infinity()) == -1.0f);
    CHECK(std::isnan(det_tanh(std::numeric_limits<float>::quiet_NaN())));

    for (int i = 0; i <= 2000; ++i) {
        float z = -8.0f + 16.0f * static_cast<float>(i) / 2000.0f;
        float r = det_tanh(z);
        CHECK(r >= -1.0f);
        CHECK(r <= 1.0f);
        // odd symmetry is exact: the formula is odd in z and clamps are
        // symmetric
        CHECK(det_tanh(-z) == -r);
    }
}

TEST_CASE("det_tanh approximates tanh on the residual range") {
    // Pade(3,2) peaks at ~2.36e-2 absolute error near |z| = 1.57; that is
    // plenty for a toy activation where only determinism matters
    for (int i = 0; i <= 2000; ++i) {
        float z = -4.0f + 8.0f * static_cast<float>(i) / 2000.0f;
        double want = std::tanh(static_cast<double>(z));
        CHECK(std::fabs(static_cast<double>(det_tanh(z)) - want) <= 2.5e-2);
    }
}
