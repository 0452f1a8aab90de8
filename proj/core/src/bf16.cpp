#include "kvguard/bf16.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace kvguard {

namespace {
void check_position(int position) {
    if (position < 0 || position > 15) {
        throw std::out_of_range("bf16 bit position must be in [0, 15]");
    }
}
}  // namespace

Bf16 flip_bit(Bf16 b, int position) {
    check_position(position);
    return Bf16{static_cast<uint16_t>(b.bits ^ (1u << position))};
}

BitField classify_bit(int position) {
    check_position(position);
    if (position == 15) {
        return BitField{BitFieldKind::Sign, 0, 0};
    }
    if (position >= 7) {
        // E0..E7 live at bits 7..14; Ei toggles the stored exponent by 2^i.
        return BitField{BitFieldKind::Exponent, position - 7, position - 7};
    }
    // M0..M6 at bits 0..6; Mi has place value 2^(i-7) of the significand.
    return BitField{BitFieldKind::Mantissa, position, position - 7};
}

Perturbation perturbation(Bf16 b, int position) {
    check_position(position);
    float original = decode(b);
    if (!std::isfinite(original)) {
        throw std::invalid_argument("perturbation requires a finite bf16 value");
    }
    float flipped = decode(flip_bit(b, position));
    if (std::isnan(flipped)) {
        return Perturbation{Perturbation::Kind::BecomesNan, 0.0, 0};
    }
    if (std::isinf(flipped)) {
        return Perturbation{Perturbation::Kind::BecomesInf, 0.0, flipped > 0.0f ? 1 : -1};
    }
    double delta = static_cast<double>(flipped) - static_cast<double>(original);
    return Perturbation{Perturbation::Kind::Finite, delta, 0};
}

}  // namespace kvguard
