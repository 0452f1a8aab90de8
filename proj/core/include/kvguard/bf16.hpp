#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace kvguard {

// One bfloat16 storage pattern. Bit 15 is the sign, bits 14..7 the 8-bit
// exponent (E7..E0), bits 6..0 the 7-bit mantissa (M6..M0). Kept as a struct
// rather than a bare uint16_t so stored cache patterns don't mix with token
// ids or offsets.
struct Bf16 {
    uint16_t bits = 0;

    friend bool operator==(Bf16 a, Bf16 b) = default;
};

enum class BitFieldKind { Sign, Exponent, Mantissa };

// Semantic role of a single bit position within the 16-bit pattern.
// index_within_field counts from the least significant bit of the field
// (M0..M6 -> 0..6, E0..E7 -> 0..7). weight_exponent is the k of the field
// weight 2^k: exponent bit Ei scales the represented magnitude by 2^(2^i),
// mantissa bit Mi contributes 2^(i-7) of the leading digit. The sign bit
// carries no magnitude weight; its weight_exponent is 0 by convention.
struct BitField {
    BitFieldKind kind = BitFieldKind::Mantissa;
    int index_within_field = 0;
    int weight_exponent = 0;
};

// Round-to-nearest-even narrowing from float32. NaN inputs map to the
// canonical quiet NaN pattern 0x7FC0. Infinities and zeros pass through.
// Inline: the engine writes every K/V element through this codec.
inline Bf16 encode(float x) {
    if (std::isnan(x)) {
        return Bf16{0x7FC0};
    }
    uint32_t u = std::bit_cast<uint32_t>(x);
    // Round to nearest, ties to even: add 0x7FFF plus the parity of the bit
    // that will become the new LSB, then truncate. Infinities are exact
    // (low half zero), so the same path handles them.
    uint32_t rounded = u + 0x7FFFu + ((u >> 16) & 1u);
    return Bf16{static_cast<uint16_t>(rounded >> 16)};
}

// Exact widening: the 16 bits become the high half of a float32. Total on
// all 65536 patterns, including subnormals, infinities and NaNs.
inline float decode(Bf16 b) {
    return std::bit_cast<float>(static_cast<uint32_t>(b.bits) << 16);
}

// XOR with a single-bit mask. position must be in [0, 15].
Bf16 flip_bit(Bf16 b, int position);

// Field/weight classification of a bit position. position must be in [0, 15].
BitField classify_bit(int position);

// Numeric effect of flipping one bit of a finite value.
struct Perturbation {
    enum class Kind { Finite, BecomesNan, BecomesInf };
    Kind kind = Kind::Finite;
    double delta = 0.0;     // decode(flipped) - decode(original); Finite only
    int infinity_sign = 0;  // +1 or -1; BecomesInf only
};

// Characterises decode(flip_bit(b, position)) relative to decode(b).
// Throws std::invalid_argument if b is not finite.
Perturbation perturbation(Bf16 b, int position);

}  // namespace kvguard
