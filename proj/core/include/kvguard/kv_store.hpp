#pragma once

#include "kvguard/bf16.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kvguard {

enum class KvSide : int { Key = 0, Value = 1 };

// Paged cache geometry. Each layer owns one flat buffer shaped
// [2 (K/V) x n_blocks x block_size x n_kv_heads x head_dim], K before V,
// channel fastest. A block is the allocation unit: block_size token slots.
struct KvGeometry {
    int n_layers = 0;
    int n_blocks = 0;
    int block_size = 0;
    int n_kv_heads = 0;
    int head_dim = 0;

    // Throws std::invalid_argument unless every extent is positive.
    void validate() const;

    size_t slot_elements() const { return static_cast<size_t>(n_kv_heads) * head_dim; }
    size_t block_side_elements() const { return static_cast<size_t>(block_size) * slot_elements(); }
    size_t side_elements() const { return static_cast<size_t>(n_blocks) * block_side_elements(); }
    size_t layer_elements() const { return 2 * side_elements(); }

    // Size of the canonical byte serialization of one block across all
    // layers and both sides, 2 bytes per element.
    size_t block_byte_size() const {
        return static_cast<size_t>(n_layers) * 2 * block_side_elements() * 2;
    }
};

// Logical element address. layer selects the buffer; the rest select the
// element within it.
struct Coord {
    int layer = 0;
    KvSide kv_side = KvSide::Key;
    int block = 0;
    int slot = 0;
    int head = 0;
    int channel = 0;
};

// Element index of c within its layer buffer:
//   ((((side * n_blocks + block) * block_size + slot) * n_kv_heads + head) * head_dim + channel
// Throws std::out_of_range if any index exceeds its extent.
size_t linear_offset(const KvGeometry& g, const Coord& c);

class KvStore {
  public:
    explicit KvStore(const KvGeometry& g);

    const KvGeometry& geometry() const { return geom_; }

    Bf16 read(const Coord& c) const;
    void write(const Coord& c, Bf16 v);

    // All head_dim channels of one (layer, side, block, slot, head), which
    // are contiguous in storage order. The attention gather runs over whole
    // slots, so this bounds-checks once per slot instead of per element.
    std::span<const Bf16> slot_span(int layer, KvSide side, int block, int slot, int head) const;
    std::span<Bf16> slot_span_mut(int layer, KvSide side, int block, int slot, int head);

    // Canonical serialization of one block for digesting: layers in
    // ascending order; per layer K then V; within a side slot-major, then
    // head, then channel; each element as its 16-bit pattern little-endian.
    std::vector<uint8_t> block_bytes(int block) const;

    // Raw escape hatch for the dump interface: the full layer buffer as
    // little-endian 16-bit patterns in storage order.
    std::vector<uint8_t> layer_bytes(int layer) const;

    // Writes layer_<i>.bin for every layer plus geometry.json describing the
    // shape, into an existing directory.
    void dump_raw(const std::string& directory) const;

  private:
    KvGeometry geom_;
    std::vector<std::vector<Bf16>> layers_;
};

}  // namespace kvguard
