#include "kvguard/kv_store.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>

namespace kvguard {

void KvGeometry::validate() const {
    if (n_layers <= 0 || n_blocks <= 0 || block_size <= 0 || n_kv_heads <= 0 || head_dim <= 0) {
        throw std::invalid_argument("kv geometry: every extent must be positive");
    }
}

size_t linear_offset(const KvGeometry& g, const Coord& c) {
    if (c.layer < 0 || c.layer >= g.n_layers) throw std::out_of_range("kv coord: layer");
    if (c.block < 0 || c.block >= g.n_blocks) throw std::out_of_range("kv coord: block");
    if (c.slot < 0 || c.slot >= g.block_size) throw std::out_of_range("kv coord: slot");
    if (c.head < 0 || c.head >= g.n_kv_heads) throw std::out_of_range("kv coord: head");
    if (c.channel < 0 || c.channel >= g.head_dim) throw std::out_of_range("kv coord: channel");
    size_t side = static_cast<size_t>(c.kv_side);
    return (((side * static_cast<size_t>(g.n_blocks) + static_cast<size_t>(c.block)) *
                 static_cast<size_t>(g.block_size) +
             static_cast<size_t>(c.slot)) *
                static_cast<size_t>(g.n_kv_heads) +
            static_cast<size_t>(c.head)) *
               static_cast<size_t>(g.head_dim) +
           static_cast<size_t>(c.channel);
}

KvStore::KvStore(const KvGeometry& g) : geom_(g) {
    geom_.validate();
    layers_.assign(static_cast<size_t>(geom_.n_layers),
                   std::vector<Bf16>(geom_.layer_elements(), Bf16{0}));
}

Bf16 KvStore::read(const Coord& c) const {
    return layers_[static_cast<size_t>(c.layer)][linear_offset(geom_, c)];
}

void KvStore::write(const Coord& c, Bf16 v) {
    layers_[static_cast<size_t>(c.layer)][linear_offset(geom_, c)] = v;
}

std::span<const Bf16> KvStore::slot_span(int layer, KvSide side, int block, int slot,
                                         int head) const {
    size_t base = linear_offset(geom_, Coord{layer, side, block, slot, head, 0});
    return {layers_[static_cast<size_t>(layer)].data() + base,
            static_cast<size_t>(geom_.head_dim)};
}

std::span<Bf16> KvStore::slot_span_mut(int layer, KvSide side, int block, int slot, int head) {
    size_t base = linear_offset(geom_, Coord{layer, side, block, slot, head, 0});
    return {layers_[static_cast<size_t>(layer)].data() + base,
            static_cast<size_t>(geom_.head_dim)};
}

std::vector<uint8_t> KvStore::block_bytes(int block) const {
    if (block < 0 || block >= geom_.n_blocks) throw std::out_of_range("block_bytes: block");
    std::vector<uint8_t> out;
    out.reserve(geom_.block_byte_size());
    size_t per_side = geom_.block_side_elements();
    for (int layer = 0; layer < geom_.n_layers; ++layer) {
        const auto& buf = layers_[static_cast<size_t>(layer)];
        for (int side = 0; side < 2; ++side) {
            // start of this block's page within (side, layer); the page is
            // already slot-major/head/channel contiguous
            size_t base = (static_cast<size_t>(side) * geom_.n_blocks + static_cast<size_t>(block)) *
                          per_side;
            for (size_t i = 0; i < per_side; ++i) {
                uint16_t bits = buf[base + i].bits;
                out.push_back(static_cast<uint8_t>(bits & 0xFF));
                out.push_back(static_cast<uint8_t>(bits >> 8));
            }
        }
    }
    return out;
}

std::vector<uint8_t> KvStore::layer_bytes(int layer) const {
    if (layer < 0 || layer >= geom_.n_layers) throw std::out_of_range("layer_bytes: layer");
    const auto& buf = layers_[static_cast<size_t>(layer)];
    std::vector<uint8_t> out;
    out.reserve(buf.size() * 2);
    for (Bf16 v : buf) {
        out.push_back(static_cast<uint8_t>(v.bits & 0xFF));
        out.push_back(static_cast<uint8_t>(v.bits >> 8));
    }
    return out;
}

void KvStore::dump_raw(const std::string& directory) const {
    for (int layer = 0; layer < geom_.n_layers; ++layer) {
        std::ofstream f(directory + "/layer_" + std::to_string(layer) + ".bin",
                        std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("dump_raw: cannot open layer file in " + directory);
        auto bytes = layer_bytes(layer);
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
    nlohmann::json j{
        {"n_layers", geom_.n_layers},     {"n_blocks", geom_.n_blocks},
        {"block_size", geom_.block_size}, {"n_kv_heads", geom_.n_kv_heads},
        {"head_dim", geom_.head_dim},     {"element", "bf16"},
        {"byte_order", "little"},
        {"layout", "[kv_side][block][slot][head][channel]"},
    };
    std::ofstream f(directory + "/geometry.json", std::ios::trunc);
    if (!f) throw std::runtime_error("dump_raw: cannot open geometry.json in " + directory);
    f << j.dump(2) << "\n";
}

}  // namespace kvguard
