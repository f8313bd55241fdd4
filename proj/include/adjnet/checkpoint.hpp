#pragma once

// Checkpoint container:
//
//   ADJNET-CHECKPOINT\n
//   version <n>\n
//   header <byte count>\n
//   <JSON header>
//   <payload: float32 values, little-endian>
//
// The JSON header records the network spec, mode, per-layer mask specs, the
// training clock and one {name, offset, count} entry per stored tensor.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "loss.hpp"
#include "masks.hpp"
#include "network.hpp"

namespace adjnet {

inline constexpr const char* checkpoint_magic = "ADJNET-CHECKPOINT";
inline constexpr int checkpoint_version = 1;

struct TensorRecord {
    std::string name;
    std::size_t offset = 0;
    std::size_t count = 0;
};

struct Checkpoint {
    int version = checkpoint_version;
    NetworkSpec spec;
    NetMode mode = NetMode::standard;
    std::vector<MaskSpec> layer_masks;  // one per adjoined layer, construction order
    std::vector<TensorRecord> tensors;
    std::vector<float> payload;         // parameters, then bn running statistics
    TrainClock clock;
    nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json to_json(const MaskSpec& m) {
    return {{"alpha", m.alpha}, {"beta", m.beta}, {"seed", m.seed}};
}

inline MaskSpec mask_from_json(const nlohmann::json& j) {
    return {j.at("alpha").get<std::uint32_t>(), j.at("beta").get<double>(), j.at("seed").get<std::uint64_t>()};
}

inline nlohmann::json to_json(const NetworkSpec& s) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : s.stages) {
        stages.push_back({{"width", st.width}, {"blocks", st.blocks}, {"mask", to_json(st.mask)}});
    }
    return {{"in_channels", s.in_channels}, {"stem", s.stem},       {"stem_pool", s.stem_pool},
            {"stages", stages},            {"num_classes", s.num_classes}, {"dropout_keep", s.dropout_keep}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
    NetworkSpec s;
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.stem = j.at("stem").get<std::vector<std::size_t>>();
    s.stem_pool = j.at("stem_pool").get<bool>();
    s.stages.clear();
    for (const auto& st : j.at("stages")) {
        s.stages.push_back({st.at("width").get<std::size_t>(), st.at("blocks").get<std::size_t>(),
                            mask_from_json(st.at("mask"))});
    }
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.dropout_keep = j.at("dropout_keep").get<double>();
    return s;
}

/// Snapshot of a network's full state.
inline Checkpoint make_checkpoint(Network<float>& net, const TrainClock& clock = {}) {
    Checkpoint c;
    c.spec = net.spec();
    c.mode = net.mode();
    c.layer_masks = net.layer_mask_specs();
    c.clock = clock;
    for (const auto& e : net.state()) {
        c.tensors.push_back({e.name, c.payload.size(), e.values.size()});
        c.payload.insert(c.payload.end(), e.values.begin(), e.values.end());
    }
    return c;
}

/// Rebuilds the network a checkpoint describes and loads its state.
inline Network<float> restore(const Checkpoint& c) {
    Network<float> net(c.spec, c.mode, 0, c.mode == NetMode::adjoined ? &c.layer_masks : nullptr);
    auto state = net.state();
    if (state.size() != c.tensors.size()) {
        throw FormatError("checkpoint: " + std::to_string(c.tensors.size()) + " tensors stored, network has " +
                          std::to_string(state.size()));
    }
    for (std::size_t i = 0; i < state.size(); ++i) {
        const auto& rec = c.tensors[i];
        if (rec.name != state[i].name || rec.count != state[i].values.size()) {
            throw FormatError("checkpoint: tensor " + std::to_string(i) + " is '" + rec.name + "' x" +
                              std::to_string(rec.count) + ", expected '" + state[i].name + "' x" +
                              std::to_string(state[i].values.size()));
        }
        if (rec.offset + rec.count > c.payload.size()) {
            throw FormatError("checkpoint: tensor '" + rec.name + "' offset " + std::to_string(rec.offset) +
                              " runs past payload end " + std::to_string(c.payload.size()));
        }
        std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(rec.offset), rec.count, state[i].values.begin());
    }
    return net;
}

inline void save(const Checkpoint& c, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : c.tensors) {
        tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"count", t.count}});
    }
    nlohmann::json masks = nlohmann::json::array();
    for (const auto& m : c.layer_masks) {
        masks.push_back(to_json(m));
    }
    const nlohmann::json header = {
        {"format_version", c.version},
        {"dtype", "float32"},
        {"mode", to_string(c.mode)},
        {"spec", to_json(c.spec)},
        {"layer_masks", masks},
        {"tensors", tensors},
        {"payload_count", c.payload.size()},
        {"clock",
         {{"current_epoch", c.clock.current_epoch},
          {"total_epochs", c.clock.total_epochs},
          {"current_step", c.clock.current_step},
          {"steps_per_epoch", c.clock.steps_per_epoch}}},
        {"meta", c.meta},
    };
    const std::string text = header.dump(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << checkpoint_magic << "\nversion " << c.version << "\nheader " << text.size() << "\n" << text;
    std::vector<char> bytes(c.payload.size() * 4);
    for (std::size_t i = 0; i < c.payload.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(c.payload[i]);
        for (int b = 0; b < 4; ++b) {
            bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xFFu);
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("write failed: " + path.string());
    }
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::size_t pos = 0;
    auto line = [&]() {
        const std::size_t start = pos;
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        if (pos == bytes.size()) {
            throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(start));
        }
        return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos++));
    };
    const std::string magic = std::string(checkpoint_magic) + "\n";
    if (bytes.size() < magic.size() || !std::equal(magic.begin(), magic.end(), bytes.begin())) {
        throw FormatError(path.string() + ": bad magic at byte offset 0");
    }
    pos = magic.size();
    int version = 0;
    std::size_t header_len = 0;
    {
        const std::string v = line();
        if (std::sscanf(v.c_str(), "version %d", &version) != 1 || version != checkpoint_version) {
            throw FormatError(path.string() + ": unsupported format version line '" + v + "'");
        }
        const std::string h = line();
        if (std::sscanf(h.c_str(), "header %zu", &header_len) != 1) {
            throw FormatError(path.string() + ": malformed header length line '" + h + "'");
        }
    }
    if (pos + header_len > bytes.size()) {
        throw FormatError(path.string() + ": header of " + std::to_string(header_len) +
                          " bytes runs past end of file at byte offset " + std::to_string(pos));
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": header is not valid JSON: " + e.what());
    }
    pos += header_len;

    Checkpoint c;
    try {
        c.version = header.at("format_version").get<int>();
        if (header.at("dtype").get<std::string>() != "float32") {
            throw FormatError(path.string() + ": unsupported dtype");
        }
        const auto mode = header.at("mode").get<std::string>();
        if (mode != "standard" && mode != "adjoined") {
            throw FormatError(path.string() + ": unknown mode '" + mode + "'");
        }
        c.mode = mode == "adjoined" ? NetMode::adjoined : NetMode::standard;
        c.spec = spec_from_json(header.at("spec"));
        for (const auto& m : header.at("layer_masks")) {
            c.layer_masks.push_back(mask_from_json(m));
        }
        const auto count = header.at("payload_count").get<std::size_t>();
        for (const auto& t : header.at("tensors")) {
            TensorRecord r{t.at("name").get<std::string>(), t.at("offset").get<std::size_t>(),
                           t.at("count").get<std::size_t>()};
            if (r.offset > count || r.count > count - r.offset) {
                throw FormatError(path.string() + ": tensor '" + r.name + "' offset " + std::to_string(r.offset) +
                                  " + count " + std::to_string(r.count) + " exceeds payload of " +
                                  std::to_string(count) + " values");
            }
            c.tensors.push_back(std::move(r));
        }
        const auto& clk = header.at("clock");
        c.clock = {clk.at("current_epoch").get<std::size_t>(), clk.at("total_epochs").get<std::size_t>(),
                   clk.at("current_step").get<std::size_t>(), clk.at("steps_per_epoch").get<std::size_t>()};
        c.meta = header.value("meta", nlohmann::json::object());
        if (bytes.size() - pos != count * 4) {
            throw FormatError(path.string() + ": payload is " + std::to_string(bytes.size() - pos) +
                              " bytes, header declares " + std::to_string(count * 4));
        }
        c.payload.resize(count);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed header: " + e.what());
    }
    for (std::size_t i = 0; i < c.payload.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
            u |= std::uint32_t{static_cast<unsigned char>(bytes[pos + i * 4 + static_cast<std::size_t>(b)])}
                 << (8 * b);
        }
        c.payload[i] = std::bit_cast<float>(u);
    }
    return c;
}

}  // namespace adjnet
