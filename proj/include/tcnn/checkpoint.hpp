#pragma once

// Checkpoint format (little-endian):
//   magic "TCNN", version u32,
//   config: u64 length + JSON blob (model config, sorted keys),
//   tensors: u64 count, then records of
//     u32 name length, name bytes, u8 dtype (0=f32, 1=f64),
//     u32 rank, u64 extents..., raw payload,
//   optimizer section: u8 flag; if 1: u64 step, u64 count, records as above
//     (names prefixed "mom:", "m:", "v:").
// Parameters and buffers share the tensor section; the loader rebuilds the
// model from the config (including the structural transform) and then
// overwrites every named tensor, so a truncated file never yields a model.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tcnn/model.hpp"
#include "tcnn/reparam.hpp"
#include "tcnn/train.hpp"

namespace tcnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// --------------------------------------------------------------------------
// Config <-> JSON

inline nlohmann::json config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["input_channels"] = c.input_channels;
    j["n_classes"] = c.n_classes;
    j["stem_channels"] = c.stem_channels;
    j["stem_stride"] = c.stem_stride;
    j["stem_pool"] = c.stem_pool;
    j["input_resolution"] = c.input_resolution;
    j["seed"] = c.seed;
    j["transformed"] = c.transformed;
    j["gpsa_beta"] = c.gpsa_beta;
    j["gpsa_content_scale"] = c.gpsa_content_scale;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : c.stages) {
        nlohmann::json js;
        js["blocks"] = s.blocks;
        js["channels"] = s.channels;
        js["stride"] = s.stride;
        js["kind"] = s.kind == BlockKind::Basic ? "basic" : "bottleneck";
        j["stages"].push_back(js);
    }
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.stem_channels = j.at("stem_channels").get<std::size_t>();
    c.stem_stride = j.at("stem_stride").get<std::size_t>();
    c.stem_pool = j.at("stem_pool").get<std::size_t>();
    c.input_resolution = j.at("input_resolution").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.transformed = j.at("transformed").get<bool>();
    c.gpsa_beta = j.at("gpsa_beta").get<double>();
    c.gpsa_content_scale = j.at("gpsa_content_scale").get<bool>();
    for (const auto& js : j.at("stages")) {
        StageSpec s;
        s.blocks = js.at("blocks").get<std::size_t>();
        s.channels = js.at("channels").get<std::size_t>();
        s.stride = js.at("stride").get<std::size_t>();
        std::string kind = js.at("kind").get<std::string>();
        if (kind == "basic")
            s.kind = BlockKind::Basic;
        else if (kind == "bottleneck")
            s.kind = BlockKind::Bottleneck;
        else
            throw std::runtime_error("unknown block kind: " + kind);
        c.stages.push_back(s);
    }
    return c;
}

// --------------------------------------------------------------------------
// Raw IO helpers: every read is position-checked so errors name the offset.

namespace ckpt_detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename U>
void write_scalar(std::ostream& os, U v) {
    write_bytes(os, &v, sizeof(U));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n,
                       const char* what) {
    std::uint64_t at = static_cast<std::uint64_t>(is.tellg());
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw std::runtime_error("checkpoint truncated at offset " +
                                 std::to_string(at) + " while reading " +
                                 what);
}

template <typename U>
U read_scalar(std::istream& is, const char* what) {
    U v{};
    read_bytes(is, &v, sizeof(U), what);
    return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void write_record(std::ostream& os, const std::string& name,
                  const Shape& shape, const std::vector<T>& data) {
    write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_scalar<std::uint8_t>(os, dtype_tag<T>());
    write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape)
        write_scalar<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    write_bytes(os, data.data(), data.size() * sizeof(T));
}

template <typename T>
struct Record {
    std::string name;
    Shape shape;
    std::vector<T> data;
};

template <typename T>
Record<T> read_record(std::istream& is) {
    Record<T> r;
    auto name_len = read_scalar<std::uint32_t>(is, "record name length");
    if (name_len > 4096)
        throw std::runtime_error("checkpoint corrupt: record name length " +
                                 std::to_string(name_len));
    r.name.resize(name_len);
    read_bytes(is, r.name.data(), name_len, "record name");
    auto tag = read_scalar<std::uint8_t>(is, "dtype tag");
    if (tag != dtype_tag<T>())
        throw std::runtime_error(
            "checkpoint dtype mismatch for '" + r.name + "': stored tag " +
            std::to_string(tag) + ", expected " +
            std::to_string(dtype_tag<T>()));
    auto rank = read_scalar<std::uint32_t>(is, "rank");
    if (rank > 8)
        throw std::runtime_error("checkpoint corrupt: rank " +
                                 std::to_string(rank) + " for '" + r.name +
                                 "'");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        auto e = read_scalar<std::uint64_t>(is, "extent");
        r.shape.push_back(static_cast<std::size_t>(e));
        n *= static_cast<std::size_t>(e);
    }
    r.data.resize(n);
    read_bytes(is, r.data.data(), n * sizeof(T), r.name.c_str());
    return r;
}

}  // namespace ckpt_detail

// --------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model,
                     const OptState<T>* opt = nullptr) {
    using namespace ckpt_detail;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_bytes(os, "TCNN", 4);
    write_scalar<std::uint32_t>(os, kCheckpointVersion);
    std::string cfg = config_to_json(model.config).dump();
    write_scalar<std::uint64_t>(os, cfg.size());
    write_bytes(os, cfg.data(), cfg.size());

    auto params = collect_params(model);
    auto buffers = collect_buffers(model);
    write_scalar<std::uint64_t>(os, params.size() + buffers.size());
    for (auto& p : params)
        write_record(os, p.name, p.tensor.shape(), p.tensor.data());
    for (auto& b : buffers)
        write_record(os, b.name, Shape{b.data->size()}, *b.data);

    write_scalar<std::uint8_t>(os, opt ? 1 : 0);
    if (opt) {
        write_scalar<std::uint64_t>(os, opt->step);
        std::size_t count =
            opt->momentum.size() + opt->m.size() + opt->v.size();
        write_scalar<std::uint64_t>(os, count);
        auto dump = [&os](const char* prefix, const auto& map) {
            for (const auto& [name, vec] : map)
                write_record<T>(os, prefix + name, Shape{vec.size()}, vec);
        };
        dump("mom:", opt->momentum);
        dump("m:", opt->m);
        dump("v:", opt->v);
    }
    if (!os) throw std::runtime_error("write to " + path + " failed");
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    OptState<T> opt;
    bool has_opt = false;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    read_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "TCNN", 4) != 0)
        throw std::runtime_error(path + ": bad magic (not a checkpoint)");
    auto version = read_scalar<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported version " +
                                 std::to_string(version));
    auto cfg_len = read_scalar<std::uint64_t>(is, "config length");
    std::string cfg(cfg_len, '\0');
    read_bytes(is, cfg.data(), cfg_len, "config blob");
    ModelConfig config = config_from_json(nlohmann::json::parse(cfg));

    // Rebuild the structure, then overwrite state.
    ModelConfig build_cfg = config;
    build_cfg.transformed = false;
    LoadedCheckpoint<T> out{build_cnn<T>(build_cfg), {}, false};
    if (config.transformed)
        out.model = transform_last_stage(out.model, InitMode::paper(), 0).first;

    std::unordered_map<std::string, Tensor<T>> by_name;
    for (auto& p : collect_params(out.model)) by_name.emplace(p.name, p.tensor);
    std::unordered_map<std::string, std::vector<T>*> buf_by_name;
    for (auto& b : collect_buffers(out.model)) buf_by_name.emplace(b.name, b.data);

    auto n_records = read_scalar<std::uint64_t>(is, "tensor count");
    for (std::uint64_t i = 0; i < n_records; ++i) {
        Record<T> r = read_record<T>(is);
        if (auto it = by_name.find(r.name); it != by_name.end()) {
            check(r.data.size() == it->second.numel(),
                  "checkpoint tensor '" + r.name + "' has " +
                      std::to_string(r.data.size()) + " values, model expects " +
                      std::to_string(it->second.numel()));
            it->second.data() = std::move(r.data);
        } else if (auto bit = buf_by_name.find(r.name);
                   bit != buf_by_name.end()) {
            check(r.data.size() == bit->second->size(),
                  "checkpoint buffer '" + r.name + "' size mismatch");
            *bit->second = std::move(r.data);
        } else {
            throw std::runtime_error("checkpoint names unknown tensor '" +
                                     r.name + "'");
        }
    }

    auto flag = read_scalar<std::uint8_t>(is, "optimizer flag");
    if (flag == 1) {
        out.has_opt = true;
        out.opt.step =
            static_cast<std::size_t>(read_scalar<std::uint64_t>(is, "opt step"));
        auto count = read_scalar<std::uint64_t>(is, "opt record count");
        for (std::uint64_t i = 0; i < count; ++i) {
            Record<T> r = read_record<T>(is);
            if (r.name.rfind("mom:", 0) == 0)
                out.opt.momentum[r.name.substr(4)] = std::move(r.data);
            else if (r.name.rfind("m:", 0) == 0)
                out.opt.m[r.name.substr(2)] = std::move(r.data);
            else if (r.name.rfind("v:", 0) == 0)
                out.opt.v[r.name.substr(2)] = std::move(r.data);
            else
                throw std::runtime_error("unknown optimizer record '" +
                                         r.name + "'");
        }
    } else if (flag != 0) {
        throw std::runtime_error("checkpoint corrupt: optimizer flag " +
                                 std::to_string(flag));
    }
    return out;
}

}  // namespace tcnn
