#pragma once

// Binary checkpoint container. Layout:
//
//   bytes 0..7   magic "MAEBCKPT"
//   bytes 8..11  u32 little-endian header length
//   header       JSON: version, kind, step, epoch, metric, config,
//                config_hash, tensors [{name, shape}...], payload_hash
//   payload      float32 little-endian tensor data, in header order
//
// Both the payload and the config snapshot are protected by FNV-1a 64
// hashes, so any single-byte corruption is caught at load time. Round
// trips are bit exact: the floats written are the floats read back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maebench/errors.hpp"
#include "maebench/tensor.hpp"

namespace maebench {

inline std::uint64_t fnv1a64(const unsigned char* p, std::size_t n) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

struct named_tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

struct checkpoint {
    std::string kind;  // "pretrain" or "finetune"
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    std::optional<double> metric;  // selection metric, when one exists
    nlohmann::json config = nlohmann::json::object();
    std::vector<named_tensor> tensors;

    const named_tensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'A', 'E', 'B', 'C', 'K', 'P', 'T'};

inline void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

inline std::uint64_t config_fingerprint(const nlohmann::json& config) {
    const std::string dump = config.dump();  // object keys are already sorted
    return fnv1a64(reinterpret_cast<const unsigned char*>(dump.data()), dump.size());
}

}  // namespace detail

inline void save_checkpoint(const checkpoint& c, const std::string& path) {
    if (c.kind != "pretrain" && c.kind != "finetune")
        throw config_error("save_checkpoint: kind must be pretrain or finetune, got '" +
                           c.kind + "'");

    std::string payload;
    nlohmann::json tensor_index = nlohmann::json::array();
    for (const named_tensor& t : c.tensors) {
        std::size_t n = 1;
        for (std::size_t d : t.shape) n *= d;
        if (n != t.values.size())
            throw dim_error("save_checkpoint: tensor '" + t.name + "' shape implies " +
                            std::to_string(n) + " values, has " +
                            std::to_string(t.values.size()));
        tensor_index.push_back({{"name", t.name}, {"shape", t.shape}});
        for (float f : t.values)
            detail::put_u32le(payload, std::bit_cast<std::uint32_t>(f));
    }

    nlohmann::json header;
    header["version"] = 1;
    header["kind"] = c.kind;
    header["step"] = c.step;
    header["epoch"] = c.epoch;
    if (c.metric)
        header["metric"] = *c.metric;
    else
        header["metric"] = nullptr;
    header["config"] = c.config;
    header["config_hash"] = hash_hex(detail::config_fingerprint(c.config));
    header["tensors"] = std::move(tensor_index);
    header["payload_hash"] = hash_hex(
        fnv1a64(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open checkpoint for writing: " + path);
    out.write(detail::kCkptMagic, 8);
    std::string len;
    detail::put_u32le(len, static_cast<std::uint32_t>(header_str.size()));
    out.write(len.data(), 4);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw io_error("checkpoint write failed: " + path);
}

inline checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());

    if (bytes.size() < 12) throw format_error("checkpoint shorter than its fixed header");
    if (std::memcmp(bytes.data(), detail::kCkptMagic, 8) != 0)
        throw format_error("not a checkpoint file (bad magic)");
    const std::uint32_t header_len = detail::get_u32le(bytes.data() + 8);
    if (bytes.size() < 12 + static_cast<std::size_t>(header_len))
        throw format_error("checkpoint header truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    checkpoint c;
    try {
        if (header.at("version").get<int>() != 1)
            throw format_error("unsupported checkpoint version " +
                               header.at("version").dump());
        c.kind = header.at("kind").get<std::string>();
        c.step = header.at("step").get<std::uint64_t>();
        c.epoch = header.at("epoch").get<std::uint64_t>();
        if (!header.at("metric").is_null()) c.metric = header.at("metric").get<double>();
        c.config = header.at("config");
        for (const auto& tj : header.at("tensors")) {
            named_tensor t;
            t.name = tj.at("name").get<std::string>();
            t.shape = tj.at("shape").get<std::vector<std::size_t>>();
            c.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint header missing fields: ") + e.what());
    }
    if (c.kind != "pretrain" && c.kind != "finetune")
        throw format_error("checkpoint kind '" + c.kind + "' unknown");

    std::size_t payload_floats = 0;
    for (const named_tensor& t : c.tensors) {
        std::size_t n = 1;
        for (std::size_t d : t.shape) n *= d;
        payload_floats += n;
    }
    const std::size_t payload_off = 12 + header_len;
    const std::size_t payload_len = bytes.size() - payload_off;
    if (payload_len != payload_floats * 4)
        throw format_error("checkpoint payload truncated: header promises " +
                           std::to_string(payload_floats * 4) + " bytes, file has " +
                           std::to_string(payload_len));

    const std::string want_payload = header.at("payload_hash").get<std::string>();
    const std::string got_payload = hash_hex(fnv1a64(bytes.data() + payload_off, payload_len));
    if (want_payload != got_payload)
        throw integrity_error("checkpoint payload hash mismatch: header " + want_payload +
                              ", computed " + got_payload);
    const std::string want_cfg = header.at("config_hash").get<std::string>();
    const std::string got_cfg = hash_hex(detail::config_fingerprint(c.config));
    if (want_cfg != got_cfg)
        throw integrity_error("checkpoint config hash mismatch: header " + want_cfg +
                              ", computed " + got_cfg);

    const unsigned char* p = bytes.data() + payload_off;
    for (named_tensor& t : c.tensors) {
        std::size_t n = 1;
        for (std::size_t d : t.shape) n *= d;
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i, p += 4)
            t.values[i] = std::bit_cast<float>(detail::get_u32le(p));
    }
    return c;
}

// Snapshot of live parameters, ready to save.
inline std::vector<named_tensor> snapshot_params(
    const std::vector<std::pair<std::string, tensor<float>>>& params) {
    std::vector<named_tensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params)
        out.push_back({name, t.shape(), t.data()});
    return out;
}

// Restores every parameter from the checkpoint, requiring the two name sets
// to match exactly. Mismatches are reported all at once.
inline void load_params_into(const checkpoint& c,
                             std::vector<std::pair<std::string, tensor<float>>> params) {
    std::vector<std::string> missing, extra;
    for (const auto& [name, t] : params)
        if (!c.find(name)) missing.push_back(name);
    for (const named_tensor& t : c.tensors) {
        bool present = false;
        for (const auto& [name, _] : params)
            if (name == t.name) present = true;
        if (!present) extra.push_back(t.name);
    }
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "checkpoint/model parameter mismatch:";
        for (const auto& n : missing) msg += "\n  model param '" + n + "' not in checkpoint";
        for (const auto& n : extra) msg += "\n  checkpoint tensor '" + n + "' not in model";
        throw validation_error(msg);
    }
    for (auto& [name, t] : params) {
        const named_tensor* src = c.find(name);
        if (src->shape != t.shape())
            throw dim_error("checkpoint tensor '" + name + "' has shape " +
                            shape_str(src->shape) + ", model expects " +
                            shape_str(t.shape()));
        t.data() = src->values;
    }
}

// Copies encoder weights from a pretraining checkpoint into a model that
// shares the encoder parameter names, leaving everything else (the task
// head) at its fresh initialization. Returns the names left untouched so
// callers can log what was newly initialized.
inline std::vector<std::string> load_encoder_into(
    const checkpoint& c, std::vector<std::pair<std::string, tensor<float>>> params,
    const std::string& prefix = "encoder.") {
    if (c.kind != "pretrain")
        throw validation_error("encoder weights must come from a pretraining checkpoint, got kind '" +
                               c.kind + "'");
    std::vector<std::string> missing, fresh;
    for (auto& [name, t] : params) {
        if (name.rfind(prefix, 0) != 0) {
            fresh.push_back(name);
            continue;
        }
        const named_tensor* src = c.find(name);
        if (!src) {
            missing.push_back(name);
            continue;
        }
        if (src->shape != t.shape())
            throw dim_error("checkpoint tensor '" + name + "' has shape " +
                            shape_str(src->shape) + ", model expects " +
                            shape_str(t.shape()));
        t.data() = src->values;
    }
    if (!missing.empty()) {
        std::string msg = "pretraining checkpoint lacks encoder parameters:";
        for (const auto& n : missing) msg += "\n  " + n;
        throw validation_error(msg);
    }
    return fresh;
}

}  // namespace maebench
