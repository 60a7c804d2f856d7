// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <type_traits>

#include "dprobe/denoiser.hpp"
#include "dprobe/io.hpp"

namespace dprobe {

// Checkpoint layout: "DPRB1", u64 manifest length, manifest JSON, then little-endian raw tensors.
// The manifest lists every tensor (name, dtype, shape, offset into the data section, byte size)
// for both live and "ema/"-prefixed shadow parameters, plus the denoiser and training configs.
inline constexpr char checkpoint_magic[] = "DPRB1";

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>)
        return "f32";
    else
        return "f64";
}

struct CheckpointMeta {
    nlohmann::json training;  ///< full training config snapshot
    nlohmann::json extra;     ///< epoch, step, losses, ...
};

template <class T>
std::string encode_checkpoint(const UNet<T>& net, const CheckpointMeta& meta) {
    const auto& ps = net.params();
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    const auto add = [&](const std::string& name, const Tensor<T>& t) {
        tensors.push_back({{"name", name},
                           {"dtype", dtype_name<T>()},
                           {"shape", t.shape()},
                           {"offset", offset},
                           {"nbytes", t.size() * sizeof(T)}});
        offset += t.size() * sizeof(T);
    };
    for (const auto& e : ps.entries()) add(e.name, e.value);
    const bool ema = ps.has_ema();
    if (ema)
        for (const auto& e : ps.entries()) add("ema/" + e.name, e.ema);
    nlohmann::json manifest{{"format", "DPRB1"},
                            {"denoiser", net.config()},
                            {"training", meta.training},
                            {"extra", meta.extra},
                            {"adam_step", ps.adam_step},
                            {"tensors", tensors}};
    const std::string text = manifest.dump();
    io::Writer w;
    w.put_bytes({checkpoint_magic, 5});
    w.put<std::uint64_t>(text.size());
    w.put_bytes(text);
    for (const auto& e : ps.entries()) w.put_span(e.value.values());
    if (ema)
        for (const auto& e : ps.entries()) w.put_span(e.ema.values());
    return w.bytes();
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const UNet<T>& net, const CheckpointMeta& meta) {
    io::write_file(path, encode_checkpoint(net, meta));
}

template <class T>
struct LoadedCheckpoint {
    std::unique_ptr<UNet<T>> net;
    CheckpointMeta meta;
    std::string sha256;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    const std::string ctx = "checkpoint " + path.string();
    io::Reader r(bytes.data(), bytes.size(), ctx);
    if (r.get_bytes(5) != std::string_view(checkpoint_magic, 5)) throw IoError(ctx + ": bad magic");
    const auto len = r.get<std::uint64_t>();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(r.get_bytes(len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(ctx + ": corrupt manifest: " + e.what());
    }
    const std::size_t data_start = r.position();
    LoadedCheckpoint<T> out;
    out.net = std::make_unique<UNet<T>>(manifest.at("denoiser").get<DenoiserConfig>());
    out.meta.training = manifest.value("training", nlohmann::json::object());
    out.meta.extra = manifest.value("extra", nlohmann::json::object());
    auto& ps = out.net->params();
    ps.adam_step = manifest.value("adam_step", 0LL);
    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name");
        if (t.at("dtype") != dtype_name<T>())
            throw IoError(ctx + ": tensor '" + name + "' has dtype " + t.at("dtype").get<std::string>());
        const bool ema = name.rfind("ema/", 0) == 0;
        if (ema) name = name.substr(4);
        auto& e = ps.entry(ps.find(name).index);
        const Shape shape = t.at("shape").get<Shape>();
        if (shape != e.value.shape())
            throw IoError(ctx + ": tensor '" + name + "' shape " + shape_string(shape) + " does not match model");
        r.seek(data_start + t.at("offset").get<std::size_t>());
        Tensor<T> v(shape);
        r.get_into(v.values());
        (ema ? e.ema : e.value) = std::move(v);
    }
    out.sha256 = io::sha256_hex({bytes.data(), bytes.size()});
    return out;
}

}  // namespace dprobe
