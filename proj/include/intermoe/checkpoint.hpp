#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "intermoe/autodiff.hpp"
#include "intermoe/motion.hpp"

namespace intermoe {

// Checkpoint layout: u32 header length, JSON header, raw little-endian float32
// blob. The header carries caller metadata under "meta" plus a "manifest" of
// (name, offset, shape) with offsets counted in floats.

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                            const std::vector<std::pair<std::string, Tensor<float>>>& params) {
    nlohmann::json header;
    header["schema"] = "intermoe-checkpoint-v1";
    header["meta"] = meta;
    auto& manifest = header["manifest"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        manifest.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape}});
        offset += static_cast<uint64_t>(t.numel());
    }
    const std::string hs = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingArtifactError("cannot open for write: " + path.string());
    detail::put_u32_le(os, static_cast<uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : params)
        for (float f : t.data) detail::put_u32_le(os, std::bit_cast<uint32_t>(f));
    if (!os) throw MissingArtifactError("write failed: " + path.string());
}

struct LoadedCheckpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor<float>> params;

    const Tensor<float>& require(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end())
            throw MissingArtifactError("checkpoint missing parameter: " + name);
        return it->second;
    }
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("missing checkpoint: " + path.string());
    uint32_t hlen;
    if (!detail::get_u32_le(is, hlen))
        throw MissingArtifactError("checkpoint truncated header length: " + path.string());
    std::string hs(hlen, '\0');
    if (!is.read(hs.data(), hlen))
        throw MissingArtifactError("checkpoint truncated header: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint header parse error: " + std::string(e.what()));
    }
    LoadedCheckpoint out;
    try {
        out.meta = header.at("meta");
        std::vector<std::tuple<std::string, uint64_t, std::vector<int>>> manifest;
        for (const auto& e : header.at("manifest"))
            manifest.emplace_back(e.at("name").get<std::string>(), e.at("offset").get<uint64_t>(),
                                  e.at("shape").get<std::vector<int>>());
        uint64_t cursor = 0;
        for (auto& [name, offset, shape] : manifest) {
            if (offset != cursor)
                throw ConfigError("checkpoint manifest offsets out of order at " + name);
            Tensor<float> t = Tensor<float>::zeros(shape);
            for (int64_t i = 0; i < t.numel(); ++i) {
                uint32_t bits;
                if (!detail::get_u32_le(is, bits))
                    throw MissingArtifactError("checkpoint blob truncated in " + name);
                t[i] = std::bit_cast<float>(bits);
            }
            cursor += static_cast<uint64_t>(t.numel());
            out.params.emplace(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint manifest error: " + std::string(e.what()));
    }
    return out;
}

// Snapshot / restore helpers for models exposing named parameter lists.
template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> snapshot_params(
    const std::vector<std::pair<std::string, Var<T>>>& params) {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(params.size());
    for (const auto& [name, v] : params) out.emplace_back(name, v.value().template cast<float>());
    return out;
}

template <typename T>
void assign_params(std::vector<std::pair<std::string, Var<T>>>& params,
                   const LoadedCheckpoint& ck) {
    for (auto& [name, v] : params) {
        const Tensor<float>& src = ck.require(name);
        if (src.shape != v.shape())
            throw ConfigError("checkpoint shape mismatch for " + name + ": " +
                              shape_to_string(src.shape) + " vs " + shape_to_string(v.shape()));
        v.set_value(src.cast<T>());
    }
}

}  // namespace intermoe
