#pragma once

// Checkpoint layout (all integers little-endian):
//   "OUCVCKPT" | u32 version | u64 config length | config JSON
//   u64 parameter count, then per parameter:
//     u32 name length | name | u64 rows | u64 cols | rows*cols f64
//   u32 checksum length | frozen-set SHA-256 hex

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oucovit/errors.hpp"
#include "oucovit/nn/model.hpp"

namespace oucovit::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'O', 'U', 'C', 'V', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("checkpoint: truncated");
    return v;
}

inline std::string take_string(std::istream& is, std::uint64_t n) {
    if (n > (1u << 26)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint: truncated");
    return s;
}

}  // namespace detail

struct CheckpointInfo {
    ModelConfig config;
    std::string frozen_checksum;
};

/// Writes to a temporary sibling and renames, so a failed write never leaves
/// a partial file behind.
inline void save_checkpoint(const BiChannelModel& model, const std::filesystem::path& path) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write(kCheckpointMagic, 8);
        detail::put<std::uint32_t>(os, kCheckpointVersion);
        const std::string cfg = to_json(model.config()).dump();
        detail::put<std::uint64_t>(os, cfg.size());
        os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        detail::put<std::uint64_t>(os, model.parameters().size());
        for (const auto& p : model.parameters()) {
            detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
            os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(p.tensor.rows()));
            detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(p.tensor.cols()));
            os.write(reinterpret_cast<const char*>(p.tensor.value().data()),
                     static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
        }
        const std::string sum = model.frozen_checksum();
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(sum.size()));
        os.write(sum.data(), static_cast<std::streamsize>(sum.size()));
        if (!os) throw IoError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Rebuilds the model from the stored config and overwrites every parameter.
/// Throws FormatError on bad magic/version, truncation, a parameter layout
/// that does not match the config, or a frozen-checksum mismatch.
inline BiChannelModel load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw FormatError("checkpoint: bad magic in " + path.string());
    }
    if (detail::take<std::uint32_t>(is) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(nlohmann::json::parse(detail::take_string(is, detail::take<std::uint64_t>(is))));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad config: ") + e.what());
    }
    BiChannelModel model(cfg, 0);
    const auto count = detail::take<std::uint64_t>(is);
    if (count != model.parameters().size()) throw FormatError("checkpoint: parameter count mismatch");
    for (const auto& p : model.parameters()) {
        const std::string name = detail::take_string(is, detail::take<std::uint32_t>(is));
        const auto rows = detail::take<std::uint64_t>(is);
        const auto cols = detail::take<std::uint64_t>(is);
        if (name != p.name || rows != static_cast<std::uint64_t>(p.tensor.rows()) ||
            cols != static_cast<std::uint64_t>(p.tensor.cols())) {
            throw FormatError("checkpoint: unexpected parameter '" + name + "'");
        }
        Tensor t = p.tensor;
        if (!is.read(reinterpret_cast<char*>(t.mutable_value().data()),
                     static_cast<std::streamsize>(rows * cols * sizeof(double)))) {
            throw FormatError("checkpoint: truncated");
        }
    }
    const std::string sum = detail::take_string(is, detail::take<std::uint32_t>(is));
    if (sum != model.frozen_checksum()) throw FormatError("checkpoint: frozen checksum mismatch");
    if (info) *info = {cfg, sum};
    return model;
}

}  // namespace oucovit::nn
