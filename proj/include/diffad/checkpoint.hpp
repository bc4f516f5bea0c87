#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "denoiser.hpp"
#include "diffusion.hpp"
#include "io_util.hpp"

namespace diffad {

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'F', 'A', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
  public:
    enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed, Io };

    CheckpointError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

  private:
    Kind kind_;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ModelConfig model;
    ModelWeights weights;
    ScheduleParams schedule;
    std::uint64_t perception_seed = 0;
    std::uint64_t step = 0;
    // Free-form string settings needed to reuse the model (modality, scalogram
    // gain, resolution, ...).
    std::map<std::string, std::string> metadata;
};

namespace detail {

inline nlohmann::json checkpoint_header(const Checkpoint& c) {
    nlohmann::json j;
    j["model"] = {{"base_channels", c.model.base_channels},   {"depth", c.model.depth},
                  {"heads", c.model.heads},                   {"head_dim", c.model.head_dim},
                  {"wavelet_levels", c.model.wavelet_levels}, {"wavelet_filter", c.model.wavelet_filter},
                  {"time_embed_dim", c.model.time_embed_dim}, {"input_channels", c.model.input_channels}};
    j["schedule"] = {{"T", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
    j["perception_seed"] = c.perception_seed;
    j["step"] = c.step;
    j["metadata"] = c.metadata;
    return j;
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
  public:
    explicit Reader(const std::string& buf) : buf_(buf) {}

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > buf_.size()) {
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  std::string("checkpoint truncated while reading ") + what);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    bool done() const { return pos_ == buf_.size(); }

  private:
    const std::string& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes to the binary container:
///   "DIFADCKP" | u32 version | u32 header length | JSON header |
///   u32 tensor count | per tensor: u32 name length, name, u32 rank,
///   u32 extents[rank], f32 payload. All integers and floats little-endian.
inline std::string serialize_checkpoint(const Checkpoint& c) {
    static_assert(sizeof(float) == 4);
    std::string out(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    const std::string header = detail::checkpoint_header(c).dump();
    detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    detail::put_u32(out, static_cast<std::uint32_t>(c.weights.size()));
    for (const auto& [name, t] : c.weights) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
        for (float v : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

/// Parses a serialized checkpoint. Tensor records are validated against the
/// model manifest unless `validate_manifest` is false (used for extractor
/// weight files, which carry no U-Net).
inline Checkpoint parse_checkpoint(const std::string& buf, bool validate_manifest = true) {
    detail::Reader r(buf);
    if (buf.size() < 8) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated in magic");
    if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointError(CheckpointError::Kind::BadMagic, "not a checkpoint file (bad magic)");
    }
    (void)r.bytes(8, "magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                              "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t header_len = r.u32("header length");
    const std::string header = r.bytes(header_len, "header");

    Checkpoint c;
    c.version = version;
    try {
        auto j = nlohmann::json::parse(header);
        const auto& m = j.at("model");
        c.model.base_channels = m.at("base_channels").get<std::size_t>();
        c.model.depth = m.at("depth").get<std::size_t>();
        c.model.heads = m.at("heads").get<std::size_t>();
        c.model.head_dim = m.at("head_dim").get<std::size_t>();
        c.model.wavelet_levels = m.at("wavelet_levels").get<std::size_t>();
        c.model.wavelet_filter = m.at("wavelet_filter").get<std::string>();
        c.model.time_embed_dim = m.at("time_embed_dim").get<std::size_t>();
        c.model.input_channels = m.at("input_channels").get<std::size_t>();
        const auto& s = j.at("schedule");
        c.schedule.steps = s.at("T").get<std::size_t>();
        c.schedule.beta_start = s.at("beta_start").get<double>();
        c.schedule.beta_end = s.at("beta_end").get<double>();
        c.perception_seed = j.at("perception_seed").get<std::uint64_t>();
        c.step = j.at("step").get<std::uint64_t>();
        c.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint header: ") + e.what());
    }

    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("tensor name length");
        std::string name = r.bytes(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw CheckpointError(CheckpointError::Kind::Malformed, "tensor '" + name + "' has rank > 8");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("tensor extents"));
        const std::size_t n = numel(shape);
        r.need(n * 4, "tensor payload");
        std::vector<float> v(n);
        for (std::size_t k = 0; k < n; ++k) v[k] = r.f32("tensor payload");
        bool inserted = false;
        try {
            inserted = c.weights.emplace(name, Tensor(shape, std::move(v))).second;
        } catch (const Error& e) {
            throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint tensor: ") + e.what());
        }
        if (!inserted) throw CheckpointError(CheckpointError::Kind::Malformed, "duplicate tensor '" + name + "'");
    }
    if (!r.done()) throw CheckpointError(CheckpointError::Kind::Malformed, "trailing bytes after last tensor");
    if (validate_manifest) {
        try {
            validate_weights(c.model, c.weights);
        } catch (const Error& e) {
            throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint weights: ") + e.what());
        }
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    try {
        write_file_atomic(path, serialize_checkpoint(c));
    } catch (const DataError& e) {
        throw CheckpointError(CheckpointError::Kind::Io, e.what());
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, bool validate_manifest = true) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint '" + path.string() + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(buf, validate_manifest);
}

}  // namespace diffad
