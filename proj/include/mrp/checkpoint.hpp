#pragma once

// Checkpoint file:
//
//   "MRPCKPT1"  8 bytes
//   u64 LE      manifest length
//   manifest    JSON: format version, config, config hash, tensor table
//   tensors     little-endian float32, row-major, at the listed offsets
//
// Tensors are the model parameters in creation order, then the Adam first
// and second moments ("adam.m/<name>", "adam.v/<name>").

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/config.hpp"
#include "mrp/dataset.hpp"
#include "mrp/models.hpp"
#include "mrp/optim.hpp"

namespace mrp {

inline constexpr char kCheckpointMagic[8] = {'M', 'R', 'P', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    std::string config_hash;
    std::size_t fold = 0;
    ScoringModel model;
    AdamState adam;
};

inline void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, std::size_t fold,
                            const ScoringModel& model, const AdamState& adam) {
    const auto& params = model.parameters();
    if (adam.m.size() != params.size() || adam.v.size() != params.size()) {
        throw ShapeError("optimizer state does not match the model");
    }
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for (const auto& p : params) tensors.emplace_back(p.name, &p.value);
    for (std::size_t i = 0; i < params.size(); ++i) tensors.emplace_back("adam.m/" + params[i].name, &adam.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) tensors.emplace_back("adam.v/" + params[i].name, &adam.v[i]);

    nlohmann::json manifest = {{"version", kCheckpointVersion},
                               {"config", cfg},
                               {"config_hash", config_hash(cfg)},
                               {"fold", fold},
                               {"adam_step", adam.step},
                               {"tensors", nlohmann::json::array()}};
    std::size_t offset = 0;
    for (const auto& [name, m] : tensors) {
        manifest["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
        offset += 4 * static_cast<std::size_t>(m->size());
    }
    const std::string text = manifest.dump();

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write checkpoint " + path.string());
        out.write(kCheckpointMagic, 8);
        std::uint64_t len = text.size();
        unsigned char lenbytes[8];
        for (int b = 0; b < 8; ++b) lenbytes[b] = static_cast<unsigned char>(len >> (8 * b));
        out.write(reinterpret_cast<const char*>(lenbytes), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, m] : tensors) {
            const auto bytes = encode_f32(*m);
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        }
        if (!out) throw LoadError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Loads and verifies a checkpoint: magic, version, config hash and every
/// tensor shape against the architecture the stored config builds.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file_bytes(path);
    const std::string where = path.string();
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError(where + ": not a checkpoint (bad magic)");
    }
    std::uint64_t len = 0;
    for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
    if (len > bytes.size() - 16) throw FormatError(where + ": manifest length exceeds file size");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(where + ": bad manifest: " + e.what());
    }
    if (manifest.value("version", 0) != kCheckpointVersion) {
        throw FormatError(where + ": unsupported checkpoint version " + manifest.value("version", nlohmann::json()).dump());
    }
    TrainConfig cfg = train_config_from_json(manifest.at("config"));
    const auto stored_hash = manifest.value("config_hash", "");
    if (stored_hash != config_hash(cfg)) {
        throw ValidationError(where + ": config hash " + stored_hash + " does not match stored config (" +
                              config_hash(cfg) + ")");
    }
    Checkpoint ck{cfg, stored_hash, manifest.value("fold", std::size_t{0}), ScoringModel(cfg.model, 0), {}};
    ck.adam = AdamState::for_parameters(ck.model.parameters());
    ck.adam.step = manifest.value("adam_step", std::size_t{0});

    const std::size_t blob = 16 + len;
    auto read_tensor = [&](const nlohmann::json& entry, Matrix& dst, const std::string& expect_name) {
        const auto name = entry.at("name").get<std::string>();
        if (name != expect_name) throw FormatError(where + ": expected tensor '" + expect_name + "', found '" + name + "'");
        const auto rows = entry.at("rows").get<Eigen::Index>(), cols = entry.at("cols").get<Eigen::Index>();
        if (rows != dst.rows() || cols != dst.cols()) {
            throw ShapeError(where + ": tensor '" + name + "' has shape " + shape_string(rows, cols) + ", model needs " +
                             shape_string(dst));
        }
        const auto offset = entry.at("offset").get<std::size_t>();
        const std::size_t n = 4 * static_cast<std::size_t>(rows * cols);
        if (blob + offset + n > bytes.size()) throw FormatError(where + ": tensor '" + name + "' runs past end of file");
        dst = decode_f32(std::span<const char>(bytes.data() + blob + offset, n), static_cast<std::size_t>(rows),
                         static_cast<std::size_t>(cols));
    };
    const auto& table = manifest.at("tensors");
    auto& params = ck.model.parameters();
    if (table.size() != 3 * params.size()) {
        throw FormatError(where + ": " + std::to_string(table.size()) + " tensors, expected " +
                          std::to_string(3 * params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        read_tensor(table[i], params[i].value, params[i].name);
        read_tensor(table[params.size() + i], ck.adam.m[i], "adam.m/" + params[i].name);
        read_tensor(table[2 * params.size() + i], ck.adam.v[i], "adam.v/" + params[i].name);
    }
    return ck;
}

}  // namespace mrp
