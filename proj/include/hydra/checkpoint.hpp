#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "hydra/config.hpp"
#include "hydra/errors.hpp"
#include "hydra/params.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

/// On-disk layout (little endian):
///   8 bytes   magic "HYDRAPCK"
///   u32       format version
///   u64       header length
///   bytes     UTF-8 JSON header: config, seed, step, tensor manifest
///             (name, dtype, shape, offset into payload, trainable)
///   bytes     raw f64 tensor payloads, in manifest order
///   u32       CRC32 of everything above
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    static constexpr char kMagic[9] = "HYDRAPCK";

    TrainConfig config;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    ParamStore params;
};

namespace detail {

template <class T>
void append_le(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T read_le(const std::string& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

}  // namespace detail

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::string payload;
    for (const auto& [name, entry] : ckpt.params.entries()) {
        nlohmann::ordered_json shape = nlohmann::ordered_json::array();
        for (std::size_t d : entry.tensor.shape()) shape.push_back(d);
        tensors.push_back({{"name", name},
                           {"dtype", "f64"},
                           {"shape", shape},
                           {"offset", payload.size()},
                           {"trainable", entry.trainable}});
        payload.append(reinterpret_cast<const char*>(entry.tensor.data()),
                       entry.tensor.numel() * sizeof(double));
    }
    nlohmann::ordered_json header{{"config", to_json(ckpt.config)},
                                  {"seed", ckpt.seed},
                                  {"step", ckpt.step},
                                  {"tensors", tensors}};
    const std::string header_str = header.dump();

    std::string buf;
    buf.append(Checkpoint::kMagic, 8);
    detail::append_le<std::uint32_t>(buf, Checkpoint::kVersion);
    detail::append_le<std::uint64_t>(buf, header_str.size());
    buf += header_str;
    buf += payload;
    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    detail::append_le<std::uint32_t>(buf, crc);
    return buf;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string bytes = checkpoint_bytes(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 8 + sizeof(std::uint32_t) + sizeof(std::uint64_t) + sizeof(std::uint32_t)) {
        throw TruncationError("checkpoint shorter than its fixed header: " + path);
    }
    if (std::memcmp(buf.data(), Checkpoint::kMagic, 8) != 0) {
        throw FormatError("not a checkpoint (bad magic bytes): " + path);
    }
    const auto version = detail::read_le<std::uint32_t>(buf, 8);
    if (version != Checkpoint::kVersion) {
        throw VersionError("unsupported checkpoint version " + std::to_string(version) +
                           " (this build reads " + std::to_string(Checkpoint::kVersion) + ")");
    }
    const auto header_len = detail::read_le<std::uint64_t>(buf, 12);
    const std::size_t header_off = 8 + 4 + 8;
    if (buf.size() < header_off + header_len + sizeof(std::uint32_t)) {
        throw TruncationError("checkpoint truncated inside the header: " + path);
    }

    const std::string body = buf.substr(0, buf.size() - sizeof(std::uint32_t));
    const auto stored_crc = detail::read_le<std::uint32_t>(buf, buf.size() - sizeof(std::uint32_t));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(header_off, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("unparseable checkpoint header: " + std::string(e.what()));
    }

    const std::size_t payload_off = header_off + header_len;
    const std::size_t payload_len = body.size() - payload_off;

    for (const auto& t : header.at("tensors")) {
        Shape shape;
        for (const auto& d : t.at("shape")) shape.push_back(d.get<std::size_t>());
        if (t.at("dtype").get<std::string>() != "f64") {
            throw FormatError("unsupported tensor dtype in checkpoint: " +
                              t.at("dtype").get<std::string>());
        }
        const auto offset = t.at("offset").get<std::size_t>();
        if (offset + shape_numel(shape) * sizeof(double) > payload_len) {
            throw TruncationError("checkpoint truncated inside tensor payload: " + path);
        }
    }

    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    if (crc != stored_crc) {
        throw ChecksumError("checkpoint checksum mismatch: " + path);
    }

    Checkpoint ckpt;
    ckpt.config = train_config_from_json(header.at("config"));
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.step = header.at("step").get<std::uint64_t>();
    for (const auto& t : header.at("tensors")) {
        Shape shape;
        for (const auto& d : t.at("shape")) shape.push_back(d.get<std::size_t>());
        const auto offset = t.at("offset").get<std::size_t>();
        Tensor tensor(shape);
        std::memcpy(tensor.data(), buf.data() + payload_off + offset,
                    shape_numel(shape) * sizeof(double));
        ckpt.params.insert(t.at("name").get<std::string>(), std::move(tensor),
                           t.at("trainable").get<bool>());
    }
    return ckpt;
}

}  // namespace hydra
