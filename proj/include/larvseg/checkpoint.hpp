#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/tensor.hpp"
#include "larvseg/tensor_io.hpp"

// LCKP checkpoint container:
//   "LCKP" magic, u32 version,
//   u32 config byte count + config echo (key=value text),
//   u32 tensor count, then per tensor: u32 name length, name, LTNS blob.
// Entry order is part of the format so identical state gives identical bytes.

namespace larvseg {

struct Checkpoint {
    Config cfg;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor& require(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw FormatError("checkpoint: missing tensor '" + name + "'");
        return *t;
    }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("LCKP", 4);
    detail::put_u32(os, kCheckpointVersion);
    const std::string cfg_text = config_to_text(ckpt.cfg);
    detail::put_u32(os, static_cast<std::uint32_t>(cfg_text.size()));
    os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, tensor);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("checkpoint: truncated magic");
    if (std::memcmp(magic, "LCKP", 4) != 0) throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = detail::get_u32(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t cfg_len = detail::get_u32(is, "config length");
    std::string cfg_text(cfg_len, '\0');
    if (!is.read(cfg_text.data(), cfg_len)) throw FormatError("checkpoint: truncated config");
    Checkpoint out;
    std::istringstream cfg_stream(cfg_text);
    out.cfg = parse_config_text(cfg_stream);
    const std::uint32_t count = detail::get_u32(is, "tensor count");
    out.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is, "name length");
        if (name_len > 4096) throw FormatError("checkpoint: implausible name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("checkpoint: truncated name");
        out.tensors.emplace_back(std::move(name), read_tensor(is));
    }
    return out;
}

}  // namespace larvseg
