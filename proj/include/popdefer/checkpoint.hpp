#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "popdefer/error.hpp"
#include "popdefer/params.hpp"

namespace popdefer {

// Checkpoint file layout (little-endian):
//   bytes 0..5   magic "PDCKPT"
//   u32          format version (1)
//   u32          parameter count
//   per parameter, in name order:
//     u32        name length, then that many bytes
//     u32        rank, then rank u64 dimensions
//     numel f64  values, row-major
// A sibling "<path>.manifest.txt" lists name/shape/element count per line.

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("truncated checkpoint file " + path);
    return v;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[6] = {'P', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Parameters& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint file for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.count()));
    for (const auto& [name, t] : params.values()) {
        t.require_finite("checkpointed parameter '" + name + "'");
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t d : t.shape()) detail::write_pod<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.raw()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw DataError("write failed for checkpoint file: " + path);

    std::ofstream manifest(path + ".manifest.txt", std::ios::trunc);
    manifest << "format PDCKPT v" << kCheckpointVersion << "\n";
    manifest << "parameters " << params.count() << "\n";
    for (const auto& [name, t] : params.values())
        manifest << name << " " << t.shape_str() << " " << t.numel() << "\n";
}

inline Parameters load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint file: " + path);
    char magic[6];
    is.read(magic, sizeof(magic));
    if (!is || std::string(magic, 6) != std::string(kCheckpointMagic, 6))
        throw ParseError("bad magic in checkpoint file " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, path);
    if (version != kCheckpointVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version) + " in " +
                         path);
    const auto count = detail::read_pod<std::uint32_t>(is, path);
    Parameters params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_pod<std::uint32_t>(is, path);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, path));
        const std::size_t numel = Tensor::numel_from_shape(shape);
        std::vector<double> values(numel);
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw ParseError("truncated checkpoint file " + path);
        Tensor t(std::move(shape), std::move(values));
        t.require_finite("parameter '" + name + "' loaded from " + path);
        params.add(name, std::move(t));
    }
    return params;
}

}  // namespace popdefer
