#include "mvd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mvd {

namespace {

constexpr char kMagic[8] = {'M', 'V', 'D', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("checkpoint truncated");
    return v;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kVersion);

    nlohmann::json j(meta);
    const std::string meta_str = j.dump();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta_str.size()));
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    write_pod<std::uint64_t>(os, tensors.size());
    for (const auto& [name, e] : tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) write_pod<std::int64_t>(os, d);
        write_pod<std::uint64_t>(os, e.data.size());
        os.write(reinterpret_cast<const char*>(e.data.data()),
                 static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion)
        throw CheckpointError("checkpoint version mismatch: file has v" + std::to_string(version) +
                              ", reader expects v" + std::to_string(kVersion));

    Checkpoint ck;
    const auto meta_len = read_pod<std::uint32_t>(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), meta_len);
    if (!is) throw CheckpointError("checkpoint truncated in config block");
    auto j = nlohmann::json::parse(meta_str, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw CheckpointError("checkpoint config block is not valid JSON");
    for (auto& [k, v] : j.items()) ck.meta[k] = v.get<std::string>();

    const auto count = read_pod<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        Entry e;
        const auto ndim = read_pod<std::uint32_t>(is);
        e.shape.resize(ndim);
        for (auto& d : e.shape) d = read_pod<std::int64_t>(is);
        const auto n = read_pod<std::uint64_t>(is);
        if (n != static_cast<std::uint64_t>(shape_numel(e.shape)))
            throw CheckpointError("checkpoint tensor size mismatch for " + name);
        e.data.resize(n);
        is.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (!is) throw CheckpointError("checkpoint truncated in tensor table");
        ck.tensors[name] = std::move(e);
    }
    return ck;
}

}  // namespace mvd
