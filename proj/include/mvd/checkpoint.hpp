#pragma once

// Versioned checkpoint container shared by the VAEs and the transformer:
// magic, format version, a key-value config block, then a table of named
// float32 tensors (little-endian).

#include <map>
#include <string>
#include <vector>

#include "mvd/nn.hpp"
#include "mvd/tensor.hpp"

namespace mvd {

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> meta;

    struct Entry {
        Shape shape;
        std::vector<float> data;
    };
    std::map<std::string, Entry> tensors;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    template <typename T>
    void put(const std::string& name, const Tensor<T>& t) {
        Entry e;
        e.shape = t.shape();
        e.data.assign(t.numel(), 0.f);
        const T* src = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i) e.data[i] = static_cast<float>(src[i]);
        tensors[name] = std::move(e);
    }

    void put_raw(const std::string& name, Shape shape, std::vector<float> data) {
        tensors[name] = Entry{std::move(shape), std::move(data)};
    }

    template <typename T>
    void fill(const std::string& name, Tensor<T>& t) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("checkpoint missing tensor: " + name);
        if (it->second.shape != t.shape())
            throw CheckpointError("checkpoint shape mismatch for " + name + ": stored " +
                                  shape_str(it->second.shape) + ", expected " + shape_str(t.shape()));
        T* dst = t.data();
        for (std::size_t i = 0; i < it->second.data.size(); ++i)
            dst[i] = static_cast<T>(it->second.data[i]);
    }

    // Load every parameter of a store, by name with optional prefix.
    template <typename T>
    void fill_params(ParamStore<T>& ps, const std::string& prefix = "") const {
        for (auto& [name, t] : ps.entries()) {
            Tensor<T> tt = t;
            fill(prefix + name, tt);
        }
    }

    template <typename T>
    void put_params(const ParamStore<T>& ps, const std::string& prefix = "") {
        for (auto& [name, t] : ps.entries()) put(prefix + name, t);
    }

    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }
};

}  // namespace mvd
