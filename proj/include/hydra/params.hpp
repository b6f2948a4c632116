#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hydra/errors.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

/// Named collection of tensors split into frozen and trainable sets.
/// Iteration order is the lexicographic name order of the underlying
/// map, which keeps optimizer updates deterministic.
class ParamStore {
public:
    struct Entry {
        Tensor tensor;
        bool trainable = false;
    };

    void insert(const std::string& name, Tensor t, bool trainable) {
        auto [it, fresh] = entries_.emplace(name, Entry{std::move(t), trainable});
        if (!fresh) throw ConfigError("duplicate parameter name: " + name);
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor& get(const std::string& name) const { return find(name).tensor; }
    Tensor& mutable_tensor(const std::string& name) {
        return const_cast<Entry&>(find(name)).tensor;
    }

    bool trainable(const std::string& name) const { return find(name).trainable; }

    std::size_t size() const { return entries_.size(); }

    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::vector<std::string> names(bool trainable_only = false) const {
        std::vector<std::string> out;
        for (const auto& [name, e] : entries_) {
            if (!trainable_only || e.trainable) out.push_back(name);
        }
        return out;
    }

    std::size_t trainable_scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_) {
            if (e.trainable) n += e.tensor.numel();
        }
        return n;
    }

    /// FNV-1a over the raw bytes of every frozen tensor, in name order.
    /// Used to verify that training never touches frozen weights.
    std::uint64_t frozen_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, std::size_t n) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& [name, e] : entries_) {
            if (e.trainable) continue;
            mix(name.data(), name.size());
            mix(e.tensor.data(), e.tensor.numel() * sizeof(double));
        }
        return h;
    }

private:
    std::map<std::string, Entry> entries_;

    const Entry& find(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
};

}  // namespace hydra
