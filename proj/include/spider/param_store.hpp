#pragma once

#include <map>
#include <string>
#include <vector>

#include "spider/core.hpp"

namespace spider {

// Named parameter collection. Iteration order is the lexicographic name
// order, which fixes the order of every elementwise reduction over stores.
class ParamStore {
public:
    using Map = std::map<std::string, Tensor>;

    void insert(const std::string& name, Tensor t) {
        if (entries_.count(name)) throw UsageError("duplicate parameter name: " + name);
        entries_.emplace(name, std::move(t));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
        return it->second;
    }

    size_t size() const { return entries_.size(); }
    Map::iterator begin() { return entries_.begin(); }
    Map::iterator end() { return entries_.end(); }
    Map::const_iterator begin() const { return entries_.begin(); }
    Map::const_iterator end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : entries_) n += v.numel();
        return n;
    }

    // Deep copy: the clone owns fresh tensors.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [k, v] : entries_) out.entries_.emplace(k, v.clone());
        return out;
    }

    // Shallow selection sharing tensor storage with this store.
    ParamStore select(const std::vector<std::string>& names) const {
        ParamStore out;
        for (const auto& n : names) out.entries_.emplace(n, at(n));
        return out;
    }

    void erase(const std::string& name) { entries_.erase(name); }

    void clear_grads() {
        for (auto& [k, v] : entries_) v.clear_grad();
    }

    bool bit_equal(const ParamStore& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        auto a = entries_.begin();
        auto b = other.entries_.begin();
        for (; a != entries_.end(); ++a, ++b) {
            if (a->first != b->first) return false;
            if (a->second.shape() != b->second.shape()) return false;
            auto da = a->second.data();
            auto db = b->second.data();
            for (int64_t i = 0; i < a->second.numel(); ++i)
                if (da[static_cast<size_t>(i)] != db[static_cast<size_t>(i)]) return false;
        }
        return true;
    }

private:
    Map entries_;
};

using GradMap = std::map<std::string, std::vector<real>>;

// Gradients of every requires_grad parameter after a backward pass; params
// the loss never touched report exact zeros.
inline GradMap collect_grads(const ParamStore& params) {
    GradMap out;
    for (const auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        auto g = t.grad();
        if (g.empty())
            out.emplace(name, std::vector<real>(static_cast<size_t>(t.numel()), real(0)));
        else
            out.emplace(name, std::vector<real>(g.begin(), g.end()));
    }
    return out;
}

// p <- p - lr * g for every key in grads; untouched parameters unchanged.
inline void sgd_step(ParamStore& params, const GradMap& grads, real lr) {
    if (lr < 0) throw UsageError("sgd_step: negative learning rate");
    for (const auto& [name, g] : grads) {
        if (!params.has(name)) throw UsageError("sgd_step: gradient for unknown parameter " + name);
        Tensor& p = params.at(name);
        if (static_cast<int64_t>(g.size()) != p.numel())
            throw UsageError("sgd_step: gradient size mismatch for " + name);
        auto d = p.data_mut();
        for (size_t i = 0; i < g.size(); ++i) d[i] -= lr * g[i];
    }
}

}  // namespace spider
