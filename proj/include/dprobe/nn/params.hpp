// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/tensor.hpp"

namespace dprobe::nn {

/// Handle to one parameter inside a ParamStore.
struct ParamRef {
    std::size_t index = static_cast<std::size_t>(-1);
    bool valid() const { return index != static_cast<std::size_t>(-1); }
};

/// Named parameters with matching gradient accumulators, an EMA shadow and
/// AdamW moment buffers. Registration order is the canonical parameter order.
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T> ema;
        Tensor<T> m;
        Tensor<T> v;
    };

    ParamRef add(const std::string& name, Tensor<T> init) {
        if (by_name_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        Entry e;
        e.name = name;
        e.grad = Tensor<T>(init.shape());
        e.value = std::move(init);
        by_name_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return {entries_.size() - 1};
    }

    std::size_t count() const { return entries_.size(); }
    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    ParamRef find(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw IndexError("no parameter named '" + name + "'");
        return {it->second};
    }
    bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

    Entry& entry(std::size_t i) { return entries_.at(i); }
    const Entry& entry(std::size_t i) const { return entries_.at(i); }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Tensor<T>& value(ParamRef r) { return entries_.at(r.index).value; }
    const Tensor<T>& value(ParamRef r) const { return entries_.at(r.index).value; }
    Tensor<T>& grad(ParamRef r) { return entries_.at(r.index).grad; }
    const Tensor<T>& grad(ParamRef r) const { return entries_.at(r.index).grad; }

    void zero_grad() {
        for (auto& e : entries_) e.grad.fill(T{0});
    }

    bool has_ema() const { return !entries_.empty() && entries_.front().ema.size() == entries_.front().value.size(); }

    /// A store whose live values are this store's EMA shadow (or live values if no shadow yet).
    ParamStore ema_view() const {
        ParamStore out = *this;
        if (has_ema())
            for (auto& e : out.entries_) e.value = e.ema;
        return out;
    }

    /// Adam step counter (bias correction).
    long long adam_step = 0;

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> by_name_;
};

}  // namespace dprobe::nn
