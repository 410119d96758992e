#pragma once

#include <map>
#include <string>
#include <utility>

#include "popdefer/error.hpp"
#include "popdefer/tape.hpp"
#include "popdefer/tensor.hpp"

namespace popdefer {

using Gradients = std::map<std::string, Tensor>;

// Named parameter store plus Adam state. std::map keeps iteration order
// deterministic, which the optimizer and checkpoint writer rely on.
class Parameters {
public:
    void add(const std::string& name, Tensor t) {
        if (values_.count(name)) throw StateError("parameter '" + name + "' registered twice");
        values_.emplace(name, std::move(t));
    }

    bool has(const std::string& name) const { return values_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = values_.find(name);
        if (it == values_.end()) throw StructuralError("unknown parameter '" + name + "'");
        return it->second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw StructuralError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Tensor>& values() { return values_; }
    const std::map<std::string, Tensor>& values() const { return values_; }
    std::size_t count() const { return values_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : values_) n += t.numel();
        return n;
    }

    // Adam moment buffers, created on first use.
    Tensor& moment1(const std::string& name) { return moment(m1_, name); }
    Tensor& moment2(const std::string& name) { return moment(m2_, name); }
    long step_count = 0;

    void reset_optimizer_state() {
        m1_.clear();
        m2_.clear();
        step_count = 0;
    }

private:
    Tensor& moment(std::map<std::string, Tensor>& store, const std::string& name) {
        auto it = store.find(name);
        if (it == store.end()) {
            const Tensor& v = at(name);
            it = store.emplace(name, Tensor(v.shape(), std::vector<double>(v.numel(), 0.0))).first;
        }
        return it->second;
    }

    std::map<std::string, Tensor> values_;
    std::map<std::string, Tensor> m1_, m2_;
};

// Binds named parameters onto a tape as leaves, once each, and harvests
// their gradients after backward(). `trainable=false` gives an inference
// binder: same forward code, no gradient bookkeeping.
class Binder {
public:
    Binder(Tape& tape, const Parameters& params, bool trainable = true)
        : tape_(tape), params_(params), trainable_(trainable) {}

    NodeId operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const NodeId id = tape_.leaf(params_.at(name), trainable_);
        bound_.emplace(name, id);
        return id;
    }

    // Gradients of every bound parameter; zero tensors for params the loss
    // never touched are not included, callers decide how to treat those.
    Gradients collect() const {
        Gradients g;
        for (const auto& [name, id] : bound_) g.emplace(name, tape_.grad(id));
        return g;
    }

    const std::map<std::string, NodeId>& bound() const { return bound_; }
    const Parameters& params() const { return params_; }

private:
    Tape& tape_;
    const Parameters& params_;
    bool trainable_;
    std::map<std::string, NodeId> bound_;
};

}  // namespace popdefer
