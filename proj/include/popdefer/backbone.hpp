#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "popdefer/dataset.hpp"
#include "popdefer/mathfn.hpp"
#include "popdefer/optim.hpp"
#include "popdefer/params.hpp"
#include "popdefer/tape.hpp"

namespace popdefer {

struct BackboneConfig {
    std::size_t in_dim = 0;
    std::size_t hidden = 32;
    std::size_t out_dim = 0;
    int num_classes = 0;
};

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 64;
    AdamConfig adam{};
    std::uint64_t seed = 0;
};

// The frozen feature extractor plus its pretraining classification head.
// The map is a two-layer network x -> w2'tanh(x w1 + b1) + b2 followed by a
// per-dimension standardization fitted at freeze time. In identity mode the
// input features pass through untouched (externally computed features).
class FeatureBackbone {
public:
    static FeatureBackbone make(const BackboneConfig& cfg, std::uint64_t seed) {
        FeatureBackbone bb;
        bb.cfg_ = cfg;
        bb.identity_ = false;
        Rng rng(derive_seed(seed, 0xbbb1));
        const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        const double s3 = 1.0 / std::sqrt(static_cast<double>(cfg.out_dim));
        bb.params_.add("emb.w1", Tensor::randn(cfg.in_dim, cfg.hidden, s1, rng));
        bb.params_.add("emb.b1", Tensor::zeros(1, cfg.hidden));
        bb.params_.add("emb.w2", Tensor::randn(cfg.hidden, cfg.out_dim, s2, rng));
        bb.params_.add("emb.b2", Tensor::zeros(1, cfg.out_dim));
        bb.params_.add("head.w", Tensor::randn(cfg.out_dim, static_cast<std::size_t>(cfg.num_classes), s3, rng));
        bb.params_.add("head.b", Tensor::zeros(1, static_cast<std::size_t>(cfg.num_classes)));
        return bb;
    }

    static FeatureBackbone identity(std::size_t dim, int num_classes) {
        FeatureBackbone bb;
        bb.cfg_ = BackboneConfig{dim, 0, dim, num_classes};
        bb.identity_ = true;
        bb.frozen_ = true;
        return bb;
    }

    bool frozen() const { return frozen_; }
    bool is_identity() const { return identity_; }
    const BackboneConfig& config() const { return cfg_; }
    const Parameters& params() const { return params_; }
    Parameters& mutable_params() {
        if (frozen_) throw StateError("backbone is frozen; parameters are immutable");
        return params_;
    }

    // Feature-map subgraph (before standardization); training-time use.
    NodeId features_graph(Tape& tape, Binder& bind, NodeId x) const {
        if (identity_) return x;
        const NodeId h = tape.tanh_act(tape.add_rowvec(tape.matmul(x, bind("emb.w1")), bind("emb.b1")));
        return tape.add_rowvec(tape.matmul(h, bind("emb.w2")), bind("emb.b2"));
    }

    NodeId logits_graph(Tape& tape, Binder& bind, NodeId x) const {
        const NodeId f = features_graph(tape, bind, x);
        return tape.add_rowvec(tape.matmul(f, bind("head.w")), bind("head.b"));
    }

    // Frozen feature map applied to one raw vector.
    std::vector<double> transform(const std::vector<double>& raw) const {
        if (!frozen_) throw StateError("backbone must be frozen before transform()");
        if (identity_) return raw;
        if (raw.size() != cfg_.in_dim)
            throw StructuralError("backbone transform: input dim " + std::to_string(raw.size()) +
                                  ", expected " + std::to_string(cfg_.in_dim));
        const Tensor& w1 = params_.at("emb.w1");
        const Tensor& b1 = params_.at("emb.b1");
        const Tensor& w2 = params_.at("emb.w2");
        const Tensor& b2 = params_.at("emb.b2");
        std::vector<double> h(cfg_.hidden, 0.0);
        for (std::size_t j = 0; j < cfg_.hidden; ++j) {
            double s = b1.data()[j];
            for (std::size_t i = 0; i < cfg_.in_dim; ++i) s += raw[i] * w1.at(i, j);
            h[j] = std::tanh(s);
        }
        std::vector<double> out(cfg_.out_dim, 0.0);
        for (std::size_t j = 0; j < cfg_.out_dim; ++j) {
            double s = b2.data()[j];
            for (std::size_t i = 0; i < cfg_.hidden; ++i) s += h[i] * w2.at(i, j);
            out[j] = (s - mu_[j]) / sd_[j];
        }
        return out;
    }

    void freeze_with_standardization(const std::vector<Instance>& train) {
        if (frozen_) throw StateError("backbone already frozen");
        mu_.assign(cfg_.out_dim, 0.0);
        sd_.assign(cfg_.out_dim, 1.0);
        frozen_ = true;  // transform() below needs frozen state; mu/sd still neutral
        std::vector<std::vector<double>> feats;
        feats.reserve(train.size());
        for (const Instance& inst : train) feats.push_back(transform(inst.features));
        for (std::size_t j = 0; j < cfg_.out_dim; ++j) {
            double mean = 0.0;
            for (const auto& f : feats) mean += f[j];
            mean /= static_cast<double>(feats.size());
            double var = 0.0;
            for (const auto& f : feats) var += (f[j] - mean) * (f[j] - mean);
            var /= static_cast<double>(feats.size());
            mu_[j] = mean;
            sd_[j] = std::sqrt(var) > 1e-8 ? std::sqrt(var) : 1.0;
        }
    }

private:
    BackboneConfig cfg_{};
    Parameters params_;
    bool frozen_ = false;
    bool identity_ = false;
    std::vector<double> mu_, sd_;
};

// Minimizes the mean cross-entropy of head(emb(x)) over the raw train split,
// then freezes the feature map. Returns validation accuracy.
inline double pretrain_backbone(FeatureBackbone& bb, const DatasetSplit& raw,
                                const PretrainConfig& cfg) {
    if (bb.frozen()) throw StateError("pretrain_backbone: backbone already frozen");
    if (raw.train.empty()) throw DataError("pretrain_backbone: empty train split");
    Rng rng(derive_seed(cfg.seed, 0xbbb2));
    std::vector<std::size_t> order(raw.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<const Instance*> batch;
            std::vector<std::size_t> targets;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&raw.train[order[i]]);
                targets.push_back(static_cast<std::size_t>(raw.train[order[i]].label));
            }
            Tape tape;
            Binder bind(tape, bb.mutable_params(), true);
            const NodeId x = tape.constant(stack_features(batch));
            const NodeId logits = bb.logits_graph(tape, bind, x);
            const NodeId loss = tape.mean_all(tape.ce_rows(logits, targets));
            tape.backward(loss);
            adam_step(bb.mutable_params(), bind.collect(), cfg.adam);
        }
    }
    bb.freeze_with_standardization(raw.train);

    std::size_t correct = 0;
    const std::vector<Instance>& val = raw.validation.empty() ? raw.train : raw.validation;
    for (const Instance& inst : val) {
        Tape tape;
        Binder bind(tape, bb.params(), false);
        const NodeId x = tape.constant(Tensor::row(inst.features));
        const NodeId logits = bb.logits_graph(tape, bind, x);
        const auto& z = tape.value(logits).data();
        if (static_cast<int>(argmax(std::span<const double>(z.data(), z.size()))) == inst.label)
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(val.size());
}

// Replaces every instance's features with the frozen backbone output.
inline DatasetSplit transform_dataset(const FeatureBackbone& bb, const DatasetSplit& raw) {
    if (!bb.frozen()) throw StateError("transform_dataset: backbone must be frozen");
    DatasetSplit out = raw;
    for (auto* part : {&out.train, &out.validation, &out.test})
        for (Instance& inst : *part) inst.features = bb.transform(inst.features);
    out.feature_dim = bb.config().out_dim;
    return out;
}

}  // namespace popdefer
