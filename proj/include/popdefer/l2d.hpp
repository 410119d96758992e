#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "popdefer/behavior.hpp"
#include "popdefer/mathfn.hpp"
#include "popdefer/params.hpp"
#include "popdefer/tape.hpp"

namespace popdefer {

enum class L2dVariant { PopNPAttention, PopNP, Single, Finetune };

inline std::string to_string(L2dVariant v) {
    switch (v) {
        case L2dVariant::PopNPAttention: return "np_attention";
        case L2dVariant::PopNP: return "np";
        case L2dVariant::Single: return "single";
        case L2dVariant::Finetune: return "finetune";
    }
    return "?";
}

inline L2dVariant l2d_variant_from_string(const std::string& s) {
    if (s == "np_attention") return L2dVariant::PopNPAttention;
    if (s == "np") return L2dVariant::PopNP;
    if (s == "single") return L2dVariant::Single;
    if (s == "finetune") return L2dVariant::Finetune;
    throw ConfigError("unknown L2D variant '" + s + "'");
}

struct L2dConfig {
    L2dVariant variant = L2dVariant::PopNPAttention;
    std::size_t feature_dim = 0;
    int num_classes = 0;
    std::size_t d_psi = 0;  // width of the context embedding; ignored by Single/Finetune
    std::size_t trunk_hidden = 24;
    std::size_t head_hidden = 32;

    bool uses_psi() const {
        return variant == L2dVariant::PopNPAttention || variant == L2dVariant::PopNP;
    }
};

// Deliberately low-capacity classifier trunk (one narrow hidden layer to K
// logits) plus the deferral head. Population-aware variants condition the
// deferral logit on the expert embedding; Single-L2D sees the features only.
// Trunk and head live in separate parameter stores so fine-tuning can freeze
// the trunk outright.
struct DeferralModel {
    L2dConfig cfg;
    Parameters trunk;
    Parameters head;
};

inline DeferralModel make_deferral_model(const L2dConfig& cfg, std::uint64_t seed) {
    if (cfg.feature_dim == 0 || cfg.num_classes < 2)
        throw ConfigError("deferral model: feature_dim and num_classes must be set");
    if (cfg.uses_psi() && cfg.d_psi == 0)
        throw ConfigError("deferral model: population variants need d_psi");
    DeferralModel model;
    model.cfg = cfg;
    Rng rng(derive_seed(seed, 0x12d0));
    const std::size_t f = cfg.feature_dim;
    const std::size_t K = static_cast<std::size_t>(cfg.num_classes);
    auto he = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    model.trunk.add("trunk.w1", Tensor::randn(f, cfg.trunk_hidden, he(f), rng));
    model.trunk.add("trunk.b1", Tensor::zeros(1, cfg.trunk_hidden));
    model.trunk.add("trunk.w2", Tensor::randn(cfg.trunk_hidden, K, he(cfg.trunk_hidden), rng));
    model.trunk.add("trunk.b2", Tensor::zeros(1, K));
    const std::size_t head_in = f + (cfg.uses_psi() ? cfg.d_psi : 0);
    model.head.add("defer.w1", Tensor::randn(head_in, cfg.head_hidden, he(head_in), rng));
    model.head.add("defer.b1", Tensor::zeros(1, cfg.head_hidden));
    model.head.add("defer.w2", Tensor::randn(cfg.head_hidden, 1, 0.1 * he(cfg.head_hidden), rng));
    model.head.add("defer.b2", Tensor::zeros(1, 1));
    return model;
}

// Class logits (n, K); independent of the expert embedding.
inline NodeId class_logits_graph(const DeferralModel& model, Tape& tape, Binder& trunk_bind,
                                 NodeId x) {
    const NodeId hid = tape.relu(
        tape.add_rowvec(tape.matmul(x, trunk_bind("trunk.w1")), trunk_bind("trunk.b1")));
    return tape.add_rowvec(tape.matmul(hid, trunk_bind("trunk.w2")), trunk_bind("trunk.b2"));
}

// Deferral logit column (n, 1). `psi` may be 0 for variants that ignore it.
inline NodeId deferral_logit_graph(const DeferralModel& model, Tape& tape, Binder& head_bind,
                                   NodeId x, NodeId psi) {
    const NodeId input = model.cfg.uses_psi() ? tape.concat_cols(x, psi) : x;
    const NodeId hid = tape.relu(
        tape.add_rowvec(tape.matmul(input, head_bind("defer.w1")), head_bind("defer.b1")));
    return tape.add_rowvec(tape.matmul(hid, head_bind("defer.w2")), head_bind("defer.b2"));
}

// All K+1 logits, deferral last.
inline NodeId l2d_logits_graph(const DeferralModel& model, Tape& tape, Binder& trunk_bind,
                               Binder& head_bind, NodeId x, NodeId psi) {
    return tape.concat_cols(class_logits_graph(model, tape, trunk_bind, x),
                            deferral_logit_graph(model, tape, head_bind, x, psi));
}

struct L2dOutput {
    std::vector<double> class_logits;
    double deferral_logit = 0.0;
};

inline L2dOutput l2d_forward(const DeferralModel& model, const std::vector<double>& features,
                             const ExpertEmbedding& psi) {
    Tape tape;
    Binder trunk_bind(tape, model.trunk, false);
    Binder head_bind(tape, model.head, false);
    const NodeId x = tape.constant(Tensor::row(features));
    NodeId psi_node = x;
    if (model.cfg.uses_psi()) {
        if (psi.psi.size() != model.cfg.d_psi)
            throw StructuralError("l2d_forward: embedding size " + std::to_string(psi.psi.size()) +
                                  ", expected " + std::to_string(model.cfg.d_psi));
        psi_node = tape.constant(Tensor::row(psi.psi));
    }
    const NodeId z = l2d_logits_graph(model, tape, trunk_bind, head_bind, x, psi_node);
    const Tensor& out = tape.value(z);
    out.require_finite("l2d logits");
    L2dOutput result;
    const std::size_t K = static_cast<std::size_t>(model.cfg.num_classes);
    result.class_logits.assign(out.raw(), out.raw() + K);
    result.deferral_logit = out.at(0, K);
    return result;
}

// Population-aware surrogate: -log(e^{g_y}/Z) - [m == y] log(e^{g_bot}/Z)
// with Z = e^{g_bot} + sum_k e^{g_k}; log-sum-exp stabilized throughout.
inline double surrogate_loss(const std::vector<double>& class_logits, double deferral_logit,
                             int truth, int expert_answer) {
    if (truth < 0 || truth >= static_cast<int>(class_logits.size()))
        throw StructuralError("surrogate_loss: true label out of range");
    std::vector<double> z = class_logits;
    z.push_back(deferral_logit);
    double loss = softmax_cross_entropy(z, static_cast<std::size_t>(truth));
    if (expert_answer == truth) loss += softmax_cross_entropy(z, z.size() - 1);
    return loss;
}

struct DeferralDecision {
    enum class Kind { Classify, Defer } kind = Kind::Classify;
    int class_index = -1;  // set when classifying
    int expert_id = -1;    // set when deferring, if the caller names the expert

    bool deferred() const { return kind == Kind::Defer; }
};

// Classify(argmax_k g_k) when the top class score strictly beats the
// deferral score; defer otherwise (ties defer). Argmax ties resolve to the
// lowest class index.
inline DeferralDecision decide(const std::vector<double>& class_logits, double deferral_logit,
                               int expert_id = -1) {
    if (class_logits.empty()) throw StructuralError("decide: no class logits");
    for (double v : class_logits)
        if (!std::isfinite(v)) throw NumericError("decide: non-finite class logit");
    if (!std::isfinite(deferral_logit)) throw NumericError("decide: non-finite deferral logit");
    std::size_t best = 0;
    for (std::size_t k = 1; k < class_logits.size(); ++k)
        if (class_logits[k] > class_logits[best]) best = k;
    DeferralDecision d;
    if (deferral_logit < class_logits[best]) {
        d.kind = DeferralDecision::Kind::Classify;
        d.class_index = static_cast<int>(best);
    } else {
        d.kind = DeferralDecision::Kind::Defer;
        d.expert_id = expert_id;
    }
    return d;
}

}  // namespace popdefer
