#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "popdefer/experts.hpp"
#include "popdefer/mathfn.hpp"
#include "popdefer/params.hpp"
#include "popdefer/tape.hpp"

namespace popdefer {

enum class EncoderVariant { NP, NPAttention };

inline std::string to_string(EncoderVariant v) {
    return v == EncoderVariant::NP ? "np" : "np_attention";
}

struct BehaviorConfig {
    EncoderVariant variant = EncoderVariant::NPAttention;
    std::size_t feature_dim = 0;
    int num_classes = 0;
    std::size_t d_psi = 64;   // expert embedding width; label tables use d_psi/2
    std::size_t heads = 4;    // attention heads (NPAttention only)
    std::size_t hidden = 64;  // width of the element MLP and the binary head
};

// Context-set encoder plus expert-correctness predictor, trained jointly.
// The NP variant aggregates the per-element representations with a mean and
// an MLP; NPAttention runs self-attention over the context and cross-attends
// the query onto it, so its embedding is query specific.
struct BehaviorModel {
    BehaviorConfig cfg;
    Parameters params;
};

struct ExpertEmbedding {
    std::vector<double> psi;
    int expert_id = -1;
    bool query_specific = false;
};

inline BehaviorModel make_behavior_model(const BehaviorConfig& cfg, std::uint64_t seed) {
    if (cfg.d_psi % 2 != 0) throw ConfigError("behavior model: d_psi must be even");
    if (cfg.variant == EncoderVariant::NPAttention && cfg.d_psi % cfg.heads != 0)
        throw ConfigError("behavior model: d_psi must be divisible by the head count");
    if (cfg.feature_dim == 0 || cfg.num_classes < 2)
        throw ConfigError("behavior model: feature_dim and num_classes must be set");

    BehaviorModel model;
    model.cfg = cfg;
    Rng rng(derive_seed(seed, 0xbe4a));
    const std::size_t f = cfg.feature_dim;
    const std::size_t d = cfg.d_psi;
    const std::size_t half = d / 2;
    const std::size_t K = static_cast<std::size_t>(cfg.num_classes);
    auto he = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    Parameters& p = model.params;
    p.add("embed.y", Tensor::randn(K, half, 0.5, rng));
    p.add("embed.h", Tensor::randn(K, half, 0.5, rng));
    p.add("enc.w1", Tensor::randn(f + d, cfg.hidden, he(f + d), rng));
    p.add("enc.b1", Tensor::zeros(1, cfg.hidden));
    p.add("enc.w2", Tensor::randn(cfg.hidden, d, he(cfg.hidden), rng));
    p.add("enc.b2", Tensor::zeros(1, d));
    if (cfg.variant == EncoderVariant::NPAttention) {
        const std::size_t dh = d / cfg.heads;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string sa = "selfattn." + std::to_string(h);
            p.add(sa + ".q", Tensor::randn(d, dh, he(d), rng));
            p.add(sa + ".k", Tensor::randn(d, dh, he(d), rng));
            p.add(sa + ".v", Tensor::randn(d, dh, he(d), rng));
            p.add(sa + ".o", Tensor::randn(dh, d, he(dh), rng));
            const std::string ca = "crossattn." + std::to_string(h);
            p.add(ca + ".q", Tensor::randn(f, dh, he(f), rng));
            p.add(ca + ".k", Tensor::randn(d, dh, he(d), rng));
            p.add(ca + ".v", Tensor::randn(d, dh, he(d), rng));
            p.add(ca + ".o", Tensor::randn(dh, d, he(dh), rng));
        }
    } else {
        p.add("agg.w1", Tensor::randn(d, cfg.hidden, he(d), rng));
        p.add("agg.b1", Tensor::zeros(1, cfg.hidden));
        p.add("agg.w2", Tensor::randn(cfg.hidden, d, he(cfg.hidden), rng));
        p.add("agg.b2", Tensor::zeros(1, d));
    }
    p.add("head.w1", Tensor::randn(f + d, cfg.hidden, he(f + d), rng));
    p.add("head.b1", Tensor::zeros(1, cfg.hidden));
    p.add("head.w2", Tensor::randn(cfg.hidden, 2, 0.1 * he(cfg.hidden), rng));
    p.add("head.b2", Tensor::zeros(1, 2));
    return model;
}

namespace detail {

inline NodeId multihead_attention(const BehaviorModel& model, Tape& tape, Binder& bind,
                                  const std::string& prefix, NodeId queries, NodeId keys_values) {
    const std::size_t dh = model.cfg.d_psi / model.cfg.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    NodeId out = 0;
    for (std::size_t h = 0; h < model.cfg.heads; ++h) {
        const std::string base = prefix + "." + std::to_string(h);
        const NodeId q = tape.matmul(queries, bind(base + ".q"));
        const NodeId k = tape.matmul(keys_values, bind(base + ".k"));
        const NodeId v = tape.matmul(keys_values, bind(base + ".v"));
        const NodeId attn = tape.row_softmax(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt));
        const NodeId mixed = tape.matmul(tape.matmul(attn, v), bind(base + ".o"));
        out = h == 0 ? mixed : tape.add(out, mixed);
    }
    return out;
}

inline NodeId mlp2(Tape& tape, Binder& bind, NodeId x, const std::string& prefix) {
    const NodeId hid =
        tape.relu(tape.add_rowvec(tape.matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
    return tape.add_rowvec(tape.matmul(hid, bind(prefix + ".w2")), bind(prefix + ".b2"));
}

}  // namespace detail

// Per-element representation MLP(concat(x_b, embed(y_b), embed(h_b))); the
// attention variant then lets the B elements attend to each other.
// Output: (B, d_psi), order matching the context order.
inline NodeId encode_context_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                                   const ContextSet& ctx) {
    if (ctx.items.empty()) throw DataError("encode_context: empty context set");
    std::vector<std::vector<double>> feats;
    std::vector<std::size_t> truth_idx, answer_idx;
    for (const ContextItem& item : ctx.items) {
        if (item.features.size() != model.cfg.feature_dim)
            throw StructuralError("encode_context: context feature dim " +
                                  std::to_string(item.features.size()) + ", model expects " +
                                  std::to_string(model.cfg.feature_dim));
        feats.push_back(item.features);
        truth_idx.push_back(static_cast<std::size_t>(item.truth));
        answer_idx.push_back(static_cast<std::size_t>(item.expert_answer));
    }
    const NodeId x = tape.constant(Tensor::stack_rows(feats));
    const NodeId ey = tape.gather_rows(bind("embed.y"), truth_idx);
    const NodeId eh = tape.gather_rows(bind("embed.h"), answer_idx);
    const NodeId joined = tape.concat_cols(x, tape.concat_cols(ey, eh));
    const NodeId encoded = detail::mlp2(tape, bind, joined, "enc");
    if (model.cfg.variant == EncoderVariant::NP) return encoded;
    const NodeId attended = detail::multihead_attention(model, tape, bind, "selfattn", encoded, encoded);
    return tape.add(encoded, attended);
}

// Expert embedding rows, one per query row. NP ignores the queries (mean
// pooled, aggregator MLP, broadcast); NPAttention cross-attends each query
// onto the encoded context.
inline NodeId expert_embedding_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                                     NodeId encoded_context, NodeId queries) {
    const std::size_t n_queries = tape.value(queries).rows();
    if (model.cfg.variant == EncoderVariant::NPAttention)
        return detail::multihead_attention(model, tape, bind, "crossattn", queries, encoded_context);
    const NodeId pooled = tape.mean_rows(encoded_context);
    const NodeId psi = detail::mlp2(tape, bind, pooled, "agg");
    if (n_queries == 1) return psi;
    return tape.matmul(tape.constant(Tensor::full(n_queries, 1, 1.0)), psi);
}

// Binary correctness logits (n, 2); column 1 is "expert answers correctly".
inline NodeId correctness_logits_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                                       NodeId queries, NodeId psi) {
    (void)model;
    return detail::mlp2(tape, bind, tape.concat_cols(queries, psi), "head");
}

// ---- value-level API (inference) ----

inline Tensor encode_context(const BehaviorModel& model, const ContextSet& ctx) {
    Tape tape;
    Binder bind(tape, model.params, false);
    return tape.value(encode_context_graph(model, tape, bind, ctx));
}

inline ExpertEmbedding expert_embedding(const BehaviorModel& model, const Tensor& encoded_context,
                                        const std::vector<double>& query_features,
                                        int expert_id = -1) {
    Tape tape;
    Binder bind(tape, model.params, false);
    const NodeId enc = tape.constant(encoded_context);
    const NodeId q = tape.constant(Tensor::row(query_features));
    const NodeId psi = expert_embedding_graph(model, tape, bind, enc, q);
    ExpertEmbedding out;
    out.psi = tape.value(psi).data();
    out.expert_id = expert_id;
    out.query_specific = model.cfg.variant == EncoderVariant::NPAttention;
    return out;
}

inline double predict_correctness(const BehaviorModel& model,
                                  const std::vector<double>& query_features,
                                  const ExpertEmbedding& psi) {
    Tape tape;
    Binder bind(tape, model.params, false);
    const NodeId q = tape.constant(Tensor::row(query_features));
    const NodeId e = tape.constant(Tensor::row(psi.psi));
    const NodeId logits = correctness_logits_graph(model, tape, bind, q, e);
    const Tensor& z = tape.value(logits);
    return softmax({z.data().data(), 2})[1];
}

// Probability that the expert labels each query row correctly, batched.
inline std::vector<double> predict_correctness_batch(const BehaviorModel& model,
                                                     const Tensor& queries,
                                                     const Tensor& encoded_context) {
    Tape tape;
    Binder bind(tape, model.params, false);
    const NodeId q = tape.constant(queries);
    const NodeId enc = tape.constant(encoded_context);
    const NodeId psi = expert_embedding_graph(model, tape, bind, enc, q);
    const NodeId logits = correctness_logits_graph(model, tape, bind, q, psi);
    const Tensor& z = tape.value(logits);
    std::vector<double> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r)
        out[r] = softmax({z.raw() + 2 * r, 2})[1];
    return out;
}

}  // namespace popdefer
