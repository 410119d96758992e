#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "popdefer/behavior.hpp"
#include "popdefer/dataset.hpp"
#include "popdefer/experts.hpp"
#include "popdefer/l2d.hpp"
#include "popdefer/optim.hpp"
#include "popdefer/pseudo_labels.hpp"

namespace popdefer {

// Where the expert annotations used as training supervision come from:
// the synthesized pseudo-label table, or the simulator itself (the oracle
// upper bound).
struct LabelSource {
    std::string name;
    std::function<int(const ExpertProfile&, const Instance&)> get;
};

inline LabelSource oracle_label_source() {
    return LabelSource{"oracle",
                       [](const ExpertProfile& e, const Instance& inst) { return expert_label(e, inst); }};
}

inline LabelSource pseudo_label_source(const PseudoLabelTable& table) {
    return LabelSource{"pseudo", [&table](const ExpertProfile& e, const Instance& inst) {
                           return table.at(e.id, inst.id).h_cat;
                       }};
}

// Expert embeddings for L2D training and inference, computed through the
// frozen behavior encoder. Context sets come from the same label source the
// training run is allowed to see.
class PsiProvider {
public:
    PsiProvider(const BehaviorModel* encoder, const LabelSource& source,
                std::vector<const Instance*> context_pool, std::size_t context_size,
                std::uint64_t seed)
        : encoder_(encoder), source_(source), context_pool_(std::move(context_pool)),
          context_size_(context_size), seed_(seed) {}

    // Embedding rows for a batch of queries, context resampled per call.
    Tensor rows(const ExpertProfile& expert, const Tensor& queries, std::uint64_t draw) const {
        if (!encoder_) throw StateError("psi requested for a variant without an encoder");
        const ContextSet ctx = sample_context_set(
            expert, context_pool_, context_size_, derive_seed(seed_, 0x951a, draw),
            [this](const ExpertProfile& e, const Instance& inst) { return source_.get(e, inst); });
        const Tensor encoded = encode_context(*encoder_, ctx);
        Tape tape;
        Binder bind(tape, encoder_->params, false);
        const NodeId q = tape.constant(queries);
        const NodeId enc = tape.constant(encoded);
        return tape.value(expert_embedding_graph(*encoder_, tape, bind, enc, q));
    }

private:
    const BehaviorModel* encoder_;
    LabelSource source_;
    std::vector<const Instance*> context_pool_;
    std::size_t context_size_;
    std::uint64_t seed_;
};

struct L2dTrainConfig {
    std::size_t epochs = 12;
    std::size_t batch = 64;
    std::size_t context_size = 50;  // B at L2D time
    AdamConfig adam{};
    std::uint64_t seed = 0;
};

// Surrogate loss over one batch as a tape subgraph: mean over rows of
// ce(z, y) + [m == y] * ce(z, defer-slot).
inline NodeId surrogate_batch_graph(const DeferralModel& model, Tape& tape, Binder& trunk_bind,
                                    Binder& head_bind, NodeId x, NodeId psi,
                                    const std::vector<int>& truths,
                                    const std::vector<int>& expert_answers) {
    const std::size_t n = truths.size();
    const std::size_t defer_slot = static_cast<std::size_t>(model.cfg.num_classes);
    const NodeId z = l2d_logits_graph(model, tape, trunk_bind, head_bind, x, psi);
    std::vector<std::size_t> truth_targets(n), defer_targets(n, defer_slot);
    std::vector<double> defer_mask(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        truth_targets[i] = static_cast<std::size_t>(truths[i]);
        if (expert_answers[i] == truths[i]) defer_mask[i] = 1.0;
    }
    const NodeId class_term = tape.ce_rows(z, truth_targets);
    const NodeId defer_term = tape.mul(tape.ce_rows(z, defer_targets),
                                       tape.constant(Tensor({n, 1}, std::move(defer_mask))));
    return tape.mean_all(tape.add(class_term, defer_term));
}

// System accuracy of a frozen model on a set of instances, one expert:
// classifier correctness on kept instances, simulator correctness on
// deferred ones.
inline double system_accuracy(const DeferralModel& model, const ExpertProfile& expert,
                              const std::vector<const Instance*>& instances,
                              const PsiProvider* psi_provider, std::uint64_t psi_draw) {
    if (instances.empty()) throw DataError("system_accuracy: no instances");
    std::vector<std::vector<double>> feats;
    for (const Instance* inst : instances) feats.push_back(inst->features);
    const Tensor queries = Tensor::stack_rows(feats);
    Tensor psi;
    if (model.cfg.uses_psi()) psi = psi_provider->rows(expert, queries, psi_draw);

    Tape tape;
    Binder trunk_bind(tape, model.trunk, false);
    Binder head_bind(tape, model.head, false);
    const NodeId x = tape.constant(queries);
    const NodeId psi_node = model.cfg.uses_psi() ? tape.constant(psi) : x;
    const Tensor& z = tape.value(l2d_logits_graph(model, tape, trunk_bind, head_bind, x, psi_node));

    const std::size_t K = static_cast<std::size_t>(model.cfg.num_classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        std::vector<double> g(z.raw() + i * (K + 1), z.raw() + i * (K + 1) + K);
        const DeferralDecision d = decide(g, z.at(i, K), expert.id);
        if (d.deferred()) {
            if (expert_label(expert, *instances[i]) == instances[i]->label) ++correct;
        } else if (d.class_index == instances[i]->label) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

// Minimizes the surrogate over the train split with the batch expert drawn
// uniformly from the training population. Returns per-epoch validation
// system accuracy (mean over the training experts).
inline std::vector<double> train_l2d(DeferralModel& model, const LabelSource& source,
                                     const std::vector<ExpertProfile>& experts,
                                     const DatasetSplit& data, const BehaviorModel* encoder,
                                     const L2dTrainConfig& cfg) {
    if (experts.empty()) throw ConfigError("train_l2d: empty training population");
    if (data.train.empty()) throw DataError("train_l2d: empty train split");
    if (model.cfg.uses_psi() && encoder == nullptr)
        throw ConfigError("train_l2d: population variant needs the frozen encoder");

    std::vector<const Instance*> train_pool;
    for (const Instance& inst : data.train) train_pool.push_back(&inst);
    // the label source must cover every (expert, train instance) pair
    for (const ExpertProfile& expert : experts)
        for (const Instance* inst : train_pool) (void)source.get(expert, *inst);

    const PsiProvider psi_provider(encoder, source, train_pool, cfg.context_size,
                                   derive_seed(cfg.seed, 0x9051));
    std::vector<const Instance*> val_pool;
    for (const Instance& inst : data.validation) val_pool.push_back(&inst);

    Rng rng(derive_seed(cfg.seed, 0x12d7));
    std::vector<std::size_t> order(train_pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> val_history;
    std::uint64_t draw = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            const ExpertProfile& expert =
                experts[static_cast<std::size_t>(rng.uniform_int(experts.size()))];
            std::vector<std::vector<double>> feats;
            std::vector<int> truths, answers;
            for (std::size_t i = start; i < end; ++i) {
                const Instance& inst = *train_pool[order[i]];
                feats.push_back(inst.features);
                truths.push_back(inst.label);
                answers.push_back(source.get(expert, inst));
            }
            const Tensor queries = Tensor::stack_rows(feats);
            Tensor psi;
            if (model.cfg.uses_psi()) psi = psi_provider.rows(expert, queries, draw);
            ++draw;

            Tape tape;
            Binder trunk_bind(tape, model.trunk, true);
            Binder head_bind(tape, model.head, true);
            const NodeId x = tape.constant(queries);
            const NodeId psi_node = model.cfg.uses_psi() ? tape.constant(psi) : x;
            const NodeId loss = surrogate_batch_graph(model, tape, trunk_bind, head_bind, x,
                                                      psi_node, truths, answers);
            tape.backward(loss);
            adam_step(model.trunk, trunk_bind.collect(), cfg.adam);
            adam_step(model.head, head_bind.collect(), cfg.adam);
        }
        if (!val_pool.empty()) {
            double acc = 0.0;
            for (const ExpertProfile& expert : experts)
                acc += system_accuracy(model, expert, val_pool, model.cfg.uses_psi() ? &psi_provider : nullptr,
                                       derive_seed(cfg.seed, 0x7a1d, epoch, static_cast<std::uint64_t>(expert.id)));
            val_history.push_back(acc / static_cast<double>(experts.size()));
        }
    }
    return val_history;
}

struct FinetuneConfig {
    std::size_t steps = 60;
    AdamConfig adam{1e-2, 0.9, 0.999, 1e-8};
};

// Per-expert adaptation of a trained Single-L2D model: copy it, then take
// full-batch steps on the expert's context triplets, updating the deferral
// head only.
inline DeferralModel finetune_variant(const DeferralModel& base, const ContextSet& ctx,
                                      const FinetuneConfig& cfg) {
    if (ctx.items.empty()) throw ConfigError("finetune_variant: empty context set");
    DeferralModel tuned;
    tuned.cfg = base.cfg;
    tuned.cfg.variant = L2dVariant::Finetune;
    tuned.trunk = base.trunk;
    tuned.head = base.head;
    tuned.head.reset_optimizer_state();

    std::vector<std::vector<double>> feats;
    std::vector<int> truths, answers;
    for (const ContextItem& item : ctx.items) {
        feats.push_back(item.features);
        truths.push_back(item.truth);
        answers.push_back(item.expert_answer);
    }
    const Tensor queries = Tensor::stack_rows(feats);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Binder trunk_bind(tape, tuned.trunk, false);  // trunk frozen
        Binder head_bind(tape, tuned.head, true);
        const NodeId x = tape.constant(queries);
        const NodeId loss =
            surrogate_batch_graph(tuned, tape, trunk_bind, head_bind, x, x, truths, answers);
        tape.backward(loss);
        adam_step(tuned.head, head_bind.collect(), cfg.adam);
    }
    return tuned;
}

// Loss of a model on a fixed context set; used to watch fine-tuning descend.
inline double context_surrogate_loss(const DeferralModel& model, const ContextSet& ctx) {
    std::vector<std::vector<double>> feats;
    std::vector<int> truths, answers;
    for (const ContextItem& item : ctx.items) {
        feats.push_back(item.features);
        truths.push_back(item.truth);
        answers.push_back(item.expert_answer);
    }
    Tape tape;
    Binder trunk_bind(tape, model.trunk, false);
    Binder head_bind(tape, model.head, false);
    const NodeId x = tape.constant(Tensor::stack_rows(feats));
    const NodeId loss = surrogate_batch_graph(model, tape, trunk_bind, head_bind, x, x, truths, answers);
    return tape.value(loss).scalar_value();
}

// ---- classifier-alone baseline: the same trunk trained with plain CE ----

inline Parameters make_classifier(std::size_t feature_dim, int num_classes, std::size_t hidden,
                                  std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xc1a5));
    Parameters p;
    auto he = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    p.add("trunk.w1", Tensor::randn(feature_dim, hidden, he(feature_dim), rng));
    p.add("trunk.b1", Tensor::zeros(1, hidden));
    p.add("trunk.w2", Tensor::randn(hidden, static_cast<std::size_t>(num_classes), he(hidden), rng));
    p.add("trunk.b2", Tensor::zeros(1, static_cast<std::size_t>(num_classes)));
    return p;
}

inline NodeId classifier_logits_graph(Tape& tape, Binder& bind, NodeId x) {
    const NodeId hid = tape.relu(tape.add_rowvec(tape.matmul(x, bind("trunk.w1")), bind("trunk.b1")));
    return tape.add_rowvec(tape.matmul(hid, bind("trunk.w2")), bind("trunk.b2"));
}

inline void train_classifier(Parameters& params, const DatasetSplit& data, std::size_t epochs,
                             std::size_t batch, const AdamConfig& adam, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xc1a6));
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(order.size(), start + batch);
            std::vector<std::vector<double>> feats;
            std::vector<std::size_t> targets;
            for (std::size_t i = start; i < end; ++i) {
                feats.push_back(data.train[order[i]].features);
                targets.push_back(static_cast<std::size_t>(data.train[order[i]].label));
            }
            Tape tape;
            Binder bind(tape, params, true);
            const NodeId logits = classifier_logits_graph(tape, bind, tape.constant(Tensor::stack_rows(feats)));
            const NodeId loss = tape.mean_all(tape.ce_rows(logits, targets));
            tape.backward(loss);
            adam_step(params, bind.collect(), adam);
        }
    }
}

inline double classifier_accuracy(const Parameters& params,
                                  const std::vector<const Instance*>& instances) {
    if (instances.empty()) throw DataError("classifier_accuracy: no instances");
    std::vector<std::vector<double>> feats;
    for (const Instance* inst : instances) feats.push_back(inst->features);
    Tape tape;
    Binder bind(tape, params, false);
    const Tensor& z = tape.value(classifier_logits_graph(tape, bind, tape.constant(Tensor::stack_rows(feats))));
    std::size_t correct = 0;
    const std::size_t K = z.cols();
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (static_cast<int>(argmax({z.raw() + i * K, K})) == instances[i]->label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

}  // namespace popdefer
