#pragma once

#include <cstdint>
#include <vector>

#include "popdefer/augment.hpp"
#include "popdefer/behavior.hpp"
#include "popdefer/dataset.hpp"
#include "popdefer/experts.hpp"
#include "popdefer/optim.hpp"

namespace popdefer {

struct SslConfig {
    double tau = 0.95;    // confidence threshold on the weak-view probability
    double lambda = 1.0;  // weight of the consistency term
    std::size_t steps = 400;
    std::size_t batch_sup = 32;
    std::size_t batch_unsup = 64;
    std::size_t context_size = 20;  // B at label-generation training time (2*K)
    double sigma_w = 0.0;           // weak noise, absolute (caller scales by feature RMS)
    double sigma_s = 0.0;           // strong noise, absolute
    double mask_frac = 0.2;
    AdamConfig adam{};
    std::uint64_t seed = 0;
    bool shared_batches = true;  // same query ids across experts within a step
};

// The deterministic sampling plan for one meta step: per expert a fresh
// context draw plus supervised/unsupervised query batches (indices into the
// annotated/unannotated pools).
struct StepPlan {
    std::vector<std::vector<std::size_t>> context_idx;
    std::vector<std::vector<std::size_t>> sup_idx;
    std::vector<std::vector<std::size_t>> unsup_idx;
    std::uint64_t aug_seed = 0;
};

inline StepPlan make_step_plan(std::size_t n_annotated, std::size_t n_unannotated,
                               std::size_t n_experts, const SslConfig& cfg, std::size_t step) {
    if (n_annotated == 0) throw ConfigError("behavior training: empty annotated pool");
    StepPlan plan;
    plan.aug_seed = derive_seed(cfg.seed, 0x0a96, step);
    const std::size_t b_sup = std::min(cfg.batch_sup, n_annotated);
    const std::size_t b_unsup = std::min(cfg.batch_unsup, n_unannotated);
    Rng shared(derive_seed(cfg.seed, 0x5a3b, step));
    const auto shared_sup = shared.sample_without_replacement(n_annotated, b_sup);
    const auto shared_unsup =
        b_unsup == 0 ? std::vector<std::size_t>{} : shared.sample_without_replacement(n_unannotated, b_unsup);
    for (std::size_t e = 0; e < n_experts; ++e) {
        Rng ctx_rng(derive_seed(cfg.seed, 0xc1d5, step, e));
        plan.context_idx.push_back(
            ctx_rng.sample_without_replacement(n_annotated, std::min(cfg.context_size, n_annotated)));
        if (cfg.shared_batches) {
            plan.sup_idx.push_back(shared_sup);
            plan.unsup_idx.push_back(shared_unsup);
        } else {
            Rng own(derive_seed(cfg.seed, 0xb17c, step, e));
            plan.sup_idx.push_back(own.sample_without_replacement(n_annotated, b_sup));
            plan.unsup_idx.push_back(
                b_unsup == 0 ? std::vector<std::size_t>{}
                             : own.sample_without_replacement(n_unannotated, b_unsup));
        }
    }
    return plan;
}

inline ContextSet context_from_indices(const ExpertProfile& expert,
                                       const std::vector<const Instance*>& pool,
                                       const std::vector<std::size_t>& idx) {
    ContextSet ctx;
    ctx.expert_id = expert.id;
    for (std::size_t i : idx) {
        const Instance& inst = *pool[i];
        ctx.items.push_back(ContextItem{inst.id, inst.features, inst.label, expert_label(expert, inst)});
    }
    return ctx;
}

// Supervised objective for one expert: mean cross-entropy between the binary
// correctness target and the prediction on the weakly augmented query,
// conditioned on the context embedding.
inline NodeId supervised_loss_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                                    const ContextSet& ctx,
                                    const std::vector<const Instance*>& batch,
                                    const std::vector<int>& binary_targets, double sigma_w,
                                    std::uint64_t aug_seed) {
    if (batch.empty()) throw ConfigError("supervised_loss: empty batch");
    if (batch.size() != binary_targets.size())
        throw StructuralError("supervised_loss: target count mismatch");
    std::vector<std::vector<double>> views;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        views.push_back(augment_weak(batch[i]->features, sigma_w,
                                     derive_seed(aug_seed, 0x3e1f, batch[i]->id)));
        targets.push_back(static_cast<std::size_t>(binary_targets[i]));
    }
    const NodeId queries = tape.constant(Tensor::stack_rows(views));
    const NodeId encoded = encode_context_graph(model, tape, bind, ctx);
    const NodeId psi = expert_embedding_graph(model, tape, bind, encoded, queries);
    const NodeId logits = correctness_logits_graph(model, tape, bind, queries, psi);
    return tape.mean_all(tape.ce_rows(logits, targets));
}

struct ConsistencyLoss {
    NodeId loss = 0;
    std::size_t confident = 0;
    std::vector<int> pseudo_labels;  // -1 where below threshold
};

// FixMatch-style consistency for one expert: confident weak-view predictions
// become hard pseudo-labels (no gradient), matched by the strong view. The
// sum is divided by the full batch size, not the confident count.
inline ConsistencyLoss consistency_loss_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                                              const ContextSet& ctx,
                                              const std::vector<const Instance*>& batch,
                                              double tau, double sigma_w, double sigma_s,
                                              double mask_frac, std::uint64_t aug_seed) {
    ConsistencyLoss out;
    if (batch.empty()) {
        out.loss = tape.leaf(Tensor::scalar(0.0), true);
        return out;
    }
    // weak pass: plain inference, pseudo-labels are gradient-detached
    std::vector<std::vector<double>> weak_views;
    for (const Instance* inst : batch)
        weak_views.push_back(
            augment_weak(inst->features, sigma_w, derive_seed(aug_seed, 0x3e1f, inst->id)));
    const Tensor encoded_value = [&] {
        Tape scratch;
        Binder inference(scratch, bind.params(), false);
        return scratch.value(encode_context_graph(model, scratch, inference, ctx));
    }();
    const std::vector<double> weak_p =
        predict_correctness_batch(model, Tensor::stack_rows(weak_views), encoded_value);

    std::vector<double> mask(batch.size(), 0.0);
    out.pseudo_labels.assign(batch.size(), -1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double confidence = std::max(weak_p[i], 1.0 - weak_p[i]);
        if (confidence >= tau) {
            mask[i] = 1.0;
            out.pseudo_labels[i] = weak_p[i] >= 0.5 ? 1 : 0;
            ++out.confident;
        }
    }
    if (out.confident == 0) {
        out.loss = tape.leaf(Tensor::scalar(0.0), true);
        return out;
    }

    std::vector<std::vector<double>> strong_views;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        strong_views.push_back(augment_strong(batch[i]->features, sigma_s, mask_frac,
                                              derive_seed(aug_seed, 0x57f0, batch[i]->id)));
        targets.push_back(out.pseudo_labels[i] < 0 ? 0 : static_cast<std::size_t>(out.pseudo_labels[i]));
    }
    const NodeId queries = tape.constant(Tensor::stack_rows(strong_views));
    const NodeId encoded = encode_context_graph(model, tape, bind, ctx);
    const NodeId psi = expert_embedding_graph(model, tape, bind, encoded, queries);
    const NodeId logits = correctness_logits_graph(model, tape, bind, queries, psi);
    const NodeId per_row = tape.ce_rows(logits, targets);
    const NodeId masked =
        tape.mul(per_row, tape.constant(Tensor({batch.size(), 1}, std::move(mask))));
    out.loss = tape.scale(tape.sum_all(masked), 1.0 / static_cast<double>(batch.size()));
    return out;
}

namespace detail_train {
inline std::vector<const Instance*> pick(const std::vector<const Instance*>& pool,
                                         const std::vector<std::size_t>& idx) {
    std::vector<const Instance*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(pool[i]);
    return out;
}
}  // namespace detail_train

// The meta objective for one step: sum over experts of L_s + lambda * L_u on
// the step's sampled batches.
inline NodeId meta_loss_graph(const BehaviorModel& model, Tape& tape, Binder& bind,
                              const std::vector<ExpertProfile>& experts,
                              const std::vector<const Instance*>& annotated_pool,
                              const std::vector<const Instance*>& unannotated_pool,
                              const SslConfig& cfg, const StepPlan& plan) {
    if (experts.empty()) throw ConfigError("meta step: empty expert population");
    NodeId total = 0;
    bool first = true;
    for (std::size_t e = 0; e < experts.size(); ++e) {
        const ContextSet ctx = context_from_indices(experts[e], annotated_pool, plan.context_idx[e]);
        const auto sup_batch = detail_train::pick(annotated_pool, plan.sup_idx[e]);
        std::vector<int> targets;
        targets.reserve(sup_batch.size());
        for (const Instance* inst : sup_batch)
            targets.push_back(binary_target(inst->label, expert_label(experts[e], *inst)));
        NodeId expert_loss = supervised_loss_graph(model, tape, bind, ctx, sup_batch, targets,
                                                   cfg.sigma_w, plan.aug_seed);
        if (cfg.lambda > 0.0 && !plan.unsup_idx[e].empty()) {
            const auto unsup_batch = detail_train::pick(unannotated_pool, plan.unsup_idx[e]);
            const ConsistencyLoss cons =
                consistency_loss_graph(model, tape, bind, ctx, unsup_batch, cfg.tau, cfg.sigma_w,
                                       cfg.sigma_s, cfg.mask_frac, plan.aug_seed);
            expert_loss = tape.add(expert_loss, tape.scale(cons.loss, cfg.lambda));
        }
        total = first ? expert_loss : tape.add(total, expert_loss);
        first = false;
    }
    return total;
}

struct MetaStepResult {
    double loss = 0.0;
};

inline MetaStepResult meta_step(BehaviorModel& model, const std::vector<ExpertProfile>& experts,
                                const DatasetSplit& data, const SslConfig& cfg, std::size_t step) {
    const auto annotated = data.annotated_train();
    const auto unannotated = data.unannotated_train();
    const StepPlan plan =
        make_step_plan(annotated.size(), unannotated.size(), experts.size(), cfg, step);
    Tape tape;
    Binder bind(tape, model.params, true);
    const NodeId loss = meta_loss_graph(model, tape, bind, experts, annotated, unannotated, cfg, plan);
    tape.backward(loss);
    Gradients grads = bind.collect();
    // parameters a step never touched (e.g. unused label rows) get zero grads
    for (const auto& [name, value] : model.params.values())
        if (!grads.count(name))
            grads.emplace(name, Tensor(value.shape(), std::vector<double>(value.numel(), 0.0)));
    adam_step(model.params, grads, cfg.adam);
    return MetaStepResult{tape.value(loss).scalar_value()};
}

struct BehaviorTrainLog {
    std::vector<double> loss_per_step;
};

inline BehaviorTrainLog train_behavior(BehaviorModel& model,
                                       const std::vector<ExpertProfile>& experts,
                                       const DatasetSplit& data, const SslConfig& cfg) {
    BehaviorTrainLog log;
    log.loss_per_step.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step)
        log.loss_per_step.push_back(meta_step(model, experts, data, cfg, step).loss);
    return log;
}

// Held-out binary accuracy: predict correctness for every (expert, instance)
// pair and compare against the simulator's truth.
inline double behavior_binary_accuracy(const BehaviorModel& model,
                                       const std::vector<ExpertProfile>& experts,
                                       const std::vector<const Instance*>& eval_instances,
                                       const std::vector<const Instance*>& context_pool,
                                       std::size_t context_size, std::uint64_t seed) {
    if (experts.empty() || eval_instances.empty())
        throw ConfigError("behavior_binary_accuracy: nothing to evaluate");
    std::vector<std::vector<double>> feats;
    for (const Instance* inst : eval_instances) feats.push_back(inst->features);
    const Tensor queries = Tensor::stack_rows(feats);
    std::size_t correct = 0;
    for (const ExpertProfile& expert : experts) {
        const ContextSet ctx = sample_context_set(expert, context_pool, context_size,
                                                  derive_seed(seed, 0xeba1, expert.id));
        const Tensor encoded = encode_context(model, ctx);
        const std::vector<double> p = predict_correctness_batch(model, queries, encoded);
        for (std::size_t i = 0; i < eval_instances.size(); ++i) {
            const int predicted = p[i] >= 0.5 ? 1 : 0;
            const int actual =
                binary_target(eval_instances[i]->label, expert_label(expert, *eval_instances[i]));
            if (predicted == actual) ++correct;
        }
    }
    return static_cast<double>(correct) /
           static_cast<double>(experts.size() * eval_instances.size());
}

}  // namespace popdefer
