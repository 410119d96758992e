#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <vector>

#include "popdefer/dataset.hpp"
#include "popdefer/error.hpp"
#include "popdefer/rng.hpp"

namespace popdefer {

// Simulated annotator: perfect on its oracle classes, uniformly wrong
// elsewhere. The per-expert seed makes the wrong answers a pure function of
// (expert, instance), so repeated queries never disagree.
struct ExpertProfile {
    int id = 0;
    std::vector<int> oracle_set;  // sorted class indices, |oracle_set| = H
    std::uint64_t seed = 0;
    int num_classes = 0;

    bool knows(int label) const {
        return std::binary_search(oracle_set.begin(), oracle_set.end(), label);
    }
};

// Expert m's oracle set is {(m*stride + j) mod K : j = 0..H-1}: cyclic
// generation with controlled overlap between consecutive experts.
inline std::vector<ExpertProfile> build_population(int num_experts, int num_classes, int strength,
                                                   int stride, std::uint64_t base_seed) {
    if (num_experts < 1) throw ConfigError("build_population: need at least one expert");
    if (strength < 1 || strength > num_classes)
        throw ConfigError("build_population: oracle set size must lie in [1, K]");
    std::vector<ExpertProfile> population;
    population.reserve(static_cast<std::size_t>(num_experts));
    for (int m = 0; m < num_experts; ++m) {
        ExpertProfile p;
        p.id = m;
        p.num_classes = num_classes;
        p.seed = derive_seed(base_seed, 0xe0e0, static_cast<std::uint64_t>(m));
        for (int j = 0; j < strength; ++j) {
            long c = (static_cast<long>(m) * stride + j) % num_classes;
            if (c < 0) c += num_classes;
            p.oracle_set.push_back(static_cast<int>(c));
        }
        std::sort(p.oracle_set.begin(), p.oracle_set.end());
        p.oracle_set.erase(std::unique(p.oracle_set.begin(), p.oracle_set.end()),
                           p.oracle_set.end());
        population.push_back(std::move(p));
    }
    return population;
}

// The expert's answer for one instance. Pure in (profile, instance).
inline int expert_label(const ExpertProfile& profile, const Instance& inst) {
    if (inst.label < 0 || inst.label >= profile.num_classes)
        throw DataError("expert_label: instance label out of range");
    if (profile.knows(inst.label)) return inst.label;
    Rng rng(derive_seed(profile.seed, 0x1abe, static_cast<std::uint64_t>(inst.id)));
    // uniform over the K-1 incorrect options
    const int r = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(profile.num_classes - 1)));
    return r >= inst.label ? r + 1 : r;
}

inline int binary_target(int truth, int expert_answer) { return expert_answer == truth ? 1 : 0; }

struct ContextItem {
    int instance_id = 0;
    std::vector<double> features;
    int truth = 0;
    int expert_answer = 0;
};

// B demonstration triplets (x_b, y_b, h_b) for one expert.
struct ContextSet {
    int expert_id = 0;
    std::vector<ContextItem> items;

    std::size_t size() const { return items.size(); }
};

using LabelFn = std::function<int(const ExpertProfile&, const Instance&)>;

// Samples B distinct pool instances without replacement and labels them.
// `label_fn` defaults to the simulator; training-time callers can substitute
// a pseudo-label lookup.
inline ContextSet sample_context_set(const ExpertProfile& profile,
                                     const std::vector<const Instance*>& pool, std::size_t size,
                                     std::uint64_t seed, const LabelFn& label_fn = expert_label) {
    if (pool.size() < size)
        throw DataError("sample_context_set: pool of " + std::to_string(pool.size()) +
                        " cannot supply " + std::to_string(size) + " distinct instances");
    Rng rng(derive_seed(seed, 0xc0e7, static_cast<std::uint64_t>(profile.id)));
    ContextSet ctx;
    ctx.expert_id = profile.id;
    for (std::size_t i : rng.sample_without_replacement(pool.size(), size)) {
        const Instance& inst = *pool[i];
        ctx.items.push_back(ContextItem{inst.id, inst.features, inst.label, label_fn(profile, inst)});
    }
    return ctx;
}

}  // namespace popdefer
