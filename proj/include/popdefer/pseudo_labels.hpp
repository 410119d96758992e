#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "popdefer/behavior.hpp"
#include "popdefer/dataset.hpp"
#include "popdefer/experts.hpp"

namespace popdefer {

struct PseudoLabel {
    int h_bin = 0;  // predicted binary correctness
    int h_cat = 0;  // categorical label: ground truth iff h_bin == 1
};

// Synthesized annotations for every (expert, instance) pair.
class PseudoLabelTable {
public:
    using Key = std::pair<int, int>;  // (expert_id, instance_id)

    void put(int expert_id, int instance_id, PseudoLabel label) {
        entries_[Key{expert_id, instance_id}] = label;
    }

    const PseudoLabel& at(int expert_id, int instance_id) const {
        const auto it = entries_.find(Key{expert_id, instance_id});
        if (it == entries_.end())
            throw DataError("pseudo-label table has no entry for expert " +
                            std::to_string(expert_id) + ", instance " +
                            std::to_string(instance_id));
        return it->second;
    }

    bool contains(int expert_id, int instance_id) const {
        return entries_.count(Key{expert_id, instance_id}) != 0;
    }

    std::size_t size() const { return entries_.size(); }
    const std::map<Key, PseudoLabel>& entries() const { return entries_; }

private:
    std::map<Key, PseudoLabel> entries_;
};

// Predicted correctness via the argmax of the binary head, then the
// categorical label: the ground truth when predicted correct, otherwise a
// seeded uniform draw over the wrong classes.
inline PseudoLabelTable generate_pseudo_labels(const BehaviorModel& model,
                                               const std::vector<ExpertProfile>& experts,
                                               const std::vector<const Instance*>& instances,
                                               const std::map<int, ContextSet>& contexts,
                                               std::uint64_t seed) {
    if (instances.empty()) throw ConfigError("generate_pseudo_labels: no instances");
    PseudoLabelTable table;
    std::vector<std::vector<double>> feats;
    feats.reserve(instances.size());
    for (const Instance* inst : instances) feats.push_back(inst->features);

    constexpr std::size_t kChunk = 256;
    for (const ExpertProfile& expert : experts) {
        const auto ctx_it = contexts.find(expert.id);
        if (ctx_it == contexts.end())
            throw ConfigError("generate_pseudo_labels: missing context set for expert " +
                              std::to_string(expert.id));
        const Tensor encoded = encode_context(model, ctx_it->second);
        for (std::size_t start = 0; start < instances.size(); start += kChunk) {
            const std::size_t end = std::min(instances.size(), start + kChunk);
            std::vector<std::vector<double>> chunk(feats.begin() + static_cast<long>(start),
                                                   feats.begin() + static_cast<long>(end));
            const std::vector<double> p =
                predict_correctness_batch(model, Tensor::stack_rows(chunk), encoded);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const Instance& inst = *instances[start + i];
                PseudoLabel label;
                label.h_bin = p[i] >= 0.5 ? 1 : 0;
                if (label.h_bin == 1) {
                    label.h_cat = inst.label;
                } else {
                    Rng rng(derive_seed(seed, 0x9cad, static_cast<std::uint64_t>(expert.id),
                                        static_cast<std::uint64_t>(inst.id)));
                    const int r = static_cast<int>(
                        rng.uniform_int(static_cast<std::uint64_t>(expert.num_classes - 1)));
                    label.h_cat = r >= inst.label ? r + 1 : r;
                }
                table.put(expert.id, inst.id, label);
            }
        }
    }
    return table;
}

// Export format: header then one `expert_id,instance_id,h_bin,h_cat` row per
// entry, ordered by (expert, instance).
inline void export_pseudo_labels(const std::string& path, const PseudoLabelTable& table) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open pseudo-label file for writing: " + path);
    os << "expert_id,instance_id,h_bin,h_cat\n";
    for (const auto& [key, label] : table.entries())
        os << key.first << "," << key.second << "," << label.h_bin << "," << label.h_cat << "\n";
    if (!os) throw DataError("write failed for pseudo-label file: " + path);
}

inline PseudoLabelTable load_pseudo_labels(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open pseudo-label file: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "expert_id,instance_id,h_bin,h_cat")
        throw ParseError(path + ": bad header");
    PseudoLabelTable table;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++row;
        int expert = 0, inst = 0;
        PseudoLabel label;
        if (std::sscanf(line.c_str(), "%d,%d,%d,%d", &expert, &inst, &label.h_bin, &label.h_cat) != 4)
            throw ParseError(path + ": row " + std::to_string(row) + ": malformed entry");
        if (label.h_bin != 0 && label.h_bin != 1)
            throw ParseError(path + ": row " + std::to_string(row) + ": h_bin must be 0 or 1");
        table.put(expert, inst, label);
    }
    return table;
}

}  // namespace popdefer
