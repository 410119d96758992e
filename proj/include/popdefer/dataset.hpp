#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "popdefer/error.hpp"
#include "popdefer/rng.hpp"
#include "popdefer/tensor.hpp"

namespace popdefer {

// One data point of the ground-truth dataset.
struct Instance {
    int id = 0;
    std::vector<double> features;
    int label = 0;
};

// Train/validation/test partition plus the annotated/unannotated split of
// the train ids. Immutable by convention once handed to a trainer.
struct DatasetSplit {
    std::vector<Instance> train;
    std::vector<Instance> validation;
    std::vector<Instance> test;
    std::set<int> annotated_ids;    // D^l
    std::set<int> unannotated_ids;  // D^u
    int num_classes = 0;
    std::size_t feature_dim = 0;

    std::size_t annotated_count() const { return annotated_ids.size(); }

    // The partition invariant: annotated and unannotated are disjoint and
    // together cover exactly the train ids.
    void check_partition() const {
        if (annotated_ids.size() + unannotated_ids.size() != train.size())
            throw StructuralError("annotated/unannotated sizes do not sum to train size");
        for (const Instance& inst : train) {
            const bool a = annotated_ids.count(inst.id) != 0;
            const bool u = unannotated_ids.count(inst.id) != 0;
            if (a == u)
                throw StructuralError("train id " + std::to_string(inst.id) +
                                      " must be in exactly one of annotated/unannotated");
        }
    }

    std::vector<const Instance*> annotated_train() const { return select(train, annotated_ids); }
    std::vector<const Instance*> unannotated_train() const { return select(train, unannotated_ids); }

private:
    static std::vector<const Instance*> select(const std::vector<Instance>& pool,
                                               const std::set<int>& ids) {
        std::vector<const Instance*> out;
        out.reserve(ids.size());
        for (const Instance& inst : pool)
            if (ids.count(inst.id)) out.push_back(&inst);
        return out;
    }
};

inline Tensor stack_features(const std::vector<const Instance*>& insts) {
    std::vector<std::vector<double>> rows;
    rows.reserve(insts.size());
    for (const Instance* p : insts) rows.push_back(p->features);
    return Tensor::stack_rows(rows);
}

// Stratified 80/10/10 split; all train ids start unannotated.
inline DatasetSplit make_split(std::vector<Instance> instances, int num_classes,
                               std::uint64_t seed) {
    if (instances.empty()) throw DataError("make_split: empty instance list");
    const std::size_t f = instances.front().features.size();
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const Instance& inst = instances[i];
        if (inst.label < 0 || inst.label >= num_classes)
            throw DataError("make_split: label " + std::to_string(inst.label) +
                            " out of range for " + std::to_string(num_classes) + " classes");
        if (inst.features.size() != f)
            throw DataError("make_split: inconsistent feature dimension at id " +
                            std::to_string(inst.id));
        by_class[inst.label].push_back(i);
    }
    DatasetSplit split;
    split.num_classes = num_classes;
    split.feature_dim = f;
    Rng rng(derive_seed(seed, 0x5b17));
    for (auto& [label, idx] : by_class) {
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        const std::size_t n_val = n / 10;
        const std::size_t n_test = n / 10;
        const std::size_t n_train = n - n_val - n_test;
        for (std::size_t i = 0; i < n; ++i) {
            const Instance& inst = instances[idx[i]];
            if (i < n_train)
                split.train.push_back(inst);
            else if (i < n_train + n_val)
                split.validation.push_back(inst);
            else
                split.test.push_back(inst);
        }
    }
    for (const Instance& inst : split.train) split.unannotated_ids.insert(inst.id);
    split.check_partition();
    return split;
}

// Class-conditional Gaussian clusters: unit-norm random centers, isotropic
// noise of standard deviation `spread`. Larger spread means more class
// overlap, which is what keeps the downstream classifier fallible.
inline DatasetSplit make_synthetic_dataset(std::uint64_t seed, int num_classes,
                                           std::size_t feature_dim, std::size_t per_class,
                                           double spread) {
    if (num_classes < 2) throw ConfigError("make_synthetic_dataset: need at least 2 classes");
    if (per_class < 10) throw ConfigError("make_synthetic_dataset: per_class must be >= 10");
    if (spread <= 0.0) throw ConfigError("make_synthetic_dataset: spread must be positive");
    Rng rng(derive_seed(seed, 0xda7a));
    std::vector<std::vector<double>> centers(static_cast<std::size_t>(num_classes));
    for (auto& c : centers) {
        c.resize(feature_dim);
        double norm2 = 0.0;
        for (double& v : c) {
            v = rng.gauss();
            norm2 += v * v;
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (double& v : c) v *= inv;
    }
    std::vector<Instance> instances;
    instances.reserve(static_cast<std::size_t>(num_classes) * per_class);
    int next_id = 0;
    for (int label = 0; label < num_classes; ++label) {
        for (std::size_t i = 0; i < per_class; ++i) {
            Instance inst;
            inst.id = next_id++;
            inst.label = label;
            inst.features.resize(feature_dim);
            for (std::size_t d = 0; d < feature_dim; ++d)
                inst.features[d] = centers[static_cast<std::size_t>(label)][d] + spread * rng.gauss();
            instances.push_back(std::move(inst));
        }
    }
    return make_split(std::move(instances), num_classes, derive_seed(seed, 0x5b71));
}

// Marks k train instances per class as annotated (D^l); the rest form D^u.
inline void select_annotated(DatasetSplit& split, std::size_t per_class_k, std::uint64_t seed) {
    std::map<int, std::vector<int>> train_ids_by_class;
    for (const Instance& inst : split.train) train_ids_by_class[inst.label].push_back(inst.id);
    for (int c = 0; c < split.num_classes; ++c) {
        const auto it = train_ids_by_class.find(c);
        const std::size_t avail = it == train_ids_by_class.end() ? 0 : it->second.size();
        if (avail < per_class_k)
            throw ConfigError("annotation budget k=" + std::to_string(per_class_k) +
                              " exceeds the " + std::to_string(avail) +
                              " train instances of class " + std::to_string(c));
    }
    split.annotated_ids.clear();
    split.unannotated_ids.clear();
    Rng rng(derive_seed(seed, 0xa22a));
    for (auto& [label, ids] : train_ids_by_class) {
        rng.shuffle(ids);
        for (std::size_t i = 0; i < per_class_k; ++i) split.annotated_ids.insert(ids[i]);
    }
    for (const Instance& inst : split.train)
        if (!split.annotated_ids.count(inst.id)) split.unannotated_ids.insert(inst.id);
    split.check_partition();
}

// RMS of the train-split feature values; augmentation noise scales off this.
inline double feature_scale(const DatasetSplit& split) {
    double sum2 = 0.0;
    std::size_t n = 0;
    for (const Instance& inst : split.train) {
        for (double v : inst.features) sum2 += v * v;
        n += inst.features.size();
    }
    if (n == 0) throw DataError("feature_scale: empty train split");
    return std::sqrt(sum2 / static_cast<double>(n));
}

// ---- feature file format ----
// UTF-8 text. Line 1: "fdim=<f>,classes=<K>". Then one instance per row:
// "id,label,v1,...,vf". Ids must equal the 0-based row order. Values are
// written with 17 significant digits so export -> ingest is lossless.

struct IngestedFeatures {
    std::vector<Instance> instances;
    int num_classes = 0;
    std::size_t feature_dim = 0;
};

inline void export_feature_file(const std::string& path, const std::vector<Instance>& instances,
                                int num_classes, std::size_t feature_dim) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open feature file for writing: " + path);
    os << "fdim=" << feature_dim << ",classes=" << num_classes << "\n";
    char buf[40];
    for (const Instance& inst : instances) {
        os << inst.id << "," << inst.label;
        for (double v : inst.features) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << "," << buf;
        }
        os << "\n";
    }
    if (!os) throw DataError("write failed for feature file: " + path);
}

inline void export_feature_file(const std::string& path, const DatasetSplit& split) {
    std::vector<Instance> all;
    all.reserve(split.train.size() + split.validation.size() + split.test.size());
    for (const auto* part : {&split.train, &split.validation, &split.test})
        all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end(), [](const Instance& a, const Instance& b) { return a.id < b.id; });
    export_feature_file(path, all, split.num_classes, split.feature_dim);
}

inline IngestedFeatures ingest_feature_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open feature file: " + path);
    std::string header;
    if (!std::getline(is, header)) throw ParseError(path + ": missing header line");
    std::size_t fdim = 0;
    int classes = 0;
    if (std::sscanf(header.c_str(), "fdim=%zu,classes=%d", &fdim, &classes) != 2 || fdim == 0 ||
        classes < 2)
        throw ParseError(path + ": malformed header '" + header + "'");

    IngestedFeatures out;
    out.num_classes = classes;
    out.feature_dim = fdim;
    std::string line;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++row;
        const std::string where = path + ": row " + std::to_string(row);
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != fdim + 2)
            throw ParseError(where + ": expected " + std::to_string(fdim + 2) + " fields, found " +
                             std::to_string(fields.size()));
        Instance inst;
        try {
            std::size_t pos = 0;
            inst.id = std::stoi(fields[0], &pos);
            if (pos != fields[0].size()) throw std::invalid_argument("trailing characters");
            inst.label = std::stoi(fields[1], &pos);
            if (pos != fields[1].size()) throw std::invalid_argument("trailing characters");
            inst.features.resize(fdim);
            for (std::size_t i = 0; i < fdim; ++i) {
                inst.features[i] = std::stod(fields[i + 2], &pos);
                if (pos != fields[i + 2].size()) throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw ParseError(where + ": unparsable numeric field");
        }
        if (inst.id != static_cast<int>(row - 1))
            throw ParseError(where + ": id " + std::to_string(inst.id) +
                             " does not match row order (expected " + std::to_string(row - 1) + ")");
        if (inst.label < 0 || inst.label >= classes)
            throw ParseError(where + ": label " + std::to_string(inst.label) +
                             " out of range for " + std::to_string(classes) + " classes");
        if (!Tensor::row(inst.features).all_finite())
            throw ParseError(where + ": non-finite feature value");
        out.instances.push_back(std::move(inst));
    }
    if (out.instances.empty()) throw ParseError(path + ": no instance rows");
    return out;
}

inline DatasetSplit ingest_dataset(const std::string& path, std::uint64_t seed) {
    IngestedFeatures in = ingest_feature_file(path);
    return make_split(std::move(in.instances), in.num_classes, seed);
}

}  // namespace popdefer
