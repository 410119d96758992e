#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "popdefer/augment.hpp"
#include "popdefer/backbone.hpp"
#include "popdefer/dataset.hpp"

using namespace popdefer;

namespace {

// Independent linear-probe oracle: ridge least squares to one-hot targets,
// solved by Gaussian elimination. Measures how separable a dataset is.
double linear_probe_accuracy(const DatasetSplit& ds) {
    const std::size_t f = ds.feature_dim;
    const std::size_t d = f + 1;  // affine feature
    const std::size_t K = static_cast<std::size_t>(ds.num_classes);
    std::vector<double> A(d * d, 0.0), B(d * K, 0.0);
    std::vector<double> phi(d, 1.0);
    for (const Instance& inst : ds.train) {
        for (std::size_t i = 0; i < f; ++i) phi[i] = inst.features[i];
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) A[i * d + j] += phi[i] * phi[j];
            B[i * K + static_cast<std::size_t>(inst.label)] += phi[i];
        }
    }
    for (std::size_t i = 0; i < d; ++i) A[i * d + i] += 1e-3;

    // Gauss-Jordan with partial pivoting on [A | B].
    for (std::size_t col = 0; col < d; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < d; ++r)
            if (std::fabs(A[r * d + col]) > std::fabs(A[piv * d + col])) piv = r;
        if (piv != col) {
            for (std::size_t j = 0; j < d; ++j) std::swap(A[col * d + j], A[piv * d + j]);
            for (std::size_t j = 0; j < K; ++j) std::swap(B[col * K + j], B[piv * K + j]);
        }
        const double diag = A[col * d + col];
        for (std::size_t r = 0; r < d; ++r) {
            if (r == col) continue;
            const double factor = A[r * d + col] / diag;
            if (factor == 0.0) continue;
            for (std::size_t j = col; j < d; ++j) A[r * d + j] -= factor * A[col * d + j];
            for (std::size_t j = 0; j < K; ++j) B[r * K + j] -= factor * B[col * K + j];
        }
    }
    std::vector<double> W(d * K);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < K; ++j) W[i * K + j] = B[i * K + j] / A[i * d + i];

    std::size_t correct = 0;
    for (const Instance& inst : ds.test) {
        for (std::size_t i = 0; i < f; ++i) phi[i] = inst.features[i];
        phi[f] = 1.0;
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += phi[i] * W[i * K + k];
            if (s > best_score) {
                best_score = s;
                best = k;
            }
        }
        if (static_cast<int>(best) == inst.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.test.size());
}

}  // namespace

TEST_CASE("synthetic dataset: shape, determinism, partition") {
    const DatasetSplit a = make_synthetic_dataset(7, 10, 16, 200, 0.38);
    CHECK(a.train.size() == 1600);
    CHECK(a.validation.size() == 200);
    CHECK(a.test.size() == 200);
    CHECK(a.feature_dim == 16);
    CHECK(a.num_classes == 10);
    a.check_partition();
    CHECK(a.annotated_ids.empty());
    CHECK(a.unannotated_ids.size() == 1600);

    const DatasetSplit b = make_synthetic_dataset(7, 10, 16, 200, 0.38);
    REQUIRE(b.train.size() == a.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].id == b.train[i].id);
        CHECK(a.train[i].label == b.train[i].label);
        CHECK(a.train[i].features == b.train[i].features);
    }

    CHECK_THROWS_AS(make_synthetic_dataset(7, 10, 16, 200, 0.0), ConfigError);
    CHECK_THROWS_AS(make_synthetic_dataset(7, 10, 16, 200, -1.0), ConfigError);
    CHECK_THROWS_AS(make_synthetic_dataset(7, 1, 16, 200, 1.0), ConfigError);
    CHECK_THROWS_AS(make_synthetic_dataset(7, 10, 16, 5, 1.0), ConfigError);
}

TEST_CASE("default spread keeps a linear probe in the fallible band") {
    const DatasetSplit ds = make_synthetic_dataset(7, 10, 16, 200, 0.38);
    const double acc = linear_probe_accuracy(ds);
    INFO("linear probe accuracy " << acc);
    CHECK(acc >= 0.70);
    CHECK(acc <= 0.85);
}

TEST_CASE("near-zero spread is trivially separable") {
    const DatasetSplit ds = make_synthetic_dataset(3, 2, 8, 50, 1e-4);
    CHECK(linear_probe_accuracy(ds) == 1.0);
}

TEST_CASE("select_annotated draws k per class and keeps the partition") {
    DatasetSplit ds = make_synthetic_dataset(11, 10, 16, 100, 0.38);
    select_annotated(ds, 4, 99);
    CHECK(ds.annotated_ids.size() == 40);
    CHECK(ds.unannotated_ids.size() == ds.train.size() - 40);
    ds.check_partition();

    std::map<int, int> per_class;
    for (const Instance* inst : ds.annotated_train()) ++per_class[inst->label];
    for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 4);

    CHECK_THROWS_AS(select_annotated(ds, 1000, 99), ConfigError);
}

TEST_CASE("weak augmentation: identity at zero, deterministic, right magnitude") {
    std::vector<double> x = {1.0, -2.0, 0.5, 3.0, -0.25, 1.5, 0.0, 2.0};
    CHECK(augment_weak(x, 0.0, 123) == x);
    CHECK(augment_weak(x, 0.1, 42) == augment_weak(x, 0.1, 42));
    CHECK(augment_weak(x, 0.1, 42) != augment_weak(x, 0.1, 43));

    // Monte-Carlo oracle: mean ||aug - x|| / ||x|| ~= sigma*sqrt(f)/||x||.
    const double sigma = 0.05;
    const std::size_t f = x.size();
    double xn = 0.0;
    for (double v : x) xn += v * v;
    xn = std::sqrt(xn);
    double acc = 0.0;
    for (int rep = 0; rep < 10000; ++rep) {
        const auto y = augment_weak(x, sigma, 1000 + static_cast<std::uint64_t>(rep));
        double d = 0.0;
        for (std::size_t i = 0; i < f; ++i) d += (y[i] - x[i]) * (y[i] - x[i]);
        acc += std::sqrt(d) / xn;
    }
    acc /= 10000.0;
    const double expected = sigma * std::sqrt(static_cast<double>(f)) / xn;
    CHECK(std::abs(acc - expected) / expected < 0.05);
}

TEST_CASE("strong augmentation: identity, mask count, mask uniformity") {
    std::vector<double> x(10);
    for (std::size_t i = 0; i < 10; ++i) x[i] = 1.0 + static_cast<double>(i);
    CHECK(augment_strong(x, 0.0, 0.0, 5) == x);
    CHECK_THROWS_AS(augment_strong(x, 0.1, 1.0, 5), ConfigError);
    CHECK_THROWS_AS(augment_strong(x, 0.1, -0.1, 5), ConfigError);

    // mask 0.2 of f=10 -> exactly 2 zeroed coordinates
    std::vector<std::size_t> counts(10, 0);
    for (int rep = 0; rep < 10000; ++rep) {
        const auto y = augment_strong(x, 0.0, 0.2, 500 + static_cast<std::uint64_t>(rep));
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < 10; ++i)
            if (y[i] == 0.0) {
                ++zeros;
                ++counts[i];
            }
        REQUIRE(zeros == 2);
    }
    const double p = testing_oracles::uniformity_pvalue(counts);
    INFO("mask uniformity p-value " << p);
    CHECK(p > 0.01);
}

TEST_CASE("feature file: parse, errors, round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "popdefer_data_test";
    fs::create_directories(dir);

    SECTION("well-formed three-row file") {
        const std::string path = (dir / "ok.csv").string();
        {
            std::ofstream os(path);
            os << "fdim=3,classes=2\n";
            os << "0,1,0.5,-1.25,3\n";
            os << "1,0,1,2,3\n";
            os << "2,1,-1,-2,-3\n";
        }
        const IngestedFeatures in = ingest_feature_file(path);
        REQUIRE(in.instances.size() == 3);
        CHECK(in.feature_dim == 3);
        CHECK(in.num_classes == 2);
        CHECK(in.instances[0].label == 1);
        CHECK(in.instances[1].label == 0);
        CHECK(in.instances[0].features == std::vector<double>{0.5, -1.25, 3.0});
    }

    SECTION("short row names the offending row") {
        const std::string path = (dir / "short.csv").string();
        {
            std::ofstream os(path);
            os << "fdim=3,classes=2\n";
            os << "0,1,0.5,-1.25,3\n";
            os << "1,0,1,2\n";
        }
        CHECK_THROWS_WITH(ingest_feature_file(path), Catch::Matchers::ContainsSubstring("row 2"));
    }

    SECTION("label out of range, id out of order, bad header") {
        const std::string bad_label = (dir / "bad_label.csv").string();
        {
            std::ofstream os(bad_label);
            os << "fdim=2,classes=2\n0,2,1,1\n";
        }
        CHECK_THROWS_AS(ingest_feature_file(bad_label), ParseError);

        const std::string bad_id = (dir / "bad_id.csv").string();
        {
            std::ofstream os(bad_id);
            os << "fdim=2,classes=2\n5,1,1,1\n";
        }
        CHECK_THROWS_AS(ingest_feature_file(bad_id), ParseError);

        const std::string bad_header = (dir / "bad_header.csv").string();
        {
            std::ofstream os(bad_header);
            os << "dims=2\n";
        }
        CHECK_THROWS_AS(ingest_feature_file(bad_header), ParseError);
    }

    SECTION("export then ingest is the identity") {
        const DatasetSplit ds = make_synthetic_dataset(21, 4, 6, 25, 0.7);
        const std::string path = (dir / "roundtrip.csv").string();
        export_feature_file(path, ds);
        const IngestedFeatures in = ingest_feature_file(path);
        std::map<int, const Instance*> original;
        for (const auto* part : {&ds.train, &ds.validation, &ds.test})
            for (const Instance& inst : *part) original[inst.id] = &inst;
        REQUIRE(in.instances.size() == original.size());
        for (const Instance& inst : in.instances) {
            const Instance* want = original.at(inst.id);
            CHECK(inst.label == want->label);
            CHECK(inst.features == want->features);  // exact doubles
        }
    }

    fs::remove_all(dir);
}

TEST_CASE("ingest_dataset builds a valid split from a file") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "popdefer_ingest_split";
    fs::create_directories(dir);
    const DatasetSplit ds = make_synthetic_dataset(31, 3, 4, 40, 0.6);
    const std::string path = (dir / "feat.csv").string();
    export_feature_file(path, ds);
    const DatasetSplit loaded = ingest_dataset(path, 5);
    CHECK(loaded.train.size() + loaded.validation.size() + loaded.test.size() == 120);
    loaded.check_partition();
    fs::remove_all(dir);
}

TEST_CASE("backbone pretraining reaches perfect accuracy on separable data") {
    const DatasetSplit raw = make_synthetic_dataset(5, 2, 8, 60, 0.05);
    FeatureBackbone bb = FeatureBackbone::make(BackboneConfig{8, 16, 8, 2}, 17);

    auto mean_loss = [&](const FeatureBackbone& model) {
        std::vector<const Instance*> all;
        std::vector<std::size_t> targets;
        for (const Instance& inst : raw.train) {
            all.push_back(&inst);
            targets.push_back(static_cast<std::size_t>(inst.label));
        }
        Tape tape;
        Binder bind(tape, model.params(), false);
        const NodeId logits = model.logits_graph(tape, bind, tape.constant(stack_features(all)));
        return tape.value(tape.mean_all(tape.ce_rows(logits, targets))).scalar_value();
    };
    const double loss0 = mean_loss(bb);

    PretrainConfig cfg;
    cfg.epochs = 50;
    cfg.seed = 3;
    const double val_acc = pretrain_backbone(bb, raw, cfg);
    CHECK(val_acc == 1.0);
    CHECK(bb.frozen());
    CHECK(mean_loss(bb) < loss0);

    CHECK_THROWS_AS(pretrain_backbone(bb, raw, cfg), StateError);
    CHECK_THROWS_AS(bb.mutable_params(), StateError);
}

TEST_CASE("descent after a single epoch") {
    const DatasetSplit raw = make_synthetic_dataset(9, 4, 8, 30, 0.8);
    FeatureBackbone bb = FeatureBackbone::make(BackboneConfig{8, 12, 8, 4}, 23);
    auto mean_loss = [&](const FeatureBackbone& model) {
        std::vector<const Instance*> all;
        std::vector<std::size_t> targets;
        for (const Instance& inst : raw.train) {
            all.push_back(&inst);
            targets.push_back(static_cast<std::size_t>(inst.label));
        }
        Tape tape;
        Binder bind(tape, model.params(), false);
        const NodeId logits = model.logits_graph(tape, bind, tape.constant(stack_features(all)));
        return tape.value(tape.mean_all(tape.ce_rows(logits, targets))).scalar_value();
    };
    const double loss0 = mean_loss(bb);
    PretrainConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 3;
    pretrain_backbone(bb, raw, cfg);
    CHECK(mean_loss(bb) < loss0);
}

TEST_CASE("transform_dataset standardizes train features") {
    const DatasetSplit raw = make_synthetic_dataset(13, 3, 6, 50, 0.9);
    FeatureBackbone bb = FeatureBackbone::make(BackboneConfig{6, 10, 6, 3}, 29);
    PretrainConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 3;
    pretrain_backbone(bb, raw, cfg);
    const DatasetSplit ds = transform_dataset(bb, raw);
    REQUIRE(ds.feature_dim == 6);
    for (std::size_t j = 0; j < 6; ++j) {
        double mean = 0.0, var = 0.0;
        for (const Instance& inst : ds.train) mean += inst.features[j];
        mean /= static_cast<double>(ds.train.size());
        for (const Instance& inst : ds.train)
            var += (inst.features[j] - mean) * (inst.features[j] - mean);
        var /= static_cast<double>(ds.train.size());
        CHECK(std::abs(mean) < 1e-9);
        CHECK(var == Catch::Approx(1.0).margin(1e-6));
    }
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(ds.train[i].id == raw.train[i].id);
        CHECK(ds.train[i].label == raw.train[i].label);
    }
}

TEST_CASE("identity backbone passes features through") {
    FeatureBackbone bb = FeatureBackbone::identity(4, 3);
    CHECK(bb.frozen());
    const std::vector<double> x = {1.0, 2.0, 3.0, 4.0};
    CHECK(bb.transform(x) == x);
}
