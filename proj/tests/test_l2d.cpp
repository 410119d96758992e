#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "popdefer/l2d.hpp"
#include "popdefer/l2d_train.hpp"

using namespace popdefer;

namespace {

L2dConfig small_cfg(L2dVariant variant, std::size_t f = 4, int K = 3, std::size_t d_psi = 6) {
    L2dConfig cfg;
    cfg.variant = variant;
    cfg.feature_dim = f;
    cfg.num_classes = K;
    cfg.d_psi = d_psi;
    cfg.trunk_hidden = 5;
    cfg.head_hidden = 6;
    return cfg;
}

ExpertEmbedding embedding_of(std::vector<double> v) {
    ExpertEmbedding e;
    e.psi = std::move(v);
    return e;
}

}  // namespace

TEST_CASE("single-variant deferral logit ignores the expert embedding") {
    const DeferralModel model = make_deferral_model(small_cfg(L2dVariant::Single), 11);
    const std::vector<double> x = {0.4, -0.2, 1.0, 0.3};
    const L2dOutput a = l2d_forward(model, x, embedding_of({1, 2, 3, 4, 5, 6}));
    const L2dOutput b = l2d_forward(model, x, embedding_of({-9, 0, 9, -1, 2, 0}));
    CHECK(a.deferral_logit == b.deferral_logit);
    CHECK(a.class_logits == b.class_logits);

    const DeferralModel pop = make_deferral_model(small_cfg(L2dVariant::PopNP), 11);
    const L2dOutput c = l2d_forward(pop, x, embedding_of({1, 2, 3, 4, 5, 6}));
    const L2dOutput d = l2d_forward(pop, x, embedding_of({-9, 0, 9, -1, 2, 0}));
    CHECK(c.deferral_logit != d.deferral_logit);
}

TEST_CASE("zero-initialized heads output all-zero logits") {
    DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP), 13);
    for (auto* store : {&model.trunk, &model.head})
        for (auto& [name, t] : store->values()) std::fill(t.data().begin(), t.data().end(), 0.0);
    const L2dOutput out = l2d_forward(model, {0.5, 0.5, 0.5, 0.5}, embedding_of({1, 1, 1, 1, 1, 1}));
    for (double g : out.class_logits) CHECK(g == 0.0);
    CHECK(out.deferral_logit == 0.0);
}

TEST_CASE("forward at GTSRB scale produces K+1 logits") {
    const DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNPAttention, 8, 43, 16), 17);
    std::vector<double> x(8, 0.1);
    const L2dOutput out = l2d_forward(model, x, embedding_of(std::vector<double>(16, 0.2)));
    CHECK(out.class_logits.size() == 43);
    CHECK(std::isfinite(out.deferral_logit));
}

TEST_CASE("surrogate loss closed forms") {
    // K=2, all logits zero, m = y: Z = 3, both terms are ln 3
    CHECK(surrogate_loss({0.0, 0.0}, 0.0, 1, 1) ==
          Catch::Approx(2.0 * std::log(3.0)).margin(1e-12));
    // m != y: the deferral term vanishes; (K+1)-way CE at y
    CHECK(surrogate_loss({0.0, 0.0}, 0.0, 1, 0) == Catch::Approx(std::log(3.0)).margin(1e-12));

    CHECK_THROWS_AS(surrogate_loss({0.0, 0.0}, 0.0, 2, 0), StructuralError);
    CHECK_THROWS_AS(surrogate_loss({std::numeric_limits<double>::infinity(), 0.0}, 0.0, 0, 0),
                    NumericError);
}

TEST_CASE("surrogate loss matches the extended-precision oracle") {
    Rng rng(31);
    for (int rep = 0; rep < 300; ++rep) {
        std::vector<double> g(5);
        for (double& v : g) v = rng.gauss(0.0, 4.0);
        const double g_bot = rng.gauss(0.0, 4.0);
        const int y = static_cast<int>(rng.uniform_int(5));
        const int m = static_cast<int>(rng.uniform_int(6)) - 0;  // sometimes equals y
        const int m_e = m == 5 ? y : m;
        const double got = surrogate_loss(g, g_bot, y, m_e);
        const double want = static_cast<double>(
            testing_oracles::surrogate_reference(g, g_bot, static_cast<std::size_t>(y),
                                                 static_cast<std::size_t>(m_e)));
        CHECK(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("surrogate loss is shift invariant") {
    Rng rng(37);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> g(4);
        for (double& v : g) v = rng.gauss(0.0, 3.0);
        const double g_bot = rng.gauss(0.0, 3.0);
        const double c = rng.gauss(0.0, 5.0);
        std::vector<double> shifted = g;
        for (double& v : shifted) v += c;
        const double base = surrogate_loss(g, g_bot, 2, 2);
        CHECK(std::abs(surrogate_loss(shifted, g_bot + c, 2, 2) - base) < 1e-9);
    }
}

TEST_CASE("tape surrogate agrees with the plain surrogate") {
    const DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP), 41);
    Rng rng(43);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x(4), psi(6);
        for (double& v : x) v = rng.gauss();
        for (double& v : psi) v = rng.gauss();
        const int y = static_cast<int>(rng.uniform_int(3));
        const int m = static_cast<int>(rng.uniform_int(3));

        const L2dOutput out = l2d_forward(model, x, embedding_of(psi));
        const double plain = surrogate_loss(out.class_logits, out.deferral_logit, y, m);

        Tape tape;
        Binder trunk_bind(tape, model.trunk, false);
        Binder head_bind(tape, model.head, false);
        const NodeId xn = tape.constant(Tensor::row(x));
        const NodeId pn = tape.constant(Tensor::row(psi));
        const NodeId loss =
            surrogate_batch_graph(model, tape, trunk_bind, head_bind, xn, pn, {y}, {m});
        CHECK(tape.value(loss).scalar_value() == Catch::Approx(plain).margin(1e-12));
    }
}

TEST_CASE("gradient check through both deferral heads") {
    const DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP), 47);
    Rng rng(53);
    Tensor queries = Tensor::randn(6, 4, 1.0, rng);
    Tensor psi = Tensor::randn(6, 6, 1.0, rng);
    std::vector<int> truths, answers;
    for (int i = 0; i < 6; ++i) {
        truths.push_back(static_cast<int>(rng.uniform_int(3)));
        answers.push_back(static_cast<int>(rng.uniform_int(3)));
    }

    // merge both stores into one parameter set for the checker
    Parameters merged;
    for (const auto& [name, t] : model.trunk.values()) merged.add(name, t);
    for (const auto& [name, t] : model.head.values()) merged.add(name, t);

    auto loss_fn = [&](Parameters& params, Gradients* grads) {
        DeferralModel probe;
        probe.cfg = model.cfg;
        for (const auto& [name, t] : params.values())
            (name.rfind("trunk.", 0) == 0 ? probe.trunk : probe.head).add(name, t);
        Tape tape;
        Binder trunk_bind(tape, probe.trunk, true);
        Binder head_bind(tape, probe.head, true);
        const NodeId x = tape.constant(queries);
        const NodeId p = tape.constant(psi);
        const NodeId loss =
            surrogate_batch_graph(probe, tape, trunk_bind, head_bind, x, p, truths, answers);
        tape.backward(loss);
        if (grads) {
            *grads = trunk_bind.collect();
            for (auto& [name, g] : head_bind.collect()) grads->emplace(name, g);
        }
        return tape.value(loss).scalar_value();
    };
    const auto report = grad_check(merged, loss_fn, 1e-4);
    INFO("worst " << report.worst_param << " err " << report.max_rel_err);
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("decision rule: classify, tie-defers, argmax tie break") {
    const DeferralDecision a = decide({2.0, 1.0}, 1.5);
    CHECK_FALSE(a.deferred());
    CHECK(a.class_index == 0);

    const DeferralDecision b = decide({2.0, 1.0}, 2.0, 4);  // boundary: ties defer
    CHECK(b.deferred());
    CHECK(b.expert_id == 4);

    const DeferralDecision c = decide({1.0, 3.0, 3.0}, 2.0);
    CHECK_FALSE(c.deferred());
    CHECK(c.class_index == 1);  // lowest index among tied argmax

    CHECK_THROWS_AS(decide({std::nan(""), 1.0}, 0.0), NumericError);
    CHECK_THROWS_AS(decide({}, 0.0), StructuralError);
}

TEST_CASE("decision rule is shift invariant over random logit sets") {
    Rng rng(59);
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<double> g(4);
        for (double& v : g) v = rng.gauss(0.0, 3.0);
        const double g_bot = rng.gauss(0.0, 3.0);
        const double c = 7.3;
        const DeferralDecision base = decide(g, g_bot);
        std::vector<double> shifted = g;
        for (double& v : shifted) v += c;
        const DeferralDecision moved = decide(shifted, g_bot + c);
        CHECK(base.kind == moved.kind);
        CHECK(base.class_index == moved.class_index);
    }
}

namespace {

// Shared tiny pipeline for the training-level tests.
struct TinyWorld {
    DatasetSplit data;
    std::vector<ExpertProfile> experts;
    BehaviorModel encoder;
};

TinyWorld make_tiny_world(std::uint64_t seed, double spread, int strength) {
    TinyWorld w{make_synthetic_dataset(seed, 4, 8, 50, spread),
                build_population(4, 4, strength, 1, seed + 1),
                make_behavior_model(
                    BehaviorConfig{EncoderVariant::NP, 8, 4, 8, 2, 8}, seed + 2)};
    select_annotated(w.data, 4, seed + 3);
    return w;
}

}  // namespace

TEST_CASE("l2d training is deterministic and label-source faithful", "[train]") {
    TinyWorld w = make_tiny_world(71, 0.3, 3);

    L2dTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 32;
    cfg.context_size = 8;
    cfg.seed = 5;

    auto run = [&](const LabelSource& source) {
        DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP, 8, 4, 8), 73);
        const auto history = train_l2d(model, source, w.experts, w.data, &w.encoder, cfg);
        return std::make_pair(history, model);
    };

    const auto [h1, m1] = run(oracle_label_source());
    const auto [h2, m2] = run(oracle_label_source());
    CHECK(h1 == h2);
    for (const auto& [name, t] : m1.trunk.values()) CHECK(t.data() == m2.trunk.at(name).data());
    for (const auto& [name, t] : m1.head.values()) CHECK(t.data() == m2.head.at(name).data());

    // a pseudo-label table that reproduces the simulator yields the same run
    PseudoLabelTable table;
    for (const auto& expert : w.experts)
        for (const Instance& inst : w.data.train) {
            const int h = expert_label(expert, inst);
            table.put(expert.id, inst.id, PseudoLabel{h == inst.label ? 1 : 0, h});
        }
    const auto [h3, m3] = run(pseudo_label_source(table));
    CHECK(h3 == h1);
    for (const auto& [name, t] : m1.trunk.values()) CHECK(t.data() == m3.trunk.at(name).data());

    // uncovered pair -> data error
    PseudoLabelTable partial = table;
    PseudoLabelTable empty;
    DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP, 8, 4, 8), 73);
    CHECK_THROWS_AS(train_l2d(model, pseudo_label_source(empty), w.experts, w.data, &w.encoder, cfg),
                    DataError);
}

TEST_CASE("oracle-trained deferral beats the classifier on separable data with strong experts",
          "[slow][train]") {
    TinyWorld w = make_tiny_world(79, 0.45, 4);  // H = K: perfect experts

    Parameters clf = make_classifier(8, 4, 5, 81);
    train_classifier(clf, w.data, 8, 32, AdamConfig{}, 83);
    std::vector<const Instance*> test;
    for (const Instance& inst : w.data.test) test.push_back(&inst);
    const double clf_acc = classifier_accuracy(clf, test);

    DeferralModel model = make_deferral_model(small_cfg(L2dVariant::PopNP, 8, 4, 8), 85);
    L2dTrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch = 32;
    cfg.context_size = 8;
    cfg.seed = 87;
    train_l2d(model, oracle_label_source(), w.experts, w.data, &w.encoder, cfg);

    std::vector<const Instance*> train_pool;
    for (const Instance& inst : w.data.train) train_pool.push_back(&inst);
    const PsiProvider psi(&w.encoder, oracle_label_source(), train_pool, 8, 89);
    double sys = 0.0;
    for (const auto& expert : w.experts) sys += system_accuracy(model, expert, test, &psi, 1);
    sys /= static_cast<double>(w.experts.size());
    INFO("system " << sys << " vs classifier " << clf_acc);
    CHECK(sys > clf_acc);
}

TEST_CASE("finetune: zero steps is the identity, descent holds, determinism") {
    TinyWorld w = make_tiny_world(91, 0.3, 2);
    DeferralModel base = make_deferral_model(small_cfg(L2dVariant::Single, 8, 4, 0), 93);
    L2dTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 32;
    cfg.seed = 95;
    train_l2d(base, oracle_label_source(), w.experts, w.data, nullptr, cfg);

    std::vector<const Instance*> pool;
    for (const Instance& inst : w.data.train) pool.push_back(&inst);

    CHECK_THROWS_AS(finetune_variant(base, ContextSet{}, FinetuneConfig{}), ConfigError);

    const ContextSet ctx = sample_context_set(w.experts[1], pool, 10, 97);
    FinetuneConfig zero;
    zero.steps = 0;
    const DeferralModel same = finetune_variant(base, ctx, zero);
    for (const auto& [name, t] : base.head.values()) CHECK(t.data() == same.head.at(name).data());

    // fine-tuning loss is non-increasing over checkpoints in the median
    std::vector<double> drops;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ContextSet c = sample_context_set(w.experts[seed % 4], pool, 10, 200 + seed);
        const double before = context_surrogate_loss(base, c);
        FinetuneConfig ft;
        ft.steps = 40;
        const DeferralModel tuned = finetune_variant(base, c, ft);
        const double after = context_surrogate_loss(tuned, c);
        drops.push_back(before - after);
        // trunk untouched
        for (const auto& [name, t] : base.trunk.values())
            CHECK(t.data() == tuned.trunk.at(name).data());
    }
    CHECK(testing_oracles::median(drops) >= 0.0);

    // identical context sets give identical heads
    const DeferralModel t1 = finetune_variant(base, ctx, FinetuneConfig{});
    const DeferralModel t2 = finetune_variant(base, ctx, FinetuneConfig{});
    for (const auto& [name, t] : t1.head.values()) CHECK(t.data() == t2.head.at(name).data());
}

TEST_CASE("useless experts are never deferred to; perfect experts with a chance-level classifier always are",
          "[slow][train]") {
    // useless: every expert answer is wrong
    {
        TinyWorld w = make_tiny_world(101, 0.3, 1);
        const LabelSource useless{
            "useless", [](const ExpertProfile& e, const Instance& inst) {
                return (inst.label + 1) % e.num_classes;
            }};
        DeferralModel model = make_deferral_model(small_cfg(L2dVariant::Single, 8, 4, 0), 103);
        L2dTrainConfig cfg;
        cfg.epochs = 6;
        cfg.batch = 32;
        cfg.seed = 105;
        train_l2d(model, useless, w.experts, w.data, nullptr, cfg);

        std::size_t deferred = 0;
        for (const Instance& inst : w.data.test) {
            const L2dOutput out = l2d_forward(model, inst.features, ExpertEmbedding{});
            if (decide(out.class_logits, out.deferral_logit).deferred()) ++deferred;
        }
        const double rate = static_cast<double>(deferred) / static_cast<double>(w.data.test.size());
        INFO("useless-expert deferral rate " << rate);
        CHECK(rate <= 0.02);
    }

    // perfect experts, classifier capped at chance by an inseparable dataset
    {
        DatasetSplit noise = make_synthetic_dataset(111, 4, 8, 50, 30.0);
        select_annotated(noise, 4, 113);
        const auto experts = build_population(4, 4, 4, 1, 115);
        const LabelSource perfect{
            "perfect", [](const ExpertProfile&, const Instance& inst) { return inst.label; }};
        DeferralModel model = make_deferral_model(small_cfg(L2dVariant::Single, 8, 4, 0), 117);
        L2dTrainConfig cfg;
        cfg.epochs = 30;
        cfg.batch = 32;
        cfg.adam.lr = 5e-3;
        cfg.seed = 119;
        train_l2d(model, perfect, experts, noise, nullptr, cfg);

        std::size_t deferred = 0;
        for (const Instance& inst : noise.test) {
            const L2dOutput out = l2d_forward(model, inst.features, ExpertEmbedding{});
            if (decide(out.class_logits, out.deferral_logit).deferred()) ++deferred;
        }
        const double rate = static_cast<double>(deferred) / static_cast<double>(noise.test.size());
        INFO("perfect-expert deferral rate " << rate);
        CHECK(rate >= 0.95);
    }
}
