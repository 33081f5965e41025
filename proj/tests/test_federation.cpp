#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "helpers.hpp"
#include "mtfl/data.hpp"
#include "mtfl/federation.hpp"

using namespace mtfl;

namespace {

SyntheticTaskSpec small_spec() {
    SyntheticTaskSpec s;
    s.n_activities = 4;
    s.cluster_of = {0, 0, 1, 1};
    s.input_dim = 6;
    s.hidden_dim = 16;
    s.output_dim = 2;
    s.heterogeneity = 0.4;
    s.noise_std = 0.0;
    s.seed = 99;
    return s;
}

std::uint64_t features_hash(const ClientPool& pool) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](double d) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        h ^= bits;
        h *= 1099511628211ULL;
    };
    for (const auto& c : pool.clients)
        for (const auto& b : c.batches) {
            for (double v : b.features) feed(v);
            for (const auto& [a, t] : b.targets)
                for (double v : t) feed(v);
        }
    return h;
}

// Least-squares fit of Y2 from Y1 (no intercept) via normal equations with
// Gaussian elimination; returns the relative residual.
double linear_fit_residual(const std::vector<std::vector<double>>& y1,
                           const std::vector<std::vector<double>>& y2) {
    const std::size_t n = y1.size(), d = y1.front().size();
    std::vector<double> ata(d * d, 0.0), atb(d * d, 0.0);
    for (std::size_t e = 0; e < n; ++e)
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) ata[i * d + j] += y1[e][i] * y1[e][j];
            for (std::size_t j = 0; j < d; ++j) atb[i * d + j] += y1[e][i] * y2[e][j];
        }
    std::vector<double> X = atb;
    for (std::size_t col = 0; col < d; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < d; ++r)
            if (std::abs(ata[r * d + col]) > std::abs(ata[piv * d + col])) piv = r;
        for (std::size_t j = 0; j < d; ++j) {
            std::swap(ata[piv * d + j], ata[col * d + j]);
            std::swap(X[piv * d + j], X[col * d + j]);
        }
        const double p = ata[col * d + col];
        for (std::size_t r = 0; r < d; ++r) {
            if (r == col) continue;
            const double f = ata[r * d + col] / p;
            for (std::size_t j = 0; j < d; ++j) {
                ata[r * d + j] -= f * ata[col * d + j];
                X[r * d + j] -= f * X[col * d + j];
            }
        }
    }
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t j = 0; j < d; ++j) X[r * d + j] /= ata[r * d + r];
    double num = 0.0, den = 0.0;
    for (std::size_t e = 0; e < n; ++e)
        for (std::size_t j = 0; j < d; ++j) {
            double pred = 0.0;
            for (std::size_t i = 0; i < d; ++i) pred += y1[e][i] * X[i * d + j];
            num += (y2[e][j] - pred) * (y2[e][j] - pred);
            den += y2[e][j] * y2[e][j];
        }
    return num / den;
}

}  // namespace

TEST_CASE("generate_population determinism and structure") {
    const SyntheticTaskSpec spec = small_spec();
    const ClientPool a = generate_population(spec, 6, 64, 16);
    const ClientPool b = generate_population(spec, 6, 64, 16);
    CHECK(features_hash(a) == features_hash(b));
    for (const auto& c : a.clients) {
        std::size_t total = 0;
        for (const auto& batch : c.batches) total += batch.size;
        CHECK(total == c.n_examples);
        CHECK(c.n_examples % a.batch_size == 0);
    }
    CHECK_THROWS(generate_population(spec, 0, 64, 16));
    SyntheticTaskSpec degenerate = spec;
    degenerate.input_dim = 0;
    CHECK_THROWS(generate_population(degenerate, 6, 64, 16));
}

TEST_CASE("zero heterogeneity means identical client input distributions") {
    SyntheticTaskSpec spec = small_spec();
    spec.heterogeneity = 0.0;
    const ClientPool pool = generate_population(spec, 5, 64, 16);
    for (const auto& shift : pool.client_shifts)
        for (double v : shift) CHECK(v == 0.0);
}

TEST_CASE("same-cluster activities are linear functions of each other") {
    SyntheticTaskSpec spec = small_spec();
    spec.noise_std = 0.0;
    const ClientPool pool = generate_population(spec, 4, 128, 16);
    std::vector<std::vector<double>> y0, y1, y2;
    for (const auto& c : pool.clients)
        for (const auto& b : c.batches)
            for (std::size_t e = 0; e < b.size; ++e) {
                auto row = [&](int act) {
                    const auto& t = b.targets.at(act);
                    return std::vector<double>(t.begin() + static_cast<long>(e * spec.output_dim),
                                               t.begin() + static_cast<long>((e + 1) * spec.output_dim));
                };
                y0.push_back(row(0));
                y1.push_back(row(1));  // same cluster as 0
                y2.push_back(row(2));  // different cluster
            }
    CHECK(linear_fit_residual(y0, y1) < 1e-10);
    // Cross-cluster targets are driven by an independent map.
    CHECK(linear_fit_residual(y0, y2) > 1e-3);
}

TEST_CASE("sample_clients") {
    SECTION("K = N returns a permutation") {
        RngStream rng(5);
        std::vector<int> ids = sample_clients(8, 8, rng);
        std::sort(ids.begin(), ids.end());
        for (int i = 0; i < 8; ++i) CHECK(ids[static_cast<std::size_t>(i)] == i);
    }
    SECTION("seeded replay") {
        RngStream a(17), b(17);
        CHECK(sample_clients(32, 1, a) == sample_clients(32, 1, b));
    }
    SECTION("uniformity over 10000 draws") {
        RngStream rng(123);
        std::vector<int> counts(32, 0);
        for (int t = 0; t < 10000; ++t)
            for (int id : sample_clients(32, 4, rng)) counts[static_cast<std::size_t>(id)]++;
        const double expected = 10000.0 * 4.0 / 32.0;
        for (int c : counts) {
            CHECK(c > expected * 0.85);
            CHECK(c < expected * 1.15);
        }
    }
    SECTION("bounds") {
        RngStream rng(1);
        CHECK_THROWS(sample_clients(4, 5, rng));
        CHECK_THROWS(sample_clients(4, 0, rng));
    }
}

TEST_CASE("local_train") {
    HyperParams plain;
    plain.momentum = 0.0;
    plain.weight_decay = 0.0;

    SECTION("E = 0 returns the model unchanged with an empty accumulator") {
        MultiTaskModel m = testutil::scalar_model(0.25, {{0, 1.0}});
        const Batch b = testutil::scalar_batch({{0, 1.0}});
        ClientDataset ds;
        ds.client_id = 0;
        ds.batches = {b};
        ds.n_examples = 1;
        ProbePass probe{1, 0.1};
        const LocalTrainResult r = local_train(m, ds, 0, 0.1, plain, &probe, 7);
        CHECK(r.model.state_hash() == m.state_hash());
        CHECK(r.affinity.empty());
        CHECK(r.mean_train_loss.empty());
    }
    SECTION("one batch, one activity equals a hand SGD step") {
        MultiTaskModel m = testutil::scalar_model(0.0, {{0, 1.0}});
        const Batch b = testutil::scalar_batch({{0, 1.0}});
        ClientDataset ds;
        ds.client_id = 0;
        ds.batches = {b};
        ds.n_examples = 1;
        const LocalTrainResult r = local_train(m, ds, 1, 0.25, plain, nullptr, 7);
        CHECK(testutil::theta_of(r.model) == 0.5);
        CHECK(r.mean_train_loss.at(0) == 1.0);
    }
    SECTION("caller's model is not mutated") {
        MultiTaskModel m = testutil::scalar_model(0.0, {{0, 1.0}});
        const std::uint64_t before = m.state_hash();
        const Batch b = testutil::scalar_batch({{0, 1.0}});
        ClientDataset ds;
        ds.client_id = 0;
        ds.batches = {b};
        ds.n_examples = 1;
        local_train(m, ds, 1, 0.25, plain, nullptr, 7);
        CHECK(m.state_hash() == before);
    }
    SECTION("probe fires every f batches: 12 batches, f = 5 -> 2 time-steps per epoch") {
        MultiTaskModel m = testutil::scalar_model(0.1, {{0, 1.0}, {1, -1.0}});
        ClientDataset ds;
        ds.client_id = 0;
        for (int i = 0; i < 12; ++i)
            ds.batches.push_back(testutil::scalar_batch({{0, 1.0}, {1, 2.0}}));
        ds.n_examples = 12;
        ProbePass probe{5, 0.05};
        const LocalTrainResult one = local_train(m, ds, 1, 0.05, plain, &probe, 7);
        CHECK(one.affinity.steps == 2);
        const LocalTrainResult two = local_train(m, ds, 2, 0.05, plain, &probe, 7);
        CHECK(two.affinity.steps == 4);
    }
    SECTION("missing activity targets rejected") {
        MultiTaskModel m = testutil::scalar_model(0.0, {{0, 1.0}, {5, 1.0}});
        const Batch b = testutil::scalar_batch({{0, 1.0}});  // no targets for 5
        ClientDataset ds;
        ds.client_id = 0;
        ds.batches = {b};
        ds.n_examples = 1;
        CHECK_THROWS(local_train(m, ds, 1, 0.1, plain, nullptr, 7));
    }
}

TEST_CASE("fedavg") {
    SECTION("single model, weight 1") {
        MultiTaskModel m = testutil::scalar_model(0.7, {{0, 0.3}});
        const MultiTaskModel out = fedavg({m}, {1.0});
        CHECK(out.state_hash() == m.state_hash());
    }
    SECTION("weighted mean by dataset size: params {1, 3}, sizes {1, 3} -> 2.5") {
        MultiTaskModel a = testutil::scalar_model(1.0, {{0, 1.0}});
        MultiTaskModel b = testutil::scalar_model(3.0, {{0, 1.0}});
        const MultiTaskModel out = fedavg({a, b}, {0.25, 0.75});
        CHECK(testutil::theta_of(out) == 2.5);
    }
    SECTION("idempotence on identical submissions") {
        MultiTaskModel m = testutil::scalar_model(0.4, {{0, 1.5}});
        const MultiTaskModel out = fedavg({m, m, m, m}, {0.25, 0.25, 0.25, 0.25});
        CHECK(testutil::theta_of(out) == 0.4);
        CHECK(out.heads[0].layers[0].W.values[0] == 1.5);
    }
    SECTION("momentum buffers reset") {
        MultiTaskModel m = testutil::scalar_model(0.4, {{0, 1.5}});
        m.trunk[0].W.momentum[0] = 9.0;
        const MultiTaskModel out = fedavg({m}, {1.0});
        CHECK(out.trunk[0].W.momentum[0] == 0.0);
    }
    SECTION("linearity under duplicated entries") {
        MultiTaskModel a = testutil::scalar_model(1.0, {{0, 1.0}});
        MultiTaskModel b = testutil::scalar_model(3.0, {{0, 2.0}});
        const MultiTaskModel lhs = fedavg({a, a, b}, {0.2, 0.3, 0.5});
        const MultiTaskModel rhs = fedavg({a, b}, {0.5, 0.5});
        CHECK(testutil::theta_of(lhs) == Catch::Approx(testutil::theta_of(rhs)).margin(1e-12));
    }
    SECTION("errors") {
        MultiTaskModel a = testutil::scalar_model(1.0, {{0, 1.0}});
        MultiTaskModel b = testutil::scalar_model(3.0, {{1, 1.0}});  // different activity
        CHECK_THROWS(fedavg({a, b}, {0.5, 0.5}));
        CHECK_THROWS(fedavg({a, a}, {0.5, 0.6}));
        CHECK_THROWS(fedavg({}, {}));
    }
}

TEST_CASE("evaluate") {
    SyntheticTaskSpec spec = small_spec();
    spec.noise_std = 0.0;
    const ClientPool pool = generate_population(spec, 4, 64, 16);

    SECTION("a model built from the generator fits noise-free data exactly") {
        MultiTaskModel m;
        DenseLayer trunk;
        trunk.W = ParamBlock::matrix(spec.hidden_dim, spec.input_dim);
        trunk.b = ParamBlock::matrix(spec.hidden_dim, 1);
        trunk.W.values = pool.gen.feature_map;
        trunk.act = Activation::tanh_fn;
        m.trunk.push_back(trunk);
        for (int a = 0; a < spec.n_activities; ++a) {
            Head h;
            h.activity = a;
            h.loss = LossKind::squared_error;
            DenseLayer l;
            l.W = ParamBlock::matrix(spec.output_dim, spec.hidden_dim);
            l.b = ParamBlock::matrix(spec.output_dim, 1);
            l.W.values = pool.gen.activity_map[static_cast<std::size_t>(a)];
            l.act = Activation::identity;
            h.layers.push_back(l);
            m.heads.push_back(h);
        }
        const EvalResult ev = evaluate(m, pool.test_batches);
        for (const auto& [a, l] : ev.by_activity) CHECK(l == 0.0);
        CHECK(ev.total == 0.0);
    }
    SECTION("totals additive and evaluation repeatable") {
        MultiTaskModel m = make_multitask_model({spec.input_dim, {12}},
                                                {{0, spec.output_dim, LossKind::squared_error},
                                                 {1, spec.output_dim, LossKind::squared_error},
                                                 {2, spec.output_dim, LossKind::squared_error},
                                                 {3, spec.output_dim, LossKind::squared_error}},
                                                RngStream(2));
        const EvalResult a = evaluate(m, pool.test_batches);
        const EvalResult b = evaluate(m, pool.test_batches);
        double sum = 0.0;
        for (const auto& [id, l] : a.by_activity) sum += l;
        CHECK(a.total == sum);
        CHECK(a.total == b.total);
        for (const auto& [id, l] : a.by_activity) CHECK(l == b.by_activity.at(id));
    }
    SECTION("every activity needs exactly one owner") {
        MultiTaskModel m = testutil::scalar_model(0.0, {{0, 1.0}});
        const std::vector<Batch> test = {testutil::scalar_batch({{0, 1.0}})};
        CHECK_THROWS(evaluate({ModelGroup{{0}, &m}, ModelGroup{{0}, &m}}, test));
        CHECK_THROWS(evaluate({ModelGroup{{0, 1}, &m}}, test));
    }
}

TEST_CASE("fedavg weights come from selected sizes and sum to one") {
    SyntheticTaskSpec spec = small_spec();
    const ClientPool pool = generate_population(spec, 8, 96, 16);
    const std::vector<int> selected{1, 4, 6};
    const std::vector<double> w = fedavg_weights(pool, selected);
    double sum = 0.0;
    for (double v : w) sum += v;
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    const double s1 = static_cast<double>(pool.clients[1].n_examples);
    const double s4 = static_cast<double>(pool.clients[4].n_examples);
    CHECK(w[0] / w[1] == Catch::Approx(s1 / s4).margin(1e-12));
}

TEST_CASE("classification activities run end to end") {
    SyntheticTaskSpec spec = small_spec();
    spec.losses = {LossKind::squared_error, LossKind::cross_entropy, LossKind::squared_error,
                   LossKind::cross_entropy};
    const ClientPool pool = generate_population(spec, 3, 48, 8);
    for (const auto& c : pool.clients) {
        CHECK(c.batches.front().labels.count(1) == 1);
        CHECK(c.batches.front().targets.count(0) == 1);
        for (int lab : c.batches.front().labels.at(1)) {
            CHECK(lab >= 0);
            CHECK(lab < static_cast<int>(spec.output_dim));
        }
    }
    MultiTaskModel m = make_multitask_model({spec.input_dim, {10}},
                                            {{0, spec.output_dim, LossKind::squared_error},
                                             {1, spec.output_dim, LossKind::cross_entropy},
                                             {2, spec.output_dim, LossKind::squared_error},
                                             {3, spec.output_dim, LossKind::cross_entropy}},
                                            RngStream(6));
    HyperParams hp;
    hp.eta0 = 0.02;
    const LocalTrainResult before = local_train(m, pool.clients[0], 0, 0.02, hp, nullptr, 3);
    const LocalTrainResult after = local_train(m, pool.clients[0], 3, 0.02, hp, nullptr, 3);
    const EvalResult e0 = evaluate(before.model, pool.test_batches);
    const EvalResult e1 = evaluate(after.model, pool.test_batches);
    CHECK(e1.total < e0.total);  // a few epochs help on every loss kind
}
