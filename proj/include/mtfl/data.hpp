#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtfl/nn.hpp"
#include "mtfl/rng.hpp"

namespace mtfl {

// Recipe for a synthetic multi-activity workload. Activities in the same
// cluster share a target generator built on a common nonlinear feature map,
// differing only by a small per-activity rotation; activities in different
// clusters use independent generators. The whole population is a pure
// function of this record, so exporting/importing a population means
// exporting this spec and regenerating.
struct SyntheticTaskSpec {
    int n_activities = 5;
    std::vector<int> cluster_of;  // activity -> cluster id; default {0,0,0,1,1}
    std::size_t input_dim = 8;
    std::size_t hidden_dim = 32;  // generator latent width
    std::size_t output_dim = 2;
    double heterogeneity = 0.5;  // per-client input shift scale
    double noise_std = 0.05;
    double rotation = 0.2;     // per-activity rotation angle bound, radians
    double size_jitter = 0.5;  // client sizes uniform in [1 -/+ jitter] * examples_per_client
    std::vector<LossKind> losses;  // per activity; empty means all squared_error
    std::uint64_t seed = 1;

    LossKind loss_of(int activity) const {
        return losses.empty() ? LossKind::squared_error : losses.at(static_cast<std::size_t>(activity));
    }

    void validate() const {
        if (n_activities < 1) throw std::invalid_argument("n_activities must be >= 1");
        if (input_dim == 0) throw std::invalid_argument("input_dim must be > 0");
        if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be > 0");
        if (output_dim == 0) throw std::invalid_argument("output_dim must be > 0");
        if (!cluster_of.empty() && cluster_of.size() != static_cast<std::size_t>(n_activities))
            throw std::invalid_argument("cluster_of must assign every activity");
        if (noise_std < 0.0) throw std::invalid_argument("noise_std must be >= 0");
        if (heterogeneity < 0.0) throw std::invalid_argument("heterogeneity must be >= 0");
        if (size_jitter < 0.0 || size_jitter >= 1.0) throw std::invalid_argument("size_jitter must be in [0, 1)");
        if (!losses.empty() && losses.size() != static_cast<std::size_t>(n_activities))
            throw std::invalid_argument("losses must cover every activity");
        for (std::size_t a = 0; a < losses.size(); ++a)
            if (losses[a] == LossKind::cross_entropy && output_dim < 2)
                throw std::invalid_argument("cross_entropy activities need output_dim >= 2");
    }

    std::vector<int> clusters() const {
        if (!cluster_of.empty()) return cluster_of;
        std::vector<int> c(static_cast<std::size_t>(n_activities), 0);
        for (int a = 0; a < n_activities; ++a) c[static_cast<std::size_t>(a)] = a < (n_activities + 1) / 2 ? 0 : 1;
        return c;
    }
};

// The realized generator: latent feature map plus per-activity target maps.
// Kept in the pool so tests can build reference models against it.
struct TaskGenerator {
    std::vector<double> feature_map;                 // hidden x input
    std::vector<std::vector<double>> cluster_map;    // cluster -> output x hidden
    std::vector<std::vector<double>> activity_map;   // activity -> output x hidden

    // phi(x) = tanh(feature_map * x)
    void latent(const std::vector<double>& x, std::size_t in, std::size_t hid,
                std::vector<double>& phi) const {
        phi.assign(hid, 0.0);
        for (std::size_t r = 0; r < hid; ++r) {
            double acc = 0.0;
            const double* Wr = feature_map.data() + r * in;
            for (std::size_t c = 0; c < in; ++c) acc += Wr[c] * x[c];
            phi[r] = std::tanh(acc);
        }
    }
};

struct ClientDataset {
    int client_id = -1;
    std::vector<Batch> batches;
    std::size_t n_examples = 0;
};

struct ClientPool {
    std::vector<ClientDataset> clients;
    std::vector<Batch> test_batches;  // targets for every activity
    SyntheticTaskSpec spec;
    TaskGenerator gen;
    std::vector<std::vector<double>> client_shifts;
    std::size_t batch_size = 16;

    int size() const { return static_cast<int>(clients.size()); }
};

namespace detail {

inline std::vector<double> gaussian_matrix(RngStream& rng, std::size_t rows, std::size_t cols,
                                           double scale) {
    std::vector<double> m(rows * cols);
    for (double& v : m) v = scale * rng.normal();
    return m;
}

// A small rotation: a single Givens rotation on a random coordinate plane.
inline std::vector<double> small_rotation(RngStream& rng, std::size_t dim, double angle_bound) {
    std::vector<double> r(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) r[i * dim + i] = 1.0;
    if (dim < 2 || angle_bound <= 0.0) return r;
    const std::size_t p = static_cast<std::size_t>(rng.next_below(dim));
    std::size_t q = static_cast<std::size_t>(rng.next_below(dim - 1));
    if (q >= p) ++q;
    const double theta = rng.uniform(-angle_bound, angle_bound);
    const double c = std::cos(theta), s = std::sin(theta);
    r[p * dim + p] = c;
    r[q * dim + q] = c;
    r[p * dim + q] = -s;
    r[q * dim + p] = s;
    return r;
}

inline std::vector<double> matmul(const std::vector<double>& A, const std::vector<double>& B,
                                  std::size_t n, std::size_t k, std::size_t m) {
    std::vector<double> C(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double a = A[i * k + j];
            for (std::size_t l = 0; l < m; ++l) C[i * m + l] += a * B[j * m + l];
        }
    return C;
}

}  // namespace detail

inline TaskGenerator make_task_generator(const SyntheticTaskSpec& spec) {
    TaskGenerator gen;
    const auto clusters = spec.clusters();
    int n_clusters = 0;
    for (int c : clusters) n_clusters = std::max(n_clusters, c + 1);

    RngStream latent = derive_stream(spec.seed, {kTagLatent, 0});
    gen.feature_map = detail::gaussian_matrix(latent, spec.hidden_dim, spec.input_dim,
                                              1.0 / std::sqrt(static_cast<double>(spec.input_dim)));
    gen.cluster_map.resize(static_cast<std::size_t>(n_clusters));
    for (int c = 0; c < n_clusters; ++c) {
        RngStream s = derive_stream(spec.seed, {kTagLatent, 1, static_cast<std::uint64_t>(c)});
        gen.cluster_map[static_cast<std::size_t>(c)] = detail::gaussian_matrix(
            s, spec.output_dim, spec.hidden_dim, 1.0 / std::sqrt(static_cast<double>(spec.hidden_dim)));
    }
    gen.activity_map.resize(static_cast<std::size_t>(spec.n_activities));
    for (int a = 0; a < spec.n_activities; ++a) {
        RngStream s = derive_stream(spec.seed, {kTagLatent, 2, static_cast<std::uint64_t>(a)});
        const auto rot = detail::small_rotation(s, spec.output_dim, spec.rotation);
        gen.activity_map[static_cast<std::size_t>(a)] =
            detail::matmul(rot, gen.cluster_map[static_cast<std::size_t>(clusters[static_cast<std::size_t>(a)])],
                           spec.output_dim, spec.output_dim, spec.hidden_dim);
    }
    return gen;
}

namespace detail {

// Inputs and per-activity noise come from separate streams so that an
// activity's data does not depend on which other activities exist.
struct ExampleStreams {
    RngStream x;
    std::vector<RngStream> noise;  // one per activity

    ExampleStreams(std::uint64_t seed, std::initializer_list<std::uint64_t> scope, int n)
        : x(derive_seed(seed, scope)) {
        const std::uint64_t base = derive_seed(seed, scope);
        for (int a = 0; a < n; ++a)
            noise.emplace_back(derive_seed(base, {0xA0, static_cast<std::uint64_t>(a)}));
    }
};

inline void draw_example(const SyntheticTaskSpec& spec, const TaskGenerator& gen,
                         const std::vector<double>& shift, ExampleStreams& streams, Batch& batch,
                         std::size_t row) {
    const std::size_t d = spec.input_dim, o = spec.output_dim;
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = shift[i] + streams.x.normal();
    std::copy(x.begin(), x.end(), batch.features.begin() + row * d);

    std::vector<double> phi;
    gen.latent(x, d, spec.hidden_dim, phi);
    for (int a = 0; a < spec.n_activities; ++a) {
        const auto& M = gen.activity_map[static_cast<std::size_t>(a)];
        RngStream& noise = streams.noise[static_cast<std::size_t>(a)];
        std::vector<double> y(o, 0.0);
        for (std::size_t r = 0; r < o; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < spec.hidden_dim; ++c) acc += M[r * spec.hidden_dim + c] * phi[c];
            y[r] = acc + spec.noise_std * noise.normal();
        }
        if (spec.loss_of(a) == LossKind::squared_error) {
            std::copy(y.begin(), y.end(), batch.targets[a].begin() + row * o);
        } else {
            std::size_t best = 0;
            for (std::size_t r = 1; r < o; ++r)
                if (y[r] > y[best]) best = r;
            batch.labels[a][row] = static_cast<int>(best);
        }
    }
}

inline Batch empty_batch(const SyntheticTaskSpec& spec, std::size_t B) {
    Batch b;
    b.size = B;
    b.feat_dim = spec.input_dim;
    b.features.assign(B * spec.input_dim, 0.0);
    for (int a = 0; a < spec.n_activities; ++a) {
        if (spec.loss_of(a) == LossKind::squared_error)
            b.targets[a].assign(B * spec.output_dim, 0.0);
        else
            b.labels[a].assign(B, 0);
    }
    return b;
}

}  // namespace detail

// Builds the client population and held-out set. Every batch has exactly
// `batch_size` examples; client sizes vary by size_jitter so that
// aggregation weights are non-trivial. Fully determined by spec.seed.
inline ClientPool generate_population(const SyntheticTaskSpec& spec, int N,
                                      std::size_t examples_per_client, std::size_t batch_size,
                                      std::size_t test_examples = 512) {
    spec.validate();
    if (N < 1) throw std::invalid_argument("client count must be >= 1");
    if (examples_per_client < batch_size)
        throw std::invalid_argument("examples_per_client must be >= batch_size");

    ClientPool pool;
    pool.spec = spec;
    pool.batch_size = batch_size;
    pool.gen = make_task_generator(spec);

    pool.client_shifts.resize(static_cast<std::size_t>(N));
    for (int k = 0; k < N; ++k) {
        RngStream s = derive_stream(spec.seed, {kTagData, static_cast<std::uint64_t>(k), 0});
        auto& shift = pool.client_shifts[static_cast<std::size_t>(k)];
        shift.assign(spec.input_dim, 0.0);
        for (double& v : shift) v = spec.heterogeneity * s.normal();
    }

    for (int k = 0; k < N; ++k) {
        RngStream size_s = derive_stream(spec.seed, {kTagSize, static_cast<std::uint64_t>(k)});
        const double factor = size_s.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter);
        const std::size_t wanted = static_cast<std::size_t>(
            std::llround(factor * static_cast<double>(examples_per_client)));
        const std::size_t n_batches = std::max<std::size_t>(1, wanted / batch_size);

        ClientDataset ds;
        ds.client_id = k;
        detail::ExampleStreams streams(spec.seed, {kTagData, static_cast<std::uint64_t>(k), 1},
                                       spec.n_activities);
        for (std::size_t b = 0; b < n_batches; ++b) {
            Batch batch = detail::empty_batch(spec, batch_size);
            for (std::size_t e = 0; e < batch_size; ++e)
                detail::draw_example(spec, pool.gen, pool.client_shifts[static_cast<std::size_t>(k)],
                                     streams, batch, e);
            ds.batches.push_back(std::move(batch));
        }
        ds.n_examples = n_batches * batch_size;
        pool.clients.push_back(std::move(ds));
    }

    // Held-out set, disjoint from training by construction (own streams).
    // Examples cycle through the client shifts so the set covers the mixture.
    detail::ExampleStreams test(spec.seed, {kTagTest}, spec.n_activities);
    const std::size_t n_test_batches = std::max<std::size_t>(1, test_examples / batch_size);
    for (std::size_t b = 0; b < n_test_batches; ++b) {
        Batch batch = detail::empty_batch(spec, batch_size);
        for (std::size_t e = 0; e < batch_size; ++e) {
            const std::size_t idx = b * batch_size + e;
            detail::draw_example(spec, pool.gen,
                                 pool.client_shifts[idx % static_cast<std::size_t>(N)], test, batch, e);
        }
        pool.test_batches.push_back(std::move(batch));
    }
    return pool;
}

}  // namespace mtfl
