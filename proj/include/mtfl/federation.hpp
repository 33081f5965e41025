#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mtfl/affinity.hpp"
#include "mtfl/data.hpp"
#include "mtfl/nn.hpp"
#include "mtfl/rng.hpp"

namespace mtfl {

// K distinct client ids, uniform without replacement, in draw order.
inline std::vector<int> sample_clients(int N, int K, RngStream& rng) {
    if (K < 1 || K > N) throw std::invalid_argument("client sample size out of range");
    std::vector<int> ids(static_cast<std::size_t>(N));
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < K; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(N - i)));
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    ids.resize(static_cast<std::size_t>(K));
    return ids;
}

// Aggregation weights proportional to the selected clients' dataset sizes,
// renormalized over the selection.
inline std::vector<double> fedavg_weights(const ClientPool& pool, const std::vector<int>& selected) {
    double total = 0.0;
    for (int id : selected) total += static_cast<double>(pool.clients.at(static_cast<std::size_t>(id)).n_examples);
    std::vector<double> w;
    w.reserve(selected.size());
    for (int id : selected)
        w.push_back(static_cast<double>(pool.clients.at(static_cast<std::size_t>(id)).n_examples) / total);
    return w;
}

// Affinity measurement settings for one local training pass.
struct ProbePass {
    int frequency = 5;
    double lookahead_lr = 0.0;
};

struct LocalTrainResult {
    MultiTaskModel model;
    std::map<int, double> mean_train_loss;  // per activity, over all processed batches
    AffinityAccumulator affinity;           // empty unless probing
    std::size_t batches_processed = 0;
};

namespace detail {

inline void require_targets(const MultiTaskModel& model, const ClientDataset& ds) {
    if (ds.batches.empty()) throw std::invalid_argument("client dataset has no batches");
    const Batch& b = ds.batches.front();
    for (int a : model.activity_ids())
        if (!b.targets.count(a) && !b.labels.count(a))
            throw std::invalid_argument("dataset missing targets for activity " + std::to_string(a));
}

}  // namespace detail

// E local epochs of minibatch SGD on a copy of `global`. Batch order is
// reshuffled every epoch from the caller-supplied seed; when probing, one
// affinity time-step is taken every `frequency` batches, on the batch state
// before that batch's own update. The input model is never mutated.
inline LocalTrainResult local_train(const MultiTaskModel& global, const ClientDataset& ds, int E,
                                    double lr, const HyperParams& hp, const ProbePass* probe,
                                    std::uint64_t shuffle_seed, WorkMeter* train_m = nullptr,
                                    WorkMeter* probe_m = nullptr) {
    if (E < 0) throw std::invalid_argument("local epochs must be >= 0");
    detail::require_targets(global, ds);

    LocalTrainResult res;
    res.model = global;
    const int n = static_cast<int>(global.heads.size());
    if (probe) res.affinity = AffinityAccumulator(n);

    std::map<int, double> loss_sums;
    for (int e = 0; e < E; ++e) {
        RngStream order_rng(derive_seed(shuffle_seed, {kTagShuffle, static_cast<std::uint64_t>(e)}));
        const std::vector<std::size_t> order = order_rng.permutation(ds.batches.size());
        for (std::size_t p = 0; p < order.size(); ++p) {
            const Batch& batch = ds.batches[order[p]];
            if (probe && (p + 1) % static_cast<std::size_t>(probe->frequency) == 0)
                accumulate_affinities(res.affinity, res.model, batch, probe->lookahead_lr, probe_m);
            GradMask mask;
            const JointLosses jl = joint_backward(res.model, batch, mask, train_m);
            sgd_step(res.model, mask, lr, hp);
            for (const auto& [a, l] : jl.by_activity) loss_sums[a] += l;
            ++res.batches_processed;
        }
    }
    if (res.batches_processed > 0)
        for (const auto& [a, s] : loss_sums)
            res.mean_train_loss[a] = s / static_cast<double>(res.batches_processed);
    return res;
}

// Weighted mean of aggregation-compatible models. Momentum buffers and
// gradients of the result are zero; clients re-derive optimizer state locally.
inline MultiTaskModel fedavg(const std::vector<MultiTaskModel>& models,
                             const std::vector<double>& weights) {
    if (models.empty()) throw std::invalid_argument("fedavg needs at least one model");
    if (models.size() != weights.size())
        throw std::invalid_argument("fedavg weight count does not match model count");
    double sum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("fedavg weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("fedavg weights must sum to 1");
    for (const auto& m : models)
        if (!m.aggregation_compatible(models.front()))
            throw std::invalid_argument("fedavg models are not aggregation-compatible");

    MultiTaskModel out = models.front();
    out.for_each_block([](ParamBlock& b) {
        std::fill(b.values.begin(), b.values.end(), 0.0);
        std::fill(b.grad.begin(), b.grad.end(), 0.0);
        std::fill(b.momentum.begin(), b.momentum.end(), 0.0);
    });
    for (std::size_t k = 0; k < models.size(); ++k) {
        const double w = weights[k];
        std::size_t block = 0;
        std::vector<ParamBlock*> dst;
        out.for_each_block([&](ParamBlock& b) { dst.push_back(&b); });
        models[k].for_each_block([&](const ParamBlock& b) {
            ParamBlock& d = *dst[block++];
            for (std::size_t i = 0; i < b.size(); ++i) d.values[i] += w * b.values[i];
        });
    }
    out.for_each_block([](ParamBlock& b) {
        for (double v : b.values)
            if (!std::isfinite(v)) throw std::runtime_error("non-finite parameter after fedavg");
    });
    out.bump_version();
    return out;
}

// A set of models jointly covering a set of activities.
struct ModelGroup {
    std::vector<int> activities;
    const MultiTaskModel* model = nullptr;
};

struct EvalResult {
    std::map<int, double> by_activity;
    double total = 0.0;
};

// Mean per-example test loss of every activity over the full held-out set;
// each activity must be served by exactly one model.
inline EvalResult evaluate(const std::vector<ModelGroup>& groups, const std::vector<Batch>& test,
                           WorkMeter* m = nullptr) {
    if (test.empty()) throw std::invalid_argument("empty test set");
    std::map<int, int> owners;
    for (const auto& g : groups)
        for (int a : g.activities) {
            owners[a] += 1;
            if (!g.model->has_activity(a))
                throw std::invalid_argument("group model lacks activity " + std::to_string(a));
        }
    for (const auto& [a, c] : owners)
        if (c != 1) throw std::invalid_argument("activity " + std::to_string(a) + " served by " +
                                                std::to_string(c) + " models");

    EvalResult res;
    for (const auto& g : groups) {
        for (const Batch& b : test) {
            const std::vector<double> t_out = trunk_output(*g.model, nullptr, b, m);
            for (int a : g.activities) {
                const double loss = head_loss_on(*g.model, a, t_out, b, m);
                res.by_activity[a] += loss * static_cast<double>(b.size);
            }
        }
    }
    double total_examples = 0.0;
    for (const Batch& b : test) total_examples += static_cast<double>(b.size);
    for (auto& [a, l] : res.by_activity) {
        l /= total_examples;
        res.total += l;
    }
    return res;
}

inline EvalResult evaluate(const MultiTaskModel& model, const std::vector<Batch>& test,
                           WorkMeter* m = nullptr) {
    return evaluate({ModelGroup{model.activity_ids(), &model}}, test, m);
}

}  // namespace mtfl
