#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "mtfl/nn.hpp"
#include "mtfl/partition.hpp"
#include "mtfl/rng.hpp"

namespace mtfl {

// Central finite differences over every parameter reachable from one
// activity's loss, compared against backward(). Independent of the
// backpropagation path: only forward_loss is used on the perturbed model.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t params_checked = 0;
};

inline GradCheckResult gradient_check(MultiTaskModel& model, int activity, const Batch& batch,
                                      double step = 1e-5) {
    ForwardCache cache;
    forward_loss(model, activity, batch, &cache);
    backward(model, cache);

    std::vector<ParamBlock*> blocks;
    for (auto& l : model.trunk) {
        blocks.push_back(&l.W);
        if (l.has_bias) blocks.push_back(&l.b);
    }
    for (auto& l : model.head(activity).layers) {
        blocks.push_back(&l.W);
        if (l.has_bias) blocks.push_back(&l.b);
    }

    GradCheckResult res;
    for (ParamBlock* b : blocks) {
        for (std::size_t i = 0; i < b->size(); ++i) {
            const double saved = b->values[i];
            b->values[i] = saved + step;
            const double up = forward_loss(model, activity, batch);
            b->values[i] = saved - step;
            const double down = forward_loss(model, activity, batch);
            b->values[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double an = b->grad[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.params_checked;
        }
    }
    return res;
}

// Random tiny model + batch for oracle trials: up to 3 trunk layers of at
// most 16 units, one regression and one classification head.
inline GradCheckResult gradient_oracle_trial(std::uint64_t seed) {
    RngStream rng(seed);
    ModelArch arch;
    arch.input_dim = 1 + rng.next_below(6);
    const std::size_t n_layers = 1 + rng.next_below(3);
    arch.trunk_widths.clear();
    for (std::size_t l = 0; l < n_layers; ++l) arch.trunk_widths.push_back(1 + rng.next_below(16));

    std::vector<HeadSpec> heads;
    heads.push_back({0, 1 + rng.next_below(4), LossKind::squared_error});
    heads.push_back({1, 2 + rng.next_below(3), LossKind::cross_entropy});
    MultiTaskModel model = make_multitask_model(arch, heads, RngStream(mix64(seed)));

    Batch batch;
    batch.size = 1 + rng.next_below(4);
    batch.feat_dim = arch.input_dim;
    batch.features.resize(batch.size * batch.feat_dim);
    for (double& v : batch.features) v = rng.normal();
    const std::size_t reg_out = model.head(0).layers.back().out();
    batch.targets[0].resize(batch.size * reg_out);
    for (double& v : batch.targets[0]) v = rng.normal();
    const std::size_t cls_out = model.head(1).layers.back().out();
    batch.labels[1].resize(batch.size);
    for (int& v : batch.labels[1]) v = static_cast<int>(rng.next_below(cls_out));

    GradCheckResult worst;
    for (int a : {0, 1}) {
        const GradCheckResult r = gradient_check(model, a, batch);
        worst.max_rel_err = std::max(worst.max_rel_err, r.max_rel_err);
        worst.params_checked += r.params_checked;
    }
    return worst;
}

inline GradCheckResult run_gradient_oracle(int trials, std::uint64_t seed) {
    GradCheckResult worst;
    for (int t = 0; t < trials; ++t) {
        const GradCheckResult r = gradient_oracle_trial(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
        worst.max_rel_err = std::max(worst.max_rel_err, r.max_rel_err);
        worst.params_checked += r.params_checked;
    }
    return worst;
}

// Random affinity matrix with a consistent self-affinity diagonal.
inline AffinityMatrix random_affinity_matrix(int n, RngStream& rng) {
    AffinityMatrix m;
    m.n = n;
    m.s.assign(static_cast<std::size_t>(n) * n, 0.0);
    m.missing.assign(static_cast<std::size_t>(n) * n, false);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) m.s[static_cast<std::size_t>(i) * n + j] = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < n; ++i) m.s[static_cast<std::size_t>(i) * n + i] = self_affinity(m.s, n, i);
    return m;
}

struct PartitionOracleResult {
    int cases = 0;
    int mismatches = 0;
    double worst_gap = 0.0;
};

// Exhaustive enumeration vs branch-and-bound over random matrices.
inline PartitionOracleResult run_partition_oracle(int n, int m, int cases, std::uint64_t seed) {
    PartitionOracleResult res;
    for (int c = 0; c < cases; ++c) {
        RngStream rng(derive_seed(seed, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(m),
                                         static_cast<std::uint64_t>(c)}));
        const AffinityMatrix mat = random_affinity_matrix(n, rng);
        const Partition oracle = enumerate_best(mat, m);
        const Partition fast = branch_and_bound_best(mat, m);
        const double gap = std::abs(oracle.total_score - fast.total_score);
        res.worst_gap = std::max(res.worst_gap, gap);
        if (gap > 1e-12) ++res.mismatches;
        ++res.cases;
    }
    return res;
}

}  // namespace mtfl
