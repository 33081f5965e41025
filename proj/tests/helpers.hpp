#pragma once

#include <utility>
#include <vector>

#include "mtfl/data.hpp"
#include "mtfl/nn.hpp"

namespace testutil {

// A model whose whole trunk is the single scalar parameter `theta` (1x1
// linear layer, identity activation, no bias) and whose heads are frozen
// pass-through weights. With a batch of x = 1 and target t, activity losses
// are (w * theta - t)^2, which makes hand-computed cases exact.
inline mtfl::MultiTaskModel scalar_model(double theta,
                                         const std::vector<std::pair<int, double>>& head_weights) {
    mtfl::MultiTaskModel m;
    mtfl::DenseLayer trunk;
    trunk.W = mtfl::ParamBlock::matrix(1, 1);
    trunk.b = mtfl::ParamBlock::matrix(1, 1);
    trunk.W.values[0] = theta;
    trunk.has_bias = false;
    trunk.act = mtfl::Activation::identity;
    m.trunk.push_back(trunk);
    for (const auto& [id, w] : head_weights) {
        mtfl::Head h;
        h.activity = id;
        h.loss = mtfl::LossKind::squared_error;
        mtfl::DenseLayer l;
        l.W = mtfl::ParamBlock::matrix(1, 1);
        l.b = mtfl::ParamBlock::matrix(1, 1);
        l.W.values[0] = w;
        l.has_bias = false;
        l.act = mtfl::Activation::identity;
        h.layers.push_back(l);
        m.heads.push_back(h);
    }
    return m;
}

// Single example x = 1 with one scalar regression target per activity.
inline mtfl::Batch scalar_batch(const std::vector<std::pair<int, double>>& targets) {
    mtfl::Batch b;
    b.size = 1;
    b.feat_dim = 1;
    b.features = {1.0};
    for (const auto& [id, t] : targets) b.targets[id] = {t};
    return b;
}

inline double theta_of(const mtfl::MultiTaskModel& m) { return m.trunk.front().W.values[0]; }

// A pool of N identical single-batch clients holding the given batch.
inline mtfl::ClientPool cloned_pool(const mtfl::Batch& batch, int n_clients) {
    mtfl::ClientPool pool;
    pool.batch_size = batch.size;
    for (int k = 0; k < n_clients; ++k) {
        mtfl::ClientDataset ds;
        ds.client_id = k;
        ds.batches = {batch};
        ds.n_examples = batch.size;
        pool.clients.push_back(std::move(ds));
    }
    pool.test_batches = {batch};
    return pool;
}

}  // namespace testutil
