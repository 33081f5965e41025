#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtfl/ledger.hpp"
#include "mtfl/rng.hpp"

namespace mtfl {

enum class Activation { identity, tanh_fn };
enum class LossKind { squared_error, cross_entropy };

// One batch of training data. Regression activities carry dense targets,
// classification activities carry class labels; an activity appears in
// exactly one of the two maps.
struct Batch {
    std::size_t size = 0;
    std::size_t feat_dim = 0;
    std::vector<double> features;                // size x feat_dim, row-major
    std::map<int, std::vector<double>> targets;  // activity -> size x out_dim
    std::map<int, std::vector<int>> labels;      // activity -> size
};

// A flat parameter array with its gradient and momentum accumulators.
struct ParamBlock {
    std::vector<double> values;
    std::vector<double> grad;
    std::vector<double> momentum;
    std::size_t rows = 0, cols = 0;

    static ParamBlock matrix(std::size_t r, std::size_t c) {
        ParamBlock b;
        b.rows = r;
        b.cols = c;
        b.values.assign(r * c, 0.0);
        b.grad.assign(r * c, 0.0);
        b.momentum.assign(r * c, 0.0);
        return b;
    }
    std::size_t size() const { return values.size(); }
};

struct DenseLayer {
    ParamBlock W;  // out x in
    ParamBlock b;  // out x 1, unused when has_bias is false
    bool has_bias = true;
    Activation act = Activation::identity;

    std::size_t in() const { return W.cols; }
    std::size_t out() const { return W.rows; }
    std::size_t macs() const { return W.rows * W.cols; }  // per example
    std::size_t param_count() const { return W.size() + (has_bias ? b.size() : 0); }
};

struct Head {
    int activity = -1;
    std::vector<DenseLayer> layers;
    LossKind loss = LossKind::squared_error;
};

struct HyperParams {
    double eta0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;

    void validate() const {
        if (eta0 <= 0.0) throw std::invalid_argument("eta0 must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    }
};

// Shared trunk plus one head per activity. Models are plain values: copyable,
// comparable by shape, safe to hand to another thread.
class MultiTaskModel {
public:
    std::vector<DenseLayer> trunk;
    std::vector<Head> heads;  // kept sorted by activity id

    std::uint64_t version() const { return version_; }
    void bump_version() { ++version_; }

    bool has_activity(int activity) const {
        for (const auto& h : heads)
            if (h.activity == activity) return true;
        return false;
    }

    const Head& head(int activity) const {
        for (const auto& h : heads)
            if (h.activity == activity) return h;
        throw std::invalid_argument("unknown activity id " + std::to_string(activity));
    }
    Head& head(int activity) {
        for (auto& h : heads)
            if (h.activity == activity) return h;
        throw std::invalid_argument("unknown activity id " + std::to_string(activity));
    }

    std::vector<int> activity_ids() const {
        std::vector<int> ids;
        ids.reserve(heads.size());
        for (const auto& h : heads) ids.push_back(h.activity);
        return ids;
    }

    std::size_t input_dim() const { return trunk.empty() ? 0 : trunk.front().in(); }
    std::size_t trunk_output_dim() const { return trunk.empty() ? input_dim() : trunk.back().out(); }

    std::size_t trunk_param_count() const {
        std::size_t p = 0;
        for (const auto& l : trunk) p += l.param_count();
        return p;
    }
    std::size_t trunk_macs() const {
        std::size_t m = 0;
        for (const auto& l : trunk) m += l.macs();
        return m;
    }

    // Aggregation compatibility: identical layer shapes and activity ids.
    bool aggregation_compatible(const MultiTaskModel& o) const {
        if (trunk.size() != o.trunk.size() || heads.size() != o.heads.size()) return false;
        for (std::size_t i = 0; i < trunk.size(); ++i)
            if (trunk[i].W.rows != o.trunk[i].W.rows || trunk[i].W.cols != o.trunk[i].W.cols ||
                trunk[i].has_bias != o.trunk[i].has_bias)
                return false;
        for (std::size_t i = 0; i < heads.size(); ++i) {
            if (heads[i].activity != o.heads[i].activity ||
                heads[i].layers.size() != o.heads[i].layers.size())
                return false;
            for (std::size_t l = 0; l < heads[i].layers.size(); ++l)
                if (heads[i].layers[l].W.rows != o.heads[i].layers[l].W.rows ||
                    heads[i].layers[l].W.cols != o.heads[i].layers[l].W.cols ||
                    heads[i].layers[l].has_bias != o.heads[i].layers[l].has_bias)
                    return false;
        }
        return true;
    }

    template <typename F>
    void for_each_block(F&& f) {
        for (auto& l : trunk) {
            f(l.W);
            if (l.has_bias) f(l.b);
        }
        for (auto& h : heads)
            for (auto& l : h.layers) {
                f(l.W);
                if (l.has_bias) f(l.b);
            }
    }
    template <typename F>
    void for_each_block(F&& f) const {
        for (const auto& l : trunk) {
            f(l.W);
            if (l.has_bias) f(l.b);
        }
        for (const auto& h : heads)
            for (const auto& l : h.layers) {
                f(l.W);
                if (l.has_bias) f(l.b);
            }
    }

    // FNV-1a over the raw bits of values, gradients, and momentum buffers.
    std::uint64_t state_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto feed = [&h](const std::vector<double>& v) {
            for (double d : v) {
                std::uint64_t bits;
                std::memcpy(&bits, &d, sizeof bits);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xffu;
                    h *= 1099511628211ULL;
                }
            }
        };
        for_each_block([&](const ParamBlock& b) {
            feed(b.values);
            feed(b.grad);
            feed(b.momentum);
        });
        return h;
    }

    void zero_momentum() {
        for_each_block([](ParamBlock& b) { std::fill(b.momentum.begin(), b.momentum.end(), 0.0); });
    }
    void zero_grad() {
        for_each_block([](ParamBlock& b) { std::fill(b.grad.begin(), b.grad.end(), 0.0); });
    }

private:
    std::uint64_t version_ = 0;
};

struct HeadSpec {
    int activity = -1;
    std::size_t output_dim = 1;
    LossKind loss = LossKind::squared_error;
};

struct ModelArch {
    std::size_t input_dim = 8;
    std::vector<std::size_t> trunk_widths = {32, 32};  // tanh layers
};

namespace detail {

inline void init_layer(DenseLayer& l, RngStream& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in() + l.out()));
    for (double& w : l.W.values) w = rng.uniform(-bound, bound);
    // biases start at zero
}

}  // namespace detail

// Builds a trunk of tanh layers plus one linear head per activity, with
// Glorot-uniform weights drawn from `rng` in a fixed order (trunk first,
// then heads by ascending activity id).
inline MultiTaskModel make_multitask_model(const ModelArch& arch, std::vector<HeadSpec> head_specs,
                                           RngStream rng) {
    if (arch.input_dim == 0) throw std::invalid_argument("input_dim must be > 0");
    if (head_specs.empty()) throw std::invalid_argument("at least one activity required");
    std::sort(head_specs.begin(), head_specs.end(),
              [](const HeadSpec& a, const HeadSpec& b) { return a.activity < b.activity; });
    for (std::size_t i = 1; i < head_specs.size(); ++i)
        if (head_specs[i].activity == head_specs[i - 1].activity)
            throw std::invalid_argument("duplicate activity id " + std::to_string(head_specs[i].activity));

    MultiTaskModel m;
    std::size_t in = arch.input_dim;
    for (std::size_t w : arch.trunk_widths) {
        DenseLayer l;
        l.W = ParamBlock::matrix(w, in);
        l.b = ParamBlock::matrix(w, 1);
        l.act = Activation::tanh_fn;
        detail::init_layer(l, rng);
        m.trunk.push_back(std::move(l));
        in = w;
    }
    const std::size_t trunk_out = in;
    for (const HeadSpec& hs : head_specs) {
        Head h;
        h.activity = hs.activity;
        h.loss = hs.loss;
        DenseLayer l;
        l.W = ParamBlock::matrix(hs.output_dim, trunk_out);
        l.b = ParamBlock::matrix(hs.output_dim, 1);
        l.act = Activation::identity;
        detail::init_layer(l, rng);
        h.layers.push_back(std::move(l));
        m.heads.push_back(std::move(h));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward internals operating on raw arrays, so the same code path
// serves both the model's own parameters and a lookahead snapshot of them.

namespace detail {

inline void apply_activation(Activation act, std::vector<double>& v) {
    if (act == Activation::tanh_fn)
        for (double& x : v) x = std::tanh(x);
}

inline void dense_forward(const double* W, const double* b, std::size_t out, std::size_t in,
                          Activation act, const std::vector<double>& x, std::size_t B,
                          std::vector<double>& y) {
    y.assign(B * out, 0.0);
    for (std::size_t e = 0; e < B; ++e) {
        const double* xe = x.data() + e * in;
        double* ye = y.data() + e * out;
        for (std::size_t r = 0; r < out; ++r) {
            double acc = b ? b[r] : 0.0;
            const double* Wr = W + r * in;
            for (std::size_t c = 0; c < in; ++c) acc += Wr[c] * xe[c];
            ye[r] = acc;
        }
    }
    apply_activation(act, y);
}

// Backward through one dense layer. `x` is the layer input, `y` its
// post-activation output, `dy` the loss gradient at the output. Weight and
// bias gradients are accumulated into gW/gb when non-null; the gradient at
// the input is produced into dx when non-null.
inline void dense_backward(const double* W, std::size_t out, std::size_t in, bool has_bias,
                           Activation act, const std::vector<double>& x,
                           const std::vector<double>& y, const std::vector<double>& dy,
                           std::size_t B, double* gW, double* gb, std::vector<double>* dx) {
    std::vector<double> dz(B * out);
    for (std::size_t i = 0; i < B * out; ++i)
        dz[i] = act == Activation::tanh_fn ? dy[i] * (1.0 - y[i] * y[i]) : dy[i];
    if (gW) {
        for (std::size_t e = 0; e < B; ++e) {
            const double* xe = x.data() + e * in;
            const double* dze = dz.data() + e * out;
            for (std::size_t r = 0; r < out; ++r) {
                double* gWr = gW + r * in;
                const double d = dze[r];
                for (std::size_t c = 0; c < in; ++c) gWr[c] += d * xe[c];
                if (has_bias && gb) gb[r] += d;
            }
        }
    }
    if (dx) {
        dx->assign(B * in, 0.0);
        for (std::size_t e = 0; e < B; ++e) {
            const double* dze = dz.data() + e * out;
            double* dxe = dx->data() + e * in;
            for (std::size_t r = 0; r < out; ++r) {
                const double d = dze[r];
                const double* Wr = W + r * in;
                for (std::size_t c = 0; c < in; ++c) dxe[c] += Wr[c] * d;
            }
        }
    }
}

// Batch-mean loss and its gradient at the predictions.
inline double loss_and_grad(LossKind kind, const std::vector<double>& pred, std::size_t B,
                            std::size_t out, const Batch& batch, int activity,
                            std::vector<double>* dpred) {
    double loss = 0.0;
    if (dpred) dpred->assign(B * out, 0.0);
    if (kind == LossKind::squared_error) {
        const auto it = batch.targets.find(activity);
        if (it == batch.targets.end())
            throw std::invalid_argument("missing regression targets for activity " + std::to_string(activity));
        const std::vector<double>& t = it->second;
        if (t.size() != B * out) throw std::invalid_argument("target shape mismatch");
        for (std::size_t i = 0; i < B * out; ++i) {
            const double r = pred[i] - t[i];
            loss += r * r;
            if (dpred) (*dpred)[i] = 2.0 * r / static_cast<double>(B);
        }
        loss /= static_cast<double>(B);
    } else {
        const auto it = batch.labels.find(activity);
        if (it == batch.labels.end())
            throw std::invalid_argument("missing class labels for activity " + std::to_string(activity));
        const std::vector<int>& lab = it->second;
        if (lab.size() != B) throw std::invalid_argument("label count mismatch");
        for (std::size_t e = 0; e < B; ++e) {
            const double* pe = pred.data() + e * out;
            const int y = lab[e];
            if (y < 0 || static_cast<std::size_t>(y) >= out)
                throw std::invalid_argument("class label out of range");
            double mx = pe[0];
            for (std::size_t d = 1; d < out; ++d) mx = std::max(mx, pe[d]);
            double z = 0.0;
            for (std::size_t d = 0; d < out; ++d) z += std::exp(pe[d] - mx);
            loss += -(pe[y] - mx - std::log(z));
            if (dpred) {
                double* de = dpred->data() + e * out;
                for (std::size_t d = 0; d < out; ++d)
                    de[d] = (std::exp(pe[d] - mx) / z - (static_cast<std::size_t>(y) == d ? 1.0 : 0.0)) /
                            static_cast<double>(B);
            }
        }
        loss /= static_cast<double>(B);
    }
    return loss;
}

}  // namespace detail

// Values of the trunk parameters only; the result of a lookahead step.
struct TrunkSnapshot {
    std::vector<std::vector<double>> weights;  // per trunk layer
    std::vector<std::vector<double>> biases;
};

// Activation record produced by forward_loss, sufficient for an exact
// backward pass. Tied to the model version it was computed from.
struct ForwardCache {
    std::uint64_t model_version = 0;
    int activity = -1;
    std::size_t batch_size = 0;
    std::vector<double> input;
    std::vector<std::vector<double>> trunk_out;  // post-activation, per layer
    std::vector<std::vector<double>> head_out;
    double loss = 0.0;
    const Batch* batch = nullptr;
};

namespace detail {

inline void run_trunk(const std::vector<DenseLayer>& trunk, const TrunkSnapshot* snap,
                      const Batch& batch, std::vector<std::vector<double>>& outs, WorkMeter* m) {
    if (!trunk.empty() && batch.feat_dim != trunk.front().in())
        throw std::invalid_argument("batch feature width does not match trunk input");
    outs.clear();
    const std::vector<double>* cur = &batch.features;
    for (std::size_t i = 0; i < trunk.size(); ++i) {
        const DenseLayer& l = trunk[i];
        const double* W = snap ? snap->weights[i].data() : l.W.values.data();
        const double* b = l.has_bias ? (snap ? snap->biases[i].data() : l.b.values.data()) : nullptr;
        std::vector<double> y;
        dense_forward(W, b, l.out(), l.in(), l.act, *cur, batch.size, y);
        if (m) m->add_forward_macs(static_cast<double>(batch.size * l.macs()));
        outs.push_back(std::move(y));
        cur = &outs.back();
    }
}

inline double run_head(const Head& h, const std::vector<double>& trunk_out, const Batch& batch,
                       std::vector<std::vector<double>>* outs, std::vector<double>* dpred,
                       WorkMeter* m) {
    const std::vector<double>* cur = &trunk_out;
    std::vector<std::vector<double>> local;
    std::vector<std::vector<double>>& store = outs ? *outs : local;
    store.clear();
    for (const DenseLayer& l : h.layers) {
        std::vector<double> y;
        dense_forward(l.W.values.data(), l.has_bias ? l.b.values.data() : nullptr, l.out(), l.in(),
                      l.act, *cur, batch.size, y);
        if (m) m->add_forward_macs(static_cast<double>(batch.size * l.macs()));
        store.push_back(std::move(y));
        cur = &store.back();
    }
    const std::size_t out_dim = h.layers.back().out();
    return loss_and_grad(h.loss, *cur, batch.size, out_dim, batch, h.activity, dpred);
}

}  // namespace detail

// Batch-mean loss of one activity. When `cache` is given it records the
// activations needed for backward().
inline double forward_loss(const MultiTaskModel& model, int activity, const Batch& batch,
                           ForwardCache* cache = nullptr, WorkMeter* m = nullptr) {
    const Head& h = model.head(activity);
    if (batch.size == 0) throw std::invalid_argument("empty batch");
    std::vector<std::vector<double>> trunk_outs;
    detail::run_trunk(model.trunk, nullptr, batch, trunk_outs, m);
    const std::vector<double>& t_out = trunk_outs.empty() ? batch.features : trunk_outs.back();
    double loss;
    if (cache) {
        cache->model_version = model.version();
        cache->activity = activity;
        cache->batch_size = batch.size;
        cache->input = batch.features;
        cache->trunk_out = std::move(trunk_outs);
        cache->batch = &batch;
        loss = detail::run_head(h, t_out, batch, &cache->head_out, nullptr, m);
        cache->loss = loss;
    } else {
        loss = detail::run_head(h, t_out, batch, nullptr, nullptr, m);
    }
    if (m) m->loss_evals += 1.0;
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
    return loss;
}

// Which blocks hold freshly computed gradients.
struct GradMask {
    bool trunk = false;
    std::vector<int> heads;
};

namespace detail {

// Backward from the loss of `h` given trunk outputs; head gradients are
// written into the model when accumulate_head is true, and the gradient at
// the trunk output is added to dtrunk_out.
inline void head_backward(Head& h, const std::vector<double>& trunk_out,
                          const std::vector<std::vector<double>>& head_outs, const Batch& batch,
                          std::vector<double>& dtrunk_out, bool accumulate_head, WorkMeter* m) {
    const std::size_t B = batch.size;
    std::vector<double> dy;
    detail::loss_and_grad(h.loss, head_outs.back(), B, h.layers.back().out(), batch, h.activity, &dy);
    for (std::size_t li = h.layers.size(); li-- > 0;) {
        DenseLayer& l = h.layers[li];
        const std::vector<double>& x = li == 0 ? trunk_out : head_outs[li - 1];
        std::vector<double> dx;
        detail::dense_backward(l.W.values.data(), l.out(), l.in(), l.has_bias, l.act, x,
                               head_outs[li], dy, B, accumulate_head ? l.W.grad.data() : nullptr,
                               accumulate_head && l.has_bias ? l.b.grad.data() : nullptr, &dx);
        if (m && accumulate_head) m->add_grad_params(static_cast<double>(l.param_count()));
        dy = std::move(dx);
    }
    for (std::size_t i = 0; i < dtrunk_out.size(); ++i) dtrunk_out[i] += dy[i];
}

// Backward through the trunk given the gradient at its output. Writes into
// `gW`/`gb` sinks aligned with trunk layers.
inline void trunk_backward(const std::vector<DenseLayer>& trunk, const std::vector<double>& input,
                           const std::vector<std::vector<double>>& trunk_outs, std::size_t B,
                           std::vector<double> dout, std::vector<std::vector<double>>* gW,
                           std::vector<std::vector<double>>* gb, WorkMeter* m) {
    for (std::size_t li = trunk.size(); li-- > 0;) {
        const DenseLayer& l = trunk[li];
        const std::vector<double>& x = li == 0 ? input : trunk_outs[li - 1];
        std::vector<double> dx;
        detail::dense_backward(l.W.values.data(), l.out(), l.in(), l.has_bias, l.act, x,
                               trunk_outs[li], dout, B, gW ? (*gW)[li].data() : nullptr,
                               gb && l.has_bias ? (*gb)[li].data() : nullptr,
                               li > 0 ? &dx : nullptr);
        if (m) m->add_grad_params(static_cast<double>(l.param_count()));
        dout = std::move(dx);
    }
}

}  // namespace detail

// Exact gradients of the batch-mean loss recorded in `cache`; fills the grad
// buffers of the trunk and of that activity's head only.
inline GradMask backward(MultiTaskModel& model, const ForwardCache& cache, WorkMeter* m = nullptr) {
    if (cache.model_version != model.version())
        throw std::runtime_error("stale forward cache: model mutated since forward_loss");
    Head& h = model.head(cache.activity);
    for (auto& l : model.trunk) {
        std::fill(l.W.grad.begin(), l.W.grad.end(), 0.0);
        std::fill(l.b.grad.begin(), l.b.grad.end(), 0.0);
    }
    for (auto& l : h.layers) {
        std::fill(l.W.grad.begin(), l.W.grad.end(), 0.0);
        std::fill(l.b.grad.begin(), l.b.grad.end(), 0.0);
    }
    const std::vector<double>& t_out = cache.trunk_out.empty() ? cache.input : cache.trunk_out.back();
    std::vector<double> dtrunk(t_out.size(), 0.0);
    detail::head_backward(h, t_out, cache.head_out, *cache.batch, dtrunk, true, m);
    if (!model.trunk.empty()) {
        std::vector<std::vector<double>> gW(model.trunk.size()), gb(model.trunk.size());
        for (std::size_t i = 0; i < model.trunk.size(); ++i) {
            gW[i].assign(model.trunk[i].W.size(), 0.0);
            gb[i].assign(model.trunk[i].b.size(), 0.0);
        }
        detail::trunk_backward(model.trunk, cache.input, cache.trunk_out, cache.batch_size, dtrunk,
                               &gW, &gb, m);
        for (std::size_t i = 0; i < model.trunk.size(); ++i) {
            model.trunk[i].W.grad = std::move(gW[i]);
            model.trunk[i].b.grad = std::move(gb[i]);
        }
    }
    if (m) m->loss_evals += 1.0;
    GradMask mask;
    mask.trunk = true;
    mask.heads = {cache.activity};
    return mask;
}

struct JointLosses {
    std::map<int, double> by_activity;
    double sum = 0.0;
};

// One multi-task training step's gradients: a single trunk pass shared by all
// heads, each head evaluated on its own targets, gradients of the summed
// batch-mean losses written into the model.
inline JointLosses joint_backward(MultiTaskModel& model, const Batch& batch, GradMask& mask,
                                  WorkMeter* m = nullptr) {
    if (batch.size == 0) throw std::invalid_argument("empty batch");
    model.zero_grad();
    std::vector<std::vector<double>> trunk_outs;
    detail::run_trunk(model.trunk, nullptr, batch, trunk_outs, m);
    const std::vector<double>& t_out = trunk_outs.empty() ? batch.features : trunk_outs.back();
    std::vector<double> dtrunk(t_out.size(), 0.0);

    JointLosses res;
    mask.trunk = true;
    mask.heads.clear();
    for (auto& h : model.heads) {
        std::vector<std::vector<double>> head_outs;
        const double loss = detail::run_head(h, t_out, batch, &head_outs, nullptr, m);
        if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
        detail::head_backward(h, t_out, head_outs, batch, dtrunk, true, m);
        res.by_activity[h.activity] = loss;
        res.sum += loss;
        mask.heads.push_back(h.activity);
        if (m) m->loss_evals += 2.0;  // one loss evaluation forward + backward
    }
    if (!model.trunk.empty()) {
        std::vector<std::vector<double>> gW(model.trunk.size()), gb(model.trunk.size());
        for (std::size_t i = 0; i < model.trunk.size(); ++i) {
            gW[i].assign(model.trunk[i].W.size(), 0.0);
            gb[i].assign(model.trunk[i].b.size(), 0.0);
        }
        detail::trunk_backward(model.trunk, batch.features, trunk_outs, batch.size, dtrunk, &gW,
                               &gb, m);
        for (std::size_t i = 0; i < model.trunk.size(); ++i) {
            model.trunk[i].W.grad = std::move(gW[i]);
            model.trunk[i].b.grad = std::move(gb[i]);
        }
    }
    return res;
}

// Polynomial learning rate decay: eta0 * (1 - r/R)^0.9.
inline double poly_lr(int r, int R, double eta0) {
    if (R < 1) throw std::invalid_argument("total rounds must be >= 1");
    if (r < 0 || r > R) throw std::invalid_argument("round index out of range");
    return eta0 * std::pow(1.0 - static_cast<double>(r) / static_cast<double>(R), 0.9);
}

// SGD with momentum and weight decay, applied only to blocks in `mask`:
//   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
inline void sgd_step(MultiTaskModel& model, const GradMask& mask, double lr,
                     const HyperParams& hp) {
    auto step_block = [&](ParamBlock& b) {
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double v = hp.momentum * b.momentum[i] + (b.grad[i] + hp.weight_decay * b.values[i]);
            b.momentum[i] = v;
            b.values[i] -= lr * v;
            if (!std::isfinite(b.values[i])) throw std::runtime_error("non-finite parameter after sgd_step");
        }
    };
    auto step_layer = [&](DenseLayer& l) {
        step_block(l.W);
        if (l.has_bias) step_block(l.b);
    };
    if (mask.trunk)
        for (auto& l : model.trunk) step_layer(l);
    for (int a : mask.heads)
        for (auto& l : model.head(a).layers) step_layer(l);
    model.bump_version();
}

// Trunk parameters after one plain gradient step (no momentum, no weight
// decay) on `activity`'s batch loss. The model itself, including its
// momentum buffers and gradients, is left untouched. The activity's own
// batch loss falls out of the same pass and is reported via `loss_out`.
inline TrunkSnapshot lookahead_shared_with_loss(const MultiTaskModel& model, int activity,
                                                const Batch& batch, double lr, double* loss_out,
                                                WorkMeter* m = nullptr) {
    const Head& h = model.head(activity);
    if (batch.size == 0) throw std::invalid_argument("empty batch");
    std::vector<std::vector<double>> trunk_outs;
    detail::run_trunk(model.trunk, nullptr, batch, trunk_outs, m);
    const std::vector<double>& t_out = trunk_outs.empty() ? batch.features : trunk_outs.back();

    std::vector<std::vector<double>> head_outs;
    const double loss = detail::run_head(h, t_out, batch, &head_outs, nullptr, m);
    if (loss_out) *loss_out = loss;
    std::vector<double> dtrunk(t_out.size(), 0.0);
    // const_cast is safe: accumulate_head=false means the head is only read.
    detail::head_backward(const_cast<Head&>(h), t_out, head_outs, batch, dtrunk, false, nullptr);

    std::vector<std::vector<double>> gW(model.trunk.size()), gb(model.trunk.size());
    for (std::size_t i = 0; i < model.trunk.size(); ++i) {
        gW[i].assign(model.trunk[i].W.size(), 0.0);
        gb[i].assign(model.trunk[i].b.size(), 0.0);
    }
    detail::trunk_backward(model.trunk, batch.features, trunk_outs, batch.size, dtrunk, &gW, &gb, m);
    if (m) m->loss_evals += 2.0;

    TrunkSnapshot snap;
    snap.weights.resize(model.trunk.size());
    snap.biases.resize(model.trunk.size());
    for (std::size_t i = 0; i < model.trunk.size(); ++i) {
        const DenseLayer& l = model.trunk[i];
        snap.weights[i] = l.W.values;
        snap.biases[i] = l.b.values;
        for (std::size_t k = 0; k < snap.weights[i].size(); ++k) snap.weights[i][k] -= lr * gW[i][k];
        if (l.has_bias)
            for (std::size_t k = 0; k < snap.biases[i].size(); ++k) snap.biases[i][k] -= lr * gb[i][k];
    }
    return snap;
}

inline TrunkSnapshot lookahead_shared(const MultiTaskModel& model, int activity, const Batch& batch,
                                      double lr, WorkMeter* m = nullptr) {
    return lookahead_shared_with_loss(model, activity, batch, lr, nullptr, m);
}

// Trunk output under a snapshot of trunk parameters (or the model's own when
// snap is null). Used to evaluate several heads from one trunk pass.
inline std::vector<double> trunk_output(const MultiTaskModel& model, const TrunkSnapshot* snap,
                                        const Batch& batch, WorkMeter* m = nullptr) {
    std::vector<std::vector<double>> outs;
    detail::run_trunk(model.trunk, snap, batch, outs, m);
    return outs.empty() ? batch.features : std::move(outs.back());
}

// Loss of one activity's head evaluated on a precomputed trunk output.
inline double head_loss_on(const MultiTaskModel& model, int activity,
                           const std::vector<double>& trunk_out, const Batch& batch,
                           WorkMeter* m = nullptr) {
    const double loss = detail::run_head(model.head(activity), trunk_out, batch, nullptr, nullptr, m);
    if (m) m->loss_evals += 1.0;
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
    return loss;
}

inline double forward_loss_with_trunk(const MultiTaskModel& model, const TrunkSnapshot& snap,
                                      int activity, const Batch& batch, WorkMeter* m = nullptr) {
    const std::vector<double> t_out = trunk_output(model, &snap, batch, m);
    return head_loss_on(model, activity, t_out, batch, m);
}

}  // namespace mtfl
