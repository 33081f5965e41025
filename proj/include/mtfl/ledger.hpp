#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>

namespace mtfl {

// Compute-cost accounting. One gradient unit is one scalar-parameter
// gradient evaluation; forward work is counted at half a unit per
// multiply-accumulate. The units are a deterministic proxy meant only for
// relative comparisons between training regimes.
struct WorkMeter {
    double grad_units = 0.0;
    double forward_units = 0.0;
    // Loss-level evaluation counter (one full forward or backward pass of a
    // single activity's loss). Used to bound measurement overhead.
    double loss_evals = 0.0;

    void add_forward_macs(double macs) { forward_units += 0.5 * macs; }
    void add_grad_params(double params) { grad_units += params; }

    double total() const { return grad_units + forward_units; }

    WorkMeter& operator+=(const WorkMeter& o) {
        grad_units += o.grad_units;
        forward_units += o.forward_units;
        loss_evals += o.loss_evals;
        return *this;
    }
};

struct PhaseWork {
    WorkMeter train;  // local training passes
    WorkMeter probe;  // affinity measurement passes
    WorkMeter eval;   // held-out evaluation, tracked separately from cost totals

    double total_excl_eval() const { return train.total() + probe.total(); }
};

// Per-phase breakdown of a run's compute cost. Counters only ever grow.
class CostLedger {
public:
    PhaseWork& phase(const std::string& name) { return phases_[name]; }

    const std::map<std::string, PhaseWork>& phases() const { return phases_; }

    double grad_work() const {
        double s = 0.0;
        for (const auto& [_, p] : phases_) s += p.train.grad_units + p.probe.grad_units;
        return s;
    }
    double forward_work() const {
        double s = 0.0;
        for (const auto& [_, p] : phases_) s += p.train.forward_units + p.probe.forward_units;
        return s;
    }
    double probe_work() const {
        double s = 0.0;
        for (const auto& [_, p] : phases_) s += p.probe.total();
        return s;
    }
    double eval_work() const {
        double s = 0.0;
        for (const auto& [_, p] : phases_) s += p.eval.total();
        return s;
    }
    // Total training + probing cost. Evaluation is excluded: validation is
    // reported but not part of the regime cost comparisons.
    double total_work() const {
        double s = 0.0;
        for (const auto& [_, p] : phases_) s += p.total_excl_eval();
        return s;
    }

    CostLedger& operator+=(const CostLedger& o) {
        for (const auto& [name, p] : o.phases_) {
            PhaseWork& mine = phases_[name];
            mine.train += p.train;
            mine.probe += p.probe;
            mine.eval += p.eval;
        }
        return *this;
    }

private:
    std::map<std::string, PhaseWork> phases_;
};

}  // namespace mtfl
