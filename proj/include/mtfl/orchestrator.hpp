#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtfl/affinity.hpp"
#include "mtfl/data.hpp"
#include "mtfl/federation.hpp"
#include "mtfl/ledger.hpp"
#include "mtfl/nn.hpp"
#include "mtfl/partition.hpp"
#include "mtfl/rng.hpp"

namespace mtfl {

struct TrainingActivity {
    int id = -1;
    char tag = '?';  // one-character display tag
    LossKind loss = LossKind::squared_error;
    std::size_t output_dim = 2;
};

enum class Mode { one_by_one, all_in_one, standalone, mufl, hierarchical };

// Whether a split phase restarts the decay schedule over its own length or
// keeps following the global one.
enum class LrSchedule { restart, continue_global };

struct RegimeConfig {
    Mode mode = Mode::mufl;
    int R = 100;   // total rounds
    int R0 = 30;   // consolidated rounds before splitting
    int R1 = 40;   // hierarchical: two-split phase length
    int R2 = 30;   // hierarchical: refined phase length
    int m = 2;     // split count
    int K = 4;     // clients per round
    int E = 1;     // local epochs
    AffinityProbe probe;
    LrSchedule lr_schedule = LrSchedule::restart;
    std::uint64_t seed = 1;

    void validate(int n_activities, int n_clients) const {
        if (R < 1) throw std::invalid_argument("R must be >= 1");
        if (K < 1 || K > n_clients) throw std::invalid_argument("K must be in [1, N]");
        if (E < 0) throw std::invalid_argument("E must be >= 0");
        if (mode == Mode::mufl || mode == Mode::hierarchical) {
            if (R0 < 1 || R0 >= R) throw std::invalid_argument("splitting requires 1 <= R0 < R");
            if (!probe.enabled) throw std::invalid_argument("splitting modes require the affinity probe");
            probe.validate(R0);
            if (m < 1 || m > n_activities) throw std::invalid_argument("m must be in [1, n]");
        }
        if (mode == Mode::hierarchical && R0 + R1 + R2 != R)
            throw std::invalid_argument("hierarchical phases must satisfy R0 + R1 + R2 = R");
        if (probe.enabled && mode == Mode::all_in_one) probe.validate(R);
    }
};

struct RoundRecord {
    std::string phase;
    int round = 0;  // global round index, 0-based
    int group = 0;  // group ordinal within the phase (client id for standalone)
    double lr = 0.0;
    std::vector<int> selected;           // client ids in draw order
    std::map<int, double> train_loss;    // per activity, client-weighted
    std::map<int, double> val_loss;      // per activity, on the held-out set
    double work_delta = 0.0;             // train+probe units added by this round
};

struct GroupModel {
    std::vector<int> activities;
    MultiTaskModel model;
};

struct RunResult {
    std::vector<GroupModel> models;
    std::vector<RoundRecord> records;
    CostLedger ledger;
    std::vector<std::pair<int, RoundAffinity>> probe_rounds;  // 1-based round -> matrix
    std::optional<AffinityMatrix> affinity;
    std::optional<Partition> partition;        // final grouping
    std::vector<Partition> stage_partitions;   // hierarchical: two-way then refined
    EvalResult final_eval;
    std::map<int, EvalResult> standalone_clients;
};

// One consolidated multi-task model for a set of activities, freshly
// initialized from the run seed. `ctx` keys the init stream so independent
// runs inside one experiment draw independent weights.
inline MultiTaskModel consolidate(const std::vector<TrainingActivity>& acts, const ModelArch& arch,
                                  std::uint64_t seed, std::uint64_t ctx = 0) {
    if (acts.empty()) throw std::invalid_argument("no activities to consolidate");
    std::vector<HeadSpec> specs;
    specs.reserve(acts.size());
    for (const auto& a : acts) specs.push_back({a.id, a.output_dim, a.loss});
    return make_multitask_model(arch, std::move(specs), derive_stream(seed, {kTagInit, ctx}));
}

// Per-group models initialized from a trained parent: each group receives a
// deep copy of the trunk plus exactly its own heads, with optimizer state
// cleared. Groups come back in canonical order.
inline std::vector<GroupModel> split_models(const MultiTaskModel& parent, const Partition& part) {
    std::vector<int> parent_ids = parent.activity_ids();
    {
        std::vector<int> in_part;
        for (const auto& g : part.groups) in_part.insert(in_part.end(), g.begin(), g.end());
        std::sort(in_part.begin(), in_part.end());
        if (in_part != parent_ids)
            throw std::invalid_argument("partition does not cover the model's activities");
    }
    auto groups = part.groups;
    canonicalize_groups(groups);
    std::vector<GroupModel> out;
    for (const auto& g : groups) {
        GroupModel gm;
        gm.activities = g;
        gm.model.trunk = parent.trunk;
        for (int a : g) gm.model.heads.push_back(parent.head(a));
        gm.model.zero_momentum();
        gm.model.zero_grad();
        out.push_back(std::move(gm));
    }
    return out;
}

struct RoundOutcome {
    MultiTaskModel model;
    RoundRecord record;
    std::vector<std::pair<int, AffinityAccumulator>> client_affinities;
};

// One federated round: sample K clients, train each locally, aggregate with
// size-proportional weights, validate. Client results are aggregated keyed by
// client id so the outcome does not depend on processing order.
inline RoundOutcome run_round(const MultiTaskModel& model, const ClientPool& pool, int K, int E,
                              int round, double lr, const HyperParams& hp, std::uint64_t seed,
                              std::uint64_t ctx, const ProbePass* probe, PhaseWork& work,
                              const std::string& phase_name, int group_ordinal) {
    RngStream srng = derive_stream(seed, {kTagSample, ctx, static_cast<std::uint64_t>(round)});
    const std::vector<int> selected = sample_clients(pool.size(), K, srng);

    std::vector<int> by_id = selected;
    std::sort(by_id.begin(), by_id.end());
    const std::vector<double> weights = fedavg_weights(pool, by_id);

    const double work_before = work.total_excl_eval();
    std::vector<MultiTaskModel> locals;
    locals.reserve(by_id.size());
    RoundOutcome out;
    std::map<int, double> train_loss;
    for (std::size_t k = 0; k < by_id.size(); ++k) {
        const int id = by_id[k];
        const std::uint64_t shuffle_seed = derive_seed(
            seed, {kTagShuffle, ctx, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(id)});
        LocalTrainResult lt =
            local_train(model, pool.clients.at(static_cast<std::size_t>(id)), E, lr, hp, probe,
                        shuffle_seed, &work.train, &work.probe);
        for (const auto& [a, l] : lt.mean_train_loss) train_loss[a] += weights[k] * l;
        if (probe && !lt.affinity.empty())
            out.client_affinities.emplace_back(id, std::move(lt.affinity));
        locals.push_back(std::move(lt.model));
    }
    out.model = fedavg(locals, weights);

    out.record.phase = phase_name;
    out.record.round = round;
    out.record.group = group_ordinal;
    out.record.lr = lr;
    out.record.selected = selected;
    out.record.train_loss = std::move(train_loss);
    const EvalResult ev = evaluate(out.model, pool.test_batches, &work.eval);
    out.record.val_loss = ev.by_activity;
    out.record.work_delta = work.total_excl_eval() - work_before;
    return out;
}

namespace detail {

inline std::vector<char> activity_tags(const std::vector<TrainingActivity>& acts) {
    std::vector<char> tags;
    for (const auto& a : acts) tags.push_back(a.tag);
    return tags;
}

// Final per-activity test losses assembled from each activity's last
// validated record (no extra evaluation pass).
inline void finalize_eval(RunResult& res) {
    res.final_eval.by_activity.clear();
    res.final_eval.total = 0.0;
    for (const auto& r : res.records)
        for (const auto& [a, l] : r.val_loss) res.final_eval.by_activity[a] = l;
    for (const auto& [a, l] : res.final_eval.by_activity) res.final_eval.total += l;
}

// Trains one model for a span of global rounds under one phase label.
// Returns the trained model; appends records and probe matrices.
inline MultiTaskModel train_phase(MultiTaskModel model, const ClientPool& pool,
                                  const HyperParams& hp, const RegimeConfig& cfg, RunResult& res,
                                  const std::string& phase_name, std::uint64_t ctx,
                                  int group_ordinal, int first_round, int rounds,
                                  int schedule_rounds, int schedule_offset, bool allow_probe) {
    PhaseWork& work = res.ledger.phase(phase_name);
    for (int r = 0; r < rounds; ++r) {
        const int global_round = first_round + r;
        const double lr = poly_lr(global_round - schedule_offset, schedule_rounds, hp.eta0);
        const bool probing = allow_probe && cfg.probe.active_in(global_round);
        ProbePass pp{cfg.probe.frequency, lr};
        RoundOutcome rr = run_round(model, pool, cfg.K, cfg.E, global_round, lr, hp, cfg.seed, ctx,
                                    probing ? &pp : nullptr, work, phase_name, group_ordinal);
        model = std::move(rr.model);
        res.records.push_back(std::move(rr.record));
        if (probing && !rr.client_affinities.empty()) {
            std::vector<std::pair<int, const AffinityAccumulator*>> refs;
            for (const auto& [id, acc] : rr.client_affinities) refs.emplace_back(id, &acc);
            res.probe_rounds.emplace_back(global_round + 1, aggregate_client_affinities(refs));
        }
    }
    return model;
}

}  // namespace detail

// Consolidation-only regime: one multi-task model trained for R rounds.
inline RunResult run_all_in_one(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                                const ModelArch& arch, const HyperParams& hp,
                                const RegimeConfig& cfg) {
    RunResult res;
    MultiTaskModel model = consolidate(acts, arch, cfg.seed, 0);
    model = detail::train_phase(std::move(model), pool, hp, cfg, res, "all_in_one", 0, 0, 0,
                                cfg.R, cfg.R, 0, cfg.probe.enabled);
    res.models.push_back({model.activity_ids(), std::move(model)});
    detail::finalize_eval(res);
    return res;
}

// Vanilla regime: every activity trained as its own full-length FL run,
// executed sequentially over the shared client pool.
inline RunResult run_one_by_one(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                                const ModelArch& arch, const HyperParams& hp,
                                const RegimeConfig& cfg) {
    RunResult res;
    for (std::size_t o = 0; o < acts.size(); ++o) {
        const TrainingActivity& a = acts[o];
        MultiTaskModel model = consolidate({a}, arch, cfg.seed, o);
        const std::string phase = std::string("one_by_one:") + a.tag;
        model = detail::train_phase(std::move(model), pool, hp, cfg, res, phase, o,
                                    static_cast<int>(o), 0, cfg.R, cfg.R, 0, false);
        res.models.push_back({{a.id}, std::move(model)});
    }
    detail::finalize_eval(res);
    return res;
}

// Consolidate, train R0 rounds while probing affinities, solve the m-way
// split, then continue each group from the consolidated parameters.
inline RunResult run_mufl(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                          const ModelArch& arch, const HyperParams& hp, const RegimeConfig& cfg) {
    if (acts.size() == 1) {  // degenerates to consolidation-only
        RunResult res = run_all_in_one(acts, pool, arch, hp, cfg);
        Partition p;
        p.groups = {{acts.front().id}};
        res.partition = p;
        return res;
    }
    RunResult res;
    MultiTaskModel parent = consolidate(acts, arch, cfg.seed, 0);
    parent = detail::train_phase(std::move(parent), pool, hp, cfg, res, "consolidated", 0, 0, 0,
                                 cfg.R0, cfg.R, 0, true);
    if (res.probe_rounds.empty())
        throw std::runtime_error(
            "no affinity samples: every selected client had fewer than f batches per epoch "
            "in the probed rounds; lower probe f or enlarge client datasets");
    res.affinity = finalize_affinity(res.probe_rounds, cfg.probe.policy);
    res.partition = branch_and_bound_best(*res.affinity, cfg.m);

    std::vector<GroupModel> groups = split_models(parent, *res.partition);
    const int split_rounds = cfg.R - cfg.R0;
    const bool restart = cfg.lr_schedule == LrSchedule::restart;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        groups[g].model = detail::train_phase(
            std::move(groups[g].model), pool, hp, cfg, res, "split_" + std::to_string(g), g,
            static_cast<int>(g), cfg.R0, split_rounds, restart ? split_rounds : cfg.R,
            restart ? cfg.R0 : 0, false);
    }
    res.models = std::move(groups);
    detail::finalize_eval(res);
    return res;
}

// Two-stage adaptive splitting: a two-way split trained for R1 rounds, then
// the larger group refined into two and all three trained for R2 rounds.
inline RunResult run_hierarchical(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                                  const ModelArch& arch, const HyperParams& hp,
                                  const RegimeConfig& cfg) {
    if (acts.size() < 2) throw std::invalid_argument("hierarchical splitting needs >= 2 activities");
    RunResult res;
    MultiTaskModel parent = consolidate(acts, arch, cfg.seed, 0);
    parent = detail::train_phase(std::move(parent), pool, hp, cfg, res, "consolidated", 0, 0, 0,
                                 cfg.R0, cfg.R, 0, true);
    if (res.probe_rounds.empty())
        throw std::runtime_error(
            "no affinity samples: every selected client had fewer than f batches per epoch "
            "in the probed rounds; lower probe f or enlarge client datasets");
    res.affinity = finalize_affinity(res.probe_rounds, cfg.probe.policy);
    const Partition two_way = branch_and_bound_best(*res.affinity, 2);
    res.stage_partitions.push_back(two_way);

    const bool restart = cfg.lr_schedule == LrSchedule::restart;
    std::vector<GroupModel> stage1 = split_models(parent, two_way);
    for (std::size_t g = 0; g < stage1.size(); ++g) {
        stage1[g].model = detail::train_phase(
            std::move(stage1[g].model), pool, hp, cfg, res, "two_split_" + std::to_string(g), g,
            static_cast<int>(g), cfg.R0, cfg.R1, restart ? cfg.R1 : cfg.R, restart ? cfg.R0 : 0,
            false);
    }

    std::size_t largest_size = 1;
    for (const auto& gm : stage1) largest_size = std::max(largest_size, gm.activities.size());
    Partition refined = largest_size >= 2 ? hierarchical_refine(two_way, *res.affinity) : two_way;
    res.stage_partitions.push_back(refined);
    res.partition = refined;

    // Groups untouched by refinement continue from their stage-1 parameters;
    // the refined group's children each start from a copy of its model.
    std::vector<GroupModel> stage2;
    for (const auto& g : refined.groups) {
        bool carried = false;
        for (auto& gm : stage1)
            if (gm.activities == g) {
                stage2.push_back({g, gm.model});
                carried = true;
                break;
            }
        if (carried) continue;
        for (auto& gm : stage1) {
            if (!std::includes(gm.activities.begin(), gm.activities.end(), g.begin(), g.end()))
                continue;
            GroupModel child;
            child.activities = g;
            child.model.trunk = gm.model.trunk;
            for (int a : g) child.model.heads.push_back(gm.model.head(a));
            child.model.zero_momentum();
            child.model.zero_grad();
            stage2.push_back(std::move(child));
            break;
        }
    }
    const int stage2_first = cfg.R0 + cfg.R1;
    for (std::size_t g = 0; g < stage2.size(); ++g) {
        stage2[g].model = detail::train_phase(
            std::move(stage2[g].model), pool, hp, cfg, res, "refined_split_" + std::to_string(g),
            g, static_cast<int>(g), stage2_first, cfg.R2, restart ? cfg.R2 : cfg.R,
            restart ? stage2_first : 0, false);
    }
    res.models = std::move(stage2);
    detail::finalize_eval(res);
    return res;
}

// No-communication baseline: every client trains a private consolidated model
// on its own data for R*E local epochs.
inline RunResult run_standalone(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                                const ModelArch& arch, const HyperParams& hp,
                                const RegimeConfig& cfg) {
    RunResult res;
    PhaseWork& work = res.ledger.phase("standalone");
    const MultiTaskModel base = consolidate(acts, arch, cfg.seed, 0);
    for (int k = 0; k < pool.size(); ++k) {
        MultiTaskModel model = base;
        for (int r = 0; r < cfg.R; ++r) {
            const double lr = poly_lr(r, cfg.R, hp.eta0);
            const double before = work.total_excl_eval();
            const std::uint64_t shuffle_seed = derive_seed(
                cfg.seed, {kTagShuffle, 0, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(k)});
            LocalTrainResult lt = local_train(model, pool.clients.at(static_cast<std::size_t>(k)),
                                              cfg.E, lr, hp, nullptr, shuffle_seed, &work.train,
                                              nullptr);
            model = std::move(lt.model);
            RoundRecord rec;
            rec.phase = "standalone";
            rec.round = r;
            rec.group = k;
            rec.lr = lr;
            rec.train_loss = std::move(lt.mean_train_loss);
            rec.work_delta = work.total_excl_eval() - before;
            if (r == cfg.R - 1) {
                const EvalResult ev = evaluate(model, pool.test_batches, &work.eval);
                rec.val_loss = ev.by_activity;
                res.standalone_clients[k] = ev;
            }
            res.records.push_back(std::move(rec));
        }
        res.models.push_back({model.activity_ids(), std::move(model)});
    }
    // Summary losses: unweighted mean over clients per activity.
    res.final_eval.by_activity.clear();
    res.final_eval.total = 0.0;
    for (const auto& [k, ev] : res.standalone_clients)
        for (const auto& [a, l] : ev.by_activity) res.final_eval.by_activity[a] += l;
    for (auto& [a, l] : res.final_eval.by_activity) {
        l /= static_cast<double>(pool.size());
        res.final_eval.total += l;
    }
    return res;
}

// Fixed-partition training from fresh weights for the full R rounds; the
// from-scratch counterpart of a split produced by the affinity pipeline.
inline RunResult run_split_from_scratch(const std::vector<TrainingActivity>& acts,
                                        const ClientPool& pool, const ModelArch& arch,
                                        const HyperParams& hp, const RegimeConfig& cfg,
                                        const Partition& part) {
    RunResult res;
    auto groups = part.groups;
    canonicalize_groups(groups);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::vector<TrainingActivity> sub;
        for (int a : groups[g]) sub.push_back(acts.at(static_cast<std::size_t>(a)));
        MultiTaskModel model = consolidate(sub, arch, cfg.seed, g);
        model = detail::train_phase(std::move(model), pool, hp, cfg, res,
                                    "scratch_split_" + std::to_string(g), g, static_cast<int>(g), 0,
                                    cfg.R, cfg.R, 0, false);
        res.models.push_back({groups[g], std::move(model)});
    }
    res.partition = part;
    detail::finalize_eval(res);
    return res;
}

inline RunResult run_regime(const std::vector<TrainingActivity>& acts, const ClientPool& pool,
                            const ModelArch& arch, const HyperParams& hp, const RegimeConfig& cfg) {
    cfg.validate(static_cast<int>(acts.size()), pool.size());
    switch (cfg.mode) {
        case Mode::one_by_one: return run_one_by_one(acts, pool, arch, hp, cfg);
        case Mode::all_in_one: return run_all_in_one(acts, pool, arch, hp, cfg);
        case Mode::standalone: return run_standalone(acts, pool, arch, hp, cfg);
        case Mode::mufl: return run_mufl(acts, pool, arch, hp, cfg);
        case Mode::hierarchical: return run_hierarchical(acts, pool, arch, hp, cfg);
    }
    throw std::logic_error("unknown mode");
}

}  // namespace mtfl
