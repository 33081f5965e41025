#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mtfl/nn.hpp"

namespace mtfl {

enum class FinalizePolicy { last_active_round, mean_over_active };

// When and how often to measure inter-activity affinities during all-in-one
// training. Rounds are 1-based: the default measures in rounds 1..10 and the
// lookahead step uses the learning rate of the round being probed.
struct AffinityProbe {
    bool enabled = false;
    int frequency = 5;
    int first_round = 1;
    int last_round = 10;
    FinalizePolicy policy = FinalizePolicy::last_active_round;

    bool active_in(int round_zero_based) const {
        const int r = round_zero_based + 1;
        return enabled && r >= first_round && r <= last_round;
    }

    void validate(int rounds_before_split) const {
        if (frequency < 1) throw std::invalid_argument("probe frequency must be >= 1");
        if (first_round < 1 || last_round < first_round)
            throw std::invalid_argument("probe round window is empty");
        if (enabled && last_round > rounds_before_split)
            throw std::invalid_argument("probe rounds must lie within the consolidated phase");
    }
};

// Per-client running sums of lookahead affinity samples. Diagonal entries are
// never written: raw self-lookahead values are discarded by design, and the
// diagonal only exists after finalize() fills it from the off-diagonals.
struct AffinityAccumulator {
    int n = 0;
    std::vector<double> sums;             // n*n
    std::vector<long long> pair_counts;   // n*n, per-pair samples (skips tracked)
    long long steps = 0;                  // probe time-steps accumulated

    AffinityAccumulator() = default;
    explicit AffinityAccumulator(int n_activities)
        : n(n_activities),
          sums(static_cast<std::size_t>(n_activities) * n_activities, 0.0),
          pair_counts(static_cast<std::size_t>(n_activities) * n_activities, 0) {}

    bool empty() const { return steps == 0; }

    void add_sample(int i, int j, double v) {
        sums[static_cast<std::size_t>(i) * n + j] += v;
        pair_counts[static_cast<std::size_t>(i) * n + j] += 1;
    }
    long long count(int i, int j) const { return pair_counts[static_cast<std::size_t>(i) * n + j]; }
    double mean(int i, int j) const {
        const auto c = count(i, j);
        return c == 0 ? 0.0 : sums[static_cast<std::size_t>(i) * n + j] / static_cast<double>(c);
    }
};

// Relative loss change of activity j after a one-step shared-parameter update
// by activity i:  1 - L_j(X, trunk', head_j) / L_j(X, trunk, head_j).
// Returns nullopt when the reference loss is zero (measurement skipped, never
// an abort). The model is not mutated.
inline std::optional<double> step_affinity(const MultiTaskModel& model, const Batch& batch, int i,
                                           int j, double lookahead_lr, WorkMeter* m = nullptr) {
    const double base = forward_loss(model, j, batch, nullptr, m);
    if (base == 0.0) return std::nullopt;
    const TrunkSnapshot snap = lookahead_shared(model, i, batch, lookahead_lr, m);
    const double after = forward_loss_with_trunk(model, snap, j, batch, m);
    return 1.0 - after / base;
}

// One probe time-step: adds one affinity sample for every ordered pair
// (i, j), i != j, of the model's activities. The lookahead for each source
// activity is computed once and evaluated against every target head from a
// single trunk pass.
inline void accumulate_affinities(AffinityAccumulator& acc, const MultiTaskModel& model,
                                  const Batch& batch, double lookahead_lr,
                                  WorkMeter* m = nullptr) {
    const std::vector<int> ids = model.activity_ids();
    const int n = static_cast<int>(ids.size());
    if (acc.n != n) throw std::invalid_argument("accumulator size does not match model activities");

    std::vector<double> base(static_cast<std::size_t>(n), 0.0);
    std::vector<TrunkSnapshot> snaps;
    snaps.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double loss_i = 0.0;
        snaps.push_back(lookahead_shared_with_loss(model, ids[static_cast<std::size_t>(i)], batch,
                                                   lookahead_lr, &loss_i, m));
        base[static_cast<std::size_t>(i)] = loss_i;
    }
    for (int i = 0; i < n; ++i) {
        const std::vector<double> t_out =
            trunk_output(model, &snaps[static_cast<std::size_t>(i)], batch, m);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            if (base[static_cast<std::size_t>(j)] == 0.0) continue;  // skipped pair
            const double after = head_loss_on(model, ids[static_cast<std::size_t>(j)], t_out, batch, m);
            acc.add_sample(i, j, 1.0 - after / base[static_cast<std::size_t>(j)]);
        }
    }
    acc.steps += 1;
}

// Round-level matrix: unweighted mean over clients of per-client means.
struct RoundAffinity {
    int n = 0;
    std::vector<double> value;       // n*n, 0 where no client contributed
    std::vector<int> contributors;   // n*n client counts

    bool has(int i, int j) const { return contributors[static_cast<std::size_t>(i) * n + j] > 0; }
    double at(int i, int j) const { return value[static_cast<std::size_t>(i) * n + j]; }
};

inline RoundAffinity aggregate_client_affinities(
    std::vector<std::pair<int, const AffinityAccumulator*>> per_client) {
    if (per_client.empty()) throw std::invalid_argument("no accumulators to aggregate");
    std::sort(per_client.begin(), per_client.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    const int n = per_client.front().second->n;
    RoundAffinity out;
    out.n = n;
    out.value.assign(static_cast<std::size_t>(n) * n, 0.0);
    out.contributors.assign(static_cast<std::size_t>(n) * n, 0);
    for (const auto& [client, acc] : per_client) {
        if (acc->n != n) throw std::invalid_argument("mismatched accumulator sizes");
        if (acc->empty()) throw std::invalid_argument("accumulator with no time-steps");
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            double sum = 0.0;
            int cnt = 0;
            for (const auto& [client, acc] : per_client) {
                if (acc->count(i, j) == 0) continue;  // client skipped this pair entirely
                sum += acc->mean(i, j);
                ++cnt;
            }
            out.contributors[static_cast<std::size_t>(i) * n + j] = cnt;
            if (cnt > 0) out.value[static_cast<std::size_t>(i) * n + j] = sum / static_cast<double>(cnt);
        }
    return out;
}

// Self-affinity: the normalized affinity between activity i and all others,
//   sum_{j != i} (S[i][j] + S[j][i]) / (2n - 2).
inline double self_affinity(const std::vector<double>& s, int n, int i) {
    if (n < 2) throw std::invalid_argument("self-affinity needs at least two activities");
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        acc += s[static_cast<std::size_t>(i) * n + j] + s[static_cast<std::size_t>(j) * n + i];
    }
    return acc / static_cast<double>(2 * n - 2);
}

// Finalized affinity matrix with the self-affinity diagonal filled in.
struct AffinityMatrix {
    int n = 0;
    std::vector<double> s;          // n*n
    int source_round = -1;          // 1-based round, or -1 when averaged
    std::vector<bool> missing;      // off-diagonal entries with no sample anywhere

    double at(int i, int j) const { return s[static_cast<std::size_t>(i) * n + j]; }
    bool any_missing() const {
        return std::any_of(missing.begin(), missing.end(), [](bool b) { return b; });
    }
};

inline AffinityMatrix finalize_affinity(const std::vector<std::pair<int, RoundAffinity>>& rounds,
                                        FinalizePolicy policy) {
    if (rounds.empty()) throw std::invalid_argument("no affinity rounds to finalize");
    const int n = rounds.front().second.n;
    AffinityMatrix out;
    out.n = n;
    out.s.assign(static_cast<std::size_t>(n) * n, 0.0);
    out.missing.assign(static_cast<std::size_t>(n) * n, false);

    if (policy == FinalizePolicy::last_active_round) {
        const auto& last = *std::max_element(
            rounds.begin(), rounds.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
        out.source_round = last.first;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                out.s[static_cast<std::size_t>(i) * n + j] = last.second.at(i, j);
                out.missing[static_cast<std::size_t>(i) * n + j] = !last.second.has(i, j);
            }
    } else {
        out.source_round = -1;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                double sum = 0.0;
                int cnt = 0;
                for (const auto& [r, mat] : rounds) {
                    if (!mat.has(i, j)) continue;
                    sum += mat.at(i, j);
                    ++cnt;
                }
                out.missing[static_cast<std::size_t>(i) * n + j] = cnt == 0;
                if (cnt > 0) out.s[static_cast<std::size_t>(i) * n + j] = sum / static_cast<double>(cnt);
            }
    }
    if (n >= 2)
        for (int i = 0; i < n; ++i)
            out.s[static_cast<std::size_t>(i) * n + i] = self_affinity(out.s, n, i);
    return out;
}

}  // namespace mtfl
