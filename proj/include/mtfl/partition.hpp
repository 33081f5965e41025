#pragma once

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtfl/affinity.hpp"

namespace mtfl {

// A set of disjoint, covering activity groups in canonical form: members
// ascending within each group, groups ordered by their smallest member.
struct Partition {
    std::vector<std::vector<int>> groups;
    double total_score = 0.0;

    int m() const { return static_cast<int>(groups.size()); }
};

inline void canonicalize_groups(std::vector<std::vector<int>>& groups) {
    for (auto& g : groups) std::sort(g.begin(), g.end());
    std::sort(groups.begin(), groups.end(),
              [](const std::vector<int>& a, const std::vector<int>& b) { return a.front() < b.front(); });
}

inline void validate_partition(const std::vector<std::vector<int>>& groups, int n) {
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (const auto& g : groups) {
        if (g.empty()) throw std::invalid_argument("empty group in partition");
        for (int a : g) {
            if (a < 0 || a >= n) throw std::invalid_argument("activity index out of range");
            seen[static_cast<std::size_t>(a)] += 1;
        }
    }
    for (int a = 0; a < n; ++a)
        if (seen[static_cast<std::size_t>(a)] != 1)
            throw std::invalid_argument("partition must cover every activity exactly once");
}

// Score onto activity i within its group: the self-affinity diagonal for a
// singleton, otherwise the mean incoming affinity from its groupmates.
inline double activity_score(const AffinityMatrix& mat, const std::vector<int>& group, int i) {
    if (std::find(group.begin(), group.end(), i) == group.end())
        throw std::invalid_argument("activity not in group");
    if (group.size() == 1) return mat.at(i, i);
    double sum = 0.0;
    for (int j : group) {
        if (j == i) continue;
        sum += mat.at(j, i);
    }
    return sum / static_cast<double>(group.size() - 1);
}

// Summed per-activity scores. Accumulated in activity-id order so the result
// is independent of how the groups are listed.
inline double total_score(const AffinityMatrix& mat, const std::vector<std::vector<int>>& groups) {
    std::vector<const std::vector<int>*> group_of(static_cast<std::size_t>(mat.n), nullptr);
    for (const auto& g : groups)
        for (int i : g) group_of.at(static_cast<std::size_t>(i)) = &g;
    double s = 0.0;
    for (int i = 0; i < mat.n; ++i) {
        if (!group_of[static_cast<std::size_t>(i)])
            throw std::invalid_argument("partition must cover every activity exactly once");
        s += activity_score(mat, *group_of[static_cast<std::size_t>(i)], i);
    }
    return s;
}

namespace detail {

inline bool partition_better(double score, const std::vector<std::vector<int>>& groups,
                             double best_score, const std::vector<std::vector<int>>& best_groups) {
    if (score != best_score) return score > best_score;
    return groups < best_groups;  // lexicographically smaller canonical form wins ties
}

template <typename Leaf>
void enumerate_partitions(int n, int m, int idx, std::vector<std::vector<int>>& groups, Leaf&& leaf) {
    if (idx == n) {
        if (static_cast<int>(groups.size()) == m) leaf(groups);
        return;
    }
    // Not enough activities left to open the remaining groups?
    const int need = m - static_cast<int>(groups.size());
    if (n - idx < need) return;
    // Index-based: recursion below grows and shrinks `groups`.
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        groups[gi].push_back(idx);
        enumerate_partitions(n, m, idx + 1, groups, leaf);
        groups[gi].pop_back();
    }
    if (static_cast<int>(groups.size()) < m) {
        groups.push_back({idx});
        enumerate_partitions(n, m, idx + 1, groups, leaf);
        groups.pop_back();
    }
}

}  // namespace detail

// Exact maximizer over all partitions into exactly m nonempty groups, by
// exhaustive enumeration. Ties break to the lexicographically smallest
// canonical form. Practical for n up to about 12.
inline Partition enumerate_best(const AffinityMatrix& mat, int m) {
    const int n = mat.n;
    if (m < 1 || m > n) throw std::invalid_argument("group count out of range");
    Partition best;
    best.total_score = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<int>> groups;
    detail::enumerate_partitions(n, m, 0, groups, [&](const std::vector<std::vector<int>>& g) {
        const double s = total_score(mat, g);
        if (detail::partition_better(s, g, best.total_score, best.groups)) {
            best.total_score = s;
            best.groups = g;
        }
    });
    return best;
}

namespace detail {

// Upper bound on the final score of an activity given its fixed groupmates
// and the set of activities that could still join. Any realized score is a
// mean of incoming affinities (or the diagonal for a singleton), so adding
// candidate incomings in decreasing order while they raise the mean bounds
// it from above.
inline double assigned_upper_bound(const AffinityMatrix& mat, int a,
                                   const std::vector<int>& fixed_mates,
                                   const std::vector<int>& candidates) {
    std::vector<double> inc;
    inc.reserve(candidates.size());
    for (int u : candidates) inc.push_back(mat.at(u, a));
    std::sort(inc.begin(), inc.end(), std::greater<double>());
    if (fixed_mates.empty()) {
        double ub = mat.at(a, a);  // may stay a singleton
        if (!inc.empty()) ub = std::max(ub, inc.front());
        return ub;
    }
    double sum = 0.0;
    for (int f : fixed_mates) sum += mat.at(f, a);
    double cnt = static_cast<double>(fixed_mates.size());
    for (double v : inc) {
        if (v * cnt <= sum) break;
        sum += v;
        cnt += 1.0;
    }
    return sum / cnt;
}

struct BnbState {
    const AffinityMatrix* mat = nullptr;
    int n = 0, m = 0;
    std::vector<double> ub_global;  // per activity, over any grouping at all
    std::vector<std::vector<int>> groups;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<int>> best_groups;

    double node_bound(int idx) const {
        std::vector<int> unassigned;
        for (int u = idx; u < n; ++u) unassigned.push_back(u);
        double bound = 0.0;
        for (const auto& g : groups) {
            for (int a : g) {
                std::vector<int> mates;
                for (int x : g)
                    if (x != a) mates.push_back(x);
                bound += assigned_upper_bound(*mat, a, mates, unassigned);
            }
        }
        for (int u : unassigned) bound += ub_global[static_cast<std::size_t>(u)];
        return bound;
    }

    void dfs(int idx) {
        if (idx == n) {
            if (static_cast<int>(groups.size()) != m) return;
            auto canon = groups;
            canonicalize_groups(canon);
            const double s = total_score(*mat, canon);
            if (partition_better(s, canon, best_score, best_groups)) {
                best_score = s;
                best_groups = canon;
            }
            return;
        }
        const int need = m - static_cast<int>(groups.size());
        if (n - idx < need) return;
        if (node_bound(idx) < best_score) return;
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            groups[gi].push_back(idx);
            dfs(idx + 1);
            groups[gi].pop_back();
        }
        if (static_cast<int>(groups.size()) < m) {
            groups.push_back({idx});
            dfs(idx + 1);
            groups.pop_back();
        }
    }
};

}  // namespace detail

// Best-first search over the same space as enumerate_best, pruning with an
// admissible bound built from best-case incoming affinities. Returns a
// partition whose total score matches exhaustive enumeration.
inline Partition branch_and_bound_best(const AffinityMatrix& mat, int m) {
    const int n = mat.n;
    if (m < 1 || m > n) throw std::invalid_argument("group count out of range");
    detail::BnbState st;
    st.mat = &mat;
    st.n = n;
    st.m = m;
    st.ub_global.resize(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
        double ub = mat.at(a, a);
        for (int j = 0; j < n; ++j)
            if (j != a) ub = std::max(ub, mat.at(j, a));
        st.ub_global[static_cast<std::size_t>(a)] = ub;
    }
    st.dfs(0);
    Partition best;
    best.groups = std::move(st.best_groups);
    best.total_score = st.best_score;
    return best;
}

// Replaces the largest group (ties: the one containing the smallest activity
// id) by its best two-way sub-partition; all other groups are untouched. The
// sub-partition is scored on the group's own sub-matrix with a freshly
// derived self-affinity diagonal.
inline Partition hierarchical_refine(const Partition& current, const AffinityMatrix& mat) {
    validate_partition(current.groups, mat.n);
    auto groups = current.groups;
    canonicalize_groups(groups);

    std::size_t target = groups.size();
    std::size_t best_size = 1;
    for (std::size_t g = 0; g < groups.size(); ++g)
        if (groups[g].size() > best_size) {  // first (smallest-id) group wins ties
            best_size = groups[g].size();
            target = g;
        }
    if (target == groups.size())
        throw std::invalid_argument("all groups are singletons; nothing to refine");

    const std::vector<int>& ids = groups[target];
    const int k = static_cast<int>(ids.size());
    AffinityMatrix sub;
    sub.n = k;
    sub.s.assign(static_cast<std::size_t>(k) * k, 0.0);
    sub.missing.assign(static_cast<std::size_t>(k) * k, false);
    sub.source_round = mat.source_round;
    for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
            if (a == b) continue;
            sub.s[static_cast<std::size_t>(a) * k + b] =
                mat.at(ids[static_cast<std::size_t>(a)], ids[static_cast<std::size_t>(b)]);
            sub.missing[static_cast<std::size_t>(a) * k + b] =
                mat.missing[static_cast<std::size_t>(ids[static_cast<std::size_t>(a)]) * mat.n +
                            ids[static_cast<std::size_t>(b)]];
        }
    for (int a = 0; a < k; ++a) sub.s[static_cast<std::size_t>(a) * k + a] = self_affinity(sub.s, k, a);

    const Partition split = k <= 12 ? enumerate_best(sub, 2) : branch_and_bound_best(sub, 2);

    Partition out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (g != target) {
            out.groups.push_back(groups[g]);
            continue;
        }
        for (const auto& sg : split.groups) {
            std::vector<int> mapped;
            for (int local : sg) mapped.push_back(ids[static_cast<std::size_t>(local)]);
            out.groups.push_back(std::move(mapped));
        }
    }
    canonicalize_groups(out.groups);
    out.total_score = total_score(mat, out.groups);
    return out;
}

// Canonical text form, e.g. "sdn,kt": groups separated by commas, each
// activity rendered as its one-character display tag.
inline std::string partition_to_string(const Partition& p, const std::vector<char>& tags) {
    auto groups = p.groups;
    canonicalize_groups(groups);
    std::string s;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (g) s.push_back(',');
        for (int a : groups[g]) s.push_back(tags.at(static_cast<std::size_t>(a)));
    }
    return s;
}

}  // namespace mtfl
