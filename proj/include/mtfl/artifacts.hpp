#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtfl/run_spec.hpp"

namespace mtfl {

// All floating-point artifact values are printed with %.17g so that files are
// byte-stable across reruns and round-trip exactly through strtod.
inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) row.push_back(cell);
        if (!line.empty() && line.back() == ',') row.push_back("");
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace detail {

inline void write_rounds_csv(const std::filesystem::path& path,
                             const std::vector<RoundRecord>& records,
                             const std::vector<TrainingActivity>& acts) {
    std::ofstream out(path);
    out << "phase,round,group,lr,clients,work_delta";
    for (const auto& a : acts) out << ",train_" << a.tag;
    for (const auto& a : acts) out << ",val_" << a.tag;
    out << "\n";
    for (const auto& r : records) {
        out << r.phase << "," << r.round << "," << r.group << "," << fmt_g17(r.lr) << ",";
        for (std::size_t i = 0; i < r.selected.size(); ++i)
            out << (i ? ";" : "") << r.selected[i];
        out << "," << fmt_g17(r.work_delta);
        for (const auto& a : acts) {
            out << ",";
            const auto it = r.train_loss.find(a.id);
            if (it != r.train_loss.end()) out << fmt_g17(it->second);
        }
        for (const auto& a : acts) {
            out << ",";
            const auto it = r.val_loss.find(a.id);
            if (it != r.val_loss.end()) out << fmt_g17(it->second);
        }
        out << "\n";
    }
}

inline void write_ledger_csv(const std::filesystem::path& path, const CostLedger& ledger) {
    std::ofstream out(path);
    out << "phase,train_grad,train_forward,probe_grad,probe_forward,eval,total_excl_eval\n";
    double tg = 0, tf = 0, pg = 0, pf = 0, ev = 0;
    for (const auto& [name, p] : ledger.phases()) {
        out << name << "," << fmt_g17(p.train.grad_units) << "," << fmt_g17(p.train.forward_units)
            << "," << fmt_g17(p.probe.grad_units) << "," << fmt_g17(p.probe.forward_units) << ","
            << fmt_g17(p.eval.total()) << "," << fmt_g17(p.total_excl_eval()) << "\n";
        tg += p.train.grad_units;
        tf += p.train.forward_units;
        pg += p.probe.grad_units;
        pf += p.probe.forward_units;
        ev += p.eval.total();
    }
    out << "TOTAL," << fmt_g17(tg) << "," << fmt_g17(tf) << "," << fmt_g17(pg) << ","
        << fmt_g17(pf) << "," << fmt_g17(ev) << "," << fmt_g17(ledger.total_work()) << "\n";
}

// Row = source activity, column = target activity. Diagonal and never-seen
// entries are left empty in per-round exports.
inline void write_affinity_round_csv(const std::filesystem::path& path, const RoundAffinity& m,
                                     const std::string& tags) {
    std::ofstream out(path);
    out << "activity";
    for (int j = 0; j < m.n; ++j) out << "," << tags.at(static_cast<std::size_t>(j));
    out << "\n";
    for (int i = 0; i < m.n; ++i) {
        out << tags.at(static_cast<std::size_t>(i));
        for (int j = 0; j < m.n; ++j) {
            out << ",";
            if (i != j && m.has(i, j)) out << fmt_g17(m.at(i, j));
        }
        out << "\n";
    }
}

inline void write_affinity_final_csv(const std::filesystem::path& path, const AffinityMatrix& m,
                                     const std::string& tags) {
    std::ofstream out(path);
    out << "activity";
    for (int j = 0; j < m.n; ++j) out << "," << tags.at(static_cast<std::size_t>(j));
    out << "\n";
    for (int i = 0; i < m.n; ++i) {
        out << tags.at(static_cast<std::size_t>(i));
        for (int j = 0; j < m.n; ++j) out << "," << fmt_g17(m.at(i, j));
        out << "\n";
    }
}

inline void write_clients_csv(const std::filesystem::path& path, const RunResult& res,
                              const ClientPool& pool, const std::vector<TrainingActivity>& acts) {
    std::ofstream out(path);
    out << "client,n_examples";
    for (const auto& a : acts) out << ",test_" << a.tag;
    out << ",total\n";
    for (const auto& [k, ev] : res.standalone_clients) {
        out << k << "," << pool.clients.at(static_cast<std::size_t>(k)).n_examples;
        for (const auto& a : acts) out << "," << fmt_g17(ev.by_activity.at(a.id));
        out << "," << fmt_g17(ev.total) << "\n";
    }
}

inline void write_summary_csv(const std::filesystem::path& path, const RunSpec& spec, int rep,
                              const RunResult& res) {
    std::ofstream out(path);
    const auto acts = spec.activities();
    out << "rep,seed,mode,n,m,R,R0,R1,R2,K,E,partition,total_test_loss";
    for (const auto& a : acts) out << ",test_" << a.tag;
    out << ",grad_work,forward_work,probe_work,eval_work,total_work\n";
    const RegimeConfig& c = spec.regime;
    out << rep << "," << c.seed << "," << mtfl::detail::mode_name(c.mode) << ","
        << spec.task.n_activities << "," << c.m << "," << c.R << "," << c.R0 << "," << c.R1 << ","
        << c.R2 << "," << c.K << "," << c.E << ",";
    if (res.partition) {
        std::vector<char> tags(spec.tags.begin(), spec.tags.end());
        std::string p = partition_to_string(*res.partition, tags);
        for (char& ch : p)  // keep the CSV single-separator
            if (ch == ',') ch = '|';
        out << p;
    }
    out << "," << fmt_g17(res.final_eval.total);
    for (const auto& a : acts) out << "," << fmt_g17(res.final_eval.by_activity.at(a.id));
    out << "," << fmt_g17(res.ledger.grad_work()) << "," << fmt_g17(res.ledger.forward_work())
        << "," << fmt_g17(res.ledger.probe_work()) << "," << fmt_g17(res.ledger.eval_work()) << ","
        << fmt_g17(res.ledger.total_work()) << "\n";
}

}  // namespace detail

// End-of-run consistency checks; a failed check fails the whole run.
inline void verify_run(const RunResult& res) {
    double deltas = 0.0;
    for (const auto& r : res.records) deltas += r.work_delta;
    if (std::abs(deltas - res.ledger.total_work()) > 1e-6 * std::max(1.0, res.ledger.total_work()))
        throw std::runtime_error("ledger total does not match the sum of per-round deltas");
    if (res.partition) {
        std::vector<int> covered;
        for (const auto& g : res.partition->groups) covered.insert(covered.end(), g.begin(), g.end());
        std::sort(covered.begin(), covered.end());
        std::vector<int> models_cover;
        for (const auto& gm : res.models)
            models_cover.insert(models_cover.end(), gm.activities.begin(), gm.activities.end());
        std::sort(models_cover.begin(), models_cover.end());
        if (covered != models_cover)
            throw std::runtime_error("output models do not match the chosen partition");
    }
}

// Executes one repeat of a run spec and writes its artifact set into `dir`.
inline RunResult execute_rep(const RunSpec& spec, int rep, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    RunSpec s = spec;
    s.regime.seed = spec.regime.seed + static_cast<std::uint64_t>(rep);
    s.task.seed = spec.fixed_data_seed ? spec.task.seed
                                       : derive_seed(s.regime.seed, {kTagPool});

    const ClientPool pool = generate_population(s.task, s.clients, s.examples_per_client,
                                                s.hyper.batch_size, s.test_examples);
    const auto acts = s.activities();
    RunResult res = run_regime(acts, pool, s.arch, s.hyper, s.regime);
    verify_run(res);
    if (res.affinity && res.affinity->any_missing())
        std::fprintf(stderr, "warning: affinity entries with no samples were treated as 0\n");

    detail::write_rounds_csv(dir / "rounds.csv", res.records, acts);
    detail::write_ledger_csv(dir / "ledger.csv", res.ledger);
    for (const auto& [round, mat] : res.probe_rounds)
        detail::write_affinity_round_csv(dir / ("affinity_round_" + std::to_string(round) + ".csv"),
                                         mat, s.tags);
    if (res.affinity) detail::write_affinity_final_csv(dir / "affinity_final.csv", *res.affinity, s.tags);
    if (res.partition) {
        std::ofstream out(dir / "partition.txt");
        std::vector<char> tags(s.tags.begin(), s.tags.end());
        out << partition_to_string(*res.partition, tags) << "\n";
    }
    if (s.regime.mode == Mode::standalone)
        detail::write_clients_csv(dir / "clients.csv", res, pool, acts);
    detail::write_summary_csv(dir / "summary.csv", s, rep, res);
    {
        std::ofstream out(dir / "population.json");
        out << population_record(s.task, s.clients, s.examples_per_client, s.hyper.batch_size,
                                 s.test_examples)
                   .dump(2)
            << "\n";
    }
    return res;
}

// Mean and sample standard deviation over repeats, computed by re-reading the
// per-rep summary files.
struct CellAggregate {
    std::string label;
    RunSpec spec;
    int repeats = 0;
    double mean_total_loss = 0.0, std_total_loss = 0.0;
    std::vector<double> mean_by_activity, std_by_activity;
    double mean_total_work = 0.0, std_total_work = 0.0;
};

inline void mean_std(const std::vector<double>& xs, double& mean, double& stdev) {
    double s = 0.0;
    for (double x : xs) s += x;
    mean = s / static_cast<double>(xs.size());
    if (xs.size() < 2) {
        stdev = 0.0;
        return;
    }
    double q = 0.0;
    for (double x : xs) q += (x - mean) * (x - mean);
    stdev = std::sqrt(q / static_cast<double>(xs.size() - 1));
}

inline CellAggregate aggregate_cell(const RunSpec& spec, const std::string& label,
                                    const std::vector<std::filesystem::path>& rep_dirs) {
    CellAggregate agg;
    agg.label = label;
    agg.spec = spec;
    agg.repeats = static_cast<int>(rep_dirs.size());
    const auto acts = spec.activities();
    std::vector<double> totals, works;
    std::vector<std::vector<double>> per_act(acts.size());
    for (const auto& dir : rep_dirs) {
        const auto rows = read_csv(dir / "summary.csv");
        const auto& header = rows.at(0);
        const auto& row = rows.at(1);
        auto col = [&](const std::string& name) -> double {
            for (std::size_t i = 0; i < header.size(); ++i)
                if (header[i] == name) return std::strtod(row.at(i).c_str(), nullptr);
            throw std::runtime_error("missing summary column " + name);
        };
        totals.push_back(col("total_test_loss"));
        works.push_back(col("total_work"));
        for (std::size_t a = 0; a < acts.size(); ++a)
            per_act[a].push_back(col(std::string("test_") + acts[a].tag));
    }
    mean_std(totals, agg.mean_total_loss, agg.std_total_loss);
    mean_std(works, agg.mean_total_work, agg.std_total_work);
    agg.mean_by_activity.resize(acts.size());
    agg.std_by_activity.resize(acts.size());
    for (std::size_t a = 0; a < acts.size(); ++a)
        mean_std(per_act[a], agg.mean_by_activity[a], agg.std_by_activity[a]);
    return agg;
}

inline void write_aggregate_csv(const std::filesystem::path& path,
                                const std::vector<CellAggregate>& cells) {
    std::ofstream out(path);
    const auto acts = cells.front().spec.activities();
    out << "cell,repeats,mode,n,m,R,R0,K,E,mean_total_loss,std_total_loss";
    for (const auto& a : acts) out << ",mean_test_" << a.tag << ",std_test_" << a.tag;
    out << ",mean_total_work,std_total_work\n";
    for (const auto& c : cells) {
        const RegimeConfig& r = c.spec.regime;
        out << c.label << "," << c.repeats << "," << mtfl::detail::mode_name(r.mode) << ","
            << c.spec.task.n_activities << "," << r.m << "," << r.R << "," << r.R0 << "," << r.K
            << "," << r.E << "," << fmt_g17(c.mean_total_loss) << "," << fmt_g17(c.std_total_loss);
        for (std::size_t a = 0; a < acts.size(); ++a)
            out << "," << fmt_g17(c.mean_by_activity[a]) << "," << fmt_g17(c.std_by_activity[a]);
        out << "," << fmt_g17(c.mean_total_work) << "," << fmt_g17(c.std_total_work) << "\n";
    }
}

// Runs every cell of the grid with `repeat` seeds each and writes the
// aggregate table. Returns the number of runs executed.
inline int execute_grid(const SpecGrid& grid, const std::filesystem::path& out_root) {
    namespace fs = std::filesystem;
    fs::create_directories(out_root);
    std::vector<CellAggregate> aggregates;
    int runs = 0;
    for (const auto& cell : grid.cells()) {
        const fs::path cell_dir = cell.label.empty() ? out_root : out_root / cell.label;
        std::vector<fs::path> rep_dirs;
        for (int rep = 0; rep < cell.spec.repeat; ++rep) {
            const fs::path dir = cell_dir / ("rep_" + std::to_string(rep));
            execute_rep(cell.spec, rep, dir);
            rep_dirs.push_back(dir);
            ++runs;
        }
        aggregates.push_back(aggregate_cell(cell.spec, cell.label, rep_dirs));
    }
    write_aggregate_csv(out_root / "aggregate.csv", aggregates);
    return runs;
}

}  // namespace mtfl
