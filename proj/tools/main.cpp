#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "mtfl/artifacts.hpp"
#include "mtfl/checks.hpp"

namespace {

int run_oracles() {
    const mtfl::GradCheckResult g = mtfl::run_gradient_oracle(100, 2024);
    std::printf("gradient oracle: %zu params, max relative error %.3g -> %s\n", g.params_checked,
                g.max_rel_err, g.max_rel_err < 1e-4 ? "ok" : "FAIL");
    bool ok = g.max_rel_err < 1e-4;
    for (int n = 4; n <= 8; ++n)
        for (int m = 2; m <= 4 && m <= n; ++m) {
            const mtfl::PartitionOracleResult p = mtfl::run_partition_oracle(n, m, 50, 7);
            std::printf("partition oracle n=%d m=%d: %d cases, %d mismatches, worst gap %.3g -> %s\n",
                        n, m, p.cases, p.mismatches, p.worst_gap,
                        p.mismatches == 0 ? "ok" : "FAIL");
            ok = ok && p.mismatches == 0;
        }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic simulator for multi-tenant federated learning"};
    app.require_subcommand(0, 1);

    bool oracle = false;
    app.add_flag("--oracle", oracle, "run the gradient-check and partition-solver oracle suites");

    std::string spec_path;
    std::string out_override;
    std::uint64_t seed_override = 0;
    bool have_seed = false;
    bool check_only = false;

    CLI::App* run = app.add_subcommand("run", "execute an experiment spec (JSON)");
    run->add_option("spec", spec_path, "path to the run spec file")->required();
    run->add_option("--out", out_override, "output directory (overrides the spec)");
    run->add_option("--seed", seed_override, "base seed (overrides the spec)")
        ->each([&](const std::string&) { have_seed = true; });
    run->add_flag("--check", check_only, "validate the spec and exit");

    CLI11_PARSE(app, argc, argv);

    try {
        if (oracle) return run_oracles();
        if (!run->parsed()) {
            std::fprintf(stderr, "nothing to do: pass `run <spec>` or --oracle\n");
            return 1;
        }
        mtfl::SpecGrid grid = mtfl::parse_run_spec_file(spec_path);
        if (have_seed) grid.base.regime.seed = seed_override;
        if (!out_override.empty()) grid.base.out_dir = out_override;
        if (check_only) {
            std::printf("spec ok: %zu cell(s), %d repeat(s)\n", grid.cells().size(),
                        grid.base.repeat);
            return 0;
        }
        const int runs = mtfl::execute_grid(grid, grid.base.out_dir);
        std::printf("completed %d run(s); artifacts in %s\n", runs, grid.base.out_dir.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
