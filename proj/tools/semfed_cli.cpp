// Command-line front end: gen-data / run / eval / grad-check / compare.
// Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 grad-check failure.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "semfed/experiment.hpp"
#include "semfed/serialize.hpp"

namespace {

semfed::ExperimentConfig load_with_overrides(const std::string& config_path,
                                             const CLI::Option* seed_opt, std::uint64_t seed,
                                             const CLI::Option* rounds_opt,
                                             std::uint32_t rounds) {
    semfed::ExperimentConfig cfg = semfed::load_config(config_path);
    if (seed_opt && seed_opt->count() > 0) cfg.master_seed = seed;
    if (rounds_opt && rounds_opt->count() > 0) cfg.federation.rounds = rounds;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semfed: federated updating of semantic-communication codecs"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "Run a federated updating experiment");
    std::string run_config, run_out;
    std::uint64_t run_seed = 0;
    std::uint32_t run_rounds = 0;
    run->add_option("--config", run_config, "Experiment config (JSON)")->required();
    auto* run_seed_opt = run->add_option("--seed", run_seed, "Master seed override");
    run->add_option("--out", run_out, "Output directory override");
    auto* run_rounds_opt = run->add_option("--rounds", run_rounds, "Round count override");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Write the config's synthetic dataset to files");
    std::string gen_config, gen_out;
    std::uint64_t gen_seed = 0;
    gen->add_option("--config", gen_config, "Experiment config (JSON)")->required();
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Master seed override");
    gen->add_option("--out", gen_out, "Output directory (default: config out_dir)");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the config's eval split");
    std::string ev_config, ev_ckpt, ev_out;
    std::uint64_t ev_seed = 0;
    ev->add_option("--config", ev_config, "Experiment config (JSON)")->required();
    ev->add_option("--checkpoint", ev_ckpt, "Adapter checkpoint (.semc)")->required();
    auto* ev_seed_opt = ev->add_option("--seed", ev_seed, "Master seed override");
    ev->add_option("--out", ev_out, "Also write the report to this file");

    // grad-check
    auto* gc = app.add_subcommand("grad-check",
                                  "Check analytic gradients against finite differences");
    std::uint64_t gc_seed = 1;
    bool gc_perturb = false;
    gc->add_option("--seed", gc_seed, "Instance seed");
    gc->add_flag("--perturb", gc_perturb, "Corrupt one gradient entry (negative control)");

    // compare
    auto* cmp = app.add_subcommand("compare", "Merge runs' metrics.csv into one long-format CSV");
    std::string cmp_out;
    std::vector<std::string> cmp_runs;
    cmp->add_option("--out", cmp_out, "Merged CSV path")->required();
    cmp->add_option("runs", cmp_runs, "Run directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*run) {
            auto cfg = load_with_overrides(run_config, run_seed_opt, run_seed, run_rounds_opt,
                                           run_rounds);
            const std::string out_dir = run_out.empty() ? cfg.out_dir : run_out;
            auto result = semfed::run_experiment(cfg, out_dir);
            const auto& last = result.history.back();
            std::cout << "rounds " << last.round << "  final rsum "
                      << semfed::format_double(last.retrieval.rsum) << "  -> " << out_dir
                      << std::endl;
        } else if (*gen) {
            auto cfg = load_with_overrides(gen_config, gen_seed_opt, gen_seed, nullptr, 0);
            const std::string out_dir = gen_out.empty() ? cfg.out_dir : gen_out;
            semfed::generate_dataset_files(cfg, out_dir);
            std::cout << "dataset written to " << out_dir << std::endl;
        } else if (*ev) {
            auto cfg = load_with_overrides(ev_config, ev_seed_opt, ev_seed, nullptr, 0);
            const auto report = semfed::evaluate_checkpoint(cfg, ev_ckpt);
            const auto& b = report.retrieval;
            std::string text = "{\n";
            text += "  \"round\": " + std::to_string(report.round) + ",\n";
            text += "  \"rsum\": " + semfed::format_double(b.rsum) + ",\n";
            text += "  \"r1_i2t\": " + semfed::format_double(b.r1_i2t) + ",\n";
            text += "  \"r5_i2t\": " + semfed::format_double(b.r5_i2t) + ",\n";
            text += "  \"r10_i2t\": " + semfed::format_double(b.r10_i2t) + ",\n";
            text += "  \"r1_t2i\": " + semfed::format_double(b.r1_t2i) + ",\n";
            text += "  \"r5_t2i\": " + semfed::format_double(b.r5_t2i) + ",\n";
            text += "  \"r10_t2i\": " + semfed::format_double(b.r10_t2i) + "\n}";
            std::cout << text << std::endl;
            if (!ev_out.empty()) semfed::atomic_write_text(ev_out, text + "\n");
        } else if (*gc) {
            const auto report = semfed::grad_check(gc_seed, 8, 4, 6, gc_perturb);
            for (const auto& [block, err] : report.per_block)
                std::cout << block << "  max rel error " << semfed::format_double(err)
                          << std::endl;
            std::cout << "overall  max rel error "
                      << semfed::format_double(report.max_rel_error)
                      << (report.pass ? "  PASS" : "  FAIL") << std::endl;
            if (!report.pass) return 3;
        } else if (*cmp) {
            std::vector<std::filesystem::path> dirs(cmp_runs.begin(), cmp_runs.end());
            semfed::compare_runs(dirs, cmp_out);
            std::cout << "merged " << dirs.size() << " runs -> " << cmp_out << std::endl;
        }
    } catch (const semfed::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
