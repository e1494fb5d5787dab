// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: gen, calibrate, consolidate, prune, merge, fuse,
// materialize, eval, analyze nn, sweep.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "conmoe/analysis.hpp"
#include "conmoe/baselines.hpp"
#include "conmoe/calibration.hpp"
#include "conmoe/consolidation.hpp"
#include "conmoe/error.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/parallel.hpp"
#include "conmoe/tensor_store.hpp"

namespace {

using namespace conmoe;

struct Globals {
    std::uint64_t seed = 42;
    double eps = kDefaultEps;
    bool quiet = false;
    int threads = 0;
};

void note(const Globals& g, const std::string& message) {
    if (!g.quiet) {
        std::cerr << message << '\n';
    }
}

void check_rho(double rho) {
    require(rho >= 0.0, "rho must be >= 0");
    require(rho < 1.0, "rho must be < 1");
}

// Evaluation tokens come from a stream distinct from calibration under the same seed.
std::uint64_t eval_seed(std::uint64_t seed) {
    return seed + 1;
}

struct GenArgs {
    int layers = 8;
    int experts = 16;
    int hidden = 32;
    int inter = 64;
    int topk = 2;
    std::string dup = "none";
    double dup_noise = 0.0;
    int within_pairs = -1;
    std::string output;
};

void run_gen(const Globals& g, const GenArgs& a) {
    ModelSpec spec;
    spec.experts_per_layer.assign(static_cast<std::size_t>(std::max(a.layers, 0)), a.experts);
    spec.hidden = a.hidden;
    spec.intermediate = a.inter;
    spec.top_k = a.topk;
    spec.validate();
    DupConfig dup;
    dup.mode = parse_dup_mode(a.dup);
    dup.noise = a.dup_noise;
    dup.within_pairs = a.within_pairs;
    SyntheticModel synth = gen_synthetic(spec, g.seed, dup);
    std::string planted;
    for (const auto& [copy, source] : synth.duplicates) {
        planted += (planted.empty() ? "" : ",") + to_string(copy) + "<-" + to_string(source);
    }
    synth.model.metadata["planted_duplicates"] = planted;
    write_checkpoint(synth.model, a.output);
    note(g, "wrote " + a.output);
}

struct CalibrateArgs {
    std::string model;
    int tokens = 256;
    std::string output;
};

void run_calibrate(const Globals& g, const CalibrateArgs& a) {
    require(a.tokens >= 1, "--tokens must be >= 1");
    const MoEModel model = read_checkpoint(a.model);
    const auto tokens = synthetic_tokens(a.tokens, model.spec.hidden, g.seed);
    CalibStats stats = run_calibration(model, tokens, resolve_threads(g.threads));
    stats.metadata["seed"] = std::to_string(g.seed);
    stats.metadata["tokens"] = std::to_string(a.tokens);
    write_stats(stats, a.output);
    note(g, "wrote " + a.output);
}

struct ConsolidateArgs {
    std::string model;
    std::string stats;
    double rho = 0.25;
    int scope = 1;
    std::string policy = "adaptive";
    std::string importance = "contribution";
    std::string scores;
    std::string output;
};

void run_consolidate(const Globals& g, const ConsolidateArgs& a) {
    check_rho(a.rho);
    require(a.scope >= 1, "--scope must be >= 1");
    ScopeConfig config;
    config.rho = a.rho;
    config.scope_size = a.scope;
    config.policy = parse_policy(a.policy);
    config.importance = parse_importance(a.importance);
    config.eps = g.eps;
    config.threads = resolve_threads(g.threads);

    const MoEModel model = read_checkpoint(a.model);
    const CalibStats stats = read_stats(a.stats);
    ConsolidationPlan plan = consolidate(model, stats, config);
    plan.metadata["seed"] = std::to_string(g.seed);
    write_plan(plan, a.output);
    if (!a.scores.empty()) {
        std::string csv;
        for (const auto& table : consolidation_scores(model, stats, config)) {
            const std::string part = scores_csv(table);
            csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
        }
        write_file(a.scores, csv);
    }
    note(g, "wrote " + a.output + " (" + std::to_string(retained_experts(plan)) + " of " +
                std::to_string(plan.total_slots()) + " experts retained)");
}

struct PruneArgs {
    std::string model;
    std::string stats;
    std::string method = "frequency";
    double rho = 0.25;
    std::string output;
};

void run_prune(const Globals& g, const PruneArgs& a) {
    check_rho(a.rho);
    require(a.method == "frequency" || a.method == "reap", "--method must be frequency or reap");
    const CalibStats stats = read_stats(a.stats);
    if (!a.model.empty()) {
        stats.validate_for(read_checkpoint(a.model).spec);
    }
    ConsolidationPlan plan = a.method == "frequency" ? prune_frequency(stats, a.rho) : prune_reap(stats, a.rho);
    plan.metadata["seed"] = std::to_string(g.seed);
    write_plan(plan, a.output);
    note(g, "wrote " + a.output);
}

struct MergeArgs {
    std::string model;
    std::string stats;
    double rho = 0.25;
    std::string output;
    std::string fused_model;
};

void run_merge(const Globals& g, const MergeArgs& a) {
    check_rho(a.rho);
    const MoEModel model = read_checkpoint(a.model);
    const CalibStats stats = read_stats(a.stats);
    MergeResult merged = merge_msmoe(model, stats, a.rho, g.eps, resolve_threads(g.threads));
    merged.plan.metadata["seed"] = std::to_string(g.seed);
    merged.fused.base.metadata["seed"] = std::to_string(g.seed);
    write_plan(merged.plan, a.output);
    write_checkpoint(merged.fused.base, a.fused_model);
    note(g, "wrote " + a.output + " and " + a.fused_model);
}

struct FuseArgs {
    std::string model;
    std::string plan;
    std::string stats;
    std::string method = "weighted-average";
    std::string output;
};

void run_fuse(const Globals& g, const FuseArgs& a) {
    require(a.method == "weighted-average", "--method must be weighted-average");
    const MoEModel model = read_checkpoint(a.model);
    const ConsolidationPlan plan = read_plan(a.plan);
    CalibStats stats;
    if (!a.stats.empty()) {
        stats = read_stats(a.stats);
    } else {
        // No usage counts: every cluster falls back to a uniform average.
        stats.top_k = model.spec.top_k;
        for (int n : model.spec.experts_per_layer) {
            stats.experts.emplace_back(static_cast<std::size_t>(n));
        }
    }
    FusedModel fused = fuse_weighted_average(model, plan, stats);
    fused.base.metadata["seed"] = std::to_string(g.seed);
    fused.base.metadata["fusion_weights"] = a.stats.empty() ? "uniform" : "topk_count";
    write_checkpoint(fused.base, a.output);
    note(g, "wrote " + a.output);
}

struct MaterializeArgs {
    std::string model;
    std::string plan;
    std::string output;
};

void run_materialize(const Globals& g, const MaterializeArgs& a) {
    const MoEModel model = read_checkpoint(a.model);
    const ConsolidationPlan plan = read_plan(a.plan);
    MoEModel out = materialize(model, plan);
    out.metadata["seed"] = std::to_string(g.seed);
    write_checkpoint(out, a.output);
    note(g, "wrote " + a.output);
}

struct EvalArgs {
    std::string model;
    std::string plan;
    int tokens = 256;
    std::string output;
};

void run_eval(const Globals& g, const EvalArgs& a) {
    require(a.tokens >= 1, "--tokens must be >= 1");
    const MoEModel model = read_checkpoint(a.model);
    const ConsolidationPlan plan = read_plan(a.plan);
    const auto tokens = synthetic_tokens(a.tokens, model.spec.hidden, eval_seed(g.seed));
    FidelityReport report = evaluate_fidelity(model, plan, tokens, g.eps, resolve_threads(g.threads));
    report.metadata["seed"] = std::to_string(g.seed);
    write_file(a.output, report_to_json(report));
    note(g, "wrote " + a.output + " (end-to-end error " + format_double(report.end_to_end_error) + ")");
}

struct NNArgs {
    std::string model;
    int scope = 4;
    std::string prefix;
};

void run_nn(const Globals& g, const NNArgs& a) {
    require(a.scope >= 1, "--scope must be >= 1");
    const MoEModel model = read_checkpoint(a.model);
    const NNReport report = cross_layer_nn(model, a.scope, g.eps, resolve_threads(g.threads));
    write_file(a.prefix + "nn_heatmap.csv", nn_heatmap_csv(report));
    write_file(a.prefix + "nn_fractions.csv", nn_fractions_csv(report));
    note(g, "cross-layer nearest-neighbour fraction " + format_double(report.overall_fraction));
}

struct SweepArgs {
    std::string model;
    std::string stats;
    double rho = 0.25;
    std::vector<int> scopes{1, 2, 4, 8};
    int tokens = 256;
    std::string policy = "adaptive";
    std::string output;
};

void run_sweep(const Globals& g, const SweepArgs& a) {
    check_rho(a.rho);
    require(a.tokens >= 1, "--tokens must be >= 1");
    for (int s : a.scopes) {
        require(s >= 1, "scope sizes must be >= 1");
    }
    const MoEModel model = read_checkpoint(a.model);
    const CalibStats stats = read_stats(a.stats);
    ScopeConfig base;
    base.rho = a.rho;
    base.policy = parse_policy(a.policy);
    base.eps = g.eps;
    base.threads = resolve_threads(g.threads);
    const auto tokens = synthetic_tokens(a.tokens, model.spec.hidden, eval_seed(g.seed));
    const auto rows = scope_sweep(model, stats, base, a.scopes, tokens);
    write_file(a.output, sweep_to_json(rows, a.rho, {{"seed", std::to_string(g.seed)}, {"policy", a.policy}}));
    note(g, "wrote " + a.output);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train-free MoE expert-pool consolidation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Random seed (echoed into output metadata)")->capture_default_str();
    app.add_option("--eps", g.eps, "Distance and normalisation stabiliser")->capture_default_str();
    app.add_flag("--quiet", g.quiet, "Suppress progress messages");
    app.add_option("--threads", g.threads, "Worker threads (default: CONMOE_THREADS or 1)");

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic MoE checkpoint");
    gen_cmd->add_option("--layers", gen.layers)->capture_default_str();
    gen_cmd->add_option("--experts", gen.experts)->capture_default_str();
    gen_cmd->add_option("--hidden", gen.hidden)->capture_default_str();
    gen_cmd->add_option("--inter", gen.inter)->capture_default_str();
    gen_cmd->add_option("--topk", gen.topk)->capture_default_str();
    gen_cmd->add_option("--dup", gen.dup, "none|within|cross|both")->capture_default_str();
    gen_cmd->add_option("--dup-noise", gen.dup_noise)->capture_default_str();
    gen_cmd->add_option("--within-pairs", gen.within_pairs, "Duplicate pairs per layer (-1: all)");
    gen_cmd->add_option("-o,--output", gen.output)->required();

    CalibrateArgs cal;
    auto* cal_cmd = app.add_subcommand("calibrate", "Collect routing statistics on synthetic tokens");
    cal_cmd->add_option("--model", cal.model)->required();
    cal_cmd->add_option("--tokens", cal.tokens)->capture_default_str();
    cal_cmd->add_option("-o,--output", cal.output)->required();

    ConsolidateArgs con;
    auto* con_cmd = app.add_subcommand("consolidate", "Select prototypes and build a reassignment plan");
    con_cmd->add_option("--model", con.model)->required();
    con_cmd->add_option("--stats", con.stats)->required();
    con_cmd->add_option("--rho", con.rho)->capture_default_str();
    con_cmd->add_option("--scope", con.scope)->capture_default_str();
    con_cmd->add_option("--policy", con.policy, "adaptive|fixed_k|usage_topk|reap_topk|distance_only")
        ->capture_default_str();
    con_cmd->add_option("--importance", con.importance, "contribution|uniform")->capture_default_str();
    con_cmd->add_option("--scores", con.scores, "Optional per-expert score CSV");
    con_cmd->add_option("-o,--output", con.output)->required();

    PruneArgs prune;
    auto* prune_cmd = app.add_subcommand("prune", "Matched-budget pruning baseline");
    prune_cmd->add_option("--model", prune.model);
    prune_cmd->add_option("--stats", prune.stats)->required();
    prune_cmd->add_option("--method", prune.method, "frequency|reap")->capture_default_str();
    prune_cmd->add_option("--rho", prune.rho)->capture_default_str();
    prune_cmd->add_option("-o,--output", prune.output)->required();

    MergeArgs merge;
    auto* merge_cmd = app.add_subcommand("merge", "Frequency-core merging baseline");
    merge_cmd->add_option("--model", merge.model)->required();
    merge_cmd->add_option("--stats", merge.stats)->required();
    merge_cmd->add_option("--rho", merge.rho)->capture_default_str();
    merge_cmd->add_option("-o,--output", merge.output)->required();
    merge_cmd->add_option("--fused-model", merge.fused_model)->required();

    FuseArgs fuse;
    auto* fuse_cmd = app.add_subcommand("fuse", "Post-hoc fusion of a remapping plan's clusters");
    fuse_cmd->add_option("--model", fuse.model)->required();
    fuse_cmd->add_option("--plan", fuse.plan)->required();
    fuse_cmd->add_option("--stats", fuse.stats, "Usage counts for fusion weights (uniform if omitted)");
    fuse_cmd->add_option("--method", fuse.method)->capture_default_str();
    fuse_cmd->add_option("-o,--output", fuse.output)->required();

    MaterializeArgs mat;
    auto* mat_cmd = app.add_subcommand("materialize", "Expand a plan into an original-architecture checkpoint");
    mat_cmd->add_option("--model", mat.model)->required();
    mat_cmd->add_option("--plan", mat.plan)->required();
    mat_cmd->add_option("-o,--output", mat.output)->required();

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Relative output error of a plan");
    eval_cmd->add_option("--model", ev.model)->required();
    eval_cmd->add_option("--plan", ev.plan)->required();
    eval_cmd->add_option("--tokens", ev.tokens)->capture_default_str();
    eval_cmd->add_option("-o,--output", ev.output)->required();

    NNArgs nn;
    auto* analyze_cmd = app.add_subcommand("analyze", "Analyses");
    analyze_cmd->require_subcommand(1);
    analyze_cmd->fallthrough();
    auto* nn_cmd = analyze_cmd->add_subcommand("nn", "Cross-layer nearest-neighbour tally");
    nn_cmd->add_option("--model", nn.model)->required();
    nn_cmd->add_option("--scope", nn.scope)->capture_default_str();
    nn_cmd->add_option("-o,--output", nn.prefix, "Output path prefix")->required();

    SweepArgs sweep;
    auto* sweep_cmd = app.add_subcommand("sweep", "Fidelity across scope sizes at fixed rho");
    sweep_cmd->add_option("--model", sweep.model)->required();
    sweep_cmd->add_option("--stats", sweep.stats)->required();
    sweep_cmd->add_option("--rho", sweep.rho)->capture_default_str();
    sweep_cmd->add_option("--scopes", sweep.scopes)->delimiter(',');
    sweep_cmd->add_option("--tokens", sweep.tokens)->capture_default_str();
    sweep_cmd->add_option("--policy", sweep.policy)->capture_default_str();
    sweep_cmd->add_option("-o,--output", sweep.output)->required();

    for (auto* cmd : {gen_cmd, cal_cmd, con_cmd, prune_cmd, merge_cmd, fuse_cmd, mat_cmd, eval_cmd, sweep_cmd}) {
        cmd->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen_cmd) run_gen(g, gen);
        else if (*cal_cmd) run_calibrate(g, cal);
        else if (*con_cmd) run_consolidate(g, con);
        else if (*prune_cmd) run_prune(g, prune);
        else if (*merge_cmd) run_merge(g, merge);
        else if (*fuse_cmd) run_fuse(g, fuse);
        else if (*mat_cmd) run_materialize(g, mat);
        else if (*eval_cmd) run_eval(g, ev);
        else if (*nn_cmd) run_nn(g, nn);
        else if (*sweep_cmd) run_sweep(g, sweep);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
