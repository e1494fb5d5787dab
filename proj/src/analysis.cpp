// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/analysis.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "conmoe/error.hpp"
#include "conmoe/geometry.hpp"
#include "conmoe/parallel.hpp"

namespace conmoe {

namespace {

double relative_error(const Vector& approx, const Vector& reference, double eps) {
    double diff = 0.0;
    double ref = 0.0;
    for (std::size_t d = 0; d < reference.size(); ++d) {
        const double delta = approx[d] - reference[d];
        diff += delta * delta;
        ref += reference[d] * reference[d];
    }
    return std::sqrt(diff) / (std::sqrt(ref) + eps);
}

struct TokenErrors {
    std::vector<double> layers;
    double end_to_end = 0.0;
};

}  // namespace

FidelityReport evaluate_fidelity(const MoEModel& model, const ConsolidationPlan& plan, std::span<const Vector> tokens,
                                 double eps, int threads) {
    require(!tokens.empty(), "empty token set");
    model.validate();
    plan.validate_for(model.spec);
    for (const auto& t : tokens) {
        require(static_cast<int>(t.size()) == model.spec.hidden, "dimension mismatch: evaluation token");
    }

    const int layers = model.spec.num_layers();
    std::vector<TokenErrors> per_token(tokens.size());
    parallel_for(tokens.size(), threads, [&](std::size_t t) {
        ForwardTrace trace;
        const Vector original = model_forward(model, nullptr, tokens[t], &trace);
        const Vector consolidated = model_forward(model, &plan, tokens[t]);
        TokenErrors errors;
        for (int l = 0; l < layers; ++l) {
            const auto& h = trace.layer_inputs[static_cast<std::size_t>(l)];
            const Vector y = consolidated_moe_forward(model, l, plan, h);
            errors.layers.push_back(relative_error(y, trace.layer_outputs[static_cast<std::size_t>(l)], eps));
        }
        errors.end_to_end = relative_error(consolidated, original, eps);
        per_token[t] = std::move(errors);
    });

    FidelityReport report;
    report.token_count = static_cast<std::int64_t>(tokens.size());
    report.layer_errors.assign(static_cast<std::size_t>(layers), 0.0);
    for (const auto& e : per_token) {
        for (int l = 0; l < layers; ++l) {
            report.layer_errors[static_cast<std::size_t>(l)] += e.layers[static_cast<std::size_t>(l)];
        }
        report.end_to_end_error += e.end_to_end;
    }
    const double n = static_cast<double>(tokens.size());
    for (double& v : report.layer_errors) {
        v /= n;
    }
    report.end_to_end_error /= n;
    report.achieved_ratio = reduction_accounting(plan);
    report.metadata = plan.metadata;
    report.metadata["policy"] = std::string(to_string(plan.policy));
    report.metadata["rho"] = format_double(plan.rho);
    report.metadata["scope_size"] = std::to_string(plan.scope_size);
    return report;
}

int retained_experts(const ConsolidationPlan& plan) {
    std::set<ExpertRef> distinct;
    for (const auto& scope : plan.scopes) {
        distinct.insert(scope.prototypes.begin(), scope.prototypes.end());
    }
    return static_cast<int>(distinct.size());
}

double reduction_accounting(const ConsolidationPlan& plan) {
    const int total = plan.total_slots();
    require(total > 0, "plan covers no slots");
    return 1.0 - static_cast<double>(retained_experts(plan)) / static_cast<double>(total);
}

NNReport cross_layer_nn(const MoEModel& model, int scope_size, double eps, int threads) {
    model.validate();
    const int layers = model.spec.num_layers();
    require(scope_size >= 1 && scope_size <= layers, "scope_size must be in [1, layer count]");

    NNReport report;
    report.scope_size = scope_size;
    report.heatmap.assign(static_cast<std::size_t>(layers), std::vector<int>(static_cast<std::size_t>(layers), 0));
    for (const auto& group : scope_partition(layers, scope_size)) {
        std::vector<ExpertRef> refs;
        for (int l : group) {
            for (int i = 0; i < model.spec.experts_per_layer[static_cast<std::size_t>(l)]; ++i) {
                refs.push_back({l, i});
            }
        }
        require(refs.size() >= 2, "nearest neighbor undefined for a scope with a single expert");
        const DistanceTable table = distance_matrix(model, refs, eps, threads);
        for (std::size_t row = 0; row < refs.size(); ++row) {
            const Neighbor nn = nearest_neighbor(row, table);
            ++report.heatmap[static_cast<std::size_t>(refs[row].layer)][static_cast<std::size_t>(nn.ref.layer)];
        }
    }

    int cross_total = 0;
    for (int l = 0; l < layers; ++l) {
        const auto& row = report.heatmap[static_cast<std::size_t>(l)];
        const int experts = model.spec.experts_per_layer[static_cast<std::size_t>(l)];
        const int cross = experts - row[static_cast<std::size_t>(l)];
        cross_total += cross;
        report.layer_fraction.push_back(static_cast<double>(cross) / static_cast<double>(experts));
    }
    report.overall_fraction = static_cast<double>(cross_total) / static_cast<double>(model.spec.total_experts());
    return report;
}

std::string nn_heatmap_csv(const NNReport& report) {
    std::ostringstream out;
    out << "source_layer,target_layer,count\n";
    for (std::size_t s = 0; s < report.heatmap.size(); ++s) {
        for (std::size_t t = 0; t < report.heatmap[s].size(); ++t) {
            out << s << ',' << t << ',' << report.heatmap[s][t] << '\n';
        }
    }
    return out.str();
}

std::string nn_fractions_csv(const NNReport& report) {
    std::ostringstream out;
    out << "layer,experts,cross_layer,fraction\n";
    int experts_total = 0;
    int cross_total = 0;
    for (std::size_t l = 0; l < report.heatmap.size(); ++l) {
        int experts = 0;
        for (int c : report.heatmap[l]) {
            experts += c;
        }
        const int cross = experts - report.heatmap[l][l];
        experts_total += experts;
        cross_total += cross;
        out << l << ',' << experts << ',' << cross << ',' << format_double(report.layer_fraction[l]) << '\n';
    }
    out << "overall," << experts_total << ',' << cross_total << ',' << format_double(report.overall_fraction)
        << '\n';
    return out.str();
}

std::vector<SweepRow> scope_sweep(const MoEModel& model, const CalibStats& stats, const ScopeConfig& base,
                                  std::span<const int> scope_sizes, std::span<const Vector> eval_tokens) {
    require(!scope_sizes.empty(), "no scope sizes to sweep");
    for (int s : scope_sizes) {
        require(s >= 1 && s <= model.spec.num_layers(), "scope size " + std::to_string(s) + " outside [1, L]");
    }
    std::vector<SweepRow> rows;
    for (int s : scope_sizes) {
        ScopeConfig config = base;
        config.scope_size = s;
        const ConsolidationPlan plan = consolidate(model, stats, config);
        rows.push_back({s, evaluate_fidelity(model, plan, eval_tokens, config.eps, config.threads)});
    }
    return rows;
}

}  // namespace conmoe
