// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conmoe/calibration.hpp"
#include "conmoe/consolidation.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/plan.hpp"

namespace conmoe {

// Relative L2 output error of a plan against the original model. Per-layer errors
// compare both operators on the original model's hidden state entering that layer;
// the end-to-end error compares the final hidden states of the two stacks.
struct FidelityReport {
    std::vector<double> layer_errors;
    double end_to_end_error = 0.0;
    std::int64_t token_count = 0;
    double achieved_ratio = 0.0;
    Metadata metadata;

    bool operator==(const FidelityReport&) const = default;
};

FidelityReport evaluate_fidelity(const MoEModel& model, const ConsolidationPlan& plan, std::span<const Vector> tokens,
                                 double eps = kDefaultEps, int threads = 1);

// Distinct prototypes across all scopes, each counted once.
int retained_experts(const ConsolidationPlan& plan);

// 1 - retained / total slots.
double reduction_accounting(const ConsolidationPlan& plan);

struct NNReport {
    int scope_size = 1;
    std::vector<std::vector<int>> heatmap;  // [source layer][neighbour layer]
    std::vector<double> layer_fraction;     // cross-layer share per source layer
    double overall_fraction = 0.0;
};

// Nearest neighbour of every expert within its scope, tallied by layer.
NNReport cross_layer_nn(const MoEModel& model, int scope_size, double eps = kDefaultEps, int threads = 1);

// "source_layer,target_layer,count" rows for every layer pair.
std::string nn_heatmap_csv(const NNReport& report);
// "layer,experts,cross_layer,fraction" rows plus an "overall" row.
std::string nn_fractions_csv(const NNReport& report);

struct SweepRow {
    int scope_size = 1;
    FidelityReport report;
};

// consolidate + evaluate_fidelity for every scope size at the same rho.
std::vector<SweepRow> scope_sweep(const MoEModel& model, const CalibStats& stats, const ScopeConfig& base,
                                  std::span<const int> scope_sizes, std::span<const Vector> eval_tokens);

}  // namespace conmoe
