// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conmoe/calibration.hpp"
#include "conmoe/geometry.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/plan.hpp"

namespace conmoe {

enum class ImportanceMode { contribution, uniform };

ImportanceMode parse_importance(std::string_view tag);
std::string_view to_string(ImportanceMode mode);

struct ScopeConfig {
    int scope_size = 1;  // consecutive layers per scope
    double rho = 0.0;    // reduction ratio in [0, 1)
    Policy policy = Policy::adaptive;
    double eps = kDefaultEps;
    ImportanceMode importance = ImportanceMode::contribution;
    int threads = 1;

    void validate(int num_layers) const;
};

// Consecutive non-overlapping groups of scope_size layers; the last may be shorter.
std::vector<std::vector<int>> scope_partition(int num_layers, int scope_size);

// K = max(1, round((1 - rho) * pool_size)), rounding halves away from zero.
int budget(double rho, int pool_size);

struct ScoreEntry {
    ExpertRef ref;
    double contribution = 0.0;    // a_e
    double replaceability = 0.0;  // b_e
    double contribution_norm = 0.0;
    double replaceability_norm = 0.0;
    double score = 0.0;  // normalised contribution * normalised replaceability
};

// One entry per table row, in table order.
using ScoreTable = std::vector<ScoreEntry>;

ScoreTable score(const CalibStats& stats, const DistanceTable& table);

// Top-K prototypes under the given policy, returned ascending by (layer, index).
// Ranking ties always go to the smaller (layer, index).
std::vector<ExpertRef> select_prototypes(const ScoreTable& scores, const CalibStats& stats,
                                         const DistanceTable& table, int k, Policy policy);

// Nearest selected prototype for every row of the table (prototypes map to
// themselves; equidistant prototypes resolve to the smaller reference).
std::vector<ExpertRef> assign(std::span<const ExpertRef> prototypes, const DistanceTable& table);

// Full planner: partition, per-scope distances and scores, selection, assignment.
ConsolidationPlan consolidate(const MoEModel& model, const CalibStats& stats, const ScopeConfig& config);

// Score tables per scope, in scope order (empty for singleton scopes).
std::vector<ScoreTable> consolidation_scores(const MoEModel& model, const CalibStats& stats,
                                             const ScopeConfig& config);

// Per-row importance weights w_e for the objective.
std::vector<double> importances(const CalibStats& stats, const DistanceTable& table, ImportanceMode mode);

// L_G(P) = sum_e w_e * min_{p in P} d(e, p).
double objective(std::span<const ExpertRef> candidates, const DistanceTable& table, std::span<const double> weights);

struct OptimalSelection {
    std::vector<ExpertRef> prototypes;
    double loss = 0.0;
};

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

// Exhaustive minimisation of the objective over all K-subsets of the scope; ties
// resolve to the lexicographically smallest subset in table order.
OptimalSelection brute_force_optimal(const DistanceTable& table, int k, std::span<const double> weights,
                                     std::uint64_t cap = kDefaultEnumerationCap);

std::uint64_t binomial(int n, int k);

// "ref,a,b,a_norm,b_norm,s" rows.
std::string scores_csv(const ScoreTable& scores);

}  // namespace conmoe
