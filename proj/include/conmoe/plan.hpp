// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "conmoe/types.hpp"

namespace conmoe {

enum class Policy {
    identity,
    adaptive,
    fixed_k,
    usage_topk,
    reap_topk,
    distance_only,
    prune_frequency,
    prune_reap,
    msmoe_merge,
};

std::string_view to_string(Policy policy);
Policy parse_policy(std::string_view tag);

inline constexpr int kPlanVersion = 1;

struct PlanScope {
    std::vector<int> layers;
    // Sorted ascending, deduplicated.
    std::vector<ExpertRef> prototypes;

    bool operator==(const PlanScope&) const = default;
};

// Prototype pool per scope plus the reassignment map from every original slot to
// a prototype. Pruning baselines additionally carry a drop mask; dropped slots map
// to themselves and are not prototypes.
struct ConsolidationPlan {
    int version = kPlanVersion;
    double rho = 0.0;
    int scope_size = 1;
    Policy policy = Policy::identity;
    std::vector<PlanScope> scopes;
    std::vector<std::vector<ExpertRef>> assignment;  // [layer][slot]
    std::vector<std::vector<bool>> drop_mask;        // empty unless pruning
    Metadata metadata;

    int num_layers() const { return static_cast<int>(assignment.size()); }
    int total_slots() const;
    bool is_pruning() const { return !drop_mask.empty(); }
    bool dropped(ExpertRef slot) const;
    ExpertRef target(ExpertRef slot) const;
    int scope_of_layer(int layer) const;

    // Structural invariants only (no model needed).
    void validate() const;
    // validate() plus layer/expert counts against a model.
    void validate_for(const ModelSpec& spec) const;

    bool operator==(const ConsolidationPlan&) const = default;
};

// Every slot maps to itself; one scope per layer.
ConsolidationPlan identity_plan(const ModelSpec& spec);

// Prototype-centred clusters A_p, keyed by prototype, members ascending. Dropped
// slots of pruning plans belong to no cluster.
std::map<ExpertRef, std::vector<ExpertRef>> clusters(const ConsolidationPlan& plan);

}  // namespace conmoe
