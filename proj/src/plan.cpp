// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/plan.hpp"

#include <algorithm>
#include <array>
#include <utility>

#include "conmoe/error.hpp"

namespace conmoe {

namespace {

constexpr std::array<std::pair<Policy, std::string_view>, 9> kPolicyTags{{
    {Policy::identity, "identity"},
    {Policy::adaptive, "adaptive"},
    {Policy::fixed_k, "fixed_k"},
    {Policy::usage_topk, "usage_topk"},
    {Policy::reap_topk, "reap_topk"},
    {Policy::distance_only, "distance_only"},
    {Policy::prune_frequency, "prune_frequency"},
    {Policy::prune_reap, "prune_reap"},
    {Policy::msmoe_merge, "msmoe_merge"},
}};

}  // namespace

std::string_view to_string(Policy policy) {
    for (const auto& [p, tag] : kPolicyTags) {
        if (p == policy) {
            return tag;
        }
    }
    return "unknown";
}

Policy parse_policy(std::string_view tag) {
    for (const auto& [p, name] : kPolicyTags) {
        if (name == tag) {
            return p;
        }
    }
    throw ValidationError("unknown policy: " + std::string(tag));
}

int ConsolidationPlan::total_slots() const {
    int total = 0;
    for (const auto& layer : assignment) {
        total += static_cast<int>(layer.size());
    }
    return total;
}

bool ConsolidationPlan::dropped(ExpertRef slot) const {
    if (drop_mask.empty()) {
        return false;
    }
    return drop_mask.at(static_cast<std::size_t>(slot.layer)).at(static_cast<std::size_t>(slot.index));
}

ExpertRef ConsolidationPlan::target(ExpertRef slot) const {
    require(slot.layer >= 0 && slot.layer < num_layers(), "slot missing from plan: " + to_string(slot));
    const auto& layer = assignment[static_cast<std::size_t>(slot.layer)];
    require(slot.index >= 0 && slot.index < static_cast<int>(layer.size()),
            "slot missing from plan: " + to_string(slot));
    return layer[static_cast<std::size_t>(slot.index)];
}

int ConsolidationPlan::scope_of_layer(int layer) const {
    for (std::size_t s = 0; s < scopes.size(); ++s) {
        const auto& layers = scopes[s].layers;
        if (std::find(layers.begin(), layers.end(), layer) != layers.end()) {
            return static_cast<int>(s);
        }
    }
    throw ValidationError("layer " + std::to_string(layer) + " belongs to no scope");
}

void ConsolidationPlan::validate() const {
    require(version == kPlanVersion, "unsupported plan version " + std::to_string(version));
    require(rho >= 0.0 && rho < 1.0, "rho must be in [0, 1)");
    require(scope_size >= 1, "scope_size must be >= 1");
    require(!assignment.empty(), "plan covers no layers");

    const int layers = num_layers();
    std::vector<int> owner(static_cast<std::size_t>(layers), -1);
    for (std::size_t s = 0; s < scopes.size(); ++s) {
        const auto& scope = scopes[s];
        require(!scope.layers.empty(), "empty scope");
        require(std::is_sorted(scope.layers.begin(), scope.layers.end()), "scope layers must be ascending");
        for (int l : scope.layers) {
            require(l >= 0 && l < layers, "scope references unknown layer " + std::to_string(l));
            require(owner[static_cast<std::size_t>(l)] < 0, "layer " + std::to_string(l) + " in two scopes");
            owner[static_cast<std::size_t>(l)] = static_cast<int>(s);
        }
        require(std::adjacent_find(scope.prototypes.begin(), scope.prototypes.end(),
                                   [](ExpertRef a, ExpertRef b) { return !(a < b); }) == scope.prototypes.end(),
                "prototypes must be sorted and unique within a scope");
        for (ExpertRef p : scope.prototypes) {
            require(std::find(scope.layers.begin(), scope.layers.end(), p.layer) != scope.layers.end(),
                    "cross-scope prototype reference " + to_string(p));
            require(p.index >= 0 && p.index < static_cast<int>(assignment[static_cast<std::size_t>(p.layer)].size()),
                    "prototype out of range " + to_string(p));
        }
    }
    for (int l = 0; l < layers; ++l) {
        require(owner[static_cast<std::size_t>(l)] >= 0, "layer " + std::to_string(l) + " belongs to no scope");
    }

    if (!drop_mask.empty()) {
        require(drop_mask.size() == assignment.size(), "drop_mask shape mismatch");
        for (std::size_t l = 0; l < assignment.size(); ++l) {
            require(drop_mask[l].size() == assignment[l].size(), "drop_mask shape mismatch");
        }
    }

    for (int l = 0; l < layers; ++l) {
        const auto& scope = scopes[static_cast<std::size_t>(owner[static_cast<std::size_t>(l)])];
        const auto& row = assignment[static_cast<std::size_t>(l)];
        for (int i = 0; i < static_cast<int>(row.size()); ++i) {
            const ExpertRef slot{l, i};
            const ExpertRef to = row[static_cast<std::size_t>(i)];
            if (dropped(slot)) {
                require(to == slot, "dropped slot " + to_string(slot) + " must not be remapped");
                require(!std::binary_search(scope.prototypes.begin(), scope.prototypes.end(), slot),
                        "dropped slot " + to_string(slot) + " listed as prototype");
                continue;
            }
            require(std::binary_search(scope.prototypes.begin(), scope.prototypes.end(), to),
                    "dangling assignment: " + to_string(slot) + " -> " + to_string(to));
        }
    }
    for (const auto& scope : scopes) {
        for (ExpertRef p : scope.prototypes) {
            require(target(p) == p, "prototype " + to_string(p) + " must map to itself");
        }
    }
}

void ConsolidationPlan::validate_for(const ModelSpec& spec) const {
    validate();
    require(num_layers() == spec.num_layers(), "plan layer count does not match model");
    for (int l = 0; l < num_layers(); ++l) {
        require(static_cast<int>(assignment[static_cast<std::size_t>(l)].size()) ==
                    spec.experts_per_layer[static_cast<std::size_t>(l)],
                "plan expert count does not match model at layer " + std::to_string(l));
    }
}

ConsolidationPlan identity_plan(const ModelSpec& spec) {
    spec.validate();
    ConsolidationPlan plan;
    plan.policy = Policy::identity;
    for (int l = 0; l < spec.num_layers(); ++l) {
        PlanScope scope;
        scope.layers = {l};
        std::vector<ExpertRef> row;
        for (int i = 0; i < spec.experts_per_layer[static_cast<std::size_t>(l)]; ++i) {
            scope.prototypes.push_back({l, i});
            row.push_back({l, i});
        }
        plan.scopes.push_back(std::move(scope));
        plan.assignment.push_back(std::move(row));
    }
    return plan;
}

std::map<ExpertRef, std::vector<ExpertRef>> clusters(const ConsolidationPlan& plan) {
    std::map<ExpertRef, std::vector<ExpertRef>> out;
    for (const auto& scope : plan.scopes) {
        for (ExpertRef p : scope.prototypes) {
            out[p];
        }
    }
    for (int l = 0; l < plan.num_layers(); ++l) {
        const auto& row = plan.assignment[static_cast<std::size_t>(l)];
        for (int i = 0; i < static_cast<int>(row.size()); ++i) {
            if (plan.dropped({l, i})) {
                continue;
            }
            out[row[static_cast<std::size_t>(i)]].push_back({l, i});
        }
    }
    return out;
}

}  // namespace conmoe
