// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/baselines.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "conmoe/consolidation.hpp"
#include "conmoe/error.hpp"
#include "conmoe/geometry.hpp"

namespace conmoe {

namespace {

// Indices of the top-k entries of one layer by key, ties to the lower index.
std::vector<int> top_indices(int count, int k, const std::function<double(int)>& key) {
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double ka = key(a);
        const double kb = key(b);
        if (ka != kb) {
            return ka > kb;
        }
        return a < b;
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

ConsolidationPlan prune_by(const CalibStats& stats, double rho, Policy policy,
                           const std::function<double(ExpertRef)>& key) {
    stats.validate();
    require(rho >= 0.0, "rho must be >= 0");
    require(rho < 1.0, "rho must be < 1");
    ConsolidationPlan plan;
    plan.rho = rho;
    plan.scope_size = 1;
    plan.policy = policy;
    for (int l = 0; l < stats.num_layers(); ++l) {
        const int n = static_cast<int>(stats.experts[static_cast<std::size_t>(l)].size());
        const auto kept = top_indices(n, budget(rho, n), [&](int i) { return key({l, i}); });
        PlanScope scope;
        scope.layers = {l};
        std::vector<ExpertRef> row;
        std::vector<bool> mask(static_cast<std::size_t>(n), true);
        for (int i = 0; i < n; ++i) {
            row.push_back({l, i});
        }
        for (int i : kept) {
            scope.prototypes.push_back({l, i});
            mask[static_cast<std::size_t>(i)] = false;
        }
        plan.scopes.push_back(std::move(scope));
        plan.assignment.push_back(std::move(row));
        plan.drop_mask.push_back(std::move(mask));
    }
    plan.validate();
    return plan;
}

Matrix blend(const std::vector<const Matrix*>& sources, const std::vector<double>& weights) {
    Matrix out(sources.front()->rows, sources.front()->cols);
    for (std::size_t k = 0; k < out.values.size(); ++k) {
        double acc = 0.0;
        for (std::size_t s = 0; s < sources.size(); ++s) {
            acc += weights[s] * static_cast<double>(sources[s]->values[k]);
        }
        out.values[k] = static_cast<float>(acc);
    }
    return out;
}

}  // namespace

ConsolidationPlan prune_frequency(const CalibStats& stats, double rho) {
    return prune_by(stats, rho, Policy::prune_frequency,
                    [&](ExpertRef e) { return static_cast<double>(frequency(stats, e)); });
}

ConsolidationPlan prune_reap(const CalibStats& stats, double rho) {
    ConsolidationPlan plan =
        prune_by(stats, rho, Policy::prune_reap, [&](ExpertRef e) { return reap_score(stats, e); });
    plan.metadata["reap_score"] = "alias of routing-conditioned contribution";
    return plan;
}

FusedModel fuse_weighted_average(const MoEModel& model, const ConsolidationPlan& plan, const CalibStats& stats) {
    require(!plan.is_pruning(), "weighted-average fusion needs a remapping plan, got a pruning plan");
    model.validate();
    plan.validate_for(model.spec);
    stats.validate_for(model.spec);

    FusedModel fused{model, {}};
    for (const auto& [prototype, members] : clusters(plan)) {
        double total = 0.0;
        for (ExpertRef e : members) {
            total += static_cast<double>(frequency(stats, e));
        }
        std::vector<double> weights;
        for (ExpertRef e : members) {
            weights.push_back(total > 0.0 ? static_cast<double>(frequency(stats, e)) / total
                                          : 1.0 / static_cast<double>(members.size()));
        }
        std::vector<const Matrix*> gate;
        std::vector<const Matrix*> up;
        std::vector<const Matrix*> down;
        for (ExpertRef e : members) {
            const auto& w = model.expert(e);
            gate.push_back(&w.gate);
            up.push_back(&w.up);
            down.push_back(&w.down);
        }
        fused.base.expert(prototype) = ExpertWeights{blend(gate, weights), blend(up, weights), blend(down, weights)};

        auto& prov = fused.provenance[prototype];
        std::ostringstream note;
        for (std::size_t i = 0; i < members.size(); ++i) {
            prov.emplace_back(members[i], weights[i]);
            note << (i ? ";" : "") << to_string(members[i]) << '@' << format_double(weights[i]);
        }
        fused.base.metadata["fusion." + to_string(prototype)] = note.str();
    }
    fused.base.metadata["fusion_method"] = "weighted_average";
    return fused;
}

MergeResult merge_msmoe(const MoEModel& model, const CalibStats& stats, double rho, double eps, int threads) {
    model.validate();
    stats.validate_for(model.spec);
    require(rho >= 0.0, "rho must be >= 0");
    require(rho < 1.0, "rho must be < 1");

    ConsolidationPlan plan;
    plan.rho = rho;
    plan.scope_size = 1;
    plan.policy = Policy::msmoe_merge;
    for (int l = 0; l < model.spec.num_layers(); ++l) {
        const int n = model.spec.experts_per_layer[static_cast<std::size_t>(l)];
        const auto core_idx = top_indices(n, budget(rho, n), [&](int i) {
            return static_cast<double>(frequency(stats, {l, i}));
        });
        std::vector<ExpertRef> refs;
        for (int i = 0; i < n; ++i) {
            refs.push_back({l, i});
        }
        std::vector<ExpertRef> cores;
        for (int i : core_idx) {
            cores.push_back({l, i});
        }
        const DistanceTable table = distance_matrix(model, refs, eps, threads);
        plan.assignment.push_back(assign(cores, table));
        plan.scopes.push_back({{l}, std::move(cores)});
    }
    plan.metadata["eps"] = format_double(eps);
    plan.metadata["merge"] = "frequency cores, nearest-core assignment, usage-weighted averaging";
    plan.validate_for(model.spec);

    FusedModel fused = fuse_weighted_average(model, plan, stats);
    return {std::move(plan), std::move(fused)};
}

}  // namespace conmoe
