// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <utility>
#include <vector>

#include "conmoe/calibration.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/plan.hpp"

namespace conmoe {

// Model whose prototype slots hold cluster-averaged weights.
struct FusedModel {
    MoEModel base;
    // prototype -> (source slot, fusion weight), sources ascending
    std::map<ExpertRef, std::vector<std::pair<ExpertRef, double>>> provenance;
};

// Keeps the top budget(rho, N_l) experts of each layer by top-k frequency and
// drops the rest. Survivors map to themselves.
ConsolidationPlan prune_frequency(const CalibStats& stats, double rho);

// As prune_frequency, ranked by the routing-weighted output-norm score.
ConsolidationPlan prune_reap(const CalibStats& stats, double rho);

struct MergeResult {
    ConsolidationPlan plan;
    FusedModel fused;
};

// Layer-local merge: the most frequently routed experts become cores, every other
// expert joins its nearest core, and each core is replaced by the usage-weighted
// average of its cluster.
MergeResult merge_msmoe(const MoEModel& model, const CalibStats& stats, double rho, double eps = kDefaultEps,
                        int threads = 1);

// Replaces each prototype by the average of its cluster with weights proportional
// to top-k frequency (uniform when the whole cluster was never routed).
FusedModel fuse_weighted_average(const MoEModel& model, const ConsolidationPlan& plan, const CalibStats& stats);

}  // namespace conmoe
