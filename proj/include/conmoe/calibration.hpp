// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "conmoe/moe_model.hpp"
#include "conmoe/types.hpp"

namespace conmoe {

struct ExpertStat {
    std::int64_t routed_count = 0;   // tokens whose top-k contained the expert
    double sum_weighted_norm = 0.0;  // sum of g_e(t) * ||e(h_t)||_2 over those tokens
    std::int64_t topk_count = 0;     // top-k appearances (frequency baseline)

    bool operator==(const ExpertStat&) const = default;
};

inline constexpr int kStatsVersion = 1;

struct CalibStats {
    std::int64_t token_total = 0;
    int top_k = 1;
    std::vector<std::vector<ExpertStat>> experts;  // [layer][index]
    Metadata metadata;

    int num_layers() const { return static_cast<int>(experts.size()); }
    std::vector<int> layer_sizes() const;
    const ExpertStat& at(ExpertRef ref) const;

    void validate() const;
    // validate() plus layout agreement with the model it will be used with.
    void validate_for(const ModelSpec& spec) const;

    // Field-wise sum of two collections over the same layout.
    CalibStats& operator+=(const CalibStats& other);

    bool operator==(const CalibStats&) const = default;
};

// Forwards every token through the residual stack and records, for each selected
// expert, its routing weight times the norm of its raw output at that layer.
CalibStats run_calibration(const MoEModel& model, std::span<const Vector> tokens, int threads = 1);

// a_e: mean of g_e(t) * ||e(h_t)|| over routed tokens, 0 when never routed.
double contribution(const CalibStats& stats, ExpertRef e);

std::int64_t frequency(const CalibStats& stats, ExpertRef e);

// Routing-weighted output-norm saliency; identical to contribution() here.
double reap_score(const CalibStats& stats, ExpertRef e);

}  // namespace conmoe
