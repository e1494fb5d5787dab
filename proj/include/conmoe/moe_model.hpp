// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conmoe/plan.hpp"
#include "conmoe/types.hpp"

namespace conmoe {

// SwiGLU feed-forward expert: down * (silu(gate h) * (up h)).
struct ExpertWeights {
    Matrix gate;  // intermediate x hidden
    Matrix up;    // intermediate x hidden
    Matrix down;  // hidden x intermediate

    bool operator==(const ExpertWeights&) const = default;
};

struct MoELayer {
    std::vector<ExpertWeights> experts;
    Matrix router;  // num_experts x hidden

    bool operator==(const MoELayer&) const = default;
};

struct MoEModel {
    ModelSpec spec;
    std::vector<MoELayer> layers;
    Metadata metadata;

    const ExpertWeights& expert(ExpertRef ref) const;
    ExpertWeights& expert(ExpertRef ref);
    // Shapes, counts and finiteness against spec.
    void validate() const;

    bool operator==(const MoEModel&) const = default;
};

struct TopKSelection {
    std::vector<int> indices;     // descending weight, ties by ascending index
    std::vector<double> weights;  // softmax over the selected logits
};

double silu(double x);

Vector expert_forward(const ExpertWeights& expert, std::span<const double> h);

TopKSelection router_topk(const Matrix& router, std::span<const double> h, int k);

// Sum of g_i * E_i(h) over the top-k selection, accumulated in ascending slot index.
Vector moe_forward(const MoELayer& layer, int top_k, std::span<const double> h);

// Per-prototype coefficients alpha_p for one token at one layer, ascending by prototype.
// For pruning plans the surviving weights are renormalised; empty if none survive.
std::vector<std::pair<ExpertRef, double>> prototype_coefficients(const TopKSelection& selection, int layer,
                                                                 const ConsolidationPlan& plan);

// Router runs on the original slots; each selected slot is served by its prototype.
// Every distinct prototype is evaluated once and contributions are accumulated in
// ascending slot order, which makes the result bit-identical to the plain forward of
// the materialised model.
Vector consolidated_moe_forward(const MoEModel& model, int layer, const ConsolidationPlan& plan,
                                std::span<const double> h, TopKSelection* selection_out = nullptr);

struct ForwardTrace {
    std::vector<Vector> layer_inputs;   // hidden state entering each layer
    std::vector<Vector> layer_outputs;  // MoE output (before the residual add)
    std::vector<TopKSelection> selections;
};

// Residual stack h <- h + MoE(h); with a plan every layer uses the consolidated operator.
Vector model_forward(const MoEModel& model, const ConsolidationPlan* plan, std::span<const double> h0,
                     ForwardTrace* trace = nullptr);

// Original architecture with every slot filled by its prototype's weights; dropped
// slots of pruning plans are zeroed and noted in metadata.
MoEModel materialize(const MoEModel& model, const ConsolidationPlan& plan);

enum class DupMode { none, within, cross, both };

DupMode parse_dup_mode(std::string_view tag);
std::string_view to_string(DupMode mode);

struct DupConfig {
    DupMode mode = DupMode::none;
    double noise = 0.0;
    // Within-layer duplicate pairs per layer; -1 plants floor(N_l / 2).
    int within_pairs = -1;
};

// (copy, source) pairs planted by gen_synthetic.
using DuplicateMap = std::vector<std::pair<ExpertRef, ExpertRef>>;

struct SyntheticModel {
    MoEModel model;
    DuplicateMap duplicates;
};

// Deterministic random model. Within-layer mode with p pairs makes slot N - p + j a
// copy of slot j; cross mode makes every odd layer a copy of the preceding even layer.
SyntheticModel gen_synthetic(const ModelSpec& spec, std::uint64_t seed, const DupConfig& dup = {});

// Standard-normal hidden vectors for calibration and evaluation.
std::vector<Vector> synthetic_tokens(int count, int hidden, std::uint64_t seed);

}  // namespace conmoe
