// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/moe_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "conmoe/error.hpp"

namespace conmoe {

namespace {

void check_matrix(const Matrix& m, int rows, int cols, const std::string& what) {
    require(m.rows == rows && m.cols == cols && m.size() == static_cast<std::size_t>(rows) * cols,
            what + " has shape " + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ", expected " +
                std::to_string(rows) + "x" + std::to_string(cols));
    for (float v : m.values) {
        require(std::isfinite(v), what + " contains a non-finite entry");
    }
}

void axpy(double alpha, const Vector& x, Vector& y) {
    for (std::size_t d = 0; d < y.size(); ++d) {
        y[d] += alpha * x[d];
    }
}

// Selected (slot, weight) pairs in ascending slot order.
std::vector<std::pair<int, double>> by_slot(const TopKSelection& selection) {
    std::vector<std::pair<int, double>> out;
    out.reserve(selection.indices.size());
    for (std::size_t j = 0; j < selection.indices.size(); ++j) {
        out.emplace_back(selection.indices[j], selection.weights[j]);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

// Surviving (slot, weight) pairs after applying drop semantics.
std::vector<std::pair<int, double>> effective_weights(const TopKSelection& selection, int layer,
                                                      const ConsolidationPlan& plan) {
    auto entries = by_slot(selection);
    if (!plan.is_pruning()) {
        return entries;
    }
    std::erase_if(entries, [&](const auto& e) { return plan.dropped({layer, e.first}); });
    double total = 0.0;
    for (const auto& e : entries) {
        total += e.second;
    }
    if (entries.empty() || total <= 0.0) {
        return {};
    }
    for (auto& e : entries) {
        e.second /= total;
    }
    return entries;
}

constexpr double kOutputGain = 0.1;

void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (float& v : m.values) {
        v = static_cast<float>(dist(rng));
    }
}

void perturb(Matrix& m, std::mt19937_64& rng, double noise) {
    if (noise <= 0.0) {
        return;
    }
    std::normal_distribution<double> dist(0.0, noise);
    for (float& v : m.values) {
        v = static_cast<float>(static_cast<double>(v) + dist(rng));
    }
}

ExpertWeights noisy_copy(const ExpertWeights& src, std::mt19937_64& rng, double noise) {
    ExpertWeights copy = src;
    perturb(copy.gate, rng, noise);
    perturb(copy.up, rng, noise);
    perturb(copy.down, rng, noise);
    return copy;
}

}  // namespace

const ExpertWeights& MoEModel::expert(ExpertRef ref) const {
    require(ref.layer >= 0 && ref.layer < static_cast<int>(layers.size()), "unknown expert " + to_string(ref));
    const auto& experts = layers[static_cast<std::size_t>(ref.layer)].experts;
    require(ref.index >= 0 && ref.index < static_cast<int>(experts.size()), "unknown expert " + to_string(ref));
    return experts[static_cast<std::size_t>(ref.index)];
}

ExpertWeights& MoEModel::expert(ExpertRef ref) {
    return const_cast<ExpertWeights&>(std::as_const(*this).expert(ref));
}

void MoEModel::validate() const {
    spec.validate();
    require(static_cast<int>(layers.size()) == spec.num_layers(), "layer count does not match spec");
    for (int l = 0; l < spec.num_layers(); ++l) {
        const auto& layer = layers[static_cast<std::size_t>(l)];
        const int n = spec.experts_per_layer[static_cast<std::size_t>(l)];
        const std::string prefix = "layers." + std::to_string(l);
        require(static_cast<int>(layer.experts.size()) == n, prefix + " expert count does not match spec");
        check_matrix(layer.router, n, spec.hidden, prefix + ".router");
        for (int i = 0; i < n; ++i) {
            const auto& e = layer.experts[static_cast<std::size_t>(i)];
            const std::string name = prefix + ".experts." + std::to_string(i);
            check_matrix(e.gate, spec.intermediate, spec.hidden, name + ".gate");
            check_matrix(e.up, spec.intermediate, spec.hidden, name + ".up");
            check_matrix(e.down, spec.hidden, spec.intermediate, name + ".down");
        }
    }
}

double silu(double x) {
    return x / (1.0 + std::exp(-x));
}

Vector expert_forward(const ExpertWeights& expert, std::span<const double> h) {
    Vector gate = matvec(expert.gate, h);
    const Vector up = matvec(expert.up, h);
    for (std::size_t j = 0; j < gate.size(); ++j) {
        gate[j] = silu(gate[j]) * up[j];
    }
    return matvec(expert.down, gate);
}

TopKSelection router_topk(const Matrix& router, std::span<const double> h, int k) {
    require(k >= 1, "top_k must be >= 1");
    require(k <= router.rows, "top_k exceeds expert count");
    const Vector logits = matvec(router, h);
    for (double v : logits) {
        require(std::isfinite(v), "non-finite router logit");
    }
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]) {
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
        }
        return a < b;
    });

    TopKSelection sel;
    sel.indices.assign(order.begin(), order.begin() + k);
    const double top = logits[static_cast<std::size_t>(sel.indices.front())];
    double total = 0.0;
    sel.weights.reserve(static_cast<std::size_t>(k));
    for (int i : sel.indices) {
        const double w = std::exp(logits[static_cast<std::size_t>(i)] - top);
        sel.weights.push_back(w);
        total += w;
    }
    for (double& w : sel.weights) {
        w /= total;
    }
    return sel;
}

Vector moe_forward(const MoELayer& layer, int top_k, std::span<const double> h) {
    const TopKSelection sel = router_topk(layer.router, h, top_k);
    Vector out(h.size(), 0.0);
    for (const auto& [slot, weight] : by_slot(sel)) {
        axpy(weight, expert_forward(layer.experts[static_cast<std::size_t>(slot)], h), out);
    }
    return out;
}

std::vector<std::pair<ExpertRef, double>> prototype_coefficients(const TopKSelection& selection, int layer,
                                                                 const ConsolidationPlan& plan) {
    std::vector<std::pair<ExpertRef, double>> alpha;
    for (const auto& [slot, weight] : effective_weights(selection, layer, plan)) {
        const ExpertRef p = plan.target({layer, slot});
        auto it = std::find_if(alpha.begin(), alpha.end(), [&](const auto& a) { return a.first == p; });
        if (it == alpha.end()) {
            alpha.emplace_back(p, weight);
        } else {
            it->second += weight;
        }
    }
    std::sort(alpha.begin(), alpha.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return alpha;
}

Vector consolidated_moe_forward(const MoEModel& model, int layer, const ConsolidationPlan& plan,
                                std::span<const double> h, TopKSelection* selection_out) {
    require(layer >= 0 && layer < plan.num_layers(), "slot missing from plan: layer " + std::to_string(layer));
    const auto& moe = model.layers.at(static_cast<std::size_t>(layer));
    TopKSelection sel = router_topk(moe.router, h, model.spec.top_k);

    Vector out(h.size(), 0.0);
    std::vector<std::pair<ExpertRef, Vector>> cache;
    for (const auto& [slot, weight] : effective_weights(sel, layer, plan)) {
        const ExpertRef p = plan.target({layer, slot});
        auto it = std::find_if(cache.begin(), cache.end(), [&](const auto& c) { return c.first == p; });
        if (it == cache.end()) {
            cache.emplace_back(p, expert_forward(model.expert(p), h));
            it = std::prev(cache.end());
        }
        axpy(weight, it->second, out);
    }
    if (selection_out != nullptr) {
        *selection_out = std::move(sel);
    }
    return out;
}

Vector model_forward(const MoEModel& model, const ConsolidationPlan* plan, std::span<const double> h0,
                     ForwardTrace* trace) {
    require(static_cast<int>(h0.size()) == model.spec.hidden, "dimension mismatch: hidden state");
    if (plan != nullptr) {
        require(plan->num_layers() == model.spec.num_layers(), "plan layer count does not match model");
    }
    Vector h(h0.begin(), h0.end());
    for (int l = 0; l < model.spec.num_layers(); ++l) {
        const auto& layer = model.layers[static_cast<std::size_t>(l)];
        TopKSelection sel;
        Vector y;
        if (plan != nullptr) {
            y = consolidated_moe_forward(model, l, *plan, h, &sel);
        } else {
            y = moe_forward(layer, model.spec.top_k, h);
            if (trace != nullptr) {
                sel = router_topk(layer.router, h, model.spec.top_k);
            }
        }
        if (trace != nullptr) {
            trace->layer_inputs.push_back(h);
            trace->layer_outputs.push_back(y);
            trace->selections.push_back(std::move(sel));
        }
        for (std::size_t d = 0; d < h.size(); ++d) {
            h[d] += y[d];
        }
    }
    return h;
}

MoEModel materialize(const MoEModel& model, const ConsolidationPlan& plan) {
    model.validate();
    plan.validate_for(model.spec);
    MoEModel out = model;
    std::string dropped;
    for (int l = 0; l < plan.num_layers(); ++l) {
        for (int i = 0; i < model.spec.experts_per_layer[static_cast<std::size_t>(l)]; ++i) {
            const ExpertRef slot{l, i};
            auto& dst = out.expert(slot);
            if (plan.dropped(slot)) {
                std::fill(dst.gate.values.begin(), dst.gate.values.end(), 0.0f);
                std::fill(dst.up.values.begin(), dst.up.values.end(), 0.0f);
                std::fill(dst.down.values.begin(), dst.down.values.end(), 0.0f);
                dropped += (dropped.empty() ? "" : ",") + to_string(slot);
                continue;
            }
            dst = model.expert(plan.target(slot));
        }
    }
    out.metadata["materialized_from_policy"] = std::string(to_string(plan.policy));
    if (!dropped.empty()) {
        out.metadata["materialized_zeroed_slots"] = dropped;
    }
    return out;
}

DupMode parse_dup_mode(std::string_view tag) {
    if (tag == "none") return DupMode::none;
    if (tag == "within") return DupMode::within;
    if (tag == "cross") return DupMode::cross;
    if (tag == "both") return DupMode::both;
    throw ValidationError("unknown dup mode: " + std::string(tag));
}

std::string_view to_string(DupMode mode) {
    switch (mode) {
        case DupMode::none: return "none";
        case DupMode::within: return "within";
        case DupMode::cross: return "cross";
        case DupMode::both: return "both";
    }
    return "none";
}

SyntheticModel gen_synthetic(const ModelSpec& spec, std::uint64_t seed, const DupConfig& dup) {
    spec.validate();
    require(dup.noise >= 0.0, "dup noise must be non-negative");
    const bool within = dup.mode == DupMode::within || dup.mode == DupMode::both;
    const bool cross = dup.mode == DupMode::cross || dup.mode == DupMode::both;

    SyntheticModel result;
    MoEModel& model = result.model;
    model.spec = spec;
    std::mt19937_64 rng(seed);
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(spec.hidden));
    // Small output scale keeps the residual stack from blowing up with depth.
    const double out_scale = kOutputGain / std::sqrt(static_cast<double>(spec.intermediate));
    for (int l = 0; l < spec.num_layers(); ++l) {
        const int n = spec.experts_per_layer[static_cast<std::size_t>(l)];
        MoELayer layer;
        for (int i = 0; i < n; ++i) {
            ExpertWeights e{Matrix(spec.intermediate, spec.hidden), Matrix(spec.intermediate, spec.hidden),
                            Matrix(spec.hidden, spec.intermediate)};
            fill_normal(e.gate, rng, in_scale);
            fill_normal(e.up, rng, in_scale);
            fill_normal(e.down, rng, out_scale);
            layer.experts.push_back(std::move(e));
        }
        layer.router = Matrix(n, spec.hidden);
        fill_normal(layer.router, rng, in_scale);
        model.layers.push_back(std::move(layer));
    }

    for (int l = 0; l < spec.num_layers(); ++l) {
        auto& experts = model.layers[static_cast<std::size_t>(l)].experts;
        const int n = static_cast<int>(experts.size());
        const bool copied_layer = cross && l % 2 == 1;
        if (copied_layer) {
            const auto& source = model.layers[static_cast<std::size_t>(l - 1)].experts;
            const int m = std::min(n, static_cast<int>(source.size()));
            for (int i = 0; i < m; ++i) {
                experts[static_cast<std::size_t>(i)] = noisy_copy(source[static_cast<std::size_t>(i)], rng, dup.noise);
                result.duplicates.push_back({{l, i}, {l - 1, i}});
            }
            continue;
        }
        if (within) {
            const int pairs = dup.within_pairs < 0 ? n / 2 : dup.within_pairs;
            require(2 * pairs <= n, "duplicate pairs exceed experts in layer " + std::to_string(l));
            for (int j = 0; j < pairs; ++j) {
                const int copy = n - pairs + j;
                experts[static_cast<std::size_t>(copy)] = noisy_copy(experts[static_cast<std::size_t>(j)], rng, dup.noise);
                result.duplicates.push_back({{l, copy}, {l, j}});
            }
        }
    }
    model.metadata["seed"] = std::to_string(seed);
    model.metadata["dup_mode"] = std::string(to_string(dup.mode));
    model.metadata["dup_noise"] = format_double(dup.noise);
    return result;
}

std::vector<Vector> synthetic_tokens(int count, int hidden, std::uint64_t seed) {
    require(count >= 0 && hidden > 0, "invalid token request");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<Vector> tokens(static_cast<std::size_t>(count), Vector(static_cast<std::size_t>(hidden)));
    for (auto& t : tokens) {
        for (double& v : t) {
            v = dist(rng);
        }
    }
    return tokens;
}

}  // namespace conmoe
