// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "conmoe/error.hpp"
#include "conmoe/parallel.hpp"

namespace conmoe {

namespace {

struct Hit {
    int layer;
    int slot;
    double weighted_norm;
};

double l2_norm(const Vector& v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

std::vector<Hit> trace_token(const MoEModel& model, std::span<const double> token) {
    std::vector<Hit> hits;
    Vector h(token.begin(), token.end());
    for (int l = 0; l < model.spec.num_layers(); ++l) {
        const auto& layer = model.layers[static_cast<std::size_t>(l)];
        const TopKSelection sel = router_topk(layer.router, h, model.spec.top_k);
        std::vector<std::pair<int, std::pair<double, Vector>>> routed;
        for (std::size_t j = 0; j < sel.indices.size(); ++j) {
            const int slot = sel.indices[j];
            Vector y = expert_forward(layer.experts[static_cast<std::size_t>(slot)], h);
            hits.push_back({l, slot, sel.weights[j] * l2_norm(y)});
            routed.push_back({slot, {sel.weights[j], std::move(y)}});
        }
        // Same ascending-slot accumulation as moe_forward.
        std::sort(routed.begin(), routed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        Vector out(h.size(), 0.0);
        for (const auto& [slot, wy] : routed) {
            for (std::size_t d = 0; d < out.size(); ++d) {
                out[d] += wy.first * wy.second[d];
            }
        }
        for (std::size_t d = 0; d < h.size(); ++d) {
            h[d] += out[d];
        }
    }
    return hits;
}

}  // namespace

std::vector<int> CalibStats::layer_sizes() const {
    std::vector<int> sizes;
    sizes.reserve(experts.size());
    for (const auto& layer : experts) {
        sizes.push_back(static_cast<int>(layer.size()));
    }
    return sizes;
}

const ExpertStat& CalibStats::at(ExpertRef ref) const {
    require(ref.layer >= 0 && ref.layer < num_layers(), "unknown expert " + to_string(ref));
    const auto& layer = experts[static_cast<std::size_t>(ref.layer)];
    require(ref.index >= 0 && ref.index < static_cast<int>(layer.size()), "unknown expert " + to_string(ref));
    return layer[static_cast<std::size_t>(ref.index)];
}

void CalibStats::validate() const {
    require(token_total >= 0, "negative token_total");
    require(top_k >= 1, "top_k must be >= 1");
    require(!experts.empty(), "stats cover no layers");
    for (int l = 0; l < num_layers(); ++l) {
        const auto& layer = experts[static_cast<std::size_t>(l)];
        require(!layer.empty(), "missing expert record in layer " + std::to_string(l));
        for (int i = 0; i < static_cast<int>(layer.size()); ++i) {
            const auto& s = layer[static_cast<std::size_t>(i)];
            const std::string who = " for expert " + to_string({l, i});
            require(s.routed_count >= 0 && s.topk_count >= 0, "negative count" + who);
            require(s.routed_count <= token_total && s.topk_count <= token_total,
                    "inconsistent stats: count exceeds token_total" + who);
            require(std::isfinite(s.sum_weighted_norm) && s.sum_weighted_norm >= 0.0,
                    "inconsistent stats: negative contribution" + who);
            require(s.routed_count > 0 || s.sum_weighted_norm == 0.0,
                    "inconsistent stats: contribution without routed tokens" + who);
        }
    }
}

void CalibStats::validate_for(const ModelSpec& spec) const {
    validate();
    require(layer_sizes() == spec.experts_per_layer, "stats layout does not match model");
    require(top_k == spec.top_k, "stats top_k does not match model");
}

CalibStats& CalibStats::operator+=(const CalibStats& other) {
    require(layer_sizes() == other.layer_sizes() && top_k == other.top_k, "cannot add stats of different layouts");
    token_total += other.token_total;
    for (std::size_t l = 0; l < experts.size(); ++l) {
        for (std::size_t i = 0; i < experts[l].size(); ++i) {
            experts[l][i].routed_count += other.experts[l][i].routed_count;
            experts[l][i].sum_weighted_norm += other.experts[l][i].sum_weighted_norm;
            experts[l][i].topk_count += other.experts[l][i].topk_count;
        }
    }
    return *this;
}

CalibStats run_calibration(const MoEModel& model, std::span<const Vector> tokens, int threads) {
    require(!tokens.empty(), "empty token list");
    model.validate();
    for (const auto& t : tokens) {
        require(static_cast<int>(t.size()) == model.spec.hidden, "dimension mismatch: calibration token");
    }

    std::vector<std::vector<Hit>> per_token(tokens.size());
    parallel_for(tokens.size(), threads, [&](std::size_t t) { per_token[t] = trace_token(model, tokens[t]); });

    CalibStats stats;
    stats.top_k = model.spec.top_k;
    stats.token_total = static_cast<std::int64_t>(tokens.size());
    for (int n : model.spec.experts_per_layer) {
        stats.experts.emplace_back(static_cast<std::size_t>(n));
    }
    // Token-order reduction keeps the sums independent of the worker count.
    for (const auto& hits : per_token) {
        for (const Hit& hit : hits) {
            auto& s = stats.experts[static_cast<std::size_t>(hit.layer)][static_cast<std::size_t>(hit.slot)];
            s.routed_count += 1;
            s.topk_count += 1;
            s.sum_weighted_norm += hit.weighted_norm;
        }
    }
    return stats;
}

double contribution(const CalibStats& stats, ExpertRef e) {
    const ExpertStat& s = stats.at(e);
    if (s.routed_count == 0) {
        return 0.0;
    }
    return s.sum_weighted_norm / static_cast<double>(s.routed_count);
}

std::int64_t frequency(const CalibStats& stats, ExpertRef e) {
    return stats.at(e).topk_count;
}

double reap_score(const CalibStats& stats, ExpertRef e) {
    return contribution(stats, e);
}

}  // namespace conmoe
