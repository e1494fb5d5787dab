// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "conmoe/analysis.hpp"
#include "conmoe/baselines.hpp"
#include "conmoe/calibration.hpp"
#include "conmoe/consolidation.hpp"
#include "test_support.hpp"

using namespace conmoe;
using namespace conmoe::testing;

namespace {

CalibStats layer_stats(const std::vector<std::int64_t>& counts, const std::vector<double>& sums = {}) {
    CalibStats s;
    s.token_total = 100;
    s.experts.resize(1);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double sum = sums.empty() ? static_cast<double>(counts[i]) : sums[i];
        s.experts[0].push_back({counts[i], counts[i] == 0 ? 0.0 : sum, counts[i]});
    }
    return s;
}

std::vector<int> kept(const ConsolidationPlan& plan, int layer = 0) {
    std::vector<int> out;
    for (std::size_t i = 0; i < plan.drop_mask[layer].size(); ++i) {
        if (!plan.drop_mask[layer][i]) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

void check_never_remaps(const ConsolidationPlan& plan) {
    REQUIRE(plan.is_pruning());
    for (int l = 0; l < plan.num_layers(); ++l) {
        for (std::size_t i = 0; i < plan.assignment[l].size(); ++i) {
            CHECK(plan.assignment[l][i] == ExpertRef{l, static_cast<int>(i)});
        }
    }
}

}  // namespace

TEST_SUITE("prune_frequency") {
    TEST_CASE("keeps the most frequent") {
        const auto plan = prune_frequency(layer_stats({5, 3, 1, 0}), 0.5);
        CHECK(kept(plan) == std::vector<int>{0, 1});
        check_never_remaps(plan);
        CHECK(plan.policy == Policy::prune_frequency);
    }

    TEST_CASE("rho zero drops nothing") {
        const auto plan = prune_frequency(layer_stats({5, 3, 1, 0}), 0.0);
        CHECK(kept(plan) == std::vector<int>{0, 1, 2, 3});
    }

    TEST_CASE("equal counts keep the lowest indices") {
        const auto plan = prune_frequency(layer_stats({2, 2, 2, 2, 2, 2}), 0.5);
        CHECK(kept(plan) == std::vector<int>{0, 1, 2});
    }
}

TEST_SUITE("prune_reap") {
    TEST_CASE("keeps the highest scores") {
        const auto plan = prune_reap(layer_stats({1, 1, 1, 1}, {2.5, 0.1, 1.0, 0.9}), 0.5);
        CHECK(kept(plan) == std::vector<int>{0, 2});
        check_never_remaps(plan);
    }

    TEST_CASE("never routed experts rank last") {
        const auto plan = prune_reap(layer_stats({0, 1, 0, 1}, {0, 0.01, 0, 0.02}), 0.5);
        CHECK(kept(plan) == std::vector<int>{1, 3});
    }

    TEST_CASE("same as frequency pruning when the orders agree") {
        const auto stats = layer_stats({9, 7, 4, 2, 1, 0}, {18, 14, 8, 4, 2, 0});
        CHECK(prune_reap(stats, 0.5).drop_mask == prune_frequency(stats, 0.5).drop_mask);
    }
}

TEST_SUITE("fusion") {
    TEST_CASE("core with count 3 and member with count 1 blend 3:1") {
        MoEModel model = zero_model(make_spec(1, 2, 2, 2, 1));
        std::mt19937_64 rng(1);
        for (auto& e : model.layers[0].experts) {
            e = {dyadic_matrix(2, 2, rng), dyadic_matrix(2, 2, rng), dyadic_matrix(2, 2, rng)};
        }
        ConsolidationPlan plan = identity_plan(model.spec);
        plan.scopes[0].prototypes = {{0, 0}};
        plan.assignment[0][1] = {0, 0};
        const FusedModel fused = fuse_weighted_average(model, plan, layer_stats({3, 1}));
        const auto& core = model.layers[0].experts[0];
        const auto& member = model.layers[0].experts[1];
        const auto& out = fused.base.layers[0].experts[0];
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(out.gate.values[k] == doctest::Approx(0.75 * core.gate.values[k] + 0.25 * member.gate.values[k]));
            CHECK(out.down.values[k] == doctest::Approx(0.75 * core.down.values[k] + 0.25 * member.down.values[k]));
        }
        const auto& prov = fused.provenance.at({0, 0});
        REQUIRE(prov.size() == 2);
        CHECK(prov[0].second == 0.75);
        CHECK(prov[1].second == 0.25);
    }

    TEST_CASE("zero counts give a uniform average") {
        MoEModel model = gen_synthetic(make_spec(1, 2, 3, 3, 1), 2).model;
        ConsolidationPlan plan = identity_plan(model.spec);
        plan.scopes[0].prototypes = {{0, 1}};
        plan.assignment[0][0] = {0, 1};
        const FusedModel fused = fuse_weighted_average(model, plan, layer_stats({0, 0}));
        const auto& prov = fused.provenance.at({0, 1});
        CHECK(prov[0].second == 0.5);
        CHECK(prov[1].second == 0.5);
    }

    TEST_CASE("singleton clusters are untouched") {
        const MoEModel model = gen_synthetic(make_spec(2, 4, 3, 3, 1), 3).model;
        const CalibStats stats = run_calibration(model, synthetic_tokens(10, 3, 4));
        CHECK(fuse_weighted_average(model, identity_plan(model.spec), stats).base.layers == model.layers);
    }

    TEST_CASE("exact duplicates fuse to the same weights") {
        const auto s = gen_synthetic(make_spec(1, 4, 3, 3, 1), 5, {DupMode::within, 0.0});
        ConsolidationPlan plan = identity_plan(s.model.spec);
        plan.scopes[0].prototypes = {{0, 0}, {0, 1}};
        plan.assignment[0] = {{0, 0}, {0, 1}, {0, 0}, {0, 1}};
        const FusedModel fused = fuse_weighted_average(s.model, plan, layer_stats({7, 2, 1, 5}));
        CHECK(fused.base.layers[0].experts[0] == s.model.layers[0].experts[0]);
        CHECK(fused.base.layers[0].experts[1] == s.model.layers[0].experts[1]);
    }

    TEST_CASE("fused entries stay inside the source interval") {
        std::mt19937_64 rng(6);
        for (int trial = 0; trial < 30; ++trial) {
            const MoEModel model = gen_synthetic(make_spec(1, 2, 4, 3, 1), 300 + trial).model;
            ConsolidationPlan plan = identity_plan(model.spec);
            plan.scopes[0].prototypes = {{0, 0}};
            plan.assignment[0][1] = {0, 0};
            const std::int64_t c0 = trial % 5;
            const std::int64_t c1 = (trial * 7) % 4;
            const FusedModel fused = fuse_weighted_average(model, plan, layer_stats({c0, c1}));
            const auto& a = model.layers[0].experts[0];
            const auto& b = model.layers[0].experts[1];
            const auto& f = fused.base.layers[0].experts[0];
            for (std::size_t k = 0; k < a.gate.size(); ++k) {
                CHECK(f.gate.values[k] >= std::min(a.gate.values[k], b.gate.values[k]));
                CHECK(f.gate.values[k] <= std::max(a.gate.values[k], b.gate.values[k]));
            }
        }
    }

    TEST_CASE("pruning plans cannot be fused") {
        const MoEModel model = gen_synthetic(make_spec(1, 4, 3, 3, 2), 7).model;
        const auto stats = layer_stats({4, 3, 2, 1});
        CHECK_THROWS_AS(fuse_weighted_average(model, prune_frequency(stats, 0.5), stats), ValidationError);
    }
}

TEST_SUITE("merge_msmoe") {
    TEST_CASE("cores are the most frequent and every slot maps to a core") {
        const MoEModel model = gen_synthetic(make_spec(2, 8, 5, 4, 2), 8).model;
        const CalibStats stats = run_calibration(model, synthetic_tokens(50, 5, 9));
        const MergeResult r = merge_msmoe(model, stats, 0.5);
        CHECK(r.plan.policy == Policy::msmoe_merge);
        CHECK_FALSE(r.plan.is_pruning());
        const auto freq_plan = prune_frequency(stats, 0.5);
        for (int l = 0; l < 2; ++l) {
            std::vector<ExpertRef> cores;
            for (int i : kept(freq_plan, l)) {
                cores.push_back({l, i});
            }
            CHECK(r.plan.scopes[l].prototypes == cores);
            for (const auto& target : r.plan.assignment[l]) {
                CHECK(std::binary_search(cores.begin(), cores.end(), target));
            }
        }
        CHECK(r.fused.base.metadata.count("fusion_method") == 1);
    }

    TEST_CASE("budget parity with the other methods") {
        const MoEModel model = gen_synthetic(make_spec(4, 8, 5, 4, 2), 10).model;
        const CalibStats stats = run_calibration(model, synthetic_tokens(50, 5, 11));
        for (double rho : {0.25, 0.5, 0.6, 0.9}) {
            ScopeConfig cfg;
            cfg.rho = rho;
            const int expect = retained_experts(consolidate(model, stats, cfg));
            CHECK(retained_experts(prune_frequency(stats, rho)) == expect);
            CHECK(retained_experts(prune_reap(stats, rho)) == expect);
            CHECK(retained_experts(merge_msmoe(model, stats, rho).plan) == expect);
        }
    }
}
