// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/consolidation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "conmoe/error.hpp"

namespace conmoe {

namespace {

// Row indices ranked by key descending, ties by ascending reference.
std::vector<std::size_t> rank_rows(const DistanceTable& table, std::span<const double> key,
                                   std::span<const std::size_t> rows) {
    std::vector<std::size_t> ranked(rows.begin(), rows.end());
    std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
        if (key[a] != key[b]) {
            return key[a] > key[b];
        }
        return table.refs[a] < table.refs[b];
    });
    return ranked;
}

std::vector<double> policy_key(const ScoreTable& scores, const CalibStats& stats, Policy policy) {
    std::vector<double> key;
    key.reserve(scores.size());
    for (const auto& s : scores) {
        switch (policy) {
            case Policy::adaptive:
            case Policy::fixed_k:
                key.push_back(s.score);
                break;
            case Policy::usage_topk:
                key.push_back(static_cast<double>(frequency(stats, s.ref)));
                break;
            case Policy::reap_topk:
                key.push_back(reap_score(stats, s.ref));
                break;
            case Policy::distance_only:
                key.push_back(s.replaceability);
                break;
            default:
                break;
        }
    }
    return key;
}

void check_selection_policy(Policy policy) {
    switch (policy) {
        case Policy::adaptive:
        case Policy::fixed_k:
        case Policy::usage_topk:
        case Policy::reap_topk:
        case Policy::distance_only:
            return;
        default:
            throw ValidationError("policy " + std::string(to_string(policy)) + " is not a prototype-selection policy");
    }
}

std::vector<ExpertRef> scope_refs(const ModelSpec& spec, const std::vector<int>& layers) {
    std::vector<ExpertRef> refs;
    for (int l : layers) {
        for (int i = 0; i < spec.experts_per_layer[static_cast<std::size_t>(l)]; ++i) {
            refs.push_back({l, i});
        }
    }
    return refs;
}

// Per-layer budgets for fixed_k: equal shares, remainder to the earliest layers,
// overflow beyond a layer's size carried to later layers.
std::vector<int> equal_layer_budgets(int k, std::span<const int> layer_sizes) {
    const int layers = static_cast<int>(layer_sizes.size());
    std::vector<int> share(layer_sizes.size());
    int carry = 0;
    for (int i = 0; i < layers; ++i) {
        const int want = k / layers + (i < k % layers ? 1 : 0);
        share[static_cast<std::size_t>(i)] = std::min(want, layer_sizes[static_cast<std::size_t>(i)]);
        carry += want - share[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < layers && carry > 0; ++i) {
        const int room = layer_sizes[static_cast<std::size_t>(i)] - share[static_cast<std::size_t>(i)];
        const int take = std::min(room, carry);
        share[static_cast<std::size_t>(i)] += take;
        carry -= take;
    }
    return share;
}

double loss_for_rows(std::span<const std::size_t> rows, const DistanceTable& table, std::span<const double> w) {
    double total = 0.0;
    for (std::size_t e = 0; e < table.size(); ++e) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t p : rows) {
            best = std::min(best, table.at(e, p));
        }
        total += w[e] * best;
    }
    return total;
}

}  // namespace

ImportanceMode parse_importance(std::string_view tag) {
    if (tag == "contribution") return ImportanceMode::contribution;
    if (tag == "uniform") return ImportanceMode::uniform;
    throw ValidationError("unknown importance mode: " + std::string(tag));
}

std::string_view to_string(ImportanceMode mode) {
    return mode == ImportanceMode::uniform ? "uniform" : "contribution";
}

void ScopeConfig::validate(int num_layers) const {
    require(rho >= 0.0, "rho must be >= 0");
    require(rho < 1.0, "rho must be < 1");
    require(scope_size >= 1, "scope_size must be >= 1");
    require(scope_size <= num_layers, "scope_size must not exceed the layer count");
    require(eps > 0.0, "eps must be positive");
}

std::vector<std::vector<int>> scope_partition(int num_layers, int scope_size) {
    require(scope_size >= 1, "scope_size must be >= 1");
    require(num_layers >= 1, "empty model");
    std::vector<std::vector<int>> scopes;
    for (int start = 0; start < num_layers; start += scope_size) {
        std::vector<int> group;
        for (int l = start; l < std::min(num_layers, start + scope_size); ++l) {
            group.push_back(l);
        }
        scopes.push_back(std::move(group));
    }
    return scopes;
}

int budget(double rho, int pool_size) {
    require(pool_size >= 1, "pool size must be >= 1");
    require(rho >= 0.0 && rho < 1.0, "rho must be in [0, 1)");
    double x = (1.0 - rho) * pool_size;
    // Snap representation noise so that exact halves round away from zero.
    const double half = std::floor(x) + 0.5;
    if (std::abs(x - half) < 1e-9) {
        x = half;
    }
    return std::max(1, static_cast<int>(std::round(x)));
}

ScoreTable score(const CalibStats& stats, const DistanceTable& table) {
    require(table.size() >= 2, "replaceability undefined for a singleton scope");
    const std::size_t n = table.size();
    std::vector<double> a(n);
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = contribution(stats, table.refs[i]);
        b[i] = replaceability(i, table);
    }
    const auto a_norm = minmax_norm(a, table.eps);
    const auto b_norm = minmax_norm(b, table.eps);
    ScoreTable out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = {table.refs[i], a[i], b[i], a_norm[i], b_norm[i], a_norm[i] * b_norm[i]};
    }
    return out;
}

std::vector<ExpertRef> select_prototypes(const ScoreTable& scores, const CalibStats& stats,
                                         const DistanceTable& table, int k, Policy policy) {
    const std::size_t n = table.size();
    require(scores.size() == n, "score table does not match distance table");
    require(k >= 1, "prototype budget must be >= 1");
    require(static_cast<std::size_t>(k) <= n, "K exceeds pool size");
    for (std::size_t i = 0; i < n; ++i) {
        require(scores[i].ref == table.refs[i], "score table does not match distance table");
    }

    check_selection_policy(policy);
    const std::vector<double> key = policy_key(scores, stats, policy);
    std::vector<std::size_t> chosen;
    if (policy == Policy::fixed_k) {
        std::vector<int> layers;
        for (ExpertRef r : table.refs) {
            if (std::find(layers.begin(), layers.end(), r.layer) == layers.end()) {
                layers.push_back(r.layer);
            }
        }
        std::sort(layers.begin(), layers.end());
        std::vector<std::vector<std::size_t>> rows_by_layer(layers.size());
        std::vector<int> sizes(layers.size(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto pos = static_cast<std::size_t>(
                std::lower_bound(layers.begin(), layers.end(), table.refs[i].layer) - layers.begin());
            rows_by_layer[pos].push_back(i);
            ++sizes[pos];
        }
        const auto shares = equal_layer_budgets(k, sizes);
        for (std::size_t g = 0; g < layers.size(); ++g) {
            const auto ranked = rank_rows(table, key, rows_by_layer[g]);
            chosen.insert(chosen.end(), ranked.begin(), ranked.begin() + shares[g]);
        }
    } else {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        const auto ranked = rank_rows(table, key, all);
        chosen.assign(ranked.begin(), ranked.begin() + k);
    }

    std::vector<ExpertRef> prototypes;
    prototypes.reserve(chosen.size());
    for (std::size_t row : chosen) {
        prototypes.push_back(table.refs[row]);
    }
    std::sort(prototypes.begin(), prototypes.end());
    return prototypes;
}

std::vector<ExpertRef> assign(std::span<const ExpertRef> prototypes, const DistanceTable& table) {
    require(!prototypes.empty(), "prototype set is empty");
    std::vector<ExpertRef> sorted(prototypes.begin(), prototypes.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> proto_rows;
    proto_rows.reserve(sorted.size());
    for (ExpertRef p : sorted) {
        proto_rows.push_back(table.row_of(p));
    }

    std::vector<ExpertRef> mapping(table.size());
    for (std::size_t e = 0; e < table.size(); ++e) {
        if (std::binary_search(sorted.begin(), sorted.end(), table.refs[e])) {
            mapping[e] = table.refs[e];
            continue;
        }
        std::size_t best = 0;
        for (std::size_t j = 1; j < proto_rows.size(); ++j) {
            if (table.at(e, proto_rows[j]) < table.at(e, proto_rows[best])) {
                best = j;
            }
        }
        mapping[e] = sorted[best];
    }
    return mapping;
}

std::vector<double> importances(const CalibStats& stats, const DistanceTable& table, ImportanceMode mode) {
    std::vector<double> w(table.size(), 1.0);
    if (mode == ImportanceMode::contribution) {
        for (std::size_t i = 0; i < table.size(); ++i) {
            w[i] = contribution(stats, table.refs[i]);
        }
    }
    return w;
}

ConsolidationPlan consolidate(const MoEModel& model, const CalibStats& stats, const ScopeConfig& config) {
    model.validate();
    config.validate(model.spec.num_layers());
    stats.validate_for(model.spec);
    check_selection_policy(config.policy);

    ConsolidationPlan plan;
    plan.rho = config.rho;
    plan.scope_size = config.scope_size;
    plan.policy = config.policy;
    for (int n : model.spec.experts_per_layer) {
        plan.assignment.emplace_back(static_cast<std::size_t>(n));
    }

    const auto groups = scope_partition(model.spec.num_layers(), config.scope_size);
    for (std::size_t s = 0; s < groups.size(); ++s) {
        const std::vector<ExpertRef> refs = scope_refs(model.spec, groups[s]);
        const int k = budget(config.rho, static_cast<int>(refs.size()));
        const DistanceTable table = distance_matrix(model, refs, config.eps, config.threads);

        std::vector<ExpertRef> prototypes;
        if (static_cast<std::size_t>(k) == refs.size()) {
            prototypes = refs;
        } else {
            prototypes = select_prototypes(score(stats, table), stats, table, k, config.policy);
        }
        const auto mapping = assign(prototypes, table);
        for (std::size_t e = 0; e < refs.size(); ++e) {
            plan.assignment[static_cast<std::size_t>(refs[e].layer)][static_cast<std::size_t>(refs[e].index)] =
                mapping[e];
        }

        const auto w = importances(stats, table, config.importance);
        plan.metadata["objective.scope" + std::to_string(s)] = format_double(objective(prototypes, table, w));
        plan.scopes.push_back({groups[s], std::move(prototypes)});
    }

    plan.metadata["eps"] = format_double(config.eps);
    plan.metadata["importance"] = std::string(to_string(config.importance));
    plan.metadata["reap_score"] = "alias of routing-conditioned contribution";
    plan.validate_for(model.spec);
    return plan;
}

std::vector<ScoreTable> consolidation_scores(const MoEModel& model, const CalibStats& stats,
                                             const ScopeConfig& config) {
    model.validate();
    config.validate(model.spec.num_layers());
    stats.validate_for(model.spec);
    std::vector<ScoreTable> out;
    for (const auto& group : scope_partition(model.spec.num_layers(), config.scope_size)) {
        const auto refs = scope_refs(model.spec, group);
        if (refs.size() < 2) {
            out.emplace_back();
            continue;
        }
        out.push_back(score(stats, distance_matrix(model, refs, config.eps, config.threads)));
    }
    return out;
}

double objective(std::span<const ExpertRef> candidates, const DistanceTable& table, std::span<const double> weights) {
    require(!candidates.empty(), "objective needs a non-empty prototype set");
    require(weights.size() == table.size(), "importance weights do not match scope");
    std::vector<std::size_t> rows;
    rows.reserve(candidates.size());
    for (ExpertRef p : candidates) {
        rows.push_back(table.row_of(p));
    }
    return loss_for_rows(rows, table, weights);
}

std::uint64_t binomial(int n, int k) {
    if (k < 0 || k > n) {
        return 0;
    }
    k = std::min(k, n - k);
    unsigned __int128 acc = 1;
    for (int i = 1; i <= k; ++i) {
        acc = acc * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
        if (acc > std::numeric_limits<std::uint64_t>::max()) {
            return std::numeric_limits<std::uint64_t>::max();
        }
    }
    return static_cast<std::uint64_t>(acc);
}

OptimalSelection brute_force_optimal(const DistanceTable& table, int k, std::span<const double> weights,
                                     std::uint64_t cap) {
    const int n = static_cast<int>(table.size());
    require(k >= 1 && k <= n, "K must be in [1, scope size]");
    require(weights.size() == table.size(), "importance weights do not match scope");
    require(binomial(n, k) <= cap, "enumeration cap exceeded: C(" + std::to_string(n) + ", " + std::to_string(k) +
                                       ") > " + std::to_string(cap));

    std::vector<std::size_t> combo(static_cast<std::size_t>(k));
    std::iota(combo.begin(), combo.end(), std::size_t{0});
    std::vector<std::size_t> best = combo;
    double best_loss = loss_for_rows(combo, table, weights);
    while (true) {
        int i = k - 1;
        while (i >= 0 && combo[static_cast<std::size_t>(i)] == static_cast<std::size_t>(n - k + i)) {
            --i;
        }
        if (i < 0) {
            break;
        }
        ++combo[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < k; ++j) {
            combo[static_cast<std::size_t>(j)] = combo[static_cast<std::size_t>(j - 1)] + 1;
        }
        const double loss = loss_for_rows(combo, table, weights);
        if (loss < best_loss) {
            best_loss = loss;
            best = combo;
        }
    }

    OptimalSelection out;
    out.loss = best_loss;
    for (std::size_t row : best) {
        out.prototypes.push_back(table.refs[row]);
    }
    return out;
}

std::string scores_csv(const ScoreTable& scores) {
    std::ostringstream out;
    out << "ref,a,b,a_norm,b_norm,s\n";
    for (const auto& s : scores) {
        out << to_string(s.ref) << ',' << format_double(s.contribution) << ',' << format_double(s.replaceability)
            << ',' << format_double(s.contribution_norm) << ',' << format_double(s.replaceability_norm) << ','
            << format_double(s.score) << '\n';
    }
    return out.str();
}

}  // namespace conmoe
