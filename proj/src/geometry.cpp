// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "conmoe/error.hpp"
#include "conmoe/parallel.hpp"

namespace conmoe {

double frobenius_norm(const Matrix& m) {
    long double acc = 0.0L;
    for (float v : m.values) {
        acc += static_cast<long double>(v) * v;
    }
    return static_cast<double>(std::sqrt(acc));
}

double projection_distance(const Matrix& a, const Matrix& b, double eps) {
    require(a.same_shape(b), "shape mismatch in projection distance");
    long double diff = 0.0L;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const long double d = static_cast<long double>(a.values[i]) - b.values[i];
        diff += d * d;
    }
    const long double num = 2.0L * std::sqrt(diff);
    const long double den = static_cast<long double>(frobenius_norm(a)) + frobenius_norm(b) + 2.0L * eps;
    return static_cast<double>(num / den);
}

double expert_distance(const ExpertWeights& a, const ExpertWeights& b, double eps) {
    return (projection_distance(a.gate, b.gate, eps) + projection_distance(a.up, b.up, eps) +
            projection_distance(a.down, b.down, eps)) /
           3.0;
}

std::optional<std::size_t> DistanceTable::position(ExpertRef ref) const {
    const auto it = std::find(refs.begin(), refs.end(), ref);
    if (it == refs.end()) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(it - refs.begin());
}

std::size_t DistanceTable::row_of(ExpertRef ref) const {
    const auto pos = position(ref);
    require(pos.has_value(), "expert " + to_string(ref) + " is not in the scope");
    return *pos;
}

DistanceTable distance_matrix(const MoEModel& model, std::span<const ExpertRef> scope, double eps, int threads) {
    require(!scope.empty(), "distance table needs at least one expert");
    DistanceTable table;
    table.refs.assign(scope.begin(), scope.end());
    table.eps = eps;
    const std::size_t n = table.refs.size();
    table.values.assign(n * n, 0.0);

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            pairs.emplace_back(i, j);
        }
    }
    std::vector<const ExpertWeights*> experts;
    experts.reserve(n);
    for (ExpertRef ref : table.refs) {
        experts.push_back(&model.expert(ref));
    }
    parallel_for(pairs.size(), threads, [&](std::size_t k) {
        const auto [i, j] = pairs[k];
        const double d = expert_distance(*experts[i], *experts[j], eps);
        table.values[i * n + j] = d;
        table.values[j * n + i] = d;
    });
    return table;
}

double replaceability(std::size_t row, const DistanceTable& table) {
    require(table.size() >= 2, "replaceability undefined for a singleton scope");
    return nearest_neighbor(row, table).distance;
}

std::vector<double> minmax_norm(std::span<const double> values, double eps) {
    if (values.empty()) {
        return {};
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double min = *lo;
    const double range = *hi - *lo + eps;
    std::vector<double> out;
    out.reserve(values.size());
    for (double v : values) {
        out.push_back((v - min) / range);
    }
    return out;
}

Neighbor nearest_neighbor(std::size_t row, const DistanceTable& table) {
    require(table.size() >= 2, "nearest neighbor undefined for a singleton scope");
    require(row < table.size(), "row out of range");
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < table.size(); ++j) {
        if (j == row) {
            continue;
        }
        if (!best) {
            best = j;
            continue;
        }
        const double d = table.at(row, j);
        const double bd = table.at(row, *best);
        if (d < bd || (d == bd && table.refs[j] < table.refs[*best])) {
            best = j;
        }
    }
    return {table.refs[*best], table.at(row, *best)};
}

std::string distance_csv(const DistanceTable& table) {
    std::ostringstream out;
    out << "ref_i,ref_j,distance\n";
    for (std::size_t i = 0; i < table.size(); ++i) {
        for (std::size_t j = i + 1; j < table.size(); ++j) {
            out << to_string(table.refs[i]) << ',' << to_string(table.refs[j]) << ','
                << format_double(table.at(i, j)) << '\n';
        }
    }
    return out.str();
}

}  // namespace conmoe
