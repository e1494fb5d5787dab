// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conmoe/moe_model.hpp"
#include "conmoe/types.hpp"

namespace conmoe {

double frobenius_norm(const Matrix& m);

// 2 ||A - B||_F / (||A||_F + ||B||_F + 2 eps). Lies in [0, 2).
double projection_distance(const Matrix& a, const Matrix& b, double eps = kDefaultEps);

// Mean projection distance over gate, up and down.
double expert_distance(const ExpertWeights& a, const ExpertWeights& b, double eps = kDefaultEps);

// Pairwise expert distances over one scope. Symmetric with zero diagonal; each
// pair is computed once and mirrored.
struct DistanceTable {
    std::vector<ExpertRef> refs;
    std::vector<double> values;  // row-major size() x size()
    double eps = kDefaultEps;

    std::size_t size() const { return refs.size(); }
    double at(std::size_t i, std::size_t j) const { return values[i * refs.size() + j]; }
    std::optional<std::size_t> position(ExpertRef ref) const;
    std::size_t row_of(ExpertRef ref) const;
};

DistanceTable distance_matrix(const MoEModel& model, std::span<const ExpertRef> scope, double eps = kDefaultEps,
                              int threads = 1);

// b_e: smallest off-diagonal entry of row e.
double replaceability(std::size_t row, const DistanceTable& table);

// (x - min) / (max - min + eps) over the whole span.
std::vector<double> minmax_norm(std::span<const double> values, double eps = kDefaultEps);

struct Neighbor {
    ExpertRef ref;
    double distance = 0.0;
};

// Argmin over the row excluding the diagonal; ties go to the smaller (layer, index).
Neighbor nearest_neighbor(std::size_t row, const DistanceTable& table);

// "ref_i,ref_j,distance" rows for i < j in ascending order.
std::string distance_csv(const DistanceTable& table);

}  // namespace conmoe
