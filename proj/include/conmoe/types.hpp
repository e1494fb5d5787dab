// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace conmoe {

using Vector = std::vector<double>;
using Metadata = std::map<std::string, std::string>;

inline constexpr double kDefaultEps = 1e-8;

// Address of one routed-expert slot. Ordered by (layer, index), which is the
// tie-break order used by every selection and argmin in the library.
struct ExpertRef {
    int layer = 0;
    int index = 0;

    auto operator<=>(const ExpertRef&) const = default;
    bool operator==(const ExpertRef&) const = default;
};

std::string to_string(ExpertRef ref);

// Dense row-major f32 matrix.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0f) {}

    float& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    float operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }

    std::span<const float> row(int r) const {
        return {values.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    std::size_t size() const { return values.size(); }
    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }

    bool operator==(const Matrix&) const = default;
};

// y = M x, accumulated in double.
Vector matvec(const Matrix& m, std::span<const double> x);

struct ModelSpec {
    std::vector<int> experts_per_layer;
    int hidden = 0;
    int intermediate = 0;
    int top_k = 1;
    std::string activation = "silu";

    int num_layers() const { return static_cast<int>(experts_per_layer.size()); }
    int total_experts() const;
    void validate() const;

    bool operator==(const ModelSpec&) const = default;
};

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace conmoe
