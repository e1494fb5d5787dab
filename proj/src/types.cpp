// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/types.hpp"

#include <array>
#include <charconv>
#include <numeric>

#include "conmoe/error.hpp"

namespace conmoe {

std::string to_string(ExpertRef ref) {
    return std::to_string(ref.layer) + ":" + std::to_string(ref.index);
}

Vector matvec(const Matrix& m, std::span<const double> x) {
    require(static_cast<int>(x.size()) == m.cols,
            "dimension mismatch: matrix has " + std::to_string(m.cols) + " columns, vector has " +
                std::to_string(x.size()));
    Vector y(static_cast<std::size_t>(m.rows), 0.0);
    for (int r = 0; r < m.rows; ++r) {
        const auto row = m.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) {
            acc += static_cast<double>(row[c]) * x[c];
        }
        y[static_cast<std::size_t>(r)] = acc;
    }
    return y;
}

int ModelSpec::total_experts() const {
    return std::accumulate(experts_per_layer.begin(), experts_per_layer.end(), 0);
}

void ModelSpec::validate() const {
    require(!experts_per_layer.empty(), "empty model");
    require(hidden > 0 && intermediate > 0, "model dimensions must be positive");
    require(top_k >= 1, "top_k must be >= 1");
    require(activation == "silu", "unsupported activation: " + activation);
    for (int n : experts_per_layer) {
        require(n >= top_k, "every layer needs at least top_k experts");
    }
}

std::string format_double(double value) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    return std::string(buf.data(), end);
}

}  // namespace conmoe
