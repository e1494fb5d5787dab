// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "conmoe/geometry.hpp"
#include "test_support.hpp"

using namespace conmoe;
using namespace conmoe::testing;

namespace {

double oracle_norm(const Matrix& m) {
    long double s = 0;
    for (float v : m.values) {
        s += static_cast<long double>(v) * v;
    }
    return static_cast<double>(std::sqrt(s));
}

double oracle_delta(const Matrix& a, const Matrix& b, double eps) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const long double d = static_cast<long double>(a.values[i]) - b.values[i];
        s += d * d;
    }
    return 2.0 * static_cast<double>(std::sqrt(s)) / (oracle_norm(a) + oracle_norm(b) + 2.0 * eps);
}

Matrix scaled(const Matrix& m, float c) {
    Matrix out = m;
    for (float& v : out.values) {
        v *= c;
    }
    return out;
}

DistanceTable table_of(int n, const std::vector<double>& values) {
    DistanceTable t;
    for (int i = 0; i < n; ++i) {
        t.refs.push_back({0, i});
    }
    t.values = values;
    return t;
}

}  // namespace

TEST_SUITE("projection_distance") {
    TEST_CASE("identical matrices") {
        std::mt19937_64 rng(1);
        const Matrix a = random_matrix(4, 6, rng);
        CHECK(projection_distance(a, a) == 0.0);
        CHECK(projection_distance(scaled(a, 17.5f), scaled(a, 17.5f)) == 0.0);
    }

    TEST_CASE("B = 3A is close to one") {
        std::mt19937_64 rng(2);
        for (int trial = 0; trial < 100; ++trial) {
            const Matrix a = dyadic_matrix(1 + trial % 6, 1 + trial % 4, rng);
            const double d = projection_distance(a, scaled(a, 3.0f));
            const double n = oracle_norm(a);
            CHECK(d == doctest::Approx(4.0 * n / (4.0 * n + 2e-8)).epsilon(1e-12));
            CHECK(d <= 1.0);
            CHECK(d >= 1.0 - 1e-6);
        }
    }

    TEST_CASE("orthogonal equal-norm pair gives sqrt 2") {
        Matrix a(2, 2), b(2, 2);
        a(0, 0) = 1.0f;
        b(1, 1) = 1.0f;
        CHECK(projection_distance(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
    }

    TEST_CASE("shape mismatch") {
        CHECK(throws_containing([] { projection_distance(Matrix(2, 3), Matrix(3, 2)); }, "shape mismatch"));
    }

    TEST_CASE("matches the oracle and stays in [0, 2)") {
        std::mt19937_64 rng(3);
        for (int trial = 0; trial < 300; ++trial) {
            const int r = 1 + trial % 7;
            const int c = 1 + trial % 5;
            const Matrix a = random_matrix(r, c, rng, 0.1 + trial % 4);
            const Matrix b = trial % 3 == 0 ? scaled(a, -1.0f) : random_matrix(r, c, rng);
            const double d = projection_distance(a, b);
            CHECK(d == doctest::Approx(oracle_delta(a, b, kDefaultEps)).epsilon(1e-12));
            CHECK(d >= 0.0);
            CHECK(d < 2.0);
            CHECK(d == projection_distance(b, a));
        }
    }

    TEST_CASE("zero matrices") {
        CHECK(projection_distance(Matrix(3, 3), Matrix(3, 3)) == 0.0);
    }
}

TEST_SUITE("expert_distance") {
    TEST_CASE("identical experts") {
        const auto m = gen_synthetic(make_spec(1, 2, 4, 3, 1), 1).model;
        CHECK(expert_distance(m.expert({0, 0}), m.expert({0, 0})) == 0.0);
    }

    TEST_CASE("mean of the three projection distances") {
        const auto m = gen_synthetic(make_spec(1, 2, 4, 3, 1), 5).model;
        const auto& a = m.expert({0, 0});
        const auto& b = m.expert({0, 1});
        const double expect =
            (oracle_delta(a.gate, b.gate, 1e-8) + oracle_delta(a.up, b.up, 1e-8) + oracle_delta(a.down, b.down, 1e-8)) / 3.0;
        CHECK(expert_distance(a, b) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(expert_distance(a, b) == expert_distance(b, a));

        ExpertWeights c = a;
        c.gate = b.gate;
        c.up = b.up;
        const double half =
            (oracle_delta(a.gate, b.gate, 1e-8) + oracle_delta(a.up, b.up, 1e-8) + 0.0) / 3.0;
        CHECK(expert_distance(a, c) == doctest::Approx(half).epsilon(1e-12));
    }
}

TEST_SUITE("distance_matrix") {
    TEST_CASE("two identical experts") {
        auto s = gen_synthetic(make_spec(1, 2, 4, 3, 1), 6, {DupMode::within, 0.0});
        const std::vector<ExpertRef> scope{{0, 0}, {0, 1}};
        const DistanceTable t = distance_matrix(s.model, scope);
        CHECK(t.values == std::vector<double>(4, 0.0));
    }

    TEST_CASE("planted duplicates give zero entries exactly at the pairs") {
        const auto s = gen_synthetic(make_spec(2, 6, 5, 4, 2), 7, {DupMode::within, 0.0});
        std::vector<ExpertRef> scope;
        for (int l = 0; l < 2; ++l) {
            for (int i = 0; i < 6; ++i) {
                scope.push_back({l, i});
            }
        }
        const DistanceTable t = distance_matrix(s.model, scope);
        for (std::size_t i = 0; i < t.size(); ++i) {
            for (std::size_t j = 0; j < t.size(); ++j) {
                const bool pair = std::any_of(s.duplicates.begin(), s.duplicates.end(), [&](const auto& d) {
                    return (d.first == t.refs[i] && d.second == t.refs[j]) || (d.first == t.refs[j] && d.second == t.refs[i]);
                });
                CHECK((t.at(i, j) == 0.0) == (i == j || pair));
            }
        }
    }

    TEST_CASE("table properties over random models") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto m = gen_synthetic(make_spec(2, 3 + trial % 5, 4, 3, 1), 100 + trial).model;
            std::vector<ExpertRef> scope;
            for (int l = 0; l < 2; ++l) {
                for (int i = 0; i < m.spec.experts_per_layer[0]; ++i) {
                    scope.push_back({l, i});
                }
            }
            const DistanceTable t = distance_matrix(m, scope, kDefaultEps, 1 + trial % 3);
            for (std::size_t i = 0; i < t.size(); ++i) {
                CHECK(t.at(i, i) == 0.0);
                for (std::size_t j = 0; j < t.size(); ++j) {
                    CHECK(t.at(i, j) == t.at(j, i));
                    CHECK(t.at(i, j) >= 0.0);
                    CHECK(t.at(i, j) < 2.0);
                }
            }
            CHECK(distance_matrix(m, scope, kDefaultEps, 4).values == t.values);
        }
    }

    TEST_CASE("csv rows in ascending order") {
        const auto m = gen_synthetic(make_spec(1, 3, 4, 3, 1), 1).model;
        const std::vector<ExpertRef> scope{{0, 0}, {0, 1}, {0, 2}};
        const std::string csv = distance_csv(distance_matrix(m, scope));
        CHECK(csv.rfind("ref_i,ref_j,distance\n", 0) == 0);
        CHECK(csv.find("0:0,0:1,") < csv.find("0:1,0:2,"));
    }
}

TEST_SUITE("replaceability and neighbours") {
    TEST_CASE("duplicate pair") {
        const DistanceTable t = table_of(2, {0, 0, 0, 0});
        CHECK(replaceability(0, t) == 0.0);
        CHECK(replaceability(1, t) == 0.0);
    }

    TEST_CASE("row minimum") {
        const DistanceTable t = table_of(3, {0, 0.4, 0.7, 0.4, 0, 0.5, 0.7, 0.5, 0});
        CHECK(replaceability(0, t) == 0.4);
        CHECK(replaceability(2, t) == 0.5);
    }

    TEST_CASE("singleton scope") {
        const DistanceTable t = table_of(1, {0});
        CHECK(throws_containing([&] { replaceability(0, t); }, "replaceability undefined"));
        CHECK_THROWS_AS(nearest_neighbor(0, t), ValidationError);
    }

    TEST_CASE("ties go to the lower reference") {
        const DistanceTable t = table_of(4, {0, 0.3, 0.3, 0.9, 0.3, 0, 1, 1, 0.3, 1, 0, 1, 0.9, 1, 1, 0});
        const Neighbor nn = nearest_neighbor(0, t);
        CHECK(nn.ref == ExpertRef{0, 1});
        CHECK(nn.distance == 0.3);
    }

    TEST_CASE("neighbour distance equals replaceability and bounds the row") {
        const auto m = gen_synthetic(make_spec(2, 5, 4, 3, 1), 9).model;
        std::vector<ExpertRef> scope;
        for (int l = 0; l < 2; ++l) {
            for (int i = 0; i < 5; ++i) {
                scope.push_back({l, i});
            }
        }
        const DistanceTable t = distance_matrix(m, scope);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double b = replaceability(i, t);
            CHECK(nearest_neighbor(i, t).distance == b);
            CHECK_FALSE(nearest_neighbor(i, t).ref == t.refs[i]);
            for (std::size_t j = 0; j < t.size(); ++j) {
                if (j != i) {
                    CHECK(b <= t.at(i, j));
                }
            }
        }
    }
}

TEST_SUITE("minmax_norm") {
    TEST_CASE("spread values") {
        const auto v = minmax_norm(std::vector<double>{2, 4, 6});
        CHECK(v[0] == 0.0);
        CHECK(v[1] == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(v[2] == doctest::Approx(1.0).epsilon(1e-6));
    }

    TEST_CASE("zero range") {
        CHECK(minmax_norm(std::vector<double>{5, 5, 5}) == std::vector<double>{0, 0, 0});
        CHECK(minmax_norm(std::vector<double>{7}) == std::vector<double>{0});
    }

    TEST_CASE("bounded and monotone") {
        std::mt19937_64 rng(12);
        std::uniform_real_distribution<double> u(-50, 50);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> x(1 + trial % 9);
            for (double& v : x) {
                v = u(rng);
            }
            const auto y = minmax_norm(x);
            for (std::size_t i = 0; i < x.size(); ++i) {
                CHECK(y[i] >= 0.0);
                CHECK(y[i] <= 1.0);
                for (std::size_t j = 0; j < x.size(); ++j) {
                    if (x[i] <= x[j]) {
                        CHECK(y[i] <= y[j]);
                    }
                }
            }
        }
    }
}
