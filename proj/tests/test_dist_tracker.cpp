#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "selflab/dist_tracker.hpp"
#include "selflab/synth_world.hpp"

using namespace selflab;

namespace {

void check_simplex(const std::vector<double>& v) {
    for (double x : v) CHECK(x >= 0.0);
    CHECK(std::abs(std::accumulate(v.begin(), v.end(), 0.0) - 1.0) <= 1e-12);
}

}  // namespace

TEST_CASE("corpus initialization") {
    const std::vector<HardLabelMap> two{HardLabelMap(1, 2, std::vector<std::uint16_t>{0, 1}),
                                        HardLabelMap(1, 2, std::vector<std::uint16_t>{1, 1})};
    CHECK(init_from_corpus(two, 2) == std::vector<double>{0.25, 0.75});

    const std::vector<HardLabelMap> single{HardLabelMap(3, 3, 2), HardLabelMap(1, 4, 2)};
    CHECK(init_from_corpus(single, 3) == std::vector<double>{0, 0, 1});

    CHECK_THROWS_AS(init_from_corpus(std::vector<HardLabelMap>{}, 3), std::invalid_argument);
    CHECK_THROWS_AS(init_from_corpus(std::vector<HardLabelMap>{HardLabelMap(2, 2, 3)}, 3), std::invalid_argument);

    WorldSpec spec;
    spec.n_images = 20;
    const World world = generate(spec);
    std::vector<HardLabelMap> maps;
    std::vector<std::uint16_t> all;
    for (const auto& im : world.images) {
        maps.push_back(im.truth);
        all.insert(all.end(), im.truth.data.begin(), im.truth.data.end());
    }
    const auto got = init_from_corpus(maps, 5), want = oracle::histogram(all, 5);
    for (std::size_t c = 0; c < 5; ++c) CHECK(got[c] == doctest::Approx(want[c]).epsilon(1e-14));
}

TEST_CASE("EMA update") {
    const std::vector<double> d0{0.7, 0.2, 0.1}, dn{0.1, 0.3, 0.6};
    CHECK(ema_update(d0, dn, 1.0) == d0);
    CHECK(ema_update(d0, dn, 0.0) == dn);
    CHECK_THROWS_AS(ema_update(d0, dn, 1.1), std::invalid_argument);
    CHECK_THROWS_AS(ema_update(d0, {0.5, 0.5}, 0.5), std::invalid_argument);

    for (double alpha : {0.5, 0.9, 0.99}) {
        std::vector<double> d = d0;
        const double start = l1_distance(d0, dn);
        for (int k = 1; k <= 60; ++k) {
            const double before = l1_distance(d, dn);
            d = ema_update(d, dn, alpha);
            check_simplex(d);
            CHECK(l1_distance(d, dn) == doctest::Approx(std::pow(alpha, k) * start).epsilon(1e-9));
            CHECK(l1_distance(d, dn) <= alpha * before + 1e-15);
        }
    }
}

TEST_CASE("marginal floor") {
    SUBCASE("no entry below the floor is an identity") {
        const std::vector<double> d{0.5, 0.3, 0.2};
        const auto m = as_marginal(d, 1e-4);
        for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(m[c] - d[c]) <= 1e-12);
    }
    SUBCASE("one-hot with floor 0.01") {
        const auto m = as_marginal({1.0, 0.0, 0.0}, 0.01);
        CHECK(m[0] == doctest::Approx(0.98).epsilon(1e-12));
        CHECK(m[1] == doctest::Approx(0.01).epsilon(1e-12));
        CHECK(m[2] == doctest::Approx(0.01).epsilon(1e-12));
    }
    SUBCASE("a zero class receives the floor mass") {
        const auto m = as_marginal({0.6, 0.4, 0.0, 0.0}, 1e-4);
        CHECK(m[2] == doctest::Approx(1e-4).epsilon(1e-12));
        CHECK(m[3] == doctest::Approx(1e-4).epsilon(1e-12));
        CHECK(m[0] / m[1] == doctest::Approx(1.5).epsilon(1e-12));
        check_simplex(m);
    }
    SUBCASE("random inputs land on the simplex above the floor") {
        std::mt19937_64 rng(1);
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t c = 2 + rng() % 10;
            auto d = oracle::random_simplex(rng, c, 0.0);
            d[rng() % c] = 0.0;
            const double s = std::accumulate(d.begin(), d.end(), 0.0);
            for (double& x : d) x /= s;
            const double floor = 0.5 / static_cast<double>(c) * std::uniform_real_distribution<double>(0, 1)(rng);
            const auto m = as_marginal(d, floor);
            check_simplex(m);
            for (double x : m) CHECK(x >= floor * (1 - 1e-12));
        }
    }
    SUBCASE("an infeasible floor is rejected") {
        CHECK_THROWS_AS(as_marginal({0.5, 0.5}, 0.5), std::invalid_argument);
        CHECK_THROWS_AS(as_marginal({0.5, 0.6}, 0.01), std::invalid_argument);
    }
}

TEST_CASE("distribution tracker") {
    DistributionTracker t({0.25, 0.25, 0.25, 0.25}, 0.5, 1e-4);
    t.update({1.0, 0.0, 0.0, 0.0});
    CHECK(t.probs() == std::vector<double>{0.625, 0.125, 0.125, 0.125});
    CHECK(t.updates() == 1);
    t.update({1.0, 0.0, 0.0, 0.0});
    CHECK(t.probs()[0] == doctest::Approx(0.8125));
    check_simplex(t.marginal());

    DistributionTracker uniform({0.5, 0.5}, 0.99, 1e-4);
    for (int k = 0; k < 100; ++k) uniform.update({0.5, 0.5});
    CHECK(uniform.probs() == std::vector<double>{0.5, 0.5});

    CHECK_THROWS_AS(DistributionTracker({0.5, 0.6}, 0.9, 1e-4), std::invalid_argument);
    CHECK_THROWS_AS(DistributionTracker({0.5, 0.5}, 2.0, 1e-4), std::invalid_argument);
}
