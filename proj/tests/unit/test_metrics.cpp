#include <doctest.h>

#include "color/error.hpp"
#include "color/metrics.hpp"

using namespace color;

TEST_CASE("pooled average over unequal test sets") {
    AccuracyMatrix m({10, 20});
    m.record(0, 0, 9);
    m.record(1, 0, 8);
    m.record(1, 1, 14);
    CHECK(average_accuracy(m, 0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(average_accuracy(m, 1) == doctest::Approx(22.0 / 30.0).epsilon(1e-15));
    CHECK(average_accuracy(m, 1, AverageMode::task_mean) == doctest::Approx((0.8 + 0.7) / 2.0).epsilon(1e-15));
}

TEST_CASE("pooled equals task mean for equal test sizes") {
    AccuracyMatrix m({8, 8, 8});
    const std::size_t counts[3][3] = {{7, 0, 0}, {5, 6, 0}, {4, 3, 8}};
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t tau = 0; tau <= t; ++tau) m.record(t, tau, counts[t][tau]);
    for (std::size_t t = 0; t < 3; ++t)
        CHECK(average_accuracy(m, t) == doctest::Approx(average_accuracy(m, t, AverageMode::task_mean)).epsilon(1e-14));
}

TEST_CASE("forgetting hand example") {
    AccuracyMatrix m({10, 10});
    m.record(0, 0, 9);
    m.record(1, 0, 8);
    m.record(1, 1, 10);
    CHECK(forgetting(m, 1) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("forgetting uses the best earlier accuracy") {
    AccuracyMatrix m({10, 10, 10});
    m.record(0, 0, 6);
    m.record(1, 0, 9);
    m.record(1, 1, 7);
    m.record(2, 0, 5);
    m.record(2, 1, 7);
    m.record(2, 2, 10);
    CHECK(forgetting(m, 2) == doctest::Approx(((0.9 - 0.5) + 0.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("forgetting can be negative when accuracy improves") {
    AccuracyMatrix m({10, 10});
    m.record(0, 0, 5);
    m.record(1, 0, 8);
    m.record(1, 1, 8);
    CHECK(forgetting(m, 1) == doctest::Approx(-0.3).epsilon(1e-12));
}

TEST_CASE("constant columns and perfect matrices") {
    AccuracyMatrix m({5, 5, 5, 5});
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t tau = 0; tau <= t; ++tau) m.record(t, tau, 5);
    for (std::size_t t = 0; t < 4; ++t) CHECK(average_accuracy(m, t) == 1.0);
    for (std::size_t t = 1; t < 4; ++t) CHECK(forgetting(m, t) == 0.0);

    AccuracyMatrix c({4, 4, 4});
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t tau = 0; tau <= t; ++tau) c.record(t, tau, 1 + tau);
    CHECK(forgetting(c, 2) == 0.0);
}

TEST_CASE("accuracy matrix contracts") {
    AccuracyMatrix m({4, 4});
    CHECK_THROWS_AS(m.record(0, 1, 1), ContractError);
    CHECK_THROWS_AS(m.record(0, 0, 5), ContractError);
    CHECK_THROWS_AS(m.record(2, 0, 1), ContractError);
    CHECK_FALSE(m.has(0, 0));
    CHECK_THROWS_AS(m.correct(0, 0), ContractError);
    m.record(0, 0, 3);
    CHECK(m.has(0, 0));
    CHECK(m.accuracy(0, 0) == 0.75);
    CHECK_THROWS_AS(forgetting(m, 0), ContractError);
    CHECK_THROWS_AS(average_accuracy(m, 1), ContractError);
    CHECK_THROWS_AS(AccuracyMatrix({3, 0}), ContractError);
}
