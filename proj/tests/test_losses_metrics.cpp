#include <doctest/doctest.h>

#include <cmath>
#include <random>

#include "oncokit/error.hpp"
#include "oncokit/losses.hpp"
#include "oncokit/metrics.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace oncokit;
using oncokit::testing::gradcheck;
using oncokit::testing::random_tensor;

TEST_CASE("dice loss") {
    const Tensor y({4}, std::vector<double>{1, 1, 0, 0});
    CHECK(dice_loss_value(y, y) == doctest::Approx(0.0).epsilon(1e-9));
    const Tensor inv({4}, std::vector<double>{0, 0, 1, 1});
    CHECK(dice_loss_value(inv, y) == doctest::Approx(1.0).epsilon(1e-5));
    const Tensor half({4}, 0.5);
    const double eps = 1e-5;
    CHECK(dice_loss_value(half, y) == doctest::Approx(1.0 - (2.0 + eps) / (3.0 + eps)).epsilon(1e-14));
    CHECK(std::abs(dice_loss_value(half, y) - 1.0 / 3.0) < 1e-5);
    CHECK_THROWS_AS(dice_loss_value(half, Tensor({3})), ShapeError);
}

TEST_CASE("focal loss") {
    const Tensor one({1}, 1.0);
    CHECK(focal_loss_value(Tensor({1}, 1.0 - 1e-9), one) < 1e-12);
    CHECK(focal_loss_value(Tensor({1}, 0.5), one) == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-14));
    CHECK(std::abs(focal_loss_value(Tensor({1}, 0.5), one) - 0.1733) < 1e-4);
    // mean reduction: duplicating elements leaves the value unchanged
    CHECK(focal_loss_value(Tensor({2}, 0.5), Tensor({2}, 1.0)) ==
          doctest::Approx(focal_loss_value(Tensor({1}, 0.5), one)));
    // p = 0 is clamped, not infinite
    CHECK(std::isfinite(focal_loss_value(Tensor({1}, 0.0), one)));
}

TEST_CASE("loss gradients") {
    std::mt19937_64 rng(5);
    Tensor y({3, 4, 2});
    for (auto& v : y.data()) v = rng() % 2 ? 1.0 : 0.0;
    const Tensor p = random_tensor({3, 4, 2}, rng, 0.05, 0.95);
    SUBCASE("dice") {
        const auto r = gradcheck([&](ad::Tape&, const std::vector<ad::Var>& v) { return dice_loss(v[0], y); }, {p});
        CHECK(r.max_rel_err <= 1e-6);
    }
    SUBCASE("focal") {
        for (double gamma : {0.0, 1.0, 2.0, 2.5}) {
            const auto r = gradcheck(
                [&](ad::Tape&, const std::vector<ad::Var>& v) { return focal_loss(v[0], y, {0.75, gamma}); }, {p});
            CHECK(r.max_rel_err <= 1e-6);
        }
    }
    SUBCASE("combined through a sigmoid") {
        const Tensor logits = random_tensor({3, 4, 2}, rng, -2.0, 2.0);
        const auto r = gradcheck(
            [&](ad::Tape&, const std::vector<ad::Var>& v) { return combined_loss(ad::sigmoid(v[0]), y); }, {logits});
        CHECK(r.max_rel_err <= 1e-5);
    }
    SUBCASE("combined is the exact sum") {
        ad::Tape t;
        const auto v = t.leaf(p);
        CHECK(combined_loss(v, y).value().item() == dice_loss_value(p, y) + focal_loss_value(p, y));
        CHECK(combined_loss(v, y).value().item() >= 0.0);
    }
    SUBCASE("perfect prediction") {
        Tensor near(y.shape());
        for (std::size_t i = 0; i < y.size(); ++i) near[i] = y[i] == 1.0 ? 1.0 - 1e-7 : 1e-7;
        ad::Tape t;
        CHECK(combined_loss(t.leaf(near), y).value().item() < 1e-5);
    }
}

TEST_CASE("overlap metrics") {
    const Tensor a({4}, std::vector<double>{1, 1, 0, 0});
    const Tensor b({4}, std::vector<double>{1, 0, 1, 0});
    CHECK(dsc(a, a) == 1.0);
    CHECK(dsc(a, b) == 0.5);
    CHECK(dsc(b, a) == dsc(a, b));
    CHECK(dsc(a, Tensor({4}, std::vector<double>{0, 0, 1, 1})) == 0.0);
    CHECK(dsc(Tensor({4}), Tensor({4})) == 1.0);
    CHECK_THROWS_AS(dsc(a, Tensor({4}, 0.5)), ContractError);

    const auto perfect = precision_recall(confusion(a, a));
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    const auto none = precision_recall(confusion(Tensor({4}), a));
    CHECK(none.precision == 1.0);
    CHECK(none.precision_undefined);
    CHECK(none.recall == 0.0);
    const auto pr = precision_recall(ConfusionCounts{3, 2, 1, 0});
    CHECK(pr.precision == 0.75);
    CHECK(pr.recall == 0.6);
    const auto c = confusion(b, a);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 1);
    CHECK(c.total() == 4);
}

TEST_CASE("c-index hand cases") {
    const std::vector<double> t2{1, 2}, e2{0.5, 0.9};
    const std::vector<int> d2{1, 1};
    CHECK(c_index(t2, e2, d2).c_index == 1.0);

    const std::vector<double> t3{1, 2, 3}, e3{0.9, 0.5, 0.1};
    const std::vector<int> d3{1, 0, 1};
    const auto r = c_index(t3, e3, d3);
    CHECK(r.c_index == 0.0);
    CHECK(r.comparable_pairs == 2);

    const std::vector<double> flat{0.3, 0.3, 0.3};
    CHECK(c_index(t3, flat, d3).c_index == 0.0);
    CHECK(c_index(t3, flat, d3, {Orientation::longer_time, true}).c_index == 0.5);
    CHECK(c_index(t3, e3, d3, {Orientation::shorter_time, false}).c_index == 1.0);

    const std::vector<int> none{0, 0, 0};
    CHECK_THROWS_AS(c_index(t3, e3, none), EvaluationError);
    CHECK_THROWS_AS(c_index(std::vector<double>{1.0}, std::vector<double>{1.0}, std::vector<int>{1}), EvaluationError);
}

TEST_CASE("fast c-index equals pair enumeration") {
    std::mt19937_64 rng(17);
    for (int inst = 0; inst < 300; ++inst) {
        const std::size_t n = 2 + rng() % 120;
        std::vector<double> t(n), eta(n);
        std::vector<int> ev(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = static_cast<double>(1 + rng() % 30);  // deliberate time ties
            eta[i] = static_cast<double>(rng() % 15);    // deliberate score ties
            ev[i] = rng() % 3 ? 1 : 0;
        }
        ev[0] = 1;
        t[1] = t[0] + 1;
        for (bool half : {false, true}) {
            const auto ref = oncokit::testing::c_index_pairs(t, eta, ev, half);
            const auto fast = c_index(t, eta, ev, {Orientation::longer_time, half});
            CHECK(fast.comparable_pairs == ref.comparable);
            CHECK(fast.concordant == ref.concordant);
        }
        // complementarity holds when there are no score ties
        std::vector<double> u(n);
        for (std::size_t i = 0; i < n; ++i) u[i] = static_cast<double>(i) + 0.5 * static_cast<double>(rng() % 1000) / 1000.0;
        const auto a = c_index(t, u, ev).c_index;
        const auto b = c_index(t, u, ev, {Orientation::shorter_time, false}).c_index;
        CHECK(a + b == doctest::Approx(1.0).epsilon(1e-12));
    }
}
