#include <catch_amalgamated.hpp>

#include <cmath>

#include "diffad/diffad.hpp"

using namespace diffad;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Moments {
    double mean = 0, var = 0;
};

Moments moments(const std::vector<double>& v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= static_cast<double>(v.size() - 1);
    return m;
}

// Three standard errors for the sample mean and the sample variance of a
// Gaussian with the given variance.
void check_moments(const std::vector<double>& draws, double mean, double var) {
    const auto m = moments(draws);
    const double n = static_cast<double>(draws.size());
    const double se_mean = std::sqrt(var / n);
    const double se_var = var * std::sqrt(2.0 / (n - 1));
    INFO("mean " << m.mean << " vs " << mean << ", var " << m.var << " vs " << var);
    CHECK(std::abs(m.mean - mean) < 3 * se_mean);
    CHECK(std::abs(m.var - var) < 3 * se_var);
}

}  // namespace

TEST_CASE("schedule examples", "[diffusion]") {
    NoiseSchedule s({0.1, 0.2});
    CHECK_THAT(s.alpha_bar(1), WithinAbs(0.9, 1e-15));
    CHECK_THAT(s.alpha_bar(2), WithinAbs(0.72, 1e-15));
    auto lin2 = make_linear_schedule(2, 0.1, 0.2);
    CHECK_THAT(lin2.beta(1), WithinAbs(0.1, 1e-15));
    CHECK_THAT(lin2.beta(2), WithinAbs(0.2, 1e-15));
    CHECK_THAT(lin2.alpha_bar(2), WithinAbs(0.72, 1e-12));

    auto c = make_linear_schedule(10, 0.05, 0.05);
    for (std::size_t t = 1; t <= 10; ++t) CHECK(c.beta(t) == 0.05);

    auto s1000 = make_linear_schedule(1000, 1e-4, 0.02);
    // closed form: beta_500 = 1e-4 + 499/999 * (0.02 - 1e-4)
    const double expect = 1e-4 + (499.0 / 999.0) * 0.0199;
    CHECK_THAT(s1000.beta(500), WithinRel(expect, 1e-12));
    CHECK_THAT(s1000.beta(1), WithinRel(1e-4, 1e-12));
    CHECK_THAT(s1000.beta(1000), WithinRel(0.02, 1e-12));
    for (std::size_t t = 1; t <= 1000; t += 111) CHECK_THAT(s1000.sigma(t) * s1000.sigma(t), WithinRel(s1000.beta(t), 1e-12));
}

TEST_CASE("schedule errors", "[diffusion]") {
    CHECK_THROWS_AS(make_linear_schedule(1, 1e-4, 0.02), ValueError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ValueError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.03, 0.02), ValueError);
    CHECK_THROWS_AS(make_linear_schedule(10, 1e-4, 1.0), ValueError);
    auto s = make_linear_schedule(10, 1e-4, 0.02);
    CHECK_THROWS_AS(s.beta(0), ValueError);
    CHECK_THROWS_AS(s.alpha_bar(11), ValueError);
}

TEST_CASE("schedule invariants", "[diffusion][property]") {
    for (auto [T, b0, b1] : std::vector<std::tuple<std::size_t, double, double>>{
             {2, 0.1, 0.2}, {100, 1e-4, 0.02}, {1000, 1e-4, 0.02}, {50, 0.01, 0.5}, {7, 0.3, 0.3}}) {
        auto s = make_linear_schedule(T, b0, b1);
        for (std::size_t t = 1; t <= T; ++t) {
            CHECK(s.beta(t) > 0.0);
            CHECK(s.beta(t) < 1.0);
            CHECK(s.alpha_bar(t) > 0.0);
            CHECK(s.alpha_bar(t) < 1.0);
            if (t > 1) {
                CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
                CHECK_THAT(s.alpha_bar(t), WithinAbs(s.alpha_bar(t - 1) * (1 - s.beta(t)), 1e-7));
            }
        }
    }
}

TEST_CASE("forward samplers: exact limits", "[diffusion]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    Rng r(1);
    auto x0 = Tensor::randn({2, 3}, r);
    auto eps = Tensor::randn({2, 3}, r);
    auto a = forward_marginal_sample(x0, 40, s, Tensor::zeros({2, 3}));
    auto b = forward_marginal_sample(Tensor::zeros({2, 3}), 40, s, eps);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a[i] == static_cast<float>(std::sqrt(s.alpha_bar(40)) * x0[i]));
        CHECK(b[i] == static_cast<float>(std::sqrt(1 - s.alpha_bar(40)) * eps[i]));
    }
    CHECK_THROWS_AS(forward_marginal_sample(x0, 0, s, eps), ValueError);
    CHECK_THROWS_AS(forward_marginal_sample(x0, 101, s, eps), ValueError);
    CHECK_THROWS_AS(forward_marginal_sample(x0, 1, s, Tensor::zeros({3, 2})), ShapeError);

    NoiseSchedule s19({0.19, 0.2});
    auto y = forward_step_sample(x0, 1, s19, Tensor::zeros({2, 3}));
    for (std::size_t i = 0; i < 6; ++i) CHECK_THAT(y[i], WithinAbs(0.9 * x0[i], 1e-6));
    CHECK_THROWS_AS(forward_step_sample(x0, 3, s19, eps), ValueError);
}

TEST_CASE("noiseless forward chain telescopes to the marginal", "[diffusion][property]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    Rng r(2);
    for (std::size_t t : {1u, 2u, 10u, 57u, 100u}) {
        auto x0 = Tensor::randn({4, 4}, r);
        Tensor x = x0;
        for (std::size_t k = 1; k <= t; ++k) x = forward_step_sample(x, k, s, Tensor::zeros(x.shape()));
        CHECK(max_abs_diff(x, forward_marginal_sample(x0, t, s, Tensor::zeros(x0.shape()))) < 1e-5f);
    }
}

TEST_CASE("forward marginal moments", "[diffusion][property]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    const std::size_t t = 30, N = 10000;
    const Tensor x0({4}, {0.5f, -1.0f, 2.0f, 0.0f});
    Rng r(31);
    std::vector<std::vector<double>> draws(4);
    for (std::size_t k = 0; k < N; ++k) {
        auto xt = forward_marginal_sample(x0, t, s, Tensor::randn({4}, r));
        for (std::size_t d = 0; d < 4; ++d) draws[d].push_back(xt[d]);
    }
    for (std::size_t d = 0; d < 4; ++d) check_moments(draws[d], std::sqrt(s.alpha_bar(t)) * x0[d], 1 - s.alpha_bar(t));
}

TEST_CASE("chained stochastic steps match the marginal", "[diffusion][property]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    const std::size_t t = 25, N = 10000;
    const Tensor x0({4}, {1.0f, -0.5f, 0.25f, 1.5f});
    Rng r(4);
    std::vector<std::vector<double>> draws(4);
    for (std::size_t k = 0; k < N; ++k) {
        Tensor x = x0;
        for (std::size_t j = 1; j <= t; ++j) x = forward_step_sample(x, j, s, Tensor::randn({4}, r));
        for (std::size_t d = 0; d < 4; ++d) draws[d].push_back(x[d]);
    }
    for (std::size_t d = 0; d < 4; ++d) check_moments(draws[d], std::sqrt(s.alpha_bar(t)) * x0[d], 1 - s.alpha_bar(t));
}

TEST_CASE("reverse step identities", "[diffusion]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    Rng r(5);
    auto x = Tensor::randn({3, 3}, r);
    const std::size_t t = 60;

    auto y = reverse_step(x, t, Tensor::zeros(x.shape()), s);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK_THAT(y[i], WithinAbs(x[i] / std::sqrt(1 - s.beta(t)), 1e-6));

    // forward one step with known eps, reverse with that eps: substituting
    // x_t gives x_prev + (sqrt(b) - b / sqrt(1 - abar)) eps / sqrt(1 - b)
    auto eps = Tensor::randn(x.shape(), r);
    auto xt = forward_step_sample(x, t, s, eps);
    auto back = reverse_step(xt, t, eps, s);
    const double b = s.beta(t), ab = s.alpha_bar(t);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double want = x[i] + (std::sqrt(b) - b / std::sqrt(1 - ab)) * eps[i] / std::sqrt(1 - b);
        CHECK_THAT(back[i], WithinAbs(want, 1e-5));
    }

    auto n = Tensor::randn(x.shape(), r);
    auto with = reverse_step(x, t, eps, s, n);
    auto without = reverse_step(x, t, eps, s);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK_THAT(with[i] - without[i], WithinAbs(s.sigma(t) * n[i], 1e-6));
    }

    CHECK_THROWS_AS(reverse_step(x, 0, eps, s), ValueError);
    CHECK_THROWS_AS(reverse_step(x, t, Tensor::zeros({9}), s), ShapeError);
}

TEST_CASE("reconstruct with the oracle noise predictor is an identity", "[diffusion]") {
    auto s = make_linear_schedule(100, 1e-4, 0.02);
    Rng r(6);
    for (int trial = 0; trial < 5; ++trial) {
        auto x0 = Tensor::uniform({1, 1, 8, 8}, -1.0f, 1.0f, r);
        NoisePredictor oracle = [&](const Tensor& xt, std::size_t t) {
            const double ab = s.alpha_bar(t);
            std::vector<float> e(xt.size());
            for (std::size_t i = 0; i < xt.size(); ++i) {
                e[i] = static_cast<float>((xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab));
            }
            return Tensor(xt.shape(), std::move(e));
        };
        for (std::size_t t_star : {1u, 10u, 40u, 100u}) {
            ReconstructionConfig cfg;
            cfg.t_star = t_star;
            cfg.deterministic_tail = true;
            cfg.tail_steps = t_star;
            cfg.seed = static_cast<std::uint64_t>(trial);
            CHECK(max_abs_diff(reconstruct(x0, oracle, s, cfg), x0) < 1e-4f);
        }
    }
}

TEST_CASE("reconstruct contract", "[diffusion]") {
    auto s = make_linear_schedule(20, 1e-4, 0.02);
    NoisePredictor half = [](const Tensor& x, std::size_t) { return ops::scale<float>(nullptr, x, 0.5f); };
    Rng r(7);
    for (Shape shape : {Shape{1, 1, 4, 4}, Shape{3, 2, 5, 7}, Shape{6}}) {
        auto x0 = Tensor::randn(shape, r);
        ReconstructionConfig cfg;
        cfg.t_star = 8;
        cfg.seed = 3;
        auto a = reconstruct(x0, half, s, cfg);
        CHECK(a.shape() == shape);
        CHECK(hash_values(a) == hash_values(reconstruct(x0, half, s, cfg)));
    }
    ReconstructionConfig bad;
    bad.t_star = 0;
    CHECK_THROWS_AS(reconstruct(Tensor::zeros({4}), half, s, bad), ValueError);
    bad.t_star = 21;
    CHECK_THROWS_AS(reconstruct(Tensor::zeros({4}), half, s, bad), ValueError);
    ReconstructionConfig ok;
    ok.t_star = 5;
    NoisePredictor wrong = [](const Tensor&, std::size_t) { return Tensor::zeros({3}); };
    CHECK_THROWS_AS(reconstruct(Tensor::zeros({4}), wrong, s, ok), ShapeError);

    CHECK(t_star_from_fraction(make_linear_schedule(100, 1e-4, 0.02), 0.4) == 40);
    CHECK(t_star_from_fraction(make_linear_schedule(1000, 1e-4, 0.02), 0.4) == 400);
}

TEST_CASE("batched reconstruct equals per-item reconstruct", "[diffusion]") {
    auto s = make_linear_schedule(30, 1e-4, 0.02);
    NoisePredictor m = [](const Tensor& x, std::size_t t) {
        return ops::scale<float>(nullptr, x, 0.3f + 0.01f * static_cast<float>(t));
    };
    Rng r(8);
    auto batch = Tensor::randn({4, 1, 6, 6}, r);
    ReconstructionConfig cfg;
    cfg.t_star = 12;
    const std::vector<std::uint64_t> seeds{11, 12, 13, 14};
    auto out = reconstruct_batch(batch, m, s, cfg, seeds);
    for (std::size_t n = 0; n < 4; ++n) {
        auto item = ops::slice<float>(nullptr, batch, 0, n, 1);
        ReconstructionConfig c = cfg;
        c.seed = seeds[n];
        CHECK(reconstruct(item, m, s, c).values() == ops::slice<float>(nullptr, out, 0, n, 1).values());
    }
    CHECK_THROWS_AS(reconstruct_batch(batch, m, s, cfg, {1, 2}), ValueError);
}

TEST_CASE("unconditional sample", "[diffusion]") {
    auto s = make_linear_schedule(50, 1e-4, 0.02);
    NoisePredictor zero = [](const Tensor& x, std::size_t) { return Tensor::zeros(x.shape()); };
    const Shape shape{2, 1, 4, 4};
    auto a = unconditional_sample(zero, s, shape, 99, false);
    // closed form: x_T * prod 1/sqrt(1 - beta_t)
    Rng r(99);
    auto xT = Tensor::randn(shape, r);
    double g = 1.0;
    for (std::size_t t = 1; t <= 50; ++t) g /= std::sqrt(1 - s.beta(t));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK_THAT(a[i], WithinRel(xT[i] * g, 1e-5));

    auto b1 = unconditional_sample(zero, s, shape, 5);
    auto b2 = unconditional_sample(zero, s, shape, 5);
    CHECK(b1.values() == b2.values());
    CHECK(b1.values() != unconditional_sample(zero, s, shape, 6).values());
    for (float v : b1.data()) CHECK(std::isfinite(v));
}
