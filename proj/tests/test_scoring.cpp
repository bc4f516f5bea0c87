#include <catch_amalgamated.hpp>

#include <cmath>

#include "diffad/diffad.hpp"

using namespace diffad;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Fraction of (anomaly, normal) pairs with the anomaly scoring higher, ties 1/2.
double brute_force_auc(const std::vector<double>& s, const std::vector<int>& l) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (l[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[j] != 0) continue;
            pairs += 1;
            if (s[i] > s[j]) wins += 1;
            else if (s[i] == s[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

struct Labeled {
    std::vector<double> scores;
    std::vector<int> labels;
};

Labeled random_set(Rng& r, std::size_t n, bool coarse) {
    Labeled d;
    std::uniform_int_distribution<int> coin(0, 1), bucket(0, 5);
    std::normal_distribution<double> g(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
        d.labels.push_back(i == 0 ? 0 : i == 1 ? 1 : coin(r));
        const double shift = d.labels.back() ? 0.7 : 0.0;
        d.scores.push_back(coarse ? bucket(r) + shift : g(r) + shift);
    }
    return d;
}

}  // namespace

TEST_CASE("recon_error", "[scoring]") {
    CHECK(recon_error(Tensor({2}, {1, 1}), Tensor({2}, {1, 1})) == 0.0);
    CHECK(recon_error(Tensor({2}, {1, 1}), Tensor({2}, {0, 0})) == 1.0);
    Rng r(1);
    auto a = Tensor::randn({3, 5, 7}, r), b = Tensor::randn({3, 5, 7}, r);
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    CHECK_THAT(recon_error(a, b), WithinRel(acc / static_cast<double>(a.size()), 1e-12));
    CHECK_THROWS_AS(recon_error(a, Tensor::zeros({3, 5, 6})), ShapeError);
}

TEST_CASE("anomaly_score", "[scoring]") {
    ScoreConfig c;
    c.lambda = 1.0;
    CHECK(anomaly_score(0.3, 17.0, c) == 0.3);
    c.lambda = 0.0;
    CHECK(anomaly_score(0.3, 17.0, c) == 17.0);
    c.lambda = 0.5;
    CHECK(anomaly_score(2.0, 4.0, c) == 3.0);
    for (double lam : {0.1, 0.25, 0.9}) {
        c.lambda = lam;
        CHECK_THAT(anomaly_score(2.0, 4.0, c), WithinAbs(4.0 - 2.0 * lam, 1e-12));
    }
    c.lambda = 1.5;
    CHECK_THROWS_AS(anomaly_score(1, 1, c), ValueError);
    c.lambda = -0.1;
    CHECK_THROWS_AS(anomaly_score(1, 1, c), ValueError);
}

TEST_CASE("anomaly_map", "[scoring]") {
    Rng r(2);
    auto x = Tensor::randn({1, 8, 8}, r);
    for (float v : anomaly_map(x, x).values()) CHECK(v == 0.0f);

    auto y = x.values();
    y[3 * 8 + 4] += 3.0f;
    auto m0 = anomaly_map(x, Tensor(x.shape(), y));
    for (std::size_t i = 0; i < 64; ++i) {
        if (i == 3 * 8 + 4) CHECK_THAT(m0[i], WithinRel(9.0, 1e-5));
        else CHECK(m0[i] == 0.0f);
    }
    auto m1 = anomaly_map(x, Tensor(x.shape(), y), 1);
    const double spike = m0[3 * 8 + 4];
    for (std::size_t yy = 0; yy < 8; ++yy)
        for (std::size_t xx = 0; xx < 8; ++xx) {
            const bool inside = yy >= 2 && yy <= 4 && xx >= 3 && xx <= 5;
            if (inside) CHECK_THAT(m1[yy * 8 + xx], WithinRel(spike / 9, 1e-6));
            else CHECK(m1[yy * 8 + xx] == 0.0f);
        }

    // channels are summed
    auto c3 = Tensor::zeros({3, 4, 4});
    auto d3 = Tensor::full({3, 4, 4}, 1.0f);
    for (float v : anomaly_map(c3, d3).values()) CHECK(v == 3.0f);
    CHECK(anomaly_map(Tensor::zeros({1, 2, 5, 6}), Tensor::zeros({1, 2, 5, 6})).shape() == Shape{5, 6});
    CHECK_THROWS_AS(anomaly_map(x, Tensor::zeros({1, 8, 7})), ShapeError);
}

TEST_CASE("anomaly_map sums to element count times recon_error", "[scoring][property]") {
    Rng r(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t H = 4 + trial % 9, W = 3 + trial % 7;
        auto a = Tensor::randn({1, H, W}, r), b = Tensor::randn({1, H, W}, r);
        double s = 0;
        for (float v : anomaly_map(a, b).values()) {
            CHECK(v >= 0.0f);
            s += v;
        }
        CHECK_THAT(s, WithinAbs(static_cast<double>(H * W) * recon_error(a, b), 1e-5 * std::max(1.0, s)));
    }
}

TEST_CASE("roc_auc examples", "[scoring]") {
    CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
    CHECK(roc_auc({0.1, 0.9}, {1, 0}) == 0.0);
    CHECK(roc_auc({0.5, 0.5}, {1, 0}) == 0.5);
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), ValueError);
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {0, 0}), ValueError);
    CHECK_THROWS_AS(roc_auc({0.1}, {0, 1}), ValueError);
}

TEST_CASE("roc_auc matches the all-pairs count", "[scoring][property]") {
    Rng r(4);
    for (int trial = 0; trial < 200; ++trial) {
        auto d = random_set(r, 2 + static_cast<std::size_t>(trial % 60), trial % 2 == 0);
        CHECK(roc_auc(d.scores, d.labels) == brute_force_auc(d.scores, d.labels));
    }
}

TEST_CASE("roc_auc invariances", "[scoring][property]") {
    Rng r(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto d = random_set(r, 40, trial % 3 == 0);
        const double auc = roc_auc(d.scores, d.labels);
        std::vector<double> ex, af;
        for (double s : d.scores) {
            ex.push_back(std::exp(s));
            af.push_back(3.5 * s - 2.0);
        }
        CHECK(roc_auc(ex, d.labels) == auc);
        CHECK(roc_auc(af, d.labels) == auc);
        std::vector<int> flipped;
        for (int l : d.labels) flipped.push_back(1 - l);
        CHECK_THAT(auc + roc_auc(d.scores, flipped), WithinAbs(1.0, 1e-12));
        CHECK(auc >= 0.0);
        CHECK(auc <= 1.0);
    }
}

TEST_CASE("assign_scores", "[scoring]") {
    std::vector<AnomalyReport> reps(4);
    const double er[4] = {0.1, 0.4, 0.2, 0.9}, ef[4] = {3.0, 1.0, 2.0, 6.0};
    for (int i = 0; i < 4; ++i) {
        reps[i].e_recon = er[i];
        reps[i].e_feat = ef[i];
        reps[i].label = i % 2;
    }
    auto raw = reps;
    ScoreConfig c;
    c.lambda = 0.25;
    assign_scores(raw, c);
    for (int i = 0; i < 4; ++i) CHECK_THAT(raw[i].score, WithinAbs(0.25 * er[i] + 0.75 * ef[i], 1e-12));

    auto norm = reps;
    c.normalize = true;
    assign_scores(norm, c);
    double mr = 0, mf = 0;
    for (const auto& rep : norm) mr += rep.e_recon, mf += rep.e_feat;
    CHECK_THAT(mr, WithinAbs(0.0, 1e-12));
    CHECK_THAT(mf, WithinAbs(0.0, 1e-12));
    for (const auto& rep : norm) CHECK_THAT(rep.score, WithinAbs(0.25 * rep.e_recon + 0.75 * rep.e_feat, 1e-12));

    CHECK(reports_auc(raw) == roc_auc({raw[0].score, raw[1].score, raw[2].score, raw[3].score}, {0, 1, 0, 1}));
}
