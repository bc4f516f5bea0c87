#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace diffad {

struct ScoreConfig {
    double lambda = 0.5;
    bool normalize = false;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValueError("score lambda must lie in [0,1]");
    }
};

struct AnomalyReport {
    std::string sample_id;
    double e_recon = 0.0;
    double e_feat = 0.0;
    double score = 0.0;
    int label = -1;  // -1 when unknown
    std::optional<Tensor> pixel_map;
};

/// Mean squared difference.
inline double recon_error(const Tensor& x, const Tensor& x_rec) {
    if (x.shape() != x_rec.shape()) {
        throw ShapeError("recon_error: shape mismatch " + to_string(x.shape()) + " vs " + to_string(x_rec.shape()));
    }
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = static_cast<double>(x[i]) - static_cast<double>(x_rec[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(x.size());
}

/// lambda * e_recon + (1 - lambda) * e_feat
inline double anomaly_score(double e_recon, double e_feat, const ScoreConfig& cfg) {
    cfg.validate();
    if (cfg.lambda == 1.0) return e_recon;
    if (cfg.lambda == 0.0) return e_feat;
    return cfg.lambda * e_recon + (1.0 - cfg.lambda) * e_feat;
}

/// Per-pixel squared error summed over channels, optionally box-blurred with
/// a (2r+1)^2 window (zero outside the image, always divided by the full
/// window area). Accepts [C,H,W], [1,C,H,W] or [H,W]; returns [H,W].
inline Tensor anomaly_map(const Tensor& x, const Tensor& x_rec, std::size_t smooth_radius = 0) {
    if (x.shape() != x_rec.shape()) {
        throw ShapeError("anomaly_map: shape mismatch " + to_string(x.shape()) + " vs " + to_string(x_rec.shape()));
    }
    std::size_t C, H, W;
    if (x.rank() == 2) {
        C = 1, H = x.extent(0), W = x.extent(1);
    } else if (x.rank() == 3) {
        C = x.extent(0), H = x.extent(1), W = x.extent(2);
    } else if (x.rank() == 4 && x.extent(0) == 1) {
        C = x.extent(1), H = x.extent(2), W = x.extent(3);
    } else {
        throw ShapeError("anomaly_map: expected a single image, got " + to_string(x.shape()));
    }
    std::vector<double> err(H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i) {
            double d = static_cast<double>(x[c * H * W + i]) - static_cast<double>(x_rec[c * H * W + i]);
            err[i] += d * d;
        }
    std::vector<float> out(H * W);
    if (smooth_radius == 0) {
        for (std::size_t i = 0; i < H * W; ++i) out[i] = static_cast<float>(err[i]);
    } else {
        const long r = static_cast<long>(smooth_radius);
        const double area = static_cast<double>((2 * r + 1) * (2 * r + 1));
        for (long y = 0; y < static_cast<long>(H); ++y)
            for (long xx = 0; xx < static_cast<long>(W); ++xx) {
                double acc = 0;
                for (long dy = -r; dy <= r; ++dy)
                    for (long dx = -r; dx <= r; ++dx) {
                        long yy = y + dy, xs = xx + dx;
                        if (yy < 0 || xs < 0 || yy >= static_cast<long>(H) || xs >= static_cast<long>(W)) continue;
                        acc += err[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xs)];
                    }
                out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(xx)] = static_cast<float>(acc / area);
            }
    }
    return Tensor({H, W}, std::move(out));
}

/// Mann-Whitney AUC via midranks: probability that a random anomaly (label 1)
/// outscores a random normal (label 0), ties counting one half.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ValueError("roc_auc: scores and labels differ in length");
    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l == 1) ++n_pos;
        else if (l == 0) ++n_neg;
        else throw ValueError("roc_auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0) throw ValueError("roc_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Twice the midrank keeps every quantity integral.
    std::int64_t rank2_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const auto twice_midrank = static_cast<std::int64_t>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) rank2_sum += twice_midrank;
        }
        i = j + 1;
    }
    const auto p = static_cast<std::int64_t>(n_pos), q = static_cast<std::int64_t>(n_neg);
    const std::int64_t u2 = rank2_sum - p * (p + 1);
    return static_cast<double>(u2) / (2.0 * static_cast<double>(p) * static_cast<double>(q));
}

/// z-scores over the set; constant inputs map to zeros.
inline std::vector<double> z_normalize(const std::vector<double>& v) {
    if (v.empty()) return {};
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double sd = std::sqrt(var);
    std::vector<double> out(v.size(), 0.0);
    if (sd > 0) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / sd;
    }
    return out;
}

/// Fills `score` on every report. With normalize set, e_recon and e_feat are
/// z-normalized across the set first and the reports hold the normalized values.
inline void assign_scores(std::vector<AnomalyReport>& reports, const ScoreConfig& cfg) {
    cfg.validate();
    if (cfg.normalize) {
        std::vector<double> r, f;
        for (const auto& rep : reports) {
            r.push_back(rep.e_recon);
            f.push_back(rep.e_feat);
        }
        r = z_normalize(r);
        f = z_normalize(f);
        for (std::size_t i = 0; i < reports.size(); ++i) {
            reports[i].e_recon = r[i];
            reports[i].e_feat = f[i];
        }
    }
    for (auto& rep : reports) rep.score = anomaly_score(rep.e_recon, rep.e_feat, cfg);
}

inline double reports_auc(const std::vector<AnomalyReport>& reports) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& r : reports) {
        s.push_back(r.score);
        l.push_back(r.label);
    }
    return roc_auc(s, l);
}

}  // namespace diffad
