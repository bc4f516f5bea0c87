#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "data.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "perception.hpp"
#include "scoring.hpp"
#include "wavelets.hpp"

namespace diffad {

/// 1-D window -> single-channel scalogram image [1, S, w]. Row j is divided
/// by gains[j]; fit() picks the gains so every scale has rms 0.5 over the
/// training windows. Without the per-scale gains the coarse tonal rows swamp
/// the fine rows where spikes show up.
struct ScalogramTransform {
    static constexpr double kTargetRms = 0.5;

    std::size_t num_scales = 32;
    double sampling_rate = 1.0;
    std::vector<double> gains;  // empty: all ones

    std::vector<double> scales() const { return default_scales(sampling_rate, num_scales); }

    Tensor apply(const Tensor& window) const {
        if (window.rank() != 1) throw ShapeError("scalogram: expected a 1-D window, got " + to_string(window.shape()));
        if (!gains.empty() && gains.size() != num_scales) {
            throw ValueError("scalogram: " + std::to_string(gains.size()) + " gains for " + std::to_string(num_scales) +
                             " scales");
        }
        auto s = cwt(window, scales(), sampling_rate);
        const auto& c = s.coefficients;
        const std::size_t n = c.extent(1);
        std::vector<float> v(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) {
            const double g = gains.empty() ? 1.0 : gains[i / n];
            v[i] = static_cast<float>(static_cast<double>(c[i]) / g);
        }
        return Tensor({1, c.extent(0), n}, std::move(v));
    }

    void fit(const std::vector<Sample>& windows) {
        std::vector<double> sq(num_scales, 0.0);
        std::size_t per_row = 0;
        for (const auto& w : windows) {
            auto s = cwt(w.tensor, scales(), sampling_rate);
            const std::size_t n = s.coefficients.extent(1);
            per_row += n;
            for (std::size_t j = 0; j < num_scales; ++j)
                for (std::size_t i = 0; i < n; ++i) {
                    const double c = s.coefficients[j * n + i];
                    sq[j] += c * c;
                }
        }
        gains.assign(num_scales, 1.0);
        if (per_row == 0) return;
        for (std::size_t j = 0; j < num_scales; ++j) {
            const double rms = std::sqrt(sq[j] / static_cast<double>(per_row));
            if (rms > 0) gains[j] = rms / kTargetRms;
        }
    }

    /// Comma-separated gains at round-trip precision, for checkpoint metadata.
    std::string gains_string() const {
        std::ostringstream os;
        os << std::setprecision(17);
        for (std::size_t j = 0; j < gains.size(); ++j) os << (j ? "," : "") << gains[j];
        return os.str();
    }

    void set_gains(const std::string& csv) {
        gains.clear();
        std::istringstream in(csv);
        for (std::string tok; std::getline(in, tok, ',');) {
            std::size_t used = 0;
            double g = 0;
            try {
                g = std::stod(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok.size() || !(g > 0) || !std::isfinite(g)) throw ValueError("scalogram gain '" + tok + "' is not a positive number");
            gains.push_back(g);
        }
        if (gains.size() != num_scales) {
            throw ValueError("scalogram: " + std::to_string(gains.size()) + " gains for " + std::to_string(num_scales) +
                             " scales");
        }
    }
};

/// Model-space tensor [C,H,W] of a sample.
inline Tensor model_input(const Sample& s, const ScalogramTransform& st) {
    if (s.modality == Modality::TimeSeries) return st.apply(s.tensor);
    if (s.tensor.rank() != 3) throw ShapeError("image sample '" + s.id + "' is not [C,H,W]");
    return s.tensor;
}

inline std::vector<Tensor> model_inputs(const std::vector<Sample>& samples, const ScalogramTransform& st) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(model_input(s, st));
    return out;
}

struct EvalConfig {
    double t_star_fraction = 0.4;
    ScoreConfig score;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::size_t batch_size = 16;
    std::size_t map_radius = 0;
    bool keep_maps = false;
};

inline Tensor as_batch(const Tensor& x) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return ops::reshape<float>(nullptr, x, s);
}

/// Reconstructs model-space inputs [C,H,W] as one batch and measures both
/// errors per item. Item k reconstructs with seeds[k].
inline std::vector<AnomalyReport> score_inputs(const Denoiser& model, const NoiseSchedule& s,
                                               const FeatureExtractor& f, const std::vector<Tensor>& xs,
                                               const EvalConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    ReconstructionConfig rc;
    rc.t_star = t_star_from_fraction(s, cfg.t_star_fraction);
    const Tensor xb = stack_batch(xs);
    Tensor rec = reconstruct_batch(
        xb, [&](const Tensor& xt, std::size_t t) { return predict_noise(model, xt, t); }, s, rc, seeds);
    std::vector<AnomalyReport> out(xs.size());
    for (std::size_t k = 0; k < xs.size(); ++k) {
        Tensor a = ops::slice<float>(nullptr, xb, 0, k, 1);
        Tensor b = ops::slice<float>(nullptr, rec, 0, k, 1);
        out[k].e_recon = recon_error(a, b);
        out[k].e_feat = feature_distance(f, a, b);
        if (cfg.keep_maps) out[k].pixel_map = anomaly_map(a, b, cfg.map_radius);
    }
    return out;
}

/// Single-input convenience form of score_inputs().
inline AnomalyReport score_input(const Denoiser& model, const NoiseSchedule& s, const FeatureExtractor& f,
                                 const Tensor& x, const EvalConfig& cfg, std::uint64_t seed) {
    return score_inputs(model, s, f, {x}, cfg, {seed}).front();
}

/// Per-sample reports with scores assigned. Sample i reconstructs with seed
/// (cfg.seed ^ i), so results do not depend on thread count or batching
/// beyond floating-point summation order.
inline std::vector<AnomalyReport> evaluate(const Denoiser& model, const NoiseSchedule& s, const FeatureExtractor& f,
                                           const std::vector<Sample>& samples, const ScalogramTransform& st,
                                           const EvalConfig& cfg) {
    cfg.score.validate();
    std::vector<AnomalyReport> out(samples.size());
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
    const std::size_t chunks = (samples.size() + bs - 1) / bs;
    auto work = [&](std::size_t c) {
        std::vector<Tensor> xs;
        std::vector<std::uint64_t> seeds;
        const std::size_t lo = c * bs, hi = std::min(samples.size(), lo + bs);
        for (std::size_t i = lo; i < hi; ++i) {
            xs.push_back(model_input(samples[i], st));
            seeds.push_back(cfg.seed ^ static_cast<std::uint64_t>(i));
        }
        auto reps = score_inputs(model, s, f, xs, cfg, seeds);
        for (std::size_t i = lo; i < hi; ++i) {
            out[i] = std::move(reps[i - lo]);
            out[i].sample_id = samples[i].id;
            out[i].label = samples[i].label;
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(cfg.threads, 1, std::max<std::size_t>(1, chunks));
    if (threads == 1) {
        for (std::size_t c = 0; c < chunks; ++c) work(c);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t k = 0; k < threads; ++k) {
            pool.emplace_back([&, k] {
                try {
                    for (std::size_t c = k; c < chunks; c += threads) work(c);
                } catch (...) {
                    errors[k] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    assign_scores(out, cfg.score);
    return out;
}

}  // namespace diffad
