#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "ops.hpp"
#include "perception.hpp"
#include "tape.hpp"

namespace diffad {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    double gamma = 0.1;
    std::uint64_t seed = 0;
    // L_feat is only evaluated for batch items with t <= round(fraction * T).
    double t_star_fraction = 0.4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t perception_seed = 7;
    std::filesystem::path checkpoint_path;  // empty: no periodic saves
    std::size_t checkpoint_every = 0;       // steps; 0 disables

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigError("train.learning_rate must be a finite value >= 0");
        }
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("train.gamma must be >= 0");
        if (!(t_star_fraction > 0.0 && t_star_fraction <= 1.0)) {
            throw ConfigError("train.t_star_fraction must lie in (0,1]");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("train.beta1/beta2 must lie in [0,1)");
        }
        if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
    }
};

/// Weight-initialization seed derived from a run seed, so initialization and
/// the training stream do not share a generator sequence.
inline std::uint64_t init_seed_for(std::uint64_t run_seed) { return run_seed ^ 0x9E3779B97F4A7C15ULL; }

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
inline Tensor estimate_x0(const Tensor& x_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    if (x_t.shape() != eps_hat.shape()) {
        throw ShapeError("estimate_x0: shape mismatch " + to_string(x_t.shape()) + " vs " + to_string(eps_hat.shape()));
    }
    const double inv = 1.0 / std::sqrt(ab);
    return detail::affine_combine(x_t, inv, eps_hat, -std::sqrt(1.0 - ab) * inv, "estimate_x0");
}

/// Adaptive-moment optimizer with bias correction. Moments are kept in
/// double per named parameter.
class AdamOptimizer {
  public:
    AdamOptimizer() = default;
    AdamOptimizer(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    std::size_t steps() const noexcept { return t_; }

    /// New weights after one update. Parameters missing from `grads` get a
    /// zero gradient.
    ModelWeights update(const ModelWeights& w, const std::map<std::string, std::vector<float>>& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        ModelWeights out;
        for (const auto& [name, p] : w) {
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.size(), 0.0);
                v.assign(p.size(), 0.0);
            }
            auto g = grads.find(name);
            const bool has = g != grads.end() && !g->second.empty();
            if (has && g->second.size() != p.size()) throw ShapeError("adam: gradient size mismatch for " + name);
            std::vector<float> nv(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = has ? static_cast<double>(g->second[i]) : 0.0;
                m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
                v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
                const double step = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
                nv[i] = static_cast<float>(static_cast<double>(p[i]) - step);
            }
            out.emplace(name, Tensor(p.shape(), std::move(nv), p.requires_grad()));
        }
        return out;
    }

  private:
    double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

struct StepLosses {
    double mse = 0.0;
    double feat = 0.0;
    double total = 0.0;
};

namespace detail {

// Tensor of x's shape with coefficient c[n] across all of item n.
inline Tensor per_item(const Shape& shape, const std::vector<double>& c) {
    const std::size_t per = numel(shape) / shape[0];
    std::vector<float> v(numel(shape));
    for (std::size_t n = 0; n < shape[0]; ++n) std::fill_n(v.begin() + n * per, per, static_cast<float>(c[n]));
    return Tensor(shape, std::move(v));
}

inline bool all_finite(const ModelWeights& w) {
    for (const auto& [_, t] : w)
        for (float v : t.data())
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace detail

/// One optimization step on `batch` [N,C,H,W]. Draws t and eps from `rng`,
/// updates the model weights in place and returns the losses before the
/// update. Non-finite losses raise NumericError naming the step.
inline StepLosses training_step(Denoiser& model, const Tensor& batch, const NoiseSchedule& s,
                                const FeatureExtractor& f, const TrainConfig& cfg, AdamOptimizer& opt, Rng& rng) {
    if (batch.rank() != 4) throw ShapeError("training_step: expected [N,C,H,W] batch, got " + to_string(batch.shape()));
    const std::size_t N = batch.extent(0);
    const std::size_t step_no = opt.steps() + 1;

    std::uniform_int_distribution<std::size_t> pick_t(1, s.steps());
    std::vector<std::size_t> ts(N);
    for (auto& t : ts) t = pick_t(rng);
    Tensor eps = Tensor::randn(batch.shape(), rng);

    std::vector<double> ca(N), cb(N), inv_a(N), eps_coef(N);
    for (std::size_t n = 0; n < N; ++n) {
        const double ab = s.alpha_bar(ts[n]);
        ca[n] = std::sqrt(ab);
        cb[n] = std::sqrt(1.0 - ab);
        inv_a[n] = 1.0 / ca[n];
        eps_coef[n] = -cb[n] / ca[n];
    }
    auto fail = [&](const std::string& what) {
        std::ostringstream os;
        os << "training diverged at step " << step_no << ": " << what << " (timesteps";
        for (auto t : ts) os << ' ' << t;
        os << ")";
        return NumericError(os.str());
    };

    StepLosses out;
    ModelWeights params = set_requires_grad(model.weights(), true);
    Denoiser live(model.config(), params);
    Tape tape;
    try {
        const Tensor x_t = ops::add<float>(nullptr, ops::mul<float>(nullptr, batch, detail::per_item(batch.shape(), ca)),
                                           ops::mul<float>(nullptr, eps, detail::per_item(batch.shape(), cb)));
        Tensor eps_hat = live.predict(&tape, x_t, ts);
        Tensor mse = ops::mean<float>(&tape, ops::square<float>(&tape, ops::sub<float>(&tape, eps_hat, eps)));
        Tensor loss = mse;
        out.mse = static_cast<double>(mse.item());
        out.total = out.mse;
        if (cfg.gamma > 0.0) {
            const std::size_t t_cut = t_star_from_fraction(s, cfg.t_star_fraction);
            std::vector<std::size_t> keep;
            for (std::size_t n = 0; n < N; ++n)
                if (ts[n] <= t_cut) keep.push_back(n);
            if (!keep.empty()) {
                // One-step x0 estimate, per item, over the eligible items only.
                Tensor x0_hat = ops::add<float>(
                    &tape, ops::mul<float>(&tape, x_t, detail::per_item(x_t.shape(), inv_a)),
                    ops::mul<float>(&tape, eps_hat, detail::per_item(x_t.shape(), eps_coef)));
                std::vector<Tensor> est, ref;
                for (auto n : keep) {
                    est.push_back(ops::slice<float>(&tape, x0_hat, 0, n, 1));
                    ref.push_back(ops::slice<float>(nullptr, batch, 0, n, 1));
                }
                Tensor e = est.size() == 1 ? est[0] : ops::concat<float>(&tape, est, 0);
                Tensor r = ref.size() == 1 ? ref[0] : ops::concat<float>(nullptr, ref, 0);
                Tensor feat = ops::div_scalar<float>(&tape, feature_distance<float>(&tape, f, r, e),
                                                     static_cast<float>(keep.size()));
                out.feat = static_cast<double>(feat.item());
                loss = ops::add<float>(&tape, mse, ops::scale<float>(&tape, feat, static_cast<float>(cfg.gamma)));
                out.total = static_cast<double>(loss.item());
            }
        }
        if (!std::isfinite(out.total) || !std::isfinite(out.mse) || !std::isfinite(out.feat)) {
            throw fail("non-finite loss L=" + std::to_string(out.total));
        }
        auto grads = tape.backward(loss);
        std::map<std::string, std::vector<float>> g;
        for (const auto& [name, p] : params) {
            auto raw = grads.raw(p);
            if (!raw.empty()) g.emplace(name, std::vector<float>(raw.begin(), raw.end()));
        }
        auto next = opt.update(params, g);
        if (!detail::all_finite(next)) throw fail("non-finite weights after update");
        model.set_weights(set_requires_grad(next, false));
    } catch (const NumericError& e) {
        if (std::string(e.what()).rfind("training diverged", 0) == 0) throw;
        throw fail(e.what());
    }
    return out;
}

using StepCallback = std::function<void(std::size_t step, const StepLosses&)>;

/// Snapshot of a model with its schedule and extractor seed.
inline Checkpoint make_checkpoint(const Denoiser& model, const ScheduleParams& sp, std::uint64_t perception_seed,
                                  std::uint64_t step) {
    Checkpoint c;
    c.model = model.config();
    c.weights = set_requires_grad(model.weights(), false);
    c.schedule = sp;
    c.perception_seed = perception_seed;
    c.step = step;
    return c;
}

/// Trains on normal samples [C,H,W]. Batches follow a seeded shuffle per
/// epoch; the last batch of an epoch may be short. Deterministic for a given
/// (seed, config, data) since everything runs on the calling thread.
inline Checkpoint train(Denoiser& model, const std::vector<Tensor>& dataset, const ScheduleParams& sp,
                        const FeatureExtractor& f, const TrainConfig& cfg, const StepCallback& on_step = {},
                        std::map<std::string, std::string> metadata = {}) {
    cfg.validate();
    if (dataset.empty()) throw DataError("train: empty training set");
    const NoiseSchedule s = sp.build();
    AdamOptimizer opt(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    auto snapshot = [&](std::size_t step) {
        auto c = make_checkpoint(model, sp, cfg.perception_seed, step);
        c.metadata = metadata;
        return c;
    };

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with our own index draws: std::shuffle's use of the
        // engine is implementation-defined.
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(rng() % i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<Tensor> items;
            for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) items.push_back(dataset[order[k]]);
            StepLosses l = training_step(model, stack_batch(items), s, f, cfg, opt, rng);
            ++step;
            if (on_step) on_step(step, l);
            if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && step % cfg.checkpoint_every == 0) {
                save_checkpoint(snapshot(step), cfg.checkpoint_path);
            }
        }
    }
    return snapshot(step);
}

}  // namespace diffad
