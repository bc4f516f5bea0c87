#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace diffad {

/// Variance schedule tables. Timesteps are 1-indexed: t = 1..T.
class NoiseSchedule {
  public:
    NoiseSchedule() = default;

    explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
        if (beta_.size() < 2) throw ValueError("noise schedule needs T >= 2");
        alpha_.resize(beta_.size());
        alpha_bar_.resize(beta_.size());
        sigma_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw ValueError("noise schedule: beta must lie in (0,1)");
            alpha_[i] = 1.0 - beta_[i];
            prod *= alpha_[i];
            alpha_bar_[i] = prod;
            sigma_[i] = std::sqrt(beta_[i]);
        }
    }

    std::size_t steps() const noexcept { return beta_.size(); }

    double beta(std::size_t t) const { return beta_[index(t)]; }
    double alpha(std::size_t t) const { return alpha_[index(t)]; }
    double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }
    double sigma(std::size_t t) const { return sigma_[index(t)]; }

    const std::vector<double>& betas() const noexcept { return beta_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

    void check_step(std::size_t t) const { (void)index(t); }

  private:
    std::size_t index(std::size_t t) const {
        if (t < 1 || t > beta_.size()) {
            throw ValueError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(beta_.size()) + "]");
        }
        return t - 1;
    }

    std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
};

/// beta_t = beta_start + (t-1)/(T-1) * (beta_end - beta_start); sigma_t^2 = beta_t.
inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start, double beta_end) {
    if (T < 2) throw ValueError("make_linear_schedule: T must be >= 2");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ValueError("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> b(T);
    for (std::size_t i = 0; i < T; ++i) {
        b[i] = beta_start + static_cast<double>(i) / static_cast<double>(T - 1) * (beta_end - beta_start);
    }
    return NoiseSchedule(std::move(b));
}

/// Parameters of a linear schedule, as persisted in checkpoints and configs.
struct ScheduleParams {
    std::size_t steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    NoiseSchedule build() const { return make_linear_schedule(steps, beta_start, beta_end); }
    bool operator==(const ScheduleParams&) const = default;
};

namespace detail {

inline Tensor affine_combine(const Tensor& a, double ca, const Tensor& b, double cb, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = static_cast<float>(ca * static_cast<double>(a[i]) + cb * static_cast<double>(b[i]));
    }
    return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_marginal_sample(const Tensor& x0, std::size_t t, const NoiseSchedule& s, const Tensor& eps) {
    const double ab = s.alpha_bar(t);
    return detail::affine_combine(x0, std::sqrt(ab), eps, std::sqrt(1.0 - ab), "forward_marginal_sample");
}

/// x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps
inline Tensor forward_step_sample(const Tensor& x_prev, std::size_t t, const NoiseSchedule& s, const Tensor& eps) {
    const double b = s.beta(t);
    return detail::affine_combine(x_prev, std::sqrt(1.0 - b), eps, std::sqrt(b), "forward_step_sample");
}

/// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(1 - beta_t) + sigma_t noise.
/// An empty `noise` tensor means zero noise.
inline Tensor reverse_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& s,
                           const Tensor& noise = Tensor()) {
    const double b = s.beta(t);
    const double ab = s.alpha_bar(t);
    if (eps_hat.shape() != x_t.shape()) {
        throw ShapeError("reverse_step: predicted noise " + to_string(eps_hat.shape()) + " does not match x_t " +
                         to_string(x_t.shape()));
    }
    const bool has_noise = !noise.empty();
    if (has_noise && noise.shape() != x_t.shape()) throw ShapeError("reverse_step: noise shape mismatch");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - b);
    const double coef = b / std::sqrt(1.0 - ab);
    const double sig = s.sigma(t);
    std::vector<float> out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        double v = inv_sqrt_alpha * (static_cast<double>(x_t[i]) - coef * static_cast<double>(eps_hat[i]));
        if (has_noise) v += sig * static_cast<double>(noise[i]);
        out[i] = static_cast<float>(v);
    }
    return Tensor(x_t.shape(), std::move(out));
}

/// Noise predictor eps_theta(x_t, t), applied with one timestep for the whole batch.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, std::size_t t)>;

struct ReconstructionConfig {
    std::size_t t_star = 40;
    // When set, the last `tail_steps` reverse steps run without injected
    // noise. The final step (t = 1) is always noiseless.
    bool deterministic_tail = false;
    std::size_t tail_steps = 1;
    std::uint64_t seed = 0;
};

inline std::size_t t_star_from_fraction(const NoiseSchedule& s, double fraction) {
    auto t = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(s.steps())));
    return std::clamp<std::size_t>(t, 1, s.steps());
}

/// Partial-noising reconstruction: noise x0 to t_star with the closed-form
/// marginal, then run the learned reverse chain from t_star down to 1.
inline Tensor reconstruct(const Tensor& x0, const NoisePredictor& model, const NoiseSchedule& s,
                          const ReconstructionConfig& cfg) {
    if (cfg.t_star < 1 || cfg.t_star > s.steps()) {
        throw ValueError("reconstruct: t_star " + std::to_string(cfg.t_star) + " outside [1, " +
                         std::to_string(s.steps()) + "]");
    }
    Rng rng(cfg.seed);
    Tensor x = forward_marginal_sample(x0, cfg.t_star, s, Tensor::randn(x0.shape(), rng));
    const std::size_t quiet = cfg.deterministic_tail ? std::max<std::size_t>(cfg.tail_steps, 1) : 1;
    for (std::size_t t = cfg.t_star; t >= 1; --t) {
        Tensor eps_hat = model(x, t);
        if (eps_hat.shape() != x.shape()) {
            throw ShapeError("reconstruct: model output " + to_string(eps_hat.shape()) + " does not match input " +
                             to_string(x.shape()));
        }
        Tensor noise = t > quiet ? Tensor::randn(x.shape(), rng) : Tensor();
        x = reverse_step(x, t, eps_hat, s, noise);
    }
    return x;
}

namespace detail {

// Noise for a batch where item n draws from its own stream.
inline Tensor per_item_randn(const Shape& shape, std::vector<Rng>& rngs) {
    Shape item(shape.begin() + 1, shape.end());
    item.insert(item.begin(), 1);
    std::vector<float> v;
    v.reserve(numel(shape));
    for (auto& r : rngs) {
        auto t = Tensor::randn(item, r);
        v.insert(v.end(), t.data().begin(), t.data().end());
    }
    return Tensor(shape, std::move(v));
}

}  // namespace detail

/// Batched form of reconstruct(): item n of x0 [N,...] uses its own noise
/// stream seeded with seeds[n], so every item gets the same noise it would
/// get from reconstruct() on its own with seed = seeds[n].
inline Tensor reconstruct_batch(const Tensor& x0, const NoisePredictor& model, const NoiseSchedule& s,
                                const ReconstructionConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    if (x0.rank() < 2 || seeds.size() != x0.extent(0)) {
        throw ValueError("reconstruct_batch: need one seed per batch item");
    }
    if (cfg.t_star < 1 || cfg.t_star > s.steps()) {
        throw ValueError("reconstruct: t_star " + std::to_string(cfg.t_star) + " outside [1, " +
                         std::to_string(s.steps()) + "]");
    }
    std::vector<Rng> rngs;
    for (auto sd : seeds) rngs.emplace_back(sd);
    Tensor x = forward_marginal_sample(x0, cfg.t_star, s, detail::per_item_randn(x0.shape(), rngs));
    const std::size_t quiet = cfg.deterministic_tail ? std::max<std::size_t>(cfg.tail_steps, 1) : 1;
    for (std::size_t t = cfg.t_star; t >= 1; --t) {
        Tensor eps_hat = model(x, t);
        if (eps_hat.shape() != x.shape()) {
            throw ShapeError("reconstruct: model output " + to_string(eps_hat.shape()) + " does not match input " +
                             to_string(x.shape()));
        }
        Tensor noise = t > quiet ? detail::per_item_randn(x.shape(), rngs) : Tensor();
        x = reverse_step(x, t, eps_hat, s, noise);
    }
    return x;
}

/// Full T-step ancestral chain from x_T ~ N(0, I). With `stochastic` false no
/// noise is injected at any step.
inline Tensor unconditional_sample(const NoisePredictor& model, const NoiseSchedule& s, const Shape& shape,
                                   std::uint64_t seed, bool stochastic = true) {
    Rng rng(seed);
    Tensor x = Tensor::randn(shape, rng);
    for (std::size_t t = s.steps(); t >= 1; --t) {
        Tensor eps_hat = model(x, t);
        Tensor noise = (stochastic && t > 1) ? Tensor::randn(shape, rng) : Tensor();
        x = reverse_step(x, t, eps_hat, s, noise);
    }
    return x;
}

}  // namespace diffad
