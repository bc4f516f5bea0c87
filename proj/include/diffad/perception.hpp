#pragma once

#include <cmath>
#include <string>

#include "denoiser.hpp"
#include "ops.hpp"

namespace diffad {

inline constexpr std::size_t kFeatureDim = 64;
inline constexpr std::size_t kPerceptionResolution = 64;
inline constexpr double kPerceptionSlope = 0.1;

/// Frozen feature network f(.): bilinear resize to 64x64, four stride-2 3x3
/// convs (8, 16, 32, 64 channels) with leaky rectification, global average
/// pool to a 64-d vector. Weights never require grad.
template <class T>
class BasicFeatureExtractor {
  public:
    static constexpr std::size_t kStageChannels[4] = {8, 16, 32, 64};

    BasicFeatureExtractor() = default;
    BasicFeatureExtractor(WeightMap<T> weights, std::size_t input_channels)
        : weights_(set_requires_grad(weights, false)), input_channels_(input_channels) {
        std::size_t in = input_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string p = layer_name(i);
            auto w = weights_.find(p + ".weight");
            auto b = weights_.find(p + ".bias");
            const Shape ws{kStageChannels[i], in, 3, 3};
            if (w == weights_.end() || b == weights_.end() || w->second.shape() != ws ||
                b->second.shape() != Shape{kStageChannels[i]}) {
                throw ValueError("feature extractor: missing or misshapen '" + p + "' (expected weight " +
                                 to_string(ws) + ")");
            }
            in = kStageChannels[i];
        }
        if (weights_.size() != 8) throw ValueError("feature extractor: expected exactly 8 tensors");
    }

    static std::string layer_name(std::size_t i) { return "perception.conv" + std::to_string(i); }

    const WeightMap<T>& weights() const noexcept { return weights_; }
    std::size_t input_channels() const noexcept { return input_channels_; }

    /// [N,C,H,W] (or [C,H,W]) -> [N, 64]. Gradients flow to x only.
    BasicTensor<T> extract(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x) const {
        BasicTensor<T> in = x;
        if (x.rank() == 3) in = ops::reshape<T>(tape, x, {1, x.extent(0), x.extent(1), x.extent(2)});
        if (in.rank() != 4) throw ShapeError("extract_features: expected [N,C,H,W] input");
        if (in.extent(1) != input_channels_) {
            throw ShapeError("extract_features: extractor built for " + std::to_string(input_channels_) +
                             " channels, got " + std::to_string(in.extent(1)));
        }
        if (in.extent(2) < 16 || in.extent(3) < 16) {
            throw ShapeError("extract_features: spatial dims must be >= 16, got " + to_string(in.shape()));
        }
        auto h = ops::resize_bilinear<T>(tape, in, kPerceptionResolution, kPerceptionResolution);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string p = layer_name(i);
            h = ops::conv2d<T>(tape, h, weights_.at(p + ".weight"), {2, 1});
            h = ops::bias_add<T>(tape, h, weights_.at(p + ".bias"));
            h = ops::leaky_relu<T>(tape, h, static_cast<T>(kPerceptionSlope));
        }
        return ops::global_avg_pool<T>(tape, h);
    }

  private:
    WeightMap<T> weights_;
    std::size_t input_channels_ = 1;
};

using FeatureExtractor = BasicFeatureExtractor<float>;

/// Seeded random-weight extractor: kernels uniform +-sqrt(6/fan_in), biases
/// uniform +-0.1.
inline FeatureExtractor build_extractor(std::uint64_t seed, std::size_t input_channels) {
    if (input_channels != 1 && input_channels != 3) throw ValueError("build_extractor: input_channels must be 1 or 3");
    Rng rng(seed);
    ModelWeights w;
    std::size_t in = input_channels;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t out = FeatureExtractor::kStageChannels[i];
        const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(in * 9)));
        w.emplace(FeatureExtractor::layer_name(i) + ".weight", Tensor::uniform({out, in, 3, 3}, -bound, bound, rng));
        w.emplace(FeatureExtractor::layer_name(i) + ".bias", Tensor::uniform({out}, -0.1f, 0.1f, rng));
        in = out;
    }
    return FeatureExtractor(std::move(w), input_channels);
}

template <class T>
BasicTensor<T> extract_features(const BasicFeatureExtractor<T>& f, const BasicTensor<T>& x) {
    auto v = f.extract(nullptr, x);
    return x.rank() == 3 ? ops::reshape<T>(nullptr, v, {kFeatureDim}) : v;
}

/// Sum over batch items of ||f(a) - f(b)||^2, as a scalar tensor. Records on
/// `tape` when a or b require grad.
template <class T>
BasicTensor<T> feature_distance(std::type_identity_t<BasicTape<T>>* tape, const BasicFeatureExtractor<T>& f,
                                const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("feature_distance: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    auto fa = f.extract(tape, a);
    auto fb = f.extract(tape, b);
    return ops::sum<T>(tape, ops::square<T>(tape, ops::sub<T>(tape, fa, fb)));
}

/// E_feat for a single pair.
inline double feature_distance(const FeatureExtractor& f, const Tensor& a, const Tensor& b) {
    return static_cast<double>(feature_distance<float>(nullptr, f, a, b).item());
}

}  // namespace diffad
