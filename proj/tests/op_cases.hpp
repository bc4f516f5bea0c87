// Finite-difference cases for every differentiable op, shared by the unit
// suite and the acceptance runner. Each case reduces the op output with a
// fixed random weighting so every output element contributes.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffad/diffad.hpp"

namespace diffad::testing {

using D = double;
using T64 = BasicTensor<D>;
using Fn = std::function<T64(BasicTape<D>*, const std::vector<T64>&)>;

struct OpCase {
    std::string name;
    std::vector<T64> inputs;
    Fn fn;
};

inline T64 weighted_sum(BasicTape<D>* tape, const T64& y, std::uint64_t seed) {
    Rng r(seed);
    auto w = T64::uniform(y.shape(), -1.0, 1.0, r);
    return ops::sum<D>(tape, ops::mul<D>(tape, y, w));
}

inline T64 away_from_zero(const Shape& s, Rng& r, double lo, double hi) {
    auto u = T64::uniform(s, lo, hi, r);
    std::vector<D> v = u.values();
    std::bernoulli_distribution sign(0.5);
    for (auto& x : v) x = sign(r) ? x : -x;
    return T64(s, v);
}

inline std::vector<OpCase> op_cases(std::uint64_t seed = 17) {
    Rng r(seed);
    auto rn = [&](Shape s) { return T64::randn(std::move(s), r); };
    std::vector<OpCase> c;
    auto unary = [&](std::string name, T64 x, std::function<T64(BasicTape<D>*, const T64&)> f) {
        c.push_back({std::move(name), {std::move(x)}, [f](BasicTape<D>* t, const std::vector<T64>& p) {
                         return weighted_sum(t, f(t, p[0]), 1);
                     }});
    };
    auto binary = [&](std::string name, T64 a, T64 b, std::function<T64(BasicTape<D>*, const T64&, const T64&)> f) {
        c.push_back({std::move(name), {std::move(a), std::move(b)}, [f](BasicTape<D>* t, const std::vector<T64>& p) {
                         return weighted_sum(t, f(t, p[0], p[1]), 2);
                     }});
    };

    binary("add", rn({3, 4}), rn({3, 4}), [](auto* t, auto& a, auto& b) { return ops::add<D>(t, a, b); });
    binary("sub", rn({3, 4}), rn({3, 4}), [](auto* t, auto& a, auto& b) { return ops::sub<D>(t, a, b); });
    binary("mul", rn({3, 4}), rn({3, 4}), [](auto* t, auto& a, auto& b) { return ops::mul<D>(t, a, b); });
    binary("div", rn({3, 4}), away_from_zero({3, 4}, r, 0.5, 2.0),
           [](auto* t, auto& a, auto& b) { return ops::div<D>(t, a, b); });
    unary("add_scalar", rn({5}), [](auto* t, auto& a) { return ops::add_scalar<D>(t, a, 0.7); });
    unary("scale", rn({5}), [](auto* t, auto& a) { return ops::scale<D>(t, a, -1.3); });
    unary("div_scalar", rn({5}), [](auto* t, auto& a) { return ops::div_scalar<D>(t, a, 2.5); });
    unary("sqrt", T64::uniform({6}, 0.5, 3.0, r), [](auto* t, auto& a) { return ops::sqrt<D>(t, a); });
    unary("square", rn({6}), [](auto* t, auto& a) { return ops::square<D>(t, a); });
    unary("silu", rn({2, 5}), [](auto* t, auto& a) { return ops::silu<D>(t, a); });
    unary("leaky_relu", away_from_zero({2, 5}, r, 0.05, 2.0), [](auto* t, auto& a) { return ops::leaky_relu<D>(t, a, 0.1); });
    c.push_back({"sum", {rn({3, 3})}, [](BasicTape<D>* t, const std::vector<T64>& p) {
                     return ops::square<D>(t, ops::sum<D>(t, p[0]));
                 }});
    c.push_back({"mean", {rn({3, 3})}, [](BasicTape<D>* t, const std::vector<T64>& p) {
                     return ops::square<D>(t, ops::mean<D>(t, p[0]));
                 }});
    binary("matmul", rn({3, 4}), rn({4, 2}), [](auto* t, auto& a, auto& b) { return ops::matmul<D>(t, a, b); });
    unary("transpose", rn({3, 4}), [](auto* t, auto& a) { return ops::transpose<D>(t, a); });
    unary("reshape", rn({3, 4}), [](auto* t, auto& a) { return ops::reshape<D>(t, a, {2, 6}); });
    unary("slice", rn({2, 5, 3}), [](auto* t, auto& a) { return ops::slice<D>(t, a, 1, 1, 3); });
    binary("concat", rn({2, 3, 2}), rn({2, 1, 2}),
           [](auto* t, auto& a, auto& b) { return ops::concat<D>(t, {a, b}, 1); });
    unary("softmax", rn({3, 4}), [](auto* t, auto& a) { return ops::softmax<D>(t, a, 1); });
    binary("conv2d", rn({2, 2, 5, 5}), rn({3, 2, 3, 3}),
           [](auto* t, auto& x, auto& k) { return ops::conv2d<D>(t, x, k, {1, 1}); });
    binary("conv2d_stride2", rn({1, 2, 6, 6}), rn({2, 2, 3, 3}),
           [](auto* t, auto& x, auto& k) { return ops::conv2d<D>(t, x, k, {2, 1}); });
    binary("conv2d_1x1", rn({1, 3, 4, 4}), rn({2, 3, 1, 1}),
           [](auto* t, auto& x, auto& k) { return ops::conv2d<D>(t, x, k, {1, 0}); });
    binary("conv1d", rn({2, 2, 7}), rn({3, 2, 3}), [](auto* t, auto& x, auto& k) { return ops::conv1d<D>(t, x, k, 1); });
    binary("bias_add_c", rn({2, 3, 2, 2}), rn({3}), [](auto* t, auto& x, auto& b) { return ops::bias_add<D>(t, x, b); });
    binary("bias_add_nc", rn({2, 3, 2, 2}), rn({2, 3}),
           [](auto* t, auto& x, auto& b) { return ops::bias_add<D>(t, x, b); });
    unary("global_avg_pool", rn({2, 3, 3, 3}), [](auto* t, auto& a) { return ops::global_avg_pool<D>(t, a); });
    unary("upsample_nearest2x", rn({1, 2, 3, 3}), [](auto* t, auto& a) { return ops::upsample_nearest2x<D>(t, a); });
    unary("resize_bilinear_up", rn({1, 2, 3, 4}), [](auto* t, auto& a) { return ops::resize_bilinear<D>(t, a, 7, 5); });
    unary("resize_bilinear_down", rn({1, 1, 8, 8}),
          [](auto* t, auto& a) { return ops::resize_bilinear<D>(t, a, 3, 5); });
    return c;
}

/// Tiny denoiser config used for whole-model gradient checks.
inline ModelConfig tiny_model_config() {
    ModelConfig c;
    c.base_channels = 2;
    c.depth = 1;
    c.heads = 1;
    c.head_dim = 2;
    c.wavelet_levels = 1;
    c.wavelet_filter = "haar";
    c.time_embed_dim = 4;
    c.input_channels = 1;
    return c;
}

/// Runs a finite-difference check of sum(predict(x, t) * R) over every weight
/// of the tiny model in double precision. Zero-initialized output heads are
/// re-seeded so gradients reach the whole network.
inline GradCheckReport tiny_model_grad_check(double eps, std::size_t max_per_param = 0) {
    const auto cfg = tiny_model_config();
    auto w32 = init_weights(cfg, 5);
    Rng r(9);
    for (auto& [name, t] : w32) {
        if (name.rfind("out.", 0) == 0 || name.find(".bias") != std::string::npos) {
            t = Tensor::uniform(t.shape(), -0.3f, 0.3f, r);
        }
    }
    auto w = cast_weights<D>(w32);
    std::vector<std::string> names;
    std::vector<T64> params;
    for (const auto& [n, t] : w) {
        names.push_back(n);
        params.push_back(t);
    }
    const T64 x = T64::randn({1, 1, 8, 8}, r);
    const std::vector<std::size_t> steps{3};
    Fn fn = [&](BasicTape<D>* tape, const std::vector<T64>& ps) {
        WeightMap<D> m;
        for (std::size_t i = 0; i < ps.size(); ++i) m.emplace(names[i], ps[i]);
        BasicDenoiser<D> model(cfg, std::move(m));
        return weighted_sum(tape, model.predict(tape, x, steps), 3);
    };
    return grad_check_params<D>(fn, params, eps, max_per_param);
}

}  // namespace diffad::testing
