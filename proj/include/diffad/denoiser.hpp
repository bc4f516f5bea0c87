#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "tape.hpp"
#include "tensor.hpp"
#include "wavelets.hpp"

namespace diffad {

struct ModelConfig {
    std::size_t base_channels = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;  // 0 removes every attention block
    std::size_t head_dim = 8;
    std::size_t wavelet_levels = 2;  // 0 removes the wavelet pyramid branch
    std::string wavelet_filter = "db2";
    std::size_t time_embed_dim = 64;
    std::size_t input_channels = 1;

    void validate() const {
        if (depth < 1) throw ConfigError("model.depth must be >= 1");
        if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
        if (heads > 0 && head_dim < 1) throw ConfigError("model.head_dim must be >= 1");
        if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even");
        if (wavelet_levels > depth) throw ConfigError("model.wavelet_levels must not exceed model.depth");
        if (input_channels != 1 && input_channels != 3) throw ConfigError("model.input_channels must be 1 or 3");
        (void)wavelet_filter_checked();
        for (std::size_t s = 1; s <= depth; ++s) {
            if (heads > 0 && stage_channels(s) % heads != 0) {
                throw ConfigError("attention at stage " + std::to_string(s) + ": " +
                                  std::to_string(stage_channels(s)) + " channels not divisible by " +
                                  std::to_string(heads) + " heads");
            }
        }
    }

    WaveletFilter wavelet_filter_checked() const {
        try {
            return diffad::wavelet_filter(wavelet_filter);
        } catch (const ValueError& e) {
            throw ConfigError(std::string("model.wavelet_filter: ") + e.what());
        }
    }

    /// Channel width of encoder stage s; s == depth is the bottleneck.
    std::size_t stage_channels(std::size_t s) const { return base_channels << s; }
    std::size_t wavelet_channels() const { return std::max<std::size_t>(1, base_channels / 2); }
    std::size_t spatial_multiple() const { return std::size_t{1} << depth; }

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
using WeightMap = std::map<std::string, BasicTensor<T>>;
using ModelWeights = WeightMap<float>;

enum class InitKind { Xavier, Zero };

struct ManifestEntry {
    std::string name;
    Shape shape;
    InitKind init = InitKind::Xavier;
};

namespace detail {

inline void add_conv(std::vector<ManifestEntry>& m, const std::string& name, std::size_t out, std::size_t in,
                     std::size_t k, InitKind init = InitKind::Xavier) {
    m.push_back({name + ".weight", {out, in, k, k}, init});
    m.push_back({name + ".bias", {out}, InitKind::Zero});
}

inline void add_attention(std::vector<ManifestEntry>& m, const std::string& name, const ModelConfig& c,
                          std::size_t channels) {
    for (std::size_t h = 0; h < c.heads; ++h) {
        const std::string p = name + ".head" + std::to_string(h);
        m.push_back({p + ".wq", {channels, c.head_dim}});
        m.push_back({p + ".wk", {channels, c.head_dim}});
        m.push_back({p + ".wv", {channels, c.head_dim}});
    }
    m.push_back({name + ".wo", {c.heads * c.head_dim, channels}});
}

inline void add_time(std::vector<ManifestEntry>& m, const std::string& name, const ModelConfig& c,
                     std::size_t channels) {
    m.push_back({name + ".weight", {c.time_embed_dim, channels}});
    m.push_back({name + ".bias", {channels}, InitKind::Zero});
}

}  // namespace detail

/// Every weight the config implies, with its shape. Names are canonical and
/// unique; checkpoints and optimizers key on them.
inline std::vector<ManifestEntry> layer_manifest(const ModelConfig& c) {
    c.validate();
    std::vector<ManifestEntry> m;
    const std::size_t B = c.base_channels, P = c.wavelet_channels();
    detail::add_conv(m, "adapter.c1", B, 1, 3);
    detail::add_conv(m, "adapter.c3", B, 3, 3);
    m.push_back({"time.conv1d", {1, 1, 3}});
    for (std::size_t s = 0; s < c.depth; ++s) {
        const std::string p = "enc" + std::to_string(s);
        const std::size_t ch = c.stage_channels(s);
        std::size_t in = ch;
        if (s >= 1 && s <= c.wavelet_levels) {
            detail::add_conv(m, p + ".wpm", P, 3 * c.input_channels, 1);
            in += P;
        }
        detail::add_conv(m, p + ".conv1", ch, in, 3);
        detail::add_time(m, p + ".time", c, ch);
        detail::add_conv(m, p + ".conv2", ch, ch, 3);
        detail::add_conv(m, p + ".down", c.stage_channels(s + 1), ch, 3);
        if (c.heads > 0) detail::add_attention(m, p + ".attn", c, c.stage_channels(s + 1));
    }
    {
        const std::size_t ch = c.stage_channels(c.depth);
        std::size_t in = ch;
        if (c.wavelet_levels == c.depth && c.wavelet_levels > 0) {
            detail::add_conv(m, "mid.wpm", P, 3 * c.input_channels, 1);
            in += P;
        }
        detail::add_conv(m, "mid.conv1", ch, in, 3);
        detail::add_time(m, "mid.time", c, ch);
        if (c.heads > 0) detail::add_attention(m, "mid.attn", c, ch);
        detail::add_conv(m, "mid.conv2", ch, ch, 3);
    }
    for (std::size_t s = c.depth; s-- > 0;) {
        const std::string p = "dec" + std::to_string(s);
        const std::size_t ch = c.stage_channels(s);
        if (c.heads > 0) detail::add_attention(m, p + ".attn", c, c.stage_channels(s + 1));
        detail::add_conv(m, p + ".up", ch, c.stage_channels(s + 1), 3);
        detail::add_conv(m, p + ".conv1", ch, 2 * ch, 3);
        detail::add_time(m, p + ".time", c, ch);
        detail::add_conv(m, p + ".conv2", ch, ch, 3);
    }
    detail::add_conv(m, "out.c1", 1, B, 3, InitKind::Zero);
    detail::add_conv(m, "out.c3", 3, B, 3, InitKind::Zero);
    return m;
}

/// Throws unless `w` holds exactly the manifest's names with matching shapes.
template <class T>
void validate_weights(const ModelConfig& c, const WeightMap<T>& w) {
    auto manifest = layer_manifest(c);
    if (manifest.size() != w.size()) {
        throw ValueError("weights: expected " + std::to_string(manifest.size()) + " tensors, found " +
                         std::to_string(w.size()));
    }
    for (const auto& e : manifest) {
        auto it = w.find(e.name);
        if (it == w.end()) throw ValueError("weights: missing '" + e.name + "'");
        if (it->second.shape() != e.shape) {
            throw ValueError("weights: '" + e.name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                             to_string(e.shape));
        }
    }
}

/// Uniform +-sqrt(6 / (fan_in + fan_out)) per kernel, drawn in manifest order
/// from one seeded stream; biases and the output head start at zero.
inline ModelWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    ModelWeights w;
    for (const auto& e : layer_manifest(c)) {
        if (e.init == InitKind::Zero) {
            w.emplace(e.name, Tensor::zeros(e.shape));
            continue;
        }
        double fan_in, fan_out;
        if (e.shape.size() == 4 || e.shape.size() == 3) {
            double rf = 1;
            for (std::size_t i = 2; i < e.shape.size(); ++i) rf *= static_cast<double>(e.shape[i]);
            fan_in = static_cast<double>(e.shape[1]) * rf;
            fan_out = static_cast<double>(e.shape[0]) * rf;
        } else {
            fan_in = static_cast<double>(e.shape[0]);
            fan_out = static_cast<double>(e.shape[1]);
        }
        const float bound = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
        w.emplace(e.name, Tensor::uniform(e.shape, -bound, bound, rng));
    }
    return w;
}

template <class T>
WeightMap<T> set_requires_grad(const WeightMap<T>& w, bool on) {
    WeightMap<T> out;
    for (const auto& [k, v] : w) out.emplace(k, v.as_leaf(on));
    return out;
}

template <class U, class T>
WeightMap<U> cast_weights(const WeightMap<T>& w) {
    WeightMap<U> out;
    for (const auto& [k, v] : w) out.emplace(k, v.template cast<U>());
    return out;
}

template <class T>
std::uint64_t weights_hash(const WeightMap<T>& w) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : w) {
        for (char ch : k) {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ULL;
        }
        h = hash_values(v, h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Time embedding
// ---------------------------------------------------------------------------

/// First half sin(t / 10000^(2i/dim)), second half cos of the same angles.
template <class T = float>
BasicTensor<T> sinusoidal_encoding(std::size_t t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw ValueError("sinusoidal_encoding: dim must be even, got " + std::to_string(dim));
    const std::size_t half = dim / 2;
    std::vector<T> v(dim);
    for (std::size_t i = 0; i < half; ++i) {
        double angle = static_cast<double>(t) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
        v[i] = static_cast<T>(std::sin(angle));
        v[half + i] = static_cast<T>(std::cos(angle));
    }
    return BasicTensor<T>({dim}, std::move(v));
}

/// Conv1D(Sinusoidal(t)) per batch item -> [N, dim]. Same padding.
template <class T>
BasicTensor<T> hybrid_time_embedding(std::type_identity_t<BasicTape<T>>* tape, const std::vector<std::size_t>& steps,
                                     std::size_t dim, const BasicTensor<T>& kernel) {
    if (kernel.empty() || kernel.rank() != 3 || kernel.extent(0) != 1 || kernel.extent(1) != 1) {
        throw ValueError("hybrid_time_embedding: expected a [1,1,K] kernel");
    }
    const std::size_t K = kernel.extent(2);
    if (K % 2 == 0) throw ValueError("hybrid_time_embedding: kernel length must be odd for same padding");
    std::vector<T> seq;
    seq.reserve(steps.size() * dim);
    for (auto t : steps) {
        auto e = sinusoidal_encoding<T>(t, dim);
        seq.insert(seq.end(), e.data().begin(), e.data().end());
    }
    BasicTensor<T> x({steps.size(), 1, dim}, std::move(seq));
    auto y = ops::conv1d<T>(tape, x, kernel, K / 2);
    return ops::reshape<T>(tape, y, {steps.size(), dim});
}

template <class T>
BasicTensor<T> hybrid_time_embedding(std::type_identity_t<BasicTape<T>>* tape, const std::vector<std::size_t>& steps,
                                     std::size_t dim, const WeightMap<T>& w) {
    auto it = w.find("time.conv1d");
    if (it == w.end()) throw ValueError("hybrid_time_embedding: weights lack 'time.conv1d'");
    return hybrid_time_embedding<T>(tape, steps, dim, it->second);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

template <class T>
struct AttentionWeights {
    std::vector<BasicTensor<T>> wq, wk, wv;  // one [C, d_k] per head
    BasicTensor<T> wo;                       // [h*d_k, C]
};

template <class T>
AttentionWeights<T> attention_weights(const WeightMap<T>& w, const std::string& name, std::size_t heads) {
    AttentionWeights<T> a;
    for (std::size_t h = 0; h < heads; ++h) {
        const std::string p = name + ".head" + std::to_string(h);
        a.wq.push_back(w.at(p + ".wq"));
        a.wk.push_back(w.at(p + ".wk"));
        a.wv.push_back(w.at(p + ".wv"));
    }
    a.wo = w.at(name + ".wo");
    return a;
}

/// Concat(head_1..head_h) W^O with head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i.
/// F is [tokens, C]; carries no positional information of its own.
template <class T>
BasicTensor<T> multi_head_attention(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& F,
                                    const AttentionWeights<T>& a) {
    if (F.rank() != 2) throw ShapeError("multi_head_attention: expected [tokens, C] input");
    if (a.wq.empty()) throw ValueError("multi_head_attention: no heads");
    const std::size_t dk = a.wq[0].extent(1);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<BasicTensor<T>> heads;
    for (std::size_t h = 0; h < a.wq.size(); ++h) {
        auto q = ops::matmul<T>(tape, F, a.wq[h]);
        auto k = ops::matmul<T>(tape, F, a.wk[h]);
        auto v = ops::matmul<T>(tape, F, a.wv[h]);
        auto scores = ops::scale<T>(tape, ops::matmul<T>(tape, q, ops::transpose<T>(tape, k)), inv_sqrt);
        auto p = ops::softmax<T>(tape, scores, 1);
        heads.push_back(ops::matmul<T>(tape, p, v));
    }
    auto cat = heads.size() == 1 ? heads[0] : ops::concat<T>(tape, heads, 1);
    return ops::matmul<T>(tape, cat, a.wo);
}

/// Residual attention over the spatial positions of each sample of [N,C,H,W].
template <class T>
BasicTensor<T> spatial_attention(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x,
                                 const AttentionWeights<T>& a) {
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    std::vector<BasicTensor<T>> outs;
    for (std::size_t n = 0; n < N; ++n) {
        auto xs = N == 1 ? x : ops::slice<T>(tape, x, 0, n, 1);
        auto tokens = ops::transpose<T>(tape, ops::reshape<T>(tape, xs, {C, H * W}));
        auto att = multi_head_attention<T>(tape, tokens, a);
        outs.push_back(ops::reshape<T>(tape, ops::transpose<T>(tape, att), {1, C, H, W}));
    }
    auto att = N == 1 ? outs[0] : ops::concat<T>(tape, outs, 0);
    return ops::add<T>(tape, x, att);
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
BasicTensor<T> conv_layer(BasicTape<T>* tape, const WeightMap<T>& w, const std::string& name, const BasicTensor<T>& x,
                          std::size_t stride = 1) {
    const auto& k = w.at(name + ".weight");
    ops::Conv2dOptions opt{stride, k.extent(2) / 2};
    return ops::bias_add<T>(tape, ops::conv2d<T>(tape, x, k, opt), w.at(name + ".bias"));
}

template <class T>
BasicTensor<T> time_bias(BasicTape<T>* tape, const WeightMap<T>& w, const std::string& name,
                         const BasicTensor<T>& emb) {
    return ops::bias_add<T>(tape, ops::matmul<T>(tape, emb, w.at(name + ".weight")), w.at(name + ".bias"));
}

}  // namespace detail

/// Maps 1-channel (grayscale, scalogram) or 3-channel (RGB) input onto the
/// shared base_channels representation with a 3x3 same-padding conv.
template <class T>
BasicTensor<T> input_adapter(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x,
                             const WeightMap<T>& w) {
    if (x.rank() != 4) throw ShapeError("input_adapter: expected [N,C,H,W] input");
    const std::size_t c = x.extent(1);
    if (c != 1 && c != 3) {
        throw ValueError("input_adapter: unsupported channel count " + std::to_string(c) + " (expected 1 or 3)");
    }
    return detail::conv_layer<T>(tape, w, "adapter.c" + std::to_string(c), x);
}

/// Detail bands of every (sample, channel) plane per pyramid level:
/// result[l-1] is [N, 3C, H/2^l, W/2^l] ordered (c, band).
template <class T>
std::vector<BasicTensor<T>> wavelet_detail_features(const BasicTensor<T>& x, const WaveletFilter& f,
                                                    std::size_t levels) {
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    std::vector<std::vector<T>> data(levels);
    std::vector<Shape> shapes(levels);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = x.data().data() + (n * C + c) * H * W;
            BasicTensor<T> plane({H, W}, std::vector<T>(src, src + H * W));
            auto pyr = wavelet_pyramid(plane, f, levels);
            for (std::size_t l = 0; l < levels; ++l) {
                for (const auto& d : pyr.levels[l].details) {
                    data[l].insert(data[l].end(), d.data().begin(), d.data().end());
                }
                const auto& s = pyr.levels[l].approx.shape();
                shapes[l] = {N, 3 * C, s[0], s[1]};
            }
        }
    }
    std::vector<BasicTensor<T>> out;
    for (std::size_t l = 0; l < levels; ++l) out.emplace_back(shapes[l], std::move(data[l]));
    return out;
}

// ---------------------------------------------------------------------------
// U-Net noise predictor
// ---------------------------------------------------------------------------

template <class T>
class BasicDenoiser {
  public:
    BasicDenoiser() = default;
    BasicDenoiser(ModelConfig config, WeightMap<T> weights) : config_(std::move(config)), weights_(std::move(weights)) {
        validate_weights(config_, weights_);
        filter_ = config_.wavelet_filter_checked();
    }

    const ModelConfig& config() const noexcept { return config_; }
    const WeightMap<T>& weights() const noexcept { return weights_; }
    void set_weights(WeightMap<T> w) {
        validate_weights(config_, w);
        weights_ = std::move(w);
    }

    /// eps_hat for x_t [N,C,H,W] with one timestep per batch item.
    BasicTensor<T> predict(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x,
                           const std::vector<std::size_t>& steps) const {
        const auto& c = config_;
        const auto& w = weights_;
        if (x.rank() != 4) throw ShapeError("predict_noise: expected [N,C,H,W] input, got " + to_string(x.shape()));
        if (x.extent(1) != c.input_channels) {
            throw ShapeError("predict_noise: model expects " + std::to_string(c.input_channels) + " channels, got " +
                             std::to_string(x.extent(1)));
        }
        const std::size_t mult = c.spatial_multiple();
        if (x.extent(2) % mult != 0 || x.extent(3) % mult != 0) {
            throw ShapeError("predict_noise: spatial dims " + std::to_string(x.extent(2)) + "x" +
                             std::to_string(x.extent(3)) + " must be multiples of " + std::to_string(mult));
        }
        if (steps.size() != x.extent(0)) throw ShapeError("predict_noise: need one timestep per batch item");

        auto emb = hybrid_time_embedding<T>(tape, steps, c.time_embed_dim, w);
        std::vector<BasicTensor<T>> wpm;
        if (c.wavelet_levels > 0) wpm = wavelet_detail_features(x, filter_, c.wavelet_levels);

        auto h = input_adapter<T>(tape, x, w);
        std::vector<BasicTensor<T>> skips;
        for (std::size_t s = 0; s < c.depth; ++s) {
            const std::string p = "enc" + std::to_string(s);
            h = stage_block(tape, p, inject(tape, p, h, wpm, s), emb);
            skips.push_back(h);
            h = ops::silu<T>(tape, detail::conv_layer<T>(tape, w, p + ".down", h, 2));
            if (c.heads > 0) h = spatial_attention<T>(tape, h, attention_weights(w, p + ".attn", c.heads));
        }
        {
            auto in = inject(tape, "mid", h, wpm, c.depth);
            h = ops::silu<T>(tape, ops::bias_add<T>(tape, detail::conv_layer<T>(tape, w, "mid.conv1", in),
                                                    broadcast_time(tape, "mid.time", emb)));
            if (c.heads > 0) h = spatial_attention<T>(tape, h, attention_weights(w, "mid.attn", c.heads));
            h = ops::silu<T>(tape, detail::conv_layer<T>(tape, w, "mid.conv2", h));
        }
        for (std::size_t s = c.depth; s-- > 0;) {
            const std::string p = "dec" + std::to_string(s);
            if (c.heads > 0) h = spatial_attention<T>(tape, h, attention_weights(w, p + ".attn", c.heads));
            h = ops::silu<T>(tape,
                             detail::conv_layer<T>(tape, w, p + ".up", ops::upsample_nearest2x<T>(tape, h)));
            h = stage_block(tape, p, ops::concat<T>(tape, {h, skips[s]}, 1), emb);
        }
        return detail::conv_layer<T>(tape, w, "out.c" + std::to_string(c.input_channels), h);
    }

    BasicTensor<T> predict(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x, std::size_t t) const {
        return predict(tape, x, std::vector<std::size_t>(x.rank() == 4 ? x.extent(0) : 1, t));
    }

  private:
    // Per-stage linear map of the embedding, as a per-(sample, channel) bias.
    BasicTensor<T> broadcast_time(BasicTape<T>* tape, const std::string& name, const BasicTensor<T>& emb) const {
        return detail::time_bias<T>(tape, weights_, name, emb);
    }

    // conv1 + time bias -> SiLU -> conv2 -> SiLU
    BasicTensor<T> stage_block(BasicTape<T>* tape, const std::string& p, const BasicTensor<T>& in,
                               const BasicTensor<T>& emb) const {
        auto h = detail::conv_layer<T>(tape, weights_, p + ".conv1", in);
        h = ops::bias_add<T>(tape, h, broadcast_time(tape, p + ".time", emb));
        h = ops::silu<T>(tape, h);
        return ops::silu<T>(tape, detail::conv_layer<T>(tape, weights_, p + ".conv2", h));
    }

    // Concatenates the 1x1-projected detail bands of level `level` when that
    // level feeds this stage.
    BasicTensor<T> inject(BasicTape<T>* tape, const std::string& p, const BasicTensor<T>& h,
                          const std::vector<BasicTensor<T>>& wpm, std::size_t level) const {
        if (level < 1 || level > wpm.size()) return h;
        auto proj = detail::conv_layer<T>(tape, weights_, p + ".wpm", wpm[level - 1]);
        return ops::concat<T>(tape, {h, proj}, 1);
    }

    ModelConfig config_;
    WeightMap<T> weights_;
    WaveletFilter filter_;
};

using Denoiser = BasicDenoiser<float>;

inline Denoiser make_denoiser(const ModelConfig& c, std::uint64_t seed) { return Denoiser(c, init_weights(c, seed)); }

/// Inference-mode eps_hat(x_t, t).
inline Tensor predict_noise(const Denoiser& model, const Tensor& x_t, std::size_t t) {
    return model.predict(nullptr, x_t, t);
}

}  // namespace diffad
