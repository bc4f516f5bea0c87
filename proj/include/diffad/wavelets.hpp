#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace diffad {

// ---------------------------------------------------------------------------
// Orthonormal filter banks
// ---------------------------------------------------------------------------

struct WaveletFilter {
    std::string name;
    std::vector<double> lowpass;
    std::vector<double> highpass;

    std::size_t length() const { return lowpass.size(); }
};

/// Quadrature-mirror highpass: g[n] = (-1)^n h[L-1-n].
inline std::vector<double> qmf_highpass(const std::vector<double>& lowpass) {
    const std::size_t L = lowpass.size();
    std::vector<double> g(L);
    for (std::size_t n = 0; n < L; ++n) g[n] = ((n % 2) ? -1.0 : 1.0) * lowpass[L - 1 - n];
    return g;
}

/// Daubechies filters by name: "haar" (alias "db1"), "db2", "db3", "db4".
/// dbN has N vanishing moments and 2N taps.
inline WaveletFilter wavelet_filter(const std::string& name) {
    std::vector<double> h;
    if (name == "haar" || name == "db1") {
        h = {std::numbers::sqrt2 / 2, std::numbers::sqrt2 / 2};
    } else if (name == "db2") {
        h = {0.48296291314469025, 0.836516303737469, 0.22414386804185735, -0.12940952255092145};
    } else if (name == "db3") {
        h = {0.3326705529509569,   0.8068915093133388,   0.4598775021193313,
             -0.13501102001039084, -0.08544127388224149, 0.035226291882100656};
    } else if (name == "db4") {
        h = {0.23037781330885523,  0.7148465705525415,   0.6308807679295904,   -0.02798376941698385,
             -0.18703481171888114, 0.030841381835986965, 0.032883011666982945, -0.010597401784997278};
    } else {
        throw ValueError("unknown wavelet filter '" + name + "' (expected haar, db1, db2, db3 or db4)");
    }
    return WaveletFilter{name == "db1" ? "haar" : name, h, qmf_highpass(h)};
}

// ---------------------------------------------------------------------------
// Discrete transform
// ---------------------------------------------------------------------------

namespace detail {

// One analysis step along a strided line of length n. Odd lengths are
// extended by repeating the last sample (half-sample symmetric pad); the
// padded line is then periodized so the transform stays orthogonal.
inline void analyze_line(const double* x, std::size_t n, std::size_t stride, const WaveletFilter& f, double* lo,
                         double* hi, std::size_t out_stride) {
    const std::size_t m = n + (n % 2);
    const std::size_t half = m / 2;
    auto at = [&](std::size_t i) { return x[std::min(i % m, n - 1) * stride]; };
    for (std::size_t k = 0; k < half; ++k) {
        double a = 0, d = 0;
        for (std::size_t t = 0; t < f.length(); ++t) {
            double v = at(2 * k + t);
            a += f.lowpass[t] * v;
            d += f.highpass[t] * v;
        }
        lo[k * out_stride] = a;
        hi[k * out_stride] = d;
    }
}

// Inverse of analyze_line; writes the first n samples of the padded line.
inline void synthesize_line(const double* lo, const double* hi, std::size_t in_stride, std::size_t n,
                            const WaveletFilter& f, double* x, std::size_t stride) {
    const std::size_t m = n + (n % 2);
    const std::size_t half = m / 2;
    std::vector<double> buf(m, 0.0);
    for (std::size_t k = 0; k < half; ++k) {
        const double a = lo[k * in_stride], d = hi[k * in_stride];
        for (std::size_t t = 0; t < f.length(); ++t) buf[(2 * k + t) % m] += f.lowpass[t] * a + f.highpass[t] * d;
    }
    for (std::size_t i = 0; i < n; ++i) x[i * stride] = buf[i];
}

template <class T>
BasicTensor<T> from_doubles(Shape shape, const std::vector<double>& v) {
    return BasicTensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

}  // namespace detail

/// Single-level transform result. `details` holds one band for 1-D input and
/// the horizontal, vertical, diagonal bands (in that order) for 2-D input.
template <class T>
struct DwtBands {
    BasicTensor<T> approx;
    std::vector<BasicTensor<T>> details;
};

template <class T>
DwtBands<T> dwt(const BasicTensor<T>& x, const WaveletFilter& f) {
    if (x.rank() == 1) {
        const std::size_t n = x.extent(0);
        if (n < f.length()) {
            throw ShapeError("dwt: input length " + std::to_string(n) + " shorter than filter " + f.name);
        }
        std::vector<double> in(x.data().begin(), x.data().end());
        const std::size_t half = (n + 1) / 2;
        std::vector<double> lo(half), hi(half);
        detail::analyze_line(in.data(), n, 1, f, lo.data(), hi.data(), 1);
        return {detail::from_doubles<T>({half}, lo), {detail::from_doubles<T>({half}, hi)}};
    }
    if (x.rank() == 2) {
        const std::size_t H = x.extent(0), W = x.extent(1);
        if (H < f.length() || W < f.length()) {
            throw ShapeError("dwt: input " + to_string(x.shape()) + " smaller than filter " + f.name);
        }
        const std::size_t hw = (W + 1) / 2, hh = (H + 1) / 2;
        std::vector<double> in(x.data().begin(), x.data().end());
        // Rows: L and H along the width axis.
        std::vector<double> rl(H * hw), rh(H * hw);
        for (std::size_t r = 0; r < H; ++r)
            detail::analyze_line(in.data() + r * W, W, 1, f, rl.data() + r * hw, rh.data() + r * hw, 1);
        // Columns.
        std::vector<double> ll(hh * hw), lh(hh * hw), hl(hh * hw), hhb(hh * hw);
        for (std::size_t c = 0; c < hw; ++c) {
            detail::analyze_line(rl.data() + c, H, hw, f, ll.data() + c, lh.data() + c, hw);
            detail::analyze_line(rh.data() + c, H, hw, f, hl.data() + c, hhb.data() + c, hw);
        }
        // Horizontal detail: lowpass across width, highpass down the columns.
        return {detail::from_doubles<T>({hh, hw}, ll),
                {detail::from_doubles<T>({hh, hw}, lh), detail::from_doubles<T>({hh, hw}, hl),
                 detail::from_doubles<T>({hh, hw}, hhb)}};
    }
    throw ShapeError("dwt: expected rank-1 or rank-2 input, got " + to_string(x.shape()));
}

/// Inverse of dwt; `shape` is the original (pre-transform) shape.
template <class T>
BasicTensor<T> idwt(const DwtBands<T>& bands, const WaveletFilter& f, const Shape& shape) {
    if (shape.size() == 1) {
        if (bands.details.size() != 1) throw ShapeError("idwt: 1-D reconstruction needs one detail band");
        const std::size_t n = shape[0];
        if (bands.approx.size() != (n + 1) / 2 || bands.details[0].size() != (n + 1) / 2) {
            throw ShapeError("idwt: band length does not match target length " + std::to_string(n));
        }
        std::vector<double> lo(bands.approx.data().begin(), bands.approx.data().end());
        std::vector<double> hi(bands.details[0].data().begin(), bands.details[0].data().end());
        std::vector<double> out(n);
        detail::synthesize_line(lo.data(), hi.data(), 1, n, f, out.data(), 1);
        return detail::from_doubles<T>(shape, out);
    }
    if (shape.size() == 2) {
        if (bands.details.size() != 3) throw ShapeError("idwt: 2-D reconstruction needs three detail bands");
        const std::size_t H = shape[0], W = shape[1], hh = (H + 1) / 2, hw = (W + 1) / 2;
        const Shape band{hh, hw};
        if (bands.approx.shape() != band) throw ShapeError("idwt: approximation band has wrong shape");
        for (const auto& d : bands.details) {
            if (d.shape() != band) throw ShapeError("idwt: detail band has wrong shape");
        }
        auto as_d = [](const BasicTensor<T>& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
        auto ll = as_d(bands.approx), lh = as_d(bands.details[0]), hl = as_d(bands.details[1]),
             hhb = as_d(bands.details[2]);
        std::vector<double> rl(H * hw), rh(H * hw);
        for (std::size_t c = 0; c < hw; ++c) {
            detail::synthesize_line(ll.data() + c, lh.data() + c, hw, H, f, rl.data() + c, hw);
            detail::synthesize_line(hl.data() + c, hhb.data() + c, hw, H, f, rh.data() + c, hw);
        }
        std::vector<double> out(H * W);
        for (std::size_t r = 0; r < H; ++r)
            detail::synthesize_line(rl.data() + r * hw, rh.data() + r * hw, 1, W, f, out.data() + r * W, 1);
        return detail::from_doubles<T>(shape, out);
    }
    throw ShapeError("idwt: expected rank-1 or rank-2 target shape");
}

// ---------------------------------------------------------------------------
// Pyramid
// ---------------------------------------------------------------------------

template <class T>
struct PyramidLevel {
    Shape input_shape;  // extents of the signal this level decomposed
    BasicTensor<T> approx;
    std::vector<BasicTensor<T>> details;
};

template <class T>
struct WaveletPyramid {
    std::string filter_name;
    Shape original_shape;
    std::vector<PyramidLevel<T>> levels;
};

/// Deepest legal level count for `shape` under filter `f`.
inline std::size_t max_pyramid_levels(const Shape& shape, const WaveletFilter& f) {
    if (shape.empty()) return 0;
    std::size_t min_extent = *std::min_element(shape.begin(), shape.end());
    std::size_t log_cap = 0;
    while ((std::size_t{1} << (log_cap + 1)) <= min_extent) ++log_cap;
    std::size_t levels = 0;
    std::size_t e = min_extent;
    while (levels < log_cap && e >= f.length()) {
        ++levels;
        e = (e + 1) / 2;
    }
    return levels;
}

template <class T>
WaveletPyramid<T> wavelet_pyramid(const BasicTensor<T>& x, const WaveletFilter& f, std::size_t levels) {
    const std::size_t cap = max_pyramid_levels(x.shape(), f);
    if (levels < 1 || levels > cap) {
        throw ValueError("wavelet_pyramid: " + std::to_string(levels) + " levels requested for shape " +
                         to_string(x.shape()) + " with " + f.name + "; maximum is " + std::to_string(cap));
    }
    WaveletPyramid<T> p{f.name, x.shape(), {}};
    BasicTensor<T> cur = x;
    for (std::size_t l = 0; l < levels; ++l) {
        auto bands = dwt(cur, f);
        p.levels.push_back({cur.shape(), bands.approx, bands.details});
        cur = bands.approx;
    }
    return p;
}

/// Inverts wavelet_pyramid. Only the deepest approximation band is used;
/// intermediate approximations are regenerated from the details.
template <class T>
BasicTensor<T> pyramid_reconstruct(const WaveletPyramid<T>& p, const WaveletFilter& f) {
    if (p.filter_name != f.name) {
        throw ValueError("pyramid_reconstruct: pyramid built with '" + p.filter_name + "' but filter is '" + f.name +
                         "'");
    }
    if (p.levels.empty()) throw ValueError("pyramid_reconstruct: empty pyramid");
    BasicTensor<T> cur = p.levels.back().approx;
    for (std::size_t l = p.levels.size(); l-- > 0;) {
        const auto& lv = p.levels[l];
        cur = idwt(DwtBands<T>{cur, lv.details}, f, lv.input_shape);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Continuous transform (Morlet)
// ---------------------------------------------------------------------------

inline constexpr double kMorletOmega0 = 6.0;

/// Scale in seconds whose Morlet centre frequency is `freq_hz`.
inline double scale_for_frequency(double freq_hz) { return kMorletOmega0 / (2.0 * std::numbers::pi * freq_hz); }
inline double frequency_for_scale(double scale_s) { return kMorletOmega0 / (2.0 * std::numbers::pi * scale_s); }

/// `count` scales whose centre frequencies are log-spaced over [f_min, f_max];
/// returned in increasing scale order (decreasing frequency).
inline std::vector<double> log_spaced_scales(double f_min, double f_max, std::size_t count) {
    if (count == 0 || !(f_min > 0) || !(f_max > f_min)) throw ValueError("log_spaced_scales: invalid band");
    std::vector<double> s(count);
    for (std::size_t i = 0; i < count; ++i) {
        double frac = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        double f = f_max * std::pow(f_min / f_max, frac);
        s[i] = scale_for_frequency(f);
    }
    return s;
}

/// Default grid: log-spaced from sampling_rate/64 to sampling_rate/4.
inline std::vector<double> default_scales(double sampling_rate, std::size_t count = 32) {
    return log_spaced_scales(sampling_rate / 64.0, sampling_rate / 4.0, count);
}

struct Scalogram {
    Tensor coefficients;  // [scales, time], real part
    std::vector<double> scales;
    double sampling_rate = 1.0;
};

namespace detail {

// Real part of the conjugated, unit-energy Morlet kernel at a scale given in
// samples, over taps -half..half.
inline std::vector<double> morlet_real_kernel(double scale_samples, std::size_t& half) {
    half = static_cast<std::size_t>(std::ceil(5.0 * scale_samples));
    std::vector<double> re(2 * half + 1);
    double energy = 0;
    for (std::size_t i = 0; i < re.size(); ++i) {
        double eta = (static_cast<double>(i) - static_cast<double>(half)) / scale_samples;
        double env = std::exp(-0.5 * eta * eta);
        re[i] = std::cos(kMorletOmega0 * eta) * env;
        double im = std::sin(kMorletOmega0 * eta) * env;
        energy += re[i] * re[i] + im * im;
    }
    const double norm = 1.0 / std::sqrt(energy);
    for (auto& v : re) v *= norm;
    return re;
}

inline std::vector<double> cwt_raw(const std::vector<double>& x, const std::vector<double>& scales, double fs) {
    const std::size_t n = x.size();
    std::vector<double> out(scales.size() * n, 0.0);
    for (std::size_t j = 0; j < scales.size(); ++j) {
        std::size_t half = 0;
        auto k = morlet_real_kernel(scales[j] * fs, half);
        for (std::size_t b = 0; b < n; ++b) {
            double acc = 0;
            // Zero padding outside [0, n).
            long lo = std::max(0L, static_cast<long>(b) - static_cast<long>(half));
            long hi = std::min(static_cast<long>(n) - 1, static_cast<long>(b + half));
            for (long m = lo; m <= hi; ++m) acc += x[static_cast<std::size_t>(m)] * k[static_cast<std::size_t>(m - static_cast<long>(b) + static_cast<long>(half))];
            out[j * n + b] = acc;
        }
    }
    return out;
}

inline double mean_log2_step(const std::vector<double>& scales) {
    return std::log2(scales.back() / scales.front()) / static_cast<double>(scales.size() - 1);
}

// Un-normalized single-integral sum: dj * sum_j W_j[n] / sqrt(s_j in samples).
inline std::vector<double> icwt_raw(const std::vector<double>& w, std::size_t n, const std::vector<double>& scales,
                                    double fs) {
    const double dj = mean_log2_step(scales);
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < scales.size(); ++j) {
        const double inv = dj / std::sqrt(scales[j] * fs);
        for (std::size_t b = 0; b < n; ++b) out[b] += w[j * n + b] * inv;
    }
    return out;
}

// Global reconstruction constant, fitted once by least squares on the
// interior of a long mid-band tone.
inline double icwt_gain() {
    static const double gain = [] {
        const std::size_t n = 4096;
        const double f0 = 1.0 / 16.0;
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = std::cos(2.0 * std::numbers::pi * f0 * static_cast<double>(i));
        auto scales = log_spaced_scales(1.0 / 256.0, 1.0 / 4.0, 64);
        auto raw = icwt_raw(cwt_raw(x, scales, 1.0), n, scales, 1.0);
        double num = 0, den = 0;
        for (std::size_t i = n / 4; i < 3 * n / 4; ++i) {
            num += x[i] * raw[i];
            den += raw[i] * raw[i];
        }
        return num / den;
    }();
    return gain;
}

}  // namespace detail

/// Morlet (omega0 = 6) continuous wavelet transform; row j of the result
/// correlates the signal with the wavelet dilated to scales[j] seconds.
inline Scalogram cwt(const Tensor& signal, const std::vector<double>& scales, double sampling_rate) {
    if (signal.rank() != 1) throw ShapeError("cwt: signal must be rank 1");
    if (signal.size() < 8) throw ShapeError("cwt: signal needs at least 8 samples");
    if (scales.empty()) throw ValueError("cwt: empty scale list");
    if (!(sampling_rate > 0)) throw ValueError("cwt: sampling rate must be positive");
    for (std::size_t j = 0; j < scales.size(); ++j) {
        if (!(scales[j] > 0)) throw ValueError("cwt: scales must be positive");
        if (j > 0 && !(scales[j] > scales[j - 1])) throw ValueError("cwt: scales must be strictly increasing");
    }
    std::vector<double> x(signal.data().begin(), signal.data().end());
    auto w = detail::cwt_raw(x, scales, sampling_rate);
    return {Tensor({scales.size(), x.size()}, std::vector<float>(w.begin(), w.end())), scales, sampling_rate};
}

/// Single-integral inverse for real Morlet scalograms on log-spaced grids.
inline Tensor icwt(const Scalogram& s) {
    if (s.scales.size() < 4) throw ValueError("icwt: need at least 4 scales, got " + std::to_string(s.scales.size()));
    if (s.coefficients.rank() != 2 || s.coefficients.extent(0) != s.scales.size()) {
        throw ShapeError("icwt: coefficient shape " + to_string(s.coefficients.shape()) + " does not match " +
                         std::to_string(s.scales.size()) + " scales");
    }
    const std::size_t n = s.coefficients.extent(1);
    std::vector<double> w(s.coefficients.data().begin(), s.coefficients.data().end());
    auto raw = detail::icwt_raw(w, n, s.scales, s.sampling_rate);
    const double g = detail::icwt_gain();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(raw[i] * g);
    return Tensor({n}, std::move(out));
}

}  // namespace diffad
