#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "io_util.hpp"
#include "ops.hpp"
#include "scoring.hpp"
#include "tensor.hpp"

namespace diffad {

enum class Modality { Image, TimeSeries };

inline const char* to_string(Modality m) { return m == Modality::Image ? "image" : "timeseries"; }

inline Modality parse_modality(const std::string& s) {
    if (s == "image") return Modality::Image;
    if (s == "timeseries") return Modality::TimeSeries;
    throw ConfigError("unknown modality '" + s + "' (expected image or timeseries)");
}

struct Sample {
    std::string id;
    Tensor tensor;  // image [C,H,W] in [-1,1], or a 1-D window [w]
    int label = 0;  // 0 normal, 1 anomaly
    Modality modality = Modality::Image;
};

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::vector<std::string> warnings;
};

inline void assert_train_normal(const std::vector<Sample>& train) {
    for (const auto& s : train) {
        if (s.label != 0) throw DataError("training split holds anomalous sample '" + s.id + "'");
    }
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Decodes an 8-bit PNG to [C,H,W] with values in [-1,1]; C is 1 or 3
/// (converted by libpng when the file's format differs).
inline Tensor read_png(const std::filesystem::path& path, std::size_t channels) {
    if (channels != 1 && channels != 3) throw ValueError("read_png: channels must be 1 or 3");
    const std::string bytes = read_file(path);
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw DataError("cannot decode PNG '" + path.string() + "': " + img.message);
    }
    img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("cannot decode PNG '" + path.string() + "': " + img.message);
    }
    const std::size_t H = img.height, W = img.width;
    std::vector<float> v(channels * H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < channels; ++c) {
                const double p = buf[(y * W + x) * channels + c];
                v[c * H * W + y * W + x] = static_cast<float>(p / 127.5 - 1.0);
            }
    return Tensor({channels, H, W}, std::move(v));
}

/// 8-bit bytes of a [C,H,W] or [H,W] tensor, mapping [lo,hi] to [0,255].
inline std::vector<unsigned char> to_bytes(const Tensor& x, double lo, double hi) {
    std::vector<unsigned char> out(x.size());
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = std::clamp((static_cast<double>(x[i]) - lo) / span, 0.0, 1.0);
        out[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    return out;
}

/// Writes a [C,H,W] (C 1 or 3) or [H,W] tensor as 8-bit PNG, mapping
/// [lo,hi] to [0,255]. Written atomically.
inline void write_png(const std::filesystem::path& path, const Tensor& x, double lo = -1.0, double hi = 1.0) {
    std::size_t C = 1, H, W;
    if (x.rank() == 2) {
        H = x.extent(0), W = x.extent(1);
    } else if (x.rank() == 3 && (x.extent(0) == 1 || x.extent(0) == 3)) {
        C = x.extent(0), H = x.extent(1), W = x.extent(2);
    } else {
        throw ShapeError("write_png: expected [H,W] or [C,H,W] with C in {1,3}, got " + to_string(x.shape()));
    }
    const auto planar = to_bytes(x, lo, hi);
    std::vector<unsigned char> inter(planar.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i) inter[i * C + c] = planar[c * H * W + i];
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(W);
    img.height = static_cast<png_uint_32>(H);
    img.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(img, size, 0, inter.data(), 0, nullptr)) {
        throw DataError("PNG encode failed for '" + path.string() + "': " + img.message);
    }
    std::string mem(size, '\0');
    if (!png_image_write_to_memory(&img, mem.data(), &size, 0, inter.data(), 0, nullptr)) {
        throw DataError("PNG encode failed for '" + path.string() + "': " + img.message);
    }
    mem.resize(size);
    write_file_atomic(path, mem);
}

/// Bilinear resize of [C,H,W] to [C,size,size].
inline Tensor resize_square(const Tensor& x, std::size_t size) {
    if (x.extent(1) == size && x.extent(2) == size) return x;
    auto b = ops::reshape<float>(nullptr, x, {1, x.extent(0), x.extent(1), x.extent(2)});
    auto r = ops::resize_bilinear<float>(nullptr, b, size, size);
    return ops::reshape<float>(nullptr, r, {x.extent(0), size, size});
}

namespace detail {

inline std::vector<std::filesystem::path> png_files(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (ext == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// MVTec-style layout: <root>/train/good/*.png and <root>/test/<kind>/*.png.
/// Test label is 0 only under test/good.
inline Split load_image_dir(const std::filesystem::path& root, std::size_t resolution, std::size_t channels = 1) {
    namespace fs = std::filesystem;
    Split out;
    const fs::path train_dir = root / "train" / "good";
    if (!fs::is_directory(train_dir)) throw DataError("missing training directory '" + train_dir.string() + "'");
    for (const auto& p : detail::png_files(train_dir)) {
        out.train.push_back({"train/good/" + p.filename().string(), resize_square(read_png(p, channels), resolution), 0,
                             Modality::Image});
    }
    const fs::path test_dir = root / "test";
    if (fs::is_directory(test_dir)) {
        std::vector<fs::path> kinds;
        for (const auto& e : fs::directory_iterator(test_dir))
            if (e.is_directory()) kinds.push_back(e.path());
        std::sort(kinds.begin(), kinds.end());
        for (const auto& k : kinds) {
            const std::string kind = k.filename().string();
            for (const auto& p : detail::png_files(k)) {
                out.test.push_back({"test/" + kind + "/" + p.filename().string(),
                                    resize_square(read_png(p, channels), resolution), kind == "good" ? 0 : 1,
                                    Modality::Image});
            }
        }
    }
    if (out.test.empty()) out.warnings.push_back("no test images under '" + test_dir.string() + "'");
    if (out.train.empty()) out.warnings.push_back("no training images under '" + train_dir.string() + "'");
    return out;
}

// ---------------------------------------------------------------------------
// Time series
// ---------------------------------------------------------------------------

struct Series {
    std::vector<double> values;
    std::vector<int> labels;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    for (auto& f : out) {
        auto b = f.find_first_not_of(" \t\"");
        auto e = f.find_last_not_of(" \t\"");
        f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
    }
    return out;
}

inline bool parse_double(const std::string& s, double& v) {
    if (s.empty()) return false;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(v);
}

}  // namespace detail

/// Reads `timestamp,value[,label]`-style CSV with a header row. Columns are
/// found by name; without the label column every label is 0. Blank lines
/// are skipped.
inline Series load_timeseries_csv(const std::filesystem::path& path, const std::string& value_column = "value",
                                  const std::string& label_column = "label") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open time-series file '" + path.string() + "'");
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            header = detail::split_csv_line(line);
            break;
        }
    }
    if (header.empty()) throw DataError("'" + path.string() + "' has no header row");
    auto col = [&](const std::string& name) -> long {
        auto it = std::find(header.begin(), header.end(), name);
        return it == header.end() ? -1 : static_cast<long>(it - header.begin());
    };
    const long vc = col(value_column), lc = col(label_column);
    if (vc < 0) throw DataError("'" + path.string() + "' has no column '" + value_column + "'");

    Series s;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto f = detail::split_csv_line(line);
        double v = 0;
        if (static_cast<long>(f.size()) <= vc || !detail::parse_double(f[static_cast<std::size_t>(vc)], v)) {
            throw DataError(path.string() + ": row " + std::to_string(line_no) + ": non-numeric value '" +
                            (static_cast<long>(f.size()) > vc ? f[static_cast<std::size_t>(vc)] : std::string()) + "'");
        }
        int label = 0;
        if (lc >= 0) {
            double l = 0;
            if (static_cast<long>(f.size()) <= lc || !detail::parse_double(f[static_cast<std::size_t>(lc)], l) ||
                (l != 0.0 && l != 1.0)) {
                throw DataError(path.string() + ": row " + std::to_string(line_no) + ": label must be 0 or 1");
            }
            label = static_cast<int>(l);
        }
        s.values.push_back(v);
        s.labels.push_back(label);
    }
    return s;
}

struct WindowSpec {
    std::size_t width = 64;
    std::size_t stride = 16;

    void validate() const {
        if (width < 2) throw ConfigError("window width must be >= 2");
        if (stride < 1) throw ConfigError("window stride must be >= 1");
    }
};

inline std::size_t window_count(std::size_t n, const WindowSpec& spec) {
    return n < spec.width ? 0 : (n - spec.width) / spec.stride + 1;
}

/// Per-window z-normalized segments; a window is anomalous when any point in
/// it is.
inline std::vector<Sample> sliding_windows(const std::vector<double>& values, const std::vector<int>& labels,
                                           const WindowSpec& spec, const std::string& id_prefix = "w") {
    spec.validate();
    if (values.size() != labels.size()) throw ValueError("sliding_windows: values and labels differ in length");
    if (values.size() < spec.width) {
        throw DataError("series of length " + std::to_string(values.size()) + " is shorter than window " +
                        std::to_string(spec.width));
    }
    std::vector<Sample> out;
    const std::size_t count = window_count(values.size(), spec);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t start = k * spec.stride;
        std::vector<double> seg(values.begin() + static_cast<long>(start),
                                values.begin() + static_cast<long>(start + spec.width));
        int label = 0;
        for (std::size_t i = start; i < start + spec.width; ++i) label |= labels[i] == 1 ? 1 : 0;
        auto z = z_normalize(seg);
        std::vector<float> f(z.begin(), z.end());
        out.push_back({id_prefix + std::to_string(start), Tensor({spec.width}, std::move(f)), label, Modality::TimeSeries});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

struct SynthImageSpec {
    std::uint64_t seed = 0;
    std::size_t n_train = 64;
    std::size_t n_test_normal = 32;
    std::size_t n_test_anomalous = 32;
    std::size_t size = 32;
};

namespace detail {

inline double unif(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline std::size_t unif_index(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Smooth blobs over a faint oriented texture; values stay in [-0.85, 0.75].
inline std::vector<double> synth_normal_image(Rng& rng, std::size_t n) {
    std::vector<double> img(n * n);
    const double fx = unif(rng, 0.15, 0.35), fy = unif(rng, 0.15, 0.35), ph = unif(rng, 0.0, 6.283185307179586);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            img[y * n + x] = -0.45 + 0.08 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + ph) +
                             0.03 * gauss(rng);
        }
    const std::size_t blobs = unif_index(rng, 2, 3);
    const double nd = static_cast<double>(n);
    for (std::size_t b = 0; b < blobs; ++b) {
        const double cx = unif(rng, 0.2 * nd, 0.8 * nd), cy = unif(rng, 0.2 * nd, 0.8 * nd);
        const double sig = unif(rng, 0.08 * nd, 0.16 * nd), amp = unif(rng, 0.4, 0.7);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                img[y * n + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * sig * sig));
            }
    }
    for (auto& v : img) v = std::clamp(v, -0.85, 0.75);
    return img;
}

inline void insert_defect(Rng& rng, std::vector<double>& img, std::size_t n) {
    if (unif_index(rng, 0, 1) == 0) {
        // bright square, side n/8
        const std::size_t side = n / 8;
        const std::size_t x0 = unif_index(rng, 1, n - side - 1), y0 = unif_index(rng, 1, n - side - 1);
        for (std::size_t y = y0; y < y0 + side; ++y)
            for (std::size_t x = x0; x < x0 + side; ++x) img[y * n + x] = 1.0;
    } else {
        // dark axis-aligned scratch
        const std::size_t thick = std::max<std::size_t>(1, n / 32);
        const std::size_t len = unif_index(rng, n / 2, (3 * n) / 4);
        const bool horizontal = unif_index(rng, 0, 1) == 0;
        const std::size_t a0 = unif_index(rng, 0, n - len), b0 = unif_index(rng, 1, n - thick - 1);
        for (std::size_t a = a0; a < a0 + len; ++a)
            for (std::size_t b = b0; b < b0 + thick; ++b) {
                const std::size_t y = horizontal ? b : a, x = horizontal ? a : b;
                img[y * n + x] = -1.0;
            }
    }
}

inline Tensor image_tensor(const std::vector<double>& img, std::size_t n) {
    std::vector<float> v(img.begin(), img.end());
    return Tensor({1, n, n}, std::move(v));
}

}  // namespace detail

/// Seeded stand-in for an industrial image set: single-channel normals made
/// of smooth blobs on a textured background; anomalies are test normals
/// with a bright square or a dark scratch.
inline Split synth_image_dataset(const SynthImageSpec& spec) {
    const std::size_t n = spec.size;
    if (n < 16 || (n & (n - 1)) != 0) throw ValueError("synth_image_dataset: size must be a power of two >= 16");
    Rng rng(spec.seed);
    Split out;
    for (std::size_t i = 0; i < spec.n_train; ++i) {
        out.train.push_back({"train_" + std::to_string(i), detail::image_tensor(detail::synth_normal_image(rng, n), n),
                             0, Modality::Image});
    }
    for (std::size_t i = 0; i < spec.n_test_normal; ++i) {
        out.test.push_back({"test_normal_" + std::to_string(i),
                            detail::image_tensor(detail::synth_normal_image(rng, n), n), 0, Modality::Image});
    }
    for (std::size_t i = 0; i < spec.n_test_anomalous; ++i) {
        auto img = detail::synth_normal_image(rng, n);
        detail::insert_defect(rng, img, n);
        out.test.push_back({"test_anomaly_" + std::to_string(i), detail::image_tensor(img, n), 1, Modality::Image});
    }
    return out;
}

enum class SeriesAnomaly { Spike, LevelShift, FrequencyDoubling };

struct SynthSeriesSpec {
    std::uint64_t seed = 0;
    std::size_t n_train = 64;
    std::size_t n_test_normal = 32;
    std::size_t n_test_anomalous = 32;
    std::size_t window = 64;
};

namespace detail {

struct ToneMix {
    double f1, f2, a1, a2, p1, p2;
};

inline ToneMix draw_tones(Rng& rng) {
    return {unif(rng, 1.0 / 32, 1.0 / 20), unif(rng, 1.0 / 10, 1.0 / 7), unif(rng, 0.8, 1.2),
            unif(rng, 0.3, 0.6),          unif(rng, 0.0, 6.283185307179586), unif(rng, 0.0, 6.283185307179586)};
}

inline std::vector<double> render_tones(Rng& rng, const ToneMix& m, std::size_t w, std::size_t dbl_from,
                                        std::size_t dbl_to) {
    std::normal_distribution<double> gauss(0.0, 0.05);
    std::vector<double> x(w);
    const double tau = 6.283185307179586;
    double ph1 = m.p1, ph2 = m.p2;
    for (std::size_t i = 0; i < w; ++i) {
        const double k = (i >= dbl_from && i < dbl_to) ? 2.0 : 1.0;
        x[i] = m.a1 * std::sin(ph1) + m.a2 * std::sin(ph2) + gauss(rng);
        // phase accumulation keeps the signal continuous across the doubled span
        ph1 += tau * m.f1 * k;
        ph2 += tau * m.f2 * k;
    }
    return x;
}

inline double stddev(const std::vector<double>& x) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(x.size()));
}

inline Tensor window_tensor(const std::vector<double>& x) {
    auto z = z_normalize(x);
    return Tensor({x.size()}, std::vector<float>(z.begin(), z.end()));
}

}  // namespace detail

/// One raw (unnormalized) normal window from the generator stream.
inline std::vector<double> synth_normal_window(Rng& rng, std::size_t w) {
    auto m = detail::draw_tones(rng);
    return detail::render_tones(rng, m, w, 0, 0);
}

/// Anomalous raw window of the given kind. Spikes add 5 sigma at the
/// point of largest magnitude; level shifts add 2.5 sigma over a
/// sub-interval; frequency doubling applies over a sub-interval.
inline std::vector<double> synth_anomalous_window(Rng& rng, std::size_t w, SeriesAnomaly kind) {
    auto m = detail::draw_tones(rng);
    const std::size_t len = detail::unif_index(rng, w / 4, w / 2);
    const std::size_t from = detail::unif_index(rng, 0, w - len);
    if (kind == SeriesAnomaly::FrequencyDoubling) return detail::render_tones(rng, m, w, from, from + len);
    auto x = detail::render_tones(rng, m, w, 0, 0);
    const double sigma = detail::stddev(x);
    if (kind == SeriesAnomaly::Spike) {
        std::size_t at = 0;
        for (std::size_t i = 1; i < w; ++i)
            if (std::abs(x[i]) > std::abs(x[at])) at = i;
        x[at] += (x[at] >= 0 ? 5.0 : -5.0) * sigma;
    } else {
        const double sign = detail::unif_index(rng, 0, 1) == 0 ? 1.0 : -1.0;
        for (std::size_t i = from; i < from + len; ++i) x[i] += sign * 2.5 * sigma;
    }
    return x;
}

/// Seeded stand-in for a labeled univariate benchmark: z-normalized windows
/// of two-tone sinusoid mixes. Anomaly kinds are drawn uniformly.
inline Split synth_timeseries_dataset(const SynthSeriesSpec& spec) {
    if (spec.window < 32) throw ValueError("synth_timeseries_dataset: window must be >= 32");
    Rng rng(spec.seed);
    Split out;
    for (std::size_t i = 0; i < spec.n_train; ++i) {
        out.train.push_back({"train_" + std::to_string(i), detail::window_tensor(synth_normal_window(rng, spec.window)),
                             0, Modality::TimeSeries});
    }
    for (std::size_t i = 0; i < spec.n_test_normal; ++i) {
        out.test.push_back({"test_normal_" + std::to_string(i),
                            detail::window_tensor(synth_normal_window(rng, spec.window)), 0, Modality::TimeSeries});
    }
    static constexpr const char* kNames[] = {"spike", "shift", "freq"};
    for (std::size_t i = 0; i < spec.n_test_anomalous; ++i) {
        const auto kind = static_cast<SeriesAnomaly>(detail::unif_index(rng, 0, 2));
        out.test.push_back({"test_" + std::string(kNames[static_cast<int>(kind)]) + "_" + std::to_string(i),
                            detail::window_tensor(synth_anomalous_window(rng, spec.window, kind)), 1,
                            Modality::TimeSeries});
    }
    return out;
}

}  // namespace diffad
