#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "diffad/diffad.hpp"

using namespace diffad;
using Catch::Matchers::WithinAbs;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("diffad_data_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << s;
}

Tensor gradient_image(std::size_t h, std::size_t w) {
    std::vector<float> v(h * w);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0f + 2.0f * static_cast<float>(i) / static_cast<float>(v.size() - 1);
    return Tensor({1, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("PNG scaling and roundtrip", "[data]") {
    TempDir d("png");
    write_png(d.path / "white.png", Tensor::full({1, 5, 7}, 1.0f));
    auto white = read_png(d.path / "white.png", 1);
    CHECK(white.shape() == Shape{1, 5, 7});
    for (float v : white.values()) CHECK(v == 1.0f);

    write_png(d.path / "black.png", Tensor::full({1, 3, 3}, -1.0f));
    for (float v : read_png(d.path / "black.png", 1).values()) CHECK(v == -1.0f);

    // 8-bit quantization: within half a grey level
    auto g = gradient_image(6, 9);
    write_png(d.path / "grad.png", g);
    auto back = read_png(d.path / "grad.png", 1);
    CHECK(max_abs_diff(back, g) <= 1.0f / 255.0f + 1e-6f);

    Rng r(1);
    auto rgb = Tensor::uniform({3, 4, 4}, -1.0f, 1.0f, r);
    write_png(d.path / "rgb.png", rgb);
    CHECK(max_abs_diff(read_png(d.path / "rgb.png", 3), rgb) <= 1.0f / 255.0f + 1e-6f);
    CHECK(read_png(d.path / "rgb.png", 1).shape() == Shape{1, 4, 4});

    write_text(d.path / "broken.png", "definitely not a png");
    try {
        (void)read_png(d.path / "broken.png", 1);
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
    }
    CHECK_THROWS_AS(write_png(d.path / "bad.png", Tensor::zeros({2, 3, 3})), ShapeError);
}

TEST_CASE("image directory layout", "[data]") {
    TempDir d("layout");
    write_png(d.path / "train/good/000.png", gradient_image(20, 20));
    write_png(d.path / "train/good/001.png", Tensor::full({1, 20, 20}, 1.0f));
    write_png(d.path / "test/good/000.png", gradient_image(20, 20));
    write_png(d.path / "test/crack/000.png", Tensor::full({1, 20, 20}, -1.0f));
    write_text(d.path / "train/good/notes.txt", "ignored");

    auto s = load_image_dir(d.path, 16);
    REQUIRE(s.train.size() == 2);
    REQUIRE(s.test.size() == 2);
    CHECK(s.warnings.empty());
    for (const auto& t : s.train) CHECK(t.label == 0);
    // test kinds sorted: crack before good
    CHECK(s.test[0].id == "test/crack/000.png");
    CHECK(s.test[0].label == 1);
    CHECK(s.test[1].label == 0);
    CHECK(s.test[0].tensor.shape() == Shape{1, 16, 16});
    for (float v : s.train[1].tensor.values()) CHECK(v == 1.0f);
    CHECK(load_image_dir(d.path, 16, 3).train[0].tensor.shape() == Shape{3, 16, 16});
    assert_train_normal(s.train);
}

TEST_CASE("image directory edge cases", "[data]") {
    TempDir d("edges");
    CHECK_THROWS_AS(load_image_dir(d.path, 16), DataError);

    write_png(d.path / "train/good/a.png", gradient_image(16, 16));
    fs::create_directories(d.path / "test/good");
    auto s = load_image_dir(d.path, 16);
    CHECK(s.test.empty());
    REQUIRE(s.warnings.size() == 1);
    CHECK(s.warnings[0].find("no test images") != std::string::npos);

    write_text(d.path / "test/good/bad.png", "garbage");
    CHECK_THROWS_AS(load_image_dir(d.path, 16), DataError);

    std::vector<Sample> train{{"x", Tensor::zeros({1}), 1, Modality::Image}};
    CHECK_THROWS_AS(assert_train_normal(train), DataError);
}

TEST_CASE("time-series CSV", "[data]") {
    TempDir d("csv");
    write_text(d.path / "a.csv", "timestamp,value,label\n1,0.5,0\n2,1.5,0\n3,-2,1\n");
    auto a = load_timeseries_csv(d.path / "a.csv");
    CHECK(a.values == std::vector<double>{0.5, 1.5, -2});
    CHECK(a.labels == std::vector<int>{0, 0, 1});

    write_text(d.path / "b.csv", "timestamp,value\n1,3\n2,4\n");
    auto b = load_timeseries_csv(d.path / "b.csv");
    CHECK(b.labels == std::vector<int>{0, 0});

    write_text(d.path / "c.csv", "timestamp,value,label\n1,3,0\n2,4,1\n\n");
    CHECK(load_timeseries_csv(d.path / "c.csv").values.size() == 2);

    write_text(d.path / "d.csv", "timestamp,value,label\n1,3,0\n2,abc,1\n");
    try {
        (void)load_timeseries_csv(d.path / "d.csv");
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
    write_text(d.path / "e.csv", "timestamp,reading\n1,3\n");
    CHECK_THROWS_AS(load_timeseries_csv(d.path / "e.csv"), DataError);
    CHECK(load_timeseries_csv(d.path / "e.csv", "reading").values == std::vector<double>{3});
    write_text(d.path / "f.csv", "timestamp,value,label\n1,3,7\n");
    CHECK_THROWS_AS(load_timeseries_csv(d.path / "f.csv"), DataError);
    CHECK_THROWS_AS(load_timeseries_csv(d.path / "missing.csv"), DataError);
}

TEST_CASE("sliding windows", "[data]") {
    std::vector<double> v(10);
    for (std::size_t i = 0; i < 10; ++i) v[i] = static_cast<double>(i * i);
    std::vector<int> zero(10, 0);
    auto w = sliding_windows(v, zero, {4, 2});
    REQUIRE(w.size() == 4);
    for (const auto& s : w) {
        CHECK(s.label == 0);
        CHECK(s.tensor.shape() == Shape{4});
        double mean = 0, var = 0;
        for (float x : s.tensor.values()) mean += x;
        mean /= 4;
        for (float x : s.tensor.values()) var += (x - mean) * (x - mean);
        CHECK_THAT(mean, WithinAbs(0.0, 1e-6));
        CHECK_THAT(var / 4, WithinAbs(1.0, 1e-5));
    }

    std::vector<int> one(10, 0);
    one[5] = 1;
    auto lw = sliding_windows(v, one, {4, 2});
    for (std::size_t k = 0; k < lw.size(); ++k) {
        const std::size_t start = k * 2;
        const int want = (start <= 5 && 5 < start + 4) ? 1 : 0;
        CHECK(lw[k].label == want);
    }
    std::vector<int> got;
    for (const auto& s : lw) got.push_back(s.label);
    CHECK(got == std::vector<int>{0, 1, 1, 0});
    CHECK_THROWS_AS(sliding_windows(std::vector<double>(3, 0.0), std::vector<int>(3, 0), {4, 2}), DataError);
    CHECK_THROWS_AS(sliding_windows(v, zero, {1, 1}), ConfigError);
}

TEST_CASE("window count matches enumeration", "[data][property]") {
    Rng r(2);
    std::uniform_int_distribution<std::size_t> dn(2, 300), dw(2, 64), ds(1, 40);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t w = dw(r), s = ds(r), n = std::max(w, dn(r));
        std::size_t enumerated = 0;
        for (std::size_t start = 0; start + w <= n; start += s) ++enumerated;
        CHECK(window_count(n, {w, s}) == enumerated);
        std::vector<double> vals(n);
        for (auto& x : vals) x = std::normal_distribution<double>(0, 1)(r);
        CHECK(sliding_windows(vals, std::vector<int>(n, 0), {w, s}).size() == enumerated);
    }
}

TEST_CASE("synthetic images", "[data]") {
    SynthImageSpec spec;
    spec.seed = 3;
    spec.n_train = 6;
    spec.n_test_normal = 4;
    spec.n_test_anomalous = 8;
    auto a = synth_image_dataset(spec), b = synth_image_dataset(spec);
    REQUIRE(a.train.size() == 6);
    REQUIRE(a.test.size() == 12);
    for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test[i].tensor.values() == b.test[i].tensor.values());
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].tensor.values() == b.train[i].tensor.values());
    spec.seed = 4;
    CHECK(synth_image_dataset(spec).train[0].tensor.values() != a.train[0].tensor.values());
    assert_train_normal(a.train);
    for (const auto& split : {a.train, a.test})
        for (const auto& s : split)
            for (float v : s.tensor.values()) {
                CHECK(v >= -1.0f);
                CHECK(v <= 1.0f);
            }
    CHECK_THROWS_AS(synth_image_dataset({0, 1, 1, 1, 24}), ValueError);
    CHECK_THROWS_AS(synth_image_dataset({0, 1, 1, 1, 8}), ValueError);
}

TEST_CASE("defects change at least (size/8)^2 pixels", "[data][property]") {
    for (std::size_t n : {16u, 32u, 64u}) {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            Rng r(seed);
            auto base = detail::synth_normal_image(r, n);
            auto img = base;
            detail::insert_defect(r, img, n);
            std::size_t changed = 0;
            for (std::size_t i = 0; i < img.size(); ++i) changed += img[i] != base[i];
            CHECK(changed >= (n / 8) * (n / 8));
        }
    }
}

TEST_CASE("synthetic time series", "[data]") {
    SynthSeriesSpec spec;
    spec.seed = 5;
    spec.n_train = 4;
    spec.n_test_normal = 3;
    spec.n_test_anomalous = 12;
    auto a = synth_timeseries_dataset(spec), b = synth_timeseries_dataset(spec);
    REQUIRE(a.test.size() == 15);
    for (std::size_t i = 0; i < a.test.size(); ++i) {
        CHECK(a.test[i].tensor.values() == b.test[i].tensor.values());
        CHECK(a.test[i].id == b.test[i].id);
    }
    CHECK(a.train[0].tensor.shape() == Shape{64});
    assert_train_normal(a.train);
    CHECK_THROWS_AS(synth_timeseries_dataset({0, 1, 1, 1, 16}), ValueError);

    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng r(seed);
        auto z = z_normalize(synth_anomalous_window(r, 64, SeriesAnomaly::Spike));
        double m = 0;
        for (double v : z) m = std::max(m, std::abs(v));
        CHECK(m >= 4.0);
    }
}

TEST_CASE("normal windows stay below |z| = 4", "[data][property]") {
    std::size_t pass = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng r(seed);
        auto z = z_normalize(synth_normal_window(r, 64));
        double m = 0;
        for (double v : z) m = std::max(m, std::abs(v));
        pass += m < 4.0;
    }
    INFO(pass << " of 1000 normal windows below |z| = 4");
    CHECK(pass >= 990);
}

TEST_CASE("scalogram front end", "[data][scalogram]") {
    SynthSeriesSpec spec;
    spec.seed = 9;
    spec.n_train = 16;
    spec.n_test_normal = spec.n_test_anomalous = 0;
    const auto data = synth_timeseries_dataset(spec);

    ScalogramTransform raw;
    const auto x = raw.apply(data.train[0].tensor);
    CHECK(x.shape() == Shape{1, 32, 64});
    CHECK(x.values() == cwt(data.train[0].tensor, raw.scales(), 1.0).coefficients.values());

    ScalogramTransform st;
    st.fit(data.train);
    REQUIRE(st.gains.size() == 32);
    // every row comes out at the target rms over the fitted windows
    std::vector<double> sq(32, 0.0);
    for (const auto& t : model_inputs(data.train, st))
        for (std::size_t j = 0; j < 32; ++j)
            for (std::size_t i = 0; i < 64; ++i) sq[j] += static_cast<double>(t[j * 64 + i]) * t[j * 64 + i];
    for (double s : sq) CHECK_THAT(std::sqrt(s / (16.0 * 64.0)), WithinAbs(ScalogramTransform::kTargetRms, 1e-5));

    ScalogramTransform back;
    back.set_gains(st.gains_string());
    CHECK(back.gains == st.gains);
    CHECK(back.apply(data.train[3].tensor).values() == st.apply(data.train[3].tensor).values());

    CHECK_THROWS_AS(back.set_gains("1,2"), ValueError);
    CHECK_THROWS_AS(back.set_gains(std::string(31 * 2, ',') + "1"), ValueError);
    auto bad = st.gains_string();
    bad.replace(0, bad.find(','), "0");
    CHECK_THROWS_AS(back.set_gains(bad), ValueError);
    bad.replace(0, 1, "x");
    CHECK_THROWS_AS(back.set_gains(bad), ValueError);

    ScalogramTransform short_gains;
    short_gains.gains = {1.0, 2.0};
    CHECK_THROWS_AS(short_gains.apply(data.train[0].tensor), ValueError);
    CHECK_THROWS_AS(st.apply(Tensor::zeros({2, 64})), ShapeError);
}
