// diffusion-ad: train, evaluate, score and sample with the diffusion anomaly
// detector.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 configuration, 3 data,
// 4 numeric failure (NaN), 5 single-class test set, 6 checkpoint.

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "diffad/diffad.hpp"

using namespace diffad;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4, kSingleClass = 5, kCheckpoint = 6 };

struct SingleClassError : Error {
    using Error::Error;
};

std::string key_listing() {
    std::ostringstream os;
    os << "Config keys (set with --config FILE or --set key=value):\n";
    for (const auto& k : config_keys()) {
        os << "  " << std::left << std::setw(34) << k.name << " default: "
           << (k.default_value.empty() ? "\"\"" : k.default_value) << "  " << k.doc << "\n";
    }
    return os.str();
}

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;

    RunConfig load() const {
        RunConfig rc;
        if (!config_file.empty()) rc.load_file(config_file);
        for (const auto& o : overrides) rc.set_assignment(o);
        return rc;
    }
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_file, "key = value config file");
    sub->add_option("--set", c.overrides, "override, key=value (repeatable)");
    sub->footer(key_listing());
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

FeatureExtractor extractor_for(const RunConfig& rc, std::uint64_t seed, std::size_t channels) {
    const std::string ext = rc.str("perception.external_weights_path");
    if (ext.empty()) return build_extractor(seed, channels);
    auto c = load_checkpoint(ext, false);
    try {
        return FeatureExtractor(c.weights, channels);
    } catch (const ValueError& e) {
        throw ConfigError(std::string("perception.external_weights_path: ") + e.what());
    }
}

ScalogramTransform scalogram_from(const Checkpoint& c) {
    ScalogramTransform st;
    auto get = [&](const std::string& k) {
        auto it = c.metadata.find(k);
        if (it == c.metadata.end()) throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint lacks '" + k + "'");
        return it->second;
    };
    try {
        st.num_scales = std::stoul(get("cwt.scales"));
        st.sampling_rate = std::stod(get("cwt.sampling_rate"));
        st.set_gains(get("scalogram.gains"));
    } catch (const ValueError& e) {
        throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint scalogram settings: ") + e.what());
    } catch (const std::logic_error& e) {
        throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint scalogram settings: ") + e.what());
    }
    return st;
}

Modality checkpoint_modality(const Checkpoint& c) {
    auto it = c.metadata.find("data.modality");
    return it == c.metadata.end() ? Modality::Image : parse_modality(it->second);
}

int cmd_train(const Common& common) {
    RunConfig rc = common.load();
    const ModelConfig mc = model_config_of(rc);
    const ScheduleParams sp = schedule_of(rc);
    const TrainConfig tc = train_config_of(rc);
    const Modality modality = modality_of(rc);
    ScalogramTransform st = scalogram_of(rc);

    Split data = load_dataset(rc);
    for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
    assert_train_normal(data.train);
    if (data.train.empty()) throw DataError("no training samples found under '" + rc.str("data.path") + "'");

    std::map<std::string, std::string> meta{{"data.modality", to_string(modality)}};
    if (modality == Modality::TimeSeries) {
        st.fit(data.train);
        meta["cwt.scales"] = std::to_string(st.num_scales);
        meta["cwt.sampling_rate"] = fmt(st.sampling_rate);
        meta["scalogram.gains"] = st.gains_string();
        meta["data.window"] = rc.str("data.window");
    } else {
        meta["data.resolution"] = rc.str("data.resolution");
    }
    const auto inputs = model_inputs(data.train, st);
    Denoiser model = make_denoiser(mc, init_seed_for(tc.seed));
    const auto f = extractor_for(rc, tc.perception_seed, mc.input_channels);

    std::string log = "step,L_MSE,L_feat,L\n";
    auto on_step = [&](std::size_t step, const StepLosses& l) {
        log += std::to_string(step) + "," + fmt(l.mse) + "," + fmt(l.feat) + "," + fmt(l.total) + "\n";
        if (step % 10 == 0) std::cerr << "step " << step << " L=" << l.total << "\n";
    };
    Checkpoint ck = train(model, inputs, sp, f, tc, on_step, meta);
    save_checkpoint(ck, tc.checkpoint_path);
    write_file_atomic(rc.str("train.log_path"), log);
    std::cout << "checkpoint: " << tc.checkpoint_path.string() << " (" << ck.step << " steps)\n";
    return kOk;
}

struct Loaded {
    Checkpoint ck;
    Denoiser model;
    NoiseSchedule schedule;
    FeatureExtractor f;
    ScalogramTransform st;
    Modality modality;
};

Loaded load_model(const RunConfig& rc, const std::string& path) {
    Loaded l;
    l.ck = load_checkpoint(path);
    l.model = Denoiser(l.ck.model, l.ck.weights);
    l.schedule = l.ck.schedule.build();
    l.f = extractor_for(rc, l.ck.perception_seed, l.ck.model.input_channels);
    l.modality = checkpoint_modality(l.ck);
    if (l.modality == Modality::TimeSeries) l.st = scalogram_from(l.ck);
    if (l.modality != modality_of(rc)) {
        throw DataError(std::string("checkpoint was trained on ") + to_string(l.modality) + " data but data.modality is " +
                        rc.str("data.modality"));
    }
    return l;
}

int cmd_eval(const Common& common, const std::string& ckpt, std::optional<double> lambda, std::string output,
             std::optional<std::size_t> threads) {
    RunConfig rc = common.load();
    if (lambda) rc.set("score.lambda", fmt(*lambda));
    if (threads) rc.set("eval.threads", std::to_string(*threads));
    if (!output.empty()) rc.set("eval.output_path", output);
    EvalConfig ec = eval_config_of(rc);
    Loaded m = load_model(rc, ckpt);
    Split data = load_dataset(rc);
    for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
    bool has0 = false, has1 = false;
    for (const auto& s : data.test) (s.label == 1 ? has1 : has0) = true;
    if (!has0 || !has1) throw SingleClassError("test set must contain both normal and anomalous samples");

    auto reports = evaluate(m.model, m.schedule, m.f, data.test, m.st, ec);
    const double auc = reports_auc(reports);
    std::string csv = "sample_id,e_recon,e_feat,score,label\n";
    for (const auto& r : reports) {
        csv += r.sample_id + "," + fmt(r.e_recon) + "," + fmt(r.e_feat) + "," + fmt(r.score) + "," +
               std::to_string(r.label) + "\n";
    }
    csv += "AUC," + fmt(auc) + "\n";
    write_file_atomic(rc.str("eval.output_path"), csv);
    std::cout << "AUC," << fmt(auc) << "\n";
    return kOk;
}

Tensor read_series_window(const std::string& path, const RunConfig& rc, std::size_t width) {
    auto s = load_timeseries_csv(path, rc.str("data.value_column"), rc.str("data.label_column"));
    if (s.values.size() < width) {
        throw DataError("'" + path + "' holds " + std::to_string(s.values.size()) + " points, fewer than the window " +
                        std::to_string(width));
    }
    auto w = sliding_windows(s.values, s.labels, WindowSpec{width, 1});
    return w.front().tensor;
}

int cmd_score(const Common& common, const std::string& ckpt, const std::string& input, std::optional<double> lambda,
              const std::string& map_path) {
    RunConfig rc = common.load();
    if (lambda) rc.set("score.lambda", fmt(*lambda));
    EvalConfig ec = eval_config_of(rc);
    Loaded m = load_model(rc, ckpt);
    if (!std::filesystem::exists(input)) throw DataError("input '" + input + "' does not exist");

    Tensor x;
    std::size_t out_h = 0, out_w = 0;
    if (m.modality == Modality::Image) {
        Tensor raw = read_png(input, m.ck.model.input_channels);
        out_h = raw.extent(1), out_w = raw.extent(2);
        const std::size_t res = std::stoul(m.ck.metadata.count("data.resolution") ? m.ck.metadata.at("data.resolution")
                                                                                  : rc.str("data.resolution"));
        x = resize_square(raw, res);
    } else {
        const std::size_t width = std::stoul(m.ck.metadata.count("data.window") ? m.ck.metadata.at("data.window")
                                                                                : rc.str("data.window"));
        x = m.st.apply(read_series_window(input, rc, width));
        out_h = x.extent(1), out_w = x.extent(2);
    }
    ec.keep_maps = !map_path.empty();
    AnomalyReport r = score_input(m.model, m.schedule, m.f, x, ec, ec.seed);
    r.score = anomaly_score(r.e_recon, r.e_feat, ec.score);
    std::cout << "e_recon " << fmt(r.e_recon) << "\n"
              << "e_feat " << fmt(r.e_feat) << "\n"
              << "score " << fmt(r.score) << "\n";
    if (!map_path.empty()) {
        Tensor map = *r.pixel_map;
        if (map.extent(0) != out_h || map.extent(1) != out_w) {
            auto b = ops::reshape<float>(nullptr, map, {1, 1, map.extent(0), map.extent(1)});
            map = ops::reshape<float>(nullptr, ops::resize_bilinear<float>(nullptr, b, out_h, out_w), {out_h, out_w});
        }
        const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
        write_png(map_path, map, static_cast<double>(*lo), static_cast<double>(*hi));
    }
    return kOk;
}

int cmd_sample(const Common& common, const std::string& ckpt, std::size_t count, std::uint64_t seed,
               const std::string& output) {
    RunConfig rc = common.load();
    if (count < 1) throw ConfigError("--count must be >= 1");
    auto ck = load_checkpoint(ckpt);
    Denoiser model(ck.model, ck.weights);
    const auto schedule = ck.schedule.build();
    std::size_t H, W;
    if (checkpoint_modality(ck) == Modality::TimeSeries) {
        H = scalogram_from(ck).num_scales;
        W = std::stoul(ck.metadata.at("data.window"));
    } else {
        H = W = std::stoul(ck.metadata.count("data.resolution") ? ck.metadata.at("data.resolution")
                                                                : rc.str("data.resolution"));
    }
    const std::size_t C = ck.model.input_channels;
    Tensor x = unconditional_sample([&](const Tensor& xt, std::size_t t) { return predict_noise(model, xt, t); },
                                    schedule, {count, C, H, W}, seed);
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))));
    const std::size_t rows = (count + cols - 1) / cols;
    std::vector<float> grid(C * rows * H * cols * W, -1.0f);
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t gy = n / cols, gx = n % cols;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    grid[(c * rows * H + gy * H + y) * cols * W + gx * W + xx] = x[((n * C + c) * H + y) * W + xx];
                }
    }
    write_png(output, Tensor({C, rows * H, cols * W}, std::move(grid)));
    std::cout << "wrote " << count << " samples to " << output << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-based anomaly detection for images and time series"};
    app.require_subcommand(1);
    app.footer(key_listing());

    Common c_train, c_eval, c_score, c_sample;
    auto* train_cmd = app.add_subcommand("train", "train the noise predictor on normal data");
    add_common(train_cmd, c_train);

    std::string ckpt_eval, out_eval;
    std::optional<double> lambda_eval;
    std::optional<std::size_t> threads_eval;
    auto* eval_cmd = app.add_subcommand("eval", "score the test split and report AUC");
    add_common(eval_cmd, c_eval);
    eval_cmd->add_option("--checkpoint", ckpt_eval, "checkpoint file")->required();
    eval_cmd->add_option("--lambda", lambda_eval, "override score.lambda");
    eval_cmd->add_option("--output", out_eval, "override eval.output_path");
    eval_cmd->add_option("--threads", threads_eval, "override eval.threads (results do not depend on it)");

    std::string ckpt_score, input_score, map_score;
    std::optional<double> lambda_score;
    auto* score_cmd = app.add_subcommand("score", "score one input (PNG image or CSV series)");
    add_common(score_cmd, c_score);
    score_cmd->add_option("--checkpoint", ckpt_score, "checkpoint file")->required();
    score_cmd->add_option("--input", input_score, "input file")->required();
    score_cmd->add_option("--lambda", lambda_score, "override score.lambda");
    score_cmd->add_option("--map", map_score, "write the anomaly map as 8-bit PNG");

    std::string ckpt_sample, out_sample = "samples.png";
    std::size_t count = 16;
    std::uint64_t seed = 0;
    auto* sample_cmd = app.add_subcommand("sample", "draw unconditional samples as a PNG grid");
    add_common(sample_cmd, c_sample);
    sample_cmd->add_option("--checkpoint", ckpt_sample, "checkpoint file")->required();
    sample_cmd->add_option("--count", count, "number of samples")->capture_default_str();
    sample_cmd->add_option("--seed", seed, "sampling seed")->capture_default_str();
    sample_cmd->add_option("--output", out_sample, "grid PNG")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*train_cmd) return cmd_train(c_train);
        if (*eval_cmd) return cmd_eval(c_eval, ckpt_eval, lambda_eval, out_eval, threads_eval);
        if (*score_cmd) return cmd_score(c_score, ckpt_score, input_score, lambda_score, map_score);
        if (*sample_cmd) return cmd_sample(c_sample, ckpt_sample, count, seed, out_sample);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const SingleClassError& e) {
        std::cerr << "evaluation error: " << e.what() << "\n";
        return kSingleClass;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
