#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "denoiser.hpp"
#include "diffusion.hpp"
#include "pipeline.hpp"
#include "training.hpp"

namespace diffad {

struct ConfigKey {
    std::string name;
    std::string default_value;
    std::string doc;
};

/// Every accepted key with its default.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"data.modality", "image", "image | timeseries"},
        {"data.path", "synthetic", "MVTec-style root, CSV file, or 'synthetic'"},
        {"data.resolution", "32", "square image size after resize"},
        {"data.channels", "1", "image channels (1 or 3)"},
        {"data.window", "64", "time-series window width"},
        {"data.stride", "16", "time-series window stride"},
        {"data.value_column", "value", "CSV value column"},
        {"data.label_column", "label", "CSV label column (absent: all normal)"},
        {"data.train_fraction", "0.5", "leading share of a CSV series used for training"},
        {"data.synth_seed", "0", "seed of the synthetic generators"},
        {"data.synth_train", "64", "synthetic training normals"},
        {"data.synth_test_normal", "32", "synthetic test normals"},
        {"data.synth_test_anomalous", "32", "synthetic test anomalies"},
        {"cwt.scales", "32", "scalogram rows"},
        {"cwt.sampling_rate", "1", "samples per unit time"},
        {"model.base_channels", "32", "channels of the first encoder stage"},
        {"model.depth", "2", "encoder/decoder stages"},
        {"model.heads", "4", "attention heads (0 removes attention)"},
        {"model.head_dim", "8", "per-head key width"},
        {"model.wavelet_levels", "2", "wavelet pyramid levels (0 removes it)"},
        {"model.wavelet_filter", "db2", "haar | db1 | db2 | db3 | db4"},
        {"model.time_embed_dim", "64", "time embedding width"},
        {"diffusion.T", "1000", "diffusion steps"},
        {"diffusion.beta_start", "0.0001", "first beta"},
        {"diffusion.beta_end", "0.02", "last beta"},
        {"diffusion.t_star_fraction", "0.4", "partial-noising depth as a share of T"},
        {"perception.seed", "7", "seed of the frozen feature network"},
        {"perception.external_weights_path", "", "optional feature-network weight file"},
        {"train.epochs", "10", "passes over the training set"},
        {"train.batch_size", "16", "samples per step"},
        {"train.learning_rate", "0.001", "optimizer step size"},
        {"train.gamma", "0.1", "weight of the feature loss"},
        {"train.seed", "0", "training seed (falls back to DIFFUSION_AD_SEED)"},
        {"train.checkpoint_path", "model.ckpt", "checkpoint output"},
        {"train.checkpoint_every", "0", "periodic checkpoint interval in steps (0: off)"},
        {"train.log_path", "train_log.csv", "per-step loss log"},
        {"score.lambda", "0.5", "weight of E_recon in the score"},
        {"score.normalize", "false", "z-normalize both errors over the set"},
        {"score.map_radius", "0", "box-blur radius of the anomaly map"},
        {"eval.seed", "0", "reconstruction seed (falls back to DIFFUSION_AD_SEED)"},
        {"eval.threads", "1", "evaluation threads"},
        {"eval.batch_size", "16", "samples reconstructed together"},
        {"eval.output_path", "scores.csv", "per-sample score CSV"},
    };
    return keys;
}

/// Merged key/value view: defaults, then config file, then overrides.
class RunConfig {
  public:
    RunConfig() {
        for (const auto& k : config_keys()) values_[k.name] = k.default_value;
    }

    static bool known(const std::string& key) {
        const auto& ks = config_keys();
        return std::any_of(ks.begin(), ks.end(), [&](const ConfigKey& k) { return k.name == key; });
    }

    void set(const std::string& key, const std::string& value) {
        if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
        explicit_.insert(key);
    }

    /// "key=value"
    void set_assignment(const std::string& kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    /// `key = value` lines; '#' starts a comment; blank lines ignored.
    void load_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
        std::string line;
        std::size_t no = 0;
        while (std::getline(in, line)) {
            ++no;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path.string() + ":" + std::to_string(no) + ": expected 'key = value'");
            }
            const std::string key = trim(line.substr(0, eq));
            if (!known(key)) throw ConfigError(path.string() + ":" + std::to_string(no) + ": unknown config key '" + key + "'");
            set(key, trim(line.substr(eq + 1)));
        }
    }

    bool is_explicit(const std::string& key) const { return explicit_.count(key) != 0; }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    std::uint64_t u64(const std::string& key) const {
        const auto& s = str(key);
        std::uint64_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
            throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + s + "'");
        }
        return v;
    }

    std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

    double real(const std::string& key) const {
        const auto& s = str(key);
        double v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
        }
        return v;
    }

    bool flag(const std::string& key) const {
        const auto& s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
    }

    /// Seed keys fall back to DIFFUSION_AD_SEED when not set explicitly.
    std::uint64_t seed(const std::string& key) const {
        if (!is_explicit(key)) {
            if (const char* env = std::getenv("DIFFUSION_AD_SEED"); env && *env) {
                std::string s(env);
                std::uint64_t v = 0;
                auto r = std::from_chars(s.data(), s.data() + s.size(), v);
                if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
                    throw ConfigError("DIFFUSION_AD_SEED must be a nonnegative integer, got '" + s + "'");
                }
                return v;
            }
        }
        return u64(key);
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

  private:
    std::map<std::string, std::string> values_;
    std::set<std::string> explicit_;
};

inline Modality modality_of(const RunConfig& rc) { return parse_modality(rc.str("data.modality")); }

inline ModelConfig model_config_of(const RunConfig& rc) {
    ModelConfig c;
    c.base_channels = rc.size("model.base_channels");
    c.depth = rc.size("model.depth");
    c.heads = rc.size("model.heads");
    c.head_dim = rc.size("model.head_dim");
    c.wavelet_levels = rc.size("model.wavelet_levels");
    c.wavelet_filter = rc.str("model.wavelet_filter");
    c.time_embed_dim = rc.size("model.time_embed_dim");
    c.input_channels = modality_of(rc) == Modality::Image ? rc.size("data.channels") : 1;
    c.validate();
    return c;
}

inline ScheduleParams schedule_of(const RunConfig& rc) {
    ScheduleParams p;
    p.steps = rc.size("diffusion.T");
    p.beta_start = rc.real("diffusion.beta_start");
    p.beta_end = rc.real("diffusion.beta_end");
    try {
        (void)p.build();
    } catch (const ValueError& e) {
        throw ConfigError(std::string("diffusion schedule: ") + e.what());
    }
    return p;
}

inline TrainConfig train_config_of(const RunConfig& rc) {
    TrainConfig t;
    t.epochs = rc.size("train.epochs");
    t.batch_size = rc.size("train.batch_size");
    t.learning_rate = rc.real("train.learning_rate");
    t.gamma = rc.real("train.gamma");
    t.seed = rc.seed("train.seed");
    t.t_star_fraction = rc.real("diffusion.t_star_fraction");
    t.perception_seed = rc.u64("perception.seed");
    t.checkpoint_path = rc.str("train.checkpoint_path");
    t.checkpoint_every = rc.size("train.checkpoint_every");
    t.validate();
    return t;
}

inline EvalConfig eval_config_of(const RunConfig& rc) {
    EvalConfig e;
    e.t_star_fraction = rc.real("diffusion.t_star_fraction");
    if (!(e.t_star_fraction > 0.0 && e.t_star_fraction <= 1.0)) {
        throw ConfigError("diffusion.t_star_fraction must lie in (0,1]");
    }
    e.score.lambda = rc.real("score.lambda");
    e.score.normalize = rc.flag("score.normalize");
    if (!(e.score.lambda >= 0.0 && e.score.lambda <= 1.0)) throw ConfigError("score.lambda must lie in [0,1]");
    e.seed = rc.seed("eval.seed");
    e.threads = std::max<std::size_t>(1, rc.size("eval.threads"));
    e.batch_size = std::max<std::size_t>(1, rc.size("eval.batch_size"));
    e.map_radius = rc.size("score.map_radius");
    return e;
}

inline WindowSpec window_of(const RunConfig& rc) {
    WindowSpec w{rc.size("data.window"), rc.size("data.stride")};
    w.validate();
    return w;
}

inline ScalogramTransform scalogram_of(const RunConfig& rc) {
    ScalogramTransform st;
    st.num_scales = rc.size("cwt.scales");
    st.sampling_rate = rc.real("cwt.sampling_rate");
    // the feature network needs at least 16 rows
    if (st.num_scales < 16) throw ConfigError("cwt.scales must be >= 16");
    if (!(st.sampling_rate > 0)) throw ConfigError("cwt.sampling_rate must be > 0");
    return st;
}

/// Train/test samples as configured. Time-series splits put the leading
/// `data.train_fraction` of a CSV series in training (normal windows only).
inline Split load_dataset(const RunConfig& rc) {
    const Modality m = modality_of(rc);
    const std::string path = rc.str("data.path");
    if (m == Modality::Image && rc.size("data.resolution") < 16) throw ConfigError("data.resolution must be >= 16");
    if (m == Modality::TimeSeries && rc.size("data.window") < 16) throw ConfigError("data.window must be >= 16");
    if (path == "synthetic") {
        if (m == Modality::Image) {
            SynthImageSpec s;
            s.seed = rc.u64("data.synth_seed");
            s.n_train = rc.size("data.synth_train");
            s.n_test_normal = rc.size("data.synth_test_normal");
            s.n_test_anomalous = rc.size("data.synth_test_anomalous");
            s.size = rc.size("data.resolution");
            if (s.size < 16 || (s.size & (s.size - 1)) != 0) throw ConfigError("data.resolution must be a power of two >= 16 for synthetic data");
            return synth_image_dataset(s);
        }
        SynthSeriesSpec s;
        s.seed = rc.u64("data.synth_seed");
        s.n_train = rc.size("data.synth_train");
        s.n_test_normal = rc.size("data.synth_test_normal");
        s.n_test_anomalous = rc.size("data.synth_test_anomalous");
        s.window = rc.size("data.window");
        if (s.window < 32) throw ConfigError("data.window must be >= 32 for synthetic data");
        return synth_timeseries_dataset(s);
    }
    if (!std::filesystem::exists(path)) throw DataError("dataset path '" + path + "' does not exist");
    if (m == Modality::Image) {
        auto sp = load_image_dir(path, rc.size("data.resolution"), rc.size("data.channels"));
        assert_train_normal(sp.train);
        return sp;
    }
    auto series = load_timeseries_csv(path, rc.str("data.value_column"), rc.str("data.label_column"));
    const double frac = rc.real("data.train_fraction");
    if (!(frac > 0.0 && frac < 1.0)) throw ConfigError("data.train_fraction must lie in (0,1)");
    const auto spec = window_of(rc);
    const auto cut = static_cast<std::size_t>(frac * static_cast<double>(series.values.size()));
    Split sp;
    auto head_v = std::vector<double>(series.values.begin(), series.values.begin() + static_cast<long>(cut));
    auto head_l = std::vector<int>(series.labels.begin(), series.labels.begin() + static_cast<long>(cut));
    for (auto& w : sliding_windows(head_v, head_l, spec, "train_"))
        if (w.label == 0) sp.train.push_back(std::move(w));
    auto tail_v = std::vector<double>(series.values.begin() + static_cast<long>(cut), series.values.end());
    auto tail_l = std::vector<int>(series.labels.begin() + static_cast<long>(cut), series.labels.end());
    sp.test = sliding_windows(tail_v, tail_l, spec, "test_");
    return sp;
}

}  // namespace diffad
