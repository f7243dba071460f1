#include "brnn/config.hpp"

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnn/errors.hpp"

namespace brnn {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (allowed.find(key) == allowed.end()) {
            throw ConfigError("unknown config key \"" + key + "\" in " +
                              where);
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T* out) {
    if (j.contains(key)) {
        *out = j.at(key).get<T>();
    }
}

void read_driver(const json& j, const std::string& where,
                 CarDriverParams* d) {
    check_keys(j, {"v0", "t_hw", "a_max", "b", "s0", "accel_noise_sd"},
               where);
    read(j, "v0", &d->v0);
    read(j, "t_hw", &d->t_hw);
    read(j, "a_max", &d->a_max);
    read(j, "b", &d->b);
    read(j, "s0", &d->s0);
    read(j, "accel_noise_sd", &d->accel_noise_sd);
}

json driver_json(const CarDriverParams& d) {
    return {{"v0", d.v0},       {"t_hw", d.t_hw},
            {"a_max", d.a_max}, {"b", d.b},
            {"s0", d.s0},       {"accel_noise_sd", d.accel_noise_sd}};
}

json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& where) {
    const int rows = static_cast<int>(j.size());
    if (rows == 0) {
        return {};
    }
    const int cols = static_cast<int>(j.at(0).size());
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        if (static_cast<int>(j.at(r).size()) != cols) {
            throw ConfigError("ragged matrix in " + where);
        }
        for (int c = 0; c < cols; ++c) {
            m(r, c) = j.at(r).at(c).get<double>();
        }
    }
    return m;
}

}  // namespace

ExperimentConfig default_experiment_config(const std::string& scenario) {
    ExperimentConfig cfg;
    cfg.scenario = scenario;
    if (scenario == "toy") {
        cfg.n_trajectories = 5000;
        cfg.window = {0, 15};
        cfg.train.alpha = 1.0;
        cfg.train.batch_size = 50;
        cfg.train.mc_samples = 100;
        cfg.train.epochs = 200;
        cfg.train.horizon = 1;
    } else if (scenario == "car_following" || scenario == "csv") {
        cfg.n_trajectories = 500;
        cfg.window = {9, 30};
        cfg.train.alpha = 0.5;
        cfg.train.batch_size = 250;
        cfg.train.mc_samples = 1000;
        cfg.train.epochs = 100;
        cfg.train.horizon = 1;
    } else {
        throw ConfigError("unknown scenario \"" + scenario + "\"");
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }

    check_keys(j,
               {"scenario", "csv_path", "n_trajectories", "toy", "car",
                "window", "train", "adapt", "eval", "output_dir", "seed",
                "threads"},
               path);

    std::string scenario = "toy";
    read(j, "scenario", &scenario);
    ExperimentConfig cfg = default_experiment_config(
        scenario == "csv" ? "csv" : scenario);
    cfg.scenario = scenario;
    try {
        read(j, "csv_path", &cfg.csv_path);
        read(j, "n_trajectories", &cfg.n_trajectories);
        read(j, "output_dir", &cfg.output_dir);
        read(j, "seed", &cfg.seed);
        read(j, "threads", &cfg.threads);

        if (j.contains("toy")) {
            const json& t = j.at("toy");
            check_keys(t,
                       {"x0", "gamma", "mu1", "mu2", "var1", "var2", "p1",
                        "p2", "var_zeta", "horizon"},
                       "toy");
            read(t, "x0", &cfg.toy.x0);
            read(t, "gamma", &cfg.toy.gamma_toy);
            read(t, "mu1", &cfg.toy.mu1);
            read(t, "mu2", &cfg.toy.mu2);
            read(t, "var1", &cfg.toy.var1);
            read(t, "var2", &cfg.toy.var2);
            read(t, "p1", &cfg.toy.p1);
            read(t, "p2", &cfg.toy.p2);
            read(t, "var_zeta", &cfg.toy.var_zeta);
            read(t, "horizon", &cfg.toy.horizon);
        }
        if (j.contains("car")) {
            const json& c = j.at("car");
            check_keys(c,
                       {"steps", "dt", "p_aggressive", "aggressive",
                        "timid"},
                       "car");
            read(c, "steps", &cfg.car.steps);
            read(c, "dt", &cfg.car.dt);
            read(c, "p_aggressive", &cfg.car.p_aggressive);
            if (c.contains("aggressive")) {
                read_driver(c.at("aggressive"), "car.aggressive",
                            &cfg.car.aggressive);
            }
            if (c.contains("timid")) {
                read_driver(c.at("timid"), "car.timid", &cfg.car.timid);
            }
        }
        if (j.contains("window")) {
            const json& w = j.at("window");
            check_keys(w, {"m", "h"}, "window");
            read(w, "m", &cfg.window.m);
            read(w, "h", &cfg.window.h);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            check_keys(t,
                       {"alpha", "learning_rate", "batch_size",
                        "mc_samples", "epochs", "horizon", "clip_norm",
                        "train_sigma_omega", "val_batch_cap"},
                       "train");
            read(t, "alpha", &cfg.train.alpha);
            read(t, "learning_rate", &cfg.train.learning_rate);
            read(t, "batch_size", &cfg.train.batch_size);
            read(t, "mc_samples", &cfg.train.mc_samples);
            read(t, "epochs", &cfg.train.epochs);
            read(t, "horizon", &cfg.train.horizon);
            read(t, "clip_norm", &cfg.train.clip_norm);
            read(t, "train_sigma_omega", &cfg.train.train_sigma_omega);
            read(t, "val_batch_cap", &cfg.train.val_batch_cap);
        }
        if (j.contains("adapt")) {
            const json& a = j.at("adapt");
            check_keys(a,
                       {"update_period", "particles", "sigma_v",
                        "variance_floor"},
                       "adapt");
            read(a, "update_period", &cfg.adapt.update_period);
            read(a, "particles", &cfg.adapt.particles);
            read(a, "variance_floor", &cfg.adapt.variance_floor);
            if (a.contains("sigma_v")) {
                cfg.adapt.sigma_v =
                    matrix_from_json(a.at("sigma_v"), "adapt.sigma_v");
            }
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            check_keys(e, {"samples", "histogram_bins", "horizon_split"},
                       "eval");
            read(e, "samples", &cfg.eval.samples);
            read(e, "histogram_bins", &cfg.eval.histogram_bins);
            read(e, "horizon_split", &cfg.eval.horizon_split);
        }
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }

    if (cfg.scenario != "toy" && cfg.scenario != "car_following" &&
        cfg.scenario != "csv") {
        throw ConfigError("unknown scenario \"" + cfg.scenario + "\"");
    }
    if (cfg.scenario == "csv" && cfg.csv_path.empty()) {
        throw ConfigError("scenario \"csv\" requires csv_path");
    }
    if (cfg.window.m < 0 || cfg.window.h < 1) {
        throw ConfigError("window needs m >= 0 and h >= 1");
    }
    if (cfg.train.alpha <= 0.0) {
        throw ConfigError("alpha must be positive (use 1e-6 for the "
                          "KL-like limit)");
    }
    if (cfg.train.batch_size < 1 || cfg.train.mc_samples < 1 ||
        cfg.train.horizon < 1 || cfg.train.epochs < 0) {
        throw ConfigError("train sizes must be positive");
    }
    if (cfg.threads < 1) {
        throw ConfigError("threads must be >= 1");
    }
    return cfg;
}

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::string& path) {
    json j;
    j["scenario"] = cfg.scenario;
    j["csv_path"] = cfg.csv_path;
    j["n_trajectories"] = cfg.n_trajectories;
    j["toy"] = {{"x0", cfg.toy.x0},
                {"gamma", cfg.toy.gamma_toy},
                {"mu1", cfg.toy.mu1},
                {"mu2", cfg.toy.mu2},
                {"var1", cfg.toy.var1},
                {"var2", cfg.toy.var2},
                {"p1", cfg.toy.p1},
                {"p2", cfg.toy.p2},
                {"var_zeta", cfg.toy.var_zeta},
                {"horizon", cfg.toy.horizon}};
    j["car"] = {{"steps", cfg.car.steps},
                {"dt", cfg.car.dt},
                {"p_aggressive", cfg.car.p_aggressive},
                {"aggressive", driver_json(cfg.car.aggressive)},
                {"timid", driver_json(cfg.car.timid)}};
    j["window"] = {{"m", cfg.window.m}, {"h", cfg.window.h}};
    j["train"] = {{"alpha", cfg.train.alpha},
                  {"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"mc_samples", cfg.train.mc_samples},
                  {"epochs", cfg.train.epochs},
                  {"horizon", cfg.train.horizon},
                  {"clip_norm", cfg.train.clip_norm},
                  {"train_sigma_omega", cfg.train.train_sigma_omega},
                  {"val_batch_cap", cfg.train.val_batch_cap}};
    j["adapt"] = {{"update_period", cfg.adapt.update_period},
                  {"particles", cfg.adapt.particles},
                  {"sigma_v", matrix_json(cfg.adapt.sigma_v)},
                  {"variance_floor", cfg.adapt.variance_floor}};
    j["eval"] = {{"samples", cfg.eval.samples},
                 {"histogram_bins", cfg.eval.histogram_bins},
                 {"horizon_split", cfg.eval.horizon_split}};
    j["output_dir"] = cfg.output_dir;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;

    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot open " + path + " for writing");
    }
    out << j.dump(2) << '\n';
}

}  // namespace brnn
