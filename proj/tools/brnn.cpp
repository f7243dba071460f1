#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "brnn/adaptation.hpp"
#include "brnn/config.hpp"
#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/errors.hpp"
#include "brnn/gmm.hpp"
#include "brnn/metrics.hpp"
#include "brnn/policy.hpp"
#include "brnn/rollout.hpp"
#include "brnn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Options every subcommand shares; resolved into an ExperimentConfig after
// parsing with flag > BRNN_SEED > config-file precedence for the seed.
struct Shared {
    std::string config_path;
    std::string scenario = "toy";
    std::uint64_t seed = 0;
    double alpha = 1.0;
    int horizon = 1;
    int samples = 100;
    int threads = 1;
    int n_trajectories = 5000;
    std::string output_dir;

    CLI::Option* scenario_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* alpha_opt = nullptr;
    CLI::Option* horizon_opt = nullptr;
    CLI::Option* samples_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
    CLI::Option* n_opt = nullptr;
    CLI::Option* output_opt = nullptr;
};

void add_shared(CLI::App* cmd, Shared* s) {
    cmd->add_option("--config", s->config_path,
                    "JSON experiment config; flags override its values");
    s->scenario_opt = cmd->add_option(
        "--scenario", s->scenario, "toy | car_following | csv");
    s->seed_opt = cmd->add_option("--seed", s->seed, "master random seed");
    s->alpha_opt =
        cmd->add_option("--alpha", s->alpha, "divergence parameter");
    s->horizon_opt = cmd->add_option("--horizon", s->horizon,
                                     "training horizon h for the energy");
    s->samples_opt = cmd->add_option(
        "--samples", s->samples, "Monte Carlo samples for prediction/eval");
    s->threads_opt =
        cmd->add_option("--threads", s->threads, "worker thread cap");
    s->n_opt = cmd->add_option("--n", s->n_trajectories,
                               "trajectories to generate");
    s->output_opt =
        cmd->add_option("--output-dir", s->output_dir, "output directory");
}

brnn::ExperimentConfig resolve(const Shared& s) {
    brnn::ExperimentConfig cfg;
    if (!s.config_path.empty()) {
        cfg = brnn::load_experiment_config(s.config_path);
        if (s.scenario_opt->count() > 0) {
            cfg.scenario = s.scenario;
        }
    } else {
        cfg = brnn::default_experiment_config(s.scenario);
    }
    if (s.seed_opt->count() > 0) {
        cfg.seed = s.seed;
    } else if (const char* env = std::getenv("BRNN_SEED")) {
        char* end = nullptr;
        const std::uint64_t v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') {
            throw brnn::ConfigError("BRNN_SEED is not an integer");
        }
        cfg.seed = v;
    }
    if (s.alpha_opt->count() > 0) {
        cfg.train.alpha = s.alpha;
    }
    if (s.horizon_opt->count() > 0) {
        cfg.train.horizon = s.horizon;
    }
    if (s.samples_opt->count() > 0) {
        cfg.eval.samples = s.samples;
    }
    if (s.threads_opt->count() > 0) {
        cfg.threads = s.threads;
    }
    if (s.n_opt->count() > 0) {
        cfg.n_trajectories = s.n_trajectories;
    }
    if (s.output_opt->count() > 0) {
        cfg.output_dir = s.output_dir;
    }
    if (cfg.train.alpha <= 0.0) {
        throw brnn::ConfigError("alpha must be positive");
    }
    if (cfg.threads < 1) {
        throw brnn::ConfigError("threads must be >= 1");
    }
    return cfg;
}

brnn::Dataset build_dataset(const brnn::ExperimentConfig& cfg) {
    if (cfg.scenario == "toy") {
        return brnn::make_dataset(
            brnn::gen_toy_trajectories(cfg.toy, cfg.n_trajectories,
                                       cfg.seed),
            cfg.window, 0, cfg.seed);
    }
    if (cfg.scenario == "car_following") {
        return brnn::make_dataset(
            brnn::gen_car_trajectories(cfg.car, cfg.n_trajectories,
                                       cfg.seed),
            cfg.window, 2, cfg.seed);
    }
    return brnn::load_trajectories_csv(cfg.csv_path, cfg.window, cfg.seed);
}

brnn::DynamicsSpec scenario_dynamics(const brnn::ExperimentConfig& cfg) {
    return cfg.scenario == "toy" ? brnn::toy_brnn_dynamics()
                                 : brnn::car_following_dynamics();
}

brnn::NetworkShape scenario_shape(const brnn::ExperimentConfig& cfg,
                                  const brnn::Dataset& data) {
    const int input =
        (cfg.window.m + 1) * data.state_dim + 1;  // features + z
    brnn::NetworkShape shape;
    if (cfg.scenario == "toy") {
        shape.layer_sizes = {input, 50, 50, 1};
    } else {
        shape.layer_sizes = {input, 50, 50, 50, 2};
    }
    return shape;
}

std::vector<std::string> state_names(const brnn::ExperimentConfig& cfg) {
    if (cfg.scenario == "toy") {
        return {"x"};
    }
    return {"d_pq", "v_p", "v_q"};
}

// Pooled population variance of the recovered target action over every
// transition of the training trajectories; seeds Σ_ε at data scale.
Eigen::VectorXd action_variance(const brnn::Dataset& data,
                                const brnn::DynamicsSpec& dyn) {
    const int ad = dyn.target_action_dim;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(ad);
    Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(ad);
    std::int64_t count = 0;
    for (int id : data.train_ids) {
        const brnn::Trajectory& traj = data.trajectories[id];
        const int steps = static_cast<int>(traj.states.rows()) - 1;
        for (int t = 0; t < steps; ++t) {
            const Eigen::VectorXd a_q =
                dyn.ego_action_dim > 0
                    ? Eigen::VectorXd(traj.ego_actions.row(t).transpose())
                    : Eigen::VectorXd(0);
            const Eigen::VectorXd a = brnn::recover_target_action(
                dyn, traj.states.row(t).transpose(),
                traj.states.row(t + 1).transpose(), a_q);
            sum += a;
            sum_sq += a.cwiseProduct(a);
            ++count;
        }
    }
    if (count == 0) {
        throw brnn::ConfigError("no transitions to estimate Σ_ε from");
    }
    const Eigen::VectorXd mean = sum / double(count);
    Eigen::VectorXd var =
        sum_sq / double(count) - mean.cwiseProduct(mean);
    return var.cwiseMax(1e-6);
}

const std::vector<brnn::TrajectoryRecord>& eval_records(
    const brnn::Dataset& data) {
    if (!data.test.empty()) {
        return data.test;
    }
    if (!data.val.empty()) {
        return data.val;
    }
    return data.train;
}

void check_model_matches(const brnn::VariationalPosterior& q,
                         const brnn::Dataset& data) {
    const int feat = (data.window.m + 1) * data.state_dim;
    if (static_cast<int>(q.normalizer.mean.size()) != feat) {
        throw brnn::ConfigError(
            "model window/state shape does not match this config");
    }
}

void write_diagnostic(const std::string& output_dir,
                      const std::string& message) {
    std::error_code ec;
    fs::create_directories(output_dir, ec);
    std::ofstream out(fs::path(output_dir) / "diagnostic.txt");
    out << message << '\n';
}

int run_gen_data(const brnn::ExperimentConfig& cfg) {
    const brnn::Dataset data = build_dataset(cfg);
    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    std::string data_file;
    if (cfg.scenario == "toy") {
        data_file = (out / "toy_data.csv").string();
        brnn::save_toy_csv(data.trajectories, data_file);
    } else {
        data_file = (out / "car_data.csv").string();
        brnn::save_car_csv(data.trajectories, data_file);
    }
    brnn::save_manifest(data, cfg.seed, (out / "manifest.json").string());
    std::cout << "wrote " << data.trajectories.size() << " trajectories ("
              << data.train.size() << " train / " << data.val.size()
              << " val / " << data.test.size() << " test records) to "
              << data_file << '\n';
    return 0;
}

int run_train(const brnn::ExperimentConfig& cfg, bool with_baseline) {
    const brnn::Dataset data = build_dataset(cfg);
    const brnn::DynamicsSpec dyn = scenario_dynamics(cfg);
    brnn::Rng rng(cfg.seed);

    brnn::VariationalPosterior q0 = brnn::init_posterior(
        scenario_shape(cfg, data), data.normalizer,
        action_variance(data, dyn),
        static_cast<std::int64_t>(data.train.size()), rng);
    const brnn::TrainResult res =
        brnn::train(q0, data, dyn, cfg.train, rng);

    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    brnn::save_model(res.posterior, (out / "model.json").string());
    brnn::save_energy_trace_csv(res.trace,
                                (out / "energy_trace.csv").string());
    brnn::save_experiment_config(cfg, (out / "config_used.json").string());

    json summary;
    summary["best_epoch"] = res.best_epoch;
    summary["diverged"] = res.diverged;
    summary["epochs_run"] = res.trace.size();
    summary["train_records"] = data.train.size();
    summary["val_records"] = data.val.size();
    summary["sigma_omega"] = std::vector<double>(
        res.sigma_omega.data(),
        res.sigma_omega.data() + res.sigma_omega.size());
    {
        std::ofstream f(out / "train_summary.json");
        f << summary.dump(2) << '\n';
    }

    if (with_baseline) {
        const std::vector<Eigen::VectorXd> joint =
            brnn::gmm_joint_samples(data.train, dyn, data.normalizer);
        const int k = cfg.scenario == "toy" ? 10 : 20;
        brnn::GmmFitResult fit = brnn::fit_em(joint, k, {}, rng);
        fit.model.feature_dim =
            static_cast<int>(data.normalizer.mean.size());
        brnn::save_gmm(fit.model, (out / "gmm.json").string());
        std::ofstream f(out / "gmm_trace.csv");
        f << "iteration,mean_loglik\n";
        for (std::size_t i = 0; i < fit.loglik_trace.size(); ++i) {
            f << i << ',' << fmt17(fit.loglik_trace[i]) << '\n';
        }
    }

    if (res.diverged) {
        write_diagnostic(cfg.output_dir,
                         "training diverged (non-finite energy); partial "
                         "artifacts were written");
        std::cerr << "training diverged\n";
        return 2;
    }
    std::cout << "trained " << res.trace.size() << " epochs, best epoch "
              << res.best_epoch << ", model at "
              << (out / "model.json").string() << '\n';
    return 0;
}

int run_predict(const brnn::ExperimentConfig& cfg,
                const std::string& model_path, int record_index,
                int horizon) {
    const brnn::Dataset data = build_dataset(cfg);
    const brnn::DynamicsSpec dyn = scenario_dynamics(cfg);
    const auto& records = eval_records(data);
    if (record_index < 0 ||
        record_index >= static_cast<int>(records.size())) {
        throw brnn::ConfigError("record index out of range (have " +
                                std::to_string(records.size()) + ")");
    }
    const brnn::TrajectoryRecord& rec = records[record_index];
    const int h = horizon > 0 ? horizon : cfg.window.h;
    if (h > rec.future.rows()) {
        throw brnn::ConfigError("prediction horizon exceeds the record");
    }

    const brnn::VariationalPosterior q = brnn::load_model(model_path);
    check_model_matches(q, data);
    brnn::Rng rng(cfg.seed);
    brnn::PredictionRequest req;
    req.history = rec.history;
    req.ego_actions = dyn.ego_action_dim > 0
                          ? Eigen::MatrixXd(rec.ego_actions.topRows(h))
                          : Eigen::MatrixXd(0, 0);
    req.horizon = h;
    const std::vector<brnn::SampledTrajectory> samples =
        brnn::predict_distribution(q, req, dyn, cfg.eval.samples, rng);

    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    brnn::save_samples_csv(samples, state_names(cfg),
                           (out / "samples.csv").string());
    {
        std::ofstream f(out / "actual.csv");
        f << "step";
        for (const std::string& name : state_names(cfg)) {
            f << ',' << name;
        }
        f << '\n';
        for (int i = 0; i < h; ++i) {
            f << i + 1;
            for (int c = 0; c < data.state_dim; ++c) {
                f << ',' << fmt17(rec.future(i, c));
            }
            f << '\n';
        }
    }
    std::cout << "wrote " << samples.size() << " sampled futures to "
              << (out / "samples.csv").string() << '\n';
    return 0;
}

int run_adapt(const brnn::ExperimentConfig& cfg,
              const std::string& model_path, int trajectory_index) {
    const brnn::Dataset data = build_dataset(cfg);
    const brnn::DynamicsSpec dyn = scenario_dynamics(cfg);
    const std::vector<int>& ids =
        data.test_ids.empty() ? data.train_ids : data.test_ids;
    if (trajectory_index < 0 ||
        trajectory_index >= static_cast<int>(ids.size())) {
        throw brnn::ConfigError("trajectory index out of range (have " +
                                std::to_string(ids.size()) + ")");
    }
    const brnn::Trajectory& traj =
        data.trajectories[ids[trajectory_index]];

    const brnn::VariationalPosterior q0 = brnn::load_model(model_path);
    check_model_matches(q0, data);
    brnn::Rng rng(cfg.seed);
    const brnn::AdaptStreamResult res = brnn::adapt_stream(
        q0, traj.states, traj.ego_actions, dyn, cfg.adapt, rng);

    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    brnn::save_adapt_log_csv(res.log, (out / "adapt_log.csv").string());
    for (std::size_t i = 0; i < res.posteriors.size(); ++i) {
        char name[48];
        std::snprintf(name, sizeof(name), "model_update_%03zu.json", i);
        brnn::save_model(res.posteriors[i], (out / name).string());
    }
    std::cout << "ran " << res.posteriors.size() << " adaptation updates, "
              << "log at " << (out / "adapt_log.csv").string() << '\n';
    return 0;
}

int run_eval(const brnn::ExperimentConfig& cfg,
             const std::string& model_path, const std::string& gmm_path,
             int limit) {
    const brnn::Dataset data = build_dataset(cfg);
    const brnn::DynamicsSpec dyn = scenario_dynamics(cfg);
    const auto& pool = eval_records(data);
    const int count =
        limit > 0 ? std::min<int>(limit, static_cast<int>(pool.size()))
                  : static_cast<int>(pool.size());
    if (count == 0) {
        throw brnn::ConfigError("no records to evaluate");
    }

    brnn::Rng rng(cfg.seed);
    std::vector<Eigen::VectorXd> per_step;
    per_step.reserve(count);
    double total_mean = 0.0;
    if (gmm_path.empty()) {
        const brnn::VariationalPosterior q = brnn::load_model(model_path);
        check_model_matches(q, data);
        for (int i = 0; i < count; ++i) {
            const brnn::LogLikSeries series = brnn::estimate_log_likelihood(
                q, pool[i], dyn, cfg.eval.samples, rng);
            per_step.push_back(series.per_step);
            total_mean += series.total;
        }
    } else {
        const brnn::GmmModel model = brnn::load_gmm(gmm_path);
        for (int i = 0; i < count; ++i) {
            const brnn::LogLikSeries series =
                brnn::estimate_log_likelihood_gmm(model, data.normalizer,
                                                  pool[i], dyn,
                                                  cfg.eval.samples, rng);
            per_step.push_back(series.per_step);
            total_mean += series.total;
        }
    }
    total_mean /= count;

    const int h = static_cast<int>(per_step.front().size());
    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    {
        std::ofstream f(out / "metrics.csv");
        f << "step,mean_loglik,stddev_loglik\n";
        for (int i = 0; i < h; ++i) {
            double mean = 0.0;
            for (const Eigen::VectorXd& series : per_step) {
                mean += series[i];
            }
            mean /= count;
            double ss = 0.0;
            for (const Eigen::VectorXd& series : per_step) {
                ss += (series[i] - mean) * (series[i] - mean);
            }
            const double sd =
                count > 1 ? std::sqrt(ss / (count - 1)) : 0.0;
            f << i + 1 << ',' << fmt17(mean) << ',' << fmt17(sd) << '\n';
        }
    }
    const auto [head, tail] = brnn::split_horizon_summary(
        per_step, cfg.eval.horizon_split);
    json summary;
    summary["records"] = count;
    summary["samples"] = cfg.eval.samples;
    summary["horizon"] = h;
    summary["horizon_split"] = cfg.eval.horizon_split;
    summary["model"] = gmm_path.empty() ? "bnn" : "gmm";
    summary["total_loglik_mean"] = total_mean;
    summary["first_segment"] = {{"mean", head.mean},
                                {"stddev", head.stddev}};
    summary["second_segment"] = {{"mean", tail.mean},
                                 {"stddev", tail.stddev}};
    {
        std::ofstream f(out / "summary.json");
        f << summary.dump(2) << '\n';
    }
    std::cout << "evaluated " << count << " records, mean total loglik "
              << total_mean << '\n';
    return 0;
}

int run_plot_data(const brnn::ExperimentConfig& cfg,
                  const std::string& model_path, const std::string& steps,
                  int component, int limit) {
    const brnn::Dataset data = build_dataset(cfg);
    const brnn::DynamicsSpec dyn = scenario_dynamics(cfg);
    const auto& pool = eval_records(data);
    const int count =
        std::min<int>(limit > 0 ? limit : 50,
                      static_cast<int>(pool.size()));
    if (count == 0) {
        throw brnn::ConfigError("no records to plot");
    }
    if (component < 0 || component >= data.state_dim) {
        throw brnn::ConfigError("state component out of range");
    }

    std::vector<int> requested;
    std::stringstream ss(steps);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        requested.push_back(std::stoi(tok));
    }
    const int h = cfg.window.h;
    for (int k : requested) {
        if (k < 1 || k > h) {
            throw brnn::ConfigError("requested step out of horizon");
        }
    }

    const brnn::VariationalPosterior q = brnn::load_model(model_path);
    check_model_matches(q, data);
    brnn::Rng rng(cfg.seed);

    std::vector<std::vector<double>> predicted(h), actual(h);
    for (int i = 0; i < count; ++i) {
        const brnn::TrajectoryRecord& rec = pool[i];
        brnn::PredictionRequest req;
        req.history = rec.history;
        req.ego_actions = dyn.ego_action_dim > 0
                              ? Eigen::MatrixXd(rec.ego_actions)
                              : Eigen::MatrixXd(0, 0);
        req.horizon = h;
        const auto samples = brnn::predict_distribution(
            q, req, dyn, cfg.eval.samples, rng);
        for (int t = 0; t < h; ++t) {
            actual[t].push_back(rec.future(t, component));
            for (const brnn::SampledTrajectory& s : samples) {
                predicted[t].push_back(s.states(t, component));
            }
        }
    }

    std::vector<Eigen::VectorXd> series_loglik;
    series_loglik.reserve(count);
    for (int i = 0; i < count; ++i) {
        series_loglik.push_back(
            brnn::estimate_log_likelihood(q, pool[i], dyn,
                                          cfg.eval.samples, rng)
                .per_step);
    }

    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    const brnn::HistogramSpec spec{cfg.eval.histogram_bins, 0.01, 1e-9};
    {
        std::ofstream f(out / "series.csv");
        f << "step,kl,mean_loglik\n";
        for (int t = 0; t < h; ++t) {
            const double kl =
                brnn::kl_from_histograms(actual[t], predicted[t], spec);
            double mean = 0.0;
            for (const Eigen::VectorXd& s : series_loglik) {
                mean += s[t];
            }
            mean /= count;
            f << t + 1 << ',' << fmt17(kl) << ',' << fmt17(mean) << '\n';
        }
    }
    for (int k : requested) {
        const int t = k - 1;
        double lo = actual[t].front(), hi = actual[t].front();
        for (double v : actual[t]) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double v : predicted[t]) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = hi - lo;
        if (span > 0.0) {
            lo -= spec.range_expand * span;
            hi += spec.range_expand * span;
        } else {
            lo -= 0.5;
            hi += 0.5;
        }
        const brnn::Histogram ha = brnn::make_histogram(
            actual[t], lo, hi, spec.bins, spec.epsilon);
        const brnn::Histogram hp = brnn::make_histogram(
            predicted[t], lo, hi, spec.bins, spec.epsilon);
        char name[48];
        std::snprintf(name, sizeof(name), "hist_step%d_actual.csv", k);
        brnn::save_histogram_csv(ha, (out / name).string());
        std::snprintf(name, sizeof(name), "hist_step%d_predicted.csv", k);
        brnn::save_histogram_csv(hp, (out / name).string());
    }
    std::cout << "wrote per-step series and " << requested.size()
              << " histogram pairs under " << cfg.output_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Physically feasible probabilistic trajectory prediction: "
        "Bayesian-network policy over known dynamics, trained by "
        "alpha-divergence minimization, adapted online by particle "
        "filtering."};
    app.require_subcommand(1);

    Shared s_gen, s_train, s_predict, s_adapt, s_eval, s_plot;
    bool with_baseline = false;
    std::string model_path, gmm_path, steps = "1,5,10,15";
    int record_index = 0, trajectory_index = 0, predict_horizon = 0;
    int component = 0, limit = 0;

    CLI::App* gen = app.add_subcommand(
        "gen-data", "Generate a dataset and write CSV + manifest");
    add_shared(gen, &s_gen);

    CLI::App* train = app.add_subcommand(
        "train", "Train the policy posterior; writes model + energy trace");
    add_shared(train, &s_train);
    train->add_flag("--with-baseline", with_baseline,
                    "also fit the mixture baseline and write gmm.json");

    CLI::App* predict = app.add_subcommand(
        "predict", "Sample futures for one held-out record");
    add_shared(predict, &s_predict);
    predict->add_option("--model", model_path, "model JSON path");
    predict->add_option("--record", record_index, "held-out record index");
    predict->add_option("--predict-horizon", predict_horizon,
                        "steps to roll out (default: the record's horizon)");

    CLI::App* adapt = app.add_subcommand(
        "adapt", "Run a streaming adaptation session on one trajectory");
    add_shared(adapt, &s_adapt);
    adapt->add_option("--model", model_path, "model JSON path");
    adapt->add_option("--trajectory", trajectory_index,
                      "held-out trajectory index");

    CLI::App* eval = app.add_subcommand(
        "eval", "Per-step log likelihood metrics on held-out records");
    add_shared(eval, &s_eval);
    eval->add_option("--model", model_path, "model JSON path");
    eval->add_option("--gmm", gmm_path,
                     "evaluate this mixture baseline instead");
    eval->add_option("--limit", limit, "cap on evaluated records");

    CLI::App* plot = app.add_subcommand(
        "plot-data", "Per-step histogram and KL/loglik series CSVs");
    add_shared(plot, &s_plot);
    plot->add_option("--model", model_path, "model JSON path");
    plot->add_option("--steps", steps,
                     "comma-separated steps to write histograms for");
    plot->add_option("--component", component, "state component index");
    plot->add_option("--limit", limit, "cap on records used");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    std::string output_dir = "out";
    try {
        if (gen->parsed()) {
            return run_gen_data(resolve(s_gen));
        }
        if (train->parsed()) {
            const brnn::ExperimentConfig cfg = resolve(s_train);
            output_dir = cfg.output_dir;
            return run_train(cfg, with_baseline);
        }
        const Shared& s = predict->parsed()  ? s_predict
                          : adapt->parsed()  ? s_adapt
                          : eval->parsed()   ? s_eval
                                             : s_plot;
        const brnn::ExperimentConfig cfg = resolve(s);
        output_dir = cfg.output_dir;
        if (model_path.empty()) {
            model_path =
                (fs::path(cfg.output_dir) / "model.json").string();
        }
        if (predict->parsed()) {
            return run_predict(cfg, model_path, record_index,
                               predict_horizon);
        }
        if (adapt->parsed()) {
            return run_adapt(cfg, model_path, trajectory_index);
        }
        if (eval->parsed()) {
            return run_eval(cfg, model_path, gmm_path, limit);
        }
        return run_plot_data(cfg, model_path, steps, component, limit);
    } catch (const brnn::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const brnn::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        write_diagnostic(output_dir, e.what());
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
