#include "brnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <string>

#include <json.hpp>

#include "brnn/errors.hpp"
#include "csv_util.hpp"

namespace brnn {

std::vector<Trajectory> gen_toy_trajectories(const ToyParams& params,
                                             int count, std::uint64_t seed) {
    Rng base(seed);
    std::vector<Trajectory> out;
    out.reserve(count);
    for (int t = 0; t < count; ++t) {
        // Per-trajectory stream; draw order: component pick, κ₀, then one ζ
        // per step.
        Rng rng = base.derive(t);
        const bool first = rng.uniform() < params.p1;
        const double mu = first ? params.mu1 : params.mu2;
        const double var = first ? params.var1 : params.var2;
        double kappa = mu + std::sqrt(var) * rng.normal();

        Trajectory traj;
        traj.states.resize(params.horizon + 1, 1);
        traj.ego_actions.resize(params.horizon, 0);
        traj.latent.resize(params.horizon + 1);
        double x = params.x0;
        traj.states(0, 0) = x;
        traj.latent[0] = kappa;
        for (int i = 0; i < params.horizon; ++i) {
            const double zeta = std::sqrt(params.var_zeta) * rng.normal();
            auto [x_next, kappa_next] =
                step_toy_generator(x, kappa, zeta, params);
            x = x_next;
            kappa = kappa_next;
            traj.states(i + 1, 0) = x;
            traj.latent[i + 1] = kappa;
        }
        out.push_back(std::move(traj));
    }
    return out;
}

double idm_accel(const CarDriverParams& d, double gap, double v_p,
                 double v_q) {
    const double safe_gap = std::max(gap, 0.1);
    const double closing = v_p * (v_p - v_q) /
                           (2.0 * std::sqrt(d.a_max * d.b));
    const double desired = d.s0 + std::max(0.0, v_p * d.t_hw + closing);
    const double ratio = v_p / d.v0;
    return d.a_max *
           (1.0 - ratio * ratio * ratio * ratio -
            (desired / safe_gap) * (desired / safe_gap));
}

CarDriverParams sample_driver(const CarScenarioParams& params, Rng& rng) {
    const bool aggressive = rng.uniform() < params.p_aggressive;
    const CarDriverParams& style =
        aggressive ? params.aggressive : params.timid;
    CarDriverParams d = style;
    d.v0 = std::max(10.0, style.v0 + 2.0 * rng.normal());
    d.t_hw = std::max(0.4, style.t_hw + 0.1 * rng.normal());
    d.a_max = std::max(0.3, style.a_max + 0.15 * rng.normal());
    d.s0 = std::max(0.5, style.s0 + 0.25 * rng.normal());
    return d;
}

namespace {

// One simulated run; false when the gap closes to ≤ 0.
bool simulate_car_run(const CarScenarioParams& params, Rng& rng,
                      Trajectory* out) {
    const double dt = params.dt;
    const CarDriverParams driver = sample_driver(params, rng);

    double v_q = 8.0 + 6.0 * rng.uniform();
    double v_p = std::max(0.0, v_q + (2.0 * rng.uniform() - 1.0));
    double gap = driver.s0 + v_p * driver.t_hw + 5.0 * rng.uniform();
    double target = v_q;
    int steps_to_retarget = 0;

    Trajectory traj;
    traj.states.resize(params.steps + 1, 3);
    traj.ego_actions.resize(params.steps, 2);
    traj.states.row(0) << gap, v_p, v_q;
    for (int i = 0; i < params.steps; ++i) {
        if (steps_to_retarget == 0) {
            steps_to_retarget = 15 + static_cast<int>(rng.integer(11));
            target = 5.0 + 13.0 * rng.uniform();
        }
        --steps_to_retarget;
        const double lead_accel =
            std::clamp((target - v_q) / dt, -1.2, 1.2);
        const double dv_q = lead_accel * dt;
        const double dd_q = v_q * dt;

        double accel = idm_accel(driver, gap, v_p, v_q) +
                       driver.accel_noise_sd * rng.normal();
        accel = std::clamp(accel, -4.0, 2.5);
        double dv_p = accel * dt;
        if (v_p + dv_p < 0.0) {
            dv_p = -v_p;
        }
        const double dd_p = v_p * dt;

        gap = gap - dd_p + dd_q;
        v_p += dv_p;
        v_q += dv_q;
        if (gap <= 0.0) {
            return false;
        }
        traj.ego_actions.row(i) << dd_q, dv_q;
        traj.states.row(i + 1) << gap, v_p, v_q;
    }
    traj.latent.resize(2);
    traj.latent << driver.t_hw, driver.a_max;
    *out = std::move(traj);
    return true;
}

}  // namespace

std::vector<Trajectory> gen_car_trajectories(const CarScenarioParams& params,
                                             int count, std::uint64_t seed) {
    Rng base(seed);
    std::vector<Trajectory> out;
    out.reserve(count);
    for (int t = 0; t < count; ++t) {
        Rng traj_stream = base.derive(t);
        Trajectory traj;
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng = traj_stream.derive(attempt);
            if (simulate_car_run(params, rng, &traj)) {
                break;
            }
            if (attempt > 1000) {
                throw NumericalError(
                    "car generator cannot produce a collision-free run");
            }
        }
        out.push_back(std::move(traj));
    }
    return out;
}

Eigen::VectorXd flatten_window(const Eigen::MatrixXd& window) {
    Eigen::VectorXd out(window.rows() * window.cols());
    for (Eigen::Index r = 0; r < window.rows(); ++r) {
        out.segment(r * window.cols(), window.cols()) = window.row(r);
    }
    return out;
}

Dataset make_dataset(std::vector<Trajectory> trajectories,
                     const WindowSpec& window, int ego_action_dim,
                     std::uint64_t split_seed) {
    Dataset d;
    d.window = window;
    d.ego_action_dim = ego_action_dim;
    d.state_dim = trajectories.empty()
                      ? 0
                      : static_cast<int>(trajectories.front().states.cols());
    d.trajectories = std::move(trajectories);

    const int n = static_cast<int>(d.trajectories.size());
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(split_seed);
    rng.shuffle(ids);
    const int n_train = n == 0 ? 0 : std::max(1, n * 8 / 10);
    const int n_val = (n - n_train + 1) / 2;
    d.train_ids.assign(ids.begin(), ids.begin() + n_train);
    d.val_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    d.test_ids.assign(ids.begin() + n_train + n_val, ids.end());
    std::sort(d.train_ids.begin(), d.train_ids.end());
    std::sort(d.val_ids.begin(), d.val_ids.end());
    std::sort(d.test_ids.begin(), d.test_ids.end());

    auto cut = [&](const std::vector<int>& src,
                   std::vector<TrajectoryRecord>* dst) {
        for (int id : src) {
            const Trajectory& traj = d.trajectories[id];
            const int t_max = static_cast<int>(traj.states.rows()) - 1;
            for (int k = window.m; k + window.h <= t_max; ++k) {
                TrajectoryRecord rec;
                rec.history = traj.states.middleRows(k - window.m,
                                                     window.m + 1);
                rec.future = traj.states.middleRows(k + 1, window.h);
                if (ego_action_dim > 0) {
                    rec.ego_actions =
                        traj.ego_actions.middleRows(k, window.h);
                } else {
                    rec.ego_actions.resize(window.h, 0);
                }
                dst->push_back(std::move(rec));
            }
        }
    };
    cut(d.train_ids, &d.train);
    cut(d.val_ids, &d.val);
    cut(d.test_ids, &d.test);

    // Normalizer: per-state-component moments pooled over every state of the
    // training trajectories (not per window slot — a slot that happens to be
    // constant across records, like a shared initial state, would otherwise
    // get a degenerate scale). The same stats are replicated across the m+1
    // slots.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d.state_dim);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(d.state_dim);
    std::int64_t count = 0;
    for (int id : d.train_ids) {
        const Eigen::MatrixXd& s = d.trajectories[id].states;
        mean += s.colwise().sum().transpose();
        sq += s.array().square().colwise().sum().matrix().transpose();
        count += s.rows();
    }
    if (count > 0) {
        mean /= static_cast<double>(count);
        sq /= static_cast<double>(count);
    }
    Eigen::VectorXd scale(d.state_dim);
    for (int c = 0; c < d.state_dim; ++c) {
        const double var = std::max(0.0, sq[c] - mean[c] * mean[c]);
        scale[c] = var < 1e-12 ? 1.0 : std::sqrt(var);
    }
    const int feat = (window.m + 1) * d.state_dim;
    d.normalizer.mean.resize(feat);
    d.normalizer.scale.resize(feat);
    for (int slot = 0; slot <= window.m; ++slot) {
        d.normalizer.mean.segment(slot * d.state_dim, d.state_dim) = mean;
        d.normalizer.scale.segment(slot * d.state_dim, d.state_dim) = scale;
    }
    return d;
}

Dataset gen_toy_dataset(const ToyParams& params, int count,
                        std::uint64_t seed) {
    return make_dataset(gen_toy_trajectories(params, count, seed),
                        WindowSpec{0, params.horizon}, 0, seed);
}

Dataset gen_car_following_dataset(int count, std::uint64_t seed,
                                  const CarScenarioParams& params) {
    return make_dataset(gen_car_trajectories(params, count, seed),
                        WindowSpec{9, 30}, 2, seed);
}

void save_car_csv(const std::vector<Trajectory>& trajectories,
                  const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "vehicle_id,frame,d_pq,v_p,v_q,dd_q,dv_q\n";
    for (std::size_t id = 0; id < trajectories.size(); ++id) {
        const Trajectory& traj = trajectories[id];
        const int last = static_cast<int>(traj.states.rows()) - 1;
        for (int i = 0; i <= last; ++i) {
            const double dd_q = i < last ? traj.ego_actions(i, 0) : 0.0;
            const double dv_q = i < last ? traj.ego_actions(i, 1) : 0.0;
            out << id << ',' << i << ',' << detail::fmt(traj.states(i, 0))
                << ',' << detail::fmt(traj.states(i, 1)) << ','
                << detail::fmt(traj.states(i, 2)) << ','
                << detail::fmt(dd_q) << ',' << detail::fmt(dv_q) << '\n';
        }
    }
}

std::vector<Trajectory> load_car_csv(const std::string& path,
                                     int* rejected_rows) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open trajectory CSV: " + path);
    }
    struct Row {
        long long vehicle;
        long long frame;
        double d_pq, v_p, v_q, dd_q, dv_q;
    };
    std::vector<Row> rows;
    int rejected = 0;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line_no == 1) {
            if (line != "vehicle_id,frame,d_pq,v_p,v_q,dd_q,dv_q") {
                throw ConfigError(path + ": unexpected CSV header");
            }
            continue;
        }
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 7) {
            throw ConfigError(path + ": malformed row at line " +
                              std::to_string(line_no));
        }
        Row r;
        try {
            std::size_t used = 0;
            r.vehicle = std::stoll(fields[0], &used);
            r.frame = std::stoll(fields[1]);
            r.d_pq = std::stod(fields[2]);
            r.v_p = std::stod(fields[3]);
            r.v_q = std::stod(fields[4]);
            r.dd_q = std::stod(fields[5]);
            r.dv_q = std::stod(fields[6]);
        } catch (const std::exception&) {
            throw ConfigError(path + ": malformed row at line " +
                              std::to_string(line_no));
        }
        if (r.v_p < 0.0 || r.v_p > 60.0 || r.v_q < 0.0 || r.v_q > 60.0) {
            ++rejected;
            continue;
        }
        rows.push_back(r);
    }
    if (rejected_rows != nullptr) {
        *rejected_rows = rejected;
    }

    // Group into segments: same vehicle, consecutive frames.
    std::vector<Trajectory> out;
    std::size_t start = 0;
    for (std::size_t i = 1; i <= rows.size(); ++i) {
        const bool boundary =
            i == rows.size() || rows[i].vehicle != rows[start].vehicle ||
            rows[i].frame != rows[i - 1].frame + 1;
        if (!boundary) {
            continue;
        }
        const std::size_t len = i - start;
        if (len >= 2) {
            Trajectory traj;
            traj.states.resize(len, 3);
            traj.ego_actions.resize(len - 1, 2);
            for (std::size_t j = 0; j < len; ++j) {
                const Row& r = rows[start + j];
                traj.states.row(j) << r.d_pq, r.v_p, r.v_q;
                if (j + 1 < len) {
                    traj.ego_actions.row(j) << r.dd_q, r.dv_q;
                }
            }
            out.push_back(std::move(traj));
        }
        start = i;
    }
    return out;
}

Dataset load_trajectories_csv(const std::string& path,
                              const WindowSpec& window,
                              std::uint64_t split_seed) {
    return make_dataset(load_car_csv(path), window, 2, split_seed);
}

void save_toy_csv(const std::vector<Trajectory>& trajectories,
                  const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "trajectory_id,step,x,kappa\n";
    for (std::size_t id = 0; id < trajectories.size(); ++id) {
        const Trajectory& traj = trajectories[id];
        for (Eigen::Index i = 0; i < traj.states.rows(); ++i) {
            const double kappa =
                traj.latent.size() > i ? traj.latent[i] : 0.0;
            out << id << ',' << i << ',' << detail::fmt(traj.states(i, 0))
                << ',' << detail::fmt(kappa) << '\n';
        }
    }
}

void save_manifest(const Dataset& d, std::uint64_t seed,
                   const std::string& path) {
    nlohmann::json doc;
    doc["seed"] = seed;
    doc["n_trajectories"] = d.trajectories.size();
    doc["state_dim"] = d.state_dim;
    doc["ego_action_dim"] = d.ego_action_dim;
    doc["window"] = {{"m", d.window.m}, {"h", d.window.h}};
    doc["records"] = {{"train", d.train.size()},
                      {"val", d.val.size()},
                      {"test", d.test.size()}};
    doc["split"] = {{"train", d.train_ids},
                    {"val", d.val_ids},
                    {"test", d.test_ids}};
    std::vector<double> mean(d.normalizer.mean.data(),
                             d.normalizer.mean.data() +
                                 d.normalizer.mean.size());
    std::vector<double> scale(d.normalizer.scale.data(),
                              d.normalizer.scale.data() +
                                  d.normalizer.scale.size());
    doc["normalizer"] = {{"mean", mean}, {"scale", scale}};
    std::ofstream out = detail::open_out(path);
    out << doc.dump(2) << "\n";
}

}  // namespace brnn
