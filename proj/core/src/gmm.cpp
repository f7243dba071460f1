#include "brnn/gmm.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>

#include <json.hpp>

#include "brnn/errors.hpp"

namespace brnn {

namespace {

using nlohmann::json;

Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& cov, double floor) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) {
        throw NumericalError("covariance eigendecomposition failed");
    }
    if (es.eigenvalues().minCoeff() >= floor) {
        return cov;
    }
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() *
           es.eigenvectors().transpose();
}

int categorical(const Eigen::VectorXd& weights, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (Eigen::Index k = 0; k < weights.size(); ++k) {
        acc += weights[k];
        if (u < acc) {
            return static_cast<int>(k);
        }
    }
    return static_cast<int>(weights.size() - 1);
}

// k-means++-style seeds: first uniform, the rest proportional to squared
// distance from the nearest chosen seed.
std::vector<Eigen::VectorXd> seed_means(
    const std::vector<Eigen::VectorXd>& data, int k, Rng& rng) {
    const int n = static_cast<int>(data.size());
    std::vector<Eigen::VectorXd> seeds;
    seeds.reserve(k);
    seeds.push_back(data[static_cast<std::size_t>(
        rng.integer(static_cast<std::uint64_t>(n)))]);
    Eigen::VectorXd dist2(n);
    for (int i = 0; i < n; ++i) {
        dist2[i] = (data[i] - seeds[0]).squaredNorm();
    }
    while (static_cast<int>(seeds.size()) < k) {
        const double total = dist2.sum();
        int pick;
        if (total <= 0.0) {
            pick = static_cast<int>(
                rng.integer(static_cast<std::uint64_t>(n)));
        } else {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += dist2[i];
                if (target < acc) {
                    pick = i;
                    break;
                }
            }
        }
        seeds.push_back(data[pick]);
        for (int i = 0; i < n; ++i) {
            dist2[i] = std::min(dist2[i],
                                (data[i] - seeds.back()).squaredNorm());
        }
    }
    return seeds;
}

Eigen::MatrixXd global_covariance(const std::vector<Eigen::VectorXd>& data,
                                  const Eigen::VectorXd& mean) {
    const int d = static_cast<int>(mean.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const Eigen::VectorXd& x : data) {
        const Eigen::VectorXd c = x - mean;
        cov += c * c.transpose();
    }
    return cov / static_cast<double>(data.size());
}

}  // namespace

GmmFitResult fit_em(const std::vector<Eigen::VectorXd>& data, int k,
                    const GmmFitOptions& opts, Rng& rng) {
    const int n = static_cast<int>(data.size());
    if (k < 1) {
        throw ConfigError("mixture needs at least one component");
    }
    if (n < k) {
        throw ConfigError("fewer samples than mixture components");
    }
    const int d = static_cast<int>(data.front().size());
    for (const Eigen::VectorXd& x : data) {
        if (x.size() != d) {
            throw ConfigError("mixture samples differ in dimension");
        }
    }

    Eigen::VectorXd data_mean = Eigen::VectorXd::Zero(d);
    for (const Eigen::VectorXd& x : data) {
        data_mean += x;
    }
    data_mean /= n;
    const Eigen::MatrixXd base_cov =
        floor_eigenvalues(global_covariance(data, data_mean), opts.reg);

    GmmFitResult result;
    GmmModel& model = result.model;
    model.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
    model.means = seed_means(data, k, rng);
    model.covs.assign(k, base_cov);

    bool reseeded = false;
    Eigen::MatrixXd log_resp(k, n);  // components down each sample's column
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        std::vector<CovFactor> factors;
        factors.reserve(k);
        for (int c = 0; c < k; ++c) {
            factors.emplace_back(model.covs[c]);
        }
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < k; ++c) {
                const Eigen::VectorXd centered = data[i] - model.means[c];
                log_resp(c, i) =
                    std::log(model.weights[c]) -
                    0.5 * (d * 1.8378770664093454836 + factors[c].log_det +
                           factors[c].solve(centered).dot(centered));
            }
            const double lse = log_sum_exp(log_resp.col(i).data(),
                                           static_cast<std::size_t>(k));
            if (!std::isfinite(lse)) {
                throw NumericalError("mixture responsibility underflow");
            }
            log_resp.col(i).array() -= lse;
            total += lse;
        }
        result.loglik_trace.push_back(total / n);

        const Eigen::MatrixXd resp = log_resp.array().exp().matrix();
        const Eigen::VectorXd counts = resp.rowwise().sum();
        bool collapsed = false;
        for (int c = 0; c < k; ++c) {
            if (!(counts[c] > 1e-10)) {
                if (reseeded) {
                    throw NumericalError(
                        "mixture component collapsed twice");
                }
                reseeded = true;
                collapsed = true;
                model.means[c] = data[static_cast<std::size_t>(
                    rng.integer(static_cast<std::uint64_t>(n)))];
                model.covs[c] = base_cov;
                model.weights.setConstant(1.0 / k);
            }
        }
        if (collapsed) {
            continue;
        }

        for (int c = 0; c < k; ++c) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
            for (int i = 0; i < n; ++i) {
                mean += resp(c, i) * data[i];
            }
            mean /= counts[c];
            Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
            for (int i = 0; i < n; ++i) {
                const Eigen::VectorXd centered = data[i] - mean;
                cov += resp(c, i) * (centered * centered.transpose());
            }
            cov /= counts[c];
            model.means[c] = std::move(mean);
            model.covs[c] = floor_eigenvalues(cov, opts.reg);
            model.weights[c] = counts[c] / n;
        }

        const std::size_t t = result.loglik_trace.size();
        if (t >= 2 && result.loglik_trace[t - 1] -
                              result.loglik_trace[t - 2] <
                          opts.tol) {
            break;
        }
    }
    return result;
}

std::vector<Eigen::VectorXd> gmm_joint_samples(
    const std::vector<TrajectoryRecord>& records, const DynamicsSpec& dyn,
    const FeatureNormalizer& norm) {
    std::vector<Eigen::VectorXd> joint;
    joint.reserve(records.size());
    for (const TrajectoryRecord& rec : records) {
        const Eigen::VectorXd features =
            norm.apply(flatten_window(rec.history));
        const Eigen::VectorXd x =
            rec.history.row(rec.history.rows() - 1).transpose();
        const Eigen::VectorXd a_q =
            dyn.ego_action_dim > 0
                ? Eigen::VectorXd(rec.ego_actions.row(0).transpose())
                : Eigen::VectorXd(0);
        const Eigen::VectorXd action = recover_target_action(
            dyn, x, rec.future.row(0).transpose(), a_q);
        Eigen::VectorXd row(features.size() + action.size());
        row << features, action;
        joint.push_back(std::move(row));
    }
    return joint;
}

Eigen::VectorXd ConditionalMixture::sample(Rng& rng) const {
    const int c = categorical(weights, rng);
    return sample_gaussian(GaussianFull{means[c], covs[c]}, rng);
}

double ConditionalMixture::log_pdf(const Eigen::VectorXd& action) const {
    const int k = static_cast<int>(weights.size());
    Eigen::VectorXd terms(k);
    for (int c = 0; c < k; ++c) {
        terms[c] = std::log(weights[c]) +
                   brnn::log_pdf(action, GaussianFull{means[c], covs[c]});
    }
    return log_sum_exp(terms.data(), static_cast<std::size_t>(k));
}

ConditionalMixture condition(const GmmModel& model,
                             const Eigen::VectorXd& features) {
    const int f = model.feature_dim;
    const int d = model.joint_dim();
    const int a = d - f;
    if (features.size() != f || a < 1) {
        throw ConfigError("conditioning feature size mismatch");
    }
    const int k = model.components();

    ConditionalMixture mix;
    mix.means.reserve(k);
    mix.covs.reserve(k);
    Eigen::VectorXd log_w(k);
    for (int c = 0; c < k; ++c) {
        const Eigen::VectorXd mu_f = model.means[c].head(f);
        const Eigen::VectorXd mu_a = model.means[c].tail(a);
        const Eigen::MatrixXd s_ff = model.covs[c].topLeftCorner(f, f);
        const Eigen::MatrixXd s_af = model.covs[c].bottomLeftCorner(a, f);
        const Eigen::MatrixXd s_aa = model.covs[c].bottomRightCorner(a, a);

        const CovFactor factor(s_ff);
        const Eigen::VectorXd centered = features - mu_f;
        mix.means.push_back(mu_a + s_af * factor.solve(centered));
        mix.covs.push_back(floor_eigenvalues(
            s_aa - s_af * factor.solve(Eigen::MatrixXd(s_af.transpose())),
            1e-6));
        log_w[c] = std::log(model.weights[c]) -
                   0.5 * (f * 1.8378770664093454836 + factor.log_det +
                          factor.solve(centered).dot(centered));
    }
    const double lse =
        log_sum_exp(log_w.data(), static_cast<std::size_t>(k));
    if (!std::isfinite(lse)) {
        throw NumericalError("conditioning weights vanished");
    }
    mix.weights = (log_w.array() - lse).exp().matrix();
    return mix;
}

SampledTrajectory gmm_rollout_sample(const GmmModel& model,
                                     const PredictionRequest& req,
                                     const DynamicsSpec& dyn,
                                     const FeatureNormalizer& norm,
                                     Rng& rng) {
    const int sd = dyn.state_dim;
    const int ad = dyn.target_action_dim;
    const int h = req.horizon;
    SampledTrajectory out;
    out.states.resize(h, sd);
    out.eps.resize(h, ad);  // holds the drawn actions for the mixture
    out.omega.resize(h, sd);

    const CovFactor omega_factor(dyn.sigma_omega);
    Eigen::MatrixXd window = req.history;
    const int m = static_cast<int>(window.rows()) - 1;
    for (int i = 0; i < h; ++i) {
        const ConditionalMixture mix =
            condition(model, norm.apply(flatten_window(window)));
        const Eigen::VectorXd a_p = mix.sample(rng);
        Eigen::VectorXd base(sd);
        for (int c = 0; c < sd; ++c) {
            base[c] = rng.normal();
        }
        const Eigen::VectorXd omega = omega_factor.lower * base;
        const Eigen::VectorXd x = window.row(m).transpose();
        Eigen::VectorXd next = dyn.j_x * x + dyn.j_ap * a_p + omega;
        if (dyn.ego_action_dim > 0) {
            next += dyn.j_aq * req.ego_actions.row(i).transpose();
        }
        out.states.row(i) = next.transpose();
        out.eps.row(i) = a_p.transpose();
        out.omega.row(i) = omega.transpose();
        for (int r = 0; r < m; ++r) {
            window.row(r) = window.row(r + 1);
        }
        window.row(m) = next.transpose();
    }
    return out;
}

TrajectoryLikelihood gmm_trajectory_likelihood(
    const GmmModel& model, const TrajectoryRecord& record,
    const DynamicsSpec& dyn, const FeatureNormalizer& norm, Rng& rng,
    const LikelihoodOptions& opts) {
    const int sd = dyn.state_dim;
    const int h = static_cast<int>(record.future.rows());
    TrajectoryLikelihood out;
    out.per_step.resize(h);
    out.beliefs.reserve(h);

    const CovFactor omega_factor(dyn.sigma_omega);
    Eigen::MatrixXd window = record.history;
    const int m = static_cast<int>(window.rows()) - 1;
    for (int i = 0; i < h; ++i) {
        const ConditionalMixture mix =
            condition(model, norm.apply(flatten_window(window)));
        const int k = static_cast<int>(mix.weights.size());
        const Eigen::VectorXd x = window.row(m).transpose();
        Eigen::VectorXd drift = dyn.j_x * x;
        if (dyn.ego_action_dim > 0) {
            drift += dyn.j_aq * record.ego_actions.row(i).transpose();
        }
        const Eigen::VectorXd obs = record.future.row(i).transpose();

        Eigen::VectorXd terms(k);
        Eigen::VectorXd mean_mix = Eigen::VectorXd::Zero(sd);
        Eigen::MatrixXd second = Eigen::MatrixXd::Zero(sd, sd);
        for (int c = 0; c < k; ++c) {
            const Eigen::VectorXd mean = drift + dyn.j_ap * mix.means[c];
            Eigen::MatrixXd cov =
                dyn.j_ap * mix.covs[c] * dyn.j_ap.transpose() +
                dyn.sigma_omega;
            if (opts.extra_cov.size() > 0) {
                cov += opts.extra_cov;
            }
            terms[c] =
                std::log(mix.weights[c]) + log_pdf(obs, GaussianFull{mean, cov});
            mean_mix += mix.weights[c] * mean;
            second +=
                mix.weights[c] * (cov + mean * mean.transpose());
        }
        out.per_step[i] =
            log_sum_exp(terms.data(), static_cast<std::size_t>(k));
        out.beliefs.push_back(
            {mean_mix, second - mean_mix * mean_mix.transpose()});

        Eigen::VectorXd next;
        if (opts.teacher_forced) {
            next = obs;
        } else {
            const Eigen::VectorXd a_p = mix.sample(rng);
            Eigen::VectorXd base(sd);
            for (int c = 0; c < sd; ++c) {
                base[c] = rng.normal();
            }
            next = drift + dyn.j_ap * a_p + omega_factor.lower * base;
        }
        for (int r = 0; r < m; ++r) {
            window.row(r) = window.row(r + 1);
        }
        window.row(m) = next.transpose();
    }
    out.total = out.per_step.sum();
    return out;
}

void save_gmm(const GmmModel& model, const std::string& path) {
    json j;
    j["feature_dim"] = model.feature_dim;
    j["weights"] = std::vector<double>(
        model.weights.data(), model.weights.data() + model.weights.size());
    json means = json::array();
    json covs = json::array();
    for (int c = 0; c < model.components(); ++c) {
        means.push_back(std::vector<double>(
            model.means[c].data(),
            model.means[c].data() + model.means[c].size()));
        json rows = json::array();
        for (Eigen::Index r = 0; r < model.covs[c].rows(); ++r) {
            json row = json::array();
            for (Eigen::Index col = 0; col < model.covs[c].cols(); ++col) {
                row.push_back(model.covs[c](r, col));
            }
            rows.push_back(std::move(row));
        }
        covs.push_back(std::move(rows));
    }
    j["means"] = std::move(means);
    j["covs"] = std::move(covs);

    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot open " + path + " for writing");
    }
    out << j.dump(2) << '\n';
}

GmmModel load_gmm(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("mixture file " + path + ": " + e.what());
    }
    GmmModel model;
    try {
        model.feature_dim = j.at("feature_dim").get<int>();
        const auto weights = j.at("weights").get<std::vector<double>>();
        const int k = static_cast<int>(weights.size());
        model.weights =
            Eigen::Map<const Eigen::VectorXd>(weights.data(), k);
        for (const auto& mean : j.at("means")) {
            const auto values = mean.get<std::vector<double>>();
            model.means.push_back(Eigen::Map<const Eigen::VectorXd>(
                values.data(), static_cast<Eigen::Index>(values.size())));
        }
        for (const auto& cov : j.at("covs")) {
            const int d = static_cast<int>(cov.size());
            Eigen::MatrixXd mat(d, d);
            for (int r = 0; r < d; ++r) {
                const auto row = cov[r].get<std::vector<double>>();
                if (static_cast<int>(row.size()) != d) {
                    throw ConfigError("mixture covariance is not square");
                }
                for (int c = 0; c < d; ++c) {
                    mat(r, c) = row[c];
                }
            }
            model.covs.push_back(std::move(mat));
        }
    } catch (const json::exception& e) {
        throw ConfigError("mixture file " + path + ": " + e.what());
    }
    const int k = model.components();
    if (k < 1 || static_cast<int>(model.means.size()) != k ||
        static_cast<int>(model.covs.size()) != k) {
        throw ConfigError("mixture file " + path +
                          ": inconsistent component counts");
    }
    const int d = model.joint_dim();
    for (int c = 0; c < k; ++c) {
        if (model.means[c].size() != d || model.covs[c].rows() != d ||
            model.covs[c].cols() != d) {
            throw ConfigError("mixture file " + path +
                              ": inconsistent dimensions");
        }
    }
    if (model.feature_dim < 0 || model.feature_dim >= d) {
        throw ConfigError("mixture file " + path + ": bad feature split");
    }
    if (std::abs(model.weights.sum() - 1.0) > 1e-6 ||
        model.weights.minCoeff() <= 0.0) {
        throw ConfigError("mixture file " + path +
                          ": weights are not a simplex");
    }
    return model;
}

}  // namespace brnn
