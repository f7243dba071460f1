#include "brnn/rollout.hpp"

#include <cmath>
#include <fstream>

#include "brnn/errors.hpp"
#include "brnn/math_core.hpp"
#include "csv_util.hpp"

namespace brnn {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

void slide(Eigen::MatrixXd* window, const Eigen::VectorXd& next) {
    const Eigen::Index rows = window->rows();
    if (rows > 1) {
        // Keep as a loop: block self-assignment with overlap aliases.
        for (Eigen::Index r = 0; r + 1 < rows; ++r) {
            window->row(r) = window->row(r + 1);
        }
    }
    window->row(rows - 1) = next.transpose();
}

Eigen::VectorXd ego_row(const PredictionRequest& req, int i) {
    return req.ego_actions.cols() > 0
               ? Eigen::VectorXd(req.ego_actions.row(i).transpose())
               : Eigen::VectorXd(0);
}

}  // namespace

SampledTrajectory rollout_sample(const WeightSample& ws,
                                 const PredictionRequest& req,
                                 const DynamicsSpec& dyn,
                                 const Eigen::VectorXd& sigma_eps,
                                 const FeatureNormalizer& norm, Rng& rng) {
    const int h = req.horizon;
    const int sd = dyn.state_dim;
    const int ad = dyn.target_action_dim;
    SampledTrajectory out;
    out.sample = ws;
    out.states.resize(h, sd);
    out.eps.resize(h, ad);
    out.omega.resize(h, sd);

    const Eigen::VectorXd eps_sd = sigma_eps.array().sqrt().matrix();
    Eigen::MatrixXd omega_sd(sd, sd);
    {
        CovFactor f(dyn.sigma_omega);
        omega_sd = f.lower;
    }

    Eigen::MatrixXd window = req.history;
    Eigen::VectorXd x = req.history.row(req.history.rows() - 1).transpose();
    for (int i = 0; i < h; ++i) {
        const Eigen::VectorXd mean_action =
            forward(ws, flatten_window(window), norm);
        // Draw order per step: ε components, then the ω base vector.
        Eigen::VectorXd eps(ad);
        for (int k = 0; k < ad; ++k) {
            eps[k] = eps_sd[k] * rng.normal();
        }
        Eigen::VectorXd omega_base(sd);
        for (int k = 0; k < sd; ++k) {
            omega_base[k] = rng.normal();
        }
        const Eigen::VectorXd omega = omega_sd * omega_base;
        const Eigen::VectorXd a_p = mean_action + eps;
        x = dyn.step(x, a_p, ego_row(req, i), omega);
        out.states.row(i) = x.transpose();
        out.eps.row(i) = eps.transpose();
        out.omega.row(i) = omega.transpose();
        slide(&window, x);
    }
    return out;
}

TrajectoryLikelihood trajectory_likelihood(const WeightSample& ws,
                                           const TrajectoryRecord& record,
                                           const DynamicsSpec& dyn,
                                           const Eigen::VectorXd& sigma_eps,
                                           const FeatureNormalizer& norm,
                                           Rng& rng,
                                           const LikelihoodOptions& opts) {
    const int h = static_cast<int>(record.future.rows());
    const int sd = dyn.state_dim;
    const int ad = dyn.target_action_dim;

    // Constant per call: the prior-update covariance J_ap·Σ_ε·J_apᵀ + Σ_ω,
    // optionally inflated for adaptation.
    Eigen::MatrixXd cov = dyn.j_ap * sigma_eps.asDiagonal() *
                              dyn.j_ap.transpose() +
                          dyn.sigma_omega;
    if (opts.extra_cov.size() > 0) {
        cov += opts.extra_cov;
    }
    const CovFactor factor(cov);
    const Eigen::VectorXd eps_sd = sigma_eps.array().sqrt().matrix();
    const CovFactor omega_factor(dyn.sigma_omega);

    TrajectoryLikelihood out;
    out.per_step.resize(h);
    out.beliefs.reserve(h);

    Eigen::MatrixXd window = record.history;
    Eigen::VectorXd x = record.history.row(record.history.rows() - 1)
                            .transpose();
    for (int i = 0; i < h; ++i) {
        const Eigen::VectorXd mean_action =
            forward(ws, flatten_window(window), norm);
        const Eigen::VectorXd a_q =
            record.ego_actions.cols() > 0
                ? Eigen::VectorXd(record.ego_actions.row(i).transpose())
                : Eigen::VectorXd(0);
        Eigen::VectorXd mean = dyn.j_x * x + dyn.j_ap * mean_action;
        if (dyn.ego_action_dim > 0) {
            mean += dyn.j_aq * a_q;
        }
        const Eigen::VectorXd obs = record.future.row(i).transpose();
        const Eigen::VectorXd half =
            factor.lower.triangularView<Eigen::Lower>().solve(obs - mean);
        out.per_step[i] = -0.5 * (sd * kLog2Pi + factor.log_det +
                                  half.squaredNorm());
        out.beliefs.push_back({mean, cov});

        if (opts.teacher_forced) {
            // Condition the next step on the observation; no noise is drawn,
            // so the rng is untouched in this mode.
            x = obs;
        } else {
            Eigen::VectorXd eps(ad);
            for (int k = 0; k < ad; ++k) {
                eps[k] = eps_sd[k] * rng.normal();
            }
            Eigen::VectorXd omega_base(sd);
            for (int k = 0; k < sd; ++k) {
                omega_base[k] = rng.normal();
            }
            const Eigen::VectorXd a_p = mean_action + eps;
            x = dyn.step(x, a_p, a_q, omega_factor.lower * omega_base);
        }
        slide(&window, x);
    }
    out.total = out.per_step.sum();
    return out;
}

std::vector<SampledTrajectory> predict_distribution(
    const VariationalPosterior& q, const PredictionRequest& req,
    const DynamicsSpec& dyn, int count, Rng& rng) {
    // Draw order: all (W, z) samples first, then one rollout per sample.
    const std::vector<WeightSample> samples =
        sample_posterior(q, rng, count);
    std::vector<SampledTrajectory> out;
    out.reserve(count);
    const Eigen::VectorXd sigma_eps = q.sigma_eps();
    for (const WeightSample& ws : samples) {
        out.push_back(
            rollout_sample(ws, req, dyn, sigma_eps, q.normalizer, rng));
    }
    return out;
}

void save_samples_csv(const std::vector<SampledTrajectory>& samples,
                      const std::vector<std::string>& state_names,
                      const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "sample_id,step";
    for (const std::string& name : state_names) {
        out << ',' << name;
    }
    out << '\n';
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const Eigen::MatrixXd& states = samples[s].states;
        for (Eigen::Index i = 0; i < states.rows(); ++i) {
            out << s << ',' << (i + 1);
            for (Eigen::Index c = 0; c < states.cols(); ++c) {
                out << ',' << detail::fmt(states(i, c));
            }
            out << '\n';
        }
    }
}

}  // namespace brnn
