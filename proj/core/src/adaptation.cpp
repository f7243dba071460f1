#include "brnn/adaptation.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "brnn/errors.hpp"
#include "brnn/math_core.hpp"
#include "brnn/metrics.hpp"
#include "brnn/rollout.hpp"
#include "csv_util.hpp"

namespace brnn {

namespace {

int context_length(const VariationalPosterior& q, int state_dim) {
    const int feat = static_cast<int>(q.normalizer.mean.size());
    if (state_dim <= 0 || feat % state_dim != 0) {
        throw ConfigError("normalizer width inconsistent with state dim");
    }
    return feat / state_dim - 1;
}

}  // namespace

ParticleSet weigh_particles(const VariationalPosterior& q,
                            const AdaptWindow& window,
                            const DynamicsSpec& dyn, const AdaptConfig& cfg,
                            Rng& rng) {
    if (cfg.particles < 1) {
        throw ConfigError("particle count must be positive");
    }
    const int m = context_length(q, dyn.state_dim);
    const int u = static_cast<int>(window.states.rows()) - m - 1;
    if (u < 1) {
        throw ConfigError("adaptation window shorter than context + 1");
    }
    if (dyn.ego_action_dim > 0 && window.ego_actions.rows() != u) {
        throw ConfigError("adaptation window ego actions mismatch");
    }

    TrajectoryRecord record;
    record.history = window.states.topRows(m + 1);
    record.ego_actions = window.ego_actions;
    record.future = window.states.bottomRows(u);

    LikelihoodOptions opts;
    opts.teacher_forced = true;
    opts.extra_cov = cfg.sigma_v.size() > 0 ? cfg.sigma_v : dyn.sigma_omega;

    const Eigen::VectorXd sigma_eps = q.sigma_eps();
    ParticleSet ps;
    ps.particles = sample_posterior(q, rng, cfg.particles);
    ps.log_weights.resize(static_cast<std::size_t>(cfg.particles));
    for (int i = 0; i < cfg.particles; ++i) {
        const TrajectoryLikelihood lik =
            trajectory_likelihood(ps.particles[i], record, dyn, sigma_eps,
                                  q.normalizer, rng, opts);
        ps.log_weights[static_cast<std::size_t>(i)] = lik.total;
    }
    return ps;
}

AdaptUpdate refit(const ParticleSet& ps, const VariationalPosterior& q_prev,
                  double variance_floor) {
    const int count = static_cast<int>(ps.particles.size());
    if (count < 1 || static_cast<int>(ps.log_weights.size()) != count) {
        throw NumericalError("particle set is empty or inconsistent");
    }
    const double shift =
        log_sum_exp(ps.log_weights.data(), ps.log_weights.size());
    if (!std::isfinite(shift)) {
        throw NumericalError("all particle weights vanished");
    }
    Eigen::VectorXd w(count);
    double raw_sum = 0.0;
    for (int i = 0; i < count; ++i) {
        w[i] = std::exp(ps.log_weights[i] - shift);
        raw_sum += ps.log_weights[i];
    }

    AdaptUpdate update;
    update.diag.ess = 1.0 / w.array().square().sum();
    update.diag.mean_log_weight = raw_sum / count;
    update.diag.degenerate = update.diag.ess < 2.0;

    VariationalPosterior q = q_prev;
    const int layers = q.shape.num_layers();
    for (int l = 0; l < layers; ++l) {
        Eigen::MatrixXd mean =
            Eigen::MatrixXd::Zero(q.m_w[l].rows(), q.m_w[l].cols());
        for (int i = 0; i < count; ++i) {
            mean += w[i] * ps.particles[i].w[l];
        }
        Eigen::MatrixXd var =
            Eigen::MatrixXd::Zero(mean.rows(), mean.cols());
        for (int i = 0; i < count; ++i) {
            var += w[i] *
                   (ps.particles[i].w[l] - mean).array().square().matrix();
        }
        q.m_w[l] = mean;
        q.log_v_w[l] =
            var.array().max(variance_floor).log().matrix();
    }
    double z_mean = 0.0;
    for (int i = 0; i < count; ++i) {
        z_mean += w[i] * ps.particles[i].z;
    }
    double z_var = 0.0;
    for (int i = 0; i < count; ++i) {
        const double d = ps.particles[i].z - z_mean;
        z_var += w[i] * d * d;
    }
    q.m_z = z_mean;
    q.log_v_z = std::log(std::max(z_var, variance_floor));
    update.posterior = std::move(q);
    return update;
}

AdaptUpdate adapt_once(const VariationalPosterior& q,
                       const AdaptWindow& window, const DynamicsSpec& dyn,
                       const AdaptConfig& cfg, Rng& rng) {
    const ParticleSet ps = weigh_particles(q, window, dyn, cfg, rng);
    return refit(ps, q, cfg.variance_floor);
}

AdaptStreamResult adapt_stream(const VariationalPosterior& q0,
                               const Eigen::MatrixXd& states,
                               const Eigen::MatrixXd& ego_actions,
                               const DynamicsSpec& dyn,
                               const AdaptConfig& cfg, Rng& rng) {
    if (cfg.update_period < 1) {
        throw ConfigError("update period must be positive");
    }
    const int m = context_length(q0, dyn.state_dim);
    const int u = cfg.update_period;
    const int t_max = static_cast<int>(states.rows()) - 1;
    if (dyn.ego_action_dim > 0 && ego_actions.rows() < t_max) {
        throw ConfigError("ego action stream shorter than state stream");
    }

    AdaptStreamResult result;
    VariationalPosterior q = q0;
    int update_index = 0;
    for (int k = m + u; k <= t_max; k += u) {
        const bool has_next = k + u <= t_max;
        TrajectoryRecord next;
        if (has_next) {
            next.history = states.middleRows(k - m, m + 1);
            next.ego_actions = dyn.ego_action_dim > 0
                                   ? Eigen::MatrixXd(
                                         ego_actions.middleRows(k, u))
                                   : Eigen::MatrixXd(0, 0);
            next.future = states.middleRows(k + 1, u);
        }

        AdaptLogRow row;
        row.update_index = update_index;
        row.predictive_loglik_before =
            has_next ? estimate_log_likelihood(q, next, dyn, cfg.particles,
                                               rng)
                           .total
                     : std::numeric_limits<double>::quiet_NaN();

        AdaptWindow window;
        window.states = states.middleRows(k - u - m, m + u + 1);
        window.ego_actions =
            dyn.ego_action_dim > 0
                ? Eigen::MatrixXd(ego_actions.middleRows(k - u, u))
                : Eigen::MatrixXd(0, 0);
        AdaptUpdate update = adapt_once(q, window, dyn, cfg, rng);
        q = std::move(update.posterior);
        row.ess = update.diag.ess;
        row.mean_log_weight = update.diag.mean_log_weight;

        row.predictive_loglik_after =
            has_next ? estimate_log_likelihood(q, next, dyn, cfg.particles,
                                               rng)
                           .total
                     : std::numeric_limits<double>::quiet_NaN();

        result.posteriors.push_back(q);
        result.log.push_back(row);
        ++update_index;
    }
    return result;
}

void save_adapt_log_csv(const std::vector<AdaptLogRow>& log,
                        const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "update_index,effective_sample_size,mean_log_weight,"
           "predictive_loglik_before,predictive_loglik_after\n";
    for (const AdaptLogRow& row : log) {
        out << row.update_index << ',' << detail::fmt(row.ess) << ','
            << detail::fmt(row.mean_log_weight) << ','
            << detail::fmt(row.predictive_loglik_before) << ','
            << detail::fmt(row.predictive_loglik_after) << '\n';
    }
}

}  // namespace brnn
