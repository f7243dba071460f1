#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "brnn/dynamics.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"

namespace brnn {

struct AdaptConfig {
    int update_period = 30;  // u: steps between refits
    int particles = 100;     // M
    // Measurement noise added to every belief covariance while weighting;
    // empty selects the dynamics' Σ_ω.
    Eigen::MatrixXd sigma_v;
    double variance_floor = 1e-8;
};

// Weighted posterior samples; weights kept in log space.
struct ParticleSet {
    std::vector<WeightSample> particles;
    std::vector<double> log_weights;
};

// The slice of a stream one update conditions on: states x_{k−m−u:k} and the
// ego actions a_{q,k−u:k−1} applied across the last u of them.
struct AdaptWindow {
    Eigen::MatrixXd states;       // (m+u+1) × state dim
    Eigen::MatrixXd ego_actions;  // u × ego action dim
};

struct RefitDiagnostics {
    double ess = 0.0;  // effective sample size of the normalized weights
    double mean_log_weight = 0.0;
    bool degenerate = false;  // ess < 2
};

struct AdaptUpdate {
    VariationalPosterior posterior;
    RefitDiagnostics diag;
};

// Draws M particles from the current posterior and weights each by the
// likelihood of the observed window under teacher-forced conditioning, with
// the measurement noise added to every belief. All-(−inf) weights raise
// NumericalError.
ParticleSet weigh_particles(const VariationalPosterior& q_prev,
                            const AdaptWindow& window,
                            const DynamicsSpec& dyn, const AdaptConfig& cfg,
                            Rng& rng);

// Gaussian refit of a particle set: per-parameter weighted mean and
// population variance under the normalized weights, variances clamped at the
// floor; prior scales, Σ_ε and the normalizer are carried over from q_prev.
AdaptUpdate refit(const ParticleSet& ps, const VariationalPosterior& q_prev,
                  double variance_floor);

// One weigh-and-refit update.
AdaptUpdate adapt_once(const VariationalPosterior& q_prev,
                       const AdaptWindow& window, const DynamicsSpec& dyn,
                       const AdaptConfig& cfg, Rng& rng);

struct AdaptLogRow {
    int update_index = 0;
    double ess = 0.0;
    double mean_log_weight = 0.0;
    double predictive_loglik_before = 0.0;
    double predictive_loglik_after = 0.0;
};

struct AdaptStreamResult {
    std::vector<VariationalPosterior> posteriors;  // one per update
    std::vector<AdaptLogRow> log;
};

// Runs a stream: every u steps, weigh then refit, starting once m+u states
// are available. Predictive log likelihoods in the log are the next window's
// observed likelihood under the posterior before and after its update (when
// a next window exists).
AdaptStreamResult adapt_stream(const VariationalPosterior& q0,
                               const Eigen::MatrixXd& states,
                               const Eigen::MatrixXd& ego_actions,
                               const DynamicsSpec& dyn, const AdaptConfig& cfg,
                               Rng& rng);

// Session log CSV: update_index, effective_sample_size, mean_log_weight,
// predictive_loglik_before, predictive_loglik_after.
void save_adapt_log_csv(const std::vector<AdaptLogRow>& rows,
                        const std::string& path);

}  // namespace brnn
