#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"

namespace brnn {

// What to predict: the m+1 observed states up to now and the ego actions
// that will be applied over the horizon.
struct PredictionRequest {
    Eigen::MatrixXd history;      // (m+1) × state dim
    Eigen::MatrixXd ego_actions;  // h × ego action dim (0 columns for toy)
    int horizon = 0;
};

// Gaussian belief over one future state from the filtering-style prior
// update.
struct PerStepBelief {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// One Monte Carlo future: the sampled states plus everything needed to replay
// them exactly (the weight sample and the per-step noise realizations).
struct SampledTrajectory {
    Eigen::MatrixXd states;  // h × state dim, x_{k+1:k+h}
    WeightSample sample;
    Eigen::MatrixXd eps;    // h × action dim
    Eigen::MatrixXd omega;  // h × state dim
};

struct LikelihoodOptions {
    // Condition each step's features on the observed states instead of the
    // sampled path. Default off: the sampled-path scheme is the one the
    // recurrent model trains under. Adaptation turns this on.
    bool teacher_forced = false;
    // Extra covariance added to every per-step belief (adaptation's
    // measurement noise). Empty means none.
    Eigen::MatrixXd extra_cov;
};

struct TrajectoryLikelihood {
    double total = 0.0;
    Eigen::VectorXd per_step;  // h log densities
    std::vector<PerStepBelief> beliefs;
};

// One rollout under a fixed (W, z): per step, the policy mean from the
// current sliding window, plus action noise ε ~ N(0, Σ_ε) and process noise
// ω ~ N(0, Σ_ω) through the dynamics.
SampledTrajectory rollout_sample(const WeightSample& ws,
                                 const PredictionRequest& req,
                                 const DynamicsSpec& dyn,
                                 const Eigen::VectorXd& sigma_eps,
                                 const FeatureNormalizer& norm, Rng& rng);

// Likelihood of a recorded future under a fixed (W, z): per step, belief
// mean = dynamics applied to the current sampled state and the policy mean,
// belief cov = J_ap·Σ_ε·J_apᵀ + Σ_ω (+ extra), accumulate the observed
// state's log density, then draw (ε, ω) and advance the sampled path that
// conditions the next step.
TrajectoryLikelihood trajectory_likelihood(const WeightSample& ws,
                                           const TrajectoryRecord& record,
                                           const DynamicsSpec& dyn,
                                           const Eigen::VectorXd& sigma_eps,
                                           const FeatureNormalizer& norm,
                                           Rng& rng,
                                           const LikelihoodOptions& opts = {});

// S posterior draws, one rollout each.
std::vector<SampledTrajectory> predict_distribution(
    const VariationalPosterior& q, const PredictionRequest& req,
    const DynamicsSpec& dyn, int count, Rng& rng);

// CSV export: sample_id, step, then one column per state component.
void save_samples_csv(const std::vector<SampledTrajectory>& samples,
                      const std::vector<std::string>& state_names,
                      const std::string& path);

}  // namespace brnn
