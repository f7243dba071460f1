#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/math_core.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"
#include "brnn/rollout.hpp"

namespace brnn {

// Gaussian mixture over the joint (features ⊕ action) space, fit by EM and
// used as a conditional action model.
struct GmmModel {
    int feature_dim = 0;  // leading block of each mean/cov
    Eigen::VectorXd weights;              // simplex
    std::vector<Eigen::VectorXd> means;   // joint dim
    std::vector<Eigen::MatrixXd> covs;    // joint dim, PD after floor

    int components() const { return static_cast<int>(weights.size()); }
    int joint_dim() const {
        return means.empty() ? 0 : static_cast<int>(means.front().size());
    }
};

struct GmmFitOptions {
    int max_iter = 200;
    double tol = 1e-6;  // stop when log-likelihood gain falls below
    // Eigenvalue floor for every fitted covariance. Applied only when the
    // smallest eigenvalue is below it, so well-conditioned fits keep their
    // exact sample moments.
    double reg = 1e-6;
};

struct GmmFitResult {
    GmmModel model;
    std::vector<double> loglik_trace;  // mean log likelihood per iteration
};

// EM on the joint samples with k-means++-style seeding; a collapsed
// component is reseeded once, a second collapse raises NumericalError.
GmmFitResult fit_em(const std::vector<Eigen::VectorXd>& data, int k,
                    const GmmFitOptions& opts, Rng& rng);

// One joint (normalized features ⊕ recovered action) sample per record: the
// action is recovered from the first observed transition by least squares
// against the dynamics.
std::vector<Eigen::VectorXd> gmm_joint_samples(
    const std::vector<TrajectoryRecord>& records, const DynamicsSpec& dyn,
    const FeatureNormalizer& norm);

// Mixture over the action block given a feature vector: per-component
// Gaussian conditioning, with component weights reweighted by the marginal
// feature likelihood.
struct ConditionalMixture {
    Eigen::VectorXd weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covs;

    Eigen::VectorXd sample(Rng& rng) const;
    double log_pdf(const Eigen::VectorXd& action) const;
};

ConditionalMixture condition(const GmmModel& model,
                             const Eigen::VectorXd& features);

// Rollout with the mixture as the per-step action distribution: condition on
// the sliding window (normalized features), draw an action, push through the
// dynamics with process noise.
SampledTrajectory gmm_rollout_sample(const GmmModel& model,
                                     const PredictionRequest& req,
                                     const DynamicsSpec& dyn,
                                     const FeatureNormalizer& norm, Rng& rng);

// Sampled-path trajectory likelihood with the mixture policy: the per-step
// density of the observed state is the mixture pushed through the (linear)
// dynamics, component covariances mapped J_ap·Σ_k·J_apᵀ + Σ_ω; the
// conditioning path advances by a sampled action, as in the network model.
TrajectoryLikelihood gmm_trajectory_likelihood(
    const GmmModel& model, const TrajectoryRecord& record,
    const DynamicsSpec& dyn, const FeatureNormalizer& norm, Rng& rng,
    const LikelihoodOptions& opts = {});

void save_gmm(const GmmModel& model, const std::string& path);
GmmModel load_gmm(const std::string& path);

}  // namespace brnn
