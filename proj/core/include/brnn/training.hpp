#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"

namespace brnn {

struct TrainConfig {
    double alpha = 1.0;         // divergence parameter; α→0 use 1e-6
    double learning_rate = 1e-4;
    int batch_size = 50;        // |S|
    int mc_samples = 100;       // M
    int epochs = 200;
    int horizon = 1;            // h unrolled in the energy
    std::uint64_t seed = 0;
    double clip_norm = 10.0;    // global gradient norm clip
    bool train_sigma_omega = false;  // also fit the process noise diagonal
    int val_batch_cap = 250;    // records per validation energy evaluation
};

// Gradient of the energy estimator with respect to every trainable
// parameter, alongside the energy value the same noise realization produced.
struct EnergyGradient {
    double energy = 0.0;
    std::vector<Eigen::MatrixXd> m_w;
    std::vector<Eigen::MatrixXd> log_v_w;
    double m_z = 0.0;
    double log_v_z = 0.0;
    Eigen::VectorXd log_sigma_eps;
    Eigen::VectorXd log_sigma_omega;  // filled only when trained
};

struct EpochStat {
    int epoch = 0;
    double train_energy = 0.0;  // mean over the epoch's mini-batches
    double val_energy = 0.0;
};

struct TrainResult {
    VariationalPosterior posterior;  // best-validation checkpoint
    Eigen::VectorXd sigma_omega;     // diagonal actually in effect at the end
    std::vector<EpochStat> trace;
    bool diverged = false;
    int best_epoch = -1;
};

// Monte Carlo estimate of the α-divergence energy on a mini-batch: draw M
// joint (W, z) samples plus per-record step noise, evaluate the recurrent
// trajectory likelihoods, and combine with the tied-factor and log Z_q
// terms. The rng supplies the base noise; a fixed rng state gives a fixed
// value.
double energy(const VariationalPosterior& q,
              const std::vector<TrajectoryRecord>& batch,
              const DynamicsSpec& dyn, const TrainConfig& cfg, Rng& rng);

// Same estimator restricted to h=1, written as a direct single-step formula
// with no unrolling. Consumes base noise in the same order as energy(), so
// both paths agree exactly on the same rng state; kept as an independent
// check on the recurrent code.
double energy_single_step(const VariationalPosterior& q,
                          const std::vector<TrajectoryRecord>& batch,
                          const DynamicsSpec& dyn, const TrainConfig& cfg,
                          Rng& rng);

// Exact reverse-mode gradient of the energy estimator under frozen base
// noise: one set of standard-normal draws for (W, z, ε, ω) is fixed up
// front, then the estimator is differentiated through the reparameterized
// samples, the unrolled network, the dynamics, and the per-step Gaussian
// densities.
EnergyGradient energy_gradient(const VariationalPosterior& q,
                               const std::vector<TrajectoryRecord>& batch,
                               const DynamicsSpec& dyn, const TrainConfig& cfg,
                               Rng& rng);

// Adam-style stochastic minimization of the energy: uniform mini-batches
// without replacement each epoch, fresh Monte Carlo noise each iteration,
// global-norm gradient clipping, and a best-validation-energy checkpoint
// evaluated with a fixed noise realization so epochs are comparable.
TrainResult train(const VariationalPosterior& q0, const Dataset& data,
                  const DynamicsSpec& dyn, const TrainConfig& cfg, Rng& rng);

// Energy trace CSV: epoch, train_energy, val_energy.
void save_energy_trace_csv(const std::vector<EpochStat>& trace,
                           const std::string& path);

}  // namespace brnn
