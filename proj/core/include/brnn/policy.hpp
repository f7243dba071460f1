#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "brnn/rng.hpp"

namespace brnn {

// Fully-connected network shape. layer_sizes runs input → output; the input
// dimension counts the normalized history features plus the appended shared
// random input z, the output dimension equals the predicted action's.
struct NetworkShape {
    std::vector<int> layer_sizes;

    int num_layers() const {
        return static_cast<int>(layer_sizes.size()) - 1;
    }
    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }
    // Scalar weight count including bias columns.
    std::int64_t weight_count() const;

    bool operator==(const NetworkShape&) const = default;
};

// Affine feature standardization fit on training data and stored with the
// model. Features with zero variance keep scale 1.
struct FeatureNormalizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    Eigen::VectorXd apply(const Eigen::VectorXd& raw) const {
        return (raw - mean).cwiseQuotient(scale);
    }
};

// Factorized Gaussian posterior over the network weights plus the single
// shared random input z, together with the fixed prior scales, the trainable
// output noise Σ_ε, and the training-set size N the tied factors refer to.
// Variances live in log space so optimization is unconstrained.
struct VariationalPosterior {
    NetworkShape shape;
    std::vector<Eigen::MatrixXd> m_w;      // per layer, V_l × (V_{l−1}+1)
    std::vector<Eigen::MatrixXd> log_v_w;  // same shapes as m_w
    double m_z = 0.0;
    double log_v_z = 0.0;
    double lambda = 1.0;  // prior variance of each weight
    double gamma = 1.0;   // prior variance of z
    Eigen::VectorXd log_sigma_eps;  // log diagonal of Σ_ε
    std::int64_t n_train = 0;
    FeatureNormalizer normalizer;

    Eigen::VectorXd sigma_eps() const {
        return log_sigma_eps.array().exp().matrix();
    }
};

// One joint draw (W, z) from the posterior.
struct WeightSample {
    std::vector<Eigen::MatrixXd> w;  // bias column appended per layer
    double z = 0.0;
};

// Deterministic forward pass: normalize features, append z, rectified-linear
// hidden layers, affine output. Returns the mean action; output noise ε is
// the caller's business.
Eigen::VectorXd forward(const WeightSample& ws, const Eigen::VectorXd& features,
                        const FeatureNormalizer& norm);

// M joint draws, each weight from N(m, v) and z from N(m_z, v_z), in the
// reparameterized form mean + √v·u.
std::vector<WeightSample> sample_posterior(const VariationalPosterior& q,
                                           Rng& rng, int count);

// Log of the tied per-datapoint factors at a sample: the weight factor
// satisfies q_W ∝ f(W)^N·p(W), and the shared-z factor is defined as the
// N-th root of q(z)/p(z) so that a sum over datapoints recovers the full
// ratio once.
std::pair<double, double> log_factors(const WeightSample& ws,
                                      const VariationalPosterior& q);

// log Z_q: the Gaussian log-normalizers Σ[½ln(2πv) + m²/(2v)] over all
// weights, plus N times the same term for z.
double log_z_q(const VariationalPosterior& q);

// Fresh posterior: m_w ~ N(0, 1/fan-in), v_w = e^{−10}, m_z = 0, v_z = γ.
VariationalPosterior init_posterior(const NetworkShape& shape,
                                    const FeatureNormalizer& norm,
                                    const Eigen::VectorXd& sigma_eps_init,
                                    std::int64_t n_train, Rng& rng,
                                    double lambda = 1.0, double gamma = 1.0);

// Model (de)serialization as a single JSON document.
void save_model(const VariationalPosterior& q, const std::string& path);
VariationalPosterior load_model(const std::string& path);

}  // namespace brnn
