#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "brnn/rng.hpp"

namespace brnn {

// Gaussian with independent components.
struct GaussianDiag {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;
};

// Gaussian with a full covariance matrix.
struct GaussianFull {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Lower-triangular factorization of a covariance matrix, with the single
// jitter retry policy used everywhere in this library: if the Cholesky
// factorization fails, 1e-9·trace/dim is added to the diagonal and the
// factorization attempted once more. Throws NumericalError if that also
// fails. `jittered` records whether the retry was taken.
struct CovFactor {
    Eigen::MatrixXd lower;
    double log_det = 0.0;  // log determinant of the covariance
    bool jittered = false;

    explicit CovFactor(const Eigen::MatrixXd& cov);

    // Solves cov · y = rhs using the factor.
    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
};

// Log density of x under g. Exact up to the jitter retry described on
// CovFactor; if the retry fired and `jittered` is non-null it is set.
double log_pdf(const Eigen::VectorXd& x, const GaussianFull& g,
               bool* jittered = nullptr);
double log_pdf(const Eigen::VectorXd& x, const GaussianDiag& g);

// Weighted mean and population variance, Σβ(x−mean)²/Σβ. Weights must be
// nonnegative with at least one strictly positive; otherwise NumericalError.
std::pair<double, double> weighted_moments(const std::vector<double>& samples,
                                           const std::vector<double>& weights);
std::pair<Eigen::VectorXd, Eigen::VectorXd> weighted_moments(
    const std::vector<Eigen::VectorXd>& samples,
    const std::vector<double>& weights);

// Draw via mean + scale·standard-normal. The full-covariance overload uses
// the CovFactor lower triangle as the scale.
Eigen::VectorXd sample_gaussian(const GaussianDiag& g, Rng& rng);
Eigen::VectorXd sample_gaussian(const GaussianFull& g, Rng& rng);

// log Σ exp(v_i), shifted by the maximum. Returns −inf for all-(−inf) input.
double log_sum_exp(const std::vector<double>& values);
double log_sum_exp(const double* values, std::size_t count);

}  // namespace brnn
