#include "brnn/math_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "brnn/errors.hpp"

namespace brnn {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

CovFactor::CovFactor(const Eigen::MatrixXd& cov) {
    if (cov.rows() != cov.cols()) {
        throw NumericalError("covariance matrix is not square");
    }
    const Eigen::Index d = cov.rows();
    if (cov.isZero(0.0)) {
        // Degenerate limit: zero covariance factors to a zero triangle.
        lower = Eigen::MatrixXd::Zero(d, d);
        log_det = -std::numeric_limits<double>::infinity();
        return;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
        const double jitter = 1e-9 * cov.trace() / static_cast<double>(d);
        Eigen::MatrixXd padded = cov;
        padded.diagonal().array() += jitter;
        llt.compute(padded);
        if (llt.info() != Eigen::Success) {
            throw NumericalError(
                "covariance not positive definite after jitter retry");
        }
        jittered = true;
    }
    lower = llt.matrixL();
    log_det = 2.0 * lower.diagonal().array().log().sum();
}

Eigen::VectorXd CovFactor::solve(const Eigen::VectorXd& rhs) const {
    Eigen::VectorXd y =
        lower.triangularView<Eigen::Lower>().solve(rhs);
    return lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

Eigen::MatrixXd CovFactor::solve(const Eigen::MatrixXd& rhs) const {
    Eigen::MatrixXd y =
        lower.triangularView<Eigen::Lower>().solve(rhs);
    return lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

double log_pdf(const Eigen::VectorXd& x, const GaussianFull& g,
               bool* jittered) {
    if (x.size() != g.mean.size() || g.cov.rows() != g.mean.size()) {
        throw NumericalError("log_pdf dimension mismatch");
    }
    CovFactor factor(g.cov);
    if (jittered != nullptr) {
        *jittered = factor.jittered;
    }
    const Eigen::VectorXd resid = x - g.mean;
    const Eigen::VectorXd half =
        factor.lower.triangularView<Eigen::Lower>().solve(resid);
    const double quad = half.squaredNorm();
    return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + factor.log_det +
                   quad);
}

double log_pdf(const Eigen::VectorXd& x, const GaussianDiag& g) {
    if (x.size() != g.mean.size() || g.var.size() != g.mean.size()) {
        throw NumericalError("log_pdf dimension mismatch");
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double resid = x[i] - g.mean[i];
        acc += kLog2Pi + std::log(g.var[i]) + resid * resid / g.var[i];
    }
    return -0.5 * acc;
}

std::pair<double, double> weighted_moments(const std::vector<double>& samples,
                                           const std::vector<double>& weights) {
    if (samples.size() != weights.size() || samples.empty()) {
        throw NumericalError("weighted_moments size mismatch or empty input");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw NumericalError("weighted_moments negative weight");
        }
        total += w;
    }
    if (total <= 0.0) {
        throw NumericalError("weighted_moments all weights zero");
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        mean += weights[i] * samples[i];
    }
    mean /= total;
    double var = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double d = samples[i] - mean;
        var += weights[i] * d * d;
    }
    var /= total;
    return {mean, var};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> weighted_moments(
    const std::vector<Eigen::VectorXd>& samples,
    const std::vector<double>& weights) {
    if (samples.size() != weights.size() || samples.empty()) {
        throw NumericalError("weighted_moments size mismatch or empty input");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw NumericalError("weighted_moments negative weight");
        }
        total += w;
    }
    if (total <= 0.0) {
        throw NumericalError("weighted_moments all weights zero");
    }
    const Eigen::Index d = samples.front().size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].size() != d) {
            throw NumericalError("weighted_moments ragged samples");
        }
        mean += weights[i] * samples[i];
    }
    mean /= total;
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        var += weights[i] * (samples[i] - mean).array().square().matrix();
    }
    var /= total;
    return {mean, var};
}

Eigen::VectorXd sample_gaussian(const GaussianDiag& g, Rng& rng) {
    Eigen::VectorXd out(g.mean.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        out[i] = g.mean[i] + std::sqrt(g.var[i]) * rng.normal();
    }
    return out;
}

Eigen::VectorXd sample_gaussian(const GaussianFull& g, Rng& rng) {
    CovFactor factor(g.cov);
    Eigen::VectorXd u(g.mean.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        u[i] = rng.normal();
    }
    return g.mean + factor.lower * u;
}

double log_sum_exp(const double* values, std::size_t count) {
    if (count == 0) {
        throw NumericalError("log_sum_exp of empty list");
    }
    const double top = *std::max_element(values, values + count);
    if (!std::isfinite(top)) {
        // All-(−inf) stays −inf; a NaN or +inf input propagates.
        return top;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        acc += std::exp(values[i] - top);
    }
    return top + std::log(acc);
}

double log_sum_exp(const std::vector<double>& values) {
    return log_sum_exp(values.data(), values.size());
}

}  // namespace brnn
