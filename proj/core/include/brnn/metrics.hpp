#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/gmm.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"

namespace brnn {

struct HistogramSpec {
    int bins = 50;
    double range_expand = 0.01;  // pooled min/max widened by this fraction
    double epsilon = 1e-9;       // mass added to every bin before normalizing
};

struct Histogram {
    Eigen::VectorXd edges;  // bins+1
    Eigen::VectorXd mass;   // bins, sums to 1
};

// Normalized histogram over explicit bounds.
Histogram make_histogram(const std::vector<double>& samples, double lo,
                         double hi, int bins, double epsilon);

// KL(actual ‖ predicted) over shared bins spanning the pooled, slightly
// widened range of both sample sets.
double kl_from_histograms(const std::vector<double>& actual,
                          const std::vector<double>& predicted,
                          const HistogramSpec& spec);

// Monte Carlo estimate of the observed future's log likelihood under the
// model: S posterior samples, each contributing a per-step Gaussian density
// along its own sampled conditioning path; per-step value is the log of the
// density mean over samples, and the total is their sum.
struct LogLikSeries {
    Eigen::VectorXd per_step;
    double total = 0.0;
};

LogLikSeries estimate_log_likelihood(const VariationalPosterior& q,
                                     const TrajectoryRecord& record,
                                     const DynamicsSpec& dyn, int samples,
                                     Rng& rng);

// Same estimator with the mixture baseline as the policy.
LogLikSeries estimate_log_likelihood_gmm(const GmmModel& model,
                                         const FeatureNormalizer& norm,
                                         const TrajectoryRecord& record,
                                         const DynamicsSpec& dyn, int samples,
                                         Rng& rng);

struct SegmentSummary {
    double mean = 0.0;
    double stddev = 0.0;  // across trajectories
};

// Table-style horizon split: each trajectory's per-step log likelihoods are
// averaged within [0, split) and [split, h), then summarized across
// trajectories.
std::pair<SegmentSummary, SegmentSummary> split_horizon_summary(
    const std::vector<Eigen::VectorXd>& per_step_logliks, int split);

// Histogram CSV: bin_left, bin_right, density rows for one histogram.
void save_histogram_csv(const Histogram& h, const std::string& path);

}  // namespace brnn
