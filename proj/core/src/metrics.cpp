#include "brnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "brnn/errors.hpp"
#include "brnn/math_core.hpp"
#include "brnn/rollout.hpp"
#include "csv_util.hpp"

namespace brnn {

Histogram make_histogram(const std::vector<double>& samples, double lo,
                         double hi, int bins, double epsilon) {
    if (bins < 1 || !(hi > lo)) {
        throw ConfigError("histogram needs bins >= 1 and hi > lo");
    }
    Histogram h;
    h.edges.resize(bins + 1);
    const double width = (hi - lo) / bins;
    for (int i = 0; i <= bins; ++i) {
        h.edges[i] = lo + width * i;
    }
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(bins);
    for (double x : samples) {
        int idx = static_cast<int>(std::floor((x - lo) / width));
        idx = std::clamp(idx, 0, bins - 1);
        counts[idx] += 1.0;
    }
    counts.array() += epsilon;
    h.mass = counts / counts.sum();
    return h;
}

double kl_from_histograms(const std::vector<double>& actual,
                          const std::vector<double>& predicted,
                          const HistogramSpec& spec) {
    if (actual.empty() || predicted.empty()) {
        throw ConfigError("histogram divergence needs nonempty samples");
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : actual) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    for (double x : predicted) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const double span = hi - lo;
    if (span > 0.0) {
        lo -= spec.range_expand * span;
        hi += spec.range_expand * span;
    } else {
        lo -= 0.5;
        hi += 0.5;
    }
    const Histogram p =
        make_histogram(actual, lo, hi, spec.bins, spec.epsilon);
    const Histogram q =
        make_histogram(predicted, lo, hi, spec.bins, spec.epsilon);
    double kl = 0.0;
    for (int i = 0; i < spec.bins; ++i) {
        kl += p.mass[i] * std::log(p.mass[i] / q.mass[i]);
    }
    return kl;
}

LogLikSeries estimate_log_likelihood(const VariationalPosterior& q,
                                     const TrajectoryRecord& record,
                                     const DynamicsSpec& dyn, int samples,
                                     Rng& rng) {
    if (samples < 1) {
        throw ConfigError("log likelihood estimate needs samples >= 1");
    }
    const int h = static_cast<int>(record.future.rows());
    const Eigen::VectorXd sigma_eps = q.sigma_eps();
    const std::vector<WeightSample> draws =
        sample_posterior(q, rng, samples);
    Eigen::MatrixXd per_sample(h, samples);
    for (int s = 0; s < samples; ++s) {
        per_sample.col(s) =
            trajectory_likelihood(draws[s], record, dyn, sigma_eps,
                                  q.normalizer, rng)
                .per_step;
    }
    LogLikSeries out;
    out.per_step.resize(h);
    for (int i = 0; i < h; ++i) {
        const Eigen::VectorXd row = per_sample.row(i).transpose();
        out.per_step[i] =
            log_sum_exp(row.data(), static_cast<std::size_t>(samples)) -
            std::log(double(samples));
    }
    out.total = out.per_step.sum();
    return out;
}

LogLikSeries estimate_log_likelihood_gmm(const GmmModel& model,
                                         const FeatureNormalizer& norm,
                                         const TrajectoryRecord& record,
                                         const DynamicsSpec& dyn, int samples,
                                         Rng& rng) {
    if (samples < 1) {
        throw ConfigError("log likelihood estimate needs samples >= 1");
    }
    const int h = static_cast<int>(record.future.rows());
    Eigen::MatrixXd per_sample(h, samples);
    for (int s = 0; s < samples; ++s) {
        per_sample.col(s) =
            gmm_trajectory_likelihood(model, record, dyn, norm, rng)
                .per_step;
    }
    LogLikSeries out;
    out.per_step.resize(h);
    for (int i = 0; i < h; ++i) {
        const Eigen::VectorXd row = per_sample.row(i).transpose();
        out.per_step[i] =
            log_sum_exp(row.data(), static_cast<std::size_t>(samples)) -
            std::log(double(samples));
    }
    out.total = out.per_step.sum();
    return out;
}

namespace {

SegmentSummary summarize(const std::vector<double>& values) {
    SegmentSummary s;
    const int n = static_cast<int>(values.size());
    if (n == 0) {
        s.mean = std::numeric_limits<double>::quiet_NaN();
        s.stddev = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    double sum = 0.0;
    for (double v : values) {
        sum += v;
    }
    s.mean = sum / n;
    if (n < 2) {
        s.stddev = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    double ss = 0.0;
    for (double v : values) {
        ss += (v - s.mean) * (v - s.mean);
    }
    s.stddev = std::sqrt(ss / (n - 1));
    return s;
}

}  // namespace

std::pair<SegmentSummary, SegmentSummary> split_horizon_summary(
    const std::vector<Eigen::VectorXd>& per_step_logliks, int split) {
    std::vector<double> head, tail;
    head.reserve(per_step_logliks.size());
    tail.reserve(per_step_logliks.size());
    for (const Eigen::VectorXd& series : per_step_logliks) {
        const int h = static_cast<int>(series.size());
        const int cut = std::min(split, h);
        if (cut > 0) {
            head.push_back(series.head(cut).mean());
        }
        if (h > split) {
            tail.push_back(series.tail(h - split).mean());
        }
    }
    return {summarize(head), summarize(tail)};
}

void save_histogram_csv(const Histogram& h, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "bin_left,bin_right,density\n";
    const int bins = static_cast<int>(h.mass.size());
    for (int i = 0; i < bins; ++i) {
        const double width = h.edges[i + 1] - h.edges[i];
        out << detail::fmt(h.edges[i]) << ',' << detail::fmt(h.edges[i + 1])
            << ',' << detail::fmt(h.mass[i] / width) << '\n';
    }
}

}  // namespace brnn
