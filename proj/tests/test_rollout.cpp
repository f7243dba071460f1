#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/math_core.hpp"
#include "brnn/policy.hpp"
#include "brnn/rollout.hpp"

using namespace brnn;

namespace {

// Small car-scenario posterior with non-degenerate variances.
VariationalPosterior car_posterior(Rng& rng, int m = 2) {
    const int feat = (m + 1) * 3;
    FeatureNormalizer norm;
    norm.mean = Eigen::VectorXd::Constant(feat, 10.0);
    norm.scale = Eigen::VectorXd::Constant(feat, 5.0);
    VariationalPosterior q = init_posterior(
        NetworkShape{{feat + 1, 6, 2}}, norm,
        (Eigen::VectorXd(2) << 0.4, 0.09).finished(), 100, rng);
    for (auto& lv : q.log_v_w) {
        lv.setConstant(-3.0);
    }
    return q;
}

TrajectoryRecord car_record(Rng& rng, int m, int h) {
    const auto trajs = gen_car_trajectories(CarScenarioParams{}, 1, 31);
    const Trajectory& traj = trajs.front();
    TrajectoryRecord rec;
    rec.history = traj.states.middleRows(0, m + 1);
    rec.future = traj.states.middleRows(m + 1, h);
    rec.ego_actions = traj.ego_actions.middleRows(m, h);
    (void)rng;
    return rec;
}

}  // namespace

TEST_CASE("sampled rollouts replay exactly from their stored noise") {
    Rng rng(51);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 6);

    PredictionRequest req;
    req.history = rec.history;
    req.ego_actions = rec.ego_actions;
    req.horizon = 6;

    Rng draw(99);
    const auto ws = sample_posterior(q, draw, 1);
    const SampledTrajectory s =
        rollout_sample(ws.front(), req, dyn, q.sigma_eps(), q.normalizer,
                       draw);

    // Reconstruct the path from the stored (W, z, ε, ω).
    Eigen::MatrixXd window = req.history;
    Eigen::VectorXd x = req.history.bottomRows(1).transpose();
    for (int i = 0; i < 6; ++i) {
        const Eigen::VectorXd a_p =
            forward(s.sample, flatten_window(window), q.normalizer) +
            s.eps.row(i).transpose();
        x = dyn.step(x, a_p, req.ego_actions.row(i).transpose(),
                     s.omega.row(i).transpose());
        CHECK((x - s.states.row(i).transpose()).cwiseAbs().maxCoeff() ==
              0.0);
        for (Eigen::Index r = 0; r + 1 < window.rows(); ++r) {
            window.row(r) = window.row(r + 1);
        }
        window.bottomRows(1) = x.transpose();
    }
}

TEST_CASE("teacher-forced likelihood matches a from-scratch evaluation") {
    Rng rng(52);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 5);
    Rng draw(7);
    const auto ws = sample_posterior(q, draw, 1);

    LikelihoodOptions opts;
    opts.teacher_forced = true;
    Rng unused(0);
    const TrajectoryLikelihood got = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, unused, opts);

    // Independent evaluation: window over observed states only, belief
    // cov from the noise propagation formula, density via log_pdf.
    const Eigen::MatrixXd cov =
        dyn.j_ap * q.sigma_eps().asDiagonal() * dyn.j_ap.transpose() +
        dyn.sigma_omega;
    Eigen::MatrixXd window = rec.history;
    Eigen::VectorXd x = rec.history.bottomRows(1).transpose();
    double total = 0.0;
    for (int i = 0; i < 5; ++i) {
        const Eigen::VectorXd mu =
            dyn.j_x * x +
            dyn.j_ap * forward(ws.front(), flatten_window(window),
                               q.normalizer) +
            dyn.j_aq * rec.ego_actions.row(i).transpose();
        const Eigen::VectorXd obs = rec.future.row(i).transpose();
        const double lp = log_pdf(obs, GaussianFull{mu, cov});
        CHECK(got.per_step[i] == doctest::Approx(lp).epsilon(1e-10));
        total += lp;

        x = obs;
        for (Eigen::Index r = 0; r + 1 < window.rows(); ++r) {
            window.row(r) = window.row(r + 1);
        }
        window.bottomRows(1) = x.transpose();
    }
    CHECK(got.total == doctest::Approx(total).epsilon(1e-10));
    CHECK(got.beliefs.size() == 5);
    CHECK((got.beliefs[0].cov - cov).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("teacher forcing leaves the rng untouched") {
    Rng rng(53);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 4);
    Rng draw(3);
    const auto ws = sample_posterior(q, draw, 1);

    LikelihoodOptions opts;
    opts.teacher_forced = true;
    Rng a(123), b(123);
    trajectory_likelihood(ws.front(), rec, dyn, q.sigma_eps(),
                          q.normalizer, a, opts);
    CHECK(a.uniform() == b.uniform());
}

TEST_CASE("one-step belief matches monte-carlo propagation") {
    Rng rng(54);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 1);
    Rng draw(5);
    const auto ws = sample_posterior(q, draw, 1);

    LikelihoodOptions opts;
    opts.teacher_forced = true;
    Rng unused(0);
    const TrajectoryLikelihood tl = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, unused, opts);
    const PerStepBelief& belief = tl.beliefs.front();

    // Propagate noise draws through the dynamics directly.
    const Eigen::VectorXd x = rec.history.bottomRows(1).transpose();
    const Eigen::VectorXd mean_action =
        forward(ws.front(), flatten_window(rec.history), q.normalizer);
    const Eigen::VectorXd a_q = rec.ego_actions.row(0).transpose();
    const Eigen::VectorXd eps_sd = q.sigma_eps().array().sqrt().matrix();
    const CovFactor omega_factor(dyn.sigma_omega);

    const int n = 100000;
    Rng mc(77);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3);
    Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(3, 3);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd eps(2);
        for (int k = 0; k < 2; ++k) {
            eps[k] = eps_sd[k] * mc.normal();
        }
        Eigen::VectorXd base(3);
        for (int k = 0; k < 3; ++k) {
            base[k] = mc.normal();
        }
        const Eigen::VectorXd y =
            dyn.step(x, mean_action + eps, a_q, omega_factor.lower * base);
        sum += y;
        outer += y * y.transpose();
    }
    const Eigen::VectorXd emp_mean = sum / n;
    const Eigen::MatrixXd emp_cov =
        outer / n - emp_mean * emp_mean.transpose();

    CHECK((emp_mean - belief.mean).cwiseAbs().maxCoeff() /
              belief.mean.cwiseAbs().maxCoeff() <
          0.005);
    for (int r = 0; r < 3; ++r) {
        CHECK(emp_cov(r, r) ==
              doctest::Approx(belief.cov(r, r)).epsilon(0.05));
    }
}

TEST_CASE("extra covariance inflates every belief") {
    Rng rng(55);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 3);
    Rng draw(9);
    const auto ws = sample_posterior(q, draw, 1);

    LikelihoodOptions plain;
    plain.teacher_forced = true;
    LikelihoodOptions inflated;
    inflated.teacher_forced = true;
    inflated.extra_cov = 4.0 * Eigen::MatrixXd::Identity(3, 3);

    Rng u1(0), u2(0);
    const auto base = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, u1, plain);
    const auto wide = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, u2, inflated);
    CHECK((wide.beliefs[0].cov - base.beliefs[0].cov -
           inflated.extra_cov)
              .cwiseAbs()
              .maxCoeff() < 1e-14);
    CHECK((wide.beliefs[2].mean - base.beliefs[2].mean)
              .cwiseAbs()
              .maxCoeff() == 0.0);
}

TEST_CASE("sampled-path likelihood diverges from teacher forcing") {
    Rng rng(56);
    const DynamicsSpec dyn = car_following_dynamics();
    VariationalPosterior q = car_posterior(rng);
    const TrajectoryRecord rec = car_record(rng, 2, 6);
    Rng draw(11);
    const auto ws = sample_posterior(q, draw, 1);

    Rng r1(42);
    const auto sampled = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, r1);
    LikelihoodOptions opts;
    opts.teacher_forced = true;
    Rng r2(42);
    const auto forced = trajectory_likelihood(
        ws.front(), rec, dyn, q.sigma_eps(), q.normalizer, r2, opts);
    // First step conditions on the same history either way.
    CHECK(sampled.per_step[0] == forced.per_step[0]);
    CHECK((sampled.per_step.tail(5) - forced.per_step.tail(5))
              .cwiseAbs()
              .maxCoeff() > 0.0);
    CHECK(std::isfinite(sampled.total));
}

TEST_CASE("prediction batches are deterministic in the rng") {
    Rng rng(57);
    const DynamicsSpec dyn = toy_brnn_dynamics();
    const int feat = 1;
    FeatureNormalizer norm;
    norm.mean = Eigen::VectorXd::Constant(feat, 100.0);
    norm.scale = Eigen::VectorXd::Constant(feat, 60.0);
    VariationalPosterior q = init_posterior(
        NetworkShape{{feat + 1, 4, 1}}, norm,
        Eigen::VectorXd::Constant(1, 25.0), 50, rng);

    PredictionRequest req;
    req.history = Eigen::MatrixXd::Constant(1, 1, 200.0);
    req.ego_actions.resize(8, 0);
    req.horizon = 8;

    Rng ra(5), rb(5);
    const auto sa = predict_distribution(q, req, dyn, 12, ra);
    const auto sb = predict_distribution(q, req, dyn, 12, rb);
    REQUIRE(sa.size() == 12);
    bool spread = false;
    for (int s = 0; s < 12; ++s) {
        CHECK((sa[s].states - sb[s].states).cwiseAbs().maxCoeff() == 0.0);
        CHECK(sa[s].states.rows() == 8);
        spread = spread ||
                 (sa[s].states - sa[0].states).cwiseAbs().maxCoeff() > 0.0;
    }
    CHECK(spread);
}

TEST_CASE("samples CSV lists every step of every sample") {
    Rng rng(58);
    const DynamicsSpec dyn = toy_brnn_dynamics();
    FeatureNormalizer norm;
    norm.mean = Eigen::VectorXd::Zero(1);
    norm.scale = Eigen::VectorXd::Ones(1);
    VariationalPosterior q =
        init_posterior(NetworkShape{{2, 3, 1}}, norm,
                       Eigen::VectorXd::Constant(1, 1.0), 10, rng);
    PredictionRequest req;
    req.history = Eigen::MatrixXd::Constant(1, 1, 1.0);
    req.ego_actions.resize(3, 0);
    req.horizon = 3;
    const auto samples = predict_distribution(q, req, dyn, 2, rng);

    const std::string path = "test_rollout_samples.csv";
    save_samples_csv(samples, {"x"}, path);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line == "sample_id,step,x");
    int rows = 0;
    double first_val = 0.0;
    while (std::getline(f, line)) {
        if (rows == 0) {
            const auto c2 = line.rfind(',');
            first_val = std::stod(line.substr(c2 + 1));
            CHECK(line.substr(0, 4) == "0,1,");
        }
        ++rows;
    }
    f.close();
    std::remove(path.c_str());
    CHECK(rows == 6);
    // Printed with round-trip precision.
    CHECK(first_val == samples[0].states(0, 0));
}
