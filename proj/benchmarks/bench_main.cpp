#include <benchmark/benchmark.h>

#include <vector>

#include "brnn/adaptation.hpp"
#include "brnn/data.hpp"
#include "brnn/dynamics.hpp"
#include "brnn/gmm.hpp"
#include "brnn/policy.hpp"
#include "brnn/rollout.hpp"
#include "brnn/training.hpp"

namespace {

using namespace brnn;

struct ToyFixture {
    Dataset data;
    DynamicsSpec dyn;
    VariationalPosterior q;

    ToyFixture() : dyn(toy_brnn_dynamics()) {
        data = gen_toy_dataset(ToyParams{}, 64, 1);
        Rng rng(1);
        q = init_posterior(NetworkShape{{2, 50, 50, 1}}, data.normalizer,
                           Eigen::VectorXd::Constant(1, 100.0),
                           static_cast<std::int64_t>(data.train.size()),
                           rng);
    }
};

const ToyFixture& fixture() {
    static ToyFixture f;
    return f;
}

void bench_policy_forward(benchmark::State& state) {
    const ToyFixture& f = fixture();
    Rng rng(2);
    const auto ws = sample_posterior(f.q, rng, 1);
    const Eigen::VectorXd features =
        flatten_window(f.data.train.front().history);
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            forward(ws.front(), features, f.q.normalizer));
    }
}
BENCHMARK(bench_policy_forward);

void bench_rollout_sample(benchmark::State& state) {
    const ToyFixture& f = fixture();
    Rng rng(3);
    const auto ws = sample_posterior(f.q, rng, 1);
    PredictionRequest req;
    req.history = f.data.train.front().history;
    req.ego_actions.resize(15, 0);
    req.horizon = 15;
    for (auto _ : state) {
        benchmark::DoNotOptimize(rollout_sample(
            ws.front(), req, f.dyn, f.q.sigma_eps(), f.q.normalizer, rng));
    }
}
BENCHMARK(bench_rollout_sample);

void bench_energy(benchmark::State& state) {
    const ToyFixture& f = fixture();
    TrainConfig cfg;
    cfg.horizon = 15;
    cfg.mc_samples = 10;
    const std::vector<TrajectoryRecord> batch(f.data.train.begin(),
                                              f.data.train.begin() + 10);
    for (auto _ : state) {
        Rng rng(4);
        benchmark::DoNotOptimize(energy(f.q, batch, f.dyn, cfg, rng));
    }
}
BENCHMARK(bench_energy);

void bench_energy_gradient(benchmark::State& state) {
    const ToyFixture& f = fixture();
    TrainConfig cfg;
    cfg.horizon = 15;
    cfg.mc_samples = 10;
    const std::vector<TrajectoryRecord> batch(f.data.train.begin(),
                                              f.data.train.begin() + 10);
    for (auto _ : state) {
        Rng rng(5);
        benchmark::DoNotOptimize(
            energy_gradient(f.q, batch, f.dyn, cfg, rng));
    }
}
BENCHMARK(bench_energy_gradient);

void bench_weigh_particles(benchmark::State& state) {
    const ToyFixture& f = fixture();
    AdaptConfig cfg;
    cfg.update_period = 5;
    cfg.particles = 100;
    AdaptWindow window;
    window.states = f.data.trajectories.front().states.topRows(6);
    window.ego_actions.resize(5, 0);
    for (auto _ : state) {
        Rng rng(6);
        benchmark::DoNotOptimize(
            weigh_particles(f.q, window, f.dyn, cfg, rng));
    }
}
BENCHMARK(bench_weigh_particles);

void bench_gmm_em(benchmark::State& state) {
    const ToyFixture& f = fixture();
    const auto joint =
        gmm_joint_samples(f.data.train, f.dyn, f.data.normalizer);
    GmmFitOptions opts;
    opts.max_iter = 5;
    opts.tol = 0.0;
    for (auto _ : state) {
        Rng rng(7);
        benchmark::DoNotOptimize(fit_em(joint, 4, opts, rng));
    }
}
BENCHMARK(bench_gmm_em);

}  // namespace

BENCHMARK_MAIN();
