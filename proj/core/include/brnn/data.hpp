#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "brnn/dynamics.hpp"
#include "brnn/policy.hpp"
#include "brnn/rng.hpp"

namespace brnn {

// History length m and prediction horizon h of a training window.
struct WindowSpec {
    int m = 0;
    int h = 1;
};

// A full simulated or recorded run: T+1 states (rows are time) and the T
// ego actions applied between them. `latent` carries generator diagnostics
// (the scalar system's gain series); it is empty for loaded data and never
// visible to models.
struct Trajectory {
    Eigen::MatrixXd states;
    Eigen::MatrixXd ego_actions;
    Eigen::VectorXd latent;
};

// One training window: history x_{−m:0}, ego actions a_{q,0:h−1}, observed
// future x_{1:h}.
struct TrajectoryRecord {
    Eigen::MatrixXd history;      // (m+1) × state dim
    Eigen::MatrixXd ego_actions;  // h × ego action dim
    Eigen::MatrixXd future;       // h × state dim
};

// Windowed dataset with a trajectory-level 80/10/10 split. The normalizer is
// fit on training-split states only, pooled per state component across all
// time steps, then replicated over the m+1 window slots; a component with
// zero variance keeps scale 1.
struct Dataset {
    WindowSpec window;
    int state_dim = 0;
    int ego_action_dim = 0;
    std::vector<Trajectory> trajectories;
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    std::vector<int> test_ids;
    std::vector<TrajectoryRecord> train;
    std::vector<TrajectoryRecord> val;
    std::vector<TrajectoryRecord> test;
    FeatureNormalizer normalizer;
};

// Per-driver car-following controller parameters (intelligent-driver style).
struct CarDriverParams {
    double v0 = 30.0;     // desired speed, m/s
    double t_hw = 1.4;    // desired time headway, s
    double a_max = 1.4;   // max acceleration, m/s²
    double b = 2.0;       // comfortable braking, m/s²
    double s0 = 2.0;      // jam distance, m
    double accel_noise_sd = 0.15;
};

// Synthetic car-following scenario: a leader tracking piecewise-random speed
// targets, a follower drawn from a two-style driver population.
struct CarScenarioParams {
    int steps = 45;    // transitions per trajectory
    double dt = 0.2;   // seconds per step
    double p_aggressive = 0.5;
    // Style means; per-driver values are jittered around these.
    CarDriverParams aggressive{33.0, 0.9, 1.8, 2.5, 1.5, 0.15};
    CarDriverParams timid{28.0, 2.0, 0.9, 1.8, 3.0, 0.15};
};

// Scalar-system trajectories: κ₀ from the two-component mixture, gain walk
// ζ ~ N(0, v_ζ), states simulated for params.horizon steps from x₀.
std::vector<Trajectory> gen_toy_trajectories(const ToyParams& params,
                                             int count, std::uint64_t seed);

// Car-following trajectories at Δt; a run whose gap closes to ≤ 0 is
// discarded and regenerated from a derived seed.
std::vector<Trajectory> gen_car_trajectories(const CarScenarioParams& params,
                                             int count, std::uint64_t seed);

// Bounded-acceleration controller used by the synthetic follower; exposed so
// tests can probe the population's action distribution directly.
double idm_accel(const CarDriverParams& d, double gap, double v_p, double v_q);
CarDriverParams sample_driver(const CarScenarioParams& params, Rng& rng);

// Feature layout shared by every consumer of a window: history rows
// flattened oldest → newest, state components contiguous within a row. The
// policy appends z after normalization.
Eigen::VectorXd flatten_window(const Eigen::MatrixXd& window);

// Cuts every admissible window from every trajectory, splits 80/10/10 by
// trajectory (never by window), and fits the training normalizer.
Dataset make_dataset(std::vector<Trajectory> trajectories,
                     const WindowSpec& window, int ego_action_dim,
                     std::uint64_t split_seed);

// Default-window datasets for the two scenarios (toy: m=0, h=15; car: m=9,
// h=30).
Dataset gen_toy_dataset(const ToyParams& params, int count,
                        std::uint64_t seed);
Dataset gen_car_following_dataset(int count, std::uint64_t seed,
                                  const CarScenarioParams& params = {});

// Car CSV schema: header "vehicle_id,frame,d_pq,v_p,v_q,dd_q,dv_q"; one row
// per frame; the final frame of a segment carries zero ego deltas. Doubles
// are printed with enough digits to round-trip bitwise.
void save_car_csv(const std::vector<Trajectory>& trajectories,
                  const std::string& path);
std::vector<Trajectory> load_car_csv(const std::string& path,
                                     int* rejected_rows = nullptr);
Dataset load_trajectories_csv(const std::string& path,
                              const WindowSpec& window,
                              std::uint64_t split_seed = 0);

// Scalar-system CSV: header "trajectory_id,step,x,kappa".
void save_toy_csv(const std::vector<Trajectory>& trajectories,
                  const std::string& path);

// Dataset manifest: counts, window, split ids, normalizer statistics.
void save_manifest(const Dataset& d, std::uint64_t seed,
                   const std::string& path);

}  // namespace brnn
