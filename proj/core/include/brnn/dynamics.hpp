#pragma once

#include <Eigen/Dense>
#include <utility>

namespace brnn {

// Known transition model x' = h(x, a_p, a_q) + ω with ω ~ N(0, Σ_ω), where
// a_p is the predicted vehicle's action and a_q the ego vehicle's. Both
// systems shipped here are linear in (x, a_p, a_q) with no constant term, so
// the transition is fully described by its (constant) Jacobians and the
// belief-propagation code can treat them as such.
struct DynamicsSpec {
    int state_dim = 0;
    int target_action_dim = 0;  // dim of a_p
    int ego_action_dim = 0;     // dim of a_q
    Eigen::MatrixXd j_x;        // ∂h/∂x
    Eigen::MatrixXd j_ap;       // ∂h/∂a_p
    Eigen::MatrixXd j_aq;       // ∂h/∂a_q
    Eigen::MatrixXd sigma_omega;  // process noise covariance

    Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& a_p,
                         const Eigen::VectorXd& a_q,
                         const Eigen::VectorXd& omega) const {
        Eigen::VectorXd out = j_x * x + j_ap * a_p + omega;
        if (ego_action_dim > 0) {
            out += j_aq * a_q;
        }
        return out;
    }
};

// Longitudinal car following: gap to the leader, follower speed, leader
// speed.
struct CarFollowingState {
    double d_pq = 0.0;  // longitudinal gap, meters
    double v_p = 0.0;   // follower speed, m/s
    double v_q = 0.0;   // leader speed, m/s

    Eigen::Vector3d vec() const { return {d_pq, v_p, v_q}; }
    static CarFollowingState from(const Eigen::Vector3d& v) {
        return {v[0], v[1], v[2]};
    }
};

// Scalar benchmark system x_{i+1} = x_i − γ·S(κ_i)·x_i with a random-walk
// gain parameter κ_{i+1} = κ_i + ζ_i drawn around a two-component mixture
// start. Defaults reproduce the reference setup.
struct ToyParams {
    double x0 = 200.0;
    double gamma_toy = 1.0;
    double mu1 = -1.0;
    double mu2 = 1.0;
    double var1 = 0.36;
    double var2 = 0.36;
    double p1 = 0.5;
    double p2 = 0.5;
    double var_zeta = 0.04;
    int horizon = 15;
};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// d' = d − Δd_p + Δd_q + ω₁; v_p' = v_p + Δv_p + ω₂; v_q' = v_q + Δv_q + ω₃.
CarFollowingState step_car_following(const CarFollowingState& x,
                                     const Eigen::Vector2d& a_p,
                                     const Eigen::Vector2d& a_q,
                                     const Eigen::Vector3d& omega);

// Constant Jacobians of the linear car-following transition.
std::pair<Eigen::Matrix<double, 3, 3>, Eigen::Matrix<double, 3, 2>>
jacobians_car_following();

// One step of the closed-loop scalar generator: x' = x − γ·S(κ)·x, κ' = κ+ζ.
std::pair<double, double> step_toy_generator(double x, double kappa,
                                             double zeta,
                                             const ToyParams& params);

// The scalar system recast into the policy/dynamics split: the policy
// predicts the displacement a_p = x' − x, and h(x, a_p) = x + a_p. A small
// Σ_ω keeps the filtering updates well posed.
DynamicsSpec toy_brnn_dynamics(double sigma_omega_var = 1e-4);

// Car-following transition packaged the same way. Default process noise is
// small relative to signal scale and configurable.
DynamicsSpec car_following_dynamics(
    const Eigen::Vector3d& sigma_omega_diag = {0.05 * 0.05, 0.02 * 0.02,
                                               0.02 * 0.02});

// Least-squares recovery of the target action from an observed transition:
// solves J_ap·a ≈ x' − J_x·x − J_aq·a_q. Exact when the transition was
// noise-free; with noise the recovered action absorbs ω.
Eigen::VectorXd recover_target_action(const DynamicsSpec& dyn,
                                      const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& x_next,
                                      const Eigen::VectorXd& a_q);

}  // namespace brnn
