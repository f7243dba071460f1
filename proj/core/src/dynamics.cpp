#include "brnn/dynamics.hpp"

#include <cmath>

namespace brnn {

CarFollowingState step_car_following(const CarFollowingState& x,
                                     const Eigen::Vector2d& a_p,
                                     const Eigen::Vector2d& a_q,
                                     const Eigen::Vector3d& omega) {
    CarFollowingState out;
    out.d_pq = x.d_pq - a_p[0] + a_q[0] + omega[0];
    out.v_p = x.v_p + a_p[1] + omega[1];
    out.v_q = x.v_q + a_q[1] + omega[2];
    return out;
}

std::pair<Eigen::Matrix<double, 3, 3>, Eigen::Matrix<double, 3, 2>>
jacobians_car_following() {
    Eigen::Matrix<double, 3, 3> j_x = Eigen::Matrix<double, 3, 3>::Identity();
    Eigen::Matrix<double, 3, 2> j_ap;
    j_ap << -1.0, 0.0, 0.0, 1.0, 0.0, 0.0;
    return {j_x, j_ap};
}

std::pair<double, double> step_toy_generator(double x, double kappa,
                                             double zeta,
                                             const ToyParams& params) {
    const double x_next = x - params.gamma_toy * sigmoid(kappa) * x;
    return {x_next, kappa + zeta};
}

DynamicsSpec toy_brnn_dynamics(double sigma_omega_var) {
    DynamicsSpec spec;
    spec.state_dim = 1;
    spec.target_action_dim = 1;
    spec.ego_action_dim = 0;
    spec.j_x = Eigen::MatrixXd::Identity(1, 1);
    spec.j_ap = Eigen::MatrixXd::Identity(1, 1);
    spec.j_aq = Eigen::MatrixXd::Zero(1, 0);
    spec.sigma_omega = Eigen::MatrixXd::Constant(1, 1, sigma_omega_var);
    return spec;
}

Eigen::VectorXd recover_target_action(const DynamicsSpec& dyn,
                                      const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& x_next,
                                      const Eigen::VectorXd& a_q) {
    Eigen::VectorXd resid = x_next - dyn.j_x * x;
    if (dyn.ego_action_dim > 0) {
        resid -= dyn.j_aq * a_q;
    }
    return dyn.j_ap.colPivHouseholderQr().solve(resid);
}

DynamicsSpec car_following_dynamics(const Eigen::Vector3d& sigma_omega_diag) {
    DynamicsSpec spec;
    spec.state_dim = 3;
    spec.target_action_dim = 2;
    spec.ego_action_dim = 2;
    auto [j_x, j_ap] = jacobians_car_following();
    spec.j_x = j_x;
    spec.j_ap = j_ap;
    Eigen::Matrix<double, 3, 2> j_aq;
    j_aq << 1.0, 0.0, 0.0, 0.0, 0.0, 1.0;
    spec.j_aq = j_aq;
    spec.sigma_omega = sigma_omega_diag.asDiagonal();
    return spec;
}

}  // namespace brnn
