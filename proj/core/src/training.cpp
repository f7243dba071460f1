#include "brnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include "brnn/errors.hpp"
#include "brnn/math_core.hpp"
#include "csv_util.hpp"

namespace brnn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Base standard-normal noise for one energy evaluation, drawn up front in a
// fixed order so the estimator is a deterministic, differentiable function
// of the parameters (common random numbers). Order: per sample, the weight
// draws layer by layer in row-major order, then z; afterwards, per sample,
// per step, per record, the ε components followed by the ω components.
struct BaseNoise {
    std::vector<std::vector<Eigen::MatrixXd>> u_w;  // [M][L]
    std::vector<double> u_z;                        // [M]
    std::vector<std::vector<Eigen::MatrixXd>> eps;  // [M][h], ad × B
    std::vector<std::vector<Eigen::MatrixXd>> omega;  // [M][h], sd × B
};

BaseNoise draw_base_noise(const VariationalPosterior& q, int batch, int h,
                          int ad, int sd, int m_samples, Rng& rng) {
    BaseNoise noise;
    noise.u_w.resize(m_samples);
    noise.u_z.resize(m_samples);
    for (int s = 0; s < m_samples; ++s) {
        noise.u_w[s].reserve(q.m_w.size());
        for (const Eigen::MatrixXd& m : q.m_w) {
            Eigen::MatrixXd u(m.rows(), m.cols());
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    u(r, c) = rng.normal();
                }
            }
            noise.u_w[s].push_back(std::move(u));
        }
        noise.u_z[s] = rng.normal();
    }
    noise.eps.resize(m_samples);
    noise.omega.resize(m_samples);
    for (int s = 0; s < m_samples; ++s) {
        noise.eps[s].resize(h);
        noise.omega[s].resize(h);
        for (int i = 0; i < h; ++i) {
            noise.eps[s][i].resize(ad, batch);
            noise.omega[s][i].resize(sd, batch);
            for (int n = 0; n < batch; ++n) {
                for (int k = 0; k < ad; ++k) {
                    noise.eps[s][i](k, n) = rng.normal();
                }
                for (int k = 0; k < sd; ++k) {
                    noise.omega[s][i](k, n) = rng.normal();
                }
            }
        }
    }
    return noise;
}

WeightSample build_sample(const VariationalPosterior& q,
                          const BaseNoise& noise, int s) {
    WeightSample ws;
    ws.w.reserve(q.m_w.size());
    for (std::size_t l = 0; l < q.m_w.size(); ++l) {
        ws.w.push_back(q.m_w[l] +
                       ((q.log_v_w[l].array() * 0.5).exp() *
                        noise.u_w[s][l].array())
                           .matrix());
    }
    ws.z = q.m_z + std::exp(0.5 * q.log_v_z) * noise.u_z[s];
    return ws;
}

struct EvalPrecomp {
    int batch = 0, h = 0, sd = 0, ad = 0, m = 0, feat = 0, layers = 0;
    Eigen::MatrixXd s_cov;      // belief covariance, constant per call
    Eigen::MatrixXd s_lower;    // its Cholesky factor
    double s_log_det = 0.0;
    Eigen::MatrixXd s_inv;
    Eigen::MatrixXd sinv_c;     // S⁻¹·J_ap
    Eigen::VectorXd kappa;      // diag(J_apᵀ·S⁻¹·J_ap)
    Eigen::MatrixXd omega_lower;
    Eigen::VectorXd eps_sd;     // √σ_ε²
    Eigen::VectorXd omega_sd_diag;
    Eigen::VectorXd inv_scale;
    std::vector<Eigen::MatrixXd> hist;      // [m+1], sd × B
    std::vector<Eigen::MatrixXd> obs;       // [h], sd × B
    std::vector<Eigen::MatrixXd> jaq_aq;    // [h], sd × B
};

EvalPrecomp precompute(const VariationalPosterior& q,
                       const std::vector<TrajectoryRecord>& batch,
                       const DynamicsSpec& dyn, int h) {
    EvalPrecomp pc;
    pc.batch = static_cast<int>(batch.size());
    pc.h = h;
    pc.sd = dyn.state_dim;
    pc.ad = dyn.target_action_dim;
    pc.layers = q.shape.num_layers();
    pc.feat = static_cast<int>(q.normalizer.mean.size());
    pc.m = pc.feat / pc.sd - 1;

    const Eigen::VectorXd sigma_eps = q.sigma_eps();
    pc.s_cov = dyn.j_ap * sigma_eps.asDiagonal() * dyn.j_ap.transpose() +
               dyn.sigma_omega;
    CovFactor factor(pc.s_cov);
    pc.s_lower = factor.lower;
    pc.s_log_det = factor.log_det;
    pc.s_inv =
        factor.solve(Eigen::MatrixXd(Eigen::MatrixXd::Identity(pc.sd, pc.sd)));
    pc.sinv_c = pc.s_inv * dyn.j_ap;
    pc.kappa = (dyn.j_ap.transpose() * pc.sinv_c).diagonal();
    CovFactor omega_factor(dyn.sigma_omega);
    pc.omega_lower = omega_factor.lower;
    pc.omega_sd_diag = dyn.sigma_omega.diagonal().array().sqrt().matrix();
    pc.eps_sd = sigma_eps.array().sqrt().matrix();
    pc.inv_scale = q.normalizer.scale.cwiseInverse();

    pc.hist.resize(pc.m + 1);
    for (int r = 0; r <= pc.m; ++r) {
        pc.hist[r].resize(pc.sd, pc.batch);
    }
    pc.obs.resize(h);
    pc.jaq_aq.resize(h);
    for (int i = 0; i < h; ++i) {
        pc.obs[i].resize(pc.sd, pc.batch);
        pc.jaq_aq[i].resize(pc.sd, pc.batch);
    }
    for (int n = 0; n < pc.batch; ++n) {
        const TrajectoryRecord& rec = batch[n];
        if (rec.history.rows() != pc.m + 1 ||
            rec.history.cols() != pc.sd ||
            rec.future.rows() < h) {
            throw NumericalError("record shape inconsistent with model");
        }
        for (int r = 0; r <= pc.m; ++r) {
            pc.hist[r].col(n) = rec.history.row(r).transpose();
        }
        for (int i = 0; i < h; ++i) {
            pc.obs[i].col(n) = rec.future.row(i).transpose();
            if (dyn.ego_action_dim > 0) {
                pc.jaq_aq[i].col(n) =
                    dyn.j_aq * rec.ego_actions.row(i).transpose();
            } else {
                pc.jaq_aq[i].col(n).setZero();
            }
        }
    }
    return pc;
}

// Assembles the (normalized features ⊕ z) input matrix for step i from the
// record histories and the sampled path states.
Eigen::MatrixXd step_input(const EvalPrecomp& pc,
                           const FeatureNormalizer& norm,
                           const std::vector<Eigen::MatrixXd>& path, int i,
                           double z) {
    Eigen::MatrixXd input(pc.feat + 1, pc.batch);
    for (int slot = 0; slot <= pc.m; ++slot) {
        const int t = i - pc.m + slot;
        const Eigen::MatrixXd& raw = t <= 0 ? pc.hist[t + pc.m] : path[t];
        input.middleRows(slot * pc.sd, pc.sd) =
            ((raw.colwise() - norm.mean.segment(slot * pc.sd, pc.sd))
                 .array()
                 .colwise() *
             pc.inv_scale.segment(slot * pc.sd, pc.sd).array())
                .matrix();
    }
    input.row(pc.feat).setConstant(z);
    return input;
}

// MLP forward over the batch; fills acts with [input, hidden_1, …] and
// returns the affine output.
Eigen::MatrixXd mlp_forward(const WeightSample& ws,
                            const Eigen::MatrixXd& input,
                            std::vector<Eigen::MatrixXd>* acts) {
    if (acts != nullptr) {
        acts->clear();
        acts->push_back(input);
    }
    Eigen::MatrixXd a = input;
    const int layers = static_cast<int>(ws.w.size());
    for (int l = 0; l < layers; ++l) {
        const Eigen::MatrixXd& w = ws.w[l];
        Eigen::MatrixXd z = w.leftCols(w.cols() - 1) * a;
        z.colwise() += w.col(w.cols() - 1);
        if (l + 1 < layers) {
            a = z.cwiseMax(0.0);
            if (acts != nullptr) {
                acts->push_back(a);
            }
        } else {
            a = std::move(z);
        }
    }
    return a;
}

struct SampleForward {
    std::vector<Eigen::MatrixXd> path;  // [h+1], sd × B; path[0] = x₀
    Eigen::VectorXd loglik;             // per record
    // Stored only when gradients are needed:
    std::vector<std::vector<Eigen::MatrixXd>> acts;  // [h][layers]
    std::vector<Eigen::MatrixXd> u;                  // [h], S⁻¹·resid
    std::vector<Eigen::MatrixXd> p;                  // [h], J_apᵀ·u
};

SampleForward forward_sample(const VariationalPosterior& q,
                             const EvalPrecomp& pc, const DynamicsSpec& dyn,
                             const WeightSample& ws, const BaseNoise& noise,
                             int s, bool keep) {
    SampleForward f;
    f.path.resize(pc.h + 1);
    f.path[0] = pc.hist[pc.m];
    f.loglik = Eigen::VectorXd::Zero(pc.batch);
    if (keep) {
        f.acts.resize(pc.h);
        f.u.resize(pc.h);
        f.p.resize(pc.h);
    }
    std::vector<Eigen::MatrixXd> acts;
    for (int i = 0; i < pc.h; ++i) {
        const Eigen::MatrixXd input =
            step_input(pc, q.normalizer, f.path, i, ws.z);
        const Eigen::MatrixXd abar =
            mlp_forward(ws, input, keep ? &acts : nullptr);
        Eigen::MatrixXd mean = dyn.j_x * f.path[i] + dyn.j_ap * abar;
        mean += pc.jaq_aq[i];
        const Eigen::MatrixXd resid = pc.obs[i] - mean;
        const Eigen::MatrixXd half =
            pc.s_lower.triangularView<Eigen::Lower>().solve(resid);
        f.loglik.array() +=
            -0.5 * (pc.sd * kLog2Pi + pc.s_log_det) -
            0.5 * half.array().square().colwise().sum().transpose();
        if (keep) {
            f.acts[i] = std::move(acts);
            f.u[i] = pc.s_inv * resid;
            f.p[i] = dyn.j_ap.transpose() * f.u[i];
        }
        // Advance the sampled conditioning path.
        const Eigen::MatrixXd a_p =
            abar + pc.eps_sd.asDiagonal() * noise.eps[s][i];
        f.path[i + 1] = dyn.j_x * f.path[i] + dyn.j_ap * a_p +
                        pc.jaq_aq[i] + pc.omega_lower * noise.omega[s][i];
    }
    return f;
}

struct ParamGrad {
    std::vector<Eigen::MatrixXd> m_w, log_v_w;
    double m_z = 0.0, log_v_z = 0.0;
    Eigen::VectorXd log_sigma_eps;
    Eigen::VectorXd log_sigma_omega;

    explicit ParamGrad(const VariationalPosterior& q, int sd) {
        for (const Eigen::MatrixXd& m : q.m_w) {
            m_w.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
            log_v_w.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
        }
        log_sigma_eps = Eigen::VectorXd::Zero(q.log_sigma_eps.size());
        log_sigma_omega = Eigen::VectorXd::Zero(sd);
    }
};

struct EvalOutput {
    double energy = 0.0;
    ParamGrad grad;
};

// Shared evaluator behind energy() and energy_gradient(). Pass A runs every
// sample forward to collect the α-scaled terms; when gradients are wanted, a
// second per-sample pass recomputes the forward with stored activations and
// runs the backward sweep weighted by that sample's softmax responsibility.
EvalOutput evaluate(const VariationalPosterior& q,
                    const std::vector<TrajectoryRecord>& batch,
                    const DynamicsSpec& dyn, const TrainConfig& cfg,
                    Rng& rng, bool want_grad) {
    if (batch.empty()) {
        throw NumericalError("energy on empty batch");
    }
    if (cfg.mc_samples < 1 || cfg.horizon < 1) {
        throw NumericalError("energy needs M >= 1 and h >= 1");
    }
    if (cfg.train_sigma_omega &&
        (dyn.sigma_omega -
         Eigen::MatrixXd(dyn.sigma_omega.diagonal().asDiagonal()))
                .cwiseAbs()
                .maxCoeff() != 0.0) {
        throw NumericalError(
            "process noise training requires a diagonal covariance");
    }

    const int b = static_cast<int>(batch.size());
    const int m_samples = cfg.mc_samples;
    const double n_train = static_cast<double>(q.n_train);
    const EvalPrecomp pc = precompute(q, batch, dyn, cfg.horizon);
    const BaseNoise noise = draw_base_noise(q, b, cfg.horizon, pc.ad, pc.sd,
                                            m_samples, rng);

    std::vector<WeightSample> samples;
    samples.reserve(m_samples);
    std::vector<double> log_f(m_samples);
    // α·(loglik − log f), samples down each record's column so the
    // per-record log-sum-exp reads contiguous memory.
    Eigen::MatrixXd a_terms(m_samples, b);
    for (int s = 0; s < m_samples; ++s) {
        samples.push_back(build_sample(q, noise, s));
        const auto [lfw, lfz] = log_factors(samples[s], q);
        log_f[s] = lfw + lfz;
        const SampleForward f =
            forward_sample(q, pc, dyn, samples[s], noise, s, false);
        for (int n = 0; n < b; ++n) {
            if (!std::isfinite(f.loglik[n])) {
                throw NumericalError("energy non-finite at record " +
                                     std::to_string(n) + ", sample " +
                                     std::to_string(s));
            }
            a_terms(s, n) = cfg.alpha * (f.loglik[n] - log_f[s]);
        }
    }

    Eigen::VectorXd lse(b);
    for (int n = 0; n < b; ++n) {
        lse[n] = log_sum_exp(a_terms.col(n).data(),
                             static_cast<std::size_t>(m_samples));
    }
    const double log_zq = log_z_q(q);
    EvalOutput out{.energy = -log_zq -
                             n_train / (cfg.alpha * b) *
                                 (lse.sum() - b * std::log(double(m_samples))),
                   .grad = ParamGrad(q, pc.sd)};
    if (!want_grad) {
        return out;
    }

    // Softmax responsibilities r_{n,s}, scaled to c_{n,s} = (N/B)·r_{n,s}.
    Eigen::MatrixXd c_weights(b, m_samples);
    for (int n = 0; n < b; ++n) {
        c_weights.row(n) = (a_terms.col(n).transpose().array() - lse[n])
                               .exp() *
                           (n_train / b);
    }

    ParamGrad& g = out.grad;
    const int layers = pc.layers;
    const double v_z = std::exp(q.log_v_z);
    const double gamma = q.gamma;
    const double lambda = q.lambda;

    for (int s = 0; s < m_samples; ++s) {
        const WeightSample& ws = samples[s];
        const SampleForward f =
            forward_sample(q, pc, dyn, ws, noise, s, true);
        const Eigen::VectorXd cvec = c_weights.col(s);
        const double r_s = cvec.sum();

        std::vector<Eigen::MatrixXd> gw(layers);
        for (int l = 0; l < layers; ++l) {
            gw[l] = Eigen::MatrixXd::Zero(ws.w[l].rows(), ws.w[l].cols());
        }
        double gz = 0.0;
        Eigen::VectorXd g_lse = Eigen::VectorXd::Zero(pc.ad);
        Eigen::VectorXd g_lso = Eigen::VectorXd::Zero(pc.sd);

        // dℓ/dX_t for ℓ = Σ_n c_n·loglik_n; index t over path states.
        std::vector<Eigen::MatrixXd> g_path(pc.h + 1);
        for (int t = 1; t <= pc.h; ++t) {
            g_path[t] = Eigen::MatrixXd::Zero(pc.sd, b);
        }

        for (int i = pc.h - 1; i >= 0; --i) {
            const Eigen::MatrixXd v_dens = f.u[i] * cvec.asDiagonal();
            Eigen::MatrixXd v_tot = v_dens;
            v_tot += g_path[i + 1];

            // Density covariance dependence on the noise scales.
            for (int k = 0; k < pc.ad; ++k) {
                const double sig2 = pc.eps_sd[k] * pc.eps_sd[k];
                g_lse[k] +=
                    sig2 * 0.5 *
                    ((f.p[i].row(k).array().square() - pc.kappa[k]) *
                     cvec.transpose().array())
                        .sum();
            }
            if (cfg.train_sigma_omega) {
                for (int k = 0; k < pc.sd; ++k) {
                    const double so2 =
                        pc.omega_sd_diag[k] * pc.omega_sd_diag[k];
                    g_lso[k] +=
                        so2 * 0.5 *
                        ((f.u[i].row(k).array().square() -
                          pc.s_inv(k, k)) *
                         cvec.transpose().array())
                            .sum();
                }
            }
            // Sampled-path dependence of everything downstream.
            if (i + 1 <= pc.h) {
                const Eigen::MatrixXd ctg =
                    dyn.j_ap.transpose() * g_path[i + 1];
                for (int k = 0; k < pc.ad; ++k) {
                    g_lse[k] += 0.5 * pc.eps_sd[k] *
                                (noise.eps[s][i].row(k).array() *
                                 ctg.row(k).array())
                                    .sum();
                }
                if (cfg.train_sigma_omega) {
                    for (int k = 0; k < pc.sd; ++k) {
                        g_lso[k] += 0.5 * pc.omega_sd_diag[k] *
                                    (noise.omega[s][i].row(k).array() *
                                     g_path[i + 1].row(k).array())
                                        .sum();
                    }
                }
            }

            if (i >= 1) {
                g_path[i] += dyn.j_x.transpose() * v_tot;
            }

            // Backward through the network for this step.
            Eigen::MatrixXd dz = dyn.j_ap.transpose() * v_tot;
            for (int l = layers - 1; l >= 0; --l) {
                const Eigen::MatrixXd& act = f.acts[i][l];
                gw[l].leftCols(act.rows()) += dz * act.transpose();
                gw[l].col(act.rows()) += dz.rowwise().sum();
                if (l == 0) {
                    const Eigen::MatrixXd dinput =
                        ws.w[l].leftCols(act.rows()).transpose() * dz;
                    gz += dinput.row(pc.feat).sum();
                    for (int slot = 0; slot <= pc.m; ++slot) {
                        const int t = i - pc.m + slot;
                        if (t >= 1) {
                            g_path[t] +=
                                (dinput.middleRows(slot * pc.sd, pc.sd)
                                     .array()
                                     .colwise() *
                                 pc.inv_scale.segment(slot * pc.sd, pc.sd)
                                     .array())
                                    .matrix();
                        }
                    }
                } else {
                    Eigen::MatrixXd da =
                        ws.w[l].leftCols(act.rows()).transpose() * dz;
                    dz = (da.array() * (act.array() > 0.0).cast<double>())
                             .matrix();
                }
            }
        }

        // Assemble this sample's contribution: the likelihood part enters
        // with a minus sign, the tied factors with +R_s, and the weight and
        // z reparameterizations chain both through the sampled values.
        for (int l = 0; l < layers; ++l) {
            const auto& w = ws.w[l].array();
            const auto& m = q.m_w[l].array();
            const auto v = q.log_v_w[l].array().exp();
            const Eigen::ArrayXXd d_dw =
                -gw[l].array() +
                r_s / n_train * ((1.0 / lambda - 1.0 / v) * w + m / v);
            g.m_w[l].array() += d_dw + r_s / n_train * (w / v);
            g.log_v_w[l].array() +=
                d_dw * (w - m) * 0.5 +
                r_s / n_train * (w * w / (2.0 * v) - m * w / v);
        }
        const double d_dz =
            -gz + r_s / n_train *
                      ((1.0 / gamma - 1.0 / v_z) * ws.z + q.m_z / v_z);
        g.m_z += d_dz + r_s / n_train * (ws.z / v_z);
        g.log_v_z += d_dz * (ws.z - q.m_z) * 0.5 +
                     r_s / n_train *
                         (ws.z * ws.z / (2.0 * v_z) - q.m_z * ws.z / v_z);
        g.log_sigma_eps -= g_lse;
        if (cfg.train_sigma_omega) {
            g.log_sigma_omega -= g_lso;
        }
    }

    // −log Z_q term.
    for (int l = 0; l < layers; ++l) {
        const auto& m = q.m_w[l].array();
        const auto v = q.log_v_w[l].array().exp();
        g.m_w[l].array() -= m / v;
        g.log_v_w[l].array() -= 0.5 - m * m / (2.0 * v);
    }
    g.m_z -= n_train * q.m_z / v_z;
    g.log_v_z -= n_train * (0.5 - q.m_z * q.m_z / (2.0 * v_z));
    return out;
}

}  // namespace

double energy(const VariationalPosterior& q,
              const std::vector<TrajectoryRecord>& batch,
              const DynamicsSpec& dyn, const TrainConfig& cfg, Rng& rng) {
    return evaluate(q, batch, dyn, cfg, rng, false).energy;
}

double energy_single_step(const VariationalPosterior& q,
                          const std::vector<TrajectoryRecord>& batch,
                          const DynamicsSpec& dyn, const TrainConfig& cfg,
                          Rng& rng) {
    if (cfg.horizon != 1) {
        throw NumericalError("single-step energy requires h = 1");
    }
    if (batch.empty()) {
        throw NumericalError("energy on empty batch");
    }
    const int b = static_cast<int>(batch.size());
    const int sd = dyn.state_dim;
    const int ad = dyn.target_action_dim;
    const BaseNoise noise =
        draw_base_noise(q, b, 1, ad, sd, cfg.mc_samples, rng);

    const Eigen::VectorXd sigma_eps = q.sigma_eps();
    const Eigen::MatrixXd cov = dyn.j_ap * sigma_eps.asDiagonal() *
                                    dyn.j_ap.transpose() +
                                dyn.sigma_omega;
    const CovFactor factor(cov);

    Eigen::MatrixXd a_terms(cfg.mc_samples, b);
    for (int s = 0; s < cfg.mc_samples; ++s) {
        const WeightSample ws = build_sample(q, noise, s);
        const auto [lfw, lfz] = log_factors(ws, q);
        for (int n = 0; n < b; ++n) {
            const TrajectoryRecord& rec = batch[n];
            const Eigen::VectorXd x0 =
                rec.history.row(rec.history.rows() - 1).transpose();
            const Eigen::VectorXd abar =
                forward(ws, flatten_window(rec.history), q.normalizer);
            Eigen::VectorXd mean = dyn.j_x * x0 + dyn.j_ap * abar;
            if (dyn.ego_action_dim > 0) {
                mean += dyn.j_aq * rec.ego_actions.row(0).transpose();
            }
            const Eigen::VectorXd half =
                factor.lower.triangularView<Eigen::Lower>().solve(
                    rec.future.row(0).transpose() - mean);
            const double loglik =
                -0.5 * (sd * kLog2Pi + factor.log_det + half.squaredNorm());
            a_terms(s, n) = cfg.alpha * (loglik - lfw - lfz);
        }
    }
    double total = 0.0;
    for (int n = 0; n < b; ++n) {
        total += log_sum_exp(a_terms.col(n).data(),
                             static_cast<std::size_t>(cfg.mc_samples)) -
                 std::log(double(cfg.mc_samples));
    }
    return -log_z_q(q) -
           static_cast<double>(q.n_train) / (cfg.alpha * b) * total;
}

EnergyGradient energy_gradient(const VariationalPosterior& q,
                               const std::vector<TrajectoryRecord>& batch,
                               const DynamicsSpec& dyn, const TrainConfig& cfg,
                               Rng& rng) {
    EvalOutput out = evaluate(q, batch, dyn, cfg, rng, true);
    EnergyGradient grad;
    grad.energy = out.energy;
    grad.m_w = std::move(out.grad.m_w);
    grad.log_v_w = std::move(out.grad.log_v_w);
    grad.m_z = out.grad.m_z;
    grad.log_v_z = out.grad.log_v_z;
    grad.log_sigma_eps = std::move(out.grad.log_sigma_eps);
    if (cfg.train_sigma_omega) {
        grad.log_sigma_omega = std::move(out.grad.log_sigma_omega);
    }
    return grad;
}

namespace {

// Flat parameter vector layout: means, log variances, m_z, log v_z,
// log Σ_ε, then log Σ_ω when trained.
int flat_size(const VariationalPosterior& q, bool with_omega, int sd) {
    int total = 0;
    for (const Eigen::MatrixXd& m : q.m_w) {
        total += 2 * static_cast<int>(m.size());
    }
    total += 2 + static_cast<int>(q.log_sigma_eps.size());
    if (with_omega) {
        total += sd;
    }
    return total;
}

void pack(const VariationalPosterior& q, const Eigen::VectorXd& log_so,
          bool with_omega, Eigen::VectorXd* flat) {
    int at = 0;
    auto put = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                (*flat)[at++] = m(r, c);
            }
        }
    };
    for (const auto& m : q.m_w) {
        put(m);
    }
    for (const auto& m : q.log_v_w) {
        put(m);
    }
    (*flat)[at++] = q.m_z;
    (*flat)[at++] = q.log_v_z;
    for (Eigen::Index i = 0; i < q.log_sigma_eps.size(); ++i) {
        (*flat)[at++] = q.log_sigma_eps[i];
    }
    if (with_omega) {
        for (Eigen::Index i = 0; i < log_so.size(); ++i) {
            (*flat)[at++] = log_so[i];
        }
    }
}

void unpack(const Eigen::VectorXd& flat, bool with_omega,
            VariationalPosterior* q, Eigen::VectorXd* log_so) {
    int at = 0;
    auto take = [&](Eigen::MatrixXd* m) {
        for (Eigen::Index r = 0; r < m->rows(); ++r) {
            for (Eigen::Index c = 0; c < m->cols(); ++c) {
                (*m)(r, c) = flat[at++];
            }
        }
    };
    for (auto& m : q->m_w) {
        take(&m);
    }
    for (auto& m : q->log_v_w) {
        take(&m);
    }
    q->m_z = flat[at++];
    q->log_v_z = flat[at++];
    for (Eigen::Index i = 0; i < q->log_sigma_eps.size(); ++i) {
        q->log_sigma_eps[i] = flat[at++];
    }
    if (with_omega) {
        for (Eigen::Index i = 0; i < log_so->size(); ++i) {
            (*log_so)[i] = flat[at++];
        }
    }
}

void pack_grad(const EnergyGradient& g, bool with_omega,
               Eigen::VectorXd* flat) {
    int at = 0;
    auto put = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                (*flat)[at++] = m(r, c);
            }
        }
    };
    for (const auto& m : g.m_w) {
        put(m);
    }
    for (const auto& m : g.log_v_w) {
        put(m);
    }
    (*flat)[at++] = g.m_z;
    (*flat)[at++] = g.log_v_z;
    for (Eigen::Index i = 0; i < g.log_sigma_eps.size(); ++i) {
        (*flat)[at++] = g.log_sigma_eps[i];
    }
    if (with_omega) {
        for (Eigen::Index i = 0; i < g.log_sigma_omega.size(); ++i) {
            (*flat)[at++] = g.log_sigma_omega[i];
        }
    }
}

}  // namespace

TrainResult train(const VariationalPosterior& q0, const Dataset& data,
                  const DynamicsSpec& dyn, const TrainConfig& cfg, Rng& rng) {
    if (data.train.empty()) {
        throw NumericalError("training set is empty");
    }
    TrainResult result;
    VariationalPosterior q = q0;
    DynamicsSpec dyn_now = dyn;
    Eigen::VectorXd log_so =
        dyn.sigma_omega.diagonal().array().log().matrix();
    const bool with_omega = cfg.train_sigma_omega;

    const int dim = flat_size(q, with_omega, dyn.state_dim);
    Eigen::VectorXd theta(dim), grad_flat(dim);
    pack(q, log_so, with_omega, &theta);
    Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(dim);
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::int64_t step_count = 0;

    // Validation noise is replayed identically every epoch so the trace is
    // comparable and the checkpoint choice deterministic.
    const Rng val_base = rng.derive(0x76616c);
    const std::vector<TrajectoryRecord>& val_pool =
        data.val.empty() ? data.train : data.val;
    const int val_take =
        std::min<int>(cfg.val_batch_cap, static_cast<int>(val_pool.size()));
    const std::vector<TrajectoryRecord> val_records(val_pool.begin(),
                                                    val_pool.begin() +
                                                        val_take);

    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    double best_val = std::numeric_limits<double>::infinity();
    VariationalPosterior best_q = q;
    Eigen::VectorXd best_log_so = log_so;
    result.best_epoch = -1;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_energy = 0.0;
        int iterations = 0;
        for (std::size_t start = 0; start < order.size();
             start += cfg.batch_size) {
            const std::size_t stop =
                std::min(order.size(), start + cfg.batch_size);
            std::vector<TrajectoryRecord> batch;
            batch.reserve(stop - start);
            for (std::size_t j = start; j < stop; ++j) {
                batch.push_back(data.train[order[j]]);
            }
            EnergyGradient g;
            try {
                g = energy_gradient(q, batch, dyn_now, cfg, rng);
            } catch (const NumericalError&) {
                result.diverged = true;
                break;
            }
            if (!std::isfinite(g.energy)) {
                result.diverged = true;
                break;
            }
            epoch_energy += g.energy;
            ++iterations;

            if (with_omega && g.log_sigma_omega.size() == 0) {
                g.log_sigma_omega = Eigen::VectorXd::Zero(dyn.state_dim);
            }
            pack_grad(g, with_omega, &grad_flat);
            const double norm = grad_flat.norm();
            if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
                grad_flat *= cfg.clip_norm / norm;
            }
            if (cfg.learning_rate != 0.0) {
                ++step_count;
                adam_m = beta1 * adam_m + (1.0 - beta1) * grad_flat;
                adam_v = beta2 * adam_v.array() +
                         (1.0 - beta2) * grad_flat.array().square();
                const double bc1 =
                    1.0 - std::pow(beta1, double(step_count));
                const double bc2 =
                    1.0 - std::pow(beta2, double(step_count));
                theta.array() -=
                    cfg.learning_rate * (adam_m.array() / bc1) /
                    ((adam_v.array() / bc2).sqrt() + adam_eps);
                unpack(theta, with_omega, &q, &log_so);
                if (with_omega) {
                    dyn_now.sigma_omega =
                        log_so.array().exp().matrix().asDiagonal();
                }
            }
        }
        if (result.diverged) {
            break;
        }
        Rng val_rng = val_base;
        const double val_energy =
            energy(q, val_records, dyn_now, cfg, val_rng);
        result.trace.push_back(
            {epoch, iterations > 0 ? epoch_energy / iterations : 0.0,
             val_energy});
        if (val_energy < best_val) {
            best_val = val_energy;
            best_q = q;
            best_log_so = log_so;
            result.best_epoch = epoch;
        }
    }

    const bool use_best = result.best_epoch >= 0;
    result.posterior = use_best ? best_q : q;
    result.sigma_omega =
        with_omega
            ? Eigen::VectorXd(
                  (use_best ? best_log_so : log_so).array().exp().matrix())
            : Eigen::VectorXd(dyn.sigma_omega.diagonal());
    return result;
}

void save_energy_trace_csv(const std::vector<EpochStat>& trace,
                           const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "epoch,train_energy,val_energy\n";
    for (const EpochStat& row : trace) {
        out << row.epoch << ',' << detail::fmt(row.train_energy) << ','
            << detail::fmt(row.val_energy) << '\n';
    }
}

}  // namespace brnn
