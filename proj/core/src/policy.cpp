#include "brnn/policy.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "brnn/errors.hpp"

namespace brnn {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

double gaussian_normalizer_term(double m, double v) {
    return 0.5 * std::log(2.0 * 3.14159265358979323846 * v) + m * m / (2.0 * v);
}
}  // namespace

std::int64_t NetworkShape::weight_count() const {
    std::int64_t total = 0;
    for (int l = 0; l + 1 < static_cast<int>(layer_sizes.size()); ++l) {
        total += static_cast<std::int64_t>(layer_sizes[l + 1]) *
                 (layer_sizes[l] + 1);
    }
    return total;
}

Eigen::VectorXd forward(const WeightSample& ws, const Eigen::VectorXd& features,
                        const FeatureNormalizer& norm) {
    if (ws.w.empty()) {
        throw NumericalError("forward on empty network");
    }
    // First layer consumes [normalized features; z] plus a bias slot.
    if (ws.w.front().cols() != features.size() + 2) {
        throw NumericalError("forward feature dimension mismatch");
    }
    Eigen::VectorXd h(features.size() + 1);
    h.head(features.size()) = norm.apply(features);
    h[features.size()] = ws.z;
    const int layers = static_cast<int>(ws.w.size());
    for (int l = 0; l < layers; ++l) {
        const Eigen::MatrixXd& w = ws.w[l];
        if (w.cols() != h.size() + 1) {
            throw NumericalError("forward layer shape mismatch");
        }
        Eigen::VectorXd pre =
            w.leftCols(h.size()) * h + w.col(w.cols() - 1);
        if (l + 1 < layers) {
            h = pre.cwiseMax(0.0);
        } else {
            h = std::move(pre);
        }
    }
    return h;
}

std::vector<WeightSample> sample_posterior(const VariationalPosterior& q,
                                           Rng& rng, int count) {
    std::vector<WeightSample> out;
    out.reserve(count);
    for (int s = 0; s < count; ++s) {
        WeightSample ws;
        ws.w.reserve(q.m_w.size());
        for (std::size_t l = 0; l < q.m_w.size(); ++l) {
            const Eigen::MatrixXd& m = q.m_w[l];
            const Eigen::MatrixXd sd =
                (q.log_v_w[l].array() * 0.5).exp().matrix();
            Eigen::MatrixXd w(m.rows(), m.cols());
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    w(r, c) = m(r, c) + sd(r, c) * rng.normal();
                }
            }
            ws.w.push_back(std::move(w));
        }
        ws.z = q.m_z + std::exp(0.5 * q.log_v_z) * rng.normal();
        out.push_back(std::move(ws));
    }
    return out;
}

std::pair<double, double> log_factors(const WeightSample& ws,
                                      const VariationalPosterior& q) {
    const double n = static_cast<double>(q.n_train);
    double log_f_w = 0.0;
    for (std::size_t l = 0; l < ws.w.size(); ++l) {
        const auto& w = ws.w[l].array();
        const auto& m = q.m_w[l].array();
        const auto v = q.log_v_w[l].array().exp();
        log_f_w += ((v - q.lambda) / (2.0 * q.lambda * v) * w * w +
                    (m / v) * w)
                       .sum();
    }
    log_f_w /= n;
    const double v_z = std::exp(q.log_v_z);
    const double log_f_z =
        ((v_z - q.gamma) / (2.0 * q.gamma * v_z) * ws.z * ws.z +
         (q.m_z / v_z) * ws.z) /
        n;
    return {log_f_w, log_f_z};
}

double log_z_q(const VariationalPosterior& q) {
    double total = 0.0;
    for (std::size_t l = 0; l < q.m_w.size(); ++l) {
        const auto& m = q.m_w[l].array();
        const auto v = q.log_v_w[l].array().exp();
        total += (0.5 * (kLog2Pi + q.log_v_w[l].array()) + m * m / (2.0 * v))
                     .sum();
    }
    total += static_cast<double>(q.n_train) *
             gaussian_normalizer_term(q.m_z, std::exp(q.log_v_z));
    return total;
}

VariationalPosterior init_posterior(const NetworkShape& shape,
                                    const FeatureNormalizer& norm,
                                    const Eigen::VectorXd& sigma_eps_init,
                                    std::int64_t n_train, Rng& rng,
                                    double lambda, double gamma) {
    VariationalPosterior q;
    q.shape = shape;
    q.lambda = lambda;
    q.gamma = gamma;
    q.n_train = n_train;
    q.normalizer = norm;
    q.log_sigma_eps = sigma_eps_init.array().log().matrix();
    for (int l = 0; l + 1 < static_cast<int>(shape.layer_sizes.size()); ++l) {
        const int rows = shape.layer_sizes[l + 1];
        const int cols = shape.layer_sizes[l] + 1;
        const double sd = 1.0 / std::sqrt(static_cast<double>(
                                    shape.layer_sizes[l]));
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                m(r, c) = sd * rng.normal();
            }
        }
        q.m_w.push_back(std::move(m));
        q.log_v_w.push_back(Eigen::MatrixXd::Constant(rows, cols, -10.0));
    }
    q.m_z = 0.0;
    q.log_v_z = std::log(gamma);
    return q;
}

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const std::size_t rows = j.size();
    const std::size_t cols = rows == 0 ? 0 : j.front().size();
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (j[r].size() != cols) {
            throw ConfigError("ragged matrix in model file");
        }
        for (std::size_t c = 0; c < cols; ++c) {
            m(r, c) = j[r][c].get<double>();
        }
    }
    return m;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        out.push_back(v[i]);
    }
    return out;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
    Eigen::VectorXd v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        v[i] = j[i].get<double>();
    }
    return v;
}

}  // namespace

void save_model(const VariationalPosterior& q, const std::string& path) {
    nlohmann::json doc;
    doc["shape"] = q.shape.layer_sizes;
    nlohmann::json m_w = nlohmann::json::array();
    nlohmann::json v_w = nlohmann::json::array();
    for (std::size_t l = 0; l < q.m_w.size(); ++l) {
        m_w.push_back(matrix_to_json(q.m_w[l]));
        v_w.push_back(matrix_to_json(q.log_v_w[l]));
    }
    doc["m_w"] = std::move(m_w);
    doc["v_w"] = std::move(v_w);
    doc["m_z"] = q.m_z;
    doc["v_z"] = q.log_v_z;
    doc["lambda"] = q.lambda;
    doc["gamma"] = q.gamma;
    doc["sigma_eps"] = vector_to_json(q.log_sigma_eps);
    doc["n_train"] = q.n_train;
    doc["normalizer"] = {{"mean", vector_to_json(q.normalizer.mean)},
                         {"scale", vector_to_json(q.normalizer.scale)}};
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot open model file for writing: " + path);
    }
    out << doc.dump(2) << "\n";
}

VariationalPosterior load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open model file: " + path);
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed model file " + path + ": " + e.what());
    }
    VariationalPosterior q;
    q.shape.layer_sizes = doc.at("shape").get<std::vector<int>>();
    for (const auto& layer : doc.at("m_w")) {
        q.m_w.push_back(matrix_from_json(layer));
    }
    for (const auto& layer : doc.at("v_w")) {
        q.log_v_w.push_back(matrix_from_json(layer));
    }
    q.m_z = doc.at("m_z").get<double>();
    q.log_v_z = doc.at("v_z").get<double>();
    q.lambda = doc.at("lambda").get<double>();
    q.gamma = doc.at("gamma").get<double>();
    q.log_sigma_eps = vector_from_json(doc.at("sigma_eps"));
    q.n_train = doc.at("n_train").get<std::int64_t>();
    q.normalizer.mean = vector_from_json(doc.at("normalizer").at("mean"));
    q.normalizer.scale = vector_from_json(doc.at("normalizer").at("scale"));
    if (q.m_w.size() != q.log_v_w.size() ||
        static_cast<int>(q.m_w.size()) != q.shape.num_layers()) {
        throw ConfigError("model file layer count inconsistent: " + path);
    }
    for (int l = 0; l < q.shape.num_layers(); ++l) {
        if (q.m_w[l].rows() != q.shape.layer_sizes[l + 1] ||
            q.m_w[l].cols() != q.shape.layer_sizes[l] + 1 ||
            q.m_w[l].rows() != q.log_v_w[l].rows() ||
            q.m_w[l].cols() != q.log_v_w[l].cols()) {
            throw ConfigError("model file weight shape inconsistent: " + path);
        }
    }
    return q;
}

}  // namespace brnn
