#pragma once
// Data-free covariance estimation from task vectors, the log-energy
// heterogeneity statistic, and trace normalization / Tikhonov regularization.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "acemerge/error.hpp"
#include "acemerge/linalg.hpp"

namespace acemerge {

struct TaskVector {
    Matrix delta;  // expert - base
    std::string task_id;
    std::string layer_id;
};

struct CovarianceEstimate {
    Matrix sigma;
    double trace_raw = 0.0;  // Tr(sigma) before any normalization
    bool normalized = false;
    double eps_effective = 0.0;
};

struct HeterogeneityStats {
    double gamma = 0.0;
    std::vector<double> log_energies;
    double mean_log = 0.0;
    double var_log = 0.0;
    double trace_avg = 0.0;
};

inline TaskVector task_vector(const Matrix& base, const Matrix& expert, std::string task_id = {},
                              std::string layer_id = {}) {
    if (base.rows() != expert.rows() || base.cols() != expert.cols())
        throw Error(ErrorKind::validation, "task_vector: expert shape " + std::to_string(expert.rows()) + "x" +
                                               std::to_string(expert.cols()) + " differs from base " +
                                               std::to_string(base.rows()) + "x" + std::to_string(base.cols()));
    return {expert - base, std::move(task_id), std::move(layer_id)};
}

/// Gram matrix of the row-centered task vector: rows are treated as samples,
/// centered by their mean over the d_out rows.
inline CovarianceEstimate empirical_covariance(const TaskVector& tv) {
    const Matrix& dw = tv.delta;
    if (dw.rows() < 1) throw Error(ErrorKind::validation, "empirical_covariance: task vector has no rows");
    require_finite(dw, "empirical_covariance");
    const Eigen::RowVectorXd mu = dw.colwise().sum() / static_cast<double>(dw.rows());
    const Matrix centered = dw.rowwise() - mu;
    Matrix gram = centered.transpose() * centered;
    CovarianceEstimate out;
    out.sigma = 0.5 * (gram + gram.transpose());
    out.trace_raw = trace(out.sigma);
    return out;
}

/// gamma = Var_t[ln ||dW_t||_F^2] / (E_t[ln ||dW_t||_F^2])^2, population variance.
inline HeterogeneityStats heterogeneity(std::span<const TaskVector> tvs, std::span<const CovarianceEstimate> sigmas) {
    if (tvs.empty()) throw Error(ErrorKind::validation, "heterogeneity: no tasks");
    HeterogeneityStats h;
    h.log_energies.reserve(tvs.size());
    for (std::size_t t = 0; t < tvs.size(); ++t) {
        const double energy = frobenius_sq(tvs[t].delta);
        if (!(energy > 0.0)) {
            const auto label = tvs[t].task_id.empty() ? "#" + std::to_string(t) : tvs[t].task_id;
            throw Error(ErrorKind::numerical, "degenerate expert: task " + label + " has a zero task vector");
        }
        h.log_energies.push_back(std::log(energy));
    }
    const double count = static_cast<double>(h.log_energies.size());
    for (double v : h.log_energies) h.mean_log += v;
    h.mean_log /= count;
    for (double v : h.log_energies) h.var_log += (v - h.mean_log) * (v - h.mean_log);
    h.var_log /= count;

    if (!sigmas.empty()) {
        for (const auto& s : sigmas) h.trace_avg += s.trace_raw;
        h.trace_avg /= static_cast<double>(sigmas.size());
    }

    const bool all_equal = std::all_of(h.log_energies.begin(), h.log_energies.end(),
                                       [&](double v) { return v == h.log_energies.front(); });
    if (all_equal) {
        h.var_log = 0.0;
        h.gamma = 0.0;
        return h;
    }
    if (h.mean_log == 0.0) throw Error(ErrorKind::numerical, "undefined gamma: mean log-energy is exactly zero");
    h.gamma = h.var_log / (h.mean_log * h.mean_log);
    return h;
}

/// Divides sigma by its raw trace. trace_raw keeps the pre-normalization value.
inline CovarianceEstimate trace_normalize(const CovarianceEstimate& cov) {
    if (!(cov.trace_raw > 0.0)) throw Error(ErrorKind::numerical, "degenerate covariance: trace is not positive");
    CovarianceEstimate out = cov;
    out.sigma = cov.sigma / cov.trace_raw;
    out.normalized = true;
    return out;
}

/// Tikhonov shift. The heterogeneous branch scales eps by 1/trace_raw.
inline CovarianceEstimate regularize(const CovarianceEstimate& cov, double eps, bool heterogeneous) {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw Error(ErrorKind::validation, "regularize: eps must be positive");
    double shift = eps;
    if (heterogeneous) {
        if (!cov.normalized || !(cov.trace_raw > 0.0))
            throw Error(ErrorKind::validation, "regularize: heterogeneous branch needs a trace-normalized estimate");
        shift = eps / cov.trace_raw;
    }
    CovarianceEstimate out = cov;
    out.sigma.diagonal().array() += shift;
    out.eps_effective = shift;
    return out;
}

} // namespace acemerge
