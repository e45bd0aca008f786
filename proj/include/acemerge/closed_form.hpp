#pragma once
// Closed-form minimizer of sum_t Tr[(W - W_t) S_t (W - W_t)^T], optionally with
// an additive prior in the denominator, and the quadratic loss itself.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "acemerge/covariance.hpp"
#include "acemerge/error.hpp"
#include "acemerge/linalg.hpp"

namespace acemerge {

/// Which rung of the denominator solve ladder produced the answer.
enum class SolveRung {
    spd,          // plain Cholesky
    shifted_spd,  // Cholesky after a 1e-10 * Tr(D)/d_in diagonal shift
    general_lu,   // full-pivot LU on the symmetrized denominator
};

inline std::string_view rung_name(SolveRung r) {
    switch (r) {
    case SolveRung::spd: return "none";
    case SolveRung::shifted_spd: return "diagonal_shift";
    case SolveRung::general_lu: return "general_lu";
    }
    return "none";
}

struct ClosedFormResult {
    Matrix w;
    SolveRung rung = SolveRung::spd;
};

/// X·D = B with D symmetric; falls back from Cholesky to a shifted Cholesky to LU.
inline ClosedFormResult solve_with_fallback(const Matrix& numerator, const Matrix& denominator) {
    try {
        return {solve_right(numerator, denominator), SolveRung::spd};
    } catch (const FactorizationError&) {
    }
    const double shift = 1e-10 * trace(denominator) / static_cast<double>(denominator.rows());
    if (shift > 0.0) {
        Matrix shifted = denominator;
        shifted.diagonal().array() += shift;
        try {
            return {solve_right(numerator, shifted), SolveRung::shifted_spd};
        } catch (const FactorizationError&) {
        }
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(denominator.transpose());
    if (!lu.isInvertible())
        throw Error(ErrorKind::numerical, "closed-form denominator is singular after all fallbacks");
    Matrix x = lu.solve(Eigen::MatrixXd(numerator.transpose())).transpose();
    if (!x.allFinite()) throw Error(ErrorKind::numerical, "closed-form solve produced non-finite values");
    return {std::move(x), SolveRung::general_lu};
}

namespace detail {

inline void check_aligned(std::span<const Matrix> experts, std::span<const Matrix> sigmas) {
    if (experts.empty()) throw Error(ErrorKind::validation, "closed-form merge needs at least one expert");
    if (experts.size() != sigmas.size())
        throw Error(ErrorKind::validation, "expert and covariance lists differ in length");
    const auto rows = experts.front().rows();
    const auto cols = experts.front().cols();
    for (std::size_t t = 0; t < experts.size(); ++t) {
        if (experts[t].rows() != rows || experts[t].cols() != cols)
            throw Error(ErrorKind::validation, "expert " + std::to_string(t) + " has a different shape");
        if (sigmas[t].rows() != cols || sigmas[t].cols() != cols)
            throw Error(ErrorKind::validation, "covariance " + std::to_string(t) + " is not d_in x d_in");
    }
}

inline std::vector<Matrix> sigma_matrices(std::span<const CovarianceEstimate> covs) {
    std::vector<Matrix> out;
    out.reserve(covs.size());
    for (const auto& c : covs) out.push_back(c.sigma);
    return out;
}

} // namespace detail

/// (sum_t W_t S_t) (sum_t S_t + sym(prior))^{-1}. An empty prior means none.
/// Reductions over tasks run in list order.
inline ClosedFormResult preliminary_solution(std::span<const Matrix> experts, std::span<const Matrix> sigmas,
                                             const Matrix& prior = Matrix()) {
    detail::check_aligned(experts, sigmas);
    const auto d_in = experts.front().cols();
    Matrix numerator = Matrix::Zero(experts.front().rows(), d_in);
    Matrix denominator = Matrix::Zero(d_in, d_in);
    for (std::size_t t = 0; t < experts.size(); ++t) {
        numerator.noalias() += experts[t] * sigmas[t];
        denominator += sigmas[t];
    }
    if (prior.size() != 0) {
        if (prior.rows() != d_in || prior.cols() != d_in)
            throw Error(ErrorKind::validation, "structural prior is not d_in x d_in");
        denominator += 0.5 * (prior + prior.transpose());
    }
    return solve_with_fallback(numerator, denominator);
}

inline ClosedFormResult preliminary_solution(std::span<const Matrix> experts,
                                             std::span<const CovarianceEstimate> sigmas_reg,
                                             const Matrix& prior = Matrix()) {
    const auto mats = detail::sigma_matrices(sigmas_reg);
    return preliminary_solution(experts, mats, prior);
}

/// sum_t Tr[(W - W_t) S_t (W - W_t)^T]
inline double merging_loss(const Matrix& w_bar, std::span<const Matrix> experts, std::span<const Matrix> sigmas) {
    detail::check_aligned(experts, sigmas);
    double loss = 0.0;
    for (std::size_t t = 0; t < experts.size(); ++t) {
        const Matrix diff = w_bar - experts[t];
        const Matrix weighted = diff * sigmas[t];
        loss += weighted.cwiseProduct(diff).sum();
    }
    return loss;
}

/// 2 sum_t (W - W_t) S_t
inline Matrix merging_loss_gradient(const Matrix& w_bar, std::span<const Matrix> experts,
                                    std::span<const Matrix> sigmas) {
    detail::check_aligned(experts, sigmas);
    Matrix grad = Matrix::Zero(w_bar.rows(), w_bar.cols());
    for (std::size_t t = 0; t < experts.size(); ++t) grad.noalias() += (w_bar - experts[t]) * sigmas[t];
    return 2.0 * grad;
}

} // namespace acemerge
