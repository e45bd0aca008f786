#pragma once
// Reference merges, each expressible as the closed form with a particular
// covariance choice.

#include <span>
#include <string>
#include <variant>
#include <vector>

#include "acemerge/closed_form.hpp"
#include "acemerge/error.hpp"
#include "acemerge/linalg.hpp"

namespace acemerge {

inline Matrix weight_average(std::span<const Matrix> experts) {
    if (experts.empty()) throw Error(ErrorKind::validation, "weight_average: empty expert list");
    Matrix sum = Matrix::Zero(experts.front().rows(), experts.front().cols());
    for (const auto& e : experts) {
        if (e.rows() != sum.rows() || e.cols() != sum.cols())
            throw Error(ErrorKind::validation, "weight_average: experts differ in shape");
        sum += e;
    }
    return sum / static_cast<double>(experts.size());
}

/// W_0 + lambda * sum_t (W_t - W_0)
inline Matrix task_arithmetic(const Matrix& base, std::span<const Matrix> experts, double lambda) {
    Matrix acc = Matrix::Zero(base.rows(), base.cols());
    for (const auto& e : experts) {
        if (e.rows() != base.rows() || e.cols() != base.cols())
            throw Error(ErrorKind::validation, "task_arithmetic: expert shape differs from base");
        acc += e - base;
    }
    return base + lambda * acc;
}

namespace proxy {
struct Isotropic {
    double k = 1.0;
};
/// dW^T dW, uncentered.
struct TvOuter {};
/// ||dW||_F^-2 dW^T dW.
struct TvOuterNorm {};
} // namespace proxy

using ProxyKind = std::variant<proxy::Isotropic, proxy::TvOuter, proxy::TvOuterNorm>;

inline Matrix proxy_covariance(const Matrix& delta, const ProxyKind& kind) {
    return std::visit(
        [&](const auto& p) -> Matrix {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, proxy::Isotropic>) {
                if (!(p.k > 0.0)) throw Error(ErrorKind::validation, "isotropic proxy needs k > 0");
                return p.k * Matrix::Identity(delta.cols(), delta.cols());
            } else {
                Matrix gram = delta.transpose() * delta;
                gram = 0.5 * (gram + gram.transpose()).eval();
                if constexpr (std::is_same_v<P, proxy::TvOuterNorm>) {
                    const double energy = frobenius_sq(delta);
                    if (!(energy > 0.0))
                        throw Error(ErrorKind::numerical, "degenerate expert: zero task vector in norm-weighted proxy");
                    gram /= energy;
                }
                return gram;
            }
        },
        kind);
}

/// Closed form with a task-vector covariance proxy plus eps*I; no scaling,
/// no structural prior, no refinement.
inline ClosedFormResult cov_proxy_merge(const Matrix& base, std::span<const Matrix> experts, const ProxyKind& kind,
                                        double eps) {
    if (!(eps > 0.0)) throw Error(ErrorKind::validation, "cov_proxy_merge: eps must be positive");
    if (experts.empty()) throw Error(ErrorKind::validation, "cov_proxy_merge: empty expert list");
    std::vector<Matrix> sigmas;
    sigmas.reserve(experts.size());
    for (const auto& e : experts) {
        if (e.rows() != base.rows() || e.cols() != base.cols())
            throw Error(ErrorKind::validation, "cov_proxy_merge: expert shape differs from base");
        Matrix s = proxy_covariance(e - base, kind);
        s.diagonal().array() += eps;
        sigmas.push_back(std::move(s));
    }
    return preliminary_solution(experts, sigmas);
}

} // namespace acemerge
