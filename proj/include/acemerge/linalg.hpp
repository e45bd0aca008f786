#pragma once
// Dense float64 kernels used by the merging pipeline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "acemerge/error.hpp"

namespace acemerge {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct SvdResult {
    Matrix U;  // rows x r
    Vector S;  // r, descending
    Matrix V;  // cols x r
};

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw Error(ErrorKind::numerical, std::string(what) + ": non-finite entries");
}

/// Sum of the diagonal, accumulated in index order.
inline double trace(const Matrix& a) {
    if (a.rows() != a.cols())
        throw Error(ErrorKind::validation,
                    "trace of non-square " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " matrix");
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) s += a(i, i);
    return s;
}

/// Sum of squared entries, accumulated in row-major order.
inline double frobenius_sq(const Matrix& m) {
    double s = 0.0;
    const double* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) s += p[i] * p[i];
    return s;
}

/// ||A - A^T||_F / ||A||_F (0 for the zero matrix).
inline double relative_asymmetry(const Matrix& a) {
    const double n = std::sqrt(frobenius_sq(a));
    if (n == 0.0) return 0.0;
    return std::sqrt(frobenius_sq(a - a.transpose())) / n;
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Reads only the lower triangle. Throws FactorizationError naming the first
/// pivot whose Schur complement is not strictly positive.
inline Matrix cholesky_lower(const Matrix& a) {
    const Eigen::Index n = a.rows();
    Matrix l = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = a(j, j);
        for (Eigen::Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0) || !std::isfinite(d))
            throw FactorizationError(static_cast<std::size_t>(j),
                                     "matrix is not positive definite (pivot " + std::to_string(j) + ")");
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

inline constexpr double kSymmetryTolerance = 1e-10;

/// Solves X·A = B for X with A symmetric positive definite, via Cholesky.
/// No explicit inverse is formed.
inline Matrix solve_right(const Matrix& b, const Matrix& a) {
    if (a.rows() != a.cols() || b.cols() != a.rows())
        throw Error(ErrorKind::validation, "solve_right: shape mismatch (B is " + std::to_string(b.rows()) + "x" +
                                               std::to_string(b.cols()) + ", A is " + std::to_string(a.rows()) + "x" +
                                               std::to_string(a.cols()) + ")");
    require_finite(a, "solve_right");
    require_finite(b, "solve_right");
    if (relative_asymmetry(a) > kSymmetryTolerance)
        throw Error(ErrorKind::numerical, "solve_right: matrix is not symmetric within tolerance");

    const Matrix l = cholesky_lower(a);
    // X A = B  <=>  L L^T X^T = B^T
    Matrix xt = b.transpose();
    l.triangularView<Eigen::Lower>().solveInPlace(xt);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(xt);
    return xt.transpose();
}

/// Thin SVD, r = min(rows, cols), singular values descending.
inline SvdResult svd_thin(const Matrix& m) {
    require_finite(m, "svd_thin");
    const Eigen::Index r = std::min(m.rows(), m.cols());
    if (r == 0) return {Matrix(m.rows(), 0), Vector(0), Matrix(m.cols(), 0)};
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw Error(ErrorKind::numerical, "svd_thin: decomposition failed");
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

/// Spectrum diagnostics over a descending list of singular values.
class SpectrumStats {
public:
    explicit SpectrumStats(std::vector<double> singular_values) : s_(std::move(singular_values)) {
        if (s_.empty()) throw Error(ErrorKind::validation, "spectrum_stats: empty spectrum");
        for (double v : s_)
            if (!(v >= 0.0) || !std::isfinite(v))
                throw Error(ErrorKind::validation, "spectrum_stats: singular values must be finite and non-negative");
        std::sort(s_.begin(), s_.end(), std::greater<>());
        total_energy_ = 0.0;
        for (double v : s_) total_energy_ += v * v;
    }

    const std::vector<double>& singular_values() const noexcept { return s_; }

    /// sigma_max / sigma_min over strictly positive values; NaN when all are zero.
    double condition_number() const {
        double smallest = 0.0;
        for (double v : s_)
            if (v > 0.0) smallest = v;
        if (smallest == 0.0) return std::numeric_limits<double>::quiet_NaN();
        return s_.front() / smallest;
    }

    /// Count of values at or above 1e-12 * sigma_max.
    std::size_t num_effective() const {
        const double cut = 1e-12 * s_.front();
        if (s_.front() == 0.0) return 0;
        return static_cast<std::size_t>(std::count_if(s_.begin(), s_.end(), [&](double v) { return v >= cut; }));
    }

    /// Share of sum(sigma^2) held by the top ceil(p * r) values.
    double energy_fraction(double p) const {
        p = std::clamp(p, 0.0, 1.0);
        const auto top = static_cast<std::size_t>(std::ceil(p * static_cast<double>(s_.size()) - 1e-9));
        if (top == 0) return 0.0;
        if (total_energy_ == 0.0) return 1.0;
        double e = 0.0;
        for (std::size_t i = 0; i < std::min(top, s_.size()); ++i) e += s_[i] * s_[i];
        return std::min(1.0, e / total_energy_);
    }

private:
    std::vector<double> s_;
    double total_energy_ = 0.0;
};

inline SpectrumStats spectrum_stats(std::span<const double> s) { return SpectrumStats({s.begin(), s.end()}); }

inline SpectrumStats spectrum_stats(const Vector& s) { return SpectrumStats({s.data(), s.data() + s.size()}); }

} // namespace acemerge
