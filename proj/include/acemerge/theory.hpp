#pragma once
// Synthetic checks of the covariance-from-displacement relation, closed-form
// optimality, displacement statistics and the large-eps / zero-rank limits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "acemerge/baselines.hpp"
#include "acemerge/closed_form.hpp"
#include "acemerge/covariance.hpp"
#include "acemerge/error.hpp"
#include "acemerge/linalg.hpp"
#include "acemerge/merge.hpp"

namespace acemerge::theory {

using Rng = std::mt19937_64;

inline Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    std::normal_distribution<double> n(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

/// Haar-ish orthogonal matrix from the QR factor of a Gaussian matrix, with
/// column signs fixed so that diag(R) > 0.
inline Matrix random_orthogonal(Rng& rng, Eigen::Index d) {
    const Eigen::MatrixXd g = gaussian_matrix(rng, d, d);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < d; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    return q;
}

/// Q diag(lambda) Q^T with lambda log-uniform in [lo, hi].
inline Matrix random_spd(Rng& rng, Eigen::Index d, double lo, double hi) {
    const Matrix q = random_orthogonal(rng, d);
    std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
    Vector lambda(d);
    for (Eigen::Index i = 0; i < d; ++i) lambda(i) = std::exp(u(rng));
    Matrix s = q * lambda.asDiagonal() * q.transpose();
    return 0.5 * (s + s.transpose());
}

struct SyntheticTaskSpec {
    Eigen::Index d_in = 8;
    Eigen::Index d_out = 8;
    Matrix sigma_true;  // d_in x d_in input covariance
    Matrix teacher;     // d_out x d_in
    double noise_std = 0.0;
    std::size_t n_samples = 1;
    double lr = 1e-3;
    std::size_t steps = 1;
    std::uint64_t seed = 0;
};

struct Dataset {
    Matrix x;  // n x d_in
    Matrix y;  // n x d_out
};

/// x ~ N(0, sigma_true) through its Cholesky factor; y = teacher x + noise.
inline Dataset generate_task(const SyntheticTaskSpec& spec) {
    if (spec.n_samples < 1) throw Error(ErrorKind::validation, "generate_task: n_samples must be >= 1");
    if (spec.sigma_true.rows() != spec.d_in || spec.sigma_true.cols() != spec.d_in)
        throw Error(ErrorKind::validation, "generate_task: sigma_true must be d_in x d_in");
    if (spec.teacher.rows() != spec.d_out || spec.teacher.cols() != spec.d_in)
        throw Error(ErrorKind::validation, "generate_task: teacher must be d_out x d_in");
    if (relative_asymmetry(spec.sigma_true) > kSymmetryTolerance)
        throw Error(ErrorKind::validation, "generate_task: sigma_true is not symmetric");
    Matrix chol;
    try {
        chol = cholesky_lower(spec.sigma_true);
    } catch (const FactorizationError& e) {
        throw Error(ErrorKind::validation, std::string("generate_task: sigma_true is not SPD: ") + e.what());
    }
    Rng rng(spec.seed);
    const auto n = static_cast<Eigen::Index>(spec.n_samples);
    Dataset data;
    data.x = gaussian_matrix(rng, n, spec.d_in) * chol.transpose();
    data.y = data.x * spec.teacher.transpose();
    if (spec.noise_std > 0.0) data.y += gaussian_matrix(rng, n, spec.d_out, spec.noise_std);
    return data;
}

enum class FinetuneMode {
    linearized,  // every per-sample gradient taken at W_0 (one pass)
    sgd,         // sequential per-sample steps for `steps` passes
};

/// Squared-loss fine-tuning from w0. Returns W - w0.
inline TaskVector simulate_finetune(const Matrix& w0, const Dataset& data, double lr, std::size_t steps,
                                   FinetuneMode mode = FinetuneMode::sgd) {
    if (w0.cols() != data.x.cols() || w0.rows() != data.y.cols() || data.x.rows() != data.y.rows())
        throw Error(ErrorKind::validation, "simulate_finetune: inconsistent shapes");
    if (mode == FinetuneMode::linearized) {
        const Matrix residual = data.x * w0.transpose() - data.y;  // n x d_out
        Matrix delta = -2.0 * lr * residual.transpose() * data.x;
        if (!delta.allFinite()) throw Error(ErrorKind::numerical, "simulate_finetune: diverged at step 0");
        return {std::move(delta), {}, {}};
    }
    Matrix w = w0;
    for (std::size_t s = 0; s < steps; ++s) {
        for (Eigen::Index i = 0; i < data.x.rows(); ++i) {
            const Eigen::VectorXd x = data.x.row(i).transpose();
            const Eigen::VectorXd e = w * x - data.y.row(i).transpose();
            w.noalias() -= (2.0 * lr) * e * x.transpose();
        }
        if (!w.allFinite())
            throw Error(ErrorKind::numerical, "simulate_finetune: diverged at step " + std::to_string(s));
    }
    return {Matrix(w - w0), {}, {}};
}

/// Leading eigenvector of a symmetric matrix (sign-normalized so that its
/// largest-magnitude entry is positive).
inline Vector leading_eigenvector(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    Vector v = es.eigenvectors().col(a.rows() - 1);
    Eigen::Index idx;
    v.cwiseAbs().maxCoeff(&idx);
    if (v(idx) < 0) v = -v;
    return v;
}

/// ||A/Tr(A) - B/Tr(B)||_F
inline double normalized_distance(const Matrix& a, const Matrix& b) {
    return std::sqrt(frobenius_sq(a / trace(a) - b / trace(b)));
}

struct Theorem1Report {
    Matrix cov_centered;    // (1/R) sum_r (dW_r - mean)^T (dW_r - mean)
    Matrix cov_uncentered;  // (1/R) sum_r dW_r^T dW_r
    bool isotropic = false; // leading eigenvalue of sigma_true is degenerate
    std::optional<double> alignment;
    double normalized_distance = 0.0;
    std::optional<double> alignment_uncentered;
    double normalized_distance_uncentered = 0.0;
};

inline std::uint64_t repetition_seed(std::uint64_t seed, std::size_t rep) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(rep)};
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    return (std::uint64_t{words[0]} << 32) | words[1];
}

/// Fine-tunes w0 on `repetitions` independently seeded datasets and compares
/// the displacement covariance (both centered and uncentered) with sigma_true.
inline Theorem1Report verify_theorem1(const SyntheticTaskSpec& spec, const Matrix& w0, std::size_t repetitions,
                                      FinetuneMode mode = FinetuneMode::linearized) {
    if (repetitions < 2) throw Error(ErrorKind::validation, "verify_theorem1: repetitions must be >= 2");
    std::vector<Matrix> deltas;
    deltas.reserve(repetitions);
    for (std::size_t r = 0; r < repetitions; ++r) {
        SyntheticTaskSpec rep = spec;
        rep.seed = repetition_seed(spec.seed, r);
        deltas.push_back(simulate_finetune(w0, generate_task(rep), spec.lr, spec.steps, mode).delta);
    }
    const auto d_in = spec.d_in;
    Matrix mean = Matrix::Zero(spec.d_out, d_in);
    for (const auto& d : deltas) mean += d;
    mean /= static_cast<double>(repetitions);

    Theorem1Report rep;
    rep.cov_centered = Matrix::Zero(d_in, d_in);
    rep.cov_uncentered = Matrix::Zero(d_in, d_in);
    for (const auto& d : deltas) {
        const Matrix c = d - mean;
        rep.cov_centered.noalias() += c.transpose() * c;
        rep.cov_uncentered.noalias() += d.transpose() * d;
    }
    rep.cov_centered /= static_cast<double>(repetitions);
    rep.cov_uncentered /= static_cast<double>(repetitions);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(spec.sigma_true);
    const auto& ev = es.eigenvalues();
    rep.isotropic = d_in < 2 ? false : (ev(d_in - 1) - ev(d_in - 2)) <= 1e-8 * std::abs(ev(d_in - 1));
    if (!rep.isotropic) {
        const Vector truth = leading_eigenvector(spec.sigma_true);
        rep.alignment = std::abs(leading_eigenvector(rep.cov_centered).dot(truth));
        rep.alignment_uncentered = std::abs(leading_eigenvector(rep.cov_uncentered).dot(truth));
    }
    rep.normalized_distance = normalized_distance(rep.cov_centered, spec.sigma_true);
    rep.normalized_distance_uncentered = normalized_distance(rep.cov_uncentered, spec.sigma_true);
    return rep;
}

struct BruteForceOptions {
    double rel_tol = 0.0;       // stop once ||step||_F <= rel_tol * (1 + ||W||_F); 0 runs every iteration
    bool record_loss = false;
};

struct BruteForceResult {
    Matrix w;
    std::size_t iterations = 0;
    std::vector<double> losses;  // loss before each step, then the final loss
};

/// Fixed-step gradient descent on sum_t Tr[(W - W_t) S_t (W - W_t)^T],
/// started from the plain average.
inline BruteForceResult brute_force_merge(std::span<const Matrix> experts, std::span<const Matrix> sigmas, double lr,
                                          std::size_t iters, const BruteForceOptions& opts = {}) {
    if (iters < 1) throw Error(ErrorKind::validation, "brute_force_merge: iters must be >= 1");
    detail::check_aligned(experts, sigmas);
    const auto d_in = experts.front().cols();
    Matrix s_sum = Matrix::Zero(d_in, d_in);
    Matrix target = Matrix::Zero(experts.front().rows(), d_in);
    for (std::size_t t = 0; t < experts.size(); ++t) {
        s_sum += sigmas[t];
        target.noalias() += experts[t] * sigmas[t];
    }
    BruteForceResult out;
    out.w = weight_average(experts);
    Matrix grad(out.w.rows(), out.w.cols());
    for (std::size_t it = 0; it < iters; ++it) {
        if (opts.record_loss) out.losses.push_back(merging_loss(out.w, experts, sigmas));
        grad.noalias() = out.w * s_sum;
        grad -= target;
        grad *= 2.0 * lr;
        out.w -= grad;
        out.iterations = it + 1;
        if (!out.w.allFinite())
            throw Error(ErrorKind::numerical, "brute_force_merge: diverged at iteration " + std::to_string(it));
        if (opts.rel_tol > 0.0 && grad.norm() <= opts.rel_tol * (1.0 + out.w.norm())) break;
    }
    if (opts.record_loss) out.losses.push_back(merging_loss(out.w, experts, sigmas));
    return out;
}

/// Step size 1/(lambda_max + lambda_min) of sum_t S_t; the fastest fixed step
/// for this quadratic and well inside the monotone-descent range.
inline double optimal_step(std::span<const Matrix> sigmas) {
    Matrix s_sum = Matrix::Zero(sigmas.front().rows(), sigmas.front().cols());
    for (const auto& s : sigmas) s_sum += s;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s_sum, Eigen::EigenvaluesOnly);
    return 1.0 / (es.eigenvalues().maxCoeff() + es.eigenvalues().minCoeff());
}

struct DeltaStats {
    double mean = 0.0;
    double stddev = 0.0;
    double excess_kurtosis = 0.0;
    double lo = 0.0, hi = 0.0;          // histogram range, mean -/+ 5 std
    std::vector<std::size_t> histogram; // 101 bins; out-of-range values land in the edge bins
};

inline constexpr std::size_t kHistogramBins = 101;

inline DeltaStats delta_w_statistics(const Matrix& delta) {
    if (delta.size() == 0) throw Error(ErrorKind::validation, "delta_w_statistics: empty tensor");
    require_finite(delta, "delta_w_statistics");
    const double n = static_cast<double>(delta.size());
    const double* p = delta.data();
    DeltaStats st;
    for (Eigen::Index i = 0; i < delta.size(); ++i) st.mean += p[i];
    st.mean /= n;
    double m2 = 0.0, m4 = 0.0;
    for (Eigen::Index i = 0; i < delta.size(); ++i) {
        const double c = p[i] - st.mean;
        m2 += c * c;
        m4 += c * c * c * c;
    }
    m2 /= n;
    m4 /= n;
    st.stddev = std::sqrt(m2);
    st.excess_kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
    st.lo = st.mean - 5.0 * st.stddev;
    st.hi = st.mean + 5.0 * st.stddev;
    st.histogram.assign(kHistogramBins, 0);
    if (st.stddev == 0.0) {
        st.histogram[kHistogramBins / 2] = static_cast<std::size_t>(delta.size());
        return st;
    }
    const double width = (st.hi - st.lo) / static_cast<double>(kHistogramBins);
    for (Eigen::Index i = 0; i < delta.size(); ++i) {
        const double pos = std::floor((p[i] - st.lo) / width);
        const auto bin = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(kHistogramBins - 1)));
        ++st.histogram[bin];
    }
    return st;
}

struct CaseRow {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool passed = false;
};

struct LimitingCaseGrid {
    std::uint64_t seed = 0;
    Eigen::Index d_out = 6;
    Eigen::Index d_in = 5;
    std::size_t tasks = 3;
    double eps_large = 1e8;
    double k_frac = 0.3;
};

struct SyntheticLayer {
    Matrix base;
    std::vector<Matrix> experts;
};

/// Random base plus task vectors whose scales differ by a factor of ~e per task.
inline SyntheticLayer synthetic_layer(Rng& rng, Eigen::Index d_out, Eigen::Index d_in, std::size_t tasks,
                                      double scale_step = 1.0) {
    SyntheticLayer layer;
    layer.base = gaussian_matrix(rng, d_out, d_in);
    for (std::size_t t = 0; t < tasks; ++t) {
        const double scale = 0.1 * std::exp(scale_step * static_cast<double>(t));
        layer.experts.push_back(layer.base + gaussian_matrix(rng, d_out, d_in, scale));
    }
    return layer;
}

inline double relative_distance(const Matrix& a, const Matrix& b) {
    return std::sqrt(frobenius_sq(a - b)) / std::sqrt(frobenius_sq(b));
}

/// Weighted average with weights 1/Tr(S_t), S_t the row-centered Gram of
/// W_t - base, evaluated entry by entry.
inline Matrix inverse_trace_weighted_average(const Matrix& base, std::span<const Matrix> experts) {
    Matrix num = Matrix::Zero(base.rows(), base.cols());
    double den = 0.0;
    for (const auto& e : experts) {
        double tr = 0.0;
        for (Eigen::Index j = 0; j < base.cols(); ++j) {
            double mu = 0.0;
            for (Eigen::Index i = 0; i < base.rows(); ++i) mu += e(i, j) - base(i, j);
            mu /= static_cast<double>(base.rows());
            for (Eigen::Index i = 0; i < base.rows(); ++i) {
                const double c = e(i, j) - base(i, j) - mu;
                tr += c * c;
            }
        }
        num += e / tr;
        den += 1.0 / tr;
    }
    return num / den;
}

/// The three large-eps / zero-rank limits, each as one table row.
inline std::vector<CaseRow> limiting_case_suite(const LimitingCaseGrid& grid) {
    Rng rng(grid.seed);
    const auto layer = synthetic_layer(rng, grid.d_out, grid.d_in, grid.tasks);
    std::vector<CaseRow> rows;

    MergeConfig homo;
    homo.eps = grid.eps_large;
    homo.k_frac = grid.k_frac;
    homo.force_branch = Branch::homogeneous;
    const auto avg = weight_average(layer.experts);
    const double d_avg = relative_distance(merge_layer(layer.base, layer.experts, homo).merged, avg);
    rows.push_back({"eps_limit_homogeneous_is_average", d_avg, 1e-4, d_avg < 1e-4});

    MergeConfig het;
    het.eps = grid.eps_large;
    het.k_frac = 0.0;
    het.force_branch = Branch::heterogeneous;
    const auto weighted = inverse_trace_weighted_average(layer.base, layer.experts);
    const double d_w = relative_distance(merge_layer(layer.base, layer.experts, het).merged, weighted);
    rows.push_back({"eps_limit_heterogeneous_is_inverse_trace_average", d_w, 1e-3, d_w < 1e-3});

    MergeConfig zero_rank;
    zero_rank.k_frac = 0.0;
    zero_rank.force_branch = Branch::heterogeneous;
    const auto out = merge_layer(layer.base, layer.experts, zero_rank);
    const bool bit_equal = out.merged.size() == out.preliminary.size() &&
                           std::memcmp(out.merged.data(), out.preliminary.data(),
                                       static_cast<std::size_t>(out.merged.size()) * sizeof(double)) == 0;
    rows.push_back({"zero_rank_fraction_is_preliminary", bit_equal ? 0.0 : 1.0, 0.0, bit_equal});
    return rows;
}

} // namespace acemerge::theory
