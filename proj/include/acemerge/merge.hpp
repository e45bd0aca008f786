#pragma once
// Adaptive covariance merging of a set of fine-tuned experts into one model.
//
// Per rank-2 layer:
//   1. task vectors dW_t = W_t - W_0 and centered Gram estimates S_t
//   2. log-energy heterogeneity gamma; heterogeneous iff gamma > tau
//   3. heterogeneous: S_t / Tr(S_t) and eps / Tr(S_t) shift; otherwise S_t + eps I
//   4. rank-one column-energy prior C_agg (divided by mean trace if heterogeneous)
//   5. W_pre = (sum W_t S_t,reg)(sum S_t,reg + sym(C_agg))^{-1}
//   6. heterogeneous only: W = W_pre + sigma_iso U_k V_k^T, where U, V, sigma
//      come from the SVD of W_pre + sum_t W_t (S_t,scaled - mean_t S_t,reg)
// Tensors that are not rank 2 (or are filtered out) are weight-averaged.

#include <fnmatch.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "acemerge/baselines.hpp"
#include "acemerge/closed_form.hpp"
#include "acemerge/covariance.hpp"
#include "acemerge/error.hpp"
#include "acemerge/linalg.hpp"
#include "acemerge/tensor_store.hpp"

namespace acemerge {

enum class Method { ace, average, task_arith, cov_proxy_tv, cov_proxy_tv_norm };
enum class Branch { homogeneous, heterogeneous };

inline std::string_view method_name(Method m) {
    switch (m) {
    case Method::ace: return "ace";
    case Method::average: return "average";
    case Method::task_arith: return "task_arith";
    case Method::cov_proxy_tv: return "cov_proxy_tv";
    case Method::cov_proxy_tv_norm: return "cov_proxy_tv_norm";
    }
    return "ace";
}

inline std::optional<Method> parse_method(std::string_view s) {
    for (auto m : {Method::ace, Method::average, Method::task_arith, Method::cov_proxy_tv, Method::cov_proxy_tv_norm})
        if (method_name(m) == s) return m;
    return std::nullopt;
}

inline std::string_view branch_name(Branch b) { return b == Branch::heterogeneous ? "heterogeneous" : "homogeneous"; }

inline std::optional<Branch> parse_branch(std::string_view s) {
    if (s == "homogeneous") return Branch::homogeneous;
    if (s == "heterogeneous") return Branch::heterogeneous;
    return std::nullopt;
}

struct MergeConfig {
    double eps = 1e-5;
    double tau = 0.3;
    double k_frac = 0.3;
    Method method = Method::ace;
    double task_arith_lambda = 1.0;
    std::vector<std::string> layer_include;  // glob patterns; empty selects every rank-2 tensor
    std::optional<Branch> force_branch;

    void validate() const {
        if (!(eps > 0.0) || !std::isfinite(eps)) throw Error(ErrorKind::validation, "eps must be finite and > 0");
        if (!std::isfinite(tau)) throw Error(ErrorKind::validation, "tau must be finite");
        if (!(k_frac >= 0.0 && k_frac <= 1.0)) throw Error(ErrorKind::validation, "k_frac must lie in [0, 1]");
        if (!std::isfinite(task_arith_lambda)) throw Error(ErrorKind::validation, "task_arith_lambda must be finite");
    }

    bool includes(const std::string& name) const {
        if (layer_include.empty()) return true;
        return std::any_of(layer_include.begin(), layer_include.end(),
                           [&](const std::string& p) { return fnmatch(p.c_str(), name.c_str(), 0) == 0; });
    }
};

struct LayerDiagnostics {
    Method method = Method::ace;
    std::optional<double> gamma;
    std::optional<Branch> branch;
    double trace_avg = 0.0;
    std::optional<SpectrumStats> pre_spectrum;
    std::optional<SpectrumStats> final_spectrum;
    std::size_t k = 0;
    double sigma_iso = 0.0;
    std::vector<double> principal_alignment;  // |cos| of leading left singular vectors, pre vs final
    std::string fallback = "none";
};

struct LayerMergeOutput {
    Matrix merged;
    Matrix preliminary;  // W_pre for ace; equal to merged for baselines
    LayerDiagnostics diagnostics;
};

/// Rank-one prior: every row is the mean column energy (1/d_in) 1^T sum_t S_t.
/// Divided by trace_avg in the heterogeneous branch.
inline Matrix collective_prior(std::span<const Matrix> sigmas, double trace_avg, bool heterogeneous) {
    if (sigmas.empty()) throw Error(ErrorKind::validation, "collective_prior: no covariances");
    const auto d_in = sigmas.front().rows();
    Matrix sum = Matrix::Zero(d_in, d_in);
    for (const auto& s : sigmas) {
        if (s.rows() != d_in || s.cols() != d_in)
            throw Error(ErrorKind::validation, "collective_prior: covariances differ in dimension");
        sum += s;
    }
    const Eigen::RowVectorXd row = sum.colwise().sum() / static_cast<double>(d_in);
    Matrix c = Eigen::VectorXd::Ones(d_in) * row;
    if (heterogeneous) {
        if (!(trace_avg > 0.0)) throw Error(ErrorKind::numerical, "collective_prior: average trace must be positive");
        c /= trace_avg;
    }
    return c;
}

inline Matrix collective_prior(std::span<const CovarianceEstimate> sigmas, double trace_avg, bool heterogeneous) {
    return collective_prior(detail::sigma_matrices(sigmas), trace_avg, heterogeneous);
}

/// sum_t W_t (S_t,scaled - mean_t S_t,reg)
inline Matrix structural_residual(std::span<const Matrix> experts, std::span<const Matrix> sigmas_scaled,
                                  std::span<const Matrix> sigmas_reg) {
    detail::check_aligned(experts, sigmas_scaled);
    detail::check_aligned(experts, sigmas_reg);
    const auto d_in = experts.front().cols();
    Matrix mean_reg = Matrix::Zero(d_in, d_in);
    for (const auto& s : sigmas_reg) mean_reg += s;
    mean_reg /= static_cast<double>(sigmas_reg.size());
    Matrix res = Matrix::Zero(experts.front().rows(), d_in);
    for (std::size_t t = 0; t < experts.size(); ++t) res.noalias() += experts[t] * (sigmas_scaled[t] - mean_reg);
    return res;
}

inline Matrix structural_residual(std::span<const Matrix> experts, std::span<const CovarianceEstimate> sigmas_scaled,
                                  std::span<const CovarianceEstimate> sigmas_reg) {
    return structural_residual(experts, detail::sigma_matrices(sigmas_scaled), detail::sigma_matrices(sigmas_reg));
}

struct Refinement {
    Matrix delta;  // sigma_iso U_k V_k^T
    double sigma_iso = 0.0;
    std::size_t k = 0;
};

/// floor(k_frac * min(rows, cols)); the 1e-9 nudge keeps e.g. 0.29 * 100 at 29.
inline std::size_t refinement_rank(double k_frac, Eigen::Index rows, Eigen::Index cols) {
    const auto m = static_cast<double>(std::min(rows, cols));
    return static_cast<std::size_t>(std::floor(k_frac * m + 1e-9));
}

inline Refinement spectral_refinement(const Matrix& w_pre, const Matrix& delta_res, double k_frac) {
    if (w_pre.rows() != delta_res.rows() || w_pre.cols() != delta_res.cols())
        throw Error(ErrorKind::validation, "spectral_refinement: shape mismatch");
    if (!(k_frac >= 0.0 && k_frac <= 1.0)) throw Error(ErrorKind::validation, "k_frac must lie in [0, 1]");
    Refinement out;
    out.k = refinement_rank(k_frac, w_pre.rows(), w_pre.cols());
    if (out.k == 0) {
        out.delta = Matrix::Zero(w_pre.rows(), w_pre.cols());
        return out;
    }
    const auto svd = svd_thin(w_pre + delta_res);
    const auto k = static_cast<Eigen::Index>(out.k);
    out.sigma_iso = svd.S.head(k).sum() / static_cast<double>(k);
    out.delta = out.sigma_iso * svd.U.leftCols(k) * svd.V.leftCols(k).transpose();
    return out;
}

namespace detail {

inline void fill_spectra(LayerMergeOutput& out) {
    auto& diag = out.diagnostics;
    if (out.merged.size() == 0) return;
    const auto pre = svd_thin(out.preliminary);
    diag.pre_spectrum = spectrum_stats(pre.S);
    const bool same = out.merged == out.preliminary;
    const auto fin = same ? pre : svd_thin(out.merged);
    diag.final_spectrum = spectrum_stats(fin.S);
    const auto n = std::min<Eigen::Index>(5, pre.U.cols());
    diag.principal_alignment.clear();
    for (Eigen::Index i = 0; i < n; ++i) diag.principal_alignment.push_back(std::abs(pre.U.col(i).dot(fin.U.col(i))));
}

inline LayerMergeOutput averaged_layer(std::span<const Matrix> experts, Method method, std::string fallback) {
    LayerMergeOutput out;
    out.merged = weight_average(experts);
    out.preliminary = out.merged;
    out.diagnostics.method = method;
    out.diagnostics.fallback = std::move(fallback);
    return out;
}

inline LayerMergeOutput ace_layer(const Matrix& base, std::span<const Matrix> experts, const MergeConfig& cfg) {
    std::vector<TaskVector> tvs;
    std::vector<CovarianceEstimate> covs;
    tvs.reserve(experts.size());
    covs.reserve(experts.size());
    for (std::size_t t = 0; t < experts.size(); ++t) {
        tvs.push_back(task_vector(base, experts[t], std::to_string(t)));
        covs.push_back(empirical_covariance(tvs.back()));
    }

    LayerDiagnostics diag;
    double trace_avg = 0.0;
    for (const auto& c : covs) trace_avg += c.trace_raw;
    trace_avg /= static_cast<double>(covs.size());
    diag.trace_avg = trace_avg;

    try {
        const auto h = heterogeneity(tvs, covs);
        diag.gamma = h.gamma;
    } catch (const Error& e) {
        const std::string_view msg = e.what();
        if (msg.starts_with("degenerate expert")) return averaged_layer(experts, Method::ace, "average:degenerate_expert");
        if (!cfg.force_branch) return averaged_layer(experts, Method::ace, "average:undefined_gamma");
    }

    const bool het = cfg.force_branch ? *cfg.force_branch == Branch::heterogeneous : *diag.gamma > cfg.tau;
    diag.branch = het ? Branch::heterogeneous : Branch::homogeneous;

    std::vector<Matrix> scaled, reg;
    scaled.reserve(covs.size());
    reg.reserve(covs.size());
    for (const auto& c : covs) {
        if (het) {
            if (!(c.trace_raw > 0.0)) {
                auto out = averaged_layer(experts, Method::ace, "average:degenerate_covariance");
                out.diagnostics.gamma = diag.gamma;
                out.diagnostics.branch = diag.branch;
                out.diagnostics.trace_avg = trace_avg;
                return out;
            }
            const auto s = trace_normalize(c);
            reg.push_back(regularize(s, cfg.eps, true).sigma);
            scaled.push_back(s.sigma);
        } else {
            reg.push_back(regularize(c, cfg.eps, false).sigma);
            scaled.push_back(c.sigma);
        }
    }

    const Matrix c_agg = collective_prior(scaled, trace_avg, het);
    auto pre = preliminary_solution(experts, reg, c_agg);
    diag.fallback = std::string(rung_name(pre.rung));

    LayerMergeOutput out;
    out.preliminary = pre.w;
    if (het) {
        const Matrix res = structural_residual(experts, scaled, reg);
        auto refine = spectral_refinement(pre.w, res, cfg.k_frac);
        diag.k = refine.k;
        diag.sigma_iso = refine.sigma_iso;
        out.merged = refine.k == 0 ? pre.w : Matrix(pre.w + refine.delta);
    } else {
        out.merged = std::move(pre.w);
    }
    out.diagnostics = std::move(diag);
    return out;
}

} // namespace detail

/// Merges one weight matrix with the configured method and records diagnostics.
inline LayerMergeOutput merge_layer(const Matrix& base, std::span<const Matrix> experts, const MergeConfig& cfg) {
    cfg.validate();
    if (experts.empty()) throw Error(ErrorKind::validation, "merge_layer: empty expert list");
    for (const auto& e : experts)
        if (e.rows() != base.rows() || e.cols() != base.cols())
            throw Error(ErrorKind::validation, "merge_layer: expert shape differs from base");

    LayerMergeOutput out;
    switch (cfg.method) {
    case Method::ace:
        out = detail::ace_layer(base, experts, cfg);
        break;
    case Method::average:
        out = detail::averaged_layer(experts, Method::average, "none");
        break;
    case Method::task_arith:
        out.merged = task_arithmetic(base, experts, cfg.task_arith_lambda);
        out.preliminary = out.merged;
        break;
    case Method::cov_proxy_tv:
    case Method::cov_proxy_tv_norm: {
        const ProxyKind kind =
            cfg.method == Method::cov_proxy_tv ? ProxyKind{proxy::TvOuter{}} : ProxyKind{proxy::TvOuterNorm{}};
        auto r = cov_proxy_merge(base, experts, kind, cfg.eps);
        out.merged = std::move(r.w);
        out.preliminary = out.merged;
        out.diagnostics.fallback = std::string(rung_name(r.rung));
        break;
    }
    }
    out.diagnostics.method = cfg.method;
    detail::fill_spectra(out);
    return out;
}

inline Matrix to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw Error(ErrorKind::validation, "expected a rank-2 tensor");
    const auto v = t.to_f64();
    return Eigen::Map<const Matrix>(v.data(), static_cast<Eigen::Index>(t.shape()[0]),
                                    static_cast<Eigen::Index>(t.shape()[1]));
}

inline Tensor from_matrix(const Matrix& m, DType dtype) {
    return Tensor::from_f64({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                            std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), dtype);
}

inline nlohmann::json config_json(const MergeConfig& cfg) {
    nlohmann::json j;
    j["eps"] = cfg.eps;
    j["tau"] = cfg.tau;
    j["k_frac"] = cfg.k_frac;
    j["method"] = method_name(cfg.method);
    j["task_arith_lambda"] = cfg.task_arith_lambda;
    j["layer_include"] = cfg.layer_include;
    j["force_branch"] = cfg.force_branch ? nlohmann::json(branch_name(*cfg.force_branch)) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json diagnostics_json(const LayerDiagnostics& d) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    auto stat = [](const std::optional<SpectrumStats>& s, auto fn) {
        return s ? nlohmann::json(fn(*s)) : nlohmann::json(nullptr);
    };
    nlohmann::json j;
    j["method"] = method_name(d.method);
    j["gamma"] = opt(d.gamma);
    j["branch"] = d.branch ? nlohmann::json(branch_name(*d.branch)) : nlohmann::json(nullptr);
    j["trace_avg"] = d.trace_avg;
    j["k"] = d.k;
    j["sigma_iso"] = d.sigma_iso;
    j["pre_condition_number"] = stat(d.pre_spectrum, [](const SpectrumStats& s) { return s.condition_number(); });
    j["final_condition_number"] = stat(d.final_spectrum, [](const SpectrumStats& s) { return s.condition_number(); });
    j["energy_top5pct_pre"] = stat(d.pre_spectrum, [](const SpectrumStats& s) { return s.energy_fraction(0.05); });
    j["energy_top5pct_final"] = stat(d.final_spectrum, [](const SpectrumStats& s) { return s.energy_fraction(0.05); });
    j["principal_alignment"] = d.principal_alignment;
    j["fallback"] = d.fallback;
    return j;
}

struct ModelMergeResult {
    Checkpoint merged;
    std::vector<std::pair<std::string, LayerDiagnostics>> layers;  // merged rank-2 layers, name order
    std::vector<std::string> averaged;                             // tensors merged by plain averaging

    nlohmann::json report(const MergeConfig& cfg) const {
        nlohmann::json j;
        j["config"] = config_json(cfg);
        j["layers"] = nlohmann::json::object();
        for (const auto& [name, d] : layers) j["layers"][name] = diagnostics_json(d);
        j["averaged"] = averaged;
        return j;
    }
};

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Each index is
/// handled by exactly one worker; the first failure (by index) is rethrown.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (unsigned w = 0; w < threads; ++w) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline ModelMergeResult merge_model(const Checkpoint& base, std::span<const Checkpoint> experts,
                                    const MergeConfig& cfg, unsigned threads = 1) {
    cfg.validate();
    if (experts.empty()) throw Error(ErrorKind::validation, "merge_model: empty expert list");
    for (std::size_t t = 0; t < experts.size(); ++t) {
        const auto diff = shape_diff(base, experts[t]);
        if (!diff.empty())
            throw Error(ErrorKind::validation, "architecture mismatch with expert " + std::to_string(t) + ": " +
                                                   std::string(mismatch_name(diff.front().kind)) + " \"" +
                                                   diff.front().name + "\"" +
                                                   (diff.size() > 1 ? " (+" + std::to_string(diff.size() - 1) + " more)"
                                                                    : ""));
    }

    std::vector<std::string> names;
    for (const auto& [name, _] : base.tensors) names.push_back(name);

    struct Slot {
        Tensor tensor;
        std::optional<LayerDiagnostics> diag;
    };
    std::vector<Slot> slots(names.size());

    parallel_for(names.size(), threads, [&](std::size_t i) {
        const auto& name = names[i];
        const Tensor& b = base.tensors.at(name);
        if (b.rank() == 2 && b.numel() > 0 && cfg.includes(name)) {
            const Matrix bm = to_matrix(b);
            std::vector<Matrix> em;
            em.reserve(experts.size());
            for (const auto& e : experts) em.push_back(to_matrix(e.tensors.at(name)));
            auto out = merge_layer(bm, em, cfg);
            slots[i] = {from_matrix(out.merged, b.dtype()), std::move(out.diagnostics)};
        } else {
            std::vector<double> acc(b.numel(), 0.0);
            for (const auto& e : experts) {
                const auto v = e.tensors.at(name).to_f64();
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
            }
            for (auto& v : acc) v /= static_cast<double>(experts.size());
            slots[i] = {Tensor::from_f64(b.shape(), acc, b.dtype()), std::nullopt};
        }
    });

    ModelMergeResult result;
    result.merged.metadata = base.metadata;
    for (std::size_t i = 0; i < names.size(); ++i) {
        result.merged.tensors.emplace(names[i], std::move(slots[i].tensor));
        if (slots[i].diag)
            result.layers.emplace_back(names[i], std::move(*slots[i].diag));
        else
            result.averaged.push_back(names[i]);
    }
    return result;
}

} // namespace acemerge
