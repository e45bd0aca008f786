#pragma once
// Self-contained synthetic verification suites behind `acemerge verify`.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "acemerge/theory.hpp"

namespace acemerge::verify {

using theory::CaseRow;

struct SuiteResult {
    std::string name;
    std::vector<CaseRow> rows;

    bool passed() const {
        return std::all_of(rows.begin(), rows.end(), [](const CaseRow& r) { return r.passed; });
    }
};

/// Displacement covariance vs input covariance on the diag(9,1,...,1) task.
inline SuiteResult theorem1_suite(std::uint64_t seed) {
    using namespace theory;
    SyntheticTaskSpec spec;
    spec.d_in = spec.d_out = 8;
    spec.sigma_true = Matrix::Identity(8, 8);
    spec.sigma_true(0, 0) = 9.0;
    Rng rng(seed);
    const Matrix w0 = gaussian_matrix(rng, 8, 8);
    spec.teacher = w0;
    spec.noise_std = 1.0;
    spec.n_samples = 10000;
    spec.lr = 1e-4;
    spec.seed = seed;
    const auto rep = verify_theorem1(spec, w0, 64);

    SyntheticTaskSpec doubled = spec;
    doubled.lr = 2.0 * spec.lr;
    const auto rep2 = verify_theorem1(doubled, w0, 64);
    const double ratio = trace(rep2.cov_centered) / trace(rep.cov_centered);

    SuiteResult s{"theorem1", {}};
    s.rows.push_back({"leading_eigenvector_alignment", *rep.alignment, 0.95, *rep.alignment >= 0.95});
    s.rows.push_back({"trace_normalized_distance", rep.normalized_distance, 0.15, rep.normalized_distance <= 0.15});
    s.rows.push_back({"lr_doubling_scale_ratio_minus_4", std::abs(ratio - 4.0), 0.4, std::abs(ratio - 4.0) <= 0.4});
    return s;
}

/// Gradient, perturbation and gradient-descent checks of the closed form.
inline SuiteResult optimality_suite(std::uint64_t seed, std::size_t instances = 12) {
    using namespace theory;
    Rng rng(seed);
    const std::array<std::size_t, 3> task_counts{2, 3, 5};
    const std::array<Eigen::Index, 3> dims{3, 8, 16};
    double worst_grad = 0.0, worst_margin = 0.0, worst_bf = 0.0;
    bool margin_ok = true;
    for (std::size_t inst = 0; inst < instances; ++inst) {
        const auto tasks = task_counts[inst % 3];
        const auto d_out = dims[(inst / 3) % 3];
        const auto d_in = dims[(inst / 9) % 3];
        std::vector<Matrix> experts, sigmas;
        for (std::size_t t = 0; t < tasks; ++t) {
            experts.push_back(gaussian_matrix(rng, d_out, d_in));
            sigmas.push_back(random_spd(rng, d_in, 1e-2, 1e2));
        }
        const Matrix w = preliminary_solution(experts, sigmas).w;
        Matrix numer = Matrix::Zero(d_out, d_in);
        for (std::size_t t = 0; t < tasks; ++t) numer += experts[t] * sigmas[t];
        const double grad = merging_loss_gradient(w, experts, sigmas).norm() / (1.0 + numer.norm());
        worst_grad = std::max(worst_grad, grad);

        const double base_loss = merging_loss(w, experts, sigmas);
        for (int p = 0; p < 100; ++p) {
            Matrix delta = gaussian_matrix(rng, d_out, d_in);
            delta *= 1e-3 / delta.norm();
            const double margin = merging_loss(w + delta, experts, sigmas) - base_loss;
            if (!(margin >= 0.0)) margin_ok = false;
            worst_margin = p == 0 && inst == 0 ? margin : std::min(worst_margin, margin);
        }

        BruteForceOptions opts;
        opts.rel_tol = 1e-12;
        const auto bf = brute_force_merge(experts, sigmas, optimal_step(sigmas), 1'000'000, opts);
        worst_bf = std::max(worst_bf, relative_distance(bf.w, w));
    }
    SuiteResult s{"optimality", {}};
    s.rows.push_back({"relative_gradient_norm", worst_grad, 1e-8, worst_grad < 1e-8});
    s.rows.push_back({"min_loss_increase_under_perturbation", worst_margin, 0.0, margin_ok});
    s.rows.push_back({"gradient_descent_relative_distance", worst_bf, 1e-6, worst_bf < 1e-6});
    return s;
}

inline SuiteResult limiting_suite(std::uint64_t seed) {
    theory::LimitingCaseGrid grid;
    grid.seed = seed;
    return {"limiting", theory::limiting_case_suite(grid)};
}

/// Entry-wise mean of a displacement from near-converged fine-tuning.
inline SuiteResult statistics_suite(std::uint64_t seed) {
    using namespace theory;
    SyntheticTaskSpec spec;
    spec.d_out = 64;
    spec.d_in = 128;
    Rng rng(seed);
    spec.sigma_true = random_spd(rng, spec.d_in, 0.5, 2.0);
    const Matrix w0 = gaussian_matrix(rng, spec.d_out, spec.d_in, 0.1);
    spec.teacher = w0 + gaussian_matrix(rng, spec.d_out, spec.d_in, 1e-3);
    spec.noise_std = 0.1;
    spec.n_samples = 2000;
    spec.lr = 1e-4;
    spec.seed = seed + 1;
    const auto tv = simulate_finetune(w0, generate_task(spec), spec.lr, 1, FinetuneMode::sgd);
    const auto st = delta_w_statistics(tv.delta);
    const double ratio = std::abs(st.mean) / st.stddev;
    return {"statistics", {{"abs_mean_over_std", ratio, 0.05, ratio <= 0.05}}};
}

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"theorem1", "optimality", "limiting", "statistics"};
    return names;
}

inline SuiteResult run_suite(std::string_view name, std::uint64_t seed) {
    if (name == "theorem1") return theorem1_suite(seed);
    if (name == "optimality") return optimality_suite(seed);
    if (name == "limiting") return limiting_suite(seed);
    if (name == "statistics") return statistics_suite(seed);
    throw Error(ErrorKind::validation, "unknown suite: " + std::string(name));
}

inline nlohmann::json to_json(const std::vector<SuiteResult>& suites, std::uint64_t seed) {
    nlohmann::json j;
    j["seed"] = seed;
    bool all = true;
    j["suites"] = nlohmann::json::object();
    for (const auto& s : suites) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : s.rows)
            rows.push_back({{"case", r.name}, {"value", r.value}, {"threshold", r.threshold}, {"passed", r.passed}});
        j["suites"][s.name] = {{"passed", s.passed()}, {"cases", rows}};
        all = all && s.passed();
    }
    j["passed"] = all;
    return j;
}

inline std::string to_text(const std::vector<SuiteResult>& suites) {
    std::string out;
    char line[256];
    for (const auto& s : suites)
        for (const auto& r : s.rows) {
            std::snprintf(line, sizeof line, "%-4s %-11s %-50s value=%.6e threshold=%.6e\n", r.passed ? "PASS" : "FAIL",
                          s.name.c_str(), r.name.c_str(), r.value, r.threshold);
            out += line;
        }
    return out;
}

} // namespace acemerge::verify
