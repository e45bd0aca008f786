#pragma once
// `acemerge` command-line front end.
//
// Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical failure,
// 4 verification suite failure.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "acemerge/error.hpp"
#include "acemerge/merge.hpp"
#include "acemerge/tensor_store.hpp"
#include "acemerge/verify.hpp"

namespace acemerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitVerifyFailed = 4;

inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::validation: return kExitValidation;
    case ErrorKind::io: return kExitIo;
    case ErrorKind::numerical: return kExitNumerical;
    }
    return kExitValidation;
}

/// MergeConfig from a JSON object; keys mirror the struct fields.
inline MergeConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, "config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::validation, "config " + path + " is not a JSON object");
    MergeConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "eps")
                cfg.eps = value.get<double>();
            else if (key == "tau")
                cfg.tau = value.get<double>();
            else if (key == "k_frac")
                cfg.k_frac = value.get<double>();
            else if (key == "task_arith_lambda")
                cfg.task_arith_lambda = value.get<double>();
            else if (key == "layer_include")
                cfg.layer_include = value.get<std::vector<std::string>>();
            else if (key == "method") {
                const auto m = parse_method(value.get<std::string>());
                if (!m) throw Error(ErrorKind::validation, "config: unknown method " + value.dump());
                cfg.method = *m;
            } else if (key == "force_branch") {
                if (value.is_null()) {
                    cfg.force_branch.reset();
                } else {
                    const auto b = parse_branch(value.get<std::string>());
                    if (!b) throw Error(ErrorKind::validation, "config: unknown branch " + value.dump());
                    cfg.force_branch = *b;
                }
            } else {
                throw Error(ErrorKind::validation, "config: unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, "config " + path + ": " + e.what());
    }
    return cfg;
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open for writing: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed: " + path);
}

inline std::string format_double(double v, const char* fmt = "%.6g") {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

inline std::string shape_string(const Tensor::Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

inline unsigned default_threads() {
    if (const char* env = std::getenv("ACE_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (const std::exception&) {
        }
    }
    return 1;
}

struct ExpertSet {
    Checkpoint base;
    std::vector<Checkpoint> experts;
};

inline ExpertSet load_experts(const std::string& base_path, const std::vector<std::string>& expert_paths) {
    if (expert_paths.empty()) throw Error(ErrorKind::validation, "at least one --experts path is required");
    ExpertSet set;
    set.base = read_container(base_path);
    for (const auto& p : expert_paths) set.experts.push_back(read_container(p));
    return set;
}

struct MergeArgs {
    std::string base, out, report, config;
    std::vector<std::string> experts;
    double eps = 0, tau = 0, k_frac = 0, lambda = 0;
    std::string method, force_branch;
    std::vector<std::string> layer_include;
    unsigned threads = 1;
};

inline int cmd_merge(const MergeArgs& a, const CLI::App& sub, std::ostream& out) {
    MergeConfig cfg = a.config.empty() ? MergeConfig{} : load_config(a.config);
    if (sub.count("--eps")) cfg.eps = a.eps;
    if (sub.count("--tau")) cfg.tau = a.tau;
    if (sub.count("--k-frac")) cfg.k_frac = a.k_frac;
    if (sub.count("--task-arith-lambda")) cfg.task_arith_lambda = a.lambda;
    if (sub.count("--layer-include")) cfg.layer_include = a.layer_include;
    if (sub.count("--method")) {
        const auto m = parse_method(a.method);
        if (!m) throw Error(ErrorKind::validation, "unknown method: " + a.method);
        cfg.method = *m;
    }
    if (sub.count("--force-branch")) {
        const auto b = parse_branch(a.force_branch);
        if (!b) throw Error(ErrorKind::validation, "unknown branch: " + a.force_branch);
        cfg.force_branch = *b;
    }
    cfg.validate();

    const auto set = load_experts(a.base, a.experts);
    const auto result = merge_model(set.base, set.experts, cfg, a.threads);
    write_container(result.merged, a.out);
    const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
    write_json(result.report(cfg), report_path);

    out << "layer\tmethod\tgamma\tbranch\tk\tfallback\n";
    for (const auto& [name, d] : result.layers)
        out << name << '\t' << method_name(d.method) << '\t' << (d.gamma ? format_double(*d.gamma) : "-") << '\t'
            << (d.branch ? branch_name(*d.branch) : "-") << '\t' << d.k << '\t' << d.fallback << '\n';
    out << "averaged " << result.averaged.size() << " non-matrix tensors; wrote " << a.out << " and " << report_path
        << '\n';
    return kExitOk;
}

struct GammaArgs {
    std::string base, report;
    std::vector<std::string> experts;
    std::vector<std::string> layer_include;
    double tau = 0.3;
};

inline int cmd_gamma(const GammaArgs& a, std::ostream& out) {
    const auto set = load_experts(a.base, a.experts);
    for (std::size_t t = 0; t < set.experts.size(); ++t)
        if (!shape_diff(set.base, set.experts[t]).empty())
            throw Error(ErrorKind::validation, "architecture mismatch with expert " + std::to_string(t));
    MergeConfig filter;
    filter.layer_include = a.layer_include;

    nlohmann::json report;
    report["tau"] = a.tau;
    report["layers"] = nlohmann::json::object();
    out << "layer\tgamma\tbranch\n";
    for (const auto& [name, tensor] : set.base.tensors) {
        if (tensor.rank() != 2 || tensor.numel() == 0 || !filter.includes(name)) continue;
        const Matrix base = to_matrix(tensor);
        std::vector<TaskVector> tvs;
        for (std::size_t t = 0; t < set.experts.size(); ++t)
            tvs.push_back(task_vector(base, to_matrix(set.experts[t].tensors.at(name)), std::to_string(t), name));
        nlohmann::json row;
        try {
            const auto h = heterogeneity(tvs, {});
            const auto branch = h.gamma > a.tau ? Branch::heterogeneous : Branch::homogeneous;
            row = {{"gamma", h.gamma}, {"branch", branch_name(branch)}, {"log_energies", h.log_energies}};
            out << name << '\t' << format_double(h.gamma, "%.12g") << '\t' << branch_name(branch) << '\n';
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numerical) throw;
            row = {{"gamma", nullptr}, {"branch", nullptr}, {"error", e.what()}};
            out << name << "\t-\t" << e.what() << '\n';
        }
        report["layers"][name] = row;
    }
    if (!a.report.empty()) write_json(report, a.report);
    return kExitOk;
}

inline int cmd_inspect(const std::string& path, std::ostream& out) {
    const auto ckpt = read_container(path);
    out << path << ": ACET v1, " << ckpt.tensors.size() << " tensors, " << ckpt.metadata.size()
        << " metadata entries\n";
    for (const auto& [name, t] : ckpt.tensors)
        out << name << '\t' << dtype_name(t.dtype()) << '\t' << shape_string(t.shape()) << '\n';
    for (const auto& [k, v] : ckpt.metadata) out << "# " << k << " = " << v << '\n';
    return kExitOk;
}

struct VerifyArgs {
    std::string suite = "all";
    std::uint64_t seed = 20250101;
    std::string report;
    bool json = false;
};

inline int cmd_verify(const VerifyArgs& a, std::ostream& out) {
    std::vector<verify::SuiteResult> results;
    if (a.suite == "all") {
        for (const auto& name : verify::suite_names()) results.push_back(verify::run_suite(name, a.seed));
    } else {
        results.push_back(verify::run_suite(a.suite, a.seed));
    }
    const auto j = verify::to_json(results, a.seed);
    if (a.json)
        out << j.dump(2) << '\n';
    else
        out << verify::to_text(results) << (j["passed"].get<bool>() ? "all suites passed\n" : "some suites FAILED\n");
    if (!a.report.empty()) write_json(j, a.report);
    return j["passed"].get<bool>() ? kExitOk : kExitVerifyFailed;
}

/// Parses argv and dispatches; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Data-free adaptive covariance model merging"};
    app.require_subcommand(1);

    MergeArgs merge;
    merge.threads = default_threads();
    auto* m = app.add_subcommand("merge", "Merge expert checkpoints into the base architecture");
    m->add_option("--base", merge.base, "Base (pretrained) ACET checkpoint")->required();
    m->add_option("--experts", merge.experts, "Expert ACET checkpoints")->required();
    m->add_option("--out", merge.out, "Output ACET path")->required();
    m->add_option("--report", merge.report, "JSON report path (default: <out>.report.json)");
    m->add_option("--config", merge.config, "JSON config file; flags override it");
    m->add_option("--eps", merge.eps, "Tikhonov strength (default 1e-5)");
    m->add_option("--tau", merge.tau, "Heterogeneity threshold (default 0.3)");
    m->add_option("--k-frac", merge.k_frac, "Refinement rank fraction (default 0.3)");
    m->add_option("--method", merge.method, "ace|average|task_arith|cov_proxy_tv|cov_proxy_tv_norm");
    m->add_option("--task-arith-lambda", merge.lambda, "Task arithmetic scale (default 1.0)");
    m->add_option("--force-branch", merge.force_branch, "homogeneous|heterogeneous");
    m->add_option("--layer-include", merge.layer_include, "Glob patterns selecting matrices to merge");
    m->add_option("--threads", merge.threads, "Worker threads (default $ACE_THREADS or 1)");

    GammaArgs gamma;
    auto* g = app.add_subcommand("gamma", "Per-layer heterogeneity table");
    g->add_option("--base", gamma.base)->required();
    g->add_option("--experts", gamma.experts)->required();
    g->add_option("--tau", gamma.tau, "Threshold used for the branch column");
    g->add_option("--layer-include", gamma.layer_include);
    g->add_option("--report", gamma.report, "Write the table as JSON");

    std::string inspect_path;
    auto* i = app.add_subcommand("inspect", "List tensors in an ACET file");
    i->add_option("path", inspect_path)->required();

    VerifyArgs ver;
    auto* v = app.add_subcommand("verify", "Run the synthetic verification suites");
    v->add_option("--suite", ver.suite, "all|theorem1|optimality|limiting|statistics");
    v->add_option("--seed", ver.seed);
    v->add_option("--report", ver.report, "Write results as JSON");
    v->add_flag("--json", ver.json, "Print JSON instead of the text table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (m->parsed()) return cmd_merge(merge, *m, out);
        if (g->parsed()) return cmd_gamma(gamma, out);
        if (i->parsed()) return cmd_inspect(inspect_path, out);
        if (v->parsed()) return cmd_verify(ver, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitNumerical;
    }
    return kExitValidation;
}

} // namespace acemerge::cli
