// colin: experiment driver for the multi-branch low-rank adapter library.
//
// Subcommands: simulate, gradcheck, deltaw, train-toy, params, fuse,
// bench-fuse, init-adapter. Every subcommand accepts --config <file.json>
// whose keys are flag names (dashes or underscores); flags on the command
// line win over the file. The resolved configuration is printed as the first
// stdout line. Exit codes: 0 success, 1 runtime/IO failure, 2 usage error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "colin/adapter.hpp"
#include "colin/backbone.hpp"
#include "colin/error.hpp"
#include "colin/gradcheck.hpp"
#include "colin/linalg.hpp"
#include "colin/serialize.hpp"
#include "colin/simulate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Raised for flag combinations CLI11 cannot validate on its own.
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

void print_config(const std::string& command, json cfg) {
    cfg["command"] = command;
    std::cout << "config " << cfg.dump() << std::endl;
}

void log_line(const std::string& msg) { std::cerr << "[colin] " << msg << std::endl; }

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

void emit_json(const json& report, const std::string& out_path) {
    if (!out_path.empty()) {
        if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
        colin::write_json_file(out_path, report);
    }
    std::cout << report.dump(2) << std::endl;
}

colin::toy::AdapterInit parse_init(const std::string& s) {
    if (s == "svd") return colin::toy::AdapterInit::svd;
    if (s == "random") return colin::toy::AdapterInit::random;
    if (s == "zero") return colin::toy::AdapterInit::zero;
    throw UsageError("unknown adapter init '" + s + "' (svd|random|zero)");
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
    colin::sim::SimConfig cfg;
    std::vector<std::size_t> sizes;
    unsigned threads = 0;
    std::string out = "sim_out";
};

void add_simulate(CLI::App& app, SimulateOpts& o) {
    auto* c = app.add_subcommand("simulate", "Low-rank factorization convergence, with vs without OL");
    c->add_option("--m", o.cfg.m, "target rows")->capture_default_str();
    c->add_option("--k", o.cfg.k, "factor rank")->capture_default_str();
    c->add_option("--n", o.cfg.n, "target columns")->capture_default_str();
    c->add_option("--lr", o.cfg.lr, "learning rate")->capture_default_str();
    c->add_option("--iters", o.cfg.iters, "gradient steps")->capture_default_str();
    c->add_option("--seeds", o.cfg.seeds, "paired seeds per arm")->capture_default_str();
    c->add_option("--ol-weight", o.cfg.ol_weight, "weight of the orthogonal term")->capture_default_str();
    c->add_option("--record-every", o.cfg.record_every, "record stride")->capture_default_str();
    c->add_option("--seed", o.cfg.base_seed, "first seed")->capture_default_str();
    c->add_option("--sizes", o.sizes, "run every n in this list and write gaps.json")->delimiter(',');
    c->add_option("--threads", o.threads, "worker threads (0 = hardware)")->capture_default_str();
    c->add_option("--out", o.out, "output directory")->capture_default_str();
}

int run_simulate(const SimulateOpts& o) {
    o.cfg.validate();
    json cfg{{"m", o.cfg.m},           {"k", o.cfg.k},
             {"n", o.cfg.n},           {"lr", o.cfg.lr},
             {"iters", o.cfg.iters},   {"seeds", o.cfg.seeds},
             {"ol_weight", o.cfg.ol_weight}, {"record_every", o.cfg.record_every},
             {"seed", o.cfg.base_seed}, {"sizes", o.sizes},
             {"out", o.out}};
    print_config("simulate", cfg);

    const fs::path dir(o.out);
    fs::create_directories(dir);
    const std::vector<std::size_t> sizes = o.sizes.empty() ? std::vector{o.cfg.n} : o.sizes;
    json gaps = json::array();
    for (std::size_t n : sizes) {
        colin::sim::SimConfig cfg = o.cfg;
        cfg.n = n;
        cfg.validate();
        log_line(fmt::format("simulate m={} k={} n={} seeds={} iters={}", cfg.m, cfg.k, n,
                             cfg.seeds, cfg.iters));
        const colin::sim::SimRun run = colin::sim::run_sim(cfg, o.threads, log_line);
        const std::string suffix = o.sizes.empty() ? "" : fmt::format("_n{}", n);
        {
            auto out = open_out(dir / ("trace" + suffix + ".csv"));
            colin::sim::write_trace_csv(out, run.traces);
        }
        {
            auto out = open_out(dir / ("summary" + suffix + ".csv"));
            colin::sim::write_summary_csv(out, run.summary);
        }
        const auto& s = run.summary;
        std::cout << fmt::format("final n={} mean_with_OL={} mean_without_OL={} gap={}", n,
                                 s.final_mean_with_ol, s.final_mean_without_ol, s.final_gap)
                  << std::endl;
        gaps.push_back(json{{"n", n}, {"gap", s.final_gap}});
    }
    if (!o.sizes.empty()) colin::write_json_file(dir / "gaps.json", gaps);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOpts {
    std::string suite = "standard";
    colin::check::AdapterCheckConfig single;
    double tol = 1e-5;
    std::string out;
};

void add_gradcheck(CLI::App& app, GradcheckOpts& o) {
    auto* c = app.add_subcommand("gradcheck", "Analytic adapter gradients vs central differences");
    c->add_option("--suite", o.suite, "standard (ten seeded shapes) or single")
        ->check(CLI::IsMember({"standard", "single"}))
        ->capture_default_str();
    c->add_option("--d", o.single.d)->capture_default_str();
    c->add_option("--h", o.single.h)->capture_default_str();
    c->add_option("--beta", o.single.beta)->capture_default_str();
    c->add_option("--alpha", o.single.alpha)->capture_default_str();
    c->add_option("--tokens", o.single.tokens)->capture_default_str();
    c->add_option("--lambda", o.single.lambda, "orthogonal-loss weight in the objective")->capture_default_str();
    c->add_option("--seed", o.single.seed)->capture_default_str();
    c->add_option("--tol", o.tol, "max relative error")->capture_default_str();
    c->add_option("--out", o.out, "also write the JSON report here");
}

int run_gradcheck(const GradcheckOpts& o) {
    const auto& s = o.single;
    print_config("gradcheck", json{{"suite", o.suite}, {"d", s.d}, {"h", s.h}, {"beta", s.beta},
                                   {"alpha", s.alpha}, {"tokens", s.tokens}, {"lambda", s.lambda},
                                   {"seed", s.seed}, {"tol", o.tol}, {"out", o.out}});
    if (s.beta > std::min(s.d, s.h)) throw UsageError("beta must not exceed min(d, h)");

    const auto configs = o.suite == "standard" ? colin::check::standard_adapter_configs()
                                               : std::vector{o.single};
    json runs = json::array();
    bool passed = true;
    double worst = 0.0;
    for (const auto& c : configs) {
        const colin::check::FdReport r = colin::check::check_adapter(c, o.tol);
        json entries = json::object();
        for (const auto& e : r.entries)
            entries[e.name] = json{{"max_rel_error", e.max_rel_error}, {"max_abs_error", e.max_abs_error},
                                   {"worst_index", e.worst_index}, {"passed", e.passed}};
        runs.push_back(json{{"d", c.d}, {"h", c.h}, {"beta", c.beta}, {"alpha", c.alpha},
                            {"tokens", c.tokens}, {"seed", c.seed}, {"lambda", c.lambda},
                            {"max_rel_error", r.max_rel_error}, {"passed", r.passed},
                            {"parameters", entries}});
        passed = passed && r.passed;
        worst = std::max(worst, r.max_rel_error);
    }
    emit_json(json{{"step", colin::check::kFdStep}, {"tolerance", o.tol},
                   {"max_rel_error", worst}, {"passed", passed}, {"runs", runs}},
              o.out);
    return passed ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// deltaw

struct DeltaWOpts {
    std::size_t m = 6, k = 6, n = 6;
    std::vector<double> etas{1e-3, 5e-4, 2.5e-4};
    std::uint64_t seed = 0;
    std::string init = "auto";
    std::string out;
};

void add_deltaw(CLI::App& app, DeltaWOpts& o) {
    auto* c = app.add_subcommand("deltaw", "First-order update of W = P·Q after one gradient step");
    c->add_option("--m", o.m)->capture_default_str();
    c->add_option("--k", o.k)->capture_default_str();
    c->add_option("--n", o.n)->capture_default_str();
    c->add_option("--eta", o.etas, "learning rates")->delimiter(',')->capture_default_str();
    c->add_option("--seed", o.seed)->capture_default_str();
    c->add_option("--init", o.init, "auto|random|orthonormal|planted (auto: orthonormal when square)")
        ->check(CLI::IsMember({"auto", "random", "orthonormal", "planted"}))
        ->capture_default_str();
    c->add_option("--out", o.out, "also write the JSON report here");
}

int run_deltaw(const DeltaWOpts& o) {
    print_config("deltaw", json{{"m", o.m}, {"k", o.k}, {"n", o.n}, {"eta", o.etas},
                                {"seed", o.seed}, {"init", o.init}, {"out", o.out}});
    if (o.k == 0 || o.k > std::min(o.m, o.n)) throw UsageError("need 1 <= k <= min(m, n)");
    if (o.etas.empty()) throw UsageError("--eta needs at least one value");
    for (double e : o.etas)
        if (!(e >= 0.0)) throw UsageError("--eta values must be >= 0");

    using colin::check::FactorInit;
    const bool square = o.m == o.k && o.k == o.n;
    FactorInit init = FactorInit::random;
    if (o.init == "orthonormal" || (o.init == "auto" && square)) init = FactorInit::orthonormal;
    if (o.init == "planted") init = FactorInit::planted;
    const char* init_name = init == FactorInit::orthonormal ? "orthonormal"
                            : init == FactorInit::planted   ? "planted"
                                                            : "random";

    const auto rep = colin::check::delta_w_experiment(o.m, o.k, o.n, o.etas, o.seed, init);
    const bool ideal_case = square && init == FactorInit::orthonormal;

    bool within_bound = true, ideal_ok = true, linear_ok = true;
    json points = json::array();
    for (const auto& p : rep.points) {
        within_bound = within_bound && p.abs_residual <= 1.5 * p.bound + 1e-300;
        if (ideal_case) ideal_ok = ideal_ok && p.ideal_residual <= p.bound * (1.0 + 1e-9) + 1e-300;
        points.push_back(json{{"eta", p.eta}, {"residual", p.residual}, {"abs_residual", p.abs_residual},
                              {"second_order", p.second_order}, {"bound", p.bound},
                              {"ideal_residual", p.ideal_residual}, {"delta_norm", p.delta_norm},
                              {"grad_w_norm", p.grad_w_norm}});
    }
    for (std::size_t i = 0; i < rep.ratios.size(); ++i) {
        const double eta_ratio = rep.points[i + 1].eta / rep.points[i].eta;
        if (std::abs(eta_ratio - 0.5) < 1e-12 && rep.points[i].residual > 0.0)
            linear_ok = linear_ok && rep.ratios[i] >= 0.4 && rep.ratios[i] <= 0.6;
    }
    json report{{"m", o.m}, {"k", o.k}, {"n", o.n}, {"seed", o.seed}, {"init", init_name},
                {"points", points}, {"ratios", rep.ratios}, {"slope", rep.slope},
                {"within_second_order_bound", within_bound}, {"linear_in_eta", linear_ok}};
    if (ideal_case) report["matches_scaled_gradient"] = ideal_ok;
    const bool passed = within_bound && linear_ok && ideal_ok;
    report["passed"] = passed;
    emit_json(report, o.out);
    return passed ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainOpts {
    colin::toy::ModelConfig model;
    colin::toy::TaskConfig task;
    colin::toy::TrainConfig train;
    std::string init = "svd";
    bool no_adapters = false;
    std::string out = "train_trace.csv";
    std::string save_adapter;
};

void add_train(CLI::App& app, TrainOpts& o) {
    auto* c = app.add_subcommand("train-toy", "Adapter-tune a frozen toy backbone on a synthetic task");
    c->add_option("--blocks", o.model.blocks)->capture_default_str();
    c->add_option("--d", o.model.d, "embed dimension")->capture_default_str();
    c->add_option("--h", o.model.h, "adapter hidden dimension")->capture_default_str();
    c->add_option("--beta", o.model.beta, "kernel size")->capture_default_str();
    c->add_option("--alpha", o.model.alpha, "branch count")->capture_default_str();
    c->add_option("--init", o.init, "svd|random|zero")->capture_default_str();
    c->add_option("--adapter-scale", o.model.adapter_scale, "fixed scale on each adapter's residual branch")->capture_default_str();
    c->add_option("--residual-scale", o.model.residual_scale, "fixed scale on the frozen sublayers")->capture_default_str();
    c->add_flag("--no-adapters", o.no_adapters, "train the head only");
    c->add_option("--samples", o.task.samples)->capture_default_str();
    c->add_option("--tokens", o.task.tokens)->capture_default_str();
    c->add_option("--teacher-hidden", o.task.teacher_hidden)->capture_default_str();
    c->add_option("--teacher-scale", o.task.teacher_scale)->capture_default_str();
    c->add_option("--lr", o.train.lr)->capture_default_str();
    c->add_option("--lambda", o.train.lambda, "orthogonal-loss weight")->capture_default_str();
    c->add_option("--steps", o.train.steps)->capture_default_str();
    c->add_option("--batch", o.train.batch, "0 = full batch")->capture_default_str();
    c->add_option("--momentum", o.train.momentum)->capture_default_str();
    c->add_option("--seed", o.train.seed)->capture_default_str();
    c->add_option("--out", o.out, "trace CSV path")->capture_default_str();
    c->add_option("--save-adapter", o.save_adapter, "write block 0's first adapter as JSON");
}

int run_train(TrainOpts o) {
    o.model.init = parse_init(o.init);
    o.model.adapters_enabled = !o.no_adapters;
    o.task.d = o.model.d;
    print_config("train-toy",
                 json{{"blocks", o.model.blocks}, {"d", o.model.d}, {"h", o.model.h},
                      {"beta", o.model.beta}, {"alpha", o.model.alpha}, {"init", o.init},
                      {"adapter_scale", o.model.adapter_scale},
                      {"residual_scale", o.model.residual_scale},
                      {"no_adapters", o.no_adapters}, {"samples", o.task.samples},
                      {"tokens", o.task.tokens}, {"teacher_hidden", o.task.teacher_hidden},
                      {"teacher_scale", o.task.teacher_scale}, {"lr", o.train.lr},
                      {"lambda", o.train.lambda}, {"steps", o.train.steps},
                      {"batch", o.train.batch}, {"momentum", o.train.momentum},
                      {"seed", o.train.seed}, {"out", o.out}, {"save_adapter", o.save_adapter}});
    o.train.validate();
    if (o.model.beta > std::min(o.model.d, o.model.h)) throw UsageError("beta must not exceed min(d, h)");

    colin::Rng root(o.train.seed);
    colin::Rng model_rng = root.split();
    colin::Rng data_rng = root.split();
    const colin::toy::Dataset data = colin::toy::make_synthetic_task(o.task, data_rng);
    colin::toy::ToyModel model = colin::toy::build_toy_model(o.model, model_rng);
    colin::toy::ParamPartition part = model.partition();
    std::vector<colin::Matrix> frozen_before;
    for (const auto& r : part.theta_f) frozen_before.push_back(*r.value);

    log_line(fmt::format("train-toy: |theta_F|={} |theta_T|={} |theta_A|={}", part.frozen_count(),
                         part.count(part.theta_t), part.adapter_count()));
    const colin::toy::TrainingTrace trace = colin::toy::train(model, part, data, o.train);

    bool frozen_ok = true;
    for (std::size_t i = 0; i < part.theta_f.size(); ++i)
        frozen_ok = frozen_ok && colin::bit_identical(*part.theta_f[i].value, frozen_before[i]);

    {
        auto out = open_out(o.out);
        colin::toy::write_trace_csv(out, trace);
    }
    if (!o.save_adapter.empty() && o.model.adapters_enabled) {
        colin::ColinAdapter a = model.blocks.front().adapter_1;
        a.ortho_lambda = o.train.lambda;
        colin::write_json_file(o.save_adapter, colin::to_json(a));
    }
    std::cout << json{{"initial_task_loss", trace.task_loss.front()},
                      {"final_task_loss", trace.final_task_loss},
                      {"frozen_params", part.frozen_count()},
                      {"trainable_params", part.trainable_count()},
                      {"adapter_params", part.adapter_count()},
                      {"frozen_unchanged", frozen_ok}}
                     .dump()
              << std::endl;
    return frozen_ok ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// params

struct ParamsOpts {
    std::size_t m = 384, n = 768, beta = 8, alpha = 1, gamma = 1;
};

void add_params(CLI::App& app, ParamsOpts& o) {
    auto* c = app.add_subcommand("params", "New-parameter count vs dense projections");
    c->add_option("--m", o.m)->capture_default_str();
    c->add_option("--n", o.n)->capture_default_str();
    c->add_option("--beta", o.beta)->capture_default_str();
    c->add_option("--alpha", o.alpha)->capture_default_str();
    c->add_option("--gamma", o.gamma, "projections per adapter")->capture_default_str();
}

int run_params(const ParamsOpts& o) {
    print_config("params", json{{"m", o.m}, {"n", o.n}, {"beta", o.beta}, {"alpha", o.alpha},
                                {"gamma", o.gamma}});
    if (o.m == 0 || o.n == 0 || o.beta == 0 || o.alpha == 0 || o.gamma == 0)
        throw UsageError("all counts must be >= 1");
    const colin::ParamCount pc = colin::param_count(o.m, o.n, o.beta, o.alpha, o.gamma);
    auto frac = [](const colin::Fraction& f) { return fmt::format("{}/{}", f.num, f.den); };
    std::cout << json{{"colin", pc.colin},
                      {"factor_params", pc.factor_params},
                      {"kernel_params", pc.kernel_params},
                      {"dense_baseline", pc.dense_baseline},
                      {"reduction", pc.reduction.value()},
                      {"reduction_exact", frac(pc.reduction)},
                      {"factor_reduction", pc.factor_reduction.value()},
                      {"factor_reduction_exact", frac(pc.factor_reduction)}}
                     .dump(2)
              << std::endl;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// fuse

struct FuseOpts {
    std::string in;
    std::string out = "fused.json";
    std::uint64_t seed = 0;
    std::size_t tokens = 4;
    std::size_t probes = 8;
};

void add_fuse(CLI::App& app, FuseOpts& o) {
    auto* c = app.add_subcommand("fuse", "Collapse an adapter's branches into dense weights");
    c->add_option("--in", o.in, "adapter JSON")->required();
    c->add_option("--out", o.out, "fused adapter JSON")->capture_default_str();
    c->add_option("--seed", o.seed, "probe input seed")->capture_default_str();
    c->add_option("--tokens", o.tokens, "tokens per probe")->capture_default_str();
}

int run_fuse(const FuseOpts& o) {
    print_config("fuse", json{{"in", o.in}, {"out", o.out}, {"seed", o.seed},
                              {"tokens", o.tokens}, {"probes", o.probes}});
    if (o.tokens == 0) throw UsageError("--tokens must be >= 1");
    const colin::ColinAdapter adapter = colin::adapter_from_json(colin::read_json_file(o.in));
    const colin::FusedAdapter fused = colin::fuse(adapter);

    colin::Rng rng(o.seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < o.probes; ++i) {
        const colin::Matrix x = colin::uniform_matrix(o.tokens, adapter.d, -1.0, 1.0, rng);
        worst = std::max(worst, colin::max_abs_diff(colin::adapter_forward(adapter, x).y,
                                                    fused.forward(x)));
    }
    if (!(worst <= 1e-10)) {
        std::cerr << fmt::format("fuse: equivalence check failed, max |fused - unfused| = {}", worst)
                  << std::endl;
        return kExitRuntime;
    }
    if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
    colin::write_json_file(o.out, colin::to_json(fused));
    std::cout << json{{"max_abs_diff", worst}, {"probes", o.probes}, {"out", o.out}}.dump() << std::endl;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// init-adapter

struct InitOpts {
    std::size_t d = 16, h = 8, beta = 4, alpha = 4;
    std::string init = "svd";
    double lambda = colin::kDefaultOrthoLambda;
    std::uint64_t seed = 0;
    std::string out = "adapter.json";
};

void add_init(CLI::App& app, InitOpts& o) {
    auto* c = app.add_subcommand("init-adapter", "Write a freshly initialized adapter as JSON");
    c->add_option("--d", o.d)->capture_default_str();
    c->add_option("--h", o.h)->capture_default_str();
    c->add_option("--beta", o.beta)->capture_default_str();
    c->add_option("--alpha", o.alpha)->capture_default_str();
    c->add_option("--init", o.init, "svd|random|zero")->capture_default_str();
    c->add_option("--lambda", o.lambda)->capture_default_str();
    c->add_option("--seed", o.seed)->capture_default_str();
    c->add_option("--out", o.out)->capture_default_str();
}

int run_init(const InitOpts& o) {
    print_config("init-adapter", json{{"d", o.d}, {"h", o.h}, {"beta", o.beta}, {"alpha", o.alpha},
                                      {"init", o.init}, {"lambda", o.lambda}, {"seed", o.seed},
                                      {"out", o.out}});
    const auto init = parse_init(o.init);
    colin::ColinAdapter a = colin::ColinAdapter::zeros(o.d, o.h, o.beta, o.alpha);
    a.ortho_lambda = o.lambda;
    colin::Rng rng(o.seed);
    if (init == colin::toy::AdapterInit::svd) colin::svd_init(a, rng);
    if (init == colin::toy::AdapterInit::random) colin::random_factor_init(a, rng);
    if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
    colin::write_json_file(o.out, colin::to_json(a));
    std::cout << json{{"out", o.out}, {"orthogonal_loss", colin::orthogonal_loss(a).loss}}.dump()
              << std::endl;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// bench-fuse

struct BenchOpts {
    std::size_t d = 768, h = 100, beta = 28, alpha = 4, tokens = 64;
    std::size_t reps = 1000, warmup = 50;
    std::uint64_t seed = 0;
    std::string out;
};

void add_bench(CLI::App& app, BenchOpts& o) {
    auto* c = app.add_subcommand("bench-fuse", "Time multi-branch vs fused adapter forward");
    c->add_option("--d", o.d)->capture_default_str();
    c->add_option("--h", o.h)->capture_default_str();
    c->add_option("--beta", o.beta)->capture_default_str();
    c->add_option("--alpha", o.alpha)->capture_default_str();
    c->add_option("--tokens", o.tokens)->capture_default_str();
    c->add_option("--reps", o.reps, "timed repetitions (>= 1000)")->capture_default_str();
    c->add_option("--warmup", o.warmup)->capture_default_str();
    c->add_option("--seed", o.seed)->capture_default_str();
    c->add_option("--out", o.out, "also write the JSON report here");
}

struct Timing {
    double median_us = 0.0;
    double p90_us = 0.0;
};

template <class F>
Timing time_calls(F&& f, std::size_t warmup, std::size_t reps) {
    for (std::size_t i = 0; i < warmup; ++i) f();
    std::vector<double> us(reps);
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        us[i] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    }
    std::sort(us.begin(), us.end());
    const auto at = [&](double q) { return us[std::min(reps - 1, static_cast<std::size_t>(q * (reps - 1) + 0.5))]; };
    return {at(0.5), at(0.9)};
}

int run_bench(const BenchOpts& o) {
    print_config("bench-fuse", json{{"d", o.d}, {"h", o.h}, {"beta", o.beta}, {"alpha", o.alpha},
                                    {"tokens", o.tokens}, {"reps", o.reps}, {"warmup", o.warmup},
                                    {"seed", o.seed}, {"out", o.out}});
    if (o.reps < 1000) throw UsageError("--reps must be >= 1000");
    if (o.tokens == 0) throw UsageError("--tokens must be >= 1");
    if (o.beta == 0 || o.beta > std::min(o.d, o.h)) throw UsageError("need 1 <= beta <= min(d, h)");

    colin::Rng rng(o.seed);
    colin::ColinAdapter a = colin::ColinAdapter::zeros(o.d, o.h, o.beta, o.alpha);
    colin::svd_init(a, rng);
    // Distinct kernels and non-trivial biases so every path does real work.
    for (auto& k : a.kernels) k += colin::uniform_matrix(o.beta, o.beta, -0.1, 0.1, rng);
    a.b_down = colin::uniform_matrix(1, o.h, -0.1, 0.1, rng);
    a.b_up = colin::uniform_matrix(1, o.d, -0.1, 0.1, rng);
    const colin::Matrix x = colin::uniform_matrix(o.tokens, o.d, -1.0, 1.0, rng);
    const colin::FusedAdapter fused = colin::fuse(a);

    const colin::Matrix y_branch = colin::adapter_forward(a, x).y;
    const colin::Matrix y_compose = colin::fuse(a).forward(x);
    const colin::Matrix y_fused = fused.forward(x);
    const double diff = std::max(colin::max_abs_diff(y_branch, y_fused),
                                 colin::max_abs_diff(y_compose, y_fused));

    volatile double sink = 0.0;
    const Timing branch = time_calls([&] { sink = sink + colin::adapter_forward(a, x).y(0, 0); }, o.warmup, o.reps);
    const Timing compose = time_calls([&] { sink = sink + colin::fuse(a).forward(x)(0, 0); }, o.warmup, o.reps);
    const Timing dense = time_calls([&] { sink = sink + fused.forward(x)(0, 0); }, o.warmup, o.reps);

    const bool equivalent = diff <= 1e-10;
    json report{{"d", o.d}, {"h", o.h}, {"beta", o.beta}, {"alpha", o.alpha},
                {"tokens", o.tokens}, {"reps", o.reps},
                {"max_abs_diff", diff}, {"equivalent", equivalent},
                {"multi_branch_us", {{"median", branch.median_us}, {"p90", branch.p90_us}}},
                {"compose_per_call_us", {{"median", compose.median_us}, {"p90", compose.p90_us}}},
                {"fused_us", {{"median", dense.median_us}, {"p90", dense.p90_us}}},
                {"fused_faster_than_compose", dense.median_us <= compose.median_us},
                {"fused_faster_than_multi_branch", dense.median_us <= branch.median_us}};
    emit_json(report, o.out);
    return equivalent ? kExitOk : kExitRuntime;
}

// Splices `--key value` pairs from the JSON file named by --config in front of
// the user's own flags, so the later (command-line) occurrence wins.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    if (args.size() < 2) return args;
    std::optional<std::string> path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (!path) return args;

    json cfg;
    try {
        cfg = colin::read_json_file(*path);
    } catch (const std::exception& e) {
        throw UsageError(std::string("--config: ") + e.what());
    }
    if (!cfg.is_object()) throw UsageError("--config: top level must be an object");

    std::vector<std::string> injected;
    for (const auto& [key, value] : cfg.items()) {
        if (key == "command") continue;
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (value.is_boolean()) {
            if (value.get<bool>()) injected.push_back(flag);
            continue;
        }
        if (value.is_null()) continue;
        std::string text;
        if (value.is_array()) {
            for (const auto& v : value) {
                if (!text.empty()) text += ",";
                text += v.is_string() ? v.get<std::string>() : v.dump();
            }
        } else {
            text = value.is_string() ? value.get<std::string>() : value.dump();
        }
        injected.push_back(flag);
        injected.push_back(text);
    }
    args.insert(args.begin() + 2, injected.begin(), injected.end());
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"colin: multi-branch low-rank adapter experiments"};
    app.set_help_flag("--help", "Print this help message and exit");
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    SimulateOpts sim;
    GradcheckOpts gc;
    DeltaWOpts dw;
    TrainOpts tr;
    ParamsOpts pc;
    FuseOpts fu;
    InitOpts in;
    BenchOpts be;
    add_simulate(app, sim);
    add_gradcheck(app, gc);
    add_deltaw(app, dw);
    add_train(app, tr);
    add_params(app, pc);
    add_fuse(app, fu);
    add_init(app, in);
    add_bench(app, be);
    for (auto* sub : app.get_subcommands({}))
        sub->add_option("--config", "JSON file of flag values (flags override it)");

    try {
        std::vector<std::string> args(argv, argv + argc);
        args = expand_config(std::move(args));
        std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << std::endl;
        return kExitUsage;
    }

    try {
        if (app.got_subcommand("simulate")) return run_simulate(sim);
        if (app.got_subcommand("gradcheck")) return run_gradcheck(gc);
        if (app.got_subcommand("deltaw")) return run_deltaw(dw);
        if (app.got_subcommand("train-toy")) return run_train(tr);
        if (app.got_subcommand("params")) return run_params(pc);
        if (app.got_subcommand("fuse")) return run_fuse(fu);
        if (app.got_subcommand("init-adapter")) return run_init(in);
        if (app.got_subcommand("bench-fuse")) return run_bench(be);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << std::endl;
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitRuntime;
    }
    return kExitUsage;
}
