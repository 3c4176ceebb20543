// Acceptance gate: one PASS/FAIL line per criterion.
//   colin_acceptance            run all ten
//   colin_acceptance 1 4 7      run a subset
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "colin/adapter.hpp"
#include "colin/backbone.hpp"
#include "colin/gradcheck.hpp"
#include "colin/linalg.hpp"
#include "colin/simulate.hpp"
#include "oracles.hpp"

#ifndef COLIN_CLI_PATH
#error "COLIN_CLI_PATH must point at the colin executable"
#endif

namespace fs = std::filesystem;
using colin::Matrix;
using colin::Rng;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-5;
constexpr double kFuseTol = 1e-10;
constexpr double kRatioLo = 0.4, kRatioHi = 0.6;
constexpr double kBoundC = 1.5;
constexpr double kOrthoInitTol = 1e-16;
constexpr double kSvdTol = 1e-8;

struct Outcome {
    bool pass = false;
    std::string detail;
};

void progress(const std::string& msg) { std::cerr << "  " << msg << '\n'; }

// Shared between criteria 5 and 6, and 8 and 9.
std::optional<colin::sim::SimRun> g_sim5000;
std::optional<colin::toy::AblationResult> g_ablation;

const colin::sim::SimRun& sim5000() {
    if (!g_sim5000) g_sim5000 = colin::sim::run_sim(colin::sim::SimConfig{}, 0, progress);
    return *g_sim5000;
}

const colin::toy::AblationResult& ablation() {
    if (!g_ablation) g_ablation = colin::toy::run_ablation({}, {}, {}, 10, 0, progress);
    return *g_ablation;
}

Outcome c1_param_count() {
    const auto pc = colin::param_count(384, 768, 8, 1, 1);
    const colin::Fraction want{31, 32};
    return {pc.factor_reduction == want,
            fmt::format("factor reduction {}/{} = {} (kernels add {} params, full reduction {}/{})",
                        pc.factor_reduction.num, pc.factor_reduction.den, pc.factor_reduction.value(),
                        pc.kernel_params, pc.reduction.num, pc.reduction.den)};
}

Outcome c2_gradients() {
    double worst = 0.0, worst_ortho = 0.0;
    bool ok = true;
    const auto cfgs = colin::check::standard_adapter_configs();
    for (const auto& cfg : cfgs) {
        const auto rep = colin::check::check_adapter(cfg, kGradTol);
        ok = ok && rep.passed && rep.max_rel_error <= kGradTol;
        worst = std::max(worst, rep.max_rel_error);

        // Orthogonal-loss gradients on their own.
        colin::ColinAdapter a = oracle::random_adapter(cfg.d, cfg.h, cfg.beta, cfg.alpha, cfg.seed);
        const colin::OrthoLoss ol = colin::orthogonal_loss(a);
        const colin::NamedRef refs[] = {{"p_down", &a.p_down}, {"q_down", &a.q_down}, {"p_up", &a.p_up}, {"q_up", &a.q_up}};
        const auto numeric = colin::check::fd_gradient([&] { return colin::orthogonal_loss(a).loss; }, refs);
        const colin::NamedConstRef analytic[] = {{"p_down", &ol.p_down}, {"q_down", &ol.q_down}, {"p_up", &ol.p_up}, {"q_up", &ol.q_up}};
        const auto orep = colin::check::compare(analytic, numeric, kGradTol);
        ok = ok && orep.passed;
        worst_ortho = std::max(worst_ortho, orep.max_rel_error);
    }
    return {ok, fmt::format("{} configurations, worst relative error {:.3e} (adapter + input), {:.3e} (orthogonal loss alone), tol {:.0e}",
                            cfgs.size(), worst, worst_ortho, kGradTol)};
}

Outcome c3_fusion() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t d = 6 + seed % 7, h = 3 + seed % 6;
        const std::size_t beta = 1 + seed % std::min(d, h), alpha = 1 + seed % 4;
        const colin::ColinAdapter a = oracle::random_adapter(d, h, beta, alpha, 1000 + seed);
        const colin::FusedAdapter f = colin::fuse(a);
        Rng rng(2000 + seed);
        for (int i = 0; i < 16; ++i) {
            const Matrix x = oracle::random_matrix(1 + i % 5, d, rng, 2.0);
            worst = std::max(worst, oracle::max_abs_diff(colin::adapter_forward(a, x).y, f.forward(x)));
        }
    }
    return {worst <= kFuseTol, fmt::format("20 adapters x 16 inputs, max |diff| {:.3e} (tol {:.0e})", worst, kFuseTol)};
}

Outcome c4_delta_w() {
    const std::vector<double> etas{1e-3, 5e-4, 2.5e-4};
    bool ok = true;
    double rmin = 1.0, rmax = 0.0, worst_c = 0.0, worst_ideal = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto rep = colin::check::delta_w_experiment(8, 3, 10, etas, seed, colin::check::FactorInit::random);
        for (double r : rep.ratios) {
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            ok = ok && r >= kRatioLo && r <= kRatioHi;
        }
        for (const auto& p : rep.points) {
            const double c = p.abs_residual / p.bound;
            worst_c = std::max(worst_c, c);
            ok = ok && c <= kBoundC;
        }
        const auto sq = colin::check::delta_w_experiment(6, 6, 6, etas, seed, colin::check::FactorInit::orthonormal);
        for (const auto& p : sq.points) {
            worst_ideal = std::max(worst_ideal, p.ideal_residual / p.bound);
            ok = ok && p.ideal_residual <= p.bound && p.ideal_residual <= 2.0 * p.eta * p.grad_w_norm;
        }
    }
    return {ok, fmt::format("ratios in [{:.4f}, {:.4f}], max residual/bound {:.3f}, square case max |dW+2eta*gW|/bound {:.3f}",
                            rmin, rmax, worst_c, worst_ideal)};
}

Outcome c5_simulation() {
    const auto& s = sim5000().summary;
    return {s.final_mean_with_ol < s.final_mean_without_ol,
            fmt::format("n=5000, 20 seeds: final mean loss with OL {:.6f}, without OL {:.6f}, gap {:.4f}",
                        s.final_mean_with_ol, s.final_mean_without_ol, s.final_gap)};
}

Outcome c6_size_gap() {
    // Pass/fail compares n = 500 with n = 5000; n = 2000 is reported for the trend.
    colin::sim::SimConfig cfg;
    std::vector<colin::sim::SizeGap> gaps;
    for (std::size_t n : {500, 2000}) {
        cfg.n = n;
        gaps.push_back(colin::sim::gap_of(colin::sim::run_sim(cfg, 0, progress).summary, n));
    }
    gaps.push_back(colin::sim::gap_of(sim5000().summary, 5000));
    std::string detail;
    for (const auto& g : gaps)
        detail += fmt::format("{}gap({}) = {:.6f} (OL {:.6f} / no OL {:.6f})", detail.empty() ? "" : ", ", g.n,
                              g.gap, g.mean_with_ol, g.mean_without_ol);
    return {gaps.back().gap > gaps.front().gap, detail};
}

Outcome c7_svd_init() {
    double worst_ortho = 0.0;
    struct Shape { std::size_t d, h, beta, alpha; };
    for (const Shape s : {Shape{64, 16, 8, 4}, Shape{768, 100, 28, 4}, Shape{12, 8, 4, 3}, Shape{5, 9, 5, 1}}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto a = colin::ColinAdapter::zeros(s.d, s.h, s.beta, s.alpha);
            Rng rng(seed);
            colin::svd_init(a, rng);
            worst_ortho = std::max(worst_ortho, colin::orthogonal_loss(a).loss);
        }
    }

    double worst_svd = 0.0;
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.next_u64() % 16, n = 1 + rng.next_u64() % 16;
        Matrix a = oracle::random_matrix(m, n, rng, 2.0);
        if (trial % 4 == 0 && m > 2) {
            for (std::size_t j = 0; j < n; ++j) a(m - 1, j) = a(0, j) - a(1, j);
        }
        const auto f = colin::svd(a);
        const Matrix back = oracle::matmul(oracle::matmul(f.u, Matrix::diagonal(f.s)), oracle::transpose(f.v));
        worst_svd = std::max(worst_svd, oracle::max_abs_diff(back, a));
        const std::size_t r = f.s.size();
        worst_svd = std::max(worst_svd, oracle::max_abs_diff(oracle::matmul(oracle::transpose(f.u), f.u), Matrix::identity(r)));
        worst_svd = std::max(worst_svd, oracle::max_abs_diff(oracle::matmul(oracle::transpose(f.v), f.v), Matrix::identity(r)));
        for (std::size_t i = 1; i < r; ++i)
            if (f.s[i] > f.s[i - 1] || f.s[i] < 0.0) worst_svd = 1.0;
    }
    return {worst_ortho <= kOrthoInitTol && worst_svd <= kSvdTol,
            fmt::format("max orthogonal loss after init {:.3e} (tol {:.0e}), max SVD invariant error {:.3e} (tol {:.0e})",
                        worst_ortho, kOrthoInitTol, worst_svd, kSvdTol)};
}

Outcome c8_ablation() {
    const auto& r = ablation();
    return {r.ol_svd.mean <= r.no_ol.mean,
            fmt::format("10 seeds, mean final task loss: no OL {:.6f}, +OL {:.6f}, +OL+SVD init {:.6f}, head only {:.6f}",
                        r.no_ol.mean, r.ol.mean, r.ol_svd.mean, r.frozen.mean)};
}

Outcome c9_freezing() {
    const auto& r = ablation();
    return {r.frozen_preserved, fmt::format("frozen parameters bit-identical across {} training runs: {}",
                                            4 * r.no_ol.final_task_loss.size(), r.frozen_preserved ? "yes" : "no")};
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        out[fs::relative(e.path(), dir).string()] =
            std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return out;
}

Outcome c10_determinism() {
    const fs::path work = fs::temp_directory_path() / fmt::format("colin_accept_{}", std::chrono::steady_clock::now().time_since_epoch().count());
    const std::string cli = COLIN_CLI_PATH;
    const std::vector<std::string> commands{
        "simulate --m 20 --k 5 --n 40 --lr 1e-3 --iters 50 --seeds 3 --out sim",
        "simulate --m 20 --k 5 --iters 30 --seeds 2 --sizes 10,40 --out sizes",
        "gradcheck --out gradcheck.json",
        "deltaw --out deltaw.json",
        "deltaw --m 8 --k 3 --n 10 --seed 4 --out deltaw_rect.json",
        "train-toy --steps 25 --out toy.csv --save-adapter adapter.json",
        "params --m 384 --n 768 --beta 8 --alpha 1",
        "init-adapter --d 12 --h 8 --beta 4 --alpha 3 --seed 2 --out init.json",
        "fuse --in init.json --out fused.json",
    };

    std::vector<std::map<std::string, std::string>> runs;
    for (int rep = 0; rep < 2; ++rep) {
        fs::remove_all(work);
        fs::create_directories(work);
        for (std::size_t i = 0; i < commands.size(); ++i) {
            const std::string line = fmt::format("cd '{}' && '{}' {} > stdout_{}.txt 2> /dev/null", work.string(), cli,
                                                 commands[i], i);
            if (std::system(line.c_str()) != 0) {
                fs::remove_all(work);
                return {false, "command failed: colin " + commands[i]};
            }
        }
        runs.push_back(read_tree(work));
    }
    fs::remove_all(work);

    std::vector<std::string> differ;
    for (const auto& [name, bytes] : runs[0]) {
        auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != bytes) differ.push_back(name);
    }
    if (runs[0].size() != runs[1].size()) differ.push_back("(file sets differ)");
    std::string list;
    for (const auto& d : differ) list += " " + d;
    return {differ.empty(), differ.empty()
                                ? fmt::format("{} commands twice, {} output files byte-identical", commands.size(), runs[0].size())
                                : "differing outputs:" + list};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"parameter-reduction arithmetic", c1_param_count},
        {"gradient oracle suite", c2_gradients},
        {"fusion equivalence", c3_fusion},
        {"first-order update identity", c4_delta_w},
        {"factorization convergence with vs without OL", c5_simulation},
        {"OL gap grows with n", c6_size_gap},
        {"SVD-init orthogonality", c7_svd_init},
        {"ablation ordering", c8_ablation},
        {"freezing contract", c9_freezing},
        {"CLI determinism", c10_determinism},
    };

    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!wanted.empty() && !wanted.contains(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << fmt::format("criterion {:2d} {}: {} ({:.1f} s)\n", id, o.pass ? "PASS" : "FAIL",
                                 criteria[i].first, secs)
                  << "    " << o.detail << std::endl;
        failed += o.pass ? 0 : 1;
    }
    std::cout << (failed == 0 ? "all criteria passed" : fmt::format("{} criteria failed", failed)) << std::endl;
    return failed == 0 ? 0 : 1;
}
