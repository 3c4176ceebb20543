#include "colin/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <ostream>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "colin/error.hpp"
#include "colin/linalg.hpp"
#include "colin/rng.hpp"

namespace colin::sim {

void SimConfig::validate() const {
    if (m == 0 || k == 0 || n == 0) throw std::invalid_argument("sim: m, k, n must be >= 1");
    if (k > std::min(m, n)) {
        throw std::invalid_argument(fmt::format("sim: k = {} exceeds min(m, n) = {}", k, std::min(m, n)));
    }
    if (!(lr > 0.0)) throw std::invalid_argument("sim: lr must be > 0");
    if (iters == 0) throw std::invalid_argument("sim: iters must be >= 1");
    if (seeds == 0) throw std::invalid_argument("sim: seeds must be >= 1");
    if (record_every == 0) throw std::invalid_argument("sim: record_every must be >= 1");
    if (!(ol_weight >= 0.0)) throw std::invalid_argument("sim: ol_weight must be >= 0");
}

const char* arm_name(Arm arm) noexcept { return arm == Arm::with_ol ? "with_OL" : "without_OL"; }

SimProblem draw_problem(const SimConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    SimProblem p;
    p.target = kaiming_uniform(cfg.m, cfg.n, rng);
    p.p = kaiming_uniform(cfg.k, cfg.m, rng);
    p.q = kaiming_uniform(cfg.k, cfg.n, rng);
    return p;
}

SimTrace run_from(const SimConfig& cfg, SimProblem problem, bool with_ol, std::uint64_t seed) {
    cfg.validate();
    auto& [target, p, q] = problem;
    if (target.rows() != cfg.m || target.cols() != cfg.n || p.rows() != cfg.k ||
        p.cols() != cfg.m || q.rows() != cfg.k || q.cols() != cfg.n) {
        throw ShapeError("sim: problem shapes do not match the config");
    }

    SimTrace trace;
    trace.arm = with_ol ? Arm::with_ol : Arm::without_ol;
    trace.seed = seed;

    // Buffers reused across iterations.
    Matrix residual(cfg.m, cfg.n);
    Matrix grad_p(cfg.k, cfg.m), grad_q(cfg.k, cfg.n);
    Matrix gram_p(cfg.k, cfg.k), gram_q(cfg.k, cfg.k);
    const double ol = with_ol ? cfg.ol_weight : 0.0;

    for (std::size_t t = 0; t < cfg.iters; ++t) {
        residual = target;
        gemm(-1.0, p, Trans::yes, q, Trans::no, 1.0, residual);  // E = W − PᵀQ
        const double loss = frobenius_norm(residual);
        if (!std::isfinite(loss)) {
            throw DivergenceError(fmt::format("sim: non-finite loss at iteration {} ({}, seed {})",
                                              t, arm_name(trace.arm), seed),
                                  t);
        }
        if (t % cfg.record_every == 0 || t + 1 == cfg.iters) {
            trace.iters.push_back(t);
            trace.losses.push_back(loss);
        }
        // ∇_P ‖E‖² = −2·Q·Eᵀ, ∇_Q ‖E‖² = −2·P·E
        gemm(-2.0, q, Trans::no, residual, Trans::yes, 0.0, grad_p);
        gemm(-2.0, p, Trans::no, residual, Trans::no, 0.0, grad_q);
        if (ol != 0.0) {
            // + ol · 4(FFᵀ − I)F for each factor
            gemm(1.0, p, Trans::no, p, Trans::yes, 0.0, gram_p);
            gemm(1.0, q, Trans::no, q, Trans::yes, 0.0, gram_q);
            for (std::size_t i = 0; i < cfg.k; ++i) {
                gram_p(i, i) -= 1.0;
                gram_q(i, i) -= 1.0;
            }
            gemm(4.0 * ol, gram_p, Trans::no, p, Trans::no, 1.0, grad_p);
            gemm(4.0 * ol, gram_q, Trans::no, q, Trans::no, 1.0, grad_q);
        }
        axpy(-cfg.lr, grad_p, p);
        axpy(-cfg.lr, grad_q, q);
    }
    return trace;
}

SimTrace run_sim_single(const SimConfig& cfg, std::uint64_t seed, bool with_ol) {
    cfg.validate();
    return run_from(cfg, draw_problem(cfg, seed), with_ol, seed);
}

SimSummary summarize(const std::vector<SimTrace>& traces) {
    if (traces.empty()) throw std::invalid_argument("summarize: no traces");
    SimSummary s;
    s.iters = traces.front().iters;
    const std::size_t points = s.iters.size();

    auto aggregate = [&](Arm arm, ArmStats& stats) {
        std::size_t count = 0;
        stats.mean.assign(points, 0.0);
        stats.min.assign(points, 0.0);
        stats.max.assign(points, 0.0);
        for (const auto& tr : traces) {
            if (tr.arm != arm) continue;
            if (tr.iters != s.iters) {
                throw std::invalid_argument("summarize: traces use different iteration grids");
            }
            for (std::size_t i = 0; i < points; ++i) {
                const double v = tr.losses[i];
                stats.mean[i] += v;
                stats.min[i] = count == 0 ? v : std::min(stats.min[i], v);
                stats.max[i] = count == 0 ? v : std::max(stats.max[i], v);
            }
            ++count;
        }
        if (count == 0) stats = {};
        for (auto& v : stats.mean) v /= static_cast<double>(count);
        return count;
    };
    const std::size_t n_ol = aggregate(Arm::with_ol, s.with_ol);
    const std::size_t n_no = aggregate(Arm::without_ol, s.without_ol);
    if (points > 0) {
        if (n_ol > 0) s.final_mean_with_ol = s.with_ol.mean.back();
        if (n_no > 0) s.final_mean_without_ol = s.without_ol.mean.back();
        if (n_ol > 0 && n_no > 0 && s.final_mean_without_ol != 0.0) {
            s.final_gap =
                (s.final_mean_without_ol - s.final_mean_with_ol) / s.final_mean_without_ol;
        }
    }
    return s;
}

SimRun run_sim(const SimConfig& cfg, unsigned threads, const Progress& progress) {
    cfg.validate();
    const std::size_t jobs = 2 * cfg.seeds;
    std::vector<SimTrace> traces(jobs);
    std::vector<std::exception_ptr> errors(jobs);

    auto run_job = [&](std::size_t j) {
        const bool with_ol = j < cfg.seeds;
        const std::uint64_t seed = cfg.base_seed + j % cfg.seeds;
        try {
            traces[j] = run_sim_single(cfg, seed, with_ol);
            if (progress) {
                progress(fmt::format("sim n={} {} seed {} final loss {:.6f}", cfg.n,
                                     arm_name(traces[j].arm), seed, traces[j].final_loss()));
            }
        } catch (...) {
            errors[j] = std::current_exception();
        }
    };

    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, jobs));
    if (threads <= 1) {
        for (std::size_t j = 0; j < jobs; ++j) run_job(j);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t j = w; j < jobs; j += threads) run_job(j);
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    SimRun run;
    run.summary = summarize(traces);
    run.traces = std::move(traces);
    return run;
}

SizeGap gap_of(const SimSummary& summary, std::size_t n) {
    return SizeGap{n, summary.final_gap, summary.final_mean_with_ol,
                   summary.final_mean_without_ol};
}

std::vector<SizeGap> compare_sizes(const SimConfig& base, const std::vector<std::size_t>& n_values,
                                   unsigned threads, const Progress& progress) {
    std::vector<SizeGap> out;
    for (std::size_t n : n_values) {
        if (n < base.k) {
            throw std::invalid_argument(fmt::format("compare_sizes: n = {} below k = {}", n, base.k));
        }
        SimConfig cfg = base;
        cfg.n = n;
        out.push_back(gap_of(run_sim(cfg, threads, progress).summary, n));
    }
    return out;
}

void write_trace_csv(std::ostream& out, const std::vector<SimTrace>& traces) {
    out << "arm,seed,iter,loss\n";
    for (const auto& tr : traces)
        for (std::size_t i = 0; i < tr.iters.size(); ++i)
            out << fmt::format("{},{},{},{}\n", arm_name(tr.arm), tr.seed, tr.iters[i],
                               tr.losses[i]);
}

void write_summary_csv(std::ostream& out, const SimSummary& s) {
    out << "iter,arm,mean,min,max\n";
    for (std::size_t i = 0; i < s.iters.size(); ++i) {
        for (Arm arm : {Arm::with_ol, Arm::without_ol}) {
            const ArmStats& st = arm == Arm::with_ol ? s.with_ol : s.without_ol;
            if (st.mean.empty()) continue;
            out << fmt::format("{},{},{},{},{}\n", s.iters[i], arm_name(arm), st.mean[i],
                               st.min[i], st.max[i]);
        }
    }
}

}  // namespace colin::sim
