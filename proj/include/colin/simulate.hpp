#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "colin/matrix.hpp"

namespace colin::sim {

/// Gradient-descent approximation of a random m×n target by PᵀQ,
/// P ∈ ℝ^{k×m}, Q ∈ ℝ^{k×n}.
struct SimConfig {
    std::size_t m = 100;
    std::size_t k = 30;
    std::size_t n = 5000;
    double lr = 1e-5;
    std::size_t iters = 2000;
    std::size_t seeds = 20;
    double ol_weight = 1.0;
    std::size_t record_every = 1;
    std::uint64_t base_seed = 0;  // seeds run base_seed, base_seed+1, …

    void validate() const;
};

enum class Arm { with_ol, without_ol };
const char* arm_name(Arm arm) noexcept;

/// Approximation loss ‖W − PᵀQ‖_F, recorded at the start of iteration
/// `iters[i]` (before that iteration's update). The last iteration is always
/// recorded.
struct SimTrace {
    Arm arm = Arm::with_ol;
    std::uint64_t seed = 0;
    std::vector<std::size_t> iters;
    std::vector<double> losses;

    double final_loss() const { return losses.back(); }
};

struct ArmStats {
    std::vector<double> mean, min, max;
};

struct SimSummary {
    std::vector<std::size_t> iters;
    ArmStats with_ol;
    ArmStats without_ol;
    double final_mean_with_ol = 0.0;
    double final_mean_without_ol = 0.0;
    /// (mean_noOL − mean_OL) / mean_noOL at the last recorded iteration.
    double final_gap = 0.0;
};

struct SimRun {
    std::vector<SimTrace> traces;  // ordered by (arm, seed), with_ol first
    SimSummary summary;
};

/// Starting point of one run.
struct SimProblem {
    Matrix target;  // m×n
    Matrix p;       // k×m
    Matrix q;       // k×n
};

/// Draws W, then P, then Q, all kaiming-uniform, from one stream seeded by `seed`.
SimProblem draw_problem(const SimConfig& cfg, std::uint64_t seed);

/// Runs gradient descent from an explicit starting point.
SimTrace run_from(const SimConfig& cfg, SimProblem problem, bool with_ol, std::uint64_t seed = 0);

SimTrace run_sim_single(const SimConfig& cfg, std::uint64_t seed, bool with_ol);

/// Mean/min/max per recorded iteration. Traces must share the same iteration grid.
SimSummary summarize(const std::vector<SimTrace>& traces);

using Progress = std::function<void(const std::string&)>;

/// Both arms over cfg.seeds paired seeds. `threads` = 0 picks the hardware
/// concurrency; the result does not depend on it.
SimRun run_sim(const SimConfig& cfg, unsigned threads = 0, const Progress& progress = {});

struct SizeGap {
    std::size_t n = 0;
    double gap = 0.0;
    double mean_with_ol = 0.0;
    double mean_without_ol = 0.0;
};

SizeGap gap_of(const SimSummary& summary, std::size_t n);

std::vector<SizeGap> compare_sizes(const SimConfig& base, const std::vector<std::size_t>& n_values,
                                   unsigned threads = 0, const Progress& progress = {});

/// header `arm,seed,iter,loss`
void write_trace_csv(std::ostream& out, const std::vector<SimTrace>& traces);
/// header `iter,arm,mean,min,max`
void write_summary_csv(std::ostream& out, const SimSummary& summary);

}  // namespace colin::sim
