#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "colin/adapter.hpp"
#include "colin/matrix.hpp"

namespace colin::check {

inline constexpr double kFdStep = 1e-6;
inline constexpr double kRelFloor = 1e-8;

/// |a − n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric) noexcept;

/// Central differences (f(θ + hᵢeᵢ) − f(θ − hᵢeᵢ)) / 2hᵢ over every entry of
/// every parameter, with hᵢ = step · max(1, |θᵢ|). Parameters are perturbed in
/// place and restored bit-exactly. A non-finite evaluation throws
/// std::domain_error naming the parameter and flat coordinate.
std::vector<Matrix> fd_gradient(const std::function<double()>& f, std::span<const NamedRef> params,
                                double step = kFdStep);

/// Single-matrix convenience form for analytic test functions.
Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& theta,
                   double step = kFdStep);

struct FdEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    bool passed = true;
};

struct FdReport {
    std::vector<FdEntry> entries;
    double step = kFdStep;
    double tolerance = 0.0;
    double max_rel_error = 0.0;
    bool passed = true;
};

FdReport compare(std::span<const NamedConstRef> analytic, std::span<const Matrix> numeric,
                 double tolerance, double step = kFdStep);

/// Shape of one randomized adapter gradient check.
struct AdapterCheckConfig {
    std::size_t d = 8;
    std::size_t h = 6;
    std::size_t beta = 3;
    std::size_t alpha = 2;
    std::size_t tokens = 4;
    std::uint64_t seed = 5;
    double lambda = 0.0;  // weight of the orthogonal loss folded into the objective
};

/// Random adapter (all fields random, including biases and conv taps), random
/// input and random upstream weights R; objective ⟨R, y⟩ + λ·L_ort. Checks
/// every trainable field plus the input gradient against fd_gradient.
FdReport check_adapter(const AdapterCheckConfig& cfg, double tolerance = 1e-5);

/// The ten seeded shapes used by the acceptance gate (d≤12, h≤8, β≤4, α≤3, ≤4 tokens).
std::vector<AdapterCheckConfig> standard_adapter_configs();

/// Initial factor layout for the ΔW experiments.
enum class FactorInit {
    random,       // kaiming-uniform P, Q and target
    orthonormal,  // P with orthonormal columns, Q with orthonormal rows
    planted,      // random P, Q with target = P·Q (zero gradient)
};

/// One gradient step on W = P·Q, P ∈ ℝ^{m×k}, Q ∈ ℝ^{k×n}, loss ½‖PQ − T‖_F².
struct DeltaWPoint {
    double eta = 0.0;
    double residual = 0.0;         // ‖ΔW − pred‖ / ‖ΔW‖ with pred = −η(∇W·QᵀQ + PPᵀ·∇W)
    double abs_residual = 0.0;     // ‖ΔW − pred‖
    double second_order = 0.0;     // η²‖∇P·∇Q‖, what the residual should equal
    double bound = 0.0;            // η²‖∇P‖‖∇Q‖
    double ideal_residual = 0.0;   // ‖ΔW + 2η∇W‖, the scaled-gradient form
    double delta_norm = 0.0;       // ‖ΔW‖
    double grad_w_norm = 0.0;      // ‖∇W‖
    double grad_p_norm = 0.0;
    double grad_q_norm = 0.0;
};

struct DeltaWReport {
    std::size_t m = 0, k = 0, n = 0;
    std::uint64_t seed = 0;
    FactorInit init = FactorInit::random;
    std::vector<DeltaWPoint> points;    // in eta_list order
    std::vector<double> ratios;         // residual[i+1] / residual[i]
    double slope = 0.0;                 // least-squares slope of log r vs log η
};

struct FactorProblem {
    Matrix p, q, target;
};

FactorProblem draw_factor_problem(std::size_t m, std::size_t k, std::size_t n, std::uint64_t seed,
                                  FactorInit init);

DeltaWPoint delta_w_point(const FactorProblem& prob, double eta);

DeltaWReport delta_w_experiment(std::size_t m, std::size_t k, std::size_t n,
                                const std::vector<double>& eta_list, std::uint64_t seed,
                                FactorInit init = FactorInit::random);

struct EfficiencyCase {
    double d_loss = 0.0;          // L(P′, Q′) − L(P, Q)
    double first_order = 0.0;     // −η·tr(∇Wᵀ(∇W·QᵀQ + PPᵀ·∇W))
    double identity_residual = 0.0;  // |d_loss − first_order|
    double ideal = 0.0;           // −2η‖∇W‖²
};

struct EfficiencyProbe {
    double eta = 0.0;
    double grad_w_norm_sq = 0.0;
    EfficiencyCase orthonormal;
    EfficiencyCase ill_conditioned;  // P·10, Q·0.1: same product, same ∇W
};

EfficiencyProbe orthogonality_efficiency_probe(std::size_t m, std::size_t k, std::size_t n,
                                               std::uint64_t seed, double eta);

}  // namespace colin::check
