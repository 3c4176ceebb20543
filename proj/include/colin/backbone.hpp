#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "colin/adapter.hpp"
#include "colin/matrix.hpp"
#include "colin/rng.hpp"

namespace colin::toy {

/// Attention-free block: linear token mixer and MLP, each with a residual
/// connection, and one adapter after each residual.
///
///   z1  = x  + r·(x·mixer_wᵀ + mixer_b)
///   u1  = z1 + s·(adapter_1(z1) − z1)
///   z2  = u1 + r·(GeLU(u1·mlp_w1ᵀ + mlp_b1)·mlp_w2ᵀ + mlp_b2)
///   out = z2 + s·(adapter_2(z2) − z2)
///
/// r (residual_scale) and s (adapter_scale) are fixed model constants.
/// Every weight is stored out×in.
struct ToyBlock {
    Matrix mixer_w, mixer_b;  // d×d, 1×d
    Matrix mlp_w1, mlp_b1;    // 4d×d, 1×4d
    Matrix mlp_w2, mlp_b2;    // d×4d, 1×d
    ColinAdapter adapter_1;
    ColinAdapter adapter_2;
};

/// θ_F frozen backbone, θ_T trainable head, θ_A adapters; Ω = θ_A ∪ θ_T.
struct ParamPartition {
    std::vector<NamedRef> theta_f;
    std::vector<NamedRef> theta_t;
    std::vector<NamedRef> theta_a;

    std::vector<NamedRef> omega() const;
    std::size_t count(std::span<const NamedRef> refs) const;
    std::size_t frozen_count() const { return count(theta_f); }
    std::size_t trainable_count() const { return count(theta_t) + count(theta_a); }
    std::size_t adapter_count() const { return count(theta_a); }
};

enum class AdapterInit { svd, random, zero };

struct ModelConfig {
    std::size_t blocks = 2;
    std::size_t d = 16;
    std::size_t h = 8;
    std::size_t beta = 4;
    std::size_t alpha = 4;
    AdapterInit init = AdapterInit::svd;
    bool adapters_enabled = true;
    double adapter_scale = 0.03;  // s in u = z + s·(adapter(z) − z); frozen
    double residual_scale = 0.5;  // r in z = h + r·sublayer(h); frozen
};

/// Backbone, then mean-pool over tokens, then a linear head d→d.
struct ToyModel {
    std::size_t d = 0;
    std::vector<ToyBlock> blocks;
    Matrix head_w;  // d×d
    Matrix head_b;  // 1×d
    bool adapters_enabled = true;
    double adapter_scale = 1.0;
    double residual_scale = 1.0;

    /// Prediction for one tokens×d input, 1×d.
    Matrix forward(const Matrix& x) const;

    std::vector<const ColinAdapter*> adapters() const;
    std::vector<ColinAdapter*> adapters();

    /// Views into this model; invalidated if the model is moved or resized.
    /// θ_A is empty when adapters are disabled.
    ParamPartition partition();
};

/// Frozen weights kaiming-uniform (biases uniform on ±1/√fan_in), head
/// kaiming-uniform with zero bias, adapters per cfg.init.
ToyModel build_toy_model(const ModelConfig& cfg, Rng& rng);

struct Dataset {
    std::vector<Matrix> inputs;   // tokens×d
    std::vector<Matrix> targets;  // 1×d
    std::size_t size() const { return inputs.size(); }
};

struct TaskConfig {
    std::size_t d = 16;
    std::size_t samples = 64;
    std::size_t tokens = 8;
    std::size_t teacher_hidden = 32;
    double teacher_scale = 1.0;
    bool identity_teacher = false;
};

/// Inputs uniform on ±√3 (unit variance). Targets come from a hidden
/// per-token residual MLP followed by mean pooling:
///   y = mean_t(x_t + s·GeLU(x_t·T1ᵀ)·T2ᵀ)
/// With identity_teacher the MLP is dropped and y = mean_t(x_t).
Dataset make_synthetic_task(const TaskConfig& cfg, Rng& rng);

struct TargetStats {
    double mean = 0.0;
    double variance = 0.0;  // population variance over every target entry
};
TargetStats target_stats(const Dataset& data);

/// Mean over samples of ‖f(x) − y‖² / d.
double evaluate(const ToyModel& model, const Dataset& data);

/// Gradients for Ω: head first, then two adapters per block in order.
struct ToyGradients {
    double loss = 0.0;
    Matrix head_w, head_b;
    std::vector<AdapterGradients> adapters;

    /// Aligned with ToyModel::partition().omega().
    std::vector<NamedRef> omega();
};

/// Task loss over `indices` (all samples when empty) and its Ω gradients.
ToyGradients loss_and_gradients(const ToyModel& model, const Dataset& data,
                                std::span<const std::size_t> indices = {});

struct TrainConfig {
    double lr = 0.05;
    double lambda = kDefaultOrthoLambda;
    std::size_t steps = 500;
    std::size_t batch = 0;  // 0 = full batch
    std::uint64_t seed = 1;
    double momentum = 0.0;

    void validate() const;
};

struct TrainingTrace {
    std::vector<double> task_loss;   // L₀ on the step's batch, before the update
    std::vector<double> ortho_loss;  // unweighted Σ orthogonal losses
    std::vector<double> total_loss;  // L₀ + λ·L_ort
    double final_task_loss = 0.0;    // full dataset, after the last update
};

/// Gradient descent on Ω only. Throws DivergenceError on a non-finite loss.
TrainingTrace train(ToyModel& model, const ParamPartition& partition, const Dataset& data,
                    const TrainConfig& cfg);

/// header `step,task_loss,ortho_loss,total_loss`
void write_trace_csv(std::ostream& out, const TrainingTrace& trace);

struct AblationArm {
    std::string name;
    std::vector<double> final_task_loss;  // per seed
    double mean = 0.0;
};

struct AblationResult {
    AblationArm no_ol;       // random factor init, λ = 0
    AblationArm ol;          // random factor init, λ = cfg.lambda
    AblationArm ol_svd;      // SVD init, λ = cfg.lambda
    AblationArm frozen;      // adapters disabled, head only
    bool frozen_preserved = true;  // θ_F bit-identical in every run
};

/// Runs each arm on seeds base_seed … base_seed+seeds−1. Within a seed all arms
/// share the frozen backbone, head init and dataset.
AblationResult run_ablation(const ModelConfig& model_cfg, const TaskConfig& task_cfg,
                            const TrainConfig& train_cfg, std::size_t seeds,
                            std::uint64_t base_seed = 0,
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace colin::toy
