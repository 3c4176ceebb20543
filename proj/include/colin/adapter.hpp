#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "colin/matrix.hpp"
#include "colin/rng.hpp"

namespace colin {

inline constexpr double kDefaultOrthoLambda = 1e-4;
inline constexpr std::size_t kDwWidth = 3;

/// Exact GeLU, 0.5·z·(1 + erf(z/√2)).
double gelu(double z) noexcept;
/// d/dz GeLU(z) = Φ(z) + z·φ(z).
double gelu_grad(double z) noexcept;
Matrix gelu(const Matrix& z);

/// Pointer to a parameter (or its gradient) together with its field name.
struct NamedRef {
    std::string name;
    Matrix* value;
};
struct NamedConstRef {
    std::string name;
    const Matrix* value;
};

/// Multi-branch low-rank adapter with shared factors.
///
/// Both projections are composed from one pair of factors each and the α
/// branch kernels, which are shared between the two projections:
///   W_down = Σᵢ p_downᵀ · Kᵢ · q_down   (h×d)
///   W_up   = Σᵢ p_upᵀ   · Kᵢ · q_up     (d×h)
/// The block computes y = x + GeLU(DWConv(x·W_downᵀ + b_down))·W_upᵀ + b_up on a
/// tokens×d input, with the depth-wise convolution running along the token axis.
struct ColinAdapter {
    std::size_t d = 0;      // embed dimension
    std::size_t h = 0;      // hidden (projection) dimension
    std::size_t beta = 0;   // kernel size
    std::size_t alpha = 0;  // branch count
    double ortho_lambda = kDefaultOrthoLambda;

    Matrix p_down;  // β×h
    Matrix q_down;  // β×d
    Matrix p_up;    // β×d
    Matrix q_up;    // β×h
    std::vector<Matrix> kernels;  // α of β×β
    Matrix b_down;     // 1×h
    Matrix b_up;       // 1×d
    Matrix dw_kernel;  // h×3, taps for tokens t-1, t, t+1
    Matrix dw_bias;    // 1×h

    /// All factors, kernels and biases zero, depth-wise conv set to identity.
    static ColinAdapter zeros(std::size_t d, std::size_t h, std::size_t beta, std::size_t alpha);

    /// Throws ShapeError if any field disagrees with (d, h, beta, alpha) or
    /// if beta > min(d, h).
    void validate() const;

    Matrix w_down() const;
    Matrix w_up() const;

    /// Trainable fields in a fixed order: p_down, q_down, p_up, q_up,
    /// kernel.0 … kernel.{α-1}, b_down, b_up, dw_kernel, dw_bias.
    std::vector<NamedRef> parameters();
    std::vector<NamedConstRef> parameters() const;
    std::size_t parameter_count() const;
};

/// Activations kept by the forward pass for the backward pass.
struct AdapterCache {
    Matrix x;     // tokens×d input
    Matrix pre;   // tokens×h, x·W_downᵀ + b_down
    Matrix conv;  // tokens×h, depth-wise conv output (GeLU input)
    Matrix act;   // tokens×h, GeLU output
};

struct AdapterGradients {
    Matrix p_down, q_down, p_up, q_up;
    std::vector<Matrix> kernels;
    Matrix b_down, b_up, dw_kernel, dw_bias;
    Matrix d_input;  // tokens×d
    Matrix w_down;   // gradient w.r.t. the composed h×d weight
    Matrix w_up;     // gradient w.r.t. the composed d×h weight

    /// Zero gradients shaped like `a` (d_input left empty).
    static AdapterGradients zeros_like(const ColinAdapter& a);

    /// Same order as ColinAdapter::parameters().
    std::vector<NamedRef> parameters();
    std::vector<NamedConstRef> parameters() const;
};

/// Inference form: both projections collapsed to dense weights.
struct FusedAdapter {
    std::size_t d = 0;
    std::size_t h = 0;
    Matrix w_down;  // h×d
    Matrix w_up;    // d×h
    Matrix b_down, b_up, dw_kernel, dw_bias;

    Matrix forward(const Matrix& x) const;
};

struct AdapterOutput {
    Matrix y;
    AdapterCache cache;
};

/// Σᵢ pᵀ·Kᵢ·q for p: β×m, q: β×n, each Kᵢ β×β.
Matrix compose_weight(const Matrix& p, std::span<const Matrix> kernels, const Matrix& q);

struct ComposeGradients {
    Matrix p;
    Matrix q;
    std::vector<Matrix> kernels;
};

/// Pulls a gradient on the composed weight back onto its factors.
ComposeGradients compose_weight_backward(const Matrix& p, std::span<const Matrix> kernels,
                                         const Matrix& q, const Matrix& grad_w);

/// Per-channel width-3 convolution over the token axis, zero padded.
Matrix depthwise_conv(const Matrix& x, const Matrix& kernel, const Matrix& bias);

/// Forward through the branch factors: each branch is applied in its
/// low-rank form and the branch outputs are summed.
AdapterOutput adapter_forward(const ColinAdapter& adapter, const Matrix& x);

/// Exact gradients of a scalar loss with upstream gradient `d_y`.
AdapterGradients adapter_backward(const ColinAdapter& adapter, const AdapterCache& cache,
                                  const Matrix& d_y);

/// Forward through the dense weights of `fused`, keeping activations; y and
/// cache match adapter_forward on the adapter it was fused from.
AdapterOutput fused_forward(const FusedAdapter& fused, const Matrix& x);

/// Gradients w.r.t. the dense weights (w_down, w_up), biases, conv and input.
/// Factor and kernel fields are left empty; see pull_back_factors.
AdapterGradients fused_backward(const FusedAdapter& fused, const AdapterCache& cache,
                                const Matrix& d_y);

/// Fills g's p/q/kernel fields from its dense w_down/w_up gradients. Kernel
/// gradients sum the down and up contributions.
void pull_back_factors(const ColinAdapter& adapter, AdapterGradients& g);

struct OrthoLoss {
    double loss = 0.0;
    Matrix p_down, q_down, p_up, q_up;
};

/// Σ over the four factors F of ‖F·Fᵀ − I_β‖_F², with gradients 4(FFᵀ − I)F.
OrthoLoss orthogonal_loss(const ColinAdapter& adapter);

/// ‖F·Fᵀ − I‖_F² and its gradient for a single factor.
double gram_penalty(const Matrix& f, Matrix* grad = nullptr);

struct CompositeLoss {
    double total = 0.0;
    double ortho = 0.0;  // unweighted Σ of orthogonal losses
    std::vector<AdapterGradients> grads;
};

/// total = task_loss + λ · Σ orthogonal_loss(adapters[i]); the orthogonal
/// gradients are added onto copies of task_grads.
CompositeLoss composite_loss(double task_loss, std::span<const AdapterGradients> task_grads,
                             std::span<const ColinAdapter* const> adapters, double lambda);

/// Truncated-SVD initialization. Each projection draws a kaiming-uniform
/// target (h×d for down, d×h for up) and takes the leading β left/right
/// singular vectors as p/q rows. Kernels become diag of the down target's top β
/// singular values. Biases are zeroed and the conv reset to identity.
void svd_init(ColinAdapter& adapter, Rng& rng);

/// Plain random init: kaiming-uniform p/q, every kernel 1e-2·I.
void random_factor_init(ColinAdapter& adapter, Rng& rng);

FusedAdapter fuse(const ColinAdapter& adapter);

/// Reduced fraction; `den` is always positive.
struct Fraction {
    std::int64_t num = 0;
    std::int64_t den = 1;
    double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Fraction&, const Fraction&) = default;
};

struct ParamCount {
    std::uint64_t colin = 0;          // γβ(m+n) + αβ²
    std::uint64_t factor_params = 0;  // γβ(m+n)
    std::uint64_t kernel_params = 0;  // αβ²
    std::uint64_t dense_baseline = 0; // γmn
    Fraction reduction;               // 1 − colin/dense
    Fraction factor_reduction;        // 1 − factors/dense, kernels excluded
};

/// New-parameter count of γ composed m×n projections against γ dense ones,
/// biases excluded. Reductions are exact and may be negative.
ParamCount param_count(std::size_t m, std::size_t n, std::size_t beta, std::size_t alpha,
                       std::size_t gamma);

}  // namespace colin
