#include "colin/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "colin/error.hpp"
#include "colin/linalg.hpp"

namespace colin {

namespace {

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError("adapter field " + name + " has shape " + m.shape_str() + ", expected (" +
                         std::to_string(rows) + "x" + std::to_string(cols) + ")");
    }
}

Matrix kernel_sum(std::span<const Matrix> kernels, std::size_t beta) {
    Matrix s(beta, beta);
    for (const auto& k : kernels) s += k;
    return s;
}

void check_factors(const Matrix& p, std::span<const Matrix> kernels, const Matrix& q,
                   const char* op) {
    const std::size_t beta = p.rows();
    if (q.rows() != beta) {
        throw ShapeError(std::string(op) + ": factor ranks differ, p " + p.shape_str() + " q " +
                         q.shape_str());
    }
    if (kernels.empty()) throw ShapeError(std::string(op) + ": no kernels");
    for (const auto& k : kernels) {
        if (k.rows() != beta || k.cols() != beta) {
            throw ShapeError(std::string(op) + ": kernel " + k.shape_str() + " with beta " +
                             std::to_string(beta));
        }
    }
}

// Σᵢ ((x·qᵀ)·Kᵢᵀ)·p, i.e. x·(Σᵢ pᵀKᵢq)ᵀ evaluated branch by branch.
Matrix branch_project(const Matrix& x, const Matrix& p, std::span<const Matrix> kernels,
                      const Matrix& q) {
    const Matrix z = matmul_nt(x, q);
    Matrix out(x.rows(), p.cols());
    for (const auto& k : kernels) out += matmul(matmul_nt(z, k), p);
    return out;
}

Matrix dense_path(const Matrix& x, const Matrix& w_down, const Matrix& w_up, const Matrix& b_down,
                  const Matrix& b_up, const Matrix& dw_kernel, const Matrix& dw_bias) {
    Matrix pre = matmul_nt(x, w_down);
    add_row_broadcast(pre, b_down);
    Matrix y = matmul_nt(gelu(depthwise_conv(pre, dw_kernel, dw_bias)), w_up);
    add_row_broadcast(y, b_up);
    y += x;
    return y;
}

}  // namespace

double gelu(double z) noexcept { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double gelu_grad(double z) noexcept {
    const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + z * pdf;
}

Matrix gelu(const Matrix& z) {
    Matrix out = z;
    for (auto& v : out.data()) v = gelu(v);
    return out;
}

ColinAdapter ColinAdapter::zeros(std::size_t d, std::size_t h, std::size_t beta,
                                 std::size_t alpha) {
    ColinAdapter a;
    a.d = d;
    a.h = h;
    a.beta = beta;
    a.alpha = alpha;
    a.p_down = Matrix(beta, h);
    a.q_down = Matrix(beta, d);
    a.p_up = Matrix(beta, d);
    a.q_up = Matrix(beta, h);
    a.kernels.assign(alpha, Matrix(beta, beta));
    a.b_down = Matrix(1, h);
    a.b_up = Matrix(1, d);
    a.dw_kernel = Matrix(h, kDwWidth);
    for (std::size_t c = 0; c < h; ++c) a.dw_kernel(c, 1) = 1.0;
    a.dw_bias = Matrix(1, h);
    a.validate();
    return a;
}

void ColinAdapter::validate() const {
    if (d == 0 || h == 0 || beta == 0 || alpha == 0) {
        throw ShapeError("adapter dimensions must be positive");
    }
    if (beta > std::min(d, h)) {
        throw ShapeError("adapter beta " + std::to_string(beta) + " exceeds min(d, h) = " +
                         std::to_string(std::min(d, h)));
    }
    require_shape(p_down, beta, h, "p_down");
    require_shape(q_down, beta, d, "q_down");
    require_shape(p_up, beta, d, "p_up");
    require_shape(q_up, beta, h, "q_up");
    if (kernels.size() != alpha) {
        throw ShapeError("adapter has " + std::to_string(kernels.size()) + " kernels, alpha is " +
                         std::to_string(alpha));
    }
    for (std::size_t i = 0; i < alpha; ++i)
        require_shape(kernels[i], beta, beta, "kernel." + std::to_string(i));
    require_shape(b_down, 1, h, "b_down");
    require_shape(b_up, 1, d, "b_up");
    require_shape(dw_kernel, h, kDwWidth, "dw_kernel");
    require_shape(dw_bias, 1, h, "dw_bias");
}

Matrix ColinAdapter::w_down() const { return compose_weight(p_down, kernels, q_down); }
Matrix ColinAdapter::w_up() const { return compose_weight(p_up, kernels, q_up); }

std::vector<NamedRef> ColinAdapter::parameters() {
    std::vector<NamedRef> out{{"p_down", &p_down}, {"q_down", &q_down}, {"p_up", &p_up},
                              {"q_up", &q_up}};
    for (std::size_t i = 0; i < kernels.size(); ++i)
        out.push_back({"kernel." + std::to_string(i), &kernels[i]});
    out.push_back({"b_down", &b_down});
    out.push_back({"b_up", &b_up});
    out.push_back({"dw_kernel", &dw_kernel});
    out.push_back({"dw_bias", &dw_bias});
    return out;
}

std::vector<NamedConstRef> ColinAdapter::parameters() const {
    std::vector<NamedConstRef> out;
    for (auto& r : const_cast<ColinAdapter*>(this)->parameters()) out.push_back({r.name, r.value});
    return out;
}

std::size_t ColinAdapter::parameter_count() const {
    std::size_t n = 0;
    for (const auto& r : parameters()) n += r.value->size();
    return n;
}

AdapterGradients AdapterGradients::zeros_like(const ColinAdapter& a) {
    AdapterGradients g;
    g.p_down = Matrix(a.beta, a.h);
    g.q_down = Matrix(a.beta, a.d);
    g.p_up = Matrix(a.beta, a.d);
    g.q_up = Matrix(a.beta, a.h);
    g.kernels.assign(a.alpha, Matrix(a.beta, a.beta));
    g.b_down = Matrix(1, a.h);
    g.b_up = Matrix(1, a.d);
    g.dw_kernel = Matrix(a.h, kDwWidth);
    g.dw_bias = Matrix(1, a.h);
    g.w_down = Matrix(a.h, a.d);
    g.w_up = Matrix(a.d, a.h);
    return g;
}

std::vector<NamedRef> AdapterGradients::parameters() {
    std::vector<NamedRef> out{{"p_down", &p_down}, {"q_down", &q_down}, {"p_up", &p_up},
                              {"q_up", &q_up}};
    for (std::size_t i = 0; i < kernels.size(); ++i)
        out.push_back({"kernel." + std::to_string(i), &kernels[i]});
    out.push_back({"b_down", &b_down});
    out.push_back({"b_up", &b_up});
    out.push_back({"dw_kernel", &dw_kernel});
    out.push_back({"dw_bias", &dw_bias});
    return out;
}

std::vector<NamedConstRef> AdapterGradients::parameters() const {
    std::vector<NamedConstRef> out;
    for (auto& r : const_cast<AdapterGradients*>(this)->parameters())
        out.push_back({r.name, r.value});
    return out;
}

Matrix FusedAdapter::forward(const Matrix& x) const {
    if (x.cols() != d) {
        throw ShapeError("fused adapter expects " + std::to_string(d) + " features, got " +
                         x.shape_str());
    }
    return dense_path(x, w_down, w_up, b_down, b_up, dw_kernel, dw_bias);
}

Matrix compose_weight(const Matrix& p, std::span<const Matrix> kernels, const Matrix& q) {
    check_factors(p, kernels, q, "compose_weight");
    return matmul_tn(p, matmul(kernel_sum(kernels, p.rows()), q));
}

ComposeGradients compose_weight_backward(const Matrix& p, std::span<const Matrix> kernels,
                                         const Matrix& q, const Matrix& grad_w) {
    check_factors(p, kernels, q, "compose_weight_backward");
    if (grad_w.rows() != p.cols() || grad_w.cols() != q.cols()) {
        throw ShapeError("compose_weight_backward: gradient " + grad_w.shape_str() +
                         " does not match composed (" + std::to_string(p.cols()) + "x" +
                         std::to_string(q.cols()) + ")");
    }
    const Matrix ksum = kernel_sum(kernels, p.rows());
    ComposeGradients g;
    const Matrix pg = matmul(p, grad_w);           // β×n
    g.p = matmul(ksum, matmul_nt(q, grad_w));      // Σ Kᵢ q Gᵀ
    g.q = matmul_tn(ksum, pg);                     // Σ Kᵢᵀ p G
    const Matrix dk = matmul_nt(pg, q);            // p G qᵀ, same for every branch
    g.kernels.assign(kernels.size(), dk);
    return g;
}

Matrix depthwise_conv(const Matrix& x, const Matrix& kernel, const Matrix& bias) {
    if (kernel.rows() != x.cols() || kernel.cols() != kDwWidth) {
        throw ShapeError("depthwise_conv: kernel " + kernel.shape_str() + " for input " +
                         x.shape_str());
    }
    const std::size_t tokens = x.rows(), channels = x.cols();
    Matrix out(tokens, channels);
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t c = 0; c < channels; ++c) {
            double acc = bias(0, c) + kernel(c, 1) * x(t, c);
            if (t > 0) acc += kernel(c, 0) * x(t - 1, c);
            if (t + 1 < tokens) acc += kernel(c, 2) * x(t + 1, c);
            out(t, c) = acc;
        }
    }
    return out;
}

AdapterOutput adapter_forward(const ColinAdapter& adapter, const Matrix& x) {
    if (x.cols() != adapter.d) {
        throw ShapeError("adapter_forward: adapter expects " + std::to_string(adapter.d) +
                         " features, input is " + x.shape_str());
    }
    AdapterOutput out;
    auto& c = out.cache;
    c.x = x;
    c.pre = branch_project(x, adapter.p_down, adapter.kernels, adapter.q_down);
    add_row_broadcast(c.pre, adapter.b_down);
    c.conv = depthwise_conv(c.pre, adapter.dw_kernel, adapter.dw_bias);
    c.act = gelu(c.conv);
    out.y = branch_project(c.act, adapter.p_up, adapter.kernels, adapter.q_up);
    add_row_broadcast(out.y, adapter.b_up);
    out.y += x;
    return out;
}

AdapterOutput fused_forward(const FusedAdapter& fused, const Matrix& x) {
    if (x.cols() != fused.d) {
        throw ShapeError("fused_forward: adapter expects " + std::to_string(fused.d) +
                         " features, input is " + x.shape_str());
    }
    AdapterOutput out;
    auto& c = out.cache;
    c.x = x;
    c.pre = matmul_nt(x, fused.w_down);
    add_row_broadcast(c.pre, fused.b_down);
    c.conv = depthwise_conv(c.pre, fused.dw_kernel, fused.dw_bias);
    c.act = gelu(c.conv);
    out.y = matmul_nt(c.act, fused.w_up);
    add_row_broadcast(out.y, fused.b_up);
    out.y += x;
    return out;
}

AdapterGradients fused_backward(const FusedAdapter& fused, const AdapterCache& cache,
                                const Matrix& d_y) {
    const std::size_t tokens = cache.x.rows();
    if (cache.x.cols() != fused.d || cache.pre.rows() != tokens || cache.pre.cols() != fused.h ||
        cache.act.cols() != fused.h) {
        throw ShapeError("adapter backward: cache does not belong to this adapter");
    }
    if (d_y.rows() != tokens || d_y.cols() != fused.d) {
        throw ShapeError("adapter backward: upstream gradient " + d_y.shape_str() +
                         " for output (" + std::to_string(tokens) + "x" +
                         std::to_string(fused.d) + ")");
    }

    AdapterGradients g;
    g.b_up = column_sums(d_y);
    g.w_up = matmul_tn(d_y, cache.act);  // d×h
    Matrix d_conv = matmul(d_y, fused.w_up);
    for (std::size_t i = 0; i < d_conv.size(); ++i)
        d_conv.data()[i] *= gelu_grad(cache.conv.data()[i]);

    g.dw_bias = column_sums(d_conv);
    g.dw_kernel = Matrix(fused.h, kDwWidth);
    Matrix d_pre(tokens, fused.h);
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t ch = 0; ch < fused.h; ++ch) {
            const double dc = d_conv(t, ch);
            g.dw_kernel(ch, 1) += dc * cache.pre(t, ch);
            d_pre(t, ch) += fused.dw_kernel(ch, 1) * dc;
            if (t > 0) {
                g.dw_kernel(ch, 0) += dc * cache.pre(t - 1, ch);
                d_pre(t - 1, ch) += fused.dw_kernel(ch, 0) * dc;
            }
            if (t + 1 < tokens) {
                g.dw_kernel(ch, 2) += dc * cache.pre(t + 1, ch);
                d_pre(t + 1, ch) += fused.dw_kernel(ch, 2) * dc;
            }
        }
    }

    g.b_down = column_sums(d_pre);
    g.w_down = matmul_tn(d_pre, cache.x);  // h×d
    g.d_input = d_y;
    g.d_input += matmul(d_pre, fused.w_down);
    return g;
}

void pull_back_factors(const ColinAdapter& adapter, AdapterGradients& g) {
    ComposeGradients down =
        compose_weight_backward(adapter.p_down, adapter.kernels, adapter.q_down, g.w_down);
    ComposeGradients up = compose_weight_backward(adapter.p_up, adapter.kernels, adapter.q_up, g.w_up);
    g.p_down = std::move(down.p);
    g.q_down = std::move(down.q);
    g.p_up = std::move(up.p);
    g.q_up = std::move(up.q);
    g.kernels = std::move(down.kernels);
    for (std::size_t i = 0; i < g.kernels.size(); ++i) g.kernels[i] += up.kernels[i];
}

AdapterGradients adapter_backward(const ColinAdapter& adapter, const AdapterCache& cache,
                                  const Matrix& d_y) {
    AdapterGradients g = fused_backward(fuse(adapter), cache, d_y);
    pull_back_factors(adapter, g);
    return g;
}

double gram_penalty(const Matrix& f, Matrix* grad) {
    Matrix gram = matmul_nt(f, f);
    for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) -= 1.0;
    if (grad != nullptr) *grad = 4.0 * matmul(gram, f);
    return frobenius_norm_sq(gram);
}

OrthoLoss orthogonal_loss(const ColinAdapter& adapter) {
    OrthoLoss o;
    o.loss = gram_penalty(adapter.p_down, &o.p_down) + gram_penalty(adapter.q_down, &o.q_down) +
             gram_penalty(adapter.p_up, &o.p_up) + gram_penalty(adapter.q_up, &o.q_up);
    return o;
}

CompositeLoss composite_loss(double task_loss, std::span<const AdapterGradients> task_grads,
                             std::span<const ColinAdapter* const> adapters, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("composite_loss: lambda must be >= 0");
    if (task_grads.size() != adapters.size()) {
        throw ShapeError("composite_loss: " + std::to_string(task_grads.size()) +
                         " gradient sets for " + std::to_string(adapters.size()) + " adapters");
    }
    CompositeLoss out;
    out.grads.assign(task_grads.begin(), task_grads.end());
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const OrthoLoss o = orthogonal_loss(*adapters[i]);
        out.ortho += o.loss;
        if (lambda == 0.0) continue;
        auto& g = out.grads[i];
        axpy(lambda, o.p_down, g.p_down);
        axpy(lambda, o.q_down, g.q_down);
        axpy(lambda, o.p_up, g.p_up);
        axpy(lambda, o.q_up, g.q_up);
    }
    out.total = task_loss + lambda * out.ortho;
    return out;
}

void svd_init(ColinAdapter& adapter, Rng& rng) {
    adapter.validate();
    const std::size_t beta = adapter.beta;

    // Leading β singular vectors as factor rows.
    auto leading_rows = [beta](const Matrix& vecs) {
        Matrix out(beta, vecs.rows());
        for (std::size_t r = 0; r < beta; ++r)
            for (std::size_t i = 0; i < vecs.rows(); ++i) out(r, i) = vecs(i, r);
        return out;
    };

    const SvdResult down = svd(kaiming_uniform(adapter.h, adapter.d, rng));
    adapter.p_down = leading_rows(down.u);
    adapter.q_down = leading_rows(down.v);
    const Matrix k0 = Matrix::diagonal(std::span<const double>(down.s).first(beta));
    adapter.kernels.assign(adapter.alpha, k0);

    const SvdResult up = svd(kaiming_uniform(adapter.d, adapter.h, rng));
    adapter.p_up = leading_rows(up.u);
    adapter.q_up = leading_rows(up.v);

    adapter.b_down.fill(0.0);
    adapter.b_up.fill(0.0);
    adapter.dw_bias.fill(0.0);
    adapter.dw_kernel.fill(0.0);
    for (std::size_t c = 0; c < adapter.h; ++c) adapter.dw_kernel(c, 1) = 1.0;
}

void random_factor_init(ColinAdapter& adapter, Rng& rng) {
    adapter.validate();
    adapter.p_down = kaiming_uniform(adapter.beta, adapter.h, rng);
    adapter.q_down = kaiming_uniform(adapter.beta, adapter.d, rng);
    adapter.p_up = kaiming_uniform(adapter.beta, adapter.d, rng);
    adapter.q_up = kaiming_uniform(adapter.beta, adapter.h, rng);
    adapter.kernels.assign(adapter.alpha, 1e-2 * Matrix::identity(adapter.beta));
    adapter.b_down.fill(0.0);
    adapter.b_up.fill(0.0);
    adapter.dw_bias.fill(0.0);
    adapter.dw_kernel.fill(0.0);
    for (std::size_t c = 0; c < adapter.h; ++c) adapter.dw_kernel(c, 1) = 1.0;
}

FusedAdapter fuse(const ColinAdapter& adapter) {
    adapter.validate();
    FusedAdapter f;
    f.d = adapter.d;
    f.h = adapter.h;
    f.w_down = adapter.w_down();
    f.w_up = adapter.w_up();
    f.b_down = adapter.b_down;
    f.b_up = adapter.b_up;
    f.dw_kernel = adapter.dw_kernel;
    f.dw_bias = adapter.dw_bias;
    return f;
}

namespace {

Fraction reduced(std::int64_t num, std::int64_t den) {
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    return g == 0 ? Fraction{0, 1} : Fraction{num / g, den / g};
}

}  // namespace

ParamCount param_count(std::size_t m, std::size_t n, std::size_t beta, std::size_t alpha,
                       std::size_t gamma) {
    if (m == 0 || n == 0 || beta == 0 || alpha == 0 || gamma == 0) {
        throw std::invalid_argument("param_count: all counts must be >= 1");
    }
    ParamCount pc;
    pc.factor_params = gamma * beta * (m + n);
    pc.kernel_params = alpha * beta * beta;
    pc.colin = pc.factor_params + pc.kernel_params;
    pc.dense_baseline = gamma * m * n;
    const auto dense = static_cast<std::int64_t>(pc.dense_baseline);
    pc.reduction = reduced(dense - static_cast<std::int64_t>(pc.colin), dense);
    pc.factor_reduction = reduced(dense - static_cast<std::int64_t>(pc.factor_params), dense);
    return pc;
}

}  // namespace colin
