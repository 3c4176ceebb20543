#include "colin/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "colin/linalg.hpp"
#include "colin/rng.hpp"

namespace colin::check {

double relative_error(double analytic, double numeric) noexcept {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
    return std::abs(analytic - numeric) / denom;
}

std::vector<Matrix> fd_gradient(const std::function<double()>& f, std::span<const NamedRef> params,
                                double step) {
    std::vector<Matrix> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        Matrix g(p.value->rows(), p.value->cols());
        auto values = p.value->data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            const double h = step * std::max(1.0, std::abs(saved));
            values[i] = saved + h;
            const double up = f();
            values[i] = saved - h;
            const double down = f();
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw std::domain_error("fd_gradient: non-finite evaluation at " + p.name + "[" +
                                        std::to_string(i) + "]");
            }
            g.data()[i] = (up - down) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& theta,
                   double step) {
    Matrix work = theta;
    const std::vector<NamedRef> refs{{"theta", &work}};
    return fd_gradient([&] { return f(work); }, refs, step).front();
}

FdReport compare(std::span<const NamedConstRef> analytic, std::span<const Matrix> numeric,
                 double tolerance, double step) {
    if (analytic.size() != numeric.size()) {
        throw std::invalid_argument("compare: analytic and numeric lists differ in length");
    }
    FdReport report;
    report.step = step;
    report.tolerance = tolerance;
    for (std::size_t p = 0; p < analytic.size(); ++p) {
        const Matrix& a = *analytic[p].value;
        const Matrix& n = numeric[p];
        if (!a.same_shape(n)) {
            throw std::invalid_argument("compare: shape mismatch for " + analytic[p].name);
        }
        FdEntry e;
        e.name = analytic[p].name;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double rel = relative_error(a.data()[i], n.data()[i]);
            e.max_abs_error = std::max(e.max_abs_error, std::abs(a.data()[i] - n.data()[i]));
            if (rel > e.max_rel_error) {
                e.max_rel_error = rel;
                e.worst_index = i;
            }
        }
        e.passed = e.max_rel_error <= tolerance;
        report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
        report.passed = report.passed && e.passed;
        report.entries.push_back(std::move(e));
    }
    return report;
}

FdReport check_adapter(const AdapterCheckConfig& cfg, double tolerance) {
    Rng rng(cfg.seed);
    ColinAdapter a = ColinAdapter::zeros(cfg.d, cfg.h, cfg.beta, cfg.alpha);
    a.p_down = kaiming_uniform(cfg.beta, cfg.h, rng);
    a.q_down = kaiming_uniform(cfg.beta, cfg.d, rng);
    a.p_up = kaiming_uniform(cfg.beta, cfg.d, rng);
    a.q_up = kaiming_uniform(cfg.beta, cfg.h, rng);
    for (auto& k : a.kernels) k = uniform_matrix(cfg.beta, cfg.beta, -1.0, 1.0, rng);
    a.b_down = uniform_matrix(1, cfg.h, -0.5, 0.5, rng);
    a.b_up = uniform_matrix(1, cfg.d, -0.5, 0.5, rng);
    a.dw_kernel = uniform_matrix(cfg.h, kDwWidth, -1.0, 1.0, rng);
    a.dw_bias = uniform_matrix(1, cfg.h, -0.5, 0.5, rng);
    Matrix x = uniform_matrix(cfg.tokens, cfg.d, -1.0, 1.0, rng);
    const Matrix upstream = uniform_matrix(cfg.tokens, cfg.d, -1.0, 1.0, rng);

    auto objective = [&] {
        double v = inner(upstream, adapter_forward(a, x).y);
        if (cfg.lambda != 0.0) v += cfg.lambda * orthogonal_loss(a).loss;
        return v;
    };

    const AdapterOutput out = adapter_forward(a, x);
    AdapterGradients g = adapter_backward(a, out.cache, upstream);
    if (cfg.lambda != 0.0) {
        const ColinAdapter* ptr = &a;
        g = composite_loss(0.0, std::span(&g, 1), std::span(&ptr, 1), cfg.lambda).grads.front();
    }

    std::vector<NamedRef> params = a.parameters();
    params.push_back({"input", &x});
    std::vector<NamedConstRef> analytic = std::as_const(g).parameters();
    analytic.push_back({"input", &g.d_input});

    const std::vector<Matrix> numeric = fd_gradient(objective, params);
    return compare(analytic, numeric, tolerance);
}

std::vector<AdapterCheckConfig> standard_adapter_configs() {
    return {
        {8, 6, 3, 2, 4, 5, 0.0},   {12, 8, 4, 3, 4, 1, 0.0},  {4, 4, 2, 1, 1, 2, 0.0},
        {10, 5, 4, 2, 3, 3, 0.5},  {6, 8, 3, 3, 2, 4, 0.0},   {12, 4, 4, 1, 4, 6, 1.0},
        {7, 7, 1, 3, 4, 7, 0.0},   {9, 6, 2, 2, 3, 8, 0.25},  {12, 8, 4, 3, 2, 9, 0.1},
        {5, 3, 3, 2, 4, 10, 0.0},
    };
}

FactorProblem draw_factor_problem(std::size_t m, std::size_t k, std::size_t n, std::uint64_t seed,
                                  FactorInit init) {
    if (k == 0 || k > std::min(m, n)) {
        throw std::invalid_argument("factor problem needs 1 <= k <= min(m, n)");
    }
    Rng rng(seed);
    FactorProblem prob;
    switch (init) {
        case FactorInit::orthonormal:
            prob.p = random_orthonormal(m, k, rng);  // PᵀP = I_k
            prob.q = random_orthonormal(k, n, rng);  // QQᵀ = I_k
            prob.target = kaiming_uniform(m, n, rng);
            break;
        case FactorInit::random:
        case FactorInit::planted:
            prob.p = kaiming_uniform(m, k, rng);
            prob.q = kaiming_uniform(k, n, rng);
            prob.target = init == FactorInit::planted ? matmul(prob.p, prob.q)
                                                      : kaiming_uniform(m, n, rng);
            break;
    }
    return prob;
}

DeltaWPoint delta_w_point(const FactorProblem& prob, double eta) {
    const Matrix& p = prob.p;
    const Matrix& q = prob.q;
    const Matrix w = matmul(p, q);
    const Matrix grad_w = w - prob.target;     // ∇_W of ½‖PQ − T‖²
    const Matrix grad_p = matmul_nt(grad_w, q);  // ∇_W Qᵀ
    const Matrix grad_q = matmul_tn(p, grad_w);  // Pᵀ ∇_W

    const Matrix p_next = p - eta * grad_p;
    const Matrix q_next = q - eta * grad_q;
    const Matrix delta = matmul(p_next, q_next) - w;

    Matrix predicted = matmul(grad_w, matmul_tn(q, q)) + matmul(matmul_nt(p, p), grad_w);
    predicted *= -eta;

    DeltaWPoint pt;
    pt.eta = eta;
    pt.delta_norm = frobenius_norm(delta);
    pt.abs_residual = frobenius_norm(delta - predicted);
    pt.residual = pt.delta_norm == 0.0 ? 0.0 : pt.abs_residual / pt.delta_norm;
    pt.grad_w_norm = frobenius_norm(grad_w);
    pt.grad_p_norm = frobenius_norm(grad_p);
    pt.grad_q_norm = frobenius_norm(grad_q);
    pt.second_order = eta * eta * frobenius_norm(matmul(grad_p, grad_q));
    pt.bound = eta * eta * pt.grad_p_norm * pt.grad_q_norm;
    pt.ideal_residual = frobenius_norm(delta + 2.0 * eta * grad_w);
    return pt;
}

DeltaWReport delta_w_experiment(std::size_t m, std::size_t k, std::size_t n,
                                const std::vector<double>& eta_list, std::uint64_t seed,
                                FactorInit init) {
    if (eta_list.empty()) throw std::invalid_argument("delta_w_experiment: empty eta list");
    DeltaWReport report;
    report.m = m;
    report.k = k;
    report.n = n;
    report.seed = seed;
    report.init = init;
    const FactorProblem prob = draw_factor_problem(m, k, n, seed, init);
    for (double eta : eta_list) report.points.push_back(delta_w_point(prob, eta));

    for (std::size_t i = 0; i + 1 < report.points.size(); ++i) {
        const double r0 = report.points[i].residual;
        report.ratios.push_back(r0 == 0.0 ? 0.0 : report.points[i + 1].residual / r0);
    }

    // Least squares of log r on log η over points with r > 0.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t cnt = 0;
    for (const auto& pt : report.points) {
        if (pt.residual <= 0.0 || pt.eta <= 0.0) continue;
        const double lx = std::log(pt.eta), ly = std::log(pt.residual);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++cnt;
    }
    const double denom = static_cast<double>(cnt) * sxx - sx * sx;
    report.slope = cnt >= 2 && denom != 0.0 ? (static_cast<double>(cnt) * sxy - sx * sy) / denom : 0.0;
    return report;
}

namespace {

double half_sq_loss(const Matrix& p, const Matrix& q, const Matrix& target) {
    return 0.5 * frobenius_norm_sq(matmul(p, q) - target);
}

EfficiencyCase efficiency_case(const Matrix& p, const Matrix& q, const Matrix& target, double eta) {
    const Matrix grad_w = matmul(p, q) - target;
    const Matrix grad_p = matmul_nt(grad_w, q);
    const Matrix grad_q = matmul_tn(p, grad_w);
    EfficiencyCase c;
    c.d_loss = half_sq_loss(p - eta * grad_p, q - eta * grad_q, target) - half_sq_loss(p, q, target);
    const Matrix direction = matmul(grad_w, matmul_tn(q, q)) + matmul(matmul_nt(p, p), grad_w);
    c.first_order = -eta * inner(grad_w, direction);
    c.identity_residual = std::abs(c.d_loss - c.first_order);
    c.ideal = -2.0 * eta * frobenius_norm_sq(grad_w);
    return c;
}

}  // namespace

EfficiencyProbe orthogonality_efficiency_probe(std::size_t m, std::size_t k, std::size_t n,
                                               std::uint64_t seed, double eta) {
    const FactorProblem prob = draw_factor_problem(m, k, n, seed, FactorInit::orthonormal);
    EfficiencyProbe probe;
    probe.eta = eta;
    probe.grad_w_norm_sq = frobenius_norm_sq(matmul(prob.p, prob.q) - prob.target);
    probe.orthonormal = efficiency_case(prob.p, prob.q, prob.target, eta);
    probe.ill_conditioned = efficiency_case(10.0 * prob.p, 0.1 * prob.q, prob.target, eta);
    return probe;
}

}  // namespace colin::check
