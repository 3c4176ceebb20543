#include "colin/backbone.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

#include "colin/error.hpp"
#include "colin/linalg.hpp"

namespace colin::toy {

namespace {

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul_nt(x, w);
    add_row_broadcast(y, b);
    return y;
}

Matrix mean_rows(const Matrix& x) {
    Matrix m = column_sums(x);
    m *= 1.0 / static_cast<double>(x.rows());
    return m;
}

void init_adapter(ColinAdapter& a, AdapterInit init, Rng& rng) {
    switch (init) {
        case AdapterInit::svd: svd_init(a, rng); break;
        case AdapterInit::random: random_factor_init(a, rng); break;
        case AdapterInit::zero: break;
    }
}

Matrix bias_uniform(std::size_t n, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_matrix(1, n, -bound, bound, rng);
}

// Dense-weight gradients summed over samples; factors are pulled back once
// per step.
void accumulate_dense(AdapterGradients& into, const AdapterGradients& g) {
    into.w_down += g.w_down;
    into.w_up += g.w_up;
    into.b_down += g.b_down;
    into.b_up += g.b_up;
    into.dw_kernel += g.dw_kernel;
    into.dw_bias += g.dw_bias;
}

// z + s·(adapter(z) − z)
Matrix scaled_adapter(const FusedAdapter& a, const Matrix& z, double s, AdapterCache* cache) {
    AdapterOutput o = fused_forward(a, z);
    if (cache) *cache = std::move(o.cache);
    if (s == 1.0) return std::move(o.y);
    Matrix u = z;
    axpy(s, o.y - z, u);
    return u;
}

// Backward of scaled_adapter: parameters see s·du, the input sees
// (1 − s)·du plus the adapter's own input gradient.
Matrix scaled_adapter_backward(const FusedAdapter& a, const AdapterCache& cache, const Matrix& du,
                               double s, AdapterGradients& into) {
    AdapterGradients ag = fused_backward(a, cache, s == 1.0 ? du : s * du);
    accumulate_dense(into, ag);
    if (s == 1.0) return std::move(ag.d_input);
    axpy(1.0 - s, du, ag.d_input);
    return std::move(ag.d_input);
}

// GeLU and its derivative with one erf and one exp per entry.
void gelu_and_grad(const Matrix& z, Matrix& act, Matrix& grad) {
    act = Matrix(z.rows(), z.cols());
    grad = Matrix(z.rows(), z.cols());
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double v = z.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        act.data()[i] = v * cdf;
        grad.data()[i] = cdf + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
    }
}

struct BlockCache {
    AdapterCache a1, a2;
    Matrix mlp_act;   // tokens×4d, GeLU output
    Matrix mlp_dact;  // tokens×4d, GeLU derivative at the same points
};

}  // namespace

std::vector<NamedRef> ParamPartition::omega() const {
    std::vector<NamedRef> out = theta_t;
    out.insert(out.end(), theta_a.begin(), theta_a.end());
    return out;
}

std::size_t ParamPartition::count(std::span<const NamedRef> refs) const {
    std::size_t n = 0;
    for (const auto& r : refs) n += r.value->size();
    return n;
}

Matrix ToyModel::forward(const Matrix& x) const {
    if (x.cols() != d) throw ShapeError("toy model expects " + std::to_string(d) + " features");
    Matrix h = x;
    for (const auto& b : blocks) {
        const FusedAdapter f1 = adapters_enabled ? fuse(b.adapter_1) : FusedAdapter{};
        const FusedAdapter f2 = adapters_enabled ? fuse(b.adapter_2) : FusedAdapter{};
        Matrix z1 = h;
        axpy(residual_scale, linear(h, b.mixer_w, b.mixer_b), z1);
        Matrix u1 = adapters_enabled ? scaled_adapter(f1, z1, adapter_scale, nullptr) : std::move(z1);
        Matrix z2 = u1;
        axpy(residual_scale, linear(gelu(linear(u1, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2), z2);
        h = adapters_enabled ? scaled_adapter(f2, z2, adapter_scale, nullptr) : std::move(z2);
    }
    return linear(mean_rows(h), head_w, head_b);
}

std::vector<const ColinAdapter*> ToyModel::adapters() const {
    std::vector<const ColinAdapter*> out;
    for (const auto& b : blocks) {
        out.push_back(&b.adapter_1);
        out.push_back(&b.adapter_2);
    }
    return out;
}

std::vector<ColinAdapter*> ToyModel::adapters() {
    std::vector<ColinAdapter*> out;
    for (auto& b : blocks) {
        out.push_back(&b.adapter_1);
        out.push_back(&b.adapter_2);
    }
    return out;
}

ParamPartition ToyModel::partition() {
    ParamPartition p;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        p.theta_f.push_back({pre + "mixer_w", &b.mixer_w});
        p.theta_f.push_back({pre + "mixer_b", &b.mixer_b});
        p.theta_f.push_back({pre + "mlp_w1", &b.mlp_w1});
        p.theta_f.push_back({pre + "mlp_b1", &b.mlp_b1});
        p.theta_f.push_back({pre + "mlp_w2", &b.mlp_w2});
        p.theta_f.push_back({pre + "mlp_b2", &b.mlp_b2});
        if (!adapters_enabled) continue;
        for (auto [name, a] : {std::pair{"adapter_1.", &b.adapter_1}, {"adapter_2.", &b.adapter_2}})
            for (auto& r : a->parameters()) p.theta_a.push_back({pre + name + r.name, r.value});
    }
    p.theta_t.push_back({"head_w", &head_w});
    p.theta_t.push_back({"head_b", &head_b});
    return p;
}

ToyModel build_toy_model(const ModelConfig& cfg, Rng& rng) {
    if (cfg.blocks == 0 || cfg.d == 0) throw ShapeError("toy model needs blocks >= 1 and d >= 1");
    if (!(cfg.adapter_scale > 0.0)) throw std::invalid_argument("toy model: adapter_scale must be > 0");
    if (!(cfg.residual_scale >= 0.0)) throw std::invalid_argument("toy model: residual_scale must be >= 0");
    if (cfg.beta > std::min(cfg.d, cfg.h)) {
        throw ShapeError(fmt::format("toy model: beta {} exceeds min(d, h) = {}", cfg.beta,
                                     std::min(cfg.d, cfg.h)));
    }
    Rng frozen_rng = rng.split();
    Rng head_rng = rng.split();
    Rng adapter_rng = rng.split();

    const std::size_t d = cfg.d, wide = 4 * cfg.d;
    ToyModel model;
    model.d = d;
    model.adapters_enabled = cfg.adapters_enabled;
    model.adapter_scale = cfg.adapter_scale;
    model.residual_scale = cfg.residual_scale;
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        ToyBlock b;
        b.mixer_w = kaiming_uniform(d, d, frozen_rng);
        b.mixer_b = bias_uniform(d, d, frozen_rng);
        b.mlp_w1 = kaiming_uniform(wide, d, frozen_rng);
        b.mlp_b1 = bias_uniform(wide, d, frozen_rng);
        b.mlp_w2 = kaiming_uniform(d, wide, frozen_rng);
        b.mlp_b2 = bias_uniform(d, wide, frozen_rng);
        b.adapter_1 = ColinAdapter::zeros(d, cfg.h, cfg.beta, cfg.alpha);
        b.adapter_2 = ColinAdapter::zeros(d, cfg.h, cfg.beta, cfg.alpha);
        init_adapter(b.adapter_1, cfg.init, adapter_rng);
        init_adapter(b.adapter_2, cfg.init, adapter_rng);
        model.blocks.push_back(std::move(b));
    }
    model.head_w = kaiming_uniform(d, d, head_rng);
    model.head_b = Matrix(1, d);
    return model;
}

Dataset make_synthetic_task(const TaskConfig& cfg, Rng& rng) {
    if (cfg.samples == 0 || cfg.tokens == 0 || cfg.d == 0) {
        throw std::invalid_argument("synthetic task needs samples, tokens, d >= 1");
    }
    Rng teacher_rng = rng.split();
    Rng input_rng = rng.split();
    const Matrix t1 = kaiming_uniform(cfg.teacher_hidden, cfg.d, teacher_rng);
    const Matrix t2 = kaiming_uniform(cfg.d, cfg.teacher_hidden, teacher_rng);
    const double bound = std::sqrt(3.0);

    Dataset data;
    for (std::size_t s = 0; s < cfg.samples; ++s) {
        Matrix x = uniform_matrix(cfg.tokens, cfg.d, -bound, bound, input_rng);
        Matrix h = x;
        if (!cfg.identity_teacher) axpy(cfg.teacher_scale, matmul_nt(gelu(matmul_nt(x, t1)), t2), h);
        data.targets.push_back(mean_rows(h));
        data.inputs.push_back(std::move(x));
    }
    return data;
}

TargetStats target_stats(const Dataset& data) {
    TargetStats st;
    std::size_t count = 0;
    for (const auto& y : data.targets)
        for (double v : y.data()) {
            st.mean += v;
            ++count;
        }
    if (count == 0) return st;
    st.mean /= static_cast<double>(count);
    for (const auto& y : data.targets)
        for (double v : y.data()) st.variance += (v - st.mean) * (v - st.mean);
    st.variance /= static_cast<double>(count);
    return st;
}

double evaluate(const ToyModel& model, const Dataset& data) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i)
        total += frobenius_norm_sq(model.forward(data.inputs[i]) - data.targets[i]);
    return total / static_cast<double>(data.size() * model.d);
}

std::vector<NamedRef> ToyGradients::omega() {
    std::vector<NamedRef> out{{"head_w", &head_w}, {"head_b", &head_b}};
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string pre =
            "block" + std::to_string(i / 2) + (i % 2 == 0 ? ".adapter_1." : ".adapter_2.");
        for (auto& r : adapters[i].parameters()) out.push_back({pre + r.name, r.value});
    }
    return out;
}

ToyGradients loss_and_gradients(const ToyModel& model, const Dataset& data,
                                 std::span<const std::size_t> indices) {
    std::vector<std::size_t> all;
    if (indices.empty()) {
        all.resize(data.size());
        std::iota(all.begin(), all.end(), 0);
        indices = all;
    }
    const std::size_t d = model.d;
    const double norm = 1.0 / static_cast<double>(indices.size() * d);

    ToyGradients g;
    g.head_w = Matrix(d, d);
    g.head_b = Matrix(1, d);
    std::vector<FusedAdapter> fused;
    if (model.adapters_enabled) {
        for (const ColinAdapter* a : model.adapters()) {
            g.adapters.push_back(AdapterGradients::zeros_like(*a));
            fused.push_back(fuse(*a));
        }
    }

    std::vector<BlockCache> caches(model.blocks.size());
    for (std::size_t idx : indices) {
        const Matrix& x = data.inputs.at(idx);
        const std::size_t tokens = x.rows();

        Matrix h = x;
        for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
            const ToyBlock& b = model.blocks[bi];
            BlockCache& c = caches[bi];
            Matrix z1 = h;
            axpy(model.residual_scale, linear(h, b.mixer_w, b.mixer_b), z1);
            Matrix u1 = model.adapters_enabled
                            ? scaled_adapter(fused[2 * bi], z1, model.adapter_scale, &c.a1)
                            : std::move(z1);
            gelu_and_grad(linear(u1, b.mlp_w1, b.mlp_b1), c.mlp_act, c.mlp_dact);
            Matrix z2 = u1;
            axpy(model.residual_scale, linear(c.mlp_act, b.mlp_w2, b.mlp_b2), z2);
            h = model.adapters_enabled ? scaled_adapter(fused[2 * bi + 1], z2, model.adapter_scale, &c.a2)
                                       : std::move(z2);
        }
        const Matrix pooled = mean_rows(h);
        const Matrix pred = linear(pooled, model.head_w, model.head_b);
        const Matrix err = pred - data.targets.at(idx);
        g.loss += norm * frobenius_norm_sq(err);

        const Matrix d_pred = (2.0 * norm) * err;
        g.head_w += matmul_tn(d_pred, pooled);
        g.head_b += d_pred;
        const Matrix d_pooled = matmul(d_pred, model.head_w);
        Matrix dh(tokens, d);
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t j = 0; j < d; ++j) dh(t, j) = d_pooled(0, j) / static_cast<double>(tokens);

        for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
            const ToyBlock& b = model.blocks[bi];
            const BlockCache& c = caches[bi];
            Matrix dz2 = model.adapters_enabled
                             ? scaled_adapter_backward(fused[2 * bi + 1], c.a2, dh, model.adapter_scale,
                                                       g.adapters[2 * bi + 1])
                             : std::move(dh);
            Matrix d_mlp = matmul(dz2, b.mlp_w2);
            for (std::size_t i = 0; i < d_mlp.size(); ++i)
                d_mlp.data()[i] *= model.residual_scale * c.mlp_dact.data()[i];
            Matrix du1 = dz2 + matmul(d_mlp, b.mlp_w1);
            Matrix dz1 = model.adapters_enabled
                             ? scaled_adapter_backward(fused[2 * bi], c.a1, du1, model.adapter_scale,
                                                       g.adapters[2 * bi])
                             : std::move(du1);
            dh = dz1;
            axpy(model.residual_scale, matmul(dz1, b.mixer_w), dh);
        }
    }
    if (model.adapters_enabled) {
        const std::vector<const ColinAdapter*> ads = model.adapters();
        for (std::size_t i = 0; i < ads.size(); ++i) pull_back_factors(*ads[i], g.adapters[i]);
    }
    return g;
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
    if (!(lambda >= 0.0)) throw std::invalid_argument("train: lambda must be >= 0");
    if (steps == 0) throw std::invalid_argument("train: steps must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
}

TrainingTrace train(ToyModel& model, const ParamPartition& partition, const Dataset& data,
                    const TrainConfig& cfg) {
    cfg.validate();
    if (data.size() == 0) throw std::invalid_argument("train: empty dataset");

    // The partition must describe exactly this model.
    const ParamPartition expected = model.partition();
    auto same = [](const std::vector<NamedRef>& a, const std::vector<NamedRef>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].value != b[i].value) return false;
        return true;
    };
    if (!same(partition.theta_f, expected.theta_f) || !same(partition.theta_t, expected.theta_t) ||
        !same(partition.theta_a, expected.theta_a)) {
        throw std::invalid_argument("train: partition does not belong to this model");
    }
    const std::vector<NamedRef> omega = partition.omega();
    {
        std::set<const Matrix*> frozen;
        for (const auto& r : partition.theta_f) frozen.insert(r.value);
        for (const auto& r : omega)
            if (frozen.contains(r.value)) throw std::invalid_argument("train: " + r.name + " is both frozen and trainable");
    }

    std::vector<Matrix> velocity;
    for (const auto& r : omega) velocity.emplace_back(r.value->rows(), r.value->cols());

    const std::size_t n = data.size();
    const std::size_t batch = cfg.batch == 0 || cfg.batch >= n ? n : cfg.batch;
    std::vector<std::size_t> indices(batch);

    TrainingTrace trace;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t i = 0; i < batch; ++i) indices[i] = (step * batch + i) % n;
        ToyGradients g = loss_and_gradients(model, data, indices);

        double ortho = 0.0;
        if (model.adapters_enabled) {
            const std::vector<const ColinAdapter*> ads = std::as_const(model).adapters();
            CompositeLoss cl = composite_loss(g.loss, g.adapters, ads, cfg.lambda);
            ortho = cl.ortho;
            g.adapters = std::move(cl.grads);
        }
        const double total = g.loss + cfg.lambda * ortho;
        if (!std::isfinite(total)) {
            throw DivergenceError(fmt::format("train: non-finite loss at step {}", step), step);
        }
        trace.task_loss.push_back(g.loss);
        trace.ortho_loss.push_back(ortho);
        trace.total_loss.push_back(total);

        std::vector<NamedRef> grads = g.omega();
        for (std::size_t i = 0; i < omega.size(); ++i) {
            Matrix& v = velocity[i];
            v *= cfg.momentum;
            v += *grads[i].value;
            axpy(-cfg.lr, v, *omega[i].value);
        }
    }
    trace.final_task_loss = evaluate(model, data);
    if (!std::isfinite(trace.final_task_loss)) {
        throw DivergenceError("train: non-finite final loss", cfg.steps);
    }
    return trace;
}

void write_trace_csv(std::ostream& out, const TrainingTrace& trace) {
    out << "step,task_loss,ortho_loss,total_loss\n";
    for (std::size_t i = 0; i < trace.task_loss.size(); ++i)
        out << fmt::format("{},{},{},{}\n", i, trace.task_loss[i], trace.ortho_loss[i],
                           trace.total_loss[i]);
}

AblationResult run_ablation(const ModelConfig& model_cfg, const TaskConfig& task_cfg,
                            const TrainConfig& train_cfg, std::size_t seeds,
                            std::uint64_t base_seed,
                            const std::function<void(const std::string&)>& progress) {
    if (seeds == 0) throw std::invalid_argument("ablation: seeds must be >= 1");
    AblationResult res;
    res.no_ol.name = "no_ol";
    res.ol.name = "ol";
    res.ol_svd.name = "ol_svd";
    res.frozen.name = "frozen_backbone";

    struct ArmSpec {
        AblationArm* arm;
        AdapterInit init;
        double lambda;
        bool enabled;
    };
    const ArmSpec specs[] = {{&res.no_ol, AdapterInit::random, 0.0, true},
                             {&res.ol, AdapterInit::random, train_cfg.lambda, true},
                             {&res.ol_svd, AdapterInit::svd, train_cfg.lambda, true},
                             {&res.frozen, AdapterInit::zero, 0.0, false}};

    for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t seed = base_seed + s;
        Rng root(seed);
        const Rng model_rng = root.split();
        Rng data_rng = root.split();
        const Dataset data = make_synthetic_task(task_cfg, data_rng);
        for (const ArmSpec& spec : specs) {
            ModelConfig mc = model_cfg;
            mc.init = spec.init;
            mc.adapters_enabled = spec.enabled;
            Rng rng = model_rng;
            ToyModel model = build_toy_model(mc, rng);
            ParamPartition part = model.partition();
            std::vector<Matrix> frozen_before;
            for (const auto& r : part.theta_f) frozen_before.push_back(*r.value);

            TrainConfig tc = train_cfg;
            tc.lambda = spec.lambda;
            tc.seed = seed;
            const TrainingTrace trace = train(model, part, data, tc);

            for (std::size_t i = 0; i < part.theta_f.size(); ++i)
                if (!bit_identical(*part.theta_f[i].value, frozen_before[i])) res.frozen_preserved = false;
            spec.arm->final_task_loss.push_back(trace.final_task_loss);
            if (progress) {
                progress(fmt::format("ablation seed {} arm {} initial L0 {:.6f} final L0 {:.6f}",
                                     seed, spec.arm->name, trace.task_loss.front(),
                                     trace.final_task_loss));
            }
        }
    }
    for (const ArmSpec& spec : specs) {
        const auto& v = spec.arm->final_task_loss;
        spec.arm->mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
    return res;
}

}  // namespace colin::toy
