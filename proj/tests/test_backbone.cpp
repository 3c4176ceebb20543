#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "colin/backbone.hpp"
#include "colin/error.hpp"
#include "colin/gradcheck.hpp"
#include "colin/linalg.hpp"
#include "oracles.hpp"

using colin::Matrix;
using colin::Rng;
namespace toy = colin::toy;

namespace {

struct Setup {
    toy::ToyModel model;
    toy::Dataset data;
};

Setup make_setup(const toy::ModelConfig& mc, const toy::TaskConfig& tc, std::uint64_t seed) {
    Rng root(seed);
    Rng model_rng = root.split();
    Rng data_rng = root.split();
    Setup s;
    s.model = toy::build_toy_model(mc, model_rng);
    s.data = toy::make_synthetic_task(tc, data_rng);
    return s;
}

toy::ModelConfig tiny_model() {
    toy::ModelConfig mc;
    mc.blocks = 2;
    mc.d = 6;
    mc.h = 4;
    mc.beta = 2;
    mc.alpha = 2;
    return mc;
}

toy::TaskConfig tiny_task() {
    toy::TaskConfig tc;
    tc.d = 6;
    tc.samples = 3;
    tc.tokens = 3;
    tc.teacher_hidden = 5;
    return tc;
}

std::vector<Matrix> snapshot(const std::vector<colin::NamedRef>& refs) {
    std::vector<Matrix> out;
    for (const auto& r : refs) out.push_back(*r.value);
    return out;
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("two blocks carry four adapters and the partition counts add up") {
    toy::ModelConfig mc;
    mc.d = 64;
    mc.h = 16;
    mc.beta = 8;
    mc.alpha = 4;
    Rng rng(0);
    toy::ToyModel model = toy::build_toy_model(mc, rng);
    CHECK(model.adapters().size() == 4);
    const auto part = model.partition();

    const std::size_t d = 64, h = 16;
    const std::size_t per_block = (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
    CHECK(part.frozen_count() == 2 * per_block);
    CHECK(part.count(part.theta_t) == d * d + d);
    const auto pc = colin::param_count(h, d, 8, 4, 2);
    const std::size_t per_adapter = pc.colin + (h + d) + (3 * h + h);
    CHECK(part.adapter_count() == 4 * per_adapter);
    CHECK(part.trainable_count() == 4 * per_adapter + d * d + d);
    for (const auto& r : part.theta_f) CHECK(r.name.find("adapter") == std::string::npos);
    for (const auto& r : part.theta_a) CHECK(r.name.find("adapter_") != std::string::npos);

    mc.adapters_enabled = false;
    Rng rng2(0);
    toy::ToyModel plain = toy::build_toy_model(mc, rng2);
    CHECK(plain.partition().theta_a.empty());
}

TEST_CASE("build is deterministic per seed and validates its config") {
    const auto mc = tiny_model();
    Rng a(9), b(9);
    const auto m1 = toy::build_toy_model(mc, a);
    const auto m2 = toy::build_toy_model(mc, b);
    CHECK(colin::bit_identical(m1.blocks[1].mlp_w2, m2.blocks[1].mlp_w2));
    CHECK(colin::bit_identical(m1.blocks[0].adapter_2.p_up, m2.blocks[0].adapter_2.p_up));
    CHECK(colin::bit_identical(m1.head_w, m2.head_w));

    auto bad = mc;
    bad.beta = 5;
    CHECK_THROWS_AS(toy::build_toy_model(bad, a), colin::ShapeError);
    bad = mc;
    bad.adapter_scale = 0.0;
    CHECK_THROWS_AS(toy::build_toy_model(bad, a), std::invalid_argument);
}

TEST_CASE("identity teacher is matched by the identity model") {
    auto mc = tiny_model();
    mc.init = toy::AdapterInit::zero;
    mc.residual_scale = 0.0;
    auto tc = tiny_task();
    tc.identity_teacher = true;
    tc.samples = 5;
    auto s = make_setup(mc, tc, 4);
    s.model.head_w = Matrix::identity(6);
    CHECK(toy::evaluate(s.model, s.data) <= 1e-28);
}

TEST_CASE("dataset is deterministic and its stats match a direct computation") {
    const auto tc = tiny_task();
    Rng a(3), b(3);
    const auto d1 = toy::make_synthetic_task(tc, a);
    const auto d2 = toy::make_synthetic_task(tc, b);
    REQUIRE(d1.size() == 3);
    for (std::size_t i = 0; i < d1.size(); ++i) {
        CHECK(colin::bit_identical(d1.inputs[i], d2.inputs[i]));
        CHECK(colin::bit_identical(d1.targets[i], d2.targets[i]));
        CHECK(d1.inputs[i].rows() == tc.tokens);
        for (double v : d1.inputs[i].data()) CHECK(std::abs(v) <= std::sqrt(3.0));
    }
    std::vector<double> all;
    for (const auto& y : d1.targets) all.insert(all.end(), y.data().begin(), y.data().end());
    const double mean = std::accumulate(all.begin(), all.end(), 0.0) / all.size();
    double var = 0.0;
    for (double v : all) var += (v - mean) * (v - mean);
    var /= all.size();
    const auto st = toy::target_stats(d1);
    CHECK(st.mean == doctest::Approx(mean).epsilon(1e-14));
    CHECK(st.variance == doctest::Approx(var).epsilon(1e-14));
}

TEST_CASE("loss_and_gradients agrees with finite differences") {
    auto mc = tiny_model();
    mc.adapter_scale = 0.5;
    mc.residual_scale = 0.7;
    auto s = make_setup(mc, tiny_task(), 2);
    // Fully random adapters so every field carries a sizeable gradient.
    std::uint64_t aseed = 100;
    for (colin::ColinAdapter* a : s.model.adapters()) *a = oracle::random_adapter(6, 4, 2, 2, aseed++);
    s.model.head_b = Matrix(1, 6, 0.1);

    toy::ToyGradients g = toy::loss_and_gradients(s.model, s.data);
    CHECK(g.loss == doctest::Approx(toy::evaluate(s.model, s.data)).epsilon(1e-13));

    auto part = s.model.partition();
    const auto omega = part.omega();
    const auto numeric = colin::check::fd_gradient(
        [&] { return toy::loss_and_gradients(s.model, s.data).loss; }, omega);

    const auto analytic = g.omega();
    REQUIRE(analytic.size() == omega.size());
    std::vector<colin::NamedConstRef> cref;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        CHECK(analytic[i].name == omega[i].name);
        cref.push_back({analytic[i].name, analytic[i].value});
    }
    const auto rep = colin::check::compare(cref, numeric, 1e-5);
    for (const auto& e : rep.entries) {
        CAPTURE(e.name);
        CAPTURE(e.max_abs_error);
        CAPTURE(e.worst_index);
        CHECK(e.max_rel_error <= 1e-5);
    }
    CHECK(rep.passed);
}

TEST_CASE("training touches only the trainable set") {
    auto s = make_setup(tiny_model(), tiny_task(), 5);
    auto part = s.model.partition();
    const auto frozen = snapshot(part.theta_f);
    const auto before = snapshot(part.omega());
    toy::TrainConfig tc;
    tc.steps = 20;
    (void)toy::train(s.model, part, s.data, tc);
    for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(colin::bit_identical(*part.theta_f[i].value, frozen[i]));
    bool moved = false;
    const auto omega = part.omega();
    for (std::size_t i = 0; i < omega.size(); ++i) moved |= !colin::bit_identical(*omega[i].value, before[i]);
    CHECK(moved);
}

TEST_CASE("zero learning rate gives a flat trace and an unchanged model") {
    auto s = make_setup(tiny_model(), tiny_task(), 6);
    auto part = s.model.partition();
    const auto before = snapshot(part.omega());
    toy::TrainConfig tc;
    tc.lr = 0.0;
    tc.steps = 5;
    const auto tr = toy::train(s.model, part, s.data, tc);
    for (double l : tr.task_loss) CHECK(l == tr.task_loss.front());
    const auto omega = part.omega();
    for (std::size_t i = 0; i < omega.size(); ++i) CHECK(colin::bit_identical(*omega[i].value, before[i]));
    CHECK(tr.final_task_loss == doctest::Approx(tr.task_loss.front()).epsilon(1e-13));
}

TEST_CASE("total loss is the task loss plus lambda times the orthogonal sum") {
    auto s = make_setup(tiny_model(), tiny_task(), 7);
    double ortho0 = 0.0;
    for (const auto* a : std::as_const(s.model).adapters()) {
        for (const auto* f : {&a->p_down, &a->q_down, &a->p_up, &a->q_up}) ortho0 += oracle::gram_penalty(*f);
    }
    const double task0 = toy::evaluate(s.model, s.data);
    auto part = s.model.partition();
    toy::TrainConfig tc;
    tc.lambda = 0.01;
    tc.steps = 10;
    const auto tr = toy::train(s.model, part, s.data, tc);
    CHECK(tr.ortho_loss.front() == doctest::Approx(ortho0).epsilon(1e-12));
    CHECK(tr.task_loss.front() == doctest::Approx(task0).epsilon(1e-12));
    for (std::size_t i = 0; i < tr.total_loss.size(); ++i)
        CHECK(std::abs(tr.total_loss[i] - (tr.task_loss[i] + 0.01 * tr.ortho_loss[i])) <= 1e-12);

    std::ostringstream csv;
    toy::write_trace_csv(csv, tr);
    CHECK(csv.str().rfind("step,task_loss,ortho_loss,total_loss\n", 0) == 0);
}

TEST_CASE("misuse is rejected") {
    auto s = make_setup(tiny_model(), tiny_task(), 8);
    auto other = make_setup(tiny_model(), tiny_task(), 8);
    const auto foreign = other.model.partition();
    CHECK_THROWS_AS(toy::train(s.model, foreign, s.data, {}), std::invalid_argument);

    auto part = s.model.partition();
    part.theta_t.push_back(part.theta_f.front());
    CHECK_THROWS_AS(toy::train(s.model, part, s.data, {}), std::invalid_argument);

    toy::TrainConfig tc;
    tc.momentum = 1.0;
    CHECK_THROWS_AS(toy::train(s.model, s.model.partition(), s.data, tc), std::invalid_argument);

    tc = {};
    tc.lr = 1e6;
    tc.steps = 50;
    CHECK_THROWS_AS(toy::train(s.model, s.model.partition(), s.data, tc), colin::DivergenceError);

    CHECK_THROWS_AS(s.model.forward(Matrix(3, 5)), colin::ShapeError);
}

TEST_CASE("momentum and minibatches run and reduce the loss") {
    for (double mom : {0.0, 0.5}) {
        auto s = make_setup(tiny_model(), tiny_task(), 9);
        auto part = s.model.partition();
        toy::TrainConfig tc;
        tc.momentum = mom;
        tc.batch = 2;
        tc.steps = 60;
        const auto tr = toy::train(s.model, part, s.data, tc);
        CHECK(tr.final_task_loss < tr.task_loss.front());
    }
}

TEST_CASE("default task: 500 steps halve the loss" * doctest::timeout(300)) {
    auto s = make_setup({}, {}, 1);
    auto part = s.model.partition();
    const auto tr = toy::train(s.model, part, s.data, {});
    CHECK(tr.task_loss.size() == 500);
    CHECK(tr.final_task_loss < 0.5 * tr.task_loss.front());
}

TEST_CASE("adapters beat the frozen backbone on average" * doctest::timeout(600)) {
    double with = 0.0, without = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (bool enabled : {true, false}) {
            toy::ModelConfig mc;
            mc.adapters_enabled = enabled;
            auto s = make_setup(mc, {}, seed);
            auto part = s.model.partition();
            const auto tr = toy::train(s.model, part, s.data, {});
            (enabled ? with : without) += tr.final_task_loss / 5.0;
        }
    }
    CHECK(with < without);
}

}  // TEST_SUITE
