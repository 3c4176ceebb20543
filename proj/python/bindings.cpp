#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "colin/adapter.hpp"
#include "colin/error.hpp"
#include "colin/gradcheck.hpp"
#include "colin/linalg.hpp"
#include "colin/serialize.hpp"
#include "colin/simulate.hpp"

namespace py = pybind11;
using colin::Matrix;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
    if (a.ndim() == 1) {
        const auto n = static_cast<std::size_t>(a.shape(0));
        return Matrix(1, n, std::vector<double>(a.data(), a.data() + n));
    }
    if (a.ndim() != 2) throw colin::ShapeError("expected a 1-D or 2-D array");
    const auto r = static_cast<std::size_t>(a.shape(0));
    const auto c = static_cast<std::size_t>(a.shape(1));
    return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Matrix& m) {
    Array out({m.rows(), m.cols()});
    std::copy(m.data().begin(), m.data().end(), out.mutable_data());
    return out;
}

std::vector<Matrix> to_matrices(const std::vector<Array>& xs) {
    std::vector<Matrix> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(to_matrix(x));
    return out;
}

py::list to_arrays(const std::vector<Matrix>& ms) {
    py::list out;
    for (const auto& m : ms) out.append(to_array(m));
    return out;
}

// Exposes a Matrix field as a numpy property (copy in, copy out).
template <class T>
void matrix_property(py::class_<T>& cls, const char* name, Matrix T::*field) {
    cls.def_property(
        name, [field](const T& self) { return to_array(self.*field); },
        [field](T& self, const Array& a) { self.*field = to_matrix(a); });
}

py::dict grads_dict(const colin::AdapterGradients& g) {
    py::dict out;
    for (const auto& p : g.parameters()) out[py::str(p.name)] = to_array(*p.value);
    out["d_input"] = to_array(g.d_input);
    out["w_down"] = to_array(g.w_down);
    out["w_up"] = to_array(g.w_up);
    return out;
}

py::dict trace_dict(const colin::sim::SimTrace& t) {
    py::dict out;
    out["arm"] = colin::sim::arm_name(t.arm);
    out["seed"] = t.seed;
    out["iters"] = t.iters;
    out["losses"] = t.losses;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core: adapter composition, gradients, simulation";

    py::register_exception<colin::ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<colin::FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<colin::ConvergenceError>(m, "ConvergenceError", PyExc_RuntimeError);
    py::register_exception<colin::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

    m.def("gelu", [](const Array& z) { return to_array(colin::gelu(to_matrix(z))); });

    m.def(
        "svd",
        [](const Array& a) {
            const auto r = colin::svd(to_matrix(a));
            return py::make_tuple(to_array(r.u), r.s, to_array(r.v));
        },
        "Thin SVD (u, s, v) with a = u·diag(s)·vᵀ, s descending.");

    m.def(
        "compose_weight",
        [](const Array& p, const std::vector<Array>& kernels, const Array& q) {
            const auto ks = to_matrices(kernels);
            return to_array(colin::compose_weight(to_matrix(p), ks, to_matrix(q)));
        },
        py::arg("p"), py::arg("kernels"), py::arg("q"));

    m.def(
        "param_count",
        [](std::size_t m_, std::size_t n, std::size_t beta, std::size_t alpha, std::size_t gamma) {
            const auto pc = colin::param_count(m_, n, beta, alpha, gamma);
            py::dict out;
            out["colin"] = pc.colin;
            out["factor_params"] = pc.factor_params;
            out["kernel_params"] = pc.kernel_params;
            out["dense_baseline"] = pc.dense_baseline;
            out["reduction"] = py::make_tuple(pc.reduction.num, pc.reduction.den);
            out["factor_reduction"] = py::make_tuple(pc.factor_reduction.num, pc.factor_reduction.den);
            return out;
        },
        py::arg("m"), py::arg("n"), py::arg("beta"), py::arg("alpha"), py::arg("gamma") = 1);

    py::class_<colin::ColinAdapter> adapter(m, "ColinAdapter");
    adapter
        .def(py::init([](std::size_t d, std::size_t h, std::size_t beta, std::size_t alpha,
                         std::string init, std::uint64_t seed, double lam) {
                 auto a = colin::ColinAdapter::zeros(d, h, beta, alpha);
                 a.ortho_lambda = lam;
                 colin::Rng rng(seed);
                 if (init == "svd") colin::svd_init(a, rng);
                 else if (init == "random") colin::random_factor_init(a, rng);
                 else if (init != "zero") throw std::invalid_argument("init must be svd|random|zero");
                 return a;
             }),
             py::arg("d"), py::arg("h"), py::arg("beta"), py::arg("alpha"),
             py::arg("init") = "svd", py::arg("seed") = 0,
             py::arg("ortho_lambda") = colin::kDefaultOrthoLambda)
        .def_readonly("d", &colin::ColinAdapter::d)
        .def_readonly("h", &colin::ColinAdapter::h)
        .def_readonly("beta", &colin::ColinAdapter::beta)
        .def_readonly("alpha", &colin::ColinAdapter::alpha)
        .def_readwrite("ortho_lambda", &colin::ColinAdapter::ortho_lambda)
        .def_property(
            "kernels", [](const colin::ColinAdapter& a) { return to_arrays(a.kernels); },
            [](colin::ColinAdapter& a, const std::vector<Array>& ks) { a.kernels = to_matrices(ks); })
        .def("w_down", [](const colin::ColinAdapter& a) { return to_array(a.w_down()); })
        .def("w_up", [](const colin::ColinAdapter& a) { return to_array(a.w_up()); })
        .def("validate", &colin::ColinAdapter::validate)
        .def("parameter_count", &colin::ColinAdapter::parameter_count);
    matrix_property(adapter, "p_down", &colin::ColinAdapter::p_down);
    matrix_property(adapter, "q_down", &colin::ColinAdapter::q_down);
    matrix_property(adapter, "p_up", &colin::ColinAdapter::p_up);
    matrix_property(adapter, "q_up", &colin::ColinAdapter::q_up);
    matrix_property(adapter, "b_down", &colin::ColinAdapter::b_down);
    matrix_property(adapter, "b_up", &colin::ColinAdapter::b_up);
    matrix_property(adapter, "dw_kernel", &colin::ColinAdapter::dw_kernel);
    matrix_property(adapter, "dw_bias", &colin::ColinAdapter::dw_bias);

    py::class_<colin::FusedAdapter> fused(m, "FusedAdapter");
    fused.def_readonly("d", &colin::FusedAdapter::d)
        .def_readonly("h", &colin::FusedAdapter::h)
        .def("forward", [](const colin::FusedAdapter& f, const Array& x) {
            return to_array(f.forward(to_matrix(x)));
        });
    matrix_property(fused, "w_down", &colin::FusedAdapter::w_down);
    matrix_property(fused, "w_up", &colin::FusedAdapter::w_up);

    m.def("fuse", &colin::fuse);
    m.def("adapter_forward", [](const colin::ColinAdapter& a, const Array& x) {
        return to_array(colin::adapter_forward(a, to_matrix(x)).y);
    });
    m.def(
        "adapter_backward",
        [](const colin::ColinAdapter& a, const Array& x, const Array& d_y) {
            const auto out = colin::adapter_forward(a, to_matrix(x));
            return grads_dict(colin::adapter_backward(a, out.cache, to_matrix(d_y)));
        },
        "Gradients of ⟨d_y, forward(x)⟩ keyed by parameter name.");
    m.def("orthogonal_loss", [](const colin::ColinAdapter& a) {
        const auto o = colin::orthogonal_loss(a);
        py::dict grads;
        grads["p_down"] = to_array(o.p_down);
        grads["q_down"] = to_array(o.q_down);
        grads["p_up"] = to_array(o.p_up);
        grads["q_up"] = to_array(o.q_up);
        return py::make_tuple(o.loss, grads);
    });
    m.def("adapter_to_json", [](const colin::ColinAdapter& a) { return colin::to_json(a).dump(); });
    m.def("adapter_from_json", [](const std::string& s) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(s);
        } catch (const nlohmann::json::exception& e) {
            throw colin::FormatError(e.what());
        }
        return colin::adapter_from_json(j);
    });

    py::class_<colin::sim::SimConfig>(m, "SimConfig")
        .def(py::init([](std::size_t m_, std::size_t k, std::size_t n, double lr, std::size_t iters,
                         std::size_t seeds, double ol_weight, std::size_t record_every,
                         std::uint64_t seed) {
                 colin::sim::SimConfig c{};
                 c.m = m_;
                 c.k = k;
                 c.n = n;
                 c.lr = lr;
                 c.iters = iters;
                 c.seeds = seeds;
                 c.ol_weight = ol_weight;
                 c.record_every = record_every;
                 c.base_seed = seed;
                 c.validate();
                 return c;
             }),
             py::arg("m") = 100, py::arg("k") = 30, py::arg("n") = 5000, py::arg("lr") = 1e-5,
             py::arg("iters") = 2000, py::arg("seeds") = 20, py::arg("ol_weight") = 1.0,
             py::arg("record_every") = 1, py::arg("seed") = 0)
        .def_readonly("m", &colin::sim::SimConfig::m)
        .def_readonly("k", &colin::sim::SimConfig::k)
        .def_readonly("n", &colin::sim::SimConfig::n)
        .def_readonly("iters", &colin::sim::SimConfig::iters)
        .def_readonly("seeds", &colin::sim::SimConfig::seeds);

    m.def(
        "run_sim_single",
        [](const colin::sim::SimConfig& cfg, std::uint64_t seed, bool with_ol) {
            py::gil_scoped_release release;
            auto t = colin::sim::run_sim_single(cfg, seed, with_ol);
            py::gil_scoped_acquire acquire;
            return trace_dict(t);
        },
        py::arg("cfg"), py::arg("seed"), py::arg("with_ol"));

    m.def(
        "run_sim",
        [](const colin::sim::SimConfig& cfg, unsigned threads) {
            colin::sim::SimRun run;
            {
                py::gil_scoped_release release;
                run = colin::sim::run_sim(cfg, threads);
            }
            py::list traces;
            for (const auto& t : run.traces) traces.append(trace_dict(t));
            py::dict out;
            out["traces"] = traces;
            out["final_mean_with_ol"] = run.summary.final_mean_with_ol;
            out["final_mean_without_ol"] = run.summary.final_mean_without_ol;
            out["final_gap"] = run.summary.final_gap;
            return out;
        },
        py::arg("cfg"), py::arg("threads") = 0);

    m.def(
        "delta_w",
        [](std::size_t m_, std::size_t k, std::size_t n, std::vector<double> etas,
           std::uint64_t seed, const std::string& init) {
            using colin::check::FactorInit;
            FactorInit fi = FactorInit::random;
            if (init == "orthonormal") fi = FactorInit::orthonormal;
            else if (init == "planted") fi = FactorInit::planted;
            else if (init != "random") throw std::invalid_argument("init must be random|orthonormal|planted");
            const auto rep = colin::check::delta_w_experiment(m_, k, n, etas, seed, fi);
            py::list points;
            for (const auto& p : rep.points) {
                py::dict d;
                d["eta"] = p.eta;
                d["residual"] = p.residual;
                d["abs_residual"] = p.abs_residual;
                d["second_order"] = p.second_order;
                d["bound"] = p.bound;
                d["ideal_residual"] = p.ideal_residual;
                points.append(d);
            }
            py::dict out;
            out["points"] = points;
            out["ratios"] = rep.ratios;
            out["slope"] = rep.slope;
            return out;
        },
        py::arg("m"), py::arg("k"), py::arg("n"),
        py::arg("etas") = std::vector<double>{1e-3, 5e-4, 2.5e-4}, py::arg("seed") = 0,
        py::arg("init") = "random");
}
