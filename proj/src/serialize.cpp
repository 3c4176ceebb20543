#include "colin/serialize.hpp"

#include <fstream>

#include "colin/error.hpp"

namespace colin {

using nlohmann::json;

namespace {

const json& field(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw FormatError(std::string("missing field '") + key + "'");
    return *it;
}

std::size_t count_field(const json& j, const char* key) {
    const json& v = field(j, key);
    if (!v.is_number_unsigned()) {
        throw FormatError(std::string("field '") + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

void check_format(const json& j) {
    if (!j.is_object()) throw FormatError("adapter JSON must be an object");
    const std::string fmt = field(j, "format").get<std::string>();
    if (fmt != kAdapterFormat) throw FormatError("unsupported adapter format '" + fmt + "'");
}

}  // namespace

json to_json(const Matrix& m) {
    return json{{"rows", m.rows()},
                {"cols", m.cols()},
                {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

Matrix matrix_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("matrix JSON must be an object");
    const std::size_t rows = count_field(j, "rows");
    const std::size_t cols = count_field(j, "cols");
    const json& data = field(j, "data");
    if (!data.is_array()) throw FormatError("matrix 'data' must be an array");
    std::vector<double> values;
    values.reserve(data.size());
    for (const auto& v : data) {
        if (!v.is_number()) throw FormatError("matrix 'data' holds a non-number");
        values.push_back(v.get<double>());
    }
    if (values.size() != rows * cols) {
        throw FormatError("matrix data length " + std::to_string(values.size()) + " != " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    }
    return Matrix(rows, cols, std::move(values));
}

json to_json(const ColinAdapter& a) {
    json j{{"format", kAdapterFormat},
           {"d", a.d},
           {"h", a.h},
           {"beta", a.beta},
           {"alpha", a.alpha},
           {"lambda", a.ortho_lambda}};
    json kernels = json::array();
    for (const auto& k : a.kernels) kernels.push_back(to_json(k));
    j["p_down"] = to_json(a.p_down);
    j["q_down"] = to_json(a.q_down);
    j["p_up"] = to_json(a.p_up);
    j["q_up"] = to_json(a.q_up);
    j["kernels"] = std::move(kernels);
    j["b_down"] = to_json(a.b_down);
    j["b_up"] = to_json(a.b_up);
    j["dw_kernel"] = to_json(a.dw_kernel);
    j["dw_bias"] = to_json(a.dw_bias);
    return j;
}

ColinAdapter adapter_from_json(const json& j) {
    check_format(j);
    if (j.value("fused", false)) throw FormatError("expected an unfused adapter, got a fused one");
    try {
        ColinAdapter a;
        a.d = count_field(j, "d");
        a.h = count_field(j, "h");
        a.beta = count_field(j, "beta");
        a.alpha = count_field(j, "alpha");
        a.ortho_lambda = j.value("lambda", kDefaultOrthoLambda);
        a.p_down = matrix_from_json(field(j, "p_down"));
        a.q_down = matrix_from_json(field(j, "q_down"));
        a.p_up = matrix_from_json(field(j, "p_up"));
        a.q_up = matrix_from_json(field(j, "q_up"));
        for (const auto& k : field(j, "kernels")) a.kernels.push_back(matrix_from_json(k));
        a.b_down = matrix_from_json(field(j, "b_down"));
        a.b_up = matrix_from_json(field(j, "b_up"));
        a.dw_kernel = matrix_from_json(field(j, "dw_kernel"));
        a.dw_bias = matrix_from_json(field(j, "dw_bias"));
        a.validate();
        return a;
    } catch (const ShapeError& e) {
        throw FormatError(std::string("inconsistent adapter: ") + e.what());
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed adapter: ") + e.what());
    }
}

json to_json(const FusedAdapter& f) {
    return json{{"format", kAdapterFormat},
                {"fused", true},
                {"d", f.d},
                {"h", f.h},
                {"w_down", to_json(f.w_down)},
                {"w_up", to_json(f.w_up)},
                {"b_down", to_json(f.b_down)},
                {"b_up", to_json(f.b_up)},
                {"dw_kernel", to_json(f.dw_kernel)},
                {"dw_bias", to_json(f.dw_bias)}};
}

FusedAdapter fused_from_json(const json& j) {
    check_format(j);
    if (!j.value("fused", false)) throw FormatError("expected a fused adapter");
    FusedAdapter f;
    f.d = count_field(j, "d");
    f.h = count_field(j, "h");
    f.w_down = matrix_from_json(field(j, "w_down"));
    f.w_up = matrix_from_json(field(j, "w_up"));
    f.b_down = matrix_from_json(field(j, "b_down"));
    f.b_up = matrix_from_json(field(j, "b_up"));
    f.dw_kernel = matrix_from_json(field(j, "dw_kernel"));
    f.dw_bias = matrix_from_json(field(j, "dw_bias"));
    if (f.w_down.rows() != f.h || f.w_down.cols() != f.d || f.w_up.rows() != f.d ||
        f.w_up.cols() != f.h) {
        throw FormatError("fused adapter weights do not match d/h");
    }
    return f;
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace colin
