#include "colin/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "colin/error.hpp"

#include <Eigen/Core>

namespace colin {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

// Fixed-order dot product with four partial sums.
double dot(const double* x, const double* y, std::size_t n) noexcept {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + shape_str());
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer list");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
}

std::string Matrix::shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "sub");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (auto& v : data_) v *= s;
    return *this;
}

void Matrix::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const Matrix& m) { return {m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }
View view(Matrix& m) { return {m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + a.shape_str() + " x " +
                         b.shape_str());
    }
    Matrix c(a.rows(), b.cols());
    if (a.cols() > 0) view(c).noalias() = view(a) * view(b);
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: row counts differ " + a.shape_str() + "^T x " +
                         b.shape_str());
    }
    Matrix c(a.cols(), b.cols());
    if (a.rows() > 0) view(c).noalias() = view(a).transpose() * view(b);
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: column counts differ " + a.shape_str() + " x " +
                         b.shape_str() + "^T");
    }
    Matrix c(a.rows(), b.rows());
    if (a.cols() > 0) view(c).noalias() = view(a) * view(b).transpose();
    return c;
}

void gemm(double alpha, const Matrix& a, Trans ta, const Matrix& b, Trans tb, double beta,
          Matrix& c) {
    const std::size_t m = ta == Trans::yes ? a.cols() : a.rows();
    const std::size_t ka = ta == Trans::yes ? a.rows() : a.cols();
    const std::size_t kb = tb == Trans::yes ? b.cols() : b.rows();
    const std::size_t n = tb == Trans::yes ? b.rows() : b.cols();
    if (ka != kb || c.rows() != m || c.cols() != n) {
        throw ShapeError("gemm: " + a.shape_str() + (ta == Trans::yes ? "^T" : "") + " x " +
                         b.shape_str() + (tb == Trans::yes ? "^T" : "") + " into " +
                         c.shape_str());
    }
    auto out = view(c);
    if (beta == 0.0)
        out.setZero();
    else if (beta != 1.0)
        out *= beta;
    if (ka == 0 || alpha == 0.0) return;
    const auto av = view(a);
    const auto bv = view(b);
    if (ta == Trans::no && tb == Trans::no)
        out.noalias() += alpha * (av * bv);
    else if (ta == Trans::yes && tb == Trans::no)
        out.noalias() += alpha * (av.transpose() * bv);
    else if (ta == Trans::no && tb == Trans::yes)
        out.noalias() += alpha * (av * bv.transpose());
    else
        out.noalias() += alpha * (av.transpose() * bv.transpose());
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) { return a + b; }
Matrix sub(const Matrix& a, const Matrix& b) { return a - b; }
Matrix scale(const Matrix& a, double s) { return a * s; }

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
    return c;
}

void axpy(double s, const Matrix& x, Matrix& y) {
    require_same_shape(x, y, "axpy");
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += s * xd[i];
}

double frobenius_norm_sq(const Matrix& a) {
    auto d = a.data();
    return dot(d.data(), d.data(), d.size());
}

double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

double inner(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "inner");
    return dot(a.data().data(), b.data().data(), a.size());
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
    return m;
}

double trace(const Matrix& a) {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
    return t;
}

Matrix column_sums(const Matrix& a) {
    Matrix s(1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += r[j];
    }
    return s;
}

void add_row_broadcast(Matrix& a, const Matrix& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row_broadcast: " + row.shape_str() + " onto " + a.shape_str());
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) r[j] += row(0, j);
    }
}

bool all_finite(const Matrix& a) noexcept {
    return std::all_of(a.data().begin(), a.data().end(),
                       [](double v) { return std::isfinite(v); });
}

bool bit_identical(const Matrix& a, const Matrix& b) noexcept {
    return a.same_shape(b) &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace colin
