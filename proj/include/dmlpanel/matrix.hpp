#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmlpanel/kernels.hpp"

namespace dmlpanel {

// Dense row-major matrix of doubles.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* row(std::size_t i) { return data_.data() + i * cols_; }
    const double* row(std::size_t i) const { return data_.data() + i * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// y = A x
inline std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
    std::vector<double> y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = kernels::dot(a.row(i), x.data(), a.cols());
    return y;
}

// y = A' x
inline std::vector<double> matvec_transpose(const Matrix& a, std::span<const double> x) {
    std::vector<double> y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) kernels::axpy(x[i], a.row(i), y.data(), a.cols());
    return y;
}

inline Matrix gather_rows(const Matrix& a, std::span<const int> rows) {
    Matrix out(rows.size(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = a.row(static_cast<std::size_t>(rows[i]));
        double* dst = out.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) dst[j] = src[j];
    }
    return out;
}

template <class T>
std::vector<T> gather(std::span<const T> v, std::span<const int> idx) {
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[static_cast<std::size_t>(idx[i])];
    return out;
}

}  // namespace dmlpanel
