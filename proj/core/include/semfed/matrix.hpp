#pragma once

#include <cstddef>
#include <vector>

namespace semfed {

// Dense row-major matrix of doubles. Rows are feature vectors throughout the
// library, so "x * W" maps a batch of row vectors through W.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A^T * B  (A is k x m, B is k x n, C is m x n)
Matrix matmul_transa(const Matrix& a, const Matrix& b);
// C = A * B^T  (A is m x k, B is n x k, C is m x n)
Matrix matmul_transb(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

double dot(const double* a, const double* b, std::size_t n);
double norm2(const double* a, std::size_t n);

// y = x / max(||x||, eps); returns the pre-clamp norm.
double normalize_row(const double* x, double* y, std::size_t n, double eps = 1e-12);

}  // namespace semfed
