#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "psp/errors.hpp"

namespace psp {

using Real = double;

// Dense row-major matrix. Every tensor in the model is two-dimensional;
// vectors are stored as 1 x n.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  Real operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<Real>& data() noexcept { return data_; }
  const std::vector<Real>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  void fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

inline std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + " x " + std::to_string(m.cols()) + "]";
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
  }
}

// a += scale * b
inline void axpy(Matrix& a, const Matrix& b, Real scale = 1.0) {
  require_same_shape(a, b, "axpy");
  auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += scale * bd[i];
}

inline Matrix random_normal(std::size_t rows, std::size_t cols, Real stddev,
                            std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<Real> dist(0.0, stddev);
  for (auto& v : m.data()) v = dist(rng);
  return m;
}

// FNV-1a over the raw bytes; used to prove bitwise immutability.
inline std::uint64_t checksum(const Matrix& m, std::uint64_t seed = 1469598103934665603ULL) {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data().data());
  for (std::size_t i = 0; i < m.size() * sizeof(Real); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  h ^= m.rows() * 31 + m.cols();
  return h;
}

}  // namespace psp
