#include "saga/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace saga {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor: shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  if (shape_.empty()) return 1;
  throw DimensionError("tensor: rows() needs rank <= 2, got " + shape_to_string(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw DimensionError("tensor: cols() needs rank <= 2, got " + shape_to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("tensor: item() on shape " + shape_to_string(shape_));
  }
  return data_[0];
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(shape_) + " as " +
                         shape_to_string(shape));
  }
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return data_.empty() ||
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

namespace kernels {

namespace {
constexpr std::size_t kBlockJ = 256;
constexpr std::size_t kBlockP = 128;
}  // namespace

void gemm_nn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  // Blocked over (j, p); every c[i][j] still accumulates p in ascending order.
  for (std::size_t j0 = 0; j0 < n; j0 += kBlockJ) {
    const std::size_t j1 = std::min(n, j0 + kBlockJ);
    for (std::size_t p0 = 0; p0 < k; p0 += kBlockP) {
      const std::size_t p1 = std::min(k, p0 + kBlockP);
      std::size_t i = 0;
      for (; i + 4 <= m; i += 4) {
        double* c0 = c.data() + i * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        const double* a0 = a.data() + i * k;
        for (std::size_t p = p0; p < p1; ++p) {
          const double v0 = a0[p];
          const double v1 = a0[k + p];
          const double v2 = a0[2 * k + p];
          const double v3 = a0[3 * k + p];
          const double* br = b.data() + p * n;
          for (std::size_t j = j0; j < j1; ++j) {
            const double bv = br[j];
            c0[j] += v0 * bv;
            c1[j] += v1 * bv;
            c2[j] += v2 * bv;
            c3[j] += v3 * bv;
          }
        }
      }
      for (; i < m; ++i) {
        double* ci = c.data() + i * n;
        const double* ai = a.data() + i * k;
        for (std::size_t p = p0; p < p1; ++p) {
          const double v = ai[p];
          const double* br = b.data() + p * n;
          for (std::size_t j = j0; j < j1; ++j) ci[j] += v * br[j];
        }
      }
    }
  }
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  if (m * k * n < 4096) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b.data() + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
    return;
  }
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  // The dot-product form above sums from zero and then adds; keep that
  // contract so both paths agree with a fresh accumulator.
  std::vector<double> tmp(m * n, 0.0);
  gemm_nn_acc(a, bt, tmp, m, k, n);
  for (std::size_t i = 0; i < m * n; ++i) c[i] += tmp[i];
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  // c[i][j] += sum_p a[p][i] b[p][j], p ascending. Four output rows at a time
  // keep the touched part of c in cache.
  for (std::size_t j0 = 0; j0 < n; j0 += kBlockJ) {
    const std::size_t j1 = std::min(n, j0 + kBlockJ);
    std::size_t i = 0;
    for (; i + 4 <= k; i += 4) {
      double* __restrict c0 = c.data() + i * n;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      for (std::size_t p = 0; p < m; ++p) {
        const double* ap = a.data() + p * k + i;
        const double v0 = ap[0], v1 = ap[1], v2 = ap[2], v3 = ap[3];
        const double* __restrict bp = b.data() + p * n;
        for (std::size_t j = j0; j < j1; ++j) {
          const double bv = bp[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    }
    for (; i < k; ++i) {
      double* ci = c.data() + i * n;
      for (std::size_t p = 0; p < m; ++p) {
        const double v = a[p * k + i];
        const double* bp = b.data() + p * n;
        for (std::size_t j = j0; j < j1; ++j) ci[j] += v * bp[j];
      }
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::gemm_nn_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace saga
