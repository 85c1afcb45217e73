#include "hicd/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "hicd/error.hpp"

namespace hicd::num {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
  if (!all_finite()) throw NumericError("tensor contains a non-finite value");
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

Tensor Tensor::scalar(double value) { return Tensor(Shape{1, 1}, {value}); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::rows() const { return shape_.empty() ? 1 : shape_[0]; }

std::size_t Tensor::cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

namespace kernel {

// The kernels only vectorize across independent output columns, never across
// a reduction, so the AVX2 clone returns the same bits as the baseline one.
#if defined(__x86_64__) && defined(__GNUC__)
#define HICD_KERNEL __attribute__((target_clones("avx2", "default")))
#else
#define HICD_KERNEL
#endif

HICD_KERNEL void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* o0 = out + i * n;
    double* o1 = o0 + n;
    double* o2 = o1 + n;
    double* o3 = o2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = b_row[j];
        o0[j] += v0 * bj;
        o1[j] += v1 * bj;
        o2[j] += v2 * bj;
        o3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* out_row = out + i * n;
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

HICD_KERNEL void gemm_nt(const double* a, const double* b, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b_row = b + j * k;
      // Four independent partial sums; fixed order keeps results reproducible.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += a_row[p] * b_row[p];
        s1 += a_row[p + 1] * b_row[p + 1];
        s2 += a_row[p + 2] * b_row[p + 2];
        s3 += a_row[p + 3] * b_row[p + 3];
      }
      for (; p < k; ++p) s0 += a_row[p] * b_row[p];
      out[i * n + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

HICD_KERNEL void gemm_tn(const double* a, const double* b, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    const double* a0 = a + p * m;
    const double* b0 = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double v0 = a0[i], v1 = a0[m + i], v2 = a0[2 * m + i], v3 = a0[3 * m + i];
      double* out_row = out + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        double o = out_row[j];
        o += v0 * b0[j];
        o += v1 * b0[n + j];
        o += v2 * b0[2 * n + j];
        o += v3 * b0[3 * n + j];
        out_row[j] = o;
      }
    }
  }
  for (; p < k; ++p) {
    const double* a_row = a + p * m;
    const double* b_row = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a_row[i];
      double* out_row = out + i * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

}  // namespace kernel

}  // namespace hicd::num
